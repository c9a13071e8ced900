//! Principal component analysis via cyclic Jacobi on the covariance matrix.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Orthonormal rank-`R` projection fitted on pooled frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaTransform {
    pub mean: Array1<f64>,
    /// `R x D`, rows orthonormal.
    pub basis: Array2<f64>,
    /// `R` values, nonincreasing and nonnegative.
    pub eigenvalues: Array1<f64>,
}

impl PcaTransform {
    pub fn rank(&self) -> usize {
        self.basis.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.basis.ncols()
    }

    /// `y = basis (x - mean)` for every row.
    pub fn project(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "PCA expects {}-dim frames, got {}",
                self.input_dim(),
                features.ncols()
            )));
        }
        let centered = &features - &self.mean;
        Ok(centered.dot(&self.basis.t()))
    }

    /// `x = mean + basis^T y`.
    pub fn reconstruct(&self, projected: ArrayView2<f64>) -> Result<Array2<f64>> {
        if projected.ncols() != self.rank() {
            return Err(Error::Shape(format!(
                "reconstruction expects {} components, got {}",
                self.rank(),
                projected.ncols()
            )));
        }
        Ok(projected.dot(&self.basis) + &self.mean)
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (unsorted) and eigenvectors as columns.
pub fn jacobi_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "jacobi_eigen needs a square matrix");
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| m[[p, q]] * m[[p, q]])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    (m.diag().to_owned(), v)
}

/// Population covariance (divides by `N`), so that the mean squared
/// reconstruction error per frame equals the sum of discarded eigenvalues.
pub fn covariance(features: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = features.nrows() as f64;
    let mean = features.mean_axis(Axis(0)).expect("N >= 1");
    let centered = &features - &mean;
    let cov = centered.t().dot(&centered) / n;
    (mean, cov)
}

pub fn fit_pca(features: ArrayView2<f64>, rank: usize) -> Result<PcaTransform> {
    let (n, d) = features.dim();
    if rank == 0 || rank > d {
        return Err(Error::Parameter(format!("PCA rank {rank} not in [1, {d}]")));
    }
    if n <= rank {
        return Err(Error::InsufficientData {
            needed: rank + 1,
            got: n,
        });
    }
    let (mean, cov) = covariance(features);
    let (values, vectors) = jacobi_eigen(&cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let tol = 1e-12 * values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut basis = Array2::zeros((rank, d));
    let mut eigenvalues = Array1::zeros(rank);
    let mut deficient = 0;
    for (r, &idx) in order.iter().take(rank).enumerate() {
        let mut row = vectors.column(idx).to_owned();
        // sign convention: the largest-magnitude component is positive
        let pivot = row
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, &x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) })
            .0;
        if row[pivot] < 0.0 {
            row.mapv_inplace(|x| -x);
        }
        basis.row_mut(r).assign(&row);
        let lambda = values[idx];
        if lambda <= tol {
            deficient += 1;
        }
        eigenvalues[r] = lambda.max(0.0);
    }
    if deficient > 0 {
        log::warn!(
            "PCA rank {rank} exceeds the numerical rank of the covariance; {deficient} eigenvalue(s) padded with 0"
        );
    }
    Ok(PcaTransform {
        mean,
        basis,
        eigenvalues,
    })
}
