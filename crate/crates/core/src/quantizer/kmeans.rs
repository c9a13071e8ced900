//! k-means with k-means++ seeding, full-batch Lloyd iterations and an
//! optional mini-batch mode.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Rng};

pub const REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Mini-batch size; full-batch Lloyd when absent.
    #[serde(default)]
    pub batch: Option<usize>,
}

impl KMeansConfig {
    pub fn new(k: usize, max_iters: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters,
            seed,
            batch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Array2<f64>,
    pub inertia_history: Vec<f64>,
}

#[inline]
pub fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid and its squared distance; ties go to the
/// lowest index.
pub fn nearest(centroids: ArrayView2<f64>, x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub fn assign_all(centroids: ArrayView2<f64>, data: ArrayView2<f64>) -> Vec<(usize, f64)> {
    let rows: Vec<_> = data.rows().into_iter().collect();
    rows.par_iter().map(|x| nearest(centroids, *x)).collect()
}

fn inertia(assignments: &[(usize, f64)]) -> f64 {
    assignments.iter().map(|(_, d)| d).sum()
}

fn kmeans_plus_plus(data: ArrayView2<f64>, k: usize, rng: &mut Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut centroids = Array2::zeros((k, data.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut dist: Vec<f64> = data
        .rows()
        .into_iter()
        .map(|x| sq_dist(x, data.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let threshold = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                acc += d;
                if acc > threshold {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, x) in data.rows().into_iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(x, data.row(pick)));
        }
    }
    centroids
}

/// Moves every empty cluster onto the point farthest from its own centroid.
fn reseed_empty(
    centroids: &mut Array2<f64>,
    counts: &[usize],
    data: ArrayView2<f64>,
    assignments: &[(usize, f64)],
) {
    let mut taken = vec![false; data.nrows()];
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            continue;
        }
        let far = assignments
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken[*i])
            .fold((usize::MAX, -1.0), |best, (i, &(_, d))| if d > best.1 { (i, d) } else { best });
        if far.0 != usize::MAX {
            taken[far.0] = true;
            centroids.row_mut(c).assign(&data.row(far.0));
        }
    }
}

fn lloyd_update(data: ArrayView2<f64>, assignments: &[(usize, f64)], k: usize) -> Array2<f64> {
    let d = data.ncols();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (x, &(c, _)) in data.rows().into_iter().zip(assignments) {
        counts[c] += 1;
        let mut row = sums.row_mut(c);
        row += &x;
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            sums.row_mut(c).mapv_inplace(|v| v / count as f64);
        }
    }
    reseed_empty(&mut sums, &counts, data, assignments);
    sums
}

/// Fits `k` centroids. The recorded inertia history is nonincreasing: an
/// update that would raise inertia is rejected and fitting stops.
pub fn fit_kmeans(data: ArrayView2<f64>, cfg: &KMeansConfig) -> Result<KMeansFit> {
    let n = data.nrows();
    if cfg.k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if n < cfg.k {
        return Err(Error::InsufficientData {
            needed: cfg.k,
            got: n,
        });
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            stage: "k-means input".into(),
            layer: 0,
        });
    }
    let mut rng = io::rng(cfg.seed);
    let mut centroids = kmeans_plus_plus(data, cfg.k, &mut rng);
    let mut assignments = assign_all(centroids.view(), data);
    let mut history = vec![inertia(&assignments)];

    match cfg.batch {
        None => {
            for _ in 0..cfg.max_iters {
                let next = lloyd_update(data, &assignments, cfg.k);
                let next_assign = assign_all(next.view(), data);
                let prev = *history.last().unwrap();
                let cur = inertia(&next_assign);
                if cur > prev {
                    break;
                }
                centroids = next;
                assignments = next_assign;
                history.push(cur);
                if prev - cur <= REL_TOL * prev {
                    break;
                }
            }
        }
        Some(batch) => {
            let batch = batch.max(1);
            let mut counts = vec![0usize; cfg.k];
            let mut order: Vec<usize> = (0..n).collect();
            for _ in 0..cfg.max_iters {
                for i in (1..n).rev() {
                    let j = rng.random_range(0..=i);
                    order.swap(i, j);
                }
                let mut next = centroids.clone();
                for chunk in order.chunks(batch) {
                    let picks: Vec<usize> = chunk
                        .iter()
                        .map(|&i| nearest(next.view(), data.row(i)).0)
                        .collect();
                    for (&i, &c) in chunk.iter().zip(&picks) {
                        counts[c] += 1;
                        let eta = 1.0 / counts[c] as f64;
                        let x = data.row(i);
                        next.row_mut(c).zip_mut_with(&x, |m, v| *m += eta * (v - *m));
                    }
                }
                let next_assign = assign_all(next.view(), data);
                let prev = *history.last().unwrap();
                let cur = inertia(&next_assign);
                if cur > prev {
                    break;
                }
                centroids = next;
                history.push(cur);
                if prev - cur <= REL_TOL * prev {
                    break;
                }
            }
        }
    }
    Ok(KMeansFit {
        centroids,
        inertia_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn single_cluster_is_global_mean() {
        let mut rng = io::rng(1);
        let x = Array2::from_shape_fn((50, 3), |_| rng.random_range(-2.0..2.0));
        let fit = fit_kmeans(x.view(), &KMeansConfig::new(1, 20, 0)).unwrap();
        let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
        for (a, b) in fit.centroids.row(0).iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn insufficient_data() {
        let x = Array2::<f64>::zeros((3, 2));
        assert!(matches!(
            fit_kmeans(x.view(), &KMeansConfig::new(4, 10, 0)),
            Err(Error::InsufficientData { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let c = ndarray::array![[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]];
        let x = ndarray::array![0.0, 5.0];
        // centroid 0 and 1 are equidistant, centroid 2 is closer
        assert_eq!(nearest(c.view(), x.view()).0, 2);
        let c = ndarray::array![[1.0, 0.0], [-1.0, 0.0]];
        assert_eq!(nearest(c.view(), x.view()).0, 0);
    }

    #[test]
    fn duplicate_points_reseed_without_panicking() {
        let x = Array2::from_shape_fn((10, 2), |(i, _)| if i < 8 { 0.0 } else { 1.0 });
        let fit = fit_kmeans(x.view(), &KMeansConfig::new(4, 10, 3)).unwrap();
        assert!(fit.centroids.iter().all(|v| v.is_finite()));
        assert!(fit.inertia_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn mini_batch_mode_converges_on_blobs() {
        let mut rng = io::rng(5);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let centers = [[0.0, 0.0], [3.0, 3.0]];
        let x = Array2::from_shape_fn((200, 2), |(i, j)| centers[i % 2][j] + noise.sample(&mut rng));
        let mut cfg = KMeansConfig::new(2, 20, 1);
        cfg.batch = Some(16);
        let fit = fit_kmeans(x.view(), &cfg).unwrap();
        assert!(fit.inertia_history.windows(2).all(|w| w[1] <= w[0]));
        let mut got: Vec<f64> = fit.centroids.rows().into_iter().map(|r| r[0]).collect();
        got.sort_by(f64::total_cmp);
        assert!((got[0] - 0.0).abs() < 0.1 && (got[1] - 3.0).abs() < 0.1);
    }
}
