//! Layer primitives with hand-written backward passes. Sequences are
//! time-major `T x C` matrices throughout.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayView3, Axis};

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layer_norm(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> (Array2<f64>, LnCache) {
    let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
    let centered = &x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).expect("non-empty rows");
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * inv_std.view().insert_axis(Axis(1));
    let y = &xhat * &gamma + beta;
    (y, LnCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &LnCache,
    gamma: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dxhat = &dy * &gamma;
    let mean_dxhat = dxhat.mean_axis(Axis(1)).unwrap();
    let mean_dxhat_xhat = (&dxhat * &cache.xhat).mean_axis(Axis(1)).unwrap();
    let dx = (&dxhat - &mean_dxhat.insert_axis(Axis(1))
        - &cache.xhat * &mean_dxhat_xhat.insert_axis(Axis(1)))
        * cache.inv_std.view().insert_axis(Axis(1));
    (dx, dgamma, dbeta)
}

/// Row-wise softmax.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Unfolds `x` (`L x C`) into `L_out x (C*K)` patches with column index
/// `c * K + j`, zero-padding `pad_left`/`pad_right` frames.
pub fn im2col(
    x: ArrayView2<f64>,
    kernel: usize,
    stride: usize,
    pad_left: usize,
    pad_right: usize,
) -> Array2<f64> {
    let (len, ch) = x.dim();
    let padded = len + pad_left + pad_right;
    let out_len = (padded - kernel) / stride + 1;
    let mut cols = Array2::zeros((out_len, ch * kernel));
    for t in 0..out_len {
        let mut row = cols.row_mut(t);
        let row = row.as_slice_mut().expect("standard layout");
        for j in 0..kernel {
            let src = (t * stride + j) as isize - pad_left as isize;
            if src < 0 || src as usize >= len {
                continue;
            }
            let xr = x.row(src as usize);
            for c in 0..ch {
                row[c * kernel + j] = xr[c];
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im(
    dcols: ArrayView2<f64>,
    len: usize,
    ch: usize,
    kernel: usize,
    stride: usize,
    pad_left: usize,
) -> Array2<f64> {
    let mut dx = Array2::zeros((len, ch));
    for (t, row) in dcols.rows().into_iter().enumerate() {
        for j in 0..kernel {
            let src = (t * stride + j) as isize - pad_left as isize;
            if src < 0 || src as usize >= len {
                continue;
            }
            let mut dr = dx.row_mut(src as usize);
            for c in 0..ch {
                dr[c] += row[c * kernel + j];
            }
        }
    }
    dx
}

/// Conv weight `[C_out, C_in, K]` as a `C_out x (C_in*K)` matrix.
pub fn conv_weight_2d(w: ArrayView3<f64>) -> ArrayView2<f64> {
    let (o, i, k) = w.dim();
    w.into_shape_with_order((o, i * k)).expect("contiguous conv weight")
}

#[derive(Debug, Clone)]
pub struct GroupedConvCache {
    pub cols: Vec<Array2<f64>>,
}

/// Grouped 1-D convolution with "same" zero padding (`K/2` left,
/// `K-1-K/2` right); output length equals input length.
pub fn grouped_conv_same(
    x: ArrayView2<f64>,
    w: ArrayView3<f64>,
    b: ArrayView1<f64>,
    groups: usize,
) -> (Array2<f64>, GroupedConvCache) {
    let (len, ch) = x.dim();
    let (_, cg, k) = w.dim();
    let pad_left = k / 2;
    let pad_right = k - 1 - pad_left;
    let mut out = Array2::zeros((len, ch));
    let mut cache = Vec::with_capacity(groups);
    for g in 0..groups {
        let range = g * cg..(g + 1) * cg;
        let xg = x.slice(s![.., range.clone()]);
        let cols = im2col(xg, k, 1, pad_left, pad_right);
        let wg = w.slice(s![range.clone(), .., ..]);
        let wg = wg.to_owned().into_shape_with_order((cg, cg * k)).unwrap();
        out.slice_mut(s![.., range]).assign(&cols.dot(&wg.t()));
        cache.push(cols);
    }
    out += &b;
    (out, GroupedConvCache { cols: cache })
}

/// Returns `(dx, dw, db)`.
pub fn grouped_conv_same_backward(
    dy: ArrayView2<f64>,
    w: ArrayView3<f64>,
    cache: &GroupedConvCache,
    groups: usize,
) -> (Array2<f64>, ndarray::Array3<f64>, Array1<f64>) {
    let (len, ch) = dy.dim();
    let (_, cg, k) = w.dim();
    let pad_left = k / 2;
    let mut dx = Array2::zeros((len, ch));
    let mut dw = ndarray::Array3::zeros(w.dim());
    for g in 0..groups {
        let range = g * cg..(g + 1) * cg;
        let dyg = dy.slice(s![.., range.clone()]);
        let wg = w.slice(s![range.clone(), .., ..]);
        let wg = wg.to_owned().into_shape_with_order((cg, cg * k)).unwrap();
        let dwg = dyg.t().dot(&cache.cols[g]);
        dw.slice_mut(s![range.clone(), .., ..])
            .assign(&dwg.into_shape_with_order((cg, cg, k)).unwrap());
        let dcols = dyg.dot(&wg);
        let dxg = col2im(dcols.view(), len, cg, k, 1, pad_left);
        dx.slice_mut(s![.., range]).assign(&dxg);
    }
    (dx, dw, dy.sum_axis(Axis(0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut m = Array2::zeros((3, 5));
        softmax_rows(&mut m);
        assert!(m.iter().all(|&v| v == 0.2));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let x = Array2::from_shape_fn((11, 3), |(i, j)| (i * 3 + j) as f64 * 0.1 - 1.0);
        let cols = im2col(x.view(), 3, 2, 1, 1);
        let y = Array2::from_shape_fn(cols.dim(), |(i, j)| ((i + 2 * j) % 7) as f64 - 3.0);
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im(y.view(), 11, 3, 3, 2, 1);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
