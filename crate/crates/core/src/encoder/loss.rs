use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    /// Mean cross-entropy over masked frames (0 when none are masked).
    pub masked_ce: f64,
    pub unmasked_ce: f64,
    pub n_masked: usize,
    pub n_unmasked: usize,
    pub masked_correct: usize,
    /// d(total)/d(logits).
    pub grad: Array2<f64>,
}

impl LossOutput {
    pub fn masked_acc(&self) -> f64 {
        if self.n_masked == 0 {
            0.0
        } else {
            self.masked_correct as f64 / self.n_masked as f64
        }
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: ArrayView1<f64>) -> Vec<f64> {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// `w_m · mean CE(masked) + w_u · mean CE(unmasked)`; an empty region
/// contributes 0.
pub fn masked_pred_loss(
    logits: ArrayView2<f64>,
    labels: &[u32],
    mask: &[bool],
    w_m: f64,
    w_u: f64,
) -> Result<LossOutput> {
    let (t_len, k) = logits.dim();
    if labels.len() != t_len || mask.len() != t_len {
        return Err(Error::Shape(format!(
            "{t_len} logit frames, {} labels, {} mask entries",
            labels.len(),
            mask.len()
        )));
    }
    if !(w_m >= 0.0 && w_u >= 0.0 && w_m + w_u > 0.0) {
        return Err(Error::Parameter(format!(
            "loss weights must be nonnegative with a positive sum, got ({w_m}, {w_u})"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::LabelRange {
            label: bad as usize,
            k,
        });
    }
    let n_masked = mask.iter().filter(|m| **m).count();
    let n_unmasked = t_len - n_masked;
    let mut grad = Array2::zeros((t_len, k));
    let (mut ce_m, mut ce_u) = (0.0, 0.0);
    let mut correct = 0;
    for t in 0..t_len {
        let row = logits.row(t);
        let lsm = log_softmax(row);
        let y = labels[t] as usize;
        let (weight, count) = if mask[t] {
            (w_m, n_masked)
        } else {
            (w_u, n_unmasked)
        };
        if mask[t] {
            ce_m -= lsm[y];
            let argmax = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            if argmax == y {
                correct += 1;
            }
        } else {
            ce_u -= lsm[y];
        }
        let scale = weight / count as f64;
        let mut g = grad.row_mut(t);
        for (c, l) in lsm.iter().enumerate() {
            g[c] = scale * l.exp();
        }
        g[y] -= scale;
    }
    let masked_ce = if n_masked > 0 { ce_m / n_masked as f64 } else { 0.0 };
    let unmasked_ce = if n_unmasked > 0 {
        ce_u / n_unmasked as f64
    } else {
        0.0
    };
    Ok(LossOutput {
        total: w_m * masked_ce + w_u * unmasked_ce,
        masked_ce,
        unmasked_ce,
        n_masked,
        n_unmasked,
        masked_correct: correct,
        grad,
    })
}
