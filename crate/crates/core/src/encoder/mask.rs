use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mask_prob: f64,
    pub span_len: usize,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(mask_prob: f64, span_len: usize, seed: u64) -> Self {
        Self {
            mask_prob,
            span_len,
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self::new(0.08, 10, 0)
    }
}

/// Every frame starts a span with probability `mask_prob`; spans of
/// `span_len` frames (clipped at `t_len`) are unioned.
pub fn mask_spans(t_len: usize, spec: &MaskSpec) -> Vec<bool> {
    let mut rng = io::rng(spec.seed);
    let span = spec.span_len.max(1);
    let p = spec.mask_prob.clamp(0.0, 1.0);
    let mut mask = vec![false; t_len];
    for start in 0..t_len {
        if rng.random_bool(p) {
            let end = (start + span).min(t_len);
            mask[start..end].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_probabilities() {
        assert!(mask_spans(50, &MaskSpec::new(0.0, 10, 1)).iter().all(|m| !m));
        assert!(mask_spans(50, &MaskSpec::new(1.0, 50, 1)).iter().all(|m| *m));
    }

    #[test]
    fn masked_fraction_is_near_span_coverage() {
        let mut total = 0.0;
        for seed in 0..100 {
            let m = mask_spans(1000, &MaskSpec::new(0.08, 10, seed));
            let frac = m.iter().filter(|x| **x).count() as f64 / 1000.0;
            assert!((0.35..=0.75).contains(&frac), "{frac}");
            total += frac;
        }
        // 1 - (1 - p)^span
        let expected = 1.0 - 0.92f64.powi(10);
        assert!((total / 100.0 - expected).abs() < 0.03);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = MaskSpec::new(0.1, 5, 42);
        assert_eq!(mask_spans(200, &spec), mask_spans(200, &spec));
    }
}
