//! Connectionist temporal classification: log-space forward/backward loss,
//! a linear CTC head on frozen features, and greedy decoding.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::classifier::{check_splits, epoch_batch};
use super::{edit_distance, EvalRecord, ProbeTask};
use crate::corpus::{AudioBuffer, Split};
use crate::encoder::checkpoint;
use crate::encoder::{log_softmax, AdamConfig, AdamState, Model, Params};
use crate::error::{Error, Result};
use crate::io;

fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[derive(Debug, Clone)]
pub struct CtcOutput {
    /// Negative log probability of the target.
    pub loss: f64,
    /// d loss / d logits.
    pub grad: Array2<f64>,
}

/// CTC loss over `T x (V+1)` logits; the blank is the last column.
pub fn ctc_loss(logits: ArrayView2<f64>, target: &[usize]) -> Result<CtcOutput> {
    let (t_len, width) = logits.dim();
    if t_len == 0 || width < 2 {
        return Err(Error::Shape(format!("CTC logits of shape {t_len}x{width}")));
    }
    let blank = width - 1;
    if let Some(&bad) = target.iter().find(|&&l| l >= blank) {
        return Err(Error::LabelRange { label: bad, k: blank });
    }
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    let required = target.len() + repeats;
    if t_len < required {
        return Err(Error::Infeasible {
            frames: t_len,
            target: target.len(),
            required,
        });
    }
    let lsm: Vec<Vec<f64>> = logits.rows().into_iter().map(log_softmax).collect();
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&l| [l, blank]))
        .collect();
    let n = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = Array2::from_elem((t_len, n), ninf);
    alpha[[0, 0]] = lsm[0][ext[0]];
    if n > 1 {
        alpha[[0, 1]] = lsm[0][ext[1]];
    }
    for t in 1..t_len {
        for s in 0..n {
            let mut a = alpha[[t - 1, s]];
            if s >= 1 {
                a = lse(a, alpha[[t - 1, s - 1]]);
            }
            if skip_ok(s) {
                a = lse(a, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = a + lsm[t][ext[s]];
        }
    }
    let last = t_len - 1;
    let log_p = if n > 1 {
        lse(alpha[[last, n - 1]], alpha[[last, n - 2]])
    } else {
        alpha[[last, 0]]
    };

    let mut beta = Array2::from_elem((t_len, n), ninf);
    beta[[last, n - 1]] = lsm[last][ext[n - 1]];
    if n > 1 {
        beta[[last, n - 2]] = lsm[last][ext[n - 2]];
    }
    for t in (0..last).rev() {
        for s in 0..n {
            let mut b = beta[[t + 1, s]];
            if s + 1 < n {
                b = lse(b, beta[[t + 1, s + 1]]);
            }
            if s + 2 < n && skip_ok(s + 2) {
                b = lse(b, beta[[t + 1, s + 2]]);
            }
            beta[[t, s]] = b + lsm[t][ext[s]];
        }
    }

    // grad = softmax − posterior occupancy per symbol
    let mut grad = Array2::zeros((t_len, width));
    for t in 0..t_len {
        for c in 0..width {
            grad[[t, c]] = lsm[t][c].exp();
        }
        for s in 0..n {
            let occ = alpha[[t, s]] + beta[[t, s]] - lsm[t][ext[s]] - log_p;
            if occ > ninf {
                grad[[t, ext[s]]] -= occ.exp();
            }
        }
    }
    Ok(CtcOutput { loss: -log_p, grad })
}

/// Per-frame argmax, merge repeats, drop blanks (the last column).
pub fn greedy_decode(logits: ArrayView2<f64>) -> Vec<usize> {
    let blank = logits.ncols().saturating_sub(1);
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.rows() {
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
            .0;
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtcTrainConfig {
    /// Token vocabulary size, excluding the blank.
    pub vocab: usize,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

/// Linear projection from frozen features to `vocab + 1` symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcHead {
    pub vocab: usize,
    pub input_dim: usize,
    pub params: Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct CtcHeader {
    vocab: usize,
    input_dim: usize,
}

impl CtcHead {
    pub fn new(vocab: usize, input_dim: usize, seed: u64) -> Result<Self> {
        if vocab == 0 || input_dim == 0 {
            return Err(Error::Config("CTC head needs a positive vocabulary and input dim".into()));
        }
        let shapes = vec![
            ("ctc.bias".to_string(), vec![vocab + 1]),
            ("ctc.weight".to_string(), vec![input_dim, vocab + 1]),
        ];
        Ok(Self {
            vocab,
            input_dim,
            params: Params::init(&shapes, seed),
        })
    }

    pub fn logits(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.input_dim {
            return Err(Error::Shape(format!(
                "CTC head expects {}-dim features, got {}",
                self.input_dim,
                features.ncols()
            )));
        }
        Ok(features.dot(&self.params.v2("ctc.weight")) + self.params.v1("ctc.bias"))
    }

    fn gradients(&self, features: ArrayView2<f64>, target: &[usize]) -> Result<(f64, Params)> {
        let out = ctc_loss(self.logits(features)?.view(), target)?;
        let mut g = Params::zeros_like(&self.params);
        g.accumulate("ctc.weight", &features.t().dot(&out.grad));
        g.accumulate("ctc.bias", &out.grad.sum_axis(Axis(0)));
        Ok((out.loss, g))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CtcHeader {
            vocab: self.vocab,
            input_dim: self.input_dim,
        };
        checkpoint::save(path, &header, &self.params, None)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let l = checkpoint::load::<CtcHeader>(path)?;
        let w = l.params.tensors.get("ctc.weight").map(|t| t.shape().to_vec());
        if w != Some(vec![l.config.input_dim, l.config.vocab + 1]) {
            return Err(Error::Format("CTC head tensors do not match their header".into()));
        }
        Ok(Self {
            vocab: l.config.vocab,
            input_dim: l.config.input_dim,
            params: l.params,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CtcItem<'a> {
    pub audio: &'a AudioBuffer,
    pub split: Split,
    pub tokens: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct CtcRun {
    pub records: Vec<EvalRecord>,
    pub train_loss: Vec<f64>,
    pub encoder_checksum_before: String,
    pub encoder_checksum_after: String,
}

/// Corpus-level WER: total edits over total reference tokens.
pub fn corpus_wer(head: &CtcHead, feats: &[Array2<f64>], refs: &[&[usize]]) -> Result<f64> {
    let mut edits = 0;
    let mut words = 0;
    for (f, r) in feats.iter().zip(refs) {
        let hyp = greedy_decode(head.logits(f.view())?.view());
        edits += edit_distance(r, &hyp);
        words += r.len();
    }
    if words == 0 {
        return Err(Error::UndefinedMetric("WER over empty references".into()));
    }
    Ok(edits as f64 / words as f64)
}

/// Trains the CTC head on frozen, layer-averaged features.
pub fn train_ctc_probe(
    head: &mut CtcHead,
    model: &Model,
    train: &[CtcItem<'_>],
    dev: &[CtcItem<'_>],
    cfg: &CtcTrainConfig,
    include_input: bool,
) -> Result<CtcRun> {
    let tt: Vec<(&str, Split)> = train.iter().map(|i| (i.audio.utterance_id.as_str(), i.split)).collect();
    let dt: Vec<(&str, Split)> = dev.iter().map(|i| (i.audio.utterance_id.as_str(), i.split)).collect();
    check_splits(&tt, &dt)?;
    if train.is_empty() || dev.is_empty() || cfg.batch == 0 {
        return Err(Error::EmptyInput("CTC probe needs train and dev items and a positive batch".into()));
    }
    let before = model.checksum();
    let extract = |v: &[CtcItem<'_>]| -> Result<Vec<Array2<f64>>> {
        let audio: Vec<&AudioBuffer> = v.iter().map(|i| i.audio).collect();
        Ok(super::extract_all(model, &audio, include_input)?
            .into_iter()
            .map(|f| f.data)
            .collect())
    };
    let train_feats = extract(train)?;
    let dev_feats = extract(dev)?;
    let mut opt = AdamState::new(&head.params);
    let seed = io::derive_seed(cfg.seed, "ctc-batches");
    let mut train_loss = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = epoch_batch(train.len(), cfg.batch, step, seed);
        let mut grads = Params::zeros_like(&head.params);
        let mut loss = 0.0;
        for &i in &idx {
            let (l, g) = head.gradients(train_feats[i].view(), train[i].tokens)?;
            loss += l / idx.len() as f64;
            grads.add_scaled(&g, 1.0 / idx.len() as f64);
        }
        opt.update(&cfg.optimizer, &mut head.params, &grads);
        train_loss.push(loss);
    }
    let refs: Vec<&[usize]> = dev.iter().map(|i| i.tokens).collect();
    let value = corpus_wer(head, &dev_feats, &refs)?;
    let after = model.checksum();
    if before != after {
        return Err(Error::Numeric {
            stage: "frozen encoder changed during CTC training".into(),
            layer: 0,
        });
    }
    Ok(CtcRun {
        records: vec![EvalRecord {
            task: ProbeTask::Ctc,
            metric: "wer".into(),
            value,
            split: "probe-dev".into(),
            n_items: dev.len(),
            step: cfg.steps,
        }],
        train_loss,
        encoder_checksum_before: before,
        encoder_checksum_after: after,
    })
}

/// Probability of `target` by summing every frame-level path that collapses
/// to it. Exponential in `T`; a test oracle.
pub fn brute_force_ctc(logits: ArrayView2<f64>, target: &[usize]) -> f64 {
    let (t_len, width) = logits.dim();
    let blank = width - 1;
    let probs: Vec<Array1<f64>> = logits
        .rows()
        .into_iter()
        .map(|r| Array1::from(log_softmax(r)).mapv(f64::exp))
        .collect();
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    for code in 0..width.pow(t_len as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % width;
            c /= width;
        }
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != blank {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(t, &s)| probs[t][s]).product::<f64>();
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn softmax(r: ndarray::ArrayView1<f64>) -> Vec<f64> {
        log_softmax(r).iter().map(|v| v.exp()).collect()
    }

    #[test]
    fn single_frame_single_path() {
        let l = array![[0.3, -1.2, 0.8]];
        let out = ctc_loss(l.view(), &[1]).unwrap();
        assert!((out.loss + log_softmax(l.row(0))[1]).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_alignments() {
        let l = array![[0.3, -0.4, 1.1], [-0.7, 0.2, 0.5]];
        let (p0, p1) = (softmax(l.row(0)), softmax(l.row(1)));
        let (a, b) = (0, 2);
        let p = p0[a] * p1[a] + p0[a] * p1[b] + p0[b] * p1[a];
        let out = ctc_loss(l.view(), &[a]).unwrap();
        assert!((out.loss + p.ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_and_label_errors() {
        let l = Array2::zeros((2, 3));
        assert!(matches!(
            ctc_loss(l.view(), &[1, 1]),
            Err(Error::Infeasible {
                frames: 2,
                target: 2,
                required: 3
            })
        ));
        assert!(matches!(ctc_loss(l.view(), &[2]), Err(Error::LabelRange { .. })));
        assert!(ctc_loss(Array2::zeros((3, 3)).view(), &[1, 1]).is_ok());
    }

    #[test]
    fn matches_enumeration_and_fd() {
        let l = Array2::from_shape_fn((4, 4), |(t, c)| ((t * 5 + c * 3) % 7) as f64 * 0.4 - 1.0);
        for target in [vec![], vec![0], vec![2, 2], vec![0, 1]] {
            let out = ctc_loss(l.view(), &target).unwrap();
            assert!((out.loss + brute_force_ctc(l.view(), &target).ln()).abs() < 1e-9);
            let h = 1e-6;
            for t in 0..4 {
                for c in 0..4 {
                    let (mut a, mut b) = (l.clone(), l.clone());
                    a[[t, c]] += h;
                    b[[t, c]] -= h;
                    let fd = (ctc_loss(a.view(), &target).unwrap().loss - ctc_loss(b.view(), &target).unwrap().loss)
                        / (2.0 * h);
                    assert!((fd - out.grad[[t, c]]).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn greedy_examples() {
        let onehot = |seq: &[usize]| Array2::from_shape_fn((seq.len(), 3), |(t, c)| f64::from(u8::from(seq[t] == c)));
        assert_eq!(greedy_decode(onehot(&[0, 0, 2, 1]).view()), vec![0, 1]);
        assert_eq!(greedy_decode(onehot(&[2, 2, 2]).view()), Vec::<usize>::new());
        assert_eq!(greedy_decode(onehot(&[0, 2, 0]).view()), vec![0, 0]);
    }

    #[test]
    fn head_round_trip() {
        let h = CtcHead::new(3, 5, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ctc.ckpt");
        h.save(&p).unwrap();
        let g = CtcHead::load(&p).unwrap();
        assert_eq!((g.vocab, g.input_dim), (3, 5));
    }
}
