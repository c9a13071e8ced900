//! Masked-prediction training step over a batch of utterances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::masked_pred_loss;
use super::mask::{mask_spans, MaskSpec};
use super::model::{backward, forward, Model};
use super::optim::{AdamConfig, AdamState};
use super::params::Params;
use crate::corpus::AudioBuffer;
use crate::error::{Error, Result};
use crate::io;

/// Largest label/frame length gap that is trimmed instead of rejected.
pub const MAX_ALIGN_GAP: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mask_prob: f64,
    pub span_len: usize,
    pub w_masked: f64,
    pub w_unmasked: f64,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.08,
            span_len: 10,
            w_masked: 1.0,
            w_unmasked: 0.1,
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_total: f64,
    pub loss_masked: f64,
    pub loss_unmasked: f64,
    pub masked_acc: f64,
    pub lr: f64,
}

/// One training utterance with its frame targets.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub audio: &'a AudioBuffer,
    pub labels: &'a [u32],
}

/// Number of frames both sides agree on after trimming at most
/// [`MAX_ALIGN_GAP`] frames from the longer one.
pub fn aligned_len(id: &str, frames: usize, labels: usize) -> Result<usize> {
    if frames.abs_diff(labels) > MAX_ALIGN_GAP {
        return Err(Error::Alignment {
            utterance: id.into(),
            features: frames,
            labels,
        });
    }
    Ok(frames.min(labels))
}

/// Per-utterance loss pieces, summed across the batch afterwards.
struct UttResult {
    grads: Option<Params>,
    total: f64,
    masked_ce: f64,
    unmasked_ce: f64,
    n_masked: usize,
    correct: usize,
}

fn run_utterance(
    model: &Model,
    ex: &Example<'_>,
    spec: &MaskSpec,
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<UttResult> {
    let frames = model
        .config
        .output_frames(ex.audio.samples.len())
        .ok_or_else(|| Error::EmptyInput(format!("{}: shorter than receptive field", ex.audio.utterance_id)))?;
    let n = aligned_len(&ex.audio.utterance_id, frames, ex.labels.len())?;
    let mut mask = mask_spans(frames, spec);
    // frames past the aligned length carry no target
    mask[n..].iter_mut().for_each(|m| *m = false);
    let out = forward(model, ex.audio, Some(&mask), with_grad)?;
    let logits = out.logits.slice(ndarray::s![..n, ..]);
    let loss = masked_pred_loss(logits, &ex.labels[..n], &mask[..n], cfg.w_masked, cfg.w_unmasked)?;
    let grads = if with_grad {
        let mut dlogits = ndarray::Array2::zeros(out.logits.raw_dim());
        dlogits.slice_mut(ndarray::s![..n, ..]).assign(&loss.grad);
        Some(backward(model, &out, &dlogits)?)
    } else {
        None
    };
    Ok(UttResult {
        grads,
        total: loss.total,
        masked_ce: loss.masked_ce,
        unmasked_ce: loss.unmasked_ce,
        n_masked: loss.n_masked,
        correct: loss.masked_correct,
    })
}

fn mask_for(spec: &MaskSpec, step: u64, index: usize) -> MaskSpec {
    spec.with_seed(io::derive_seed(spec.seed, &format!("step{step}-utt{index}")))
}

fn summarize(results: &[UttResult], step: u64, lr: f64) -> StepMetrics {
    let b = results.len() as f64;
    let n_masked: usize = results.iter().map(|r| r.n_masked).sum();
    let correct: usize = results.iter().map(|r| r.correct).sum();
    StepMetrics {
        step,
        loss_total: results.iter().map(|r| r.total).sum::<f64>() / b,
        loss_masked: results.iter().map(|r| r.masked_ce).sum::<f64>() / b,
        loss_unmasked: results.iter().map(|r| r.unmasked_ce).sum::<f64>() / b,
        masked_acc: if n_masked == 0 {
            0.0
        } else {
            correct as f64 / n_masked as f64
        },
        lr,
    }
}

/// Batch loss gradient: mean over utterances of each utterance's loss.
pub fn batch_gradients(
    model: &Model,
    batch: &[Example<'_>],
    spec: &MaskSpec,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Params, StepMetrics)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty training batch".into()));
    }
    let results: Vec<UttResult> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| run_utterance(model, ex, &mask_for(spec, step, i), cfg, true))
        .collect::<Result<_>>()?;
    // fixed-order reduction keeps the sum deterministic
    let mut grads = Params::zeros(&model.config.param_shapes());
    for r in &results {
        grads.add_scaled(r.grads.as_ref().unwrap(), 1.0 / batch.len() as f64);
    }
    Ok((grads, summarize(&results, step, 0.0)))
}

/// Masks, forwards, back-propagates and applies one Adam update. The mask
/// for utterance `i` at step `s` is drawn from a seed derived from
/// `(spec.seed, s, i)`.
pub fn train_step(
    model: &mut Model,
    batch: &[Example<'_>],
    spec: &MaskSpec,
    opt: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let step = opt.step + 1;
    let (grads, mut metrics) = batch_gradients(model, batch, spec, cfg, step)?;
    if !grads.all_finite() {
        return Err(Error::Numeric {
            stage: "gradients".into(),
            layer: 0,
        });
    }
    metrics.lr = opt.update(&cfg.optimizer, &mut model.params, &grads);
    Ok(metrics)
}

/// Loss and masked accuracy without updating the model.
pub fn evaluate(
    model: &Model,
    data: &[Example<'_>],
    spec: &MaskSpec,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyInput("empty evaluation set".into()));
    }
    let results: Vec<UttResult> = data
        .par_iter()
        .enumerate()
        .map(|(i, ex)| run_utterance(model, ex, &mask_for(spec, 0, i), cfg, false))
        .collect::<Result<_>>()?;
    Ok(summarize(&results, 0, 0.0))
}
