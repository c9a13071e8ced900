//! Frozen-encoder evaluation: layer-averaged features, a convolutional
//! classifier with self-attention pooling, a CTC head with greedy decoding,
//! and accuracy / WER metrics.

mod classifier;
mod ctc;
mod metrics;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use classifier::{
    classifier_backward, classifier_forward, evaluate_probe, train_probe, ClassifierOutput, LabeledItem, Probe, ProbeRun,
};
pub use ctc::{brute_force_ctc, corpus_wer, ctc_loss, greedy_decode, train_ctc_probe, CtcHead, CtcItem, CtcOutput, CtcRun, CtcTrainConfig};
pub use metrics::{accuracy, edit_distance, wer};

use crate::corpus::AudioBuffer;
use crate::encoder::{forward, AdamConfig, Model};
use crate::error::Result;
use crate::features::{FeatureKind, FeatureMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    #[serde(default = "d_conv_layers")]
    pub conv_layers: usize,
    #[serde(default = "d_kernel")]
    pub kernel: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    pub n_classes: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    /// ReLU after the pooled feed-forward layer.
    #[serde(default = "d_true")]
    pub ff_relu: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_probe_opt")]
    pub optimizer: AdamConfig,
    /// Evaluate on the dev set every this many steps (0 = only at the end).
    #[serde(default)]
    pub eval_every: usize,
}

fn d_conv_layers() -> usize {
    3
}
fn d_kernel() -> usize {
    5
}
fn d_dropout() -> f64 {
    0.4
}
fn d_hidden() -> usize {
    80
}
fn d_batch() -> usize {
    4
}
fn d_steps() -> usize {
    10_000
}
fn d_true() -> bool {
    true
}
fn d_probe_opt() -> AdamConfig {
    AdamConfig {
        peak_lr: 1e-3,
        warmup_steps: 100,
        ..AdamConfig::default()
    }
}

impl ProbeConfig {
    pub fn new(n_classes: usize) -> Self {
        Self {
            conv_layers: d_conv_layers(),
            kernel: d_kernel(),
            dropout: d_dropout(),
            hidden: d_hidden(),
            n_classes,
            batch: d_batch(),
            steps: d_steps(),
            ff_relu: true,
            seed: 0,
            optimizer: d_probe_opt(),
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTask {
    Classification,
    Ctc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: ProbeTask,
    pub metric: String,
    pub value: f64,
    pub split: String,
    pub n_items: usize,
    pub step: usize,
}

/// Element-wise mean of the encoder's hidden states. With
/// `include_input` the projected CNN output (state 0) is counted.
pub fn extract_features(model: &Model, audio: &AudioBuffer, include_input: bool) -> Result<FeatureMatrix> {
    let out = forward(model, audio, None, false)?;
    let states = if include_input { &out.hidden[..] } else { &out.hidden[1..] };
    let mut mean = states[0].clone();
    for h in &states[1..] {
        mean += h;
    }
    mean /= states.len() as f64;
    let rate = audio.sample_rate as f64 / model.config.total_stride() as f64;
    FeatureMatrix::new(audio.utterance_id.clone(), mean, rate, FeatureKind::Hidden)
}

/// [`extract_features`] over many utterances in parallel.
pub fn extract_all(model: &Model, audio: &[&AudioBuffer], include_input: bool) -> Result<Vec<FeatureMatrix>> {
    audio
        .par_iter()
        .map(|a| extract_features(model, a, include_input))
        .collect()
}

/// `α = softmax_t(w · h_t)`, returns `(Σ α_t h_t, α)`.
pub fn self_attention_pool(seq: ArrayView2<f64>, w: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
    let scores = seq.dot(&w);
    let m = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut alpha = scores.mapv(|s| (s - m).exp());
    alpha /= alpha.sum();
    let pooled = seq.t().dot(&alpha);
    (pooled, alpha)
}

/// Gradients of [`self_attention_pool`] given `d pooled`: `(d seq, d w)`.
pub fn self_attention_pool_backward(
    seq: ArrayView2<f64>,
    w: ArrayView1<f64>,
    alpha: ArrayView1<f64>,
    dpooled: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>) {
    // d alpha_t = h_t · dp ; d score_t = alpha_t (d alpha_t - Σ alpha d alpha)
    let dalpha = seq.dot(&dpooled);
    let avg = alpha.dot(&dalpha);
    let dscore = &alpha * &(dalpha - avg);
    let mut dseq = alpha.insert_axis(Axis(1)).dot(&dpooled.insert_axis(Axis(0)));
    dseq += &dscore.view().insert_axis(Axis(1)).dot(&w.insert_axis(Axis(0)));
    let dw = seq.t().dot(&dscore);
    (dseq, dw)
}
