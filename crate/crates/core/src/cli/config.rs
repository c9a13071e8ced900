//! Experiment configuration file (TOML) and its resolution into module
//! configs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{SplitCounts, SynthSpec};
use crate::distill::{InitKind, IterationPlan, LayerRef, TargetSource};
use crate::encoder::{EncoderConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::features::MfccConfig;
use crate::io;
use crate::probes::ProbeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub n_utts: usize,
    pub duration_s: f64,
    pub n_classes: usize,
    #[serde(default = "d_tokens")]
    pub n_tokens: usize,
    #[serde(default = "d_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub splits: SplitCounts,
}

fn d_tokens() -> usize {
    6
}
fn d_noise() -> f64 {
    0.01
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSection {
    #[serde(default = "d_kmeans_iters")]
    pub kmeans_iters: usize,
}

fn d_kmeans_iters() -> usize {
    50
}

impl Default for QuantizerSection {
    fn default() -> Self {
        Self {
            kmeans_iters: d_kmeans_iters(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Mfcc,
    TeacherLayer,
    TeacherLayerPca,
}

/// Explicit dimension overrides applied on top of a preset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderOverrides {
    pub depth: Option<usize>,
    pub emb_dim: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub attn_heads: Option<usize>,
    pub proj_dim: Option<usize>,
    pub cnn_channels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub index: usize,
    pub target_source: SourceKind,
    #[serde(default)]
    pub layer: Option<LayerRef>,
    #[serde(default)]
    pub pca_rank: Option<usize>,
    pub k: usize,
    pub preset: String,
    #[serde(default)]
    pub encoder: EncoderOverrides,
    pub init: InitKind,
    pub steps: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub pca_ablation: bool,
}

fn d_batch() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    /// Iterations whose encoders are probed; empty means the last one.
    #[serde(default)]
    pub iterations: Vec<usize>,
    /// Count the projected CNN output in the layer average.
    #[serde(default = "d_true")]
    pub include_input: bool,
    #[serde(default = "d_probe_steps")]
    pub steps: usize,
    #[serde(default = "d_probe_batch")]
    pub batch: usize,
    #[serde(default)]
    pub peak_lr: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "d_ctc_steps")]
    pub ctc_steps: usize,
    #[serde(default = "d_ctc_lr")]
    pub ctc_peak_lr: f64,
}

fn d_true() -> bool {
    true
}
fn d_probe_steps() -> usize {
    2000
}
fn d_probe_batch() -> usize {
    4
}
fn d_ctc_steps() -> usize {
    1000
}
fn d_ctc_lr() -> f64 {
    1e-2
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            iterations: Vec::new(),
            include_input: true,
            steps: d_probe_steps(),
            batch: d_probe_batch(),
            peak_lr: None,
            seed: None,
            ctc_steps: d_ctc_steps(),
            ctc_peak_lr: d_ctc_lr(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "d_out")]
    pub out: PathBuf,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub features: MfccConfig,
    #[serde(default)]
    pub quantizer: QuantizerSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, rename = "iteration")]
    pub iterations: Vec<PlanSection>,
    #[serde(default)]
    pub probe: ProbeSection,
}

fn d_out() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let c = &self.corpus;
        SynthSpec {
            n_tokens: c.n_tokens,
            noise_std: c.noise_std,
            splits: c.splits,
            ..SynthSpec::new(io::derive_seed(self.seed, "corpus"), c.n_utts, c.duration_s, c.n_classes)
        }
    }

    pub fn plan_section(&self, index: usize) -> Result<&PlanSection> {
        self.iterations
            .iter()
            .find(|p| p.index == index)
            .ok_or_else(|| Error::Config(format!("no [[iteration]] with index {index}")))
    }

    pub fn last_iteration(&self) -> usize {
        self.iterations.iter().map(|p| p.index).max().unwrap_or(0)
    }

    /// Resolved plan for iteration `index`.
    pub fn plan(&self, index: usize) -> Result<IterationPlan> {
        let s = self.plan_section(index)?;
        let mut enc = EncoderConfig::preset(&s.preset, s.k)?;
        let o = &s.encoder;
        enc.depth = o.depth.unwrap_or(enc.depth);
        enc.emb_dim = o.emb_dim.unwrap_or(enc.emb_dim);
        enc.ffn_dim = o.ffn_dim.unwrap_or(enc.ffn_dim);
        enc.attn_heads = o.attn_heads.unwrap_or(enc.attn_heads);
        enc.proj_dim = o.proj_dim.unwrap_or(enc.proj_dim);
        enc.cnn_channels = o.cnn_channels.unwrap_or(enc.cnn_channels);
        let target_source = match (s.target_source, s.layer, s.pca_rank) {
            (SourceKind::Mfcc, None, None) => TargetSource::Mfcc,
            (SourceKind::TeacherLayer, layer, None) => TargetSource::TeacherLayer {
                layer: layer.unwrap_or(LayerRef::Last),
            },
            (SourceKind::TeacherLayerPca, layer, Some(rank)) => TargetSource::TeacherLayerPca {
                layer: layer.unwrap_or(LayerRef::Last),
                rank,
            },
            _ => {
                return Err(Error::Config(format!(
                    "iteration {index}: `layer`/`pca_rank` do not fit target_source {:?}",
                    s.target_source
                )))
            }
        };
        let plan = IterationPlan {
            index,
            target_source,
            k: s.k,
            student_config: enc,
            init: s.init,
            steps: s.steps,
            seed: s.seed.unwrap_or_else(|| io::derive_seed(self.seed, &format!("iteration{index}"))),
            batch_size: s.batch_size,
            kmeans_iters: self.quantizer.kmeans_iters,
            train: self.train,
            pca_ablation: s.pca_ablation,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn probe_config(&self) -> ProbeConfig {
        let p = &self.probe;
        let mut cfg = ProbeConfig::new(self.corpus.n_classes);
        cfg.steps = p.steps;
        cfg.batch = p.batch;
        cfg.seed = p.seed.unwrap_or_else(|| io::derive_seed(self.seed, "probe"));
        if let Some(lr) = p.peak_lr {
            cfg.optimizer.peak_lr = lr;
        }
        cfg
    }

    pub fn probe_iterations(&self) -> Vec<usize> {
        if self.probe.iterations.is_empty() {
            vec![self.last_iteration()]
        } else {
            self.probe.iterations.clone()
        }
    }

    /// Structural checks that need no artifacts.
    pub fn validate(&self) -> Result<()> {
        if self.iterations.is_empty() {
            return Err(Error::Config("at least one [[iteration]] is required".into()));
        }
        let mut indices: Vec<usize> = self.iterations.iter().map(|p| p.index).collect();
        indices.sort_unstable();
        if indices != (1..=indices.len()).collect::<Vec<_>>() {
            return Err(Error::Config(format!(
                "iteration indices must be 1..=n without gaps, got {indices:?}"
            )));
        }
        let first = self.plan_section(1)?;
        if first.target_source != SourceKind::Mfcc {
            return Err(Error::Config("iteration 1 must use mfcc targets".into()));
        }
        for s in &self.iterations {
            let plan = self.plan(s.index)?;
            if s.index > 1 && !plan.target_source.needs_teacher() {
                return Err(Error::Config(format!(
                    "iteration {} must read targets from the previous model",
                    s.index
                )));
            }
            if s.index > 1 {
                let teacher = self.plan(s.index - 1)?.student_config;
                if let Some(l) = plan.target_source.layer() {
                    l.hidden_index(teacher.depth)?;
                }
            }
        }
        for &i in &self.probe.iterations {
            self.plan_section(i)?;
        }
        if self.corpus.splits.cluster_fit == 0 {
            return Err(Error::Config("corpus.splits.cluster_fit must be positive".into()));
        }
        Ok(())
    }
}
