//! Audio ingestion, the synthetic harmonic-stack corpus, and the two training
//! augmentations (speed perturbation and SpecAugment-style masking).

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::io::{self, Rng};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono PCM signal with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub utterance_id: String,
}

impl AudioBuffer {
    pub fn new(utterance_id: impl Into<String>, samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
            utterance_id: utterance_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Parameter("sample_rate must be positive".into()));
        }
        if let Some(x) = self.samples.iter().find(|x| !(-1.0..=1.0).contains(*x)) {
            return Err(Error::Parameter(format!(
                "{}: sample {x} outside [-1, 1]",
                self.utterance_id
            )));
        }
        Ok(())
    }
}

// --- WAV -------------------------------------------------------------------

/// Reads a RIFF/WAVE file holding 16-bit signed mono PCM.
pub fn load_wav(path: &Path) -> Result<AudioBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_wav(&bytes, id)
}

pub fn decode_wav(bytes: &[u8], utterance_id: String) -> Result<AudioBuffer> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("missing RIFF/WAVE signature".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("chunk extends past end of file".into()))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Format("fmt chunk shorter than 16 bytes".into()));
                }
                let format_tag = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes([body[14], body[15]]);
                fmt = Some((format_tag, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }
    let (format_tag, channels, rate, bits) =
        fmt.ok_or_else(|| Error::Format("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Format("missing data chunk".into()))?;
    if format_tag != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "format tag {format_tag} (only PCM is supported)"
        )));
    }
    if channels != 1 {
        return Err(Error::UnsupportedFormat(format!("{channels} channels (mono only)")));
    }
    if bits != 16 {
        return Err(Error::UnsupportedFormat(format!("{bits}-bit samples (16-bit only)")));
    }
    if rate == 0 {
        return Err(Error::Format("sample rate is zero".into()));
    }
    if data.len() % 2 != 0 {
        return Err(Error::Format("odd-length 16-bit data chunk".into()));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok(AudioBuffer::new(utterance_id, samples, rate))
}

/// Inverse of the loader's scaling; values are rounded and saturated to i16.
pub fn encode_wav(audio: &AudioBuffer) -> Vec<u8> {
    let data_len = audio.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate.to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &x in &audio.samples {
        let v = (x * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    io::write_bytes(path, &encode_wav(audio))
}

// --- manifest --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Pretrain,
    ClusterFit,
    ProbeTrain,
    ProbeDev,
    ProbeTest,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Pretrain,
        Split::ClusterFit,
        Split::ProbeTrain,
        Split::ProbeDev,
        Split::ProbeTest,
    ];

    /// Splits whose audio is used to train the encoder.
    pub fn is_training(self) -> bool {
        matches!(self, Split::Pretrain | Split::ClusterFit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub duration_s: f64,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    /// Token transcript used by the CTC probe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    /// Checks id uniqueness. Split tags are per-entry, so uniqueness of ids
    /// makes the split assignment a partition.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Leakage(format!(
                    "utterance `{}` appears more than once in the manifest",
                    e.id
                )));
            }
        }
        Ok(())
    }

    pub fn ids_in(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.as_str())
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_bytes(path, &self.to_jsonl()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

/// Asserts that two id sets drawn from different splits share no utterance.
pub fn check_disjoint<'a>(
    a: impl IntoIterator<Item = &'a str>,
    b: impl IntoIterator<Item = &'a str>,
) -> Result<()> {
    let a: BTreeSet<&str> = a.into_iter().collect();
    if let Some(shared) = b.into_iter().find(|id| a.contains(id)) {
        return Err(Error::Leakage(format!("utterance `{shared}` appears in two splits")));
    }
    Ok(())
}

// --- synthetic corpus ------------------------------------------------------

/// Number of utterances per split; any remainder goes to `pretrain`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct SplitCounts {
    #[serde(default)]
    pub cluster_fit: usize,
    #[serde(default)]
    pub probe_train: usize,
    #[serde(default)]
    pub probe_dev: usize,
    #[serde(default)]
    pub probe_test: usize,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_utts: usize,
    pub duration_s: f64,
    pub n_classes: usize,
    #[serde(default = "default_n_tokens")]
    pub n_tokens: usize,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub splits: SplitCounts,
}

fn default_n_tokens() -> usize {
    6
}
fn default_sample_rate() -> u32 {
    DEFAULT_SAMPLE_RATE
}
fn default_noise() -> f64 {
    0.01
}

impl SynthSpec {
    pub fn new(seed: u64, n_utts: usize, duration_s: f64, n_classes: usize) -> Self {
        Self {
            seed,
            n_utts,
            duration_s,
            n_classes,
            n_tokens: default_n_tokens(),
            sample_rate: DEFAULT_SAMPLE_RATE,
            noise_std: default_noise(),
            splits: SplitCounts::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub audio: AudioBuffer,
    pub class: usize,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub manifest: CorpusManifest,
    pub utterances: Vec<SynthUtterance>,
}

/// Fundamental of token `token` spoken in class `class`. Classes occupy
/// disjoint pitch registers; tokens are steps inside the register.
pub fn token_f0(class: usize, token: usize, n_tokens: usize) -> f64 {
    let base = 110.0 * 1.6f64.powi(class as i32);
    base * 1.5f64.powf(token as f64 / n_tokens.max(1) as f64)
}

/// Generates a deterministic corpus of harmonic-stack utterances. Each
/// utterance is a sequence of 150-350 ms segments; the segment token follows
/// a mostly-ascending Markov chain and selects the fundamental inside the
/// class register, while the class also sets the harmonic roll-off.
pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    if spec.n_utts == 0 {
        return Err(Error::Parameter("n_utts must be at least 1".into()));
    }
    if !(spec.duration_s > 0.0) {
        return Err(Error::Parameter("duration_s must be positive".into()));
    }
    if spec.n_classes == 0 || spec.n_tokens == 0 {
        return Err(Error::Parameter("n_classes and n_tokens must be at least 1".into()));
    }
    let s = &spec.splits;
    let reserved = s.cluster_fit + s.probe_train + s.probe_dev + s.probe_test;
    if reserved > spec.n_utts {
        return Err(Error::Parameter(format!(
            "split counts ({reserved}) exceed n_utts ({})",
            spec.n_utts
        )));
    }

    let n_samples = (spec.duration_s * spec.sample_rate as f64).round() as usize;
    let mut utterances = Vec::with_capacity(spec.n_utts);
    for i in 0..spec.n_utts {
        let utt_seed = io::derive_seed(spec.seed, &format!("utt-{i}"));
        let class = i % spec.n_classes;
        let (samples, tokens) = synth_signal(utt_seed, class, n_samples, spec);
        utterances.push(SynthUtterance {
            audio: AudioBuffer::new(format!("utt{i:05}"), samples, spec.sample_rate),
            class,
            tokens,
        });
    }

    // seeded shuffle, then cut into splits
    let mut order: Vec<usize> = (0..spec.n_utts).collect();
    let mut rng = io::rng(io::derive_seed(spec.seed, "splits"));
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut split_of = vec![Split::Pretrain; spec.n_utts];
    let mut cursor = 0;
    for (split, count) in [
        (Split::ClusterFit, s.cluster_fit),
        (Split::ProbeTrain, s.probe_train),
        (Split::ProbeDev, s.probe_dev),
        (Split::ProbeTest, s.probe_test),
    ] {
        for &idx in &order[cursor..cursor + count] {
            split_of[idx] = split;
        }
        cursor += count;
    }

    let entries = utterances
        .iter()
        .enumerate()
        .map(|(i, u)| ManifestEntry {
            id: u.audio.utterance_id.clone(),
            path: None,
            seed: Some(io::derive_seed(spec.seed, &format!("utt-{i}"))),
            duration_s: u.audio.duration_s(),
            split: split_of[i],
            class: Some(u.class),
            tokens: Some(u.tokens.clone()),
        })
        .collect();
    let manifest = CorpusManifest { entries };
    manifest.validate()?;
    Ok(SynthCorpus {
        manifest,
        utterances,
    })
}

fn synth_signal(seed: u64, class: usize, n: usize, spec: &SynthSpec) -> (Vec<f64>, Vec<usize>) {
    let mut rng = io::rng(seed);
    let sr = spec.sample_rate as f64;
    let nyquist_guard = 0.47 * sr;
    let tilt = 1.0 + 0.4 * class as f64;
    let ramp = (0.01 * sr) as usize;

    let mut out = vec![0.0; n];
    let mut tokens = Vec::new();
    let mut token = rng.random_range(0..spec.n_tokens);
    let mut start = 0;
    while start < n {
        let seg_len = ((rng.random_range(0.15..0.35) * sr) as usize).max(1);
        let end = (start + seg_len).min(n);
        tokens.push(token);
        let f0 = token_f0(class, token, spec.n_tokens);
        let gain = rng.random_range(0.5..0.9);
        let n_harm = ((nyquist_guard / f0) as usize).clamp(1, 24);
        let norm: f64 = (1..=n_harm).map(|h| (h as f64).powf(-tilt)).sum();
        let phases: Vec<f64> = (0..n_harm).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        for (t, slot) in out[start..end].iter_mut().enumerate() {
            let time = (start + t) as f64 / sr;
            let mut v = 0.0;
            for (h, phase) in phases.iter().enumerate() {
                let hf = (h + 1) as f64;
                v += hf.powf(-tilt) * (2.0 * PI * f0 * hf * time + phase).sin();
            }
            let len = end - start;
            let env = if ramp == 0 {
                1.0
            } else {
                let rise = (t as f64 / ramp as f64).min(1.0);
                let fall = ((len - t) as f64 / ramp as f64).min(1.0);
                rise.min(fall)
            };
            *slot = gain * env * v / norm;
        }
        start = end;
        // mostly ascending chain; never repeat a token back to back
        token = if spec.n_tokens == 1 {
            0
        } else if rng.random_bool(0.75) {
            (token + 1) % spec.n_tokens
        } else {
            let mut next = rng.random_range(0..spec.n_tokens - 1);
            if next >= token {
                next += 1;
            }
            next
        };
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("finite noise std");
        for x in &mut out {
            *x += noise.sample(&mut rng);
        }
    }
    for x in &mut out {
        *x = x.clamp(-1.0, 1.0);
    }
    (out, tokens)
}

// --- augmentation ----------------------------------------------------------

/// Resamples by linear interpolation so the signal plays `factor` times
/// faster. Output length is `round(N / factor)`; the sample rate is kept.
pub fn speed_perturb(audio: &AudioBuffer, factor: f64) -> Result<AudioBuffer> {
    if !(0.5..=2.0).contains(&factor) {
        return Err(Error::Parameter(format!(
            "speed factor {factor} outside [0.5, 2.0]"
        )));
    }
    let n = audio.samples.len();
    if n == 0 {
        return Err(Error::EmptyInput("speed_perturb on empty audio".into()));
    }
    let m = (n as f64 / factor).round() as usize;
    let x = &audio.samples;
    let samples = (0..m)
        .map(|i| {
            let pos = i as f64 * factor;
            let i0 = pos.floor() as usize;
            if i0 >= n - 1 {
                return x[n - 1];
            }
            let frac = pos - i0 as f64;
            if frac == 0.0 {
                x[i0]
            } else {
                x[i0] + frac * (x[i0 + 1] - x[i0])
            }
        })
        .collect();
    Ok(AudioBuffer::new(
        audio.utterance_id.clone(),
        samples,
        audio.sample_rate,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecAugmentConfig {
    pub n_time_masks: usize,
    pub max_t: usize,
    pub n_freq_masks: usize,
    pub max_f: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            n_time_masks: 2,
            max_t: 5,
            n_freq_masks: 2,
            max_f: 4,
        }
    }
}

/// Replaces random time spans and feature bands with the per-dimension mean
/// of the utterance. Cells outside every drawn mask are left untouched.
pub fn spec_augment(
    features: &FeatureMatrix,
    cfg: &SpecAugmentConfig,
    rng: &mut Rng,
) -> Result<FeatureMatrix> {
    let (t, d) = features.data.dim();
    if cfg.max_t > t || cfg.max_f > d {
        return Err(Error::Parameter(format!(
            "mask widths (t={}, f={}) exceed feature shape {t}x{d}",
            cfg.max_t, cfg.max_f
        )));
    }
    let mean = features.data.mean_axis(ndarray::Axis(0)).expect("T >= 1");
    let mut mask = Array2::<bool>::from_elem((t, d), false);
    for _ in 0..cfg.n_time_masks {
        let w = rng.random_range(0..=cfg.max_t);
        let start = rng.random_range(0..=t - w);
        mask.slice_mut(ndarray::s![start..start + w, ..]).fill(true);
    }
    for _ in 0..cfg.n_freq_masks {
        let w = rng.random_range(0..=cfg.max_f);
        let start = rng.random_range(0..=d - w);
        mask.slice_mut(ndarray::s![.., start..start + w]).fill(true);
    }
    let mut out = features.clone();
    for ((i, j), m) in mask.indexed_iter() {
        if *m {
            out.data[[i, j]] = mean[j];
        }
    }
    Ok(out)
}
