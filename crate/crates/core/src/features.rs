//! Framing and 39-dimensional MFCC extraction (13 cepstra + Δ + ΔΔ).
//!
//! The default hop is 320 samples (20 ms at 16 kHz), which makes the MFCC
//! frame count identical to the encoder CNN output length for any input.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::corpus::AudioBuffer;
use crate::error::{Error, Result};
use crate::io;

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Mfcc,
    Hidden,
    Projected,
}

/// A `T x D` sequence of frame vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Array2<f64>,
    pub frame_rate: f64,
    pub utterance_id: String,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(
        utterance_id: impl Into<String>,
        data: Array2<f64>,
        frame_rate: f64,
        kind: FeatureKind,
    ) -> Result<Self> {
        let (t, d) = data.dim();
        if t == 0 || d == 0 {
            return Err(Error::EmptyInput(format!("feature matrix of shape {t}x{d}")));
        }
        if !(frame_rate > 0.0) {
            return Err(Error::Parameter(format!("frame rate {frame_rate}")));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                stage: "feature matrix".into(),
                layer: 0,
            });
        }
        Ok(Self {
            data,
            frame_rate,
            utterance_id: utterance_id.into(),
            kind,
        })
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ShardHeader {
    utterance_id: String,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "D")]
    d: usize,
    frame_rate: f64,
    kind: FeatureKind,
}

/// Feature shard: JSON header line plus row-major f32 little-endian payload.
pub fn write_shard(path: &Path, f: &FeatureMatrix) -> Result<()> {
    let header = ShardHeader {
        utterance_id: f.utterance_id.clone(),
        t: f.frames(),
        d: f.dim(),
        frame_rate: f.frame_rate,
        kind: f.kind,
    };
    io::write_container(path, &header, &io::f32_le_bytes(f.data.iter().copied()))
}

pub fn read_shard(path: &Path) -> Result<FeatureMatrix> {
    let (h, payload) = io::read_container::<ShardHeader>(path)?;
    let values = io::f32_from_le(&payload)?;
    if values.len() != h.t * h.d {
        return Err(Error::Format(format!(
            "shard {} declares {}x{} but holds {} values",
            path.display(),
            h.t,
            h.d,
            values.len()
        )));
    }
    let data = Array2::from_shape_vec((h.t, h.d), values).expect("length checked");
    FeatureMatrix::new(h.utterance_id, data, h.frame_rate, h.kind)
}

pub fn frame_count(n: usize, win: usize, hop: usize) -> usize {
    if win > n || hop == 0 {
        0
    } else {
        1 + (n - win) / hop
    }
}

/// Symmetric Hann window.
pub fn hann(win: usize) -> Vec<f64> {
    if win == 1 {
        return vec![1.0];
    }
    (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (win - 1) as f64).cos())
        .collect()
}

/// Splits audio into Hann-weighted windows; `T = 1 + floor((N - win) / hop)`.
pub fn frame(audio: &AudioBuffer, win: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    if hop == 0 || win == 0 {
        return Err(Error::Parameter("win and hop must be positive".into()));
    }
    let n = audio.samples.len();
    if win > n {
        return Err(Error::EmptyInput(format!(
            "{}: {n} samples is shorter than one {win}-sample window",
            audio.utterance_id
        )));
    }
    let w = hann(win);
    Ok((0..frame_count(n, win, hop))
        .map(|t| {
            audio.samples[t * hop..t * hop + win]
                .iter()
                .zip(&w)
                .map(|(x, w)| x * w)
                .collect()
        })
        .collect())
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale from 0 Hz to Nyquist, expressed
/// over the `n_fft / 2 + 1` power-spectrum bins.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let mel_max = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * sample_rate / n_fft as f64;
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb[[m, b]] = w;
        }
    }
    fb
}

/// Orthonormal DCT-II matrix, `n_out x n_in`.
pub fn dct2_matrix(n_out: usize, n_in: usize) -> Array2<f64> {
    Array2::from_shape_fn((n_out, n_in), |(k, n)| {
        let scale = if k == 0 {
            (1.0 / n_in as f64).sqrt()
        } else {
            (2.0 / n_in as f64).sqrt()
        };
        scale * (PI * k as f64 * (n as f64 + 0.5) / n_in as f64).cos()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub n_ceps: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            win: 400,
            hop: 320,
            n_mels: 26,
            n_ceps: 13,
        }
    }
}

/// Static cepstra (`T x n_ceps`) with c0 replaced by log frame energy.
pub fn cepstra(audio: &AudioBuffer, cfg: &MfccConfig) -> Result<Array2<f64>> {
    let frames = frame(audio, cfg.win, cfg.hop)?;
    let n_fft = cfg.win.next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let fb = mel_filterbank(cfg.n_mels, n_fft, audio.sample_rate as f64);
    let dct = dct2_matrix(cfg.n_ceps, cfg.n_mels);
    let n_bins = n_fft / 2 + 1;

    let mut out = Array2::zeros((frames.len(), cfg.n_ceps));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for (t, fr) in frames.iter().enumerate() {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (c, &x) in buf.iter_mut().zip(fr) {
            c.re = x;
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        let log_mel: Vec<f64> = fb
            .rows()
            .into_iter()
            .map(|row| {
                let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
                e.max(LOG_FLOOR).ln()
            })
            .collect();
        for k in 0..cfg.n_ceps {
            out[[t, k]] = dct.row(k).iter().zip(&log_mel).map(|(a, b)| a * b).sum();
        }
        let energy: f64 = fr.iter().map(|x| x * x).sum();
        out[[t, 0]] = energy.max(LOG_FLOOR).ln();
    }
    Ok(out)
}

/// Regression deltas with edge replication:
/// `d_t = sum_{n=1..w} n (x_{t+n} - x_{t-n}) / (2 sum n^2)`.
pub fn delta(x: ArrayView2<f64>, window: usize) -> Array2<f64> {
    let (t_len, d) = x.dim();
    let mut out = Array2::zeros((t_len, d));
    if t_len == 0 || window == 0 {
        return out;
    }
    let denom = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let last = t_len as isize - 1;
    for t in 0..t_len as isize {
        for n in 1..=window as isize {
            let fwd = (t + n).min(last) as usize;
            let back = (t - n).max(0) as usize;
            for j in 0..d {
                out[[t as usize, j]] += n as f64 * (x[[fwd, j]] - x[[back, j]]);
            }
        }
    }
    out /= denom;
    out
}

/// 39-dim MFCC: 13 cepstra, their deltas and delta-deltas (±2 frames).
pub fn mfcc39(audio: &AudioBuffer, cfg: &MfccConfig) -> Result<FeatureMatrix> {
    if audio.sample_rate != 16_000 {
        return Err(Error::Parameter(format!(
            "mfcc39 expects 16 kHz audio, got {} Hz",
            audio.sample_rate
        )));
    }
    let c = cepstra(audio, cfg)?;
    let d1 = delta(c.view(), 2);
    let d2 = delta(d1.view(), 2);
    let data = ndarray::concatenate(ndarray::Axis(1), &[c.view(), d1.view(), d2.view()])
        .expect("equal row counts");
    FeatureMatrix::new(
        audio.utterance_id.clone(),
        data,
        audio.sample_rate as f64 / cfg.hop as f64,
        FeatureKind::Mfcc,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn audio(samples: Vec<f64>) -> AudioBuffer {
        AudioBuffer::new("a", samples, 16000)
    }

    fn tone(freq: f64, n: usize) -> AudioBuffer {
        audio(
            (0..n)
                .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 16000.0).sin())
                .collect(),
        )
    }

    #[test]
    fn frame_counts() {
        let a = audio(vec![0.1; 16000]);
        assert_eq!(frame(&a, 400, 320).unwrap().len(), 49);
        assert_eq!(frame(&audio(vec![0.1; 400]), 400, 320).unwrap().len(), 1);
        assert!(matches!(
            frame(&audio(vec![0.1; 399]), 400, 320),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn disjoint_windows_tile_the_signal() {
        let a = audio((0..1000).map(|i| i as f64 / 1000.0).collect());
        let win = 100;
        let frames = frame(&a, win, win).unwrap();
        assert_eq!(frames.len(), 10);
        let w = hann(win);
        for (t, fr) in frames.iter().enumerate() {
            for (i, v) in fr.iter().enumerate() {
                assert_eq!(*v, a.samples[t * win + i] * w[i]);
            }
        }
    }

    #[test]
    fn mfcc_shape_and_rate() {
        let f = mfcc39(&tone(300.0, 16000), &MfccConfig::default()).unwrap();
        assert_eq!(f.data.dim(), (49, 39));
        assert_eq!(f.frame_rate, 50.0);
        assert!(mfcc39(&audio(vec![0.0; 100]), &MfccConfig::default()).is_err());
    }

    #[test]
    fn constant_input_has_zero_deltas() {
        let f = mfcc39(&audio(vec![0.3; 8000]), &MfccConfig::default()).unwrap();
        assert!(f.data.slice(ndarray::s![.., 13..]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn silence_stays_finite() {
        let f = mfcc39(&audio(vec![0.0; 4000]), &MfccConfig::default()).unwrap();
        assert!(f.data.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn delta_of_ramp() {
        let x = Array2::from_shape_fn((12, 1), |(t, _)| t as f64);
        let d = delta(x.view(), 2);
        for t in 2..10 {
            assert!((d[[t, 0]] - 1.0).abs() < 1e-12);
        }
        let dd = delta(d.view(), 2);
        // ΔΔ is zero once both ±2 neighbours of Δ are themselves interior
        for t in 4..8 {
            assert!(dd[[t, 0]].abs() < 1e-12);
        }
        let c = Array2::from_elem((5, 3), 4.0);
        assert!(delta(c.view(), 2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dct_is_orthonormal() {
        let m = dct2_matrix(26, 26);
        let eye = m.dot(&m.t());
        for i in 0..26 {
            for j in 0..26 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((eye[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    // Independent reference: naive DFT, filter evaluation from the HTK mel
    // definition, and an explicit DCT-II sum, on the same Hann windows.
    fn reference_cepstra(a: &AudioBuffer) -> Array2<f64> {
        let (win, hop, n_mels, n_ceps, n_fft) = (400, 320, 26, 13, 512);
        let frames = frame(a, win, hop).unwrap();
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let top = mel(8000.0);
        let mut out = Array2::zeros((frames.len(), n_ceps));
        for (t, fr) in frames.iter().enumerate() {
            let mut padded = fr.clone();
            padded.resize(n_fft, 0.0);
            let power: Vec<f64> = (0..=n_fft / 2)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (n, x) in padded.iter().enumerate() {
                        let ang = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                        re += x * ang.cos();
                        im += x * ang.sin();
                    }
                    re * re + im * im
                })
                .collect();
            let mut logmel = vec![0.0; n_mels];
            for (m, lm) in logmel.iter_mut().enumerate() {
                let lo = inv(top * m as f64 / 27.0);
                let c = inv(top * (m + 1) as f64 / 27.0);
                let hi = inv(top * (m + 2) as f64 / 27.0);
                let mut e = 0.0;
                for (k, p) in power.iter().enumerate() {
                    let f = k as f64 * 16000.0 / n_fft as f64;
                    let w = if f > lo && f <= c {
                        (f - lo) / (c - lo)
                    } else if f > c && f < hi {
                        (hi - f) / (hi - c)
                    } else {
                        0.0
                    };
                    e += w * p;
                }
                *lm = e.max(1e-10).ln();
            }
            for k in 0..n_ceps {
                let s: f64 = (0..n_mels)
                    .map(|n| logmel[n] * (PI * k as f64 * (n as f64 + 0.5) / n_mels as f64).cos())
                    .sum();
                let scale = if k == 0 { (1.0 / 26.0f64).sqrt() } else { (2.0 / 26.0f64).sqrt() };
                out[[t, k]] = scale * s;
            }
            out[[t, 0]] = fr.iter().map(|x| x * x).sum::<f64>().max(1e-10).ln();
        }
        out
    }

    #[test]
    fn octave_tones_match_reference_and_differ() {
        let cfg = MfccConfig::default();
        let lo = tone(220.0, 3200);
        let hi = tone(440.0, 3200);
        let mut means = Vec::new();
        for a in [&lo, &hi] {
            let got = cepstra(a, &cfg).unwrap();
            let want = reference_cepstra(a);
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-8, "{g} vs {w}");
            }
            let m: Array1<f64> = mfcc39(a, &cfg).unwrap().data.mean_axis(ndarray::Axis(0)).unwrap();
            means.push(m);
        }
        let dist = (&means[0] - &means[1]).mapv(|x| x * x).sum().sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn shard_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = mfcc39(&tone(500.0, 4000), &MfccConfig::default()).unwrap();
        let p = dir.path().join("a.feat");
        write_shard(&p, &f).unwrap();
        let back = read_shard(&p).unwrap();
        assert_eq!(back.data.dim(), f.data.dim());
        assert_eq!(back.kind, FeatureKind::Mfcc);
        for (a, b) in back.data.iter().zip(f.data.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
