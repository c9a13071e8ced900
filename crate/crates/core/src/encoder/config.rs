use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CNN_STRIDES: [usize; 7] = [5, 2, 2, 2, 2, 2, 2];
pub const CNN_KERNELS: [usize; 7] = [10, 3, 3, 3, 3, 2, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// `logits[c] = cos(proj, label_emb[c]) / tau`
    Cosine,
    /// `logits[c] = proj · label_emb[c]`
    Linear,
}

/// Architecture hyperparameters. Shapes of every parameter tensor follow
/// from this struct alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub cnn_strides: Vec<usize>,
    pub cnn_kernels: Vec<usize>,
    pub cnn_channels: usize,
    pub depth: usize,
    pub emb_dim: usize,
    pub ffn_dim: usize,
    pub attn_heads: usize,
    pub proj_dim: usize,
    pub n_labels: usize,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    #[serde(default = "default_head")]
    pub head: HeadKind,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_head() -> HeadKind {
    HeadKind::Cosine
}

fn default_tau() -> f64 {
    0.1
}

impl EncoderConfig {
    fn base(depth: usize, emb_dim: usize, ffn_dim: usize, attn_heads: usize, n_labels: usize) -> Self {
        Self {
            cnn_strides: CNN_STRIDES.to_vec(),
            cnn_kernels: CNN_KERNELS.to_vec(),
            cnn_channels: 512,
            depth,
            emb_dim,
            ffn_dim,
            attn_heads,
            proj_dim: 768,
            n_labels,
            pos_conv_kernel: 128,
            pos_conv_groups: 16,
            head: HeadKind::Cosine,
            tau: 0.1,
        }
    }

    /// Large: 24 layers, width 1024.
    pub fn large(n_labels: usize) -> Self {
        Self::base(24, 1024, 4096, 16, n_labels)
    }

    /// Shallow: 4 layers, width 1024.
    pub fn shallow(n_labels: usize) -> Self {
        Self::base(4, 1024, 2048, 16, n_labels)
    }

    /// Shallow and thin: 4 layers, width 512.
    pub fn shallow_thin(n_labels: usize) -> Self {
        Self::base(4, 512, 2048, 16, n_labels)
    }

    fn tiny(depth: usize, emb_dim: usize, n_labels: usize) -> Self {
        Self {
            cnn_channels: 16,
            depth,
            emb_dim,
            ffn_dim: 64,
            attn_heads: 4,
            proj_dim: 16,
            pos_conv_kernel: 16,
            pos_conv_groups: 4,
            ..Self::base(depth, emb_dim, 64, 4, n_labels)
        }
    }

    /// Desk-scale analogue of the large model.
    pub fn tiny_large(n_labels: usize) -> Self {
        Self::tiny(4, 32, n_labels)
    }

    pub fn tiny_shallow(n_labels: usize) -> Self {
        Self::tiny(2, 32, n_labels)
    }

    pub fn tiny_shallow_thin(n_labels: usize) -> Self {
        Self::tiny(2, 16, n_labels)
    }

    /// Looks up a named preset: `h-l`, `h-s`, `h-st`, `tiny-l`, `tiny-s`, `tiny-st`.
    pub fn preset(name: &str, n_labels: usize) -> Result<Self> {
        Ok(match name {
            "h-l" | "large" => Self::large(n_labels),
            "h-s" | "shallow" => Self::shallow(n_labels),
            "h-st" | "shallow-thin" => Self::shallow_thin(n_labels),
            "tiny-l" => Self::tiny_large(n_labels),
            "tiny-s" => Self::tiny_shallow(n_labels),
            "tiny-st" => Self::tiny_shallow_thin(n_labels),
            other => return Err(Error::Config(format!("unknown encoder preset `{other}`"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.cnn_strides.len() != 7 || self.cnn_kernels.len() != 7 {
            return err(format!(
                "CNN needs 7 strides and 7 kernels, got {} and {}",
                self.cnn_strides.len(),
                self.cnn_kernels.len()
            ));
        }
        if self.cnn_strides.iter().chain(&self.cnn_kernels).any(|&v| v == 0) {
            return err("CNN strides and kernels must be positive".into());
        }
        for (name, v) in [
            ("cnn_channels", self.cnn_channels),
            ("emb_dim", self.emb_dim),
            ("ffn_dim", self.ffn_dim),
            ("attn_heads", self.attn_heads),
            ("proj_dim", self.proj_dim),
            ("n_labels", self.n_labels),
            ("pos_conv_kernel", self.pos_conv_kernel),
            ("pos_conv_groups", self.pos_conv_groups),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if !self.emb_dim.is_multiple_of(self.attn_heads) {
            return err(format!(
                "emb_dim {} is not divisible by attn_heads {}",
                self.emb_dim, self.attn_heads
            ));
        }
        if !self.emb_dim.is_multiple_of(self.pos_conv_groups) {
            return err(format!(
                "emb_dim {} is not divisible by pos_conv_groups {}",
                self.emb_dim, self.pos_conv_groups
            ));
        }
        if !(self.tau > 0.0) {
            return err(format!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.emb_dim / self.attn_heads
    }

    pub fn total_stride(&self) -> usize {
        self.cnn_strides.iter().product()
    }

    /// Smallest input length that yields one output frame.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        for (k, s) in self.cnn_kernels.iter().zip(&self.cnn_strides).rev() {
            rf = (rf - 1) * s + k;
        }
        rf
    }

    /// Per-layer output lengths, `floor((L - k) / s) + 1`; `None` once a
    /// layer's input is shorter than its kernel.
    pub fn cnn_lengths(&self, n_samples: usize) -> Option<Vec<usize>> {
        let mut len = n_samples;
        let mut out = Vec::with_capacity(7);
        for (&k, &s) in self.cnn_kernels.iter().zip(&self.cnn_strides) {
            if len < k {
                return None;
            }
            len = (len - k) / s + 1;
            out.push(len);
        }
        Some(out)
    }

    pub fn output_frames(&self, n_samples: usize) -> Option<usize> {
        self.cnn_lengths(n_samples).and_then(|v| v.last().copied())
    }

    /// Every parameter tensor name with its shape, sorted by name.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.cnn_channels;
        let d = self.emb_dim;
        let mut v: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, &k) in self.cnn_kernels.iter().enumerate() {
            let c_in = if i == 0 { 1 } else { c };
            v.push((format!("cnn.{i}.weight"), vec![c, c_in, k]));
            v.push((format!("cnn.{i}.bias"), vec![c]));
        }
        v.push(("feature_norm.gamma".into(), vec![c]));
        v.push(("feature_norm.beta".into(), vec![c]));
        v.push(("feature_proj.weight".into(), vec![c, d]));
        v.push(("feature_proj.bias".into(), vec![d]));
        v.push(("mask_emb".into(), vec![d]));
        v.push((
            "pos_conv.weight".into(),
            vec![d, d / self.pos_conv_groups, self.pos_conv_kernel],
        ));
        v.push(("pos_conv.bias".into(), vec![d]));
        for j in 0..self.depth {
            let p = format!("layers.{j}");
            for m in ["q", "k", "v", "o"] {
                v.push((format!("{p}.attn.{m}.weight"), vec![d, d]));
                v.push((format!("{p}.attn.{m}.bias"), vec![d]));
            }
            v.push((format!("{p}.ln1.gamma"), vec![d]));
            v.push((format!("{p}.ln1.beta"), vec![d]));
            v.push((format!("{p}.ln2.gamma"), vec![d]));
            v.push((format!("{p}.ln2.beta"), vec![d]));
            v.push((format!("{p}.ffn.w1"), vec![d, self.ffn_dim]));
            v.push((format!("{p}.ffn.b1"), vec![self.ffn_dim]));
            v.push((format!("{p}.ffn.w2"), vec![self.ffn_dim, d]));
            v.push((format!("{p}.ffn.b2"), vec![d]));
        }
        v.push(("final_norm.gamma".into(), vec![d]));
        v.push(("final_norm.beta".into(), vec![d]));
        v.push(("final_proj.weight".into(), vec![d, self.proj_dim]));
        v.push(("final_proj.bias".into(), vec![self.proj_dim]));
        v.push(("label_emb".into(), vec![self.n_labels, self.proj_dim]));
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Parameters inside the transformer stack only.
    pub fn transformer_param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .filter(|(n, _)| n.starts_with("layers."))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_lengths_for_one_second() {
        let c = EncoderConfig::large(1000);
        assert_eq!(
            c.cnn_lengths(16000).unwrap(),
            vec![3199, 1599, 799, 399, 199, 99, 49]
        );
        assert_eq!(c.total_stride(), 320);
        assert_eq!(c.receptive_field(), 400);
        assert_eq!(c.output_frames(399), None);
        assert_eq!(c.output_frames(400), Some(1));
    }

    #[test]
    fn presets_validate() {
        for name in ["h-l", "h-s", "h-st", "tiny-l", "tiny-s", "tiny-st"] {
            EncoderConfig::preset(name, 64).unwrap().validate().unwrap();
        }
        assert!(EncoderConfig::preset("h-xl", 64).is_err());
        let mut bad = EncoderConfig::tiny_large(8);
        bad.attn_heads = 3;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = EncoderConfig::tiny_large(8);
        bad.cnn_strides.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn large_preset_is_about_316m() {
        let n = EncoderConfig::large(1000).param_count() as f64 / 1e6;
        assert!((n - 316.0).abs() / 316.0 < 0.05, "{n}");
    }

    #[test]
    fn shapes_are_sorted_and_unique() {
        let s = EncoderConfig::tiny_large(4).param_shapes();
        assert!(s.windows(2).all(|w| w[0].0 < w[1].0));
    }
}
