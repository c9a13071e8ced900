#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use selfdistill::corpus::AudioBuffer;
use selfdistill::encoder::{backward, forward, masked_pred_loss, EncoderConfig, HeadKind, Model};
use selfdistill::io;

/// l=2, d=8, ffn=16, h=2, d_p=8, k=4 with a narrow CNN.
pub fn tiny_encoder(head: HeadKind) -> EncoderConfig {
    let mut c = EncoderConfig::tiny_shallow(4);
    c.cnn_channels = 4;
    c.depth = 2;
    c.emb_dim = 8;
    c.ffn_dim = 16;
    c.attn_heads = 2;
    c.proj_dim = 8;
    c.pos_conv_kernel = 4;
    c.pos_conv_groups = 2;
    c.head = head;
    c
}

pub fn noise_audio(id: &str, n: usize, seed: u64) -> AudioBuffer {
    let mut rng = io::rng(seed);
    let samples = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    AudioBuffer::new(id, samples, 16_000)
}

fn loss_of(model: &Model, audio: &AudioBuffer, labels: &[u32], mask: &[bool]) -> f64 {
    let out = forward(model, audio, Some(mask), false).unwrap();
    masked_pred_loss(out.logits.view(), labels, mask, 1.0, 0.3).unwrap().total
}

/// Checks `|fd - an| <= rel * max(|fd|, |an|) + 1e-8` on every parameter
/// entry. Returns the number of entries checked and the worst violation.
pub fn encoder_fd_violation(model: &Model, audio: &AudioBuffer, rel: f64) -> (usize, Option<String>) {
    let frames = model.config.output_frames(audio.len()).unwrap();
    let labels: Vec<u32> = (0..frames).map(|t| (t * 7 % 4) as u32).collect();
    let mask: Vec<bool> = (0..frames).map(|t| t % 3 == 1).collect();
    let out = forward(model, audio, Some(&mask), true).unwrap();
    let loss = masked_pred_loss(out.logits.view(), &labels, &mask, 1.0, 0.3).unwrap();
    let grads = backward(model, &out, &loss.grad).unwrap();
    // Richardson-extrapolated central difference; the CNN activations are
    // small, which makes the feature layer norm strongly curved.
    let h = 1e-5;
    let central = |name: &str, idx: usize, h: f64| {
        let mut a = model.clone();
        a.params.get_mut(name).as_slice_mut().unwrap()[idx] += h;
        let mut b = model.clone();
        b.params.get_mut(name).as_slice_mut().unwrap()[idx] -= h;
        (loss_of(&a, audio, &labels, &mask) - loss_of(&b, audio, &labels, &mask)) / (2.0 * h)
    };
    let mut checked = 0;
    let mut worst: Option<(f64, String)> = None;
    for (name, t) in &model.params.tensors {
        for idx in 0..t.len() {
            let fd = (4.0 * central(name, idx, h / 2.0) - central(name, idx, h)) / 3.0;
            let an = grads.get(name).as_slice().unwrap()[idx];
            let excess = (fd - an).abs() - (rel * fd.abs().max(an.abs()) + 1e-8);
            if excess > 0.0 && worst.as_ref().is_none_or(|w| excess > w.0) {
                worst = Some((excess, format!("{name}[{idx}]: fd {fd:.3e} vs analytic {an:.3e}")));
            }
            checked += 1;
        }
    }
    (checked, worst.map(|w| w.1))
}

/// A small experiment: 16 utterances, two rounds, a PCA ablation and probes.
pub fn small_config(out: &Path) -> String {
    format!(
        r#"
seed = 11
out = "{}"

[corpus]
n_utts = 16
duration_s = 0.6
n_classes = 2
splits = {{ cluster_fit = 4, probe_train = 4, probe_dev = 4 }}

[train.optimizer]
peak_lr = 5e-3
warmup_steps = 2

[[iteration]]
index = 1
target_source = "mfcc"
k = 8
preset = "tiny-s"
init = "random"
steps = 4
batch_size = 4

[[iteration]]
index = 2
target_source = "teacher_layer_pca"
layer = "last"
pca_rank = 8
k = 8
preset = "tiny-st"
init = "blocked_average"
steps = 4
batch_size = 4
pca_ablation = true

[probe]
iterations = [2]
steps = 6
ctc_steps = 6
"#,
        out.display()
    )
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("experiment.toml");
    fs::write(&p, text).unwrap();
    p
}

pub fn cli(args: &[&str]) -> i32 {
    selfdistill::cli::main_with_args(std::iter::once("selfdistill").chain(args.iter().copied()))
}

/// Relative path -> bytes for every file below `root`.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    if root.is_dir() {
        walk(root, root, &mut out);
    }
    out
}

/// Paths whose bytes differ, or that exist on one side only.
pub fn tree_diff(a: &Path, b: &Path) -> Vec<String> {
    let (ta, tb) = (tree(a), tree(b));
    let mut diff: Vec<String> = ta
        .iter()
        .filter(|(k, v)| tb.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();
    diff.extend(tb.keys().filter(|k| !ta.contains_key(*k)).cloned());
    diff
}

pub fn copy_tree(from: &Path, to: &Path) {
    for (rel, bytes) in tree(from) {
        let p = to.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, bytes).unwrap();
    }
}
