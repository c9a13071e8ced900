//! Utterance classifier on frozen features: temporal convolutions, attention
//! pooling, one feed-forward layer and a linear output.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{self_attention_pool, self_attention_pool_backward, EvalRecord, ProbeConfig, ProbeTask};
use crate::corpus::{AudioBuffer, Split};
use crate::encoder::checkpoint;
use crate::encoder::nn::{col2im, conv_weight_2d, im2col};
use crate::encoder::{log_softmax, AdamState, Model, Params};
use crate::error::{Error, Result};
use crate::io::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct ProbeHeader {
    probe: ProbeConfig,
    input_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub config: ProbeConfig,
    pub input_dim: usize,
    pub params: Params,
}

impl Probe {
    pub fn param_shapes(cfg: &ProbeConfig, input_dim: usize) -> Vec<(String, Vec<usize>)> {
        let h = cfg.hidden;
        let mut v = Vec::new();
        for i in 0..cfg.conv_layers {
            let c_in = if i == 0 { input_dim } else { h };
            v.push((format!("conv.{i}.weight"), vec![h, c_in, cfg.kernel]));
            v.push((format!("conv.{i}.bias"), vec![h]));
        }
        v.push(("pool.w".into(), vec![h]));
        v.push(("ff.weight".into(), vec![h, h]));
        v.push(("ff.bias".into(), vec![h]));
        v.push(("out.weight".into(), vec![h, cfg.n_classes]));
        v.push(("out.bias".into(), vec![cfg.n_classes]));
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn new(config: ProbeConfig, input_dim: usize, seed: u64) -> Result<Self> {
        if config.n_classes < 2 {
            return Err(Error::Config(format!(
                "classification probe needs at least 2 classes, got {}",
                config.n_classes
            )));
        }
        if config.conv_layers == 0 || config.kernel == 0 || config.hidden == 0 || input_dim == 0 {
            return Err(Error::Config("probe layers, kernel, hidden and input dims must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        Ok(Self {
            config,
            input_dim,
            params: Params::init(&Self::param_shapes(&config, input_dim), seed),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ProbeHeader {
            probe: self.config,
            input_dim: self.input_dim,
        };
        checkpoint::save(path, &header, &self.params, None)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let loaded = checkpoint::load::<ProbeHeader>(path)?;
        let shapes = Self::param_shapes(&loaded.config.probe, loaded.config.input_dim);
        for (name, shape) in &shapes {
            match loaded.params.tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(Error::Format(format!("probe tensor `{name}` missing or misshapen"))),
            }
        }
        Ok(Self {
            config: loaded.config.probe,
            input_dim: loaded.config.input_dim,
            params: loaded.params,
        })
    }

    /// Eval-mode class prediction.
    pub fn predict(&self, features: ArrayView2<f64>) -> Result<usize> {
        let out = classifier_forward(self, features, None)?;
        Ok(argmax(out.logits.view()))
    }
}

fn argmax(v: ndarray::ArrayView1<f64>) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
        .0
}

/// Pads by repeating the first and last frames.
fn replicate_pad(x: ArrayView2<f64>, left: usize, right: usize) -> Array2<f64> {
    let (t, c) = x.dim();
    Array2::from_shape_fn((t + left + right, c), |(i, j)| {
        let src = i.saturating_sub(left).min(t - 1);
        x[[src, j]]
    })
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Array2<f64>,
    pre: Array2<f64>,
    drop: Option<Array2<f64>>,
    in_len: usize,
    in_ch: usize,
}

#[derive(Debug, Clone)]
pub struct ClassifierOutput {
    pub logits: Array1<f64>,
    convs: Vec<ConvCache>,
    top: Array2<f64>,
    alpha: Array1<f64>,
    pooled: Array1<f64>,
    ff_pre: Array1<f64>,
    ff: Array1<f64>,
}

/// Forward pass; dropout is active only when `train_rng` is given.
pub fn classifier_forward(
    probe: &Probe,
    features: ArrayView2<f64>,
    mut train_rng: Option<&mut Rng>,
) -> Result<ClassifierOutput> {
    let cfg = &probe.config;
    let p = &probe.params;
    if features.ncols() != probe.input_dim || features.nrows() == 0 {
        return Err(Error::Shape(format!(
            "probe expects T x {} features, got {:?}",
            probe.input_dim,
            features.dim()
        )));
    }
    let left = (cfg.kernel - 1) / 2;
    let right = cfg.kernel - 1 - left;
    let keep = 1.0 - cfg.dropout;
    let mut x = features.to_owned();
    let mut convs = Vec::with_capacity(cfg.conv_layers);
    for i in 0..cfg.conv_layers {
        let (in_len, in_ch) = x.dim();
        let cols = im2col(replicate_pad(x.view(), left, right).view(), cfg.kernel, 1, 0, 0);
        let pre = cols.dot(&conv_weight_2d(p.v3(&format!("conv.{i}.weight"))).t()) + p.v1(&format!("conv.{i}.bias"));
        let mut act = pre.mapv(|v| v.max(0.0));
        let drop = match train_rng.as_deref_mut() {
            Some(rng) if cfg.dropout > 0.0 => {
                let m = Array2::from_shape_simple_fn(act.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                act *= &m;
                Some(m)
            }
            _ => None,
        };
        convs.push(ConvCache {
            cols,
            pre,
            drop,
            in_len,
            in_ch,
        });
        x = act;
    }
    let (pooled, alpha) = self_attention_pool(x.view(), p.v1("pool.w"));
    let ff_pre = pooled.dot(&p.v2("ff.weight")) + p.v1("ff.bias");
    let ff = if cfg.ff_relu {
        ff_pre.mapv(|v| v.max(0.0))
    } else {
        ff_pre.clone()
    };
    let logits = ff.dot(&p.v2("out.weight")) + p.v1("out.bias");
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric {
            stage: "probe forward".into(),
            layer: cfg.conv_layers,
        });
    }
    Ok(ClassifierOutput {
        logits,
        convs,
        top: x,
        alpha,
        pooled,
        ff_pre,
        ff,
    })
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)))
}

/// Parameter gradients for `d loss / d logits`.
pub fn classifier_backward(probe: &Probe, out: &ClassifierOutput, dlogits: &Array1<f64>) -> Params {
    let cfg = &probe.config;
    let p = &probe.params;
    let mut g = Params::zeros_like(p);
    g.accumulate("out.weight", &outer(&out.ff, dlogits));
    g.accumulate("out.bias", dlogits);
    let mut dff = p.v2("out.weight").dot(dlogits);
    if cfg.ff_relu {
        dff.zip_mut_with(&out.ff_pre, |d, &z| {
            if z <= 0.0 {
                *d = 0.0
            }
        });
    }
    g.accumulate("ff.weight", &outer(&out.pooled, &dff));
    g.accumulate("ff.bias", &dff);
    let dpooled = p.v2("ff.weight").dot(&dff);
    let (mut dx, dw) = self_attention_pool_backward(out.top.view(), p.v1("pool.w"), out.alpha.view(), dpooled.view());
    g.accumulate("pool.w", &dw);

    let left = (cfg.kernel - 1) / 2;
    for (i, c) in out.convs.iter().enumerate().rev() {
        if let Some(m) = &c.drop {
            dx *= m;
        }
        dx.zip_mut_with(&c.pre, |d, &z| {
            if z <= 0.0 {
                *d = 0.0
            }
        });
        let name = format!("conv.{i}.weight");
        let dw2 = dx.t().dot(&c.cols);
        let dw3: Array3<f64> = dw2
            .into_shape_with_order((cfg.hidden, c.in_ch, cfg.kernel))
            .expect("conv weight shape");
        g.accumulate(&name, &dw3);
        g.accumulate(&format!("conv.{i}.bias"), &dx.sum_axis(Axis(0)));
        if i == 0 {
            break;
        }
        let dcols = dx.dot(&conv_weight_2d(p.v3(&name)));
        let padded_len = c.in_len + cfg.kernel - 1;
        let dpad = col2im(dcols.view(), padded_len, c.in_ch, cfg.kernel, 1, 0);
        // fold the replicated edge rows back onto the first and last frames
        let mut d = dpad.slice(s![left..left + c.in_len, ..]).to_owned();
        for r in 0..left {
            let row = dpad.row(r).to_owned();
            d.row_mut(0).scaled_add(1.0, &row);
        }
        for r in left + c.in_len..padded_len {
            let row = dpad.row(r).to_owned();
            d.row_mut(c.in_len - 1).scaled_add(1.0, &row);
        }
        dx = d;
    }
    g
}

/// Cross-entropy of one example and its logit gradient.
pub(crate) fn cross_entropy(logits: &Array1<f64>, label: usize) -> (f64, Array1<f64>) {
    let lsm = log_softmax(logits.view());
    let mut grad: Array1<f64> = lsm.iter().map(|l| l.exp()).collect();
    grad[label] -= 1.0;
    (-lsm[label], grad)
}

/// One labeled utterance of a classification probe split.
#[derive(Debug, Clone, Copy)]
pub struct LabeledItem<'a> {
    pub audio: &'a AudioBuffer,
    pub split: Split,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub records: Vec<EvalRecord>,
    pub train_loss: Vec<f64>,
    pub encoder_checksum_before: String,
    pub encoder_checksum_after: String,
}

pub(crate) fn check_splits(train: &[(&str, Split)], eval: &[(&str, Split)]) -> Result<()> {
    if let Some((id, s)) = train.iter().find(|(_, s)| *s != Split::ProbeTrain) {
        return Err(Error::Leakage(format!("`{id}` is tagged {s:?}, not probe-train")));
    }
    if let Some((id, s)) = eval.iter().find(|(_, s)| !matches!(s, Split::ProbeDev | Split::ProbeTest)) {
        return Err(Error::Leakage(format!("evaluation item `{id}` is tagged {s:?}")));
    }
    let train_ids: std::collections::HashSet<&str> = train.iter().map(|(id, _)| *id).collect();
    if let Some((id, _)) = eval.iter().find(|(id, _)| train_ids.contains(id)) {
        return Err(Error::Leakage(format!("`{id}` appears in both training and evaluation")));
    }
    Ok(())
}

pub(crate) fn epoch_batch(n: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = io::rng(io::derive_seed(seed, &format!("epoch{}", step / per_epoch)));
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let start = (step % per_epoch) * batch;
    order[start..(start + batch).min(n)].to_vec()
}

fn dev_accuracy(probe: &Probe, feats: &[Array2<f64>], labels: &[usize]) -> Result<f64> {
    let pred = feats.iter().map(|f| probe.predict(f.view())).collect::<Result<Vec<_>>>()?;
    super::accuracy(&pred, labels)
}

/// Trains `probe` on features from the frozen `model` and reports dev
/// accuracy. `include_input` selects whether hidden state 0 enters the
/// layer average.
pub fn train_probe<'a>(
    probe: &mut Probe,
    model: &Model,
    train: &[LabeledItem<'a>],
    dev: &[LabeledItem<'a>],
    include_input: bool,
) -> Result<ProbeRun> {
    let tt: Vec<(&str, Split)> = train.iter().map(|i| (i.audio.utterance_id.as_str(), i.split)).collect();
    let dt: Vec<(&str, Split)> = dev.iter().map(|i| (i.audio.utterance_id.as_str(), i.split)).collect();
    check_splits(&tt, &dt)?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::EmptyInput("probe training needs train and dev items".into()));
    }
    if let Some(bad) = train.iter().chain(dev).find(|i| i.label >= probe.config.n_classes) {
        return Err(Error::LabelRange {
            label: bad.label,
            k: probe.config.n_classes,
        });
    }
    let before = model.checksum();
    let audio = |v: &[LabeledItem<'a>]| v.iter().map(|i| i.audio).collect::<Vec<&'a AudioBuffer>>();
    let train_feats: Vec<Array2<f64>> = super::extract_all(model, &audio(train), include_input)?
        .into_iter()
        .map(|f| f.data)
        .collect();
    let dev_feats: Vec<Array2<f64>> = super::extract_all(model, &audio(dev), include_input)?
        .into_iter()
        .map(|f| f.data)
        .collect();
    let train_labels: Vec<usize> = train.iter().map(|i| i.label).collect();
    let dev_labels: Vec<usize> = dev.iter().map(|i| i.label).collect();

    let cfg = probe.config;
    let mut opt = AdamState::new(&probe.params);
    let mut rng = io::rng(io::derive_seed(cfg.seed, "dropout"));
    let batch_seed = io::derive_seed(cfg.seed, "batches");
    let mut records = Vec::new();
    let mut train_loss = Vec::with_capacity(cfg.steps);
    let record = |value: f64, step: usize| EvalRecord {
        task: ProbeTask::Classification,
        metric: "accuracy".into(),
        value,
        split: "probe-dev".into(),
        n_items: dev_labels.len(),
        step,
    };
    for step in 0..cfg.steps {
        let idx = epoch_batch(train_feats.len(), cfg.batch, step, batch_seed);
        let mut grads = Params::zeros_like(&probe.params);
        let mut loss = 0.0;
        for &i in &idx {
            let out = classifier_forward(probe, train_feats[i].view(), Some(&mut rng))?;
            let (l, dl) = cross_entropy(&out.logits, train_labels[i]);
            loss += l / idx.len() as f64;
            grads.add_scaled(&classifier_backward(probe, &out, &dl), 1.0 / idx.len() as f64);
        }
        opt.update(&cfg.optimizer, &mut probe.params, &grads);
        train_loss.push(loss);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps {
            records.push(record(dev_accuracy(probe, &dev_feats, &dev_labels)?, step + 1));
        }
    }
    records.push(record(dev_accuracy(probe, &dev_feats, &dev_labels)?, cfg.steps));
    let after = model.checksum();
    if before != after {
        return Err(Error::Numeric {
            stage: "frozen encoder changed during probe training".into(),
            layer: 0,
        });
    }
    Ok(ProbeRun {
        records,
        train_loss,
        encoder_checksum_before: before,
        encoder_checksum_after: after,
    })
}

/// Dev/test accuracy of a (possibly untrained) probe.
pub fn evaluate_probe(probe: &Probe, model: &Model, items: &[LabeledItem<'_>], include_input: bool) -> Result<EvalRecord> {
    let audio: Vec<&AudioBuffer> = items.iter().map(|i| i.audio).collect();
    let feats: Vec<Array2<f64>> = super::extract_all(model, &audio, include_input)?
        .into_iter()
        .map(|f| f.data)
        .collect();
    let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
    let split = items
        .first()
        .and_then(|i| serde_json::to_value(i.split).ok().and_then(|v| v.as_str().map(String::from)))
        .unwrap_or_default();
    Ok(EvalRecord {
        task: ProbeTask::Classification,
        metric: "accuracy".into(),
        value: dev_accuracy(probe, &feats, &labels)?,
        split,
        n_items: items.len(),
        step: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_probe(ff_relu: bool) -> Probe {
        let cfg = ProbeConfig {
            hidden: 5,
            n_classes: 3,
            dropout: 0.0,
            ff_relu,
            ..ProbeConfig::new(3)
        };
        Probe::new(cfg, 4, 17).unwrap()
    }

    fn feats(t: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, 4), |(i, j)| (((i * 13 + j * 7) % 11) as f64 - 5.0) * 0.2)
    }

    fn loss_of(p: &Probe, x: &Array2<f64>) -> f64 {
        cross_entropy(&classifier_forward(p, x.view(), None).unwrap().logits, 1).0
    }

    #[test]
    fn eval_mode_is_deterministic_and_dropout_reproducible() {
        let mut p = tiny_probe(true);
        p.config.dropout = 0.4;
        let x = feats(6);
        let a = classifier_forward(&p, x.view(), None).unwrap().logits;
        let b = classifier_forward(&p, x.view(), None).unwrap().logits;
        assert_eq!(a, b);
        let c = classifier_forward(&p, x.view(), Some(&mut io::rng(3))).unwrap().logits;
        let d = classifier_forward(&p, x.view(), Some(&mut io::rng(3))).unwrap().logits;
        assert_eq!(c, d);
        assert_ne!(a, c);
    }

    #[test]
    fn short_sequences_are_edge_padded() {
        let p = tiny_probe(true);
        for t in 1..4 {
            assert!(classifier_forward(&p, feats(t).view(), None).is_ok());
        }
        let pad = replicate_pad(feats(2).view(), 2, 2);
        assert_eq!(pad.row(0), feats(2).row(0));
        assert_eq!(pad.row(5), feats(2).row(1));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for relu in [true, false] {
            let p = tiny_probe(relu);
            let x = feats(7);
            let out = classifier_forward(&p, x.view(), None).unwrap();
            let (_, dl) = cross_entropy(&out.logits, 1);
            let g = classifier_backward(&p, &out, &dl);
            let h = 1e-6;
            for (name, t) in &p.params.tensors {
                for idx in 0..t.len() {
                    let mut a = p.clone();
                    a.params.get_mut(name).as_slice_mut().unwrap()[idx] += h;
                    let mut b = p.clone();
                    b.params.get_mut(name).as_slice_mut().unwrap()[idx] -= h;
                    let fd = (loss_of(&a, &x) - loss_of(&b, &x)) / (2.0 * h);
                    let an = g.get(name).as_slice().unwrap()[idx];
                    assert!(
                        (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-8,
                        "{name}[{idx}]: fd {fd} vs {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn split_guard() {
        let t = [("a", Split::ProbeTrain)];
        assert!(check_splits(&t, &[("b", Split::ProbeDev)]).is_ok());
        assert!(matches!(check_splits(&t, &[("a", Split::ProbeDev)]), Err(Error::Leakage(_))));
        assert!(check_splits(&[("a", Split::Pretrain)], &[("b", Split::ProbeDev)]).is_err());
        assert!(check_splits(&t, &[("b", Split::ClusterFit)]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let p = tiny_probe(true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.ckpt");
        p.save(&path).unwrap();
        let q = Probe::load(&path).unwrap();
        assert_eq!(q.config, p.config);
        let x = feats(5);
        let a = classifier_forward(&p, x.view(), None).unwrap().logits;
        let b = classifier_forward(&q, x.view(), None).unwrap().logits;
        assert!((a - b).iter().all(|d| d.abs() < 1e-4));
    }
}
