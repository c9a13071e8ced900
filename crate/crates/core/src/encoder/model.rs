//! CNN feature extractor + pre-LN transformer encoder + label-similarity head,
//! with a retained tape for exact reverse-mode gradients.
//!
//! ```text
//! audio ─ 7× conv(GELU) ─ LN ─ proj ─ mask ─ (+ GELU(posconv)) ─ l× layer ─ LN ─ proj ─ head
//!                                           └ hidden[0]          └ hidden[1..=l]
//! ```

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::config::{EncoderConfig, HeadKind};
use super::nn::{self, GroupedConvCache, LnCache};
use super::params::Params;
use crate::corpus::AudioBuffer;
use crate::error::{Error, Result};

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: Params,
}

impl Model {
    /// Randomly initialized model; deterministic given `seed`.
    pub fn build(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config.param_shapes(), seed);
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking them against the config.
    pub fn from_params(config: EncoderConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.tensors.len() {
            return Err(Error::Shape(format!(
                "config expects {} tensors, got {}",
                shapes.len(),
                params.tensors.len()
            )));
        }
        for (name, shape) in &shapes {
            match params.tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape(format!(
                        "`{name}` has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Shape(format!("missing tensor `{name}`"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}

#[derive(Debug, Clone)]
struct CnnLayerCache {
    cols: Array2<f64>,
    pre: Array2<f64>,
    in_len: usize,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    z1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    z2: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
}

/// Intermediate values kept by a training forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    cnn: Vec<CnnLayerCache>,
    feature_ln: LnCache,
    feature_normed: Array2<f64>,
    mask: Vec<bool>,
    pos_cache: GroupedConvCache,
    pos_pre: Array2<f64>,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
    final_normed: Array2<f64>,
    proj: Array2<f64>,
}

impl Tape {
    /// Attention weights of `layer` for `head`, `T x T`.
    pub fn attention(&self, layer: usize, head: usize) -> &Array2<f64> {
        &self.layers[layer].probs[head]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `T' x n_labels`
    pub logits: Array2<f64>,
    /// `depth + 1` states of shape `T' x emb_dim`; state 0 is the input to
    /// the first transformer layer.
    pub hidden: Vec<Array2<f64>>,
    pub tape: Option<Tape>,
}

fn check_finite(x: &Array2<f64>, stage: &str, layer: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            stage: stage.into(),
            layer,
        })
    }
}

fn row_norms(x: &Array2<f64>) -> Array1<f64> {
    x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(NORM_FLOOR))
}

fn cnn_impl(model: &Model, audio: &AudioBuffer) -> Result<(Array2<f64>, Vec<CnnLayerCache>)> {
    let cfg = &model.config;
    if cfg.cnn_lengths(audio.samples.len()).is_none() {
        return Err(Error::EmptyInput(format!(
            "{}: {} samples is shorter than the {}-sample receptive field",
            audio.utterance_id,
            audio.samples.len(),
            cfg.receptive_field()
        )));
    }
    let mut x = Array2::from_shape_vec((audio.samples.len(), 1), audio.samples.clone())
        .expect("column vector");
    let mut caches = Vec::with_capacity(7);
    for (i, (&k, &stride)) in cfg.cnn_kernels.iter().zip(&cfg.cnn_strides).enumerate() {
        let cols = nn::im2col(x.view(), k, stride, 0, 0);
        let w = nn::conv_weight_2d(model.params.v3(&format!("cnn.{i}.weight")));
        let pre = cols.dot(&w.t()) + model.params.v1(&format!("cnn.{i}.bias"));
        let out = pre.mapv(nn::gelu);
        check_finite(&out, "cnn", i)?;
        caches.push(CnnLayerCache {
            cols,
            pre,
            in_len: x.nrows(),
        });
        x = out;
    }
    Ok((x, caches))
}

/// Output of the convolutional feature extractor, `T' x cnn_channels`.
pub fn cnn_forward(model: &Model, audio: &AudioBuffer) -> Result<Array2<f64>> {
    cnn_impl(model, audio).map(|(x, _)| x)
}

/// Full forward pass. `mask` marks frames replaced by the learned mask
/// embedding; `retain_tape` keeps what [`backward`] needs.
pub fn forward(
    model: &Model,
    audio: &AudioBuffer,
    mask: Option<&[bool]>,
    retain_tape: bool,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let p = &model.params;
    let (feats, cnn_caches) = cnn_impl(model, audio)?;
    let t_len = feats.nrows();
    let mask: Vec<bool> = match mask {
        Some(m) if m.len() != t_len => {
            return Err(Error::Shape(format!(
                "mask has {} frames, CNN produced {t_len}",
                m.len()
            )))
        }
        Some(m) => m.to_vec(),
        None => vec![false; t_len],
    };

    let (feature_normed, feature_ln) =
        nn::layer_norm(feats.view(), p.v1("feature_norm.gamma"), p.v1("feature_norm.beta"));
    let mut x = feature_normed.dot(&p.v2("feature_proj.weight")) + p.v1("feature_proj.bias");
    let mask_emb = p.v1("mask_emb");
    for (t, &m) in mask.iter().enumerate() {
        if m {
            x.row_mut(t).assign(&mask_emb);
        }
    }
    let pos_in = x;
    let (pos_pre, pos_cache) = nn::grouped_conv_same(
        pos_in.view(),
        p.v3("pos_conv.weight"),
        p.v1("pos_conv.bias"),
        cfg.pos_conv_groups,
    );
    let mut x = &pos_in + &pos_pre.mapv(nn::gelu);
    check_finite(&x, "positional conv", 0)?;

    let mut hidden = Vec::with_capacity(cfg.depth + 1);
    hidden.push(x.clone());
    let mut layers = Vec::with_capacity(if retain_tape { cfg.depth } else { 0 });
    for j in 0..cfg.depth {
        let (y, cache) = layer_forward(p, cfg, j, x.view());
        check_finite(&y, "transformer layer", j)?;
        if retain_tape {
            layers.push(cache);
        }
        hidden.push(y.clone());
        x = y;
    }

    let (final_normed, final_ln) =
        nn::layer_norm(x.view(), p.v1("final_norm.gamma"), p.v1("final_norm.beta"));
    let proj = final_normed.dot(&p.v2("final_proj.weight")) + p.v1("final_proj.bias");
    let logits = head_forward(cfg, &proj, p.v2("label_emb"));
    check_finite(&logits, "head", cfg.depth)?;

    let tape = retain_tape.then(|| Tape {
        cnn: cnn_caches,
        feature_ln,
        feature_normed,
        mask,
        pos_cache,
        pos_pre,
        layers,
        final_ln,
        final_normed,
        proj,
    });
    Ok(ForwardOutput {
        logits,
        hidden,
        tape,
    })
}

fn head_forward(cfg: &EncoderConfig, proj: &Array2<f64>, emb: ArrayView2<f64>) -> Array2<f64> {
    match cfg.head {
        HeadKind::Linear => proj.dot(&emb.t()),
        HeadKind::Cosine => {
            let pn = proj / &row_norms(proj).insert_axis(Axis(1));
            let emb = emb.to_owned();
            let en = &emb / &row_norms(&emb).insert_axis(Axis(1));
            pn.dot(&en.t()) / cfg.tau
        }
    }
}

fn layer_forward(p: &Params, cfg: &EncoderConfig, j: usize, x: ArrayView2<f64>) -> (Array2<f64>, LayerCache) {
    let n = |s: &str| format!("layers.{j}.{s}");
    let (z1, ln1) = nn::layer_norm(x, p.v1(&n("ln1.gamma")), p.v1(&n("ln1.beta")));
    let q = z1.dot(&p.v2(&n("attn.q.weight"))) + p.v1(&n("attn.q.bias"));
    let k = z1.dot(&p.v2(&n("attn.k.weight"))) + p.v1(&n("attn.k.bias"));
    let v = z1.dot(&p.v2(&n("attn.v.weight"))) + p.v1(&n("attn.v.bias"));
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(cfg.attn_heads);
    for h in 0..cfg.attn_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        nn::softmax_rows(&mut scores);
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let attn_out = ctx.dot(&p.v2(&n("attn.o.weight"))) + p.v1(&n("attn.o.bias"));
    let h1 = &x + &attn_out;
    let (z2, ln2) = nn::layer_norm(h1.view(), p.v1(&n("ln2.gamma")), p.v1(&n("ln2.beta")));
    let ffn_pre = z2.dot(&p.v2(&n("ffn.w1"))) + p.v1(&n("ffn.b1"));
    let ffn_act = ffn_pre.mapv(nn::gelu);
    let y = &h1 + &(ffn_act.dot(&p.v2(&n("ffn.w2"))) + p.v1(&n("ffn.b2")));
    (
        y,
        LayerCache {
            ln1,
            z1,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            z2,
            ffn_pre,
            ffn_act,
        },
    )
}

fn layer_backward(
    p: &Params,
    cfg: &EncoderConfig,
    j: usize,
    c: &LayerCache,
    dy: Array2<f64>,
    g: &mut Params,
) -> Array2<f64> {
    let n = |s: &str| format!("layers.{j}.{s}");
    // FFN branch
    g.accumulate(&n("ffn.w2"), &c.ffn_act.t().dot(&dy));
    g.accumulate(&n("ffn.b2"), &dy.sum_axis(Axis(0)));
    let dact = dy.dot(&p.v2(&n("ffn.w2")).t());
    let dpre = &dact * &c.ffn_pre.mapv(nn::gelu_grad);
    g.accumulate(&n("ffn.w1"), &c.z2.t().dot(&dpre));
    g.accumulate(&n("ffn.b1"), &dpre.sum_axis(Axis(0)));
    let dz2 = dpre.dot(&p.v2(&n("ffn.w1")).t());
    let (dh1_ln, dg2, db2) = nn::layer_norm_backward(dz2.view(), &c.ln2, p.v1(&n("ln2.gamma")));
    g.accumulate(&n("ln2.gamma"), &dg2);
    g.accumulate(&n("ln2.beta"), &db2);
    let dh1 = dy + &dh1_ln;

    // attention branch
    g.accumulate(&n("attn.o.weight"), &c.ctx.t().dot(&dh1));
    g.accumulate(&n("attn.o.bias"), &dh1.sum_axis(Axis(0)));
    let dctx = dh1.dot(&p.v2(&n("attn.o.weight")).t());
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for (h, a) in c.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dctx_h = dctx.slice(cols);
        let da = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
        let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = a * &(&da - &row_dot) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let mut dz1 = Array2::zeros(c.z1.raw_dim());
    for (m, dm) in [("q", &dq), ("k", &dk), ("v", &dv)] {
        g.accumulate(&n(&format!("attn.{m}.weight")), &c.z1.t().dot(dm));
        g.accumulate(&n(&format!("attn.{m}.bias")), &dm.sum_axis(Axis(0)));
        dz1 += &dm.dot(&p.v2(&n(&format!("attn.{m}.weight"))).t());
    }
    let (dx_ln, dg1, db1) = nn::layer_norm_backward(dz1.view(), &c.ln1, p.v1(&n("ln1.gamma")));
    g.accumulate(&n("ln1.gamma"), &dg1);
    g.accumulate(&n("ln1.beta"), &db1);
    dh1 + &dx_ln
}

fn head_backward(
    cfg: &EncoderConfig,
    proj: &Array2<f64>,
    emb: ArrayView2<f64>,
    dlogits: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    match cfg.head {
        HeadKind::Linear => (dlogits.dot(&emb), dlogits.t().dot(proj)),
        HeadKind::Cosine => {
            let emb = emb.to_owned();
            let np = row_norms(proj);
            let ne = row_norms(&emb);
            let pn = proj / &np.view().insert_axis(Axis(1));
            let en = &emb / &ne.view().insert_axis(Axis(1));
            let dcos = dlogits / cfg.tau;
            let dpn = dcos.dot(&en);
            let den = dcos.t().dot(&pn);
            let unit_back = |d: Array2<f64>, u: &Array2<f64>, norm: &Array1<f64>| {
                let radial = (&d * u).sum_axis(Axis(1)).insert_axis(Axis(1));
                (d - &(u * &radial)) / norm.view().insert_axis(Axis(1))
            };
            (unit_back(dpn, &pn, &np), unit_back(den, &en, &ne))
        }
    }
}

/// Reverse-mode gradients of `sum(dlogits ⊙ logits)` with respect to every
/// parameter, i.e. the parameter gradients of any loss whose logit gradient
/// is `dlogits`.
pub fn backward(model: &Model, out: &ForwardOutput, dlogits: &Array2<f64>) -> Result<Params> {
    let tape = out
        .tape
        .as_ref()
        .ok_or_else(|| Error::Usage("backward needs a forward pass run with retain_tape".into()))?;
    if dlogits.dim() != out.logits.dim() {
        return Err(Error::Shape(format!(
            "logit gradient {:?} vs logits {:?}",
            dlogits.dim(),
            out.logits.dim()
        )));
    }
    let cfg = &model.config;
    let p = &model.params;
    let mut g = Params::zeros(&cfg.param_shapes());

    let (dproj, demb) = head_backward(cfg, &tape.proj, p.v2("label_emb"), dlogits);
    g.accumulate("label_emb", &demb);
    g.accumulate("final_proj.weight", &tape.final_normed.t().dot(&dproj));
    g.accumulate("final_proj.bias", &dproj.sum_axis(Axis(0)));
    let dnormed = dproj.dot(&p.v2("final_proj.weight").t());
    let (mut dx, dgf, dbf) =
        nn::layer_norm_backward(dnormed.view(), &tape.final_ln, p.v1("final_norm.gamma"));
    g.accumulate("final_norm.gamma", &dgf);
    g.accumulate("final_norm.beta", &dbf);

    for j in (0..cfg.depth).rev() {
        dx = layer_backward(p, cfg, j, &tape.layers[j], dx, &mut g);
    }

    // x = pos_in + gelu(posconv(pos_in))
    let dpre = &dx * &tape.pos_pre.mapv(nn::gelu_grad);
    let (dpos_in, dw, db) = nn::grouped_conv_same_backward(
        dpre.view(),
        p.v3("pos_conv.weight"),
        &tape.pos_cache,
        cfg.pos_conv_groups,
    );
    g.accumulate("pos_conv.weight", &dw);
    g.accumulate("pos_conv.bias", &db);
    let mut dproj_in = dx + &dpos_in;

    let mut dmask = Array1::<f64>::zeros(cfg.emb_dim);
    for (t, &m) in tape.mask.iter().enumerate() {
        if m {
            dmask += &dproj_in.row(t);
            dproj_in.row_mut(t).fill(0.0);
        }
    }
    g.accumulate("mask_emb", &dmask);

    g.accumulate("feature_proj.weight", &tape.feature_normed.t().dot(&dproj_in));
    g.accumulate("feature_proj.bias", &dproj_in.sum_axis(Axis(0)));
    let dfeat_normed = dproj_in.dot(&p.v2("feature_proj.weight").t());
    let (mut dcnn, dgn, dbn) = nn::layer_norm_backward(
        dfeat_normed.view(),
        &tape.feature_ln,
        p.v1("feature_norm.gamma"),
    );
    g.accumulate("feature_norm.gamma", &dgn);
    g.accumulate("feature_norm.beta", &dbn);

    for i in (0..cfg.cnn_kernels.len()).rev() {
        let c = &tape.cnn[i];
        let dpre = &dcnn * &c.pre.mapv(nn::gelu_grad);
        let wname = format!("cnn.{i}.weight");
        let dw = dpre.t().dot(&c.cols);
        g.accumulate(&wname, &dw);
        g.accumulate(&format!("cnn.{i}.bias"), &dpre.sum_axis(Axis(0)));
        if i > 0 {
            let w = nn::conv_weight_2d(p.v3(&wname));
            let dcols = dpre.dot(&w);
            let c_in = p.get(&wname).shape()[1];
            dcnn = nn::col2im(
                dcols.view(),
                c.in_len,
                c_in,
                cfg.cnn_kernels[i],
                cfg.cnn_strides[i],
                0,
            );
        }
    }
    Ok(g)
}
