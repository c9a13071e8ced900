//! Acceptance checks. Runs without the libtest harness so that every check
//! prints one PASS/FAIL line; the process exits nonzero if any check fails.
//! `ACCEPTANCE_ONLY=3,7` restricts the run to the listed checks.

mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use common::{cli, copy_tree, encoder_fd_violation, noise_audio, small_config, tiny_encoder, tree_diff, write_config};
use selfdistill::cli::{MaskedEval, Report, TrainSummary};
use selfdistill::corpus::{synth_corpus, Split, SplitCounts, SynthSpec};
use selfdistill::distill::{blocked_avg_init, compression_ratio};
use selfdistill::encoder::{masked_pred_loss, EncoderConfig, HeadKind, Model};
use selfdistill::features::{mfcc39, FeatureKind, FeatureMatrix, MfccConfig};
use selfdistill::io;
use selfdistill::probes::{
    brute_force_ctc, classifier_backward, classifier_forward, ctc_loss, greedy_decode, train_probe, LabeledItem, Probe,
    ProbeConfig,
};
use selfdistill::quantizer::{assign_labels, fit_kmeans, fit_pca, sq_dist, Codebook, KMeansConfig};
use selfdistill::Error;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// 1 ------------------------------------------------------------------------

fn ce(logits: &Array1<f64>, y: usize) -> (f64, Array1<f64>) {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    let mut g = logits.mapv(|v| (v - m).exp() / z);
    let loss = z.ln() + m - logits[y];
    g[y] -= 1.0;
    (loss, g)
}

fn probe_fd(relu: bool) -> (usize, Option<String>) {
    let mut cfg = ProbeConfig::new(3);
    cfg.hidden = 6;
    cfg.ff_relu = relu;
    let probe = Probe::new(cfg, 5, 4).unwrap();
    let mut rng = io::rng(8);
    let x = Array2::from_shape_simple_fn((9, 5), || rng.random_range(-1.0..1.0));
    let loss = |p: &Probe| ce(&classifier_forward(p, x.view(), None).unwrap().logits, 2).0;
    let out = classifier_forward(&probe, x.view(), None).unwrap();
    let grads = classifier_backward(&probe, &out, &ce(&out.logits, 2).1);
    let h = 1e-6;
    let mut n = 0;
    for (name, t) in &probe.params.tensors {
        for idx in 0..t.len() {
            let mut a = probe.clone();
            a.params.get_mut(name).as_slice_mut().unwrap()[idx] += h;
            let mut b = probe.clone();
            b.params.get_mut(name).as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            let an = grads.get(name).as_slice().unwrap()[idx];
            if (fd - an).abs() > 1e-4 * fd.abs().max(an.abs()) + 1e-8 {
                return (n, Some(format!("probe {name}[{idx}]: fd {fd:.3e} vs {an:.3e}")));
            }
            n += 1;
        }
    }
    (n, None)
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut total = 0;
    for (head, seed) in [(HeadKind::Cosine, 1), (HeadKind::Linear, 2)] {
        let model = Model::build(tiny_encoder(head), seed).unwrap();
        let (n, worst) = encoder_fd_violation(&model, &noise_audio("fd", 2000, seed + 10), 1e-4);
        check(n == model.param_count(), "not every encoder entry was checked")?;
        if let Some(w) = worst {
            return Err(format!("{head:?} head, {w}"));
        }
        total += n;
    }
    for relu in [true, false] {
        let (n, worst) = probe_fd(relu);
        if let Some(w) = worst {
            return Err(w);
        }
        total += n;
    }
    let secs = t0.elapsed().as_secs_f64();
    check(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("{total} entries within rel 1e-4 in {secs:.1} s"))
}

// 2 ------------------------------------------------------------------------

/// Parameter count written out tensor group by tensor group.
fn count_oracle(c: &EncoderConfig) -> usize {
    let ch = c.cnn_channels;
    let d = c.emb_dim;
    let mut n = 0;
    let mut c_in = 1;
    for &k in &c.cnn_kernels {
        n += ch * c_in * k + ch;
        c_in = ch;
    }
    n += 2 * ch; // feature layer norm
    n += ch * d + d; // feature projection
    n += d; // mask embedding
    n += d * (d / c.pos_conv_groups) * c.pos_conv_kernel + d;
    let per_layer = 4 * (d * d + d) + 4 * d + (d * c.ffn_dim + c.ffn_dim) + (c.ffn_dim * d + d);
    n += c.depth * per_layer;
    n += 2 * d; // final layer norm
    n += d * c.proj_dim + c.proj_dim;
    n + c.n_labels * c.proj_dim
}

fn accounting() -> Outcome {
    let mut rng = io::rng(2024);
    for i in 0..20 {
        let heads = rng.random_range(1..=4);
        let groups = [1, 2, 4][rng.random_range(0..3)];
        let mut c = EncoderConfig::tiny_large(rng.random_range(2..50));
        c.cnn_channels = rng.random_range(2..12);
        c.depth = rng.random_range(1..6);
        c.emb_dim = 4 * heads * groups * rng.random_range(1..3);
        c.attn_heads = heads;
        c.ffn_dim = rng.random_range(4..40);
        c.proj_dim = rng.random_range(2..20);
        c.pos_conv_kernel = rng.random_range(2..9);
        c.pos_conv_groups = groups;
        let (counter, oracle) = (c.param_count(), count_oracle(&c));
        let built = Model::build(c.clone(), i).map_err(|e| e.to_string())?.param_count();
        check(
            counter == oracle && built == oracle,
            format!("config {i}: counter {counter}, built {built}, oracle {oracle}"),
        )?;
    }
    let large = EncoderConfig::large(1000);
    let hl = large.param_count();
    check(hl == count_oracle(&large), "H-L counter disagrees with the oracle")?;
    check(
        (hl as f64 - 316e6).abs() <= 0.05 * 316e6,
        format!("H-L has {hl} parameters"),
    )?;
    let ds = compression_ratio(316_000_000, 65_000_000).map_err(|e| e.to_string())?;
    check((ds - 79.4).abs() <= 0.1, format!("dS(65M, 316M) = {ds:.3}"))?;
    let hs = EncoderConfig::shallow(1000).param_count();
    let hst = EncoderConfig::shallow_thin(1000).param_count();
    let r = |s: usize| compression_ratio(hl, s).unwrap();
    Ok(format!(
        "20/20 configs exact; H-L {:.1}M; dS(65M,316M) = {ds:.2}%; not gated: H-S {:.1}M (dS {:.1}%), H-ST {:.1}M (dS {:.1}%)",
        hl as f64 / 1e6,
        hs as f64 / 1e6,
        r(hs),
        hst as f64 / 1e6,
        r(hst),
    ))
}

// 3 ------------------------------------------------------------------------

fn alignment() -> Outcome {
    let cfg = EncoderConfig::tiny_large(8);
    check(
        cfg.cnn_lengths(16_000) == Some(vec![3199, 1599, 799, 399, 199, 99, 49]),
        "16000 samples do not give the documented layer lengths",
    )?;
    let mut rng = io::rng(33);
    for _ in 0..50 {
        let n = rng.random_range(400..64_000);
        let mut len = n;
        let mut manual = Vec::new();
        for (k, s) in [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)] {
            len = (len - k) / s + 1;
            manual.push(len);
        }
        let lengths = cfg.cnn_lengths(n).ok_or(format!("{n} samples rejected"))?;
        check(lengths == manual, format!("{n} samples: {lengths:?} vs {manual:?}"))?;
        let mfcc = mfcc39(&noise_audio("len", n, n as u64), &MfccConfig::default()).map_err(|e| e.to_string())?;
        check(
            mfcc.frames() == len,
            format!("{n} samples: CNN {len} frames, MFCC {}", mfcc.frames()),
        )?;
    }
    Ok("50/50 lengths match the layer formula and the MFCC frame count".into())
}

// 4 ------------------------------------------------------------------------

fn gaussian(rng: &mut io::Rng, n: usize, d: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_simple_fn((n, d), || normal.sample(rng))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn clustering() -> Outcome {
    let t0 = Instant::now();
    let mut rng = io::rng(4);
    for i in 0..100 {
        let (n, d, k) = (rng.random_range(20..200), rng.random_range(1..6), rng.random_range(1..9));
        let data = gaussian(&mut rng, n, d);
        let fit = fit_kmeans(data.view(), &KMeansConfig::new(k, 30, i)).map_err(|e| e.to_string())?;
        let h = &fit.inertia_history;
        check(
            h.windows(2).all(|w| w[1] <= w[0]),
            format!("dataset {i}: inertia rose: {h:?}"),
        )?;
    }

    let corners = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let noise = Normal::new(0.0, 0.01).unwrap();
    let blobs = Array2::from_shape_fn((400, 2), |(r, c)| corners[r % 4][c] + noise.sample(&mut rng));
    let fit = fit_kmeans(blobs.view(), &KMeansConfig::new(4, 100, 7)).map_err(|e| e.to_string())?;
    let err = permutations(4)
        .iter()
        .map(|p| {
            (0..4)
                .map(|j| sq_dist(fit.centroids.row(p[j]), Array1::from(corners[j].to_vec()).view()).sqrt())
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min);
    check(err <= 0.05, format!("blob centroids off by {err:.4}"))?;

    for i in 0..10 {
        let d = rng.random_range(2..7);
        let fit_frames = gaussian(&mut rng, 150, d);
        let pca = (i % 2 == 1).then(|| rng.random_range(1..=d));
        let cb = Codebook::fit(fit_frames.view(), pca, &KMeansConfig::new(rng.random_range(2..12), 20, i))
            .map_err(|e| e.to_string())?;
        let frames = gaussian(&mut rng, 60, d);
        let fm = FeatureMatrix::new(format!("u{i}"), frames.clone(), 50.0, FeatureKind::Mfcc).map_err(|e| e.to_string())?;
        let got = assign_labels(&cb, &fm).map_err(|e| e.to_string())?.labels;
        let space = match &cb.pca {
            Some(p) => p.project(frames.view()).map_err(|e| e.to_string())?,
            None => frames,
        };
        let expected: Vec<u32> = space
            .rows()
            .into_iter()
            .map(|x| {
                let mut best = (0, f64::INFINITY);
                for (j, c) in cb.centroids.rows().into_iter().enumerate() {
                    let dist: f64 = x.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist < best.1 {
                        best = (j, dist);
                    }
                }
                best.0 as u32
            })
            .collect();
        check(got == expected, format!("instance {i}: labels differ from brute force"))?;
    }
    let secs = t0.elapsed().as_secs_f64();
    check(secs < 30.0, format!("took {secs:.1} s"))?;
    Ok(format!(
        "100 monotone fits; blob error {err:.4}; 10/10 brute-force matches; {secs:.1} s"
    ))
}

// 5 ------------------------------------------------------------------------

fn pca() -> Outcome {
    let mut rng = io::rng(5);
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let mix = gaussian(&mut rng, 8, 8);
        let data = gaussian(&mut rng, 500, 8).dot(&mix) + 3.0;
        let n = data.nrows() as f64;
        let mean = data.mean_axis(Axis(0)).unwrap();
        let centered = &data - &mean;
        let cov = centered.t().dot(&centered) / n;
        let oracle = SymmetricEigen::new(DMatrix::from_fn(8, 8, |r, c| cov[[r, c]]));
        let mut eig: Vec<f64> = oracle.eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));

        let p = fit_pca(data.view(), 4).map_err(|e| e.to_string())?;
        let recon = p.reconstruct(p.project(data.view()).map_err(|e| e.to_string())?.view()).map_err(|e| e.to_string())?;
        let sq_err = (&data - &recon).mapv(|v| v * v).sum() / n;
        let discarded: f64 = eig[4..].iter().sum();
        check(
            (sq_err - discarded).abs() < 1e-6 && (sq_err / 8.0 - discarded / 8.0).abs() < 1e-6,
            format!("dataset {i}: error {sq_err} vs discarded {discarded}"),
        )?;
        for (a, b) in p.eigenvalues.iter().zip(&eig) {
            check((a - b).abs() < 1e-6, format!("dataset {i}: eigenvalue {a} vs {b}"))?;
        }
        worst = worst.max((sq_err - discarded).abs());

        let full = fit_pca(data.view(), 8).map_err(|e| e.to_string())?;
        let back = full.reconstruct(full.project(data.view()).unwrap().view()).unwrap();
        let max = (&data - &back).fold(0.0f64, |m, v| m.max(v.abs()));
        check(max < 1e-6, format!("dataset {i}: full-rank error {max:e}"))?;
    }
    Ok(format!("10/10 datasets, worst |error - discarded| = {worst:.2e}"))
}

// 6 ------------------------------------------------------------------------

fn loss_analytics() -> Outcome {
    for k in [4usize, 64, 1000] {
        let logits = Array2::zeros((10, k));
        let labels: Vec<u32> = (0..10).map(|t| (t * 37 % k) as u32).collect();
        let mask: Vec<bool> = (0..10).map(|t| t % 2 == 0).collect();
        let out = masked_pred_loss(logits.view(), &labels, &mask, 1.0, 1.0).map_err(|e| e.to_string())?;
        let ln = (k as f64).ln();
        check(
            (out.masked_ce - ln).abs() < 1e-6 && (out.unmasked_ce - ln).abs() < 1e-6 && (out.total - 2.0 * ln).abs() < 1e-6,
            format!("k = {k}: {} / {} vs ln k = {ln}", out.masked_ce, out.unmasked_ce),
        )?;
    }
    let mut rng = io::rng(6);
    let k = 12;
    for trial in 0..20 {
        let logits = Array2::from_shape_simple_fn((30, k), || rng.random_range(-4.0..4.0));
        let labels: Vec<u32> = (0..30).map(|_| rng.random_range(0..k as u32)).collect();
        let mask: Vec<bool> = (0..30).map(|_| rng.random_bool(0.4)).collect();
        let (wm, wu) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
        let out = masked_pred_loss(logits.view(), &labels, &mask, wm, wu).map_err(|e| e.to_string())?;
        let lin = wm * out.masked_ce + wu * out.unmasked_ce;
        check((out.total - lin).abs() < 1e-8, format!("trial {trial}: linearity {} vs {lin}", out.total))?;

        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let mut permuted = Array2::zeros((30, k));
        for (c, &p) in perm.iter().enumerate() {
            permuted.column_mut(p).assign(&logits.column(c));
        }
        let plabels: Vec<u32> = labels.iter().map(|&l| perm[l as usize] as u32).collect();
        let pout = masked_pred_loss(permuted.view(), &plabels, &mask, wm, wu).map_err(|e| e.to_string())?;
        check(
            (pout.total - out.total).abs() < 1e-8,
            format!("trial {trial}: permuted {} vs {}", pout.total, out.total),
        )?;
    }
    Ok("ln k for k in {4, 64, 1000}; linearity and label permutation over 20 trials".into())
}

// 7 ------------------------------------------------------------------------

fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, &s) in path.iter().enumerate() {
        if s != blank && (i == 0 || path[i - 1] != s) {
            out.push(s);
        }
    }
    out
}

fn ctc() -> Outcome {
    let mut rng = io::rng(7);
    let (mut feasible, mut infeasible) = (0, 0);
    for t in 1..=4 {
        for v in 1..=3usize {
            let mut targets: Vec<Vec<usize>> = vec![vec![]];
            for a in 0..v {
                targets.push(vec![a]);
                for b in 0..v {
                    targets.push(vec![a, b]);
                }
            }
            for target in targets {
                let logits = Array2::from_shape_simple_fn((t, v + 1), || rng.random_range(-2.0..2.0));
                let p = brute_force_ctc(logits.view(), &target);
                match ctc_loss(logits.view(), &target) {
                    Ok(out) => {
                        let want = -p.ln();
                        check(
                            (out.loss - want).abs() < 1e-6,
                            format!("T={t} V={v} {target:?}: {} vs {want}", out.loss),
                        )?;
                        feasible += 1;
                    }
                    Err(Error::Infeasible { .. }) => {
                        check(p == 0.0, format!("T={t} V={v} {target:?} rejected but reachable"))?;
                        infeasible += 1;
                    }
                    Err(e) => return Err(e.to_string()),
                }
            }
        }
    }

    // (frame argmax path, expected output) with blank = 3
    let mut table: Vec<(Vec<usize>, Vec<usize>)> = vec![
        (vec![3, 3, 3], vec![]),
        (vec![0, 0, 0], vec![0]),
        (vec![0, 3, 0], vec![0, 0]),
        (vec![0, 0, 1, 1], vec![0, 1]),
        (vec![1, 3, 3, 1, 1, 2], vec![1, 1, 2]),
        (vec![3, 2, 3, 2, 2, 3], vec![2, 2]),
        (vec![2, 1, 0], vec![2, 1, 0]),
        (vec![0, 1, 0, 1], vec![0, 1, 0, 1]),
    ];
    while table.len() < 50 {
        let len = rng.random_range(1..10);
        let path: Vec<usize> = (0..len).map(|_| rng.random_range(0..4)).collect();
        let expected = collapse(&path, 3);
        table.push((path, expected));
    }
    for (path, expected) in &table {
        let logits = Array2::from_shape_fn((path.len(), 4), |(t, c)| if c == path[t] { 2.0 } else { -1.0 });
        let got = greedy_decode(logits.view());
        check(&got == expected, format!("path {path:?}: decoded {got:?}, expected {expected:?}"))?;
    }
    Ok(format!(
        "{feasible} feasible instances match enumeration, {infeasible} infeasible rejected; 50/50 greedy cases"
    ))
}

// 8 and 10 -------------------------------------------------------------------

struct Pipeline {
    _dir: tempfile::TempDir,
    out: PathBuf,
    config: PathBuf,
    seconds: f64,
    code: i32,
}

fn run_pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synthetic");
    let config = repo_root().join("configs/synthetic.toml");
    let t0 = Instant::now();
    let code = cli(&["run", "--config", &config.to_string_lossy(), "--out", &out.to_string_lossy()]);
    Pipeline {
        _dir: dir,
        out,
        config,
        seconds: t0.elapsed().as_secs_f64(),
        code,
    }
}

fn end_to_end(p: &Pipeline) -> Outcome {
    check(p.code == 0, format!("pipeline exited with {}", p.code))?;
    check(p.seconds < 900.0, format!("took {:.0} s", p.seconds))?;
    let report: Report = io::read_json(&p.out.join("report/report.json")).map_err(|e| e.to_string())?;
    let ratios: Vec<&TrainSummary> = report.training.iter().collect();
    check(ratios.len() == 3, format!("{} training summaries", ratios.len()))?;
    for s in &ratios {
        check(
            s.final_loss <= 0.5 * s.initial_loss,
            format!("iteration {}: {:.3} -> {:.3}", s.iteration, s.initial_loss, s.final_loss),
        )?;
    }
    let m: MaskedEval = io::read_json(&p.out.join("eval/3/masked.json")).map_err(|e| e.to_string())?;
    let bar = 10.0 / m.k as f64;
    check(
        m.masked_acc > bar,
        format!("iteration-3 masked accuracy {:.3} <= {bar:.3}", m.masked_acc),
    )?;
    let r: Vec<String> = ratios.iter().map(|s| format!("{:.2}", s.ratio)).collect();
    Ok(format!(
        "{:.0} s; loss ratios {}; iteration-3 held-out ({}) masked accuracy {:.3} > 10/k = {bar:.3}",
        p.seconds,
        r.join("/"),
        m.split,
        m.masked_acc
    ))
}

fn ablation(p: &Pipeline) -> Outcome {
    check(p.code == 0, format!("pipeline exited with {}", p.code))?;
    let report: Report = io::read_json(&p.out.join("report/report.json")).map_err(|e| e.to_string())?;
    let a = report
        .ablations
        .iter()
        .find(|a| a.iteration == 3)
        .ok_or("report has no iteration-3 ablation")?;
    check(
        !a.pca.is_empty() && a.pca.len() == a.no_pca.len(),
        format!("curve lengths {} / {}", a.pca.len(), a.no_pca.len()),
    )?;
    let text = std::fs::read_to_string(p.out.join("report/report.txt")).map_err(|e| e.to_string())?;
    check(text.contains("PCA ablation"), "text report lacks the ablation")?;

    // recompute the stage from the same upstream in a copy
    let copy = p._dir.path().join("rerun");
    copy_tree(&p.out, &copy);
    std::fs::remove_dir_all(copy.join("distill/3")).map_err(|e| e.to_string())?;
    let code = cli(&[
        "distill",
        "--config",
        &p.config.to_string_lossy(),
        "--out",
        &copy.to_string_lossy(),
        "--iteration",
        "3",
    ]);
    check(code == 0, format!("rerun exited with {code}"))?;
    let diff = tree_diff(&p.out.join("distill/3"), &copy.join("distill/3"));
    check(diff.is_empty(), format!("rerun differs in {diff:?}"))?;
    Ok(format!(
        "both curves ({} steps) in the report, rerun byte-identical; observed: {} ({:.4} vs {:.4})",
        a.pca.len(),
        a.observation,
        a.pca_mean_loss,
        a.no_pca_mean_loss
    ))
}

// 9 ------------------------------------------------------------------------

fn distill_init() -> Outcome {
    let teacher = Model::build(EncoderConfig::tiny_large(16), 9).unwrap();
    let copy = blocked_avg_init(&teacher, &teacher.config, 1).map_err(|e| e.to_string())?;
    check(copy.params == teacher.params, "equal-depth init is not an exact copy")?;

    let mut cfg = tiny_encoder(HeadKind::Cosine);
    cfg.depth = 24;
    cfg.ffn_dim = cfg.emb_dim;
    let mut t = Model::build(cfg.clone(), 2).unwrap();
    let d = cfg.emb_dim;
    for (name, tensor) in t.params.tensors.iter_mut() {
        let Some(rest) = name.strip_prefix("layers.") else { continue };
        let l = rest.split('.').next().unwrap().parse::<usize>().unwrap() + 1;
        let l = l as f64;
        if tensor.ndim() == 2 {
            *tensor = Array2::from_diag_elem(d, l).into_dyn();
        } else {
            tensor.fill(l);
        }
    }
    let mut student_cfg = cfg;
    student_cfg.depth = 4;
    let s = blocked_avg_init(&t, &student_cfg, 1).map_err(|e| e.to_string())?;
    for (name, tensor) in &s.params.tensors {
        let Some(rest) = name.strip_prefix("layers.") else { continue };
        let j: usize = rest.split('.').next().unwrap().parse().unwrap();
        let v = 3.5 + 6.0 * j as f64;
        let want = if tensor.ndim() == 2 {
            Array2::from_diag_elem(d, v).into_dyn()
        } else {
            ndarray::ArrayD::from_elem(tensor.raw_dim(), v)
        };
        check(tensor == want, format!("{name} is not {v}·I"))?;
    }
    Ok("equal depth copies bit-exactly; 24 -> 4 gives layer 0 = 3.5·I exactly".into())
}

// 11 -----------------------------------------------------------------------

fn probe_sanity() -> Outcome {
    let mut spec = SynthSpec::new(21, 80, 1.0, 2);
    spec.splits = SplitCounts {
        cluster_fit: 0,
        probe_train: 40,
        probe_dev: 40,
        probe_test: 0,
    };
    let corpus = synth_corpus(&spec).map_err(|e| e.to_string())?;
    let items = |s: Split| -> Vec<LabeledItem<'_>> {
        corpus
            .manifest
            .entries
            .iter()
            .zip(&corpus.utterances)
            .filter(|(e, _)| e.split == s)
            .map(|(e, u)| LabeledItem {
                audio: &u.audio,
                split: e.split,
                label: u.class,
            })
            .collect()
    };
    let train = items(Split::ProbeTrain);
    let dev = items(Split::ProbeDev);
    let model = Model::build(EncoderConfig::tiny_shallow(64), 3).unwrap();
    let checksum = model.checksum();
    let mut cfg = ProbeConfig::new(2);
    cfg.steps = 2000;
    cfg.seed = 9;

    let mut probe = Probe::new(cfg, model.config.emb_dim, 1).unwrap();
    let run = train_probe(&mut probe, &model, &train, &dev, true).map_err(|e| e.to_string())?;
    let acc = run.records.last().unwrap().value;
    check(acc >= 0.9, format!("dev accuracy {acc:.3}"))?;
    check(
        model.checksum() == checksum && run.encoder_checksum_after == checksum,
        "encoder checksum changed",
    )?;

    let mut shuffled = train.clone();
    let mut labels: Vec<usize> = shuffled.iter().map(|i| i.label).collect();
    labels.shuffle(&mut io::rng(5));
    for (item, l) in shuffled.iter_mut().zip(labels) {
        item.label = l;
    }
    let mut control = Probe::new(cfg, model.config.emb_dim, 1).unwrap();
    let ctrl = train_probe(&mut control, &model, &shuffled, &dev, true).map_err(|e| e.to_string())?;
    let c = ctrl.records.last().unwrap().value;
    check((0.3..=0.7).contains(&c), format!("shuffled-label control {c:.3}"))?;
    Ok(format!(
        "dev accuracy {acc:.3} after 2000 steps; checksum unchanged; shuffled control {c:.3}"
    ))
}

// 12 -----------------------------------------------------------------------

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (out_a, out_b) = (a.path().join("out"), b.path().join("out"));
    let cfg_a = write_config(a.path(), &small_config(&out_a));
    let cfg_b = write_config(b.path(), &small_config(&out_b));
    for cfg in [&cfg_a, &cfg_b] {
        let code = cli(&["run", "--config", &cfg.to_string_lossy()]);
        check(code == 0, format!("run exited with {code}"))?;
    }
    let diff = tree_diff(&out_a, &out_b);
    check(diff.is_empty(), format!("independent runs differ in {diff:?}"))?;

    let stages = [
        ("synth", "0", None),
        ("features", "0", None),
        ("quantize", "0", None),
        ("pretrain", "1", None),
        ("targets", "2", Some("2")),
        ("distill", "2", Some("2")),
        ("probe", "2", Some("2")),
        ("eval", "2", Some("2")),
        ("report", "", None),
    ];
    let mut kinds = BTreeSet::new();
    let cfg = cfg_b.to_string_lossy();
    for (stage, it, flag) in stages {
        let rel = if it.is_empty() { stage.to_string() } else { format!("{stage}/{it}") };
        std::fs::remove_dir_all(out_b.join(&rel)).map_err(|e| e.to_string())?;
        let mut args = vec![stage, "--config", &cfg];
        if let Some(i) = flag {
            args.extend(["--iteration", i]);
        }
        let code = cli(&args);
        check(code == 0, format!("{stage} exited with {code}"))?;
        let diff = tree_diff(&out_a.join(&rel), &out_b.join(&rel));
        check(diff.is_empty(), format!("{rel} recomputed differently: {diff:?}"))?;
        kinds.insert(stage);
    }
    Ok(format!(
        "two fresh runs byte-identical; {} stage kinds recomputed in place byte-identically",
        kinds.len()
    ))
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|s| s.contains(&i));
    let names = [
        "gradient correctness",
        "architecture accounting",
        "length alignment",
        "clustering",
        "PCA",
        "loss analytics",
        "CTC",
        "end-to-end pipeline",
        "distillation init",
        "PCA-supervision ablation",
        "probe sanity",
        "determinism",
    ];
    let pipeline = (wanted(8) || wanted(10)).then(run_pipeline);
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !wanted(n) {
            continue;
        }
        let result = match n {
            1 => gradients(),
            2 => accounting(),
            3 => alignment(),
            4 => clustering(),
            5 => pca(),
            6 => loss_analytics(),
            7 => ctc(),
            8 => end_to_end(pipeline.as_ref().unwrap()),
            9 => distill_init(),
            10 => ablation(pipeline.as_ref().unwrap()),
            11 => probe_sanity(),
            _ => determinism(),
        };
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
