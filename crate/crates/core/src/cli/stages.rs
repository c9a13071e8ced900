//! Stage commands. Each stage writes into `<out>/<stage>/<iteration>/`
//! together with a `provenance.json` recording the config hash, seed and the
//! checksums of its inputs and outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::ExperimentConfig;
use crate::corpus::{load_wav, synth_corpus, write_wav, AudioBuffer, CorpusManifest, Split};
use crate::distill::{
    generate_targets, loss_endpoints, run_iteration, targets_from_features, IterationPlan,
    LabelCache, LabelProvenance, TargetCorpus, TargetSet,
};
use crate::encoder::{evaluate, AdamConfig, Example, MaskSpec, Model, StepMetrics};
use crate::error::{Error, Result};
use crate::features::{mfcc39, read_shard, write_shard, FeatureMatrix};
use crate::io;
use crate::probes::{
    corpus_wer, evaluate_probe, extract_all, train_ctc_probe, train_probe, CtcHead, CtcItem, CtcTrainConfig,
    EvalRecord, LabeledItem, Probe, ProbeTask,
};

pub const PROVENANCE: &str = "provenance.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub iteration: usize,
    pub config_hash: String,
    pub seed: u64,
    /// Upstream provenance files and their checksums.
    pub inputs: BTreeMap<String, String>,
    /// Files written by the stage (relative paths) and their checksums.
    pub outputs: BTreeMap<String, String>,
}

/// Shared state for one CLI invocation.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Computed,
    Cached,
}

impl Context {
    pub fn new(config: ExperimentConfig, out: PathBuf, force: bool) -> Self {
        Self { config, out, force }
    }

    pub fn stage_dir(&self, stage: &str, iteration: usize) -> PathBuf {
        self.out.join(stage).join(iteration.to_string())
    }

    /// Directory of a finished upstream stage, or a dependency error.
    pub fn require(&self, stage: &str, iteration: usize) -> Result<PathBuf> {
        let dir = self.stage_dir(stage, iteration);
        if dir.join(PROVENANCE).is_file() {
            Ok(dir)
        } else {
            Err(Error::Dependency {
                stage: format!("{stage} (iteration {iteration})"),
                path: dir,
            })
        }
    }

    /// Runs `body` into a scratch directory and publishes it, unless an
    /// identical run is already on disk.
    fn run_stage(
        &self,
        stage: &str,
        iteration: usize,
        settings: serde_json::Value,
        upstream: &[(&str, usize)],
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<(PathBuf, Outcome)> {
        let mut inputs = BTreeMap::new();
        for &(s, i) in upstream {
            let p = self.require(s, i)?.join(PROVENANCE);
            inputs.insert(format!("{s}/{i}/{PROVENANCE}"), io::file_sha256(&p)?);
        }
        let hashed = json!({ "stage": stage, "iteration": iteration, "seed": self.config.seed, "settings": settings });
        let config_hash = io::sha256_hex(hashed.to_string().as_bytes());
        let dir = self.stage_dir(stage, iteration);
        let prov_path = dir.join(PROVENANCE);
        if prov_path.is_file() {
            let old: Provenance = io::read_json(&prov_path)?;
            if old.config_hash == config_hash && old.inputs == inputs {
                log::info!("{stage}/{iteration}: reusing cached artifacts");
                return Ok((dir, Outcome::Cached));
            }
            if !self.force {
                let found = if old.config_hash != config_hash {
                    old.config_hash
                } else {
                    format!("{} (upstream inputs changed)", old.config_hash)
                };
                return Err(Error::StaleCache {
                    path: dir,
                    expected: config_hash,
                    found,
                });
            }
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let tmp = self.out.join(stage).join(format!(".tmp-{iteration}"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        log::info!("{stage}/{iteration}: running");
        body(&tmp)?;
        let prov = Provenance {
            stage: stage.into(),
            iteration,
            config_hash,
            seed: self.config.seed,
            inputs,
            outputs: checksum_tree(&tmp)?,
        };
        io::write_json(&tmp.join(PROVENANCE), &prov)?;
        fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
        Ok((dir, Outcome::Computed))
    }

    // --- corpus access ---------------------------------------------------

    pub fn load_corpus(&self) -> Result<Corpus> {
        let dir = self.require("synth", 0)?;
        let manifest = CorpusManifest::load(&dir.join("manifest.jsonl"))?;
        let mut audio = BTreeMap::new();
        for e in &manifest.entries {
            let rel = e
                .path
                .as_ref()
                .ok_or_else(|| Error::Format(format!("manifest entry `{}` has no path", e.id)))?;
            let mut a = load_wav(&dir.join(rel))?;
            a.utterance_id = e.id.clone();
            audio.insert(e.id.clone(), a);
        }
        Ok(Corpus { manifest, audio })
    }

    fn plan(&self, i: usize) -> Result<IterationPlan> {
        self.config.plan(i)
    }

    fn check_iteration(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.config.last_iteration() {
            return Err(Error::Usage(format!(
                "iteration {i} is not in the schedule (1..={})",
                self.config.last_iteration()
            )));
        }
        Ok(())
    }

    /// Stage that produced the model of iteration `i`.
    fn model_stage(i: usize) -> &'static str {
        if i == 1 {
            "pretrain"
        } else {
            "distill"
        }
    }

    pub fn load_model(&self, i: usize) -> Result<Model> {
        let dir = self.require(Self::model_stage(i), i)?;
        Ok(Model::load(&dir.join("checkpoint.ckpt"))?.0)
    }

    /// Label cache namespaced by the corpus and quantizer settings, which
    /// the per-entry key does not cover.
    fn label_cache(&self) -> Result<LabelCache> {
        let synth = io::file_sha256(&self.require("synth", 0)?.join(PROVENANCE))?;
        let ns = json!({ "corpus": synth, "features": self.config.features, "quantizer": self.config.quantizer });
        let ns = io::sha256_hex(ns.to_string().as_bytes());
        Ok(LabelCache::new(self.out.join("cache").join("labels").join(&ns[..16])))
    }
}

/// Manifest plus decoded audio, keyed by utterance id.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub audio: BTreeMap<String, AudioBuffer>,
}

impl Corpus {
    pub fn split(&self, splits: &[Split]) -> Vec<&AudioBuffer> {
        self.manifest
            .entries
            .iter()
            .filter(|e| splits.contains(&e.split))
            .map(|e| &self.audio[&e.id])
            .collect()
    }

    /// Training utterances: pretraining and cluster-fit splits.
    pub fn training(&self) -> Vec<&AudioBuffer> {
        self.split(&[Split::Pretrain, Split::ClusterFit])
    }

    fn labeled(&self, split: Split) -> Vec<LabeledItem<'_>> {
        self.manifest
            .entries
            .iter()
            .filter(|e| e.split == split)
            .filter_map(|e| {
                e.class.map(|c| LabeledItem {
                    audio: &self.audio[&e.id],
                    split,
                    label: c,
                })
            })
            .collect()
    }

    fn transcribed(&self, split: Split) -> Vec<CtcItem<'_>> {
        self.manifest
            .entries
            .iter()
            .filter(|e| e.split == split)
            .filter_map(|e| {
                e.tokens.as_ref().map(|t| CtcItem {
                    audio: &self.audio[&e.id],
                    split,
                    tokens: t,
                })
            })
            .collect()
    }

    /// Held-out split used for evaluation: probe-test when present,
    /// otherwise probe-dev.
    fn eval_split(&self) -> Split {
        if self.manifest.entries.iter().any(|e| e.split == Split::ProbeTest) {
            Split::ProbeTest
        } else {
            Split::ProbeDev
        }
    }
}

fn checksum_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("inside root").to_string_lossy().replace('\\', "/");
                out.insert(rel, io::file_sha256(&path)?);
            }
        }
    }
    Ok(out)
}

fn write_metrics(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    io::write_jsonl(path, metrics)
}

/// Initial/final loss summary written next to every trained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iteration: usize,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub ratio: f64,
    pub param_count: usize,
    pub preset: String,
}

fn summarize(plan: &IterationPlan, preset: &str, metrics: &[StepMetrics]) -> Result<TrainSummary> {
    let (a, b) = loss_endpoints(metrics, (metrics.len() / 10).max(1))
        .ok_or_else(|| Error::EmptyInput("no training metrics".into()))?;
    Ok(TrainSummary {
        iteration: plan.index,
        steps: metrics.len(),
        initial_loss: a,
        final_loss: b,
        ratio: b / a,
        param_count: plan.student_config.param_count(),
        preset: preset.into(),
    })
}

// --- stages ----------------------------------------------------------------

pub fn cmd_synth(ctx: &Context) -> Result<Outcome> {
    let spec = ctx.config.synth_spec();
    let settings = serde_json::to_value(&spec)?;
    ctx.run_stage("synth", 0, settings, &[], |dir| {
        let corpus = synth_corpus(&spec)?;
        let mut manifest = corpus.manifest.clone();
        for (e, u) in manifest.entries.iter_mut().zip(&corpus.utterances) {
            let rel = PathBuf::from("wav").join(format!("{}.wav", e.id));
            write_wav(&dir.join(&rel), &u.audio)?;
            e.path = Some(rel);
        }
        manifest.save(&dir.join("manifest.jsonl"))
    })
    .map(|r| r.1)
}

pub fn cmd_features(ctx: &Context) -> Result<Outcome> {
    let cfg = ctx.config.features;
    ctx.run_stage("features", 0, serde_json::to_value(cfg)?, &[("synth", 0)], |dir| {
        let corpus = ctx.load_corpus()?;
        let audio: Vec<&AudioBuffer> = corpus.audio.values().collect();
        let feats: Vec<FeatureMatrix> = {
            use rayon::prelude::*;
            audio.par_iter().map(|a| mfcc39(a, &cfg)).collect::<Result<_>>()?
        };
        for f in &feats {
            write_shard(&dir.join("shards").join(format!("{}.feat", f.utterance_id)), f)?;
        }
        Ok(())
    })
    .map(|r| r.1)
}

fn save_targets(dir: &Path, cache: &LabelCache, set: &TargetSet) -> Result<()> {
    set.save(dir)?;
    cache.put(set)?;
    Ok(())
}

/// First-round labels: k-means over MFCC frames of the cluster-fit split.
pub fn cmd_quantize(ctx: &Context) -> Result<Outcome> {
    let plan = ctx.plan(1)?;
    let settings = json!({ "k": plan.k, "seed": plan.seed, "kmeans_iters": plan.kmeans_iters, "source": plan.target_source });
    ctx.run_stage("quantize", 0, settings, &[("synth", 0), ("features", 0)], |dir| {
        let corpus = ctx.load_corpus()?;
        let shards = ctx.require("features", 0)?.join("shards");
        let load = |v: Vec<&AudioBuffer>| -> Result<Vec<FeatureMatrix>> {
            v.iter()
                .map(|a| read_shard(&shards.join(format!("{}.feat", a.utterance_id))))
                .collect()
        };
        let prov = LabelProvenance::new(None, plan.target_source, None, plan.k, plan.seed)?;
        let cache = ctx.label_cache()?;
        let set = match cache.get(&prov)? {
            Some(s) => s,
            None => targets_from_features(
                &load(corpus.split(&[Split::ClusterFit]))?,
                &load(corpus.training())?,
                prov,
                plan.kmeans_iters,
            )?,
        };
        save_targets(dir, &cache, &set)
    })
    .map(|r| r.1)
}

fn train_into(
    dir: &Path,
    plan: &IterationPlan,
    preset: &str,
    teacher: Option<&Model>,
    corpus: &Corpus,
    targets: &TargetSet,
) -> Result<TrainSummary> {
    let train = corpus.training();
    let result = run_iteration(plan, teacher, &train, targets)?;
    let model = result.model.expect("training round yields a model");
    model.save(&dir.join("checkpoint.ckpt"), result.optimizer.as_ref())?;
    write_metrics(&dir.join("metrics.jsonl"), &result.metrics)?;
    let summary = summarize(plan, preset, &result.metrics)?;
    io::write_json(&dir.join("summary.json"), &summary)?;
    if let Some(r) = &result.report {
        io::write_json(&dir.join("report.json"), r)?;
    }
    log::info!(
        "iteration {}: loss {:.3} -> {:.3} (ratio {:.3})",
        plan.index,
        summary.initial_loss,
        summary.final_loss,
        summary.ratio
    );
    Ok(summary)
}

fn plan_settings(ctx: &Context, i: usize) -> Result<serde_json::Value> {
    Ok(json!({ "plan": ctx.plan(i)?, "preset": ctx.config.plan_section(i)?.preset }))
}

/// Iteration 1: random-init model on MFCC labels.
pub fn cmd_pretrain(ctx: &Context) -> Result<Outcome> {
    let plan = ctx.plan(1)?;
    let preset = ctx.config.plan_section(1)?.preset.clone();
    ctx.run_stage("pretrain", 1, plan_settings(ctx, 1)?, &[("synth", 0), ("quantize", 0)], |dir| {
        let corpus = ctx.load_corpus()?;
        let targets = TargetSet::load(&ctx.require("quantize", 0)?)?;
        train_into(dir, &plan, &preset, None, &corpus, &targets).map(|_| ())
    })
    .map(|r| r.1)
}

fn teacher_upstream(i: usize) -> (&'static str, usize) {
    (Context::model_stage(i - 1), i - 1)
}

fn cached_targets(
    ctx: &Context,
    teacher: &Model,
    plan: &IterationPlan,
    source: crate::distill::TargetSource,
    corpus: &Corpus,
) -> Result<TargetSet> {
    let prov = LabelProvenance::new(Some(teacher), source, Some(plan.index - 1), plan.k, plan.seed)?;
    let cache = ctx.label_cache()?;
    if let Some(set) = cache.get(&prov)? {
        log::info!("labels for iteration {} found in cache", plan.index);
        return Ok(set);
    }
    let fit = corpus.split(&[Split::ClusterFit]);
    let train = corpus.training();
    let set = generate_targets(
        Some(teacher),
        source,
        Some(plan.index - 1),
        TargetCorpus {
            fit: &fit,
            train: &train,
        },
        plan.k,
        plan.seed,
        plan.kmeans_iters,
    )?;
    cache.put(&set)?;
    Ok(set)
}

/// Labels for iteration `i ≥ 2` from the model of iteration `i − 1`.
pub fn cmd_targets(ctx: &Context, i: usize) -> Result<Outcome> {
    ctx.check_iteration(i)?;
    if i < 2 {
        return Err(Error::Usage("iteration 1 labels come from `quantize`".into()));
    }
    let plan = ctx.plan(i)?;
    let up = teacher_upstream(i);
    ctx.run_stage("targets", i, plan_settings(ctx, i)?, &[("synth", 0), up], |dir| {
        let corpus = ctx.load_corpus()?;
        let teacher = ctx.load_model(i - 1)?;
        let set = cached_targets(ctx, &teacher, &plan, plan.target_source, &corpus)?;
        set.save(dir)?;
        if plan.pca_ablation {
            let control = cached_targets(ctx, &teacher, &plan, plan.target_source.without_pca(), &corpus)?;
            control.save(&dir.join("no_pca"))?;
        }
        Ok(())
    })
    .map(|r| r.1)
}

/// One point of a loss curve, tagged with the supervision variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub variant: String,
    pub step: u64,
    pub loss_total: f64,
    pub masked_acc: f64,
}

/// Trains the student of iteration `i ≥ 2`; with `pca_ablation` the same
/// plan is also trained on labels fitted without PCA.
pub fn cmd_distill(ctx: &Context, i: usize) -> Result<Outcome> {
    ctx.check_iteration(i)?;
    if i < 2 {
        return Err(Error::Usage("iteration 1 is trained by `pretrain`".into()));
    }
    let plan = ctx.plan(i)?;
    let preset = ctx.config.plan_section(i)?.preset.clone();
    let up = teacher_upstream(i);
    ctx.run_stage("distill", i, plan_settings(ctx, i)?, &[("synth", 0), ("targets", i), up], |dir| {
        let corpus = ctx.load_corpus()?;
        let teacher = ctx.load_model(i - 1)?;
        let tdir = ctx.require("targets", i)?;
        let targets = TargetSet::load(&tdir)?;
        train_into(dir, &plan, &preset, Some(&teacher), &corpus, &targets)?;
        if plan.pca_ablation {
            let control_plan = plan.without_pca();
            let control = TargetSet::load(&tdir.join("no_pca"))?;
            train_into(&dir.join("ablation"), &control_plan, &preset, Some(&teacher), &corpus, &control)?;
            let mut curves = Vec::new();
            for (variant, path) in [("pca", dir.join("metrics.jsonl")), ("no_pca", dir.join("ablation/metrics.jsonl"))] {
                let m: Vec<StepMetrics> = io::read_jsonl(&path)?;
                curves.extend(m.iter().map(|m| CurvePoint {
                    variant: variant.into(),
                    step: m.step,
                    loss_total: m.loss_total,
                    masked_acc: m.masked_acc,
                }));
            }
            io::write_jsonl(&dir.join("ablation_curves.jsonl"), &curves)?;
        }
        Ok(())
    })
    .map(|r| r.1)
}

fn probe_settings(ctx: &Context) -> serde_json::Value {
    json!({ "probe": ctx.config.probe, "resolved": ctx.config.probe_config() })
}

/// Trains the classification and CTC probes on the frozen model of
/// iteration `i`.
pub fn cmd_probe(ctx: &Context, i: usize) -> Result<Outcome> {
    ctx.check_iteration(i)?;
    let up = (Context::model_stage(i), i);
    ctx.run_stage("probe", i, probe_settings(ctx), &[("synth", 0), up], |dir| {
        let corpus = ctx.load_corpus()?;
        let model = ctx.load_model(i)?;
        let sec = &ctx.config.probe;
        let cfg = ctx.config.probe_config();
        let mut records = Vec::new();

        let train = corpus.labeled(Split::ProbeTrain);
        let dev = corpus.labeled(Split::ProbeDev);
        let mut probe = Probe::new(cfg, model.config.emb_dim, io::derive_seed(cfg.seed, "init"))?;
        let run = train_probe(&mut probe, &model, &train, &dev, sec.include_input)?;
        probe.save(&dir.join("probe.ckpt"))?;
        records.extend(run.records);

        let ctrain = corpus.transcribed(Split::ProbeTrain);
        let cdev = corpus.transcribed(Split::ProbeDev);
        let ccfg = CtcTrainConfig {
            vocab: ctx.config.corpus.n_tokens,
            steps: sec.ctc_steps,
            batch: sec.batch,
            seed: io::derive_seed(cfg.seed, "ctc"),
            optimizer: AdamConfig {
                peak_lr: sec.ctc_peak_lr,
                warmup_steps: 50,
                ..AdamConfig::default()
            },
        };
        let mut head = CtcHead::new(ccfg.vocab, model.config.emb_dim, io::derive_seed(cfg.seed, "ctc-init"))?;
        let crun = train_ctc_probe(&mut head, &model, &ctrain, &cdev, &ccfg, sec.include_input)?;
        head.save(&dir.join("ctc.ckpt"))?;
        records.extend(crun.records);
        io::write_json(
            &dir.join("frozen.json"),
            &json!({ "before": run.encoder_checksum_before, "after": crun.encoder_checksum_after }),
        )?;
        io::write_jsonl(&dir.join("eval.jsonl"), &records)
    })
    .map(|r| r.1)
}

/// Held-out masked-prediction accuracy of one iteration's model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedEval {
    pub iteration: usize,
    pub split: String,
    pub n_items: usize,
    pub k: usize,
    pub masked_acc: f64,
    pub chance: f64,
    pub loss: f64,
}

fn split_name(s: Split) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

/// Scores the model of iteration `i`: masked prediction on held-out
/// utterances, and the trained probes plus an untrained-probe control when
/// the probe stage has run.
pub fn cmd_eval(ctx: &Context, i: usize) -> Result<Outcome> {
    ctx.check_iteration(i)?;
    let label_stage = if i == 1 { ("quantize", 0) } else { ("targets", i) };
    let mut upstream = vec![("synth", 0), (Context::model_stage(i), i), label_stage];
    let probed = ctx.stage_dir("probe", i).join(PROVENANCE).is_file();
    if probed {
        upstream.push(("probe", i));
    }
    let settings = json!({ "probe": probe_settings(ctx), "train": ctx.config.train, "probed": probed });
    ctx.run_stage("eval", i, settings, &upstream, |dir| {
        let corpus = ctx.load_corpus()?;
        let model = ctx.load_model(i)?;
        let split = corpus.eval_split();
        let held = corpus.split(&[split]);
        let teacher = if i > 1 { Some(ctx.load_model(i - 1)?) } else { None };
        let targets = TargetSet::load(&ctx.require(label_stage.0, label_stage.1)?)?;
        let labels = held
            .iter()
            .map(|a| targets.label(teacher.as_ref(), a))
            .collect::<Result<Vec<_>>>()?;
        let examples: Vec<Example> = held
            .iter()
            .zip(&labels)
            .map(|(a, l)| Example {
                audio: a,
                labels: &l.labels,
            })
            .collect();
        let train = &ctx.config.train;
        let spec = MaskSpec::new(train.mask_prob, train.span_len, io::derive_seed(ctx.config.seed, "eval-mask"));
        let m = evaluate(&model, &examples, &spec, train)?;
        let k = targets.provenance.k;
        io::write_json(
            &dir.join("masked.json"),
            &MaskedEval {
                iteration: i,
                split: split_name(split),
                n_items: examples.len(),
                k,
                masked_acc: m.masked_acc,
                chance: 1.0 / k as f64,
                loss: m.loss_total,
            },
        )?;

        if probed {
            let pdir = ctx.require("probe", i)?;
            let include = ctx.config.probe.include_input;
            let items = corpus.labeled(split);
            let probe = Probe::load(&pdir.join("probe.ckpt"))?;
            let mut records = vec![evaluate_probe(&probe, &model, &items, include)?];
            let head = CtcHead::load(&pdir.join("ctc.ckpt"))?;
            let titems = corpus.transcribed(split);
            let audio: Vec<&AudioBuffer> = titems.iter().map(|t| t.audio).collect();
            let feats: Vec<_> = extract_all(&model, &audio, include)?.into_iter().map(|f| f.data).collect();
            let refs: Vec<&[usize]> = titems.iter().map(|t| t.tokens).collect();
            records.push(EvalRecord {
                task: ProbeTask::Ctc,
                metric: "wer".into(),
                value: corpus_wer(&head, &feats, &refs)?,
                split: split_name(split),
                n_items: titems.len(),
                step: 0,
            });
            io::write_jsonl(&dir.join("eval.jsonl"), &records)?;
            let untrained = Probe::new(probe.config, probe.input_dim, io::derive_seed(ctx.config.seed, "control"))?;
            io::write_jsonl(
                &dir.join("control.jsonl"),
                &[evaluate_probe(&untrained, &model, &items, include)?],
            )?;
        }
        Ok(())
    })
    .map(|r| r.1)
}

/// Every stage in order; returns the number of stages actually recomputed.
pub fn cmd_run(ctx: &Context) -> Result<usize> {
    let mut computed = 0;
    let mut count = |o: Outcome| {
        if o == Outcome::Computed {
            computed += 1;
        }
    };
    count(cmd_synth(ctx)?);
    count(cmd_features(ctx)?);
    count(cmd_quantize(ctx)?);
    count(cmd_pretrain(ctx)?);
    for i in 2..=ctx.config.last_iteration() {
        count(cmd_targets(ctx, i)?);
        count(cmd_distill(ctx, i)?);
    }
    for i in ctx.config.probe_iterations() {
        count(cmd_probe(ctx, i)?);
    }
    for i in 1..=ctx.config.last_iteration() {
        count(cmd_eval(ctx, i)?);
    }
    super::report::cmd_report(&ctx.out)?;
    Ok(computed)
}
