//! Iterative self-distillation: pseudo-label generation from a teacher's
//! hidden states (or MFCCs for the first round), student construction,
//! blocked-average initialization and structural-compression accounting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::AudioBuffer;
use crate::encoder::{self, AdamState, EncoderConfig, Example, MaskSpec, Model, StepMetrics, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{mfcc39, FeatureKind, FeatureMatrix, MfccConfig};
use crate::io;
use crate::quantizer::{assign_labels, Codebook, KMeansConfig, PseudoLabelSequence};

/// Teacher layer selector. Layer ids are 0-indexed; layer `j` is read from
/// hidden state `j + 1`, and `Last` is hidden state `depth`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRef {
    Index(usize),
    Last,
}

impl LayerRef {
    /// Index into `ForwardOutput::hidden` for a teacher of the given depth.
    pub fn hidden_index(self, depth: usize) -> Result<usize> {
        match self {
            LayerRef::Last if depth > 0 => Ok(depth),
            LayerRef::Index(j) if j < depth => Ok(j + 1),
            LayerRef::Last => Err(Error::Config("teacher has no transformer layers".into())),
            LayerRef::Index(j) => Err(Error::Config(format!(
                "layer {j} out of range for a teacher with {depth} layers"
            ))),
        }
    }
}

impl Serialize for LayerRef {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LayerRef::Index(j) => s.serialize_u64(*j as u64),
            LayerRef::Last => s.serialize_str("last"),
        }
    }
}

impl<'de> Deserialize<'de> for LayerRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(j) => Ok(LayerRef::Index(j)),
            Raw::S(s) if s == "last" => Ok(LayerRef::Last),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "layer must be an index or \"last\", got \"{s}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSource {
    Mfcc,
    TeacherLayer { layer: LayerRef },
    TeacherLayerPca { layer: LayerRef, rank: usize },
}

impl TargetSource {
    pub fn needs_teacher(self) -> bool {
        !matches!(self, TargetSource::Mfcc)
    }

    pub fn layer(self) -> Option<LayerRef> {
        match self {
            TargetSource::Mfcc => None,
            TargetSource::TeacherLayer { layer } | TargetSource::TeacherLayerPca { layer, .. } => Some(layer),
        }
    }

    pub fn pca_rank(self) -> Option<usize> {
        match self {
            TargetSource::TeacherLayerPca { rank, .. } => Some(rank),
            _ => None,
        }
    }

    /// Same layer without PCA compression.
    pub fn without_pca(self) -> Self {
        match self {
            TargetSource::TeacherLayerPca { layer, .. } => TargetSource::TeacherLayer { layer },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Random,
    BlockedAverage,
}

fn default_batch() -> usize {
    8
}

fn default_kmeans_iters() -> usize {
    50
}

/// One round of the schedule. Index 0 only produces labels; later rounds
/// train a student on targets from the previous round's model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationPlan {
    pub index: usize,
    pub target_source: TargetSource,
    pub k: usize,
    pub student_config: EncoderConfig,
    pub init: InitKind,
    pub steps: usize,
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_kmeans_iters")]
    pub kmeans_iters: usize,
    #[serde(default)]
    pub train: TrainConfig,
    /// Also train a control run with the PCA step removed from supervision.
    #[serde(default)]
    pub pca_ablation: bool,
}

impl IterationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.index == 0 && self.steps > 0 {
            return Err(Error::Plan("iteration 0 produces labels only and cannot train".into()));
        }
        if self.index > 0 && self.steps == 0 {
            return Err(Error::Plan(format!("iteration {} has no training steps", self.index)));
        }
        if self.k == 0 {
            return Err(Error::Plan("k must be at least 1".into()));
        }
        if self.student_config.n_labels != self.k {
            return Err(Error::Plan(format!(
                "student head has {} labels but the plan asks for k = {}",
                self.student_config.n_labels, self.k
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Plan("batch_size must be at least 1".into()));
        }
        if self.pca_ablation && self.target_source.pca_rank().is_none() {
            return Err(Error::Plan("pca_ablation requires a PCA target source".into()));
        }
        self.student_config.validate()
    }

    /// The control variant used by the PCA ablation.
    pub fn without_pca(&self) -> Self {
        Self {
            target_source: self.target_source.without_pca(),
            pca_ablation: false,
            ..self.clone()
        }
    }
}

// --- compression accounting -------------------------------------------------

/// `100 · (1 − student / teacher)`.
pub fn compression_ratio(teacher_params: usize, student_params: usize) -> Result<f64> {
    if teacher_params == 0 || student_params == 0 {
        return Err(Error::Parameter("parameter counts must be positive".into()));
    }
    Ok(100.0 * (1.0 - student_params as f64 / teacher_params as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub teacher_params: usize,
    pub student_params: usize,
    /// Percent.
    pub delta_s: f64,
    pub delta_depth: i64,
    pub delta_width: i64,
    pub delta_heads: i64,
}

impl CompressionReport {
    pub fn new(teacher: &EncoderConfig, student: &EncoderConfig) -> Result<Self> {
        let (t, s) = (teacher.param_count(), student.param_count());
        Ok(Self {
            teacher_params: t,
            student_params: s,
            delta_s: compression_ratio(t, s)?,
            delta_depth: teacher.depth as i64 - student.depth as i64,
            delta_width: teacher.emb_dim as i64 - student.emb_dim as i64,
            delta_heads: teacher.attn_heads as i64 - student.attn_heads as i64,
        })
    }
}

// --- blocked-average initialization ------------------------------------------

fn layer_suffix(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("layers.")?;
    let (idx, suffix) = rest.split_once('.')?;
    Some((idx.parse().ok()?, suffix))
}

/// Student layer `s` is the element-wise mean of teacher layers
/// `s·b .. (s+1)·b` with `b = teacher_depth / student_depth`. Tensors outside
/// the stack are copied when their shapes agree and drawn randomly otherwise.
pub fn blocked_avg_init(teacher: &Model, student_config: &EncoderConfig, seed: u64) -> Result<Model> {
    student_config.validate()?;
    let (td, sd) = (teacher.config.depth, student_config.depth);
    if sd == 0 || td % sd != 0 {
        return Err(Error::Config(format!(
            "student depth {sd} does not divide teacher depth {td}"
        )));
    }
    let mut student = Model::build(student_config.clone(), seed)?;
    let t = &teacher.config;
    if t.emb_dim != student_config.emb_dim || t.ffn_dim != student_config.ffn_dim {
        log::warn!(
            "teacher width {}/{} differs from student width {}/{}; using random init",
            t.emb_dim,
            t.ffn_dim,
            student_config.emb_dim,
            student_config.ffn_dim
        );
        return Ok(student);
    }
    let block = td / sd;
    for (name, tensor) in student.params.tensors.iter_mut() {
        match layer_suffix(name) {
            Some((s, suffix)) => {
                // running mean: exact when every block member is identical
                for (n, l) in (s * block..(s + 1) * block).enumerate() {
                    let src = teacher.params.get(&format!("layers.{l}.{suffix}"));
                    if n == 0 {
                        tensor.assign(src);
                    } else {
                        let w = 1.0 / (n + 1) as f64;
                        ndarray::Zip::from(&mut *tensor)
                            .and(src)
                            .for_each(|m, &x| *m += (x - *m) * w);
                    }
                }
            }
            None => match teacher.params.tensors.get(name) {
                Some(src) if src.shape() == tensor.shape() => tensor.assign(src),
                _ => log::info!("`{name}` has no matching teacher tensor; keeping random init"),
            },
        }
    }
    Ok(student)
}

// --- target generation -------------------------------------------------------

/// Utterances available to target generation: the codebook is fitted on
/// `fit` only and labels are produced for every utterance in `train`.
#[derive(Debug, Clone, Copy)]
pub struct TargetCorpus<'a> {
    pub fit: &'a [&'a AudioBuffer],
    pub train: &'a [&'a AudioBuffer],
}

/// Where a label set came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelProvenance {
    /// Iteration whose model produced the features (`None` for MFCC).
    pub source_iteration: Option<usize>,
    pub teacher_checksum: Option<String>,
    pub source: TargetSource,
    /// Hidden-state index actually read.
    pub hidden_index: Option<usize>,
    pub k: usize,
    pub seed: u64,
}

impl LabelProvenance {
    pub fn new(
        teacher: Option<&Model>,
        source: TargetSource,
        source_iteration: Option<usize>,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        let hidden_index = match (source.layer(), teacher) {
            (Some(l), Some(t)) => Some(l.hidden_index(t.config.depth)?),
            (Some(_), None) => return Err(Error::Plan("teacher-sourced targets need a teacher model".into())),
            (None, _) => None,
        };
        let teacher_sourced = source.needs_teacher();
        Ok(Self {
            source_iteration: source_iteration.filter(|_| teacher_sourced),
            teacher_checksum: teacher.filter(|_| teacher_sourced).map(Model::checksum),
            source,
            hidden_index,
            k,
            seed,
        })
    }

    pub fn cache_key(&self) -> String {
        let key = serde_json::json!({
            "teacher": self.teacher_checksum,
            "layer": self.hidden_index,
            "pca_rank": self.source.pca_rank(),
            "k": self.k,
            "seed": self.seed,
        });
        io::sha256_hex(key.to_string().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub codebook: Codebook,
    pub labels: BTreeMap<String, PseudoLabelSequence>,
    pub provenance: LabelProvenance,
}

/// Supervision features for one utterance.
pub fn target_features(teacher: Option<&Model>, source: TargetSource, audio: &AudioBuffer) -> Result<FeatureMatrix> {
    match (source.layer(), teacher) {
        (None, _) => mfcc39(audio, &MfccConfig::default()),
        (Some(_), None) => Err(Error::Plan("teacher-sourced targets need a teacher model".into())),
        (Some(layer), Some(t)) => {
            let idx = layer.hidden_index(t.config.depth)?;
            let mut out = encoder::forward(t, audio, None, false)?;
            let rate = audio.sample_rate as f64 / t.config.total_stride() as f64;
            FeatureMatrix::new(audio.utterance_id.clone(), out.hidden.swap_remove(idx), rate, FeatureKind::Hidden)
        }
    }
}

fn stack(features: &[FeatureMatrix]) -> Result<Array2<f64>> {
    let views: Vec<ArrayView2<f64>> = features.iter().map(|f| f.data.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Fits a codebook on the `fit` utterances and labels every `train`
/// utterance. `source_iteration` names the round that produced `teacher`.
pub fn generate_targets(
    teacher: Option<&Model>,
    source: TargetSource,
    source_iteration: Option<usize>,
    corpus: TargetCorpus<'_>,
    k: usize,
    seed: u64,
    kmeans_iters: usize,
) -> Result<TargetSet> {
    let provenance = LabelProvenance::new(teacher, source, source_iteration, k, seed)?;
    let extract = |v: &[&AudioBuffer]| -> Result<Vec<FeatureMatrix>> {
        v.par_iter().map(|a| target_features(teacher, source, a)).collect()
    };
    targets_from_features(&extract(corpus.fit)?, &extract(corpus.train)?, provenance, kmeans_iters)
}

/// Codebook fit and assignment on precomputed supervision features.
pub fn targets_from_features(
    fit: &[FeatureMatrix],
    train: &[FeatureMatrix],
    provenance: LabelProvenance,
    kmeans_iters: usize,
) -> Result<TargetSet> {
    if fit.is_empty() || train.is_empty() {
        return Err(Error::EmptyInput("target generation needs fit and train utterances".into()));
    }
    let frames = stack(fit)?;
    let cfg = KMeansConfig::new(provenance.k, kmeans_iters, provenance.seed);
    let codebook = Codebook::fit(frames.view(), provenance.source.pca_rank(), &cfg)?;
    let labels: Vec<PseudoLabelSequence> = train
        .par_iter()
        .map(|f| assign_labels(&codebook, f))
        .collect::<Result<_>>()?;
    Ok(TargetSet {
        codebook,
        labels: labels.into_iter().map(|l| (l.utterance_id.clone(), l)).collect(),
        provenance,
    })
}

impl TargetSet {
    /// Labels new audio with this set's codebook (used for held-out data).
    pub fn label(&self, teacher: Option<&Model>, audio: &AudioBuffer) -> Result<PseudoLabelSequence> {
        if let (Some(expected), Some(t)) = (&self.provenance.teacher_checksum, teacher) {
            if &t.checksum() != expected {
                return Err(Error::Plan("teacher does not match the model these labels came from".into()));
            }
        }
        assign_labels(&self.codebook, &target_features(teacher, self.provenance.source, audio)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let prov = serde_json::to_value(&self.provenance)?;
        self.codebook.save(&dir.join("codebook.bin"))?;
        for (id, l) in &self.labels {
            l.save(&dir.join("labels").join(format!("{id}.lab")), Some(&prov))?;
        }
        io::write_json(&dir.join("label_provenance.json"), &self.provenance)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let provenance: LabelProvenance = io::read_json(&dir.join("label_provenance.json"))?;
        let codebook = Codebook::load(&dir.join("codebook.bin"))?;
        let label_dir = dir.join("labels");
        let mut paths: Vec<PathBuf> = fs::read_dir(&label_dir)
            .map_err(|e| Error::io(&label_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "lab"))
            .collect();
        paths.sort();
        let mut labels = BTreeMap::new();
        for p in paths {
            let (seq, prov) = PseudoLabelSequence::load(&p)?;
            if prov.as_ref() != Some(&serde_json::to_value(&provenance)?) {
                return Err(Error::Format(format!("{} has foreign provenance", p.display())));
            }
            labels.insert(seq.utterance_id.clone(), seq);
        }
        Ok(Self {
            codebook,
            labels,
            provenance,
        })
    }
}

/// Write-once label store keyed by (teacher checksum, layer, PCA rank, k, seed).
#[derive(Debug, Clone)]
pub struct LabelCache {
    pub root: PathBuf,
}

impl LabelCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(&self, prov: &LabelProvenance) -> PathBuf {
        self.root.join(prov.cache_key())
    }

    pub fn get(&self, prov: &LabelProvenance) -> Result<Option<TargetSet>> {
        let dir = self.path_for(prov);
        if !dir.join("label_provenance.json").exists() {
            return Ok(None);
        }
        TargetSet::load(&dir).map(Some)
    }

    /// Stores `set` unless an entry already exists; returns the entry path.
    pub fn put(&self, set: &TargetSet) -> Result<PathBuf> {
        let dir = self.path_for(&set.provenance);
        if dir.exists() {
            return Ok(dir);
        }
        let tmp = self.root.join(format!(".tmp-{}", set.provenance.cache_key()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        set.save(&tmp)?;
        fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

// --- iteration ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct IterationResult {
    /// `None` for label-only rounds.
    pub model: Option<Model>,
    pub optimizer: Option<AdamState>,
    pub metrics: Vec<StepMetrics>,
    /// Present when a teacher was supplied.
    pub report: Option<CompressionReport>,
}

/// Training-time examples for every utterance that has labels.
pub fn examples<'a>(audio: &[&'a AudioBuffer], targets: &'a TargetSet) -> Result<Vec<Example<'a>>> {
    audio
        .iter()
        .map(|a| {
            let l = targets.labels.get(&a.utterance_id).ok_or_else(|| {
                Error::Plan(format!("no labels for utterance `{}`", a.utterance_id))
            })?;
            Ok(Example {
                audio: a,
                labels: &l.labels,
            })
        })
        .collect()
}

/// Epoch-shuffled batch schedule, deterministic in `seed`.
fn batch_indices(n: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch);
    let epoch = step / per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = io::rng(io::derive_seed(seed, &format!("epoch{epoch}")));
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let start = (step % per_epoch) * batch;
    order[start..(start + batch).min(n)].to_vec()
}

/// Builds the student for `plan` and trains it on `targets`. The targets must
/// come from `teacher` (checked through the provenance checksum).
pub fn run_iteration(
    plan: &IterationPlan,
    teacher: Option<&Model>,
    train_audio: &[&AudioBuffer],
    targets: &TargetSet,
) -> Result<IterationResult> {
    plan.validate()?;
    let prov = &targets.provenance;
    if prov.source != plan.target_source || prov.k != plan.k {
        return Err(Error::Plan(format!(
            "labels were generated for {:?} with k = {}, plan {} needs {:?} with k = {}",
            prov.source, prov.k, plan.index, plan.target_source, plan.k
        )));
    }
    if let Some(expected) = &prov.teacher_checksum {
        let t = teacher.ok_or_else(|| Error::Plan("teacher-sourced labels need the teacher".into()))?;
        if &t.checksum() != expected {
            return Err(Error::Plan("labels were not produced by the supplied teacher".into()));
        }
        if prov.source_iteration.is_some_and(|i| i + 1 != plan.index) {
            return Err(Error::Plan(format!(
                "iteration {} must train on labels from iteration {}",
                plan.index,
                plan.index - 1
            )));
        }
    }
    let report = teacher
        .map(|t| CompressionReport::new(&t.config, &plan.student_config))
        .transpose()?;
    if plan.index == 0 {
        return Ok(IterationResult {
            model: None,
            optimizer: None,
            metrics: Vec::new(),
            report,
        });
    }

    let init_seed = io::derive_seed(plan.seed, "init");
    let mut model = match (plan.init, teacher) {
        (InitKind::Random, _) => Model::build(plan.student_config.clone(), init_seed)?,
        (InitKind::BlockedAverage, Some(t)) => blocked_avg_init(t, &plan.student_config, init_seed)?,
        (InitKind::BlockedAverage, None) => {
            return Err(Error::Plan("blocked-average init needs a teacher".into()))
        }
    };
    let data = examples(train_audio, targets)?;
    if data.is_empty() {
        return Err(Error::EmptyInput("no training utterances".into()));
    }
    let mask = MaskSpec::new(plan.train.mask_prob, plan.train.span_len, io::derive_seed(plan.seed, "mask"));
    let mut opt = AdamState::new(&model.params);
    let mut metrics = Vec::with_capacity(plan.steps);
    let batch_seed = io::derive_seed(plan.seed, "batches");
    for step in 0..plan.steps {
        let batch: Vec<Example> = batch_indices(data.len(), plan.batch_size, step, batch_seed)
            .into_iter()
            .map(|i| data[i])
            .collect();
        let m = encoder::train_step(&mut model, &batch, &mask, &mut opt, &plan.train)?;
        log::debug!("iteration {} step {} loss {:.4}", plan.index, m.step, m.loss_total);
        metrics.push(m);
    }
    Ok(IterationResult {
        model: Some(model),
        optimizer: Some(opt),
        metrics,
        report,
    })
}

/// Mean training loss over the first and last `window` steps.
pub fn loss_endpoints(metrics: &[StepMetrics], window: usize) -> Option<(f64, f64)> {
    if metrics.is_empty() {
        return None;
    }
    let w = window.clamp(1, metrics.len());
    let mean = |s: &[StepMetrics]| s.iter().map(|m| m.loss_total).sum::<f64>() / s.len() as f64;
    Some((mean(&metrics[..w]), mean(&metrics[metrics.len() - w..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn tiny(depth: usize, d: usize, k: usize) -> EncoderConfig {
        EncoderConfig {
            depth,
            emb_dim: d,
            ffn_dim: 2 * d,
            attn_heads: 2,
            proj_dim: 4,
            cnn_channels: 4,
            pos_conv_kernel: 4,
            pos_conv_groups: 2,
            ..EncoderConfig::tiny_large(k)
        }
    }

    #[test]
    fn compression_examples() {
        assert!((compression_ratio(316, 65).unwrap() - 79.4).abs() < 0.05);
        assert_eq!(compression_ratio(10, 10).unwrap(), 0.0);
        assert!((compression_ratio(316, 28).unwrap() - 91.1).abs() < 0.05);
        assert!(compression_ratio(0, 1).is_err());
        assert!(compression_ratio(100, 30).unwrap() > compression_ratio(100, 31).unwrap());
    }

    #[test]
    fn preset_axis_deltas() {
        let r = CompressionReport::new(&EncoderConfig::large(1000), &EncoderConfig::shallow_thin(1000)).unwrap();
        assert_eq!((r.delta_depth, r.delta_width, r.delta_heads), (20, 512, 0));
        assert!(r.delta_s > 0.0 && r.delta_s < 100.0);
    }

    #[test]
    fn layer_ref_indexing() {
        assert_eq!(LayerRef::Last.hidden_index(2).unwrap(), 2);
        assert_eq!(LayerRef::Index(0).hidden_index(2).unwrap(), 1);
        assert!(matches!(LayerRef::Index(2).hidden_index(2), Err(Error::Config(_))));
        let s: TargetSource = serde_json::from_str(r#"{"kind":"teacher_layer_pca","layer":"last","rank":4}"#).unwrap();
        assert_eq!(
            s,
            TargetSource::TeacherLayerPca {
                layer: LayerRef::Last,
                rank: 4
            }
        );
        assert_eq!(serde_json::to_string(&LayerRef::Index(3)).unwrap(), "3");
    }

    #[test]
    fn equal_depth_copy_is_exact() {
        let t = Model::build(tiny(4, 8, 5), 1).unwrap();
        let s = blocked_avg_init(&t, &t.config, 99).unwrap();
        assert_eq!(s.params, t.params);
    }

    #[test]
    fn identical_layers_average_exactly() {
        let mut t = Model::build(tiny(6, 8, 5), 2).unwrap();
        let names: Vec<String> = t.params.tensors.keys().filter(|n| n.starts_with("layers.0.")).cloned().collect();
        for n in names {
            let src = t.params.get(&n).clone();
            for l in 1..6 {
                *t.params.get_mut(&n.replacen("layers.0.", &format!("layers.{l}."), 1)) = src.clone();
            }
        }
        let s = blocked_avg_init(&t, &tiny(2, 8, 5), 3).unwrap();
        for (name, v) in &s.params.tensors {
            if let Some((_, suffix)) = layer_suffix(name) {
                assert_eq!(v, t.params.get(&format!("layers.0.{suffix}")));
            }
        }
    }

    #[test]
    fn scaled_identity_blocks() {
        let mut t = Model::build(tiny(24, 8, 5), 4).unwrap();
        for l in 0..24 {
            let w = t.params.get_mut(&format!("layers.{l}.ffn.w1"));
            w.fill(0.0);
            for i in 0..8 {
                w[[i, i]] = (l + 1) as f64;
            }
        }
        let s = blocked_avg_init(&t, &tiny(4, 8, 5), 5).unwrap();
        let w = s.params.get("layers.0.ffn.w1");
        let mut expected = ArrayD::zeros(w.raw_dim());
        for i in 0..8 {
            expected[[i, i]] = 3.5;
        }
        assert_eq!(w, &expected);
    }

    #[test]
    fn width_mismatch_and_bad_depth() {
        let t = Model::build(tiny(4, 8, 5), 1).unwrap();
        let s = blocked_avg_init(&t, &tiny(2, 4, 5), 7).unwrap();
        assert_eq!(s.params, Model::build(tiny(2, 4, 5), 7).unwrap().params);
        assert!(matches!(blocked_avg_init(&t, &tiny(3, 8, 5), 1), Err(Error::Config(_))));
    }

    #[test]
    fn label_emb_copied_only_when_k_matches() {
        let t = Model::build(tiny(2, 8, 5), 1).unwrap();
        let same = blocked_avg_init(&t, &tiny(1, 8, 5), 2).unwrap();
        assert_eq!(same.params.get("label_emb"), t.params.get("label_emb"));
        let other = blocked_avg_init(&t, &tiny(1, 8, 6), 2).unwrap();
        assert_eq!(other.params.get("label_emb").shape(), &[6, 4]);
        assert_eq!(other.params.get("pos_conv.weight"), t.params.get("pos_conv.weight"));
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen: Vec<usize> = (0..3).flat_map(|s| batch_indices(10, 4, s, 9)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(10, 4, 5, 9), batch_indices(10, 4, 5, 9));
    }
}
