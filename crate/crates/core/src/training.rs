//! Weighted loss, class weights, stratified splits and folds, the training
//! loop and hyperparameter grid search.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use log::{info, warn};
use ndarray::{Array1, Array3};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ensemble::{EnsembleError, EventPrediction, ImageProbability};
use crate::evaluation::{self, EvalError};
use crate::imaging::{DatasetManifest, ImagingError};
use crate::model::network::{self, Mode};
use crate::model::{derive_seed, FeatureExtractor, ModelError, ModelSpec, ModelWeights, Params};
use crate::{Instrument, Label};

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the loss.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("both classes are required, found only {0}")]
    SingleClass(String),
    #[error("class {label} has {found} events, {needed} needed")]
    TooFewEvents { label: Label, found: usize, needed: usize },
    #[error("event {0} is not in the dataset")]
    UnknownEvent(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (instrument {instrument}, lr {lr})")]
    NonFiniteLoss { epoch: usize, batch: usize, instrument: Instrument, lr: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Loss

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    /// Weight of the geoeffective (y = 1) term.
    pub w_pos: f64,
    /// Weight of the non-geoeffective (y = 0) term.
    pub w_neg: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights { w_pos: 1.0, w_neg: 1.0 };
}

fn check_lengths(y: &[u8], p: &[f64]) -> Result<(), TrainingError> {
    if y.len() != p.len() {
        return Err(TrainingError::Usage(format!("{} labels but {} probabilities", y.len(), p.len())));
    }
    if y.is_empty() {
        return Err(TrainingError::Usage("empty batch".into()));
    }
    Ok(())
}

/// Weighted binary cross-entropy, averaged over the batch. Each class's
/// weight multiplies that class's own log term.
pub fn wbce(y: &[u8], p: &[f64], w: &ClassWeights) -> Result<f64, TrainingError> {
    check_lengths(y, p)?;
    let sum: f64 = y
        .iter()
        .zip(p)
        .map(|(&y, &p)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            if y == 1 {
                w.w_pos * p.ln()
            } else {
                w.w_neg * (1.0 - p).ln()
            }
        })
        .sum();
    Ok(-sum / y.len() as f64)
}

/// Gradient of [`wbce`] with respect to the pre-sigmoid logits. Zero where
/// the clamp is active.
pub fn wbce_logit_grad(y: &[u8], p: &[f64], w: &ClassWeights) -> Result<Array1<f64>, TrainingError> {
    check_lengths(y, p)?;
    let n = y.len() as f64;
    Ok(y.iter()
        .zip(p)
        .map(|(&y, &p)| {
            if !(EPS..=1.0 - EPS).contains(&p) {
                0.0
            } else if y == 1 {
                -w.w_pos * (1.0 - p) / n
            } else {
                w.w_neg * p / n
            }
        })
        .collect())
}

/// Balanced weights `N / (2 N_c)`.
pub fn class_weights(labels: &[u8]) -> Result<ClassWeights, TrainingError> {
    let n = labels.len();
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        let only = if pos == 0 { "non-geoeffective" } else { "geoeffective" };
        return Err(TrainingError::SingleClass(only.into()));
    }
    Ok(ClassWeights {
        w_pos: n as f64 / (2.0 * pos as f64),
        w_neg: n as f64 / (2.0 * neg as f64),
    })
}

// ---------------------------------------------------------------------------
// Splits and folds

pub const TEST_FRACTION: f64 = 0.2;
pub const VAL_FRACTION: f64 = 0.1;
pub const N_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitPlan {
    /// SHA-256 over the sorted id lists, identical for identical plans
    /// regardless of seed.
    pub fn id_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, ids) in [("train", &self.train_ids), ("val", &self.val_ids), ("test", &self.test_ids)] {
            let mut sorted: Vec<&String> = ids.iter().collect();
            sorted.sort();
            h.update(name.as_bytes());
            for id in sorted {
                h.update(b"\n");
                h.update(id.as_bytes());
            }
            h.update(b"\n\n");
        }
        hex::encode(h.finalize())
    }

    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train_ids.iter().chain(&self.val_ids).chain(&self.test_ids)
    }
}

fn by_class(labels: &BTreeMap<String, Label>) -> [(Label, Vec<String>); 2] {
    let pick = |l: Label| labels.iter().filter(|(_, &v)| v == l).map(|(k, _)| k.clone()).collect::<Vec<_>>();
    [
        (Label::Geoeffective, pick(Label::Geoeffective)),
        (Label::NonGeoeffective, pick(Label::NonGeoeffective)),
    ]
}

fn require_both(classes: &[(Label, Vec<String>); 2]) -> Result<(), TrainingError> {
    for (label, ids) in classes {
        if ids.is_empty() {
            let other = if *label == Label::Geoeffective { Label::NonGeoeffective } else { Label::Geoeffective };
            return Err(TrainingError::SingleClass(other.to_string()));
        }
    }
    Ok(())
}

fn shuffled(ids: &[String], seed: u64, label: Label) -> Vec<String> {
    let mut v = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label.as_target() as u64 + 1));
    v.shuffle(&mut rng);
    v
}

fn round_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n)
}

/// Stratified split: per class, 20% test, then 10% of the remainder as
/// validation.
pub fn make_split(labels: &BTreeMap<String, Label>, seed: u64) -> Result<SplitPlan, TrainingError> {
    let classes = by_class(labels);
    require_both(&classes)?;
    let mut plan = SplitPlan { seed, train_ids: vec![], val_ids: vec![], test_ids: vec![] };
    for (label, ids) in &classes {
        if ids.len() < 5 {
            warn!("class {label} has only {} events; split proportions are best-effort", ids.len());
        }
        let ids = shuffled(ids, seed, *label);
        let n_test = round_count(ids.len(), TEST_FRACTION);
        let rest = &ids[n_test..];
        let n_val = round_count(rest.len(), VAL_FRACTION);
        plan.test_ids.extend_from_slice(&ids[..n_test]);
        plan.val_ids.extend_from_slice(&rest[..n_val]);
        plan.train_ids.extend_from_slice(&rest[n_val..]);
    }
    plan.train_ids.sort();
    plan.val_ids.sort();
    plan.test_ids.sort();
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
}

/// Stratified round-robin assignment into five folds after a seeded
/// per-class shuffle.
pub fn make_folds(labels: &BTreeMap<String, Label>, seed: u64) -> Result<FoldPlan, TrainingError> {
    let classes = by_class(labels);
    require_both(&classes)?;
    let mut folds = vec![Vec::new(); N_FOLDS];
    let mut next = 0;
    for (label, ids) in &classes {
        if ids.len() < N_FOLDS {
            return Err(TrainingError::TooFewEvents { label: *label, found: ids.len(), needed: N_FOLDS });
        }
        for id in shuffled(ids, seed, *label) {
            folds[next % N_FOLDS].push(id);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(FoldPlan { seed, folds })
}

impl FoldPlan {
    /// Fold `k` as the test set; the other folds become train and a
    /// stratified 10% validation set.
    pub fn split(&self, k: usize, labels: &BTreeMap<String, Label>) -> Result<SplitPlan, TrainingError> {
        if k >= self.folds.len() {
            return Err(TrainingError::Usage(format!("fold {k} of {}", self.folds.len())));
        }
        let test: BTreeSet<&String> = self.folds[k].iter().collect();
        let rest: BTreeMap<String, Label> = labels
            .iter()
            .filter(|(id, _)| !test.contains(id))
            .map(|(id, l)| (id.clone(), *l))
            .collect();
        let mut plan = SplitPlan { seed: self.seed, train_ids: vec![], val_ids: vec![], test_ids: self.folds[k].clone() };
        for (label, ids) in by_class(&rest) {
            let ids = shuffled(&ids, derive_seed(self.seed, k as u64 + 1), label);
            let n_val = round_count(ids.len(), VAL_FRACTION);
            plan.val_ids.extend_from_slice(&ids[..n_val]);
            plan.train_ids.extend_from_slice(&ids[n_val..]);
        }
        plan.train_ids.sort();
        plan.val_ids.sort();
        Ok(plan)
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without a new best monitored loss.
    pub patience: Option<usize>,
    /// Train on train ∪ validation ids. Validation metrics then become
    /// in-sample.
    pub merge_validation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dropout: 0.3,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            patience: None,
            merge_validation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::Usage(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("Adam betas must be in [0, 1) and epsilon positive");
        }
        Ok(())
    }
}

/// Hyperparameter grid; every combination is trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperGrid {
    pub learning_rate: Vec<f64>,
    pub dropout: Vec<f64>,
    pub batch_size: Vec<usize>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid { learning_rate: vec![1e-4], dropout: vec![0.3], batch_size: vec![32] }
    }
}

impl HyperGrid {
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rate {
            for &dropout in &self.dropout {
                for &batch_size in &self.batch_size {
                    out.push(TrainConfig { learning_rate, dropout, batch_size, ..base.clone() });
                }
            }
        }
        out
    }
}

/// `[train]` and optional `[grid]` sections of a TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFile {
    pub train: TrainConfig,
    pub grid: Option<HyperGrid>,
}

impl TrainFile {
    pub fn from_toml(text: &str) -> Result<Self, TrainingError> {
        toml::from_str(text).map_err(|e| TrainingError::Usage(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Data

/// One preprocessed image turned into the fused input map.
#[derive(Debug, Clone)]
pub struct Sample {
    pub event_id: String,
    pub label: Label,
    pub time: DateTime<Utc>,
    pub map: Array3<f64>,
}

/// Input maps of every image in a manifest for one backbone configuration.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub labels: BTreeMap<String, Label>,
    pub samples: BTreeMap<Instrument, Vec<Sample>>,
    pub input_channels: usize,
}

impl Dataset {
    pub fn from_manifest(manifest: &DatasetManifest, extractor: &FeatureExtractor, instruments: &[Instrument]) -> Result<Self, TrainingError> {
        let mut samples: BTreeMap<Instrument, Vec<Sample>> = BTreeMap::new();
        for entry in &manifest.entries {
            for &inst in instruments {
                for (meta, image) in manifest.load_frames(entry, inst)? {
                    samples.entry(inst).or_default().push(Sample {
                        event_id: entry.event_id.clone(),
                        label: entry.label,
                        time: meta.observation_time,
                        map: extractor.input_map(&image)?,
                    });
                }
            }
        }
        Ok(Dataset { labels: manifest.truths(), samples, input_channels: extractor.input_channels() })
    }

    fn select(&self, inst: Instrument, ids: &BTreeSet<&str>) -> Vec<&Sample> {
        self.samples
            .get(&inst)
            .map(|v| v.iter().filter(|s| ids.contains(s.event_id.as_str())).collect())
            .unwrap_or_default()
    }

    fn check_ids<'a>(&self, ids: impl IntoIterator<Item = &'a String>) -> Result<(), TrainingError> {
        for id in ids {
            if !self.labels.contains_key(id) {
                return Err(TrainingError::UnknownEvent(id.clone()));
            }
        }
        Ok(())
    }
}

/// Per-image probabilities of the active pipelines, aggregated per event.
/// Events with no image for any active instrument are skipped with a
/// warning.
pub fn predict_events(
    weights: &ModelWeights,
    data: &Dataset,
    ids: &[String],
    threshold: Option<f64>,
) -> Result<Vec<EventPrediction>, TrainingError> {
    data.check_ids(ids)?;
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let mut per_event: BTreeMap<&str, BTreeMap<Instrument, Vec<ImageProbability>>> = BTreeMap::new();
    for &inst in weights.pipelines.keys() {
        let samples = data.select(inst, &wanted);
        if samples.is_empty() {
            continue;
        }
        let probs = weights.predict_maps(inst, &samples.iter().map(|s| s.map.clone()).collect::<Vec<_>>())?;
        for (s, &p) in samples.iter().zip(probs.iter()) {
            per_event
                .entry(s.event_id.as_str())
                .or_default()
                .entry(inst)
                .or_default()
                .push(ImageProbability { observation_time: s.time, probability: p });
        }
    }
    let mut out = Vec::new();
    for id in &wanted {
        match per_event.remove(id) {
            Some(images) => out.push(EventPrediction::from_images(*id, images, threshold, weights.spec.threshold)?),
            None => warn!("event {id} has no images for the active instruments; skipped"),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Optimiser

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Params,
    v: Params,
}

impl Adam {
    pub fn new(params: &Params, config: &TrainConfig) -> Self {
        Adam {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.epsilon,
            t: 0,
            m: Params::zeros_like(params),
            v: Params::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        for (((p, g), m), v) in params.tensors.iter_mut().zip(&grads.tensors).zip(&mut self.m.tensors).zip(&mut self.v.tensors) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_mcc: Option<f64>,
    pub val_tss: Option<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let mut out = String::from("epoch,train_loss,val_loss,val_mcc,val_tss\n");
    for r in history {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_loss, cell(r.val_loss), cell(r.val_mcc), cell(r.val_tss)));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_weights: ModelWeights,
    /// Weights at the epoch with the lowest validation loss (training loss
    /// when there is no validation set).
    pub best_weights: ModelWeights,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub class_weights: ClassWeights,
}

impl TrainOutcome {
    /// Writes `final/`, `best/`, `history.csv` and `class_weights.json`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainingError> {
        fs::create_dir_all(dir)?;
        self.final_weights.save(&dir.join("final"))?;
        self.best_weights.save(&dir.join("best"))?;
        fs::write(dir.join("history.csv"), history_csv(&self.history))?;
        fs::write(dir.join("class_weights.json"), serde_json::to_vec_pretty(&self.class_weights)?)?;
        Ok(())
    }
}

/// Builds the dataset for `spec` and trains on it.
pub fn train(
    manifest: &DatasetManifest,
    spec: &ModelSpec,
    extractor: &FeatureExtractor,
    config: &TrainConfig,
    split: &SplitPlan,
) -> Result<TrainOutcome, TrainingError> {
    let data = Dataset::from_manifest(manifest, extractor, &spec.ordered_instruments())?;
    train_on(&data, spec, config, split)
}

struct ValSummary {
    loss: f64,
    mcc: f64,
    tss: f64,
}

fn validate_epoch(weights: &ModelWeights, data: &Dataset, ids: &[String], cw: &ClassWeights) -> Result<Option<ValSummary>, TrainingError> {
    if ids.is_empty() {
        return Ok(None);
    }
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let (mut y, mut p) = (Vec::new(), Vec::new());
    for &inst in weights.pipelines.keys() {
        let samples = data.select(inst, &wanted);
        if samples.is_empty() {
            continue;
        }
        let probs = weights.predict_maps(inst, &samples.iter().map(|s| s.map.clone()).collect::<Vec<_>>())?;
        y.extend(samples.iter().map(|s| s.label.as_target()));
        p.extend(probs.iter());
    }
    if y.is_empty() {
        return Ok(None);
    }
    let loss = wbce(&y, &p, cw)?;
    let preds = predict_events(weights, data, ids, Some(weights.spec.threshold))?;
    let matrix = evaluation::confusion(preds.iter().map(|e| {
        (data.labels[&e.event_id], crate::ensemble::decide(e.event_probability, weights.spec.threshold))
    }));
    Ok(Some(ValSummary { loss, mcc: matrix.mcc(), tss: matrix.tss() }))
}

/// Trains one network per active instrument on per-image samples, each
/// image carrying its event's label.
pub fn train_on(data: &Dataset, spec: &ModelSpec, config: &TrainConfig, split: &SplitPlan) -> Result<TrainOutcome, TrainingError> {
    config.validate()?;
    spec.validate()?;
    data.check_ids(split.all_ids())?;
    let mut train_ids: Vec<String> = split.train_ids.clone();
    if config.merge_validation {
        train_ids.extend(split.val_ids.iter().cloned());
    }
    let train_set: BTreeSet<&str> = train_ids.iter().map(String::as_str).collect();
    let event_labels: Vec<u8> = train_ids.iter().map(|id| data.labels[id].as_target()).collect();
    let cw = class_weights(&event_labels)?;

    let mut weights = ModelWeights::init(spec, data.input_channels, config.dropout)?;
    let mut pools: BTreeMap<Instrument, Vec<&Sample>> = BTreeMap::new();
    let mut optimisers: BTreeMap<Instrument, Adam> = BTreeMap::new();
    for (&inst, net) in &weights.pipelines {
        let pool = data.select(inst, &train_set);
        if pool.is_empty() {
            return Err(TrainingError::Usage(format!("no training images for instrument {inst}")));
        }
        pools.insert(inst, pool);
        optimisers.insert(inst, Adam::new(&net.params, config));
    }
    info!(
        "training '{}' on {} events ({} images), w_pos {:.3}, w_neg {:.3}",
        spec.name,
        train_ids.len(),
        pools.values().map(Vec::len).sum::<usize>(),
        cw.w_pos,
        cw.w_neg
    );

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelWeights)> = None;
    for epoch in 1..=config.epochs {
        let epoch_seed = derive_seed(config.seed, epoch as u64);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for (&inst, pool) in &pools {
            let inst_seed = derive_seed(epoch_seed, inst.index() as u64 + 1);
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(inst_seed));
            let net = weights.pipelines.get_mut(&inst).expect("pipeline exists");
            let adam = optimisers.get_mut(&inst).expect("optimiser exists");
            for (b, chunk) in order.chunks(config.batch_size).enumerate() {
                let x = network::stack_inputs(chunk.iter().map(|&i| &pool[i].map));
                let y: Vec<u8> = chunk.iter().map(|&i| pool[i].label.as_target()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(inst_seed, b as u64 + 1));
                let cache = net.forward(&x, Mode::Train, Some(&mut rng))?;
                let probs = cache.probs.to_vec();
                let loss = wbce(&y, &probs, &cw)?;
                if !loss.is_finite() {
                    return Err(TrainingError::NonFiniteLoss { epoch, batch: b, instrument: inst, lr: config.learning_rate });
                }
                let grads = net.backward(&cache, &wbce_logit_grad(&y, &probs, &cw)?);
                if grads.tensors.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                    return Err(TrainingError::NonFiniteLoss { epoch, batch: b, instrument: inst, lr: config.learning_rate });
                }
                adam.step(&mut net.params, &grads);
                net.update_running_stats(&cache);
                loss_sum += loss * y.len() as f64;
                count += y.len();
            }
        }
        let train_loss = loss_sum / count as f64;
        let val = validate_epoch(&weights, data, &split.val_ids, &cw)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: val.as_ref().map(|v| v.loss),
            val_mcc: val.as_ref().map(|v| v.mcc),
            val_tss: val.as_ref().map(|v| v.tss),
        };
        info!(
            "epoch {epoch}/{}: train_loss {train_loss:.4} val_loss {:?} val_mcc {:?}",
            config.epochs, record.val_loss, record.val_mcc
        );
        let monitored = record.val_loss.unwrap_or(train_loss);
        history.push(record);
        if best.as_ref().is_none_or(|(b, _, _)| monitored < *b) {
            best = Some((monitored, epoch, weights.clone()));
        }
        if let (Some(patience), Some((_, best_epoch, _))) = (config.patience, best.as_ref()) {
            if epoch - best_epoch >= patience {
                info!("early stop at epoch {epoch}: no improvement since epoch {best_epoch}");
                break;
            }
        }
    }
    let (_, best_epoch, best_weights) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { final_weights: weights, best_weights, best_epoch, history, class_weights: cw })
}

// ---------------------------------------------------------------------------
// Grid search

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub config: TrainConfig,
    pub val_mcc: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub best: TrainConfig,
    pub threshold: f64,
    pub runs: Vec<GridRun>,
    pub outcome: TrainOutcome,
}

/// Validation MCC of the best-loss weights at the threshold selected by a
/// sweep over the validation probabilities. A single-class validation set
/// falls back to the model threshold.
fn score_on_validation(weights: &ModelWeights, data: &Dataset, split: &SplitPlan) -> Result<(f64, f64), TrainingError> {
    let preds = predict_events(weights, data, &split.val_ids, None)?;
    let y: Vec<u8> = preds.iter().map(|e| data.labels[&e.event_id].as_target()).collect();
    let p: Vec<f64> = preds.iter().map(|e| e.event_probability).collect();
    match evaluation::threshold_sweep(&y, &p, &evaluation::default_threshold_grid()) {
        Ok(sweep) => Ok((sweep.best_mcc, sweep.best_threshold)),
        Err(EvalError::SingleClass) | Err(EvalError::Empty) => {
            let t = weights.spec.threshold;
            let m = evaluation::confusion(preds.iter().map(|e| (data.labels[&e.event_id], crate::ensemble::decide(e.event_probability, t))));
            Ok((m.mcc(), t))
        }
        Err(e) => Err(e.into()),
    }
}

/// Trains every grid combination and keeps the best validation MCC; ties
/// go to smaller dropout, then smaller batch, then smaller learning rate.
pub fn grid_search(
    data: &Dataset,
    spec: &ModelSpec,
    base: &TrainConfig,
    grid: &HyperGrid,
    split: &SplitPlan,
) -> Result<GridOutcome, TrainingError> {
    let configs = grid.configs(base);
    if configs.is_empty() {
        return Err(TrainingError::Usage("empty hyperparameter grid".into()));
    }
    let mut runs = Vec::new();
    let mut best: Option<(GridRun, TrainOutcome)> = None;
    for config in configs {
        let outcome = train_on(data, spec, &config, split)?;
        let (val_mcc, threshold) = score_on_validation(&outcome.best_weights, data, split)?;
        info!(
            "grid lr {} dropout {} batch {}: val MCC {val_mcc:.3} at threshold {threshold:.2}",
            config.learning_rate, config.dropout, config.batch_size
        );
        let run = GridRun { config, val_mcc, threshold };
        runs.push(run.clone());
        let better = match &best {
            None => true,
            Some((b, _)) => {
                let key = |r: &GridRun| (r.config.dropout, r.config.batch_size, r.config.learning_rate);
                run.val_mcc > b.val_mcc + 1e-12 || ((run.val_mcc - b.val_mcc).abs() <= 1e-12 && key(&run) < key(b))
            }
        };
        if better {
            best = Some((run, outcome));
        }
    }
    let (run, outcome) = best.expect("grid is non-empty");
    Ok(GridOutcome { best: run.config, threshold: run.threshold, runs, outcome })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(pos: usize, neg: usize) -> BTreeMap<String, Label> {
        (0..pos)
            .map(|i| (format!("P{i:03}"), Label::Geoeffective))
            .chain((0..neg).map(|i| (format!("N{i:03}"), Label::NonGeoeffective)))
            .collect()
    }

    #[test]
    fn wbce_examples() {
        assert!(wbce(&[1], &[1.0 - EPS], &ClassWeights::UNIT).unwrap() < 1e-6);
        let v = wbce(&[1, 0], &[0.5, 0.5], &ClassWeights::UNIT).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let w = ClassWeights { w_pos: 0.67, w_neg: 1.94 };
        let by_hand = -(0.67 * 0.9f64.ln() + 1.94 * 0.8f64.ln() + 1.94 * 0.6f64.ln()) / 3.0;
        assert!((wbce(&[1, 0, 0], &[0.9, 0.2, 0.4], &w).unwrap() - by_hand).abs() < 1e-9);
        assert!(matches!(wbce(&[1, 0], &[0.5], &w), Err(TrainingError::Usage(_))));
    }

    #[test]
    fn wbce_clamps_extremes() {
        let v = wbce(&[1, 0], &[0.0, 1.0], &ClassWeights::UNIT).unwrap();
        assert!((v - -(EPS.ln())).abs() < 1e-6);
        let g = wbce_logit_grad(&[1], &[0.0], &ClassWeights::UNIT).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn logit_gradient_matches_finite_difference() {
        let w = ClassWeights { w_pos: 0.7, w_neg: 1.9 };
        let y = [1u8, 0, 1, 0];
        let z = [0.3, -1.2, 2.0, 0.8];
        let p = |z: &[f64]| z.iter().map(|&v| crate::model::layers::sigmoid(v)).collect::<Vec<_>>();
        let g = wbce_logit_grad(&y, &p(&z), &w).unwrap();
        for k in 0..4 {
            let (mut up, mut down) = (z, z);
            up[k] += 1e-6;
            down[k] -= 1e-6;
            let fd = (wbce(&y, &p(&up), &w).unwrap() - wbce(&y, &p(&down), &w).unwrap()) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-8, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn class_weight_examples() {
        let mut y = vec![1u8; 101];
        y.extend(vec![0u8; 35]);
        let w = class_weights(&y).unwrap();
        assert!((w.w_pos - 136.0 / 202.0).abs() < 1e-15);
        assert!((w.w_neg - 136.0 / 70.0).abs() < 1e-15);
        let even = class_weights(&[1, 1, 0, 0]).unwrap();
        assert_eq!((even.w_pos, even.w_neg), (1.0, 1.0));
        let mut skew = vec![1u8; 99];
        skew.push(0);
        assert_eq!(class_weights(&skew).unwrap().w_neg, 50.0);
        assert!(matches!(class_weights(&[1, 1]), Err(TrainingError::SingleClass(_))));
    }

    #[test]
    fn split_counts() {
        let plan = make_split(&labels(101, 35), 7).unwrap();
        let pos = |ids: &[String]| ids.iter().filter(|i| i.starts_with('P')).count();
        assert_eq!(pos(&plan.test_ids), 20);
        assert_eq!(plan.test_ids.len() - pos(&plan.test_ids), 7);
        assert_eq!(plan.all_ids().count(), 136);
        let toy = make_split(&labels(10, 10), 1).unwrap();
        assert_eq!(toy.test_ids.len(), 4);
        assert_eq!(toy.train_ids.len() + toy.val_ids.len(), 16);
        assert_eq!(make_split(&labels(10, 10), 1).unwrap(), toy);
        assert!(make_split(&labels(10, 0), 1).is_err());
    }

    #[test]
    fn fold_counts() {
        let plan = make_folds(&labels(101, 35), 3).unwrap();
        for f in &plan.folds {
            let pos = f.iter().filter(|i| i.starts_with('P')).count();
            assert!((20..=21).contains(&pos));
            assert!((7..=7).contains(&(f.len() - pos)));
        }
        let toy = make_folds(&labels(5, 5), 0).unwrap();
        assert!(toy.folds.iter().all(|f| f.len() == 2 && f.iter().filter(|i| i.starts_with('P')).count() == 1));
        assert!(matches!(make_folds(&labels(4, 9), 0), Err(TrainingError::TooFewEvents { found: 4, .. })));
        let s = plan.split(2, &labels(101, 35)).unwrap();
        assert_eq!(s.test_ids, plan.folds[2]);
        assert_eq!(s.all_ids().count(), 136);
    }

    #[test]
    fn id_hash_tracks_ids_only() {
        let a = make_split(&labels(10, 10), 1).unwrap();
        let mut b = a.clone();
        b.seed = 99;
        b.train_ids.reverse();
        assert_eq!(a.id_hash(), b.id_hash());
        b.train_ids.pop();
        assert_ne!(a.id_hash(), b.id_hash());
    }

    #[test]
    fn config_validation_and_file() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        let f = TrainFile::from_toml("[train]\nepochs = 5\n[grid]\ndropout = [0.2, 0.3]\nbatch_size = [16, 32]\n").unwrap();
        assert_eq!(f.train.epochs, 5);
        assert_eq!(f.train.learning_rate, 1e-4);
        assert_eq!(f.grid.unwrap().configs(&f.train).len(), 4);
        assert!(HyperGrid::default().configs(&TrainConfig::default()).iter().any(|c| c.dropout == 0.3 && c.batch_size == 32));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let p0 = Params { names: vec!["w".into()], tensors: vec![ndarray::arr2(&[[1.0, -2.0]])] };
        let mut p = p0.clone();
        let g = Params { names: vec!["w".into()], tensors: vec![ndarray::arr2(&[[0.5, -3.0]])] };
        let mut adam = Adam::new(&p, &TrainConfig::default());
        adam.step(&mut p, &g);
        let d = &p0.tensors[0] - &p.tensors[0];
        assert!((d[[0, 0]] - 1e-4).abs() < 1e-9 && (d[[0, 1]] + 1e-4).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn wbce_permutation_invariant(items in prop::collection::vec((0u8..2, 0.0f64..1.0), 1..40), seed in any::<u64>()) {
            let w = ClassWeights { w_pos: 0.8, w_neg: 1.3 };
            let (y, p): (Vec<u8>, Vec<f64>) = items.iter().cloned().unzip();
            let mut idx: Vec<usize> = (0..y.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let y2: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
            let p2: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let a = wbce(&y, &p, &w).unwrap();
            let b = wbce(&y2, &p2, &w).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn class_weights_balance_total(pos in 1usize..500, neg in 1usize..500) {
            let mut y = vec![1u8; pos];
            y.extend(vec![0u8; neg]);
            let w = class_weights(&y).unwrap();
            let n = (pos + neg) as f64;
            prop_assert!((pos as f64 * w.w_pos + neg as f64 * w.w_neg - n).abs() <= 1e-12 * n);
            if pos < neg { prop_assert!(w.w_pos > w.w_neg); }
            if neg < pos { prop_assert!(w.w_neg > w.w_pos); }
        }
    }
}
