//! The `geoeff` command.
//!
//! Every command creates `<output>/<UTC timestamp>-<command>/` holding the
//! resolved `config.toml`, a `run.json` record and the command's outputs.
//! An `INCOMPLETE` marker is written first and removed only on success.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::Utc;
use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::ablation::{self, AblationConfig, AblationSuite};
use crate::archive::{Archive, ArchiveConfig, ArchiveError, ArchiveQuery, HttpTransport, MAX_QUERY_HOURS};
use crate::catalog::{self, EventCatalog, JoinConfig};
use crate::ensemble::{EventPrediction, ImageProbability};
use crate::evaluation::{self, EvaluationReport, EventScore, Mode};
use crate::imaging::{self, DatasetManifest, PreprocessConfig, WindowPolicy};
use crate::model::{BackboneSource, FeatureExtractor, ModelError, ModelSpec, ModelWeights};
use crate::synth::{self, SynthSpec};
use crate::training::{self, Dataset, HyperGrid, SplitPlan, TrainConfig, TrainingError};
use crate::Instrument;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Debug, Parser)]
#[command(name = "geoeff", version, about = "Geoeffectiveness forecasting for Earth-directed CMEs")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Never touch the network; cache misses are errors.
    #[arg(long, global = true)]
    pub offline: bool,
    /// Report probabilities without decisions.
    #[arg(long, global = true)]
    pub probabilistic: bool,
    /// Decision threshold, overriding the model's.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse the ICME list and the LASCO catalog into a labeled event catalog.
    Ingest,
    /// Download every catalog event's frames into the cache.
    Fetch,
    /// Build the tensor dataset (from the cache, or synthetic with a [synth] section).
    Build,
    /// Train on the dataset, with a grid search when [grid] is configured.
    Train,
    /// Score a checkpoint on the test split, or stored predictions.
    Eval {
        /// Checkpoint directory.
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        weights: Option<PathBuf>,
        /// JSONL of {event_id, truth, probability} records.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Predict one event from its dataset directory.
    Predict {
        #[arg(long)]
        weights: PathBuf,
        /// `<dataset>/<event_id>/` with per-instrument tensors.
        #[arg(long)]
        event_dir: PathBuf,
    },
    /// Five-fold cross-validation.
    Cv,
    /// Backbone-removal variants and instrument cases.
    Ablate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Fetch => "fetch",
            Command::Build => "build",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Predict { .. } => "predict",
            Command::Cv => "cv",
            Command::Ablate => "ablate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub rc_list: PathBuf,
    pub lasco_catalog: PathBuf,
    /// Labeled catalog written by `ingest` and read by `fetch`/`build`.
    pub catalog: PathBuf,
    /// Defaults to the `GEOEFF_CACHE` variable, then `cache`.
    pub cache: Option<PathBuf>,
    pub dataset: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            rc_list: "data/rc_list.txt".into(),
            lasco_catalog: "data/lasco_cme_catalog.txt".into(),
            catalog: "data/catalog.jsonl".into(),
            cache: None,
            dataset: "dataset".into(),
            output: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub partial_halo_deg: f64,
    pub join: JoinConfig,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig { partial_halo_deg: catalog::DEFAULT_PARTIAL_HALO_DEG, join: JoinConfig::default() }
    }
}

/// Everything a command needs. Serialized verbatim as the run snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub offline: bool,
    pub probabilistic: bool,
    /// Overrides `model.threshold` when set.
    pub threshold: Option<f64>,
    pub paths: Paths,
    pub ingest: IngestConfig,
    pub archive: ArchiveConfig,
    pub window: WindowPolicy,
    pub preprocess: PreprocessConfig,
    pub model: ModelSpec,
    pub backbone: BackboneSource,
    pub train: TrainConfig,
    pub grid: Option<HyperGrid>,
    pub synth: Option<SynthSpec>,
    pub ablation: AblationConfig,
}


/// A configuration problem; maps to the usage exit code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| usage(format!("config: {e}")))
    }

    /// Applies command-line overrides and propagates the seed.
    pub fn resolve(mut self, cli: &Cli) -> Result<Self> {
        if let Some(seed) = cli.seed {
            self.seed = seed;
        }
        self.offline |= cli.offline;
        self.probabilistic |= cli.probabilistic;
        if cli.threshold.is_some() {
            self.threshold = cli.threshold;
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(usage(format!("threshold {t} outside (0, 1)")));
            }
            self.model.threshold = t;
        }
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.archive.offline = self.offline;
        if let Some(cache) = &self.paths.cache {
            self.archive.cache_root = cache.clone();
        }
        self.model.validate().map_err(|e| usage(e.to_string()))?;
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        self.window.validate().map_err(usage)?;
        Ok(self)
    }

    fn threshold_arg(&self) -> Option<f64> {
        (!self.probabilistic).then_some(self.model.threshold)
    }

    fn mode(&self) -> Mode {
        if self.probabilistic {
            Mode::Probabilistic
        } else {
            Mode::Deterministic
        }
    }
}

/// Output directory of one command invocation.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let stamp = Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
        let mut path = root.join(format!("{stamp}-{command}"));
        let mut n = 1;
        while path.exists() {
            path = root.join(format!("{stamp}-{command}-{n}"));
            n += 1;
        }
        fs::create_dir_all(&path)?;
        fs::write(path.join(INCOMPLETE_MARKER), "")?;
        fs::write(path.join("config.toml"), toml::to_string(config).context("serializing config")?)?;
        Ok(RunDir { path })
    }

    pub fn join(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.path.join(rel)
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let path = self.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
    }

    fn finish(&self, command: &str, seed: u64, error: Option<&anyhow::Error>) -> Result<()> {
        let record = serde_json::json!({
            "command": command,
            "seed": seed,
            "status": if error.is_some() { "failed" } else { "ok" },
            "error": error.map(|e| format!("{e:#}")),
        });
        fs::write(self.join("run.json"), serde_json::to_vec_pretty(&record)?)?;
        if error.is_none() {
            fs::remove_file(self.join(INCOMPLETE_MARKER))?;
        }
        Ok(())
    }
}

/// Exit code for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<clap::Error>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<TrainingError>() {
            match e {
                TrainingError::NonFiniteLoss { .. } => return EXIT_NUMERIC,
                TrainingError::Usage(_) => return EXIT_USAGE,
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            match e {
                ModelError::NonFinite { .. } => return EXIT_NUMERIC,
                ModelError::Usage(_) | ModelError::InvalidSpec(_) => return EXIT_USAGE,
                _ => {}
            }
        }
        if let Some(ArchiveError::InvalidQuery(_)) = cause.downcast_ref::<ArchiveError>() {
            return EXIT_USAGE;
        }
    }
    EXIT_DATA
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    base.resolve(cli)
}

/// Runs `cli.command` and returns its run directory.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let config = load_config(cli)?;
    let name = cli.command.name();
    let dir = RunDir::create(&config.paths.output, name, &config)?;
    info!("run directory {}", dir.path.display());
    let result = match &cli.command {
        Command::Ingest => cmd_ingest(&config, &dir),
        Command::Fetch => cmd_fetch(&config, &dir),
        Command::Build => cmd_build(&config, &dir).map(|_| ()),
        Command::Train => cmd_train(&config, &dir),
        Command::Eval { weights, predictions } => cmd_eval(&config, &dir, weights.as_deref(), predictions.as_deref()).map(|_| ()),
        Command::Predict { weights, event_dir } => cmd_predict(&config, &dir, weights, event_dir).map(|_| ()),
        Command::Cv => cmd_cv(&config, &dir).map(|_| ()),
        Command::Ablate => cmd_ablate(&config, &dir).map(|_| ()),
    };
    dir.finish(name, config.seed, result.as_ref().err())?;
    result.map(|_| dir.path)
}

// ---------------------------------------------------------------------------
// Commands

pub fn cmd_ingest(config: &RunConfig, dir: &RunDir) -> Result<()> {
    let p = &config.paths;
    let rc_text = fs::read(&p.rc_list).with_context(|| format!("reading {}", p.rc_list.display()))?;
    let lasco_text = fs::read(&p.lasco_catalog).with_context(|| format!("reading {}", p.lasco_catalog.display()))?;
    let rc = catalog::parse_rc_list(&String::from_utf8_lossy(&rc_text))?;
    let lasco = catalog::parse_lasco_catalog(&String::from_utf8_lossy(&lasco_text), config.ingest.partial_halo_deg);
    for e in rc.errors.iter().chain(&lasco.errors) {
        warn!("line {}: {}", e.line, e.message);
    }
    let mut outcome = catalog::join_and_label(&rc.records, &lasco.records, &config.ingest.join);
    outcome.catalog.provenance.add_source(p.rc_list.display().to_string(), &rc_text);
    outcome.catalog.provenance.add_source(p.lasco_catalog.display().to_string(), &lasco_text);

    let mut buf = Vec::new();
    outcome.catalog.write_jsonl(&mut buf)?;
    fs::write(dir.join("catalog.jsonl"), &buf)?;
    if let Some(parent) = p.catalog.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&p.catalog, &buf).with_context(|| format!("writing {}", p.catalog.display()))?;
    let mut ex = Vec::new();
    outcome.write_exclusions_jsonl(&mut ex)?;
    fs::write(dir.join("exclusions.jsonl"), ex)?;
    dir.write_json("row_errors.json", &serde_json::json!({ "rc_list": rc.errors, "lasco_catalog": lasco.errors }))?;
    dir.write_json("summary.json", &catalog::summarize(&outcome.catalog))?;
    let (pos, neg) = outcome.catalog.class_counts();
    info!("{} events ({pos} geoeffective, {neg} not), {} excluded", outcome.catalog.len(), outcome.exclusions.len());
    Ok(())
}

fn load_catalog(path: &Path) -> Result<EventCatalog> {
    let f = fs::File::open(path).with_context(|| format!("opening catalog {}; run `geoeff ingest` first", path.display()))?;
    Ok(EventCatalog::read_jsonl(BufReader::new(f))?)
}

fn archive(config: &RunConfig) -> Result<Archive<HttpTransport>> {
    Ok(Archive::new(config.archive.clone(), HttpTransport::default())?)
}

#[derive(Debug, Serialize)]
struct FetchRecord {
    event_id: String,
    instrument: Instrument,
    frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn cmd_fetch(config: &RunConfig, dir: &RunDir) -> Result<()> {
    let catalog = load_catalog(&config.paths.catalog)?;
    let archive = archive(config)?;
    let mut records = Vec::new();
    for (event, _) in catalog.labeled() {
        for inst in Instrument::ALL {
            let (start, end) = config.window.query_range(inst, event.onset_time);
            let mut frames = 0;
            let mut error = None;
            let mut s = start;
            while s < end {
                let e = (s + chrono::Duration::hours(MAX_QUERY_HOURS)).min(end);
                match ArchiveQuery::new(inst, s, e).and_then(|q| archive.fetch(&q)) {
                    Ok(f) => frames += f.len(),
                    Err(err) => {
                        warn!("{} {inst}: {err}", event.event_id);
                        error = Some(err.to_string());
                        break;
                    }
                }
                s = e;
            }
            records.push(FetchRecord { event_id: event.event_id.clone(), instrument: inst, frames, error });
        }
    }
    dir.write_json("fetch.json", &records)?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        bail!("{failed} of {} event/instrument fetches failed; see fetch.json", records.len());
    }
    Ok(())
}

pub fn cmd_build(config: &RunConfig, dir: &RunDir) -> Result<DatasetManifest> {
    let root = &config.paths.dataset;
    let manifest = match &config.synth {
        Some(spec) => {
            info!("generating synthetic dataset in {}", root.display());
            synth::generate(spec, root)?
        }
        None => {
            let catalog = load_catalog(&config.paths.catalog)?;
            let archive = archive(config)?;
            imaging::build_manifest(&catalog, &archive, &config.window, &config.preprocess, root)?
        }
    };
    dir.write_json(
        "build.json",
        &serde_json::json!({
            "dataset": root,
            "events": manifest.entries.len(),
            "frames": manifest.total_frames(),
            "exclusions": manifest.meta.exclusions,
            "seed": config.seed,
        }),
    )?;
    Ok(manifest)
}

fn load_manifest(config: &RunConfig) -> Result<DatasetManifest> {
    DatasetManifest::load(&config.paths.dataset)
        .with_context(|| format!("loading dataset {}; run `geoeff build` first", config.paths.dataset.display()))
}

fn load_dataset(config: &RunConfig, spec: &ModelSpec, manifest: &DatasetManifest) -> Result<Dataset> {
    let extractor = FeatureExtractor::new(spec, &config.backbone)?;
    Ok(Dataset::from_manifest(manifest, &extractor, &spec.ordered_instruments())?)
}

#[derive(Debug, Serialize)]
struct Scored<'a> {
    seed: u64,
    split_id_hash: &'a str,
    #[serde(flatten)]
    report: &'a EvaluationReport,
}

fn score(config: &RunConfig, weights: &ModelWeights, data: &Dataset, ids: &[String]) -> Result<EvaluationReport> {
    let preds = training::predict_events(weights, data, ids, config.threshold_arg())?;
    Ok(evaluation::evaluate(&preds, &data.labels, weights.spec.threshold, config.mode())?)
}

pub fn cmd_train(config: &RunConfig, dir: &RunDir) -> Result<()> {
    let manifest = load_manifest(config)?;
    let data = load_dataset(config, &config.model, &manifest)?;
    let split = training::make_split(&data.labels, config.seed)?;
    dir.write_json("split.json", &split)?;
    let outcome = match &config.grid {
        Some(grid) => {
            let g = training::grid_search(&data, &config.model, &config.train, grid, &split)?;
            dir.write_json("grid.json", &serde_json::json!({ "best": g.best, "threshold": g.threshold, "runs": g.runs }))?;
            g.outcome
        }
        None => training::train_on(&data, &config.model, &config.train, &split)?,
    };
    outcome.save(&dir.join("model"))?;
    let report = score(config, &outcome.final_weights, &data, &split.test_ids)?;
    let hash = split.id_hash();
    dir.write_json("test_report.json", &Scored { seed: config.seed, split_id_hash: &hash, report: &report })?;
    print!("{}", report.to_table());
    Ok(())
}

/// Reads JSONL `EventScore` records.
pub fn read_scores(path: &Path) -> Result<Vec<EventScore>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn cmd_eval(config: &RunConfig, dir: &RunDir, weights: Option<&Path>, predictions: Option<&Path>) -> Result<EvaluationReport> {
    let (report, hash) = match (weights, predictions) {
        (_, Some(path)) => {
            let scores = read_scores(path)?;
            (evaluation::report_from_scores(scores, config.model.threshold, config.mode())?, String::new())
        }
        (Some(wdir), None) => {
            let w = ModelWeights::load(wdir)?;
            let w = ModelWeights { spec: ModelSpec { threshold: config.model.threshold, ..w.spec.clone() }, ..w };
            let manifest = load_manifest(config)?;
            let data = load_dataset(config, &w.spec, &manifest)?;
            let split = training::make_split(&data.labels, config.seed)?;
            (score(config, &w, &data, &split.test_ids)?, split.id_hash())
        }
        (None, None) => return Err(usage("eval needs --weights or --predictions")),
    };
    dir.write_json("report.json", &Scored { seed: config.seed, split_id_hash: &hash, report: &report })?;
    print!("{}", report.to_table());
    Ok(report)
}

pub fn cmd_predict(config: &RunConfig, dir: &RunDir, weights: &Path, event_dir: &Path) -> Result<EventPrediction> {
    let w = ModelWeights::load(weights)?;
    let extractor = FeatureExtractor::new(&w.spec, &config.backbone)?;
    let event_id = event_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| usage(format!("bad event directory {}", event_dir.display())))?;
    let mut per_image: BTreeMap<Instrument, Vec<ImageProbability>> = BTreeMap::new();
    for inst in w.spec.ordered_instruments() {
        let idir = event_dir.join(inst.as_str());
        if !idir.is_dir() {
            continue;
        }
        let mut tensors: Vec<PathBuf> = fs::read_dir(&idir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "f32"))
            .collect();
        tensors.sort();
        let mut times = Vec::new();
        let mut maps = Vec::new();
        for path in tensors {
            let (image, sidecar) = imaging::tensor::read_tensor(&path)?;
            maps.push(extractor.input_map(&image)?);
            times.push(sidecar.observation_time);
        }
        if maps.is_empty() {
            continue;
        }
        let probs = w.predict_maps(inst, &maps)?;
        per_image.insert(
            inst,
            times.into_iter().zip(probs.iter()).map(|(t, &p)| ImageProbability { observation_time: t, probability: p }).collect(),
        );
    }
    if per_image.is_empty() {
        return Err(anyhow!("{} holds no tensors for the active instruments", event_dir.display()));
    }
    let pred = EventPrediction::from_images(event_id, per_image, config.threshold_arg(), w.spec.threshold)?;
    dir.write_json("prediction.json", &serde_json::json!({ "seed": config.seed, "prediction": &pred }))?;
    println!("{}", serde_json::to_string(&pred)?);
    Ok(pred)
}

/// Arithmetic mean of per-fold metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvAverage {
    pub seed: u64,
    pub mode: Mode,
    pub folds: usize,
    pub mcc: f64,
    pub tss: f64,
    pub bs: f64,
    /// Over folds where it is defined; absent when it is defined in none.
    pub bss: Option<f64>,
}

pub fn average_reports(seed: u64, reports: &[EvaluationReport]) -> Result<CvAverage> {
    let n = reports.len();
    if n == 0 {
        bail!("no fold reports to average");
    }
    let mean = |f: &dyn Fn(&EvaluationReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
    let bss: Vec<f64> = reports.iter().filter_map(|r| r.bss).collect();
    Ok(CvAverage {
        seed,
        mode: reports[0].mode,
        folds: n,
        mcc: mean(&|r| r.mcc),
        tss: mean(&|r| r.tss),
        bs: mean(&|r| r.bs),
        bss: (!bss.is_empty()).then(|| bss.iter().sum::<f64>() / bss.len() as f64),
    })
}

pub fn cmd_cv(config: &RunConfig, dir: &RunDir) -> Result<CvAverage> {
    let manifest = load_manifest(config)?;
    let data = load_dataset(config, &config.model, &manifest)?;
    let folds = training::make_folds(&data.labels, config.seed)?;
    dir.write_json("folds.json", &folds)?;
    let mut reports = Vec::new();
    for k in 0..training::N_FOLDS {
        let split: SplitPlan = folds.split(k, &data.labels)?;
        info!("fold {k}: {} train, {} val, {} test", split.train_ids.len(), split.val_ids.len(), split.test_ids.len());
        let outcome = training::train_on(&data, &config.model, &config.train, &split)?;
        let report = score(config, &outcome.final_weights, &data, &split.test_ids)?;
        let hash = split.id_hash();
        dir.write_json(&format!("fold_{k}.json"), &Scored { seed: config.seed, split_id_hash: &hash, report: &report })?;
        reports.push(report);
    }
    let avg = average_reports(config.seed, &reports)?;
    dir.write_json("average.json", &avg)?;
    println!("MCC {:.3}  TSS {:.3}  BS {:.3}  BSS {}", avg.mcc, avg.tss, avg.bs, avg.bss.map_or("undefined".into(), |v| format!("{v:.3}")));
    Ok(avg)
}

pub fn cmd_ablate(config: &RunConfig, dir: &RunDir) -> Result<ablation::SuiteResults> {
    let manifest = load_manifest(config)?;
    let split = training::make_split(&manifest.truths(), config.seed)?;
    dir.write_json("split.json", &split)?;
    let suite = AblationSuite {
        base: config.model.clone(),
        train: config.train.clone(),
        split,
        source: config.backbone.clone(),
        config: config.ablation.clone(),
    };
    let results = ablation::run_suite(&manifest, &suite)?;
    results.write(&dir.join("ablation"))?;
    print!("{}", results.ranked_summary());
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = RunConfig { synth: Some(SynthSpec::default()), grid: Some(HyperGrid::default()), ..RunConfig::default() };
        let text = toml::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from(["geoeff", "--seed", "7", "--threshold", "0.4", "--offline", "cv"]).unwrap();
        let c = RunConfig::default().resolve(&cli).unwrap();
        assert_eq!((c.seed, c.model.seed, c.train.seed), (7, 7, 7));
        assert_eq!(c.model.threshold, 0.4);
        assert!(c.archive.offline);
        let bad = Cli::try_parse_from(["geoeff", "--threshold", "1.5", "cv"]).unwrap();
        let err = RunConfig::default().resolve(&bad).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_USAGE);
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(main_with_args(["geoeff", "frobnicate"]), EXIT_USAGE);
        assert_eq!(main_with_args(["geoeff", "eval"]), EXIT_USAGE);
        assert_eq!(main_with_args(["geoeff", "--help"]), EXIT_OK);
    }

    #[test]
    fn exit_codes_by_error_kind() {
        let numeric: anyhow::Error =
            TrainingError::NonFiniteLoss { epoch: 1, batch: 0, instrument: Instrument::C2, lr: 1.0 }.into();
        assert_eq!(exit_code(&numeric), EXIT_NUMERIC);
        let data: anyhow::Error = anyhow::Error::from(std::io::Error::other("gone")).context("loading");
        assert_eq!(exit_code(&data), EXIT_DATA);
    }

    #[test]
    fn cv_average_is_arithmetic_mean() {
        let mk = |tp, fp, fn_, tn, p: f64| {
            let truths = [1u8, 0];
            let events = truths
                .iter()
                .enumerate()
                .map(|(i, &y)| EventScore { event_id: i.to_string(), truth: crate::Label::from_target(y), probability: p })
                .collect();
            let mut r = evaluation::report_from_scores(events, 0.5, Mode::Deterministic).unwrap();
            r.matrix = evaluation::ConfusionMatrix::new(tp, fp, fn_, tn);
            r.mcc = r.matrix.mcc();
            r.tss = r.matrix.tss();
            r
        };
        let a = mk(21, 2, 0, 5, 0.7);
        let b = mk(1, 1, 1, 1, 0.2);
        let avg = average_reports(3, &[a.clone(), b.clone()]).unwrap();
        assert!((avg.mcc - (a.mcc + b.mcc) / 2.0).abs() < 1e-15);
        assert!((avg.bs - (a.bs + b.bs) / 2.0).abs() < 1e-15);
        assert_eq!(avg.bss, Some((a.bss.unwrap() + b.bss.unwrap()) / 2.0));
        assert_eq!(avg.folds, 2);
    }
}
