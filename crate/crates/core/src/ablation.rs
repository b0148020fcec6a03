//! Backbone-removal variants and instrument-subset cases, each trained and
//! scored on one shared split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{error, info};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{self, EvaluationReport, Mode};
use crate::imaging::DatasetManifest;
use crate::model::{BackboneKind, BackboneSource, FeatureExtractor, ModelSpec};
use crate::training::{self, Dataset, SplitPlan, TrainConfig, TrainingError};
use crate::Instrument;

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("base spec must use both RN and IRN, found {0:?}")]
    BaseBackbones(Vec<BackboneKind>),
    #[error("unknown variant or case '{0}'")]
    UnknownRun(String),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// The base spec and its three backbone-removal variants, named by the
/// removed set: `<base>`, `<base>-RN`, `<base>-IRN`, `<base>-RN-IRN`.
pub fn enumerate_variants(base: &ModelSpec) -> Result<Vec<ModelSpec>, AblationError> {
    let mut kinds = base.ordered_backbones();
    kinds.dedup();
    if kinds != [BackboneKind::Rn, BackboneKind::Irn] {
        return Err(AblationError::BaseBackbones(base.backbones.clone()));
    }
    let removed: [&[BackboneKind]; 4] = [&[], &[BackboneKind::Rn], &[BackboneKind::Irn], &[BackboneKind::Rn, BackboneKind::Irn]];
    Ok(removed
        .iter()
        .map(|gone| {
            let mut name = base.name.clone();
            for k in *gone {
                name.push('-');
                name.push_str(k.as_str());
            }
            ModelSpec {
                name,
                backbones: kinds.iter().copied().filter(|k| !gone.contains(k)).collect(),
                ..base.clone()
            }
        })
        .collect())
}

/// The seven non-empty instrument subsets in canonical order.
pub fn enumerate_cases() -> Vec<Vec<Instrument>> {
    use Instrument::*;
    vec![vec![C2], vec![Eit], vec![Mdi], vec![C2, Eit], vec![C2, Mdi], vec![Eit, Mdi], vec![C2, Eit, Mdi]]
}

pub fn case_name(instruments: &[Instrument]) -> String {
    instruments.iter().map(|i| i.as_str()).collect::<Vec<_>>().join("+")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Variant,
    Case,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Variant => "variant",
            Group::Case => "case",
        }
    }
}

/// One configuration of the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteMember {
    pub group: Group,
    pub name: String,
    pub spec: ModelSpec,
}

/// Which members to run, from the `[ablation]` config section. Empty
/// lists mean all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct AblationConfig {
    /// Variant names by removed set: "none", "RN", "IRN", "RN-IRN".
    pub variants: Vec<String>,
    /// Cases as "+"-joined instrument lists, e.g. "C2+EIT".
    pub cases: Vec<String>,
    /// Train the full-backbone variant once and reuse it for the
    /// all-instrument case.
    pub dedupe: bool,
    /// Run members on separate threads.
    pub parallel: bool,
}


fn removed_key(base: &ModelSpec, variant: &ModelSpec) -> String {
    let gone: Vec<&str> = base
        .ordered_backbones()
        .into_iter()
        .filter(|k| !variant.backbones.contains(k))
        .map(|k| k.as_str())
        .collect();
    if gone.is_empty() {
        "none".into()
    } else {
        gone.join("-")
    }
}

/// Variants first, then cases, in canonical order, filtered by `config`.
pub fn members(base: &ModelSpec, config: &AblationConfig) -> Result<Vec<SuiteMember>, AblationError> {
    let variants = enumerate_variants(base)?;
    let keys: Vec<String> = variants.iter().map(|v| removed_key(base, v)).collect();
    for want in &config.variants {
        if !keys.contains(want) {
            return Err(AblationError::UnknownRun(want.clone()));
        }
    }
    let cases = enumerate_cases();
    let case_names: Vec<String> = cases.iter().map(|c| case_name(c)).collect();
    for want in &config.cases {
        if !case_names.contains(want) {
            return Err(AblationError::UnknownRun(want.clone()));
        }
    }
    let mut out = Vec::new();
    for (v, key) in variants.into_iter().zip(&keys) {
        if config.variants.is_empty() || config.variants.contains(key) {
            out.push(SuiteMember { group: Group::Variant, name: v.name.clone(), spec: v });
        }
    }
    for (c, name) in cases.into_iter().zip(case_names) {
        if config.cases.is_empty() || config.cases.contains(&name) {
            let spec = ModelSpec { name: format!("{}[{name}]", base.name), instruments: c, ..base.clone() };
            out.push(SuiteMember { group: Group::Case, name, spec });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed { error: String },
}

/// One report file of the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub group: Group,
    pub name: String,
    pub mode: Mode,
    pub backbones: Vec<BackboneKind>,
    pub instruments: Vec<Instrument>,
    pub split_id_hash: String,
    pub seed: u64,
    /// Set when the result was shared with an identical configuration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_with: Option<String>,
    #[serde(flatten)]
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvaluationReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResults {
    pub split_id_hash: String,
    /// Training runs performed.
    pub trained: usize,
    pub reports: Vec<RunReport>,
}

impl SuiteResults {
    pub fn get(&self, group: Group, name: &str, mode: Mode) -> Option<&RunReport> {
        self.reports.iter().find(|r| r.group == group && r.name == name && r.mode == mode)
    }

    /// Bar-chart data, one row per (member, mode).
    pub fn to_csv(&self) -> String {
        let num = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = String::from("group,name,mode,status,n_events,threshold,mcc,tss,bs,bss,split_id_hash\n");
        for r in &self.reports {
            let rep = r.report.as_ref();
            let status = match &r.status {
                RunStatus::Ok => "ok",
                RunStatus::Failed { .. } => "failed",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.group.as_str(),
                r.name,
                r.mode.as_str(),
                status,
                rep.map(|x| x.n_events.to_string()).unwrap_or_default(),
                num(rep.map(|x| x.threshold)),
                num(rep.map(|x| x.mcc)),
                num(rep.map(|x| x.tss)),
                num(rep.map(|x| x.bs)),
                num(rep.and_then(|x| x.bss)),
                r.split_id_hash
            );
        }
        out
    }

    /// Deterministic members ranked by MCC, probabilistic ones by BS.
    pub fn ranked_summary(&self) -> String {
        let mut out = String::new();
        for (mode, title) in [(Mode::Deterministic, "by MCC (higher is better)"), (Mode::Probabilistic, "by BS (lower is better)")] {
            let _ = writeln!(out, "{} ranking {title}", mode.as_str());
            let mut rows: Vec<&RunReport> = self.reports.iter().filter(|r| r.mode == mode && r.report.is_some()).collect();
            rows.sort_by(|a, b| {
                let (ra, rb) = (a.report.as_ref().unwrap(), b.report.as_ref().unwrap());
                match mode {
                    Mode::Deterministic => rb.mcc.total_cmp(&ra.mcc),
                    Mode::Probabilistic => ra.bs.total_cmp(&rb.bs),
                }
            });
            for (i, r) in rows.iter().enumerate() {
                let rep = r.report.as_ref().unwrap();
                let _ = writeln!(
                    out,
                    "{:>2}. {:<8} {:<20} MCC {:.3} TSS {:.3} BS {:.3} BSS {}",
                    i + 1,
                    r.group.as_str(),
                    r.name,
                    rep.mcc,
                    rep.tss,
                    rep.bs,
                    rep.bss.map_or("n/a".into(), |v| format!("{v:.3}"))
                );
            }
            for r in self.reports.iter().filter(|r| r.mode == mode && r.report.is_none()) {
                if let RunStatus::Failed { error } = &r.status {
                    let _ = writeln!(out, "  - {:<8} {:<20} FAILED: {error}", r.group.as_str(), r.name);
                }
            }
            out.push('\n');
        }
        out
    }

    /// `reports/<group>_<name>_<mode>.json`, `summary.csv` and `ranked.txt`.
    pub fn write(&self, dir: &Path) -> Result<(), AblationError> {
        let reports = dir.join("reports");
        fs::create_dir_all(&reports)?;
        for r in &self.reports {
            let file = format!("{}_{}_{}.json", r.group.as_str(), sanitize(&r.name), r.mode.as_str());
            fs::write(reports.join(file), serde_json::to_vec_pretty(r)?)?;
        }
        fs::write(dir.join("summary.csv"), self.to_csv())?;
        fs::write(dir.join("ranked.txt"), self.ranked_summary())?;
        Ok(())
    }
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '+' { c } else { '_' }).collect()
}

/// Shared inputs of every member.
#[derive(Debug, Clone)]
pub struct AblationSuite {
    pub base: ModelSpec,
    pub train: TrainConfig,
    pub split: SplitPlan,
    pub source: BackboneSource,
    pub config: AblationConfig,
}

fn train_and_score(data: &Dataset, spec: &ModelSpec, train: &TrainConfig, split: &SplitPlan) -> Result<[EvaluationReport; 2], TrainingError> {
    let outcome = training::train_on(data, spec, train, split)?;
    let weights = &outcome.final_weights;
    let det = training::predict_events(weights, data, &split.test_ids, Some(spec.threshold))?;
    let prob = training::predict_events(weights, data, &split.test_ids, None)?;
    Ok([
        evaluation::evaluate(&det, &data.labels, spec.threshold, Mode::Deterministic)?,
        evaluation::evaluate(&prob, &data.labels, spec.threshold, Mode::Probabilistic)?,
    ])
}

/// Trains and scores every member. A failing member is recorded as failed
/// and the suite continues.
pub fn run_suite(manifest: &DatasetManifest, suite: &AblationSuite) -> Result<SuiteResults, AblationError> {
    let members = members(&suite.base, &suite.config)?;
    let split_id_hash = suite.split.id_hash();
    let mut datasets: BTreeMap<Vec<BackboneKind>, Result<Dataset, String>> = BTreeMap::new();
    for m in &members {
        let key = m.spec.ordered_backbones();
        if datasets.contains_key(&key) {
            continue;
        }
        let all = Instrument::ALL;
        let data = FeatureExtractor::new(&m.spec, &suite.source)
            .map_err(TrainingError::from)
            .and_then(|ex| Dataset::from_manifest(manifest, &ex, &all))
            .map_err(|e| e.to_string());
        datasets.insert(key, data);
    }

    // Members that are trained, and the ones that reuse another's result.
    let full_variant = members.iter().position(|m| m.group == Group::Variant && m.spec.backbones.len() == 2);
    let mut alias: BTreeMap<usize, usize> = BTreeMap::new();
    if suite.config.dedupe {
        if let Some(fv) = full_variant {
            for (i, m) in members.iter().enumerate() {
                if m.group == Group::Case && m.spec.ordered_instruments() == Instrument::ALL.to_vec() {
                    alias.insert(i, fv);
                }
            }
        }
    }
    let to_train: Vec<usize> = (0..members.len()).filter(|i| !alias.contains_key(i)).collect();
    let run_one = |i: usize| -> Result<[EvaluationReport; 2], String> {
        let m = &members[i];
        info!("ablation: training {} '{}'", m.group.as_str(), m.name);
        let data = datasets[&m.spec.ordered_backbones()].as_ref().map_err(Clone::clone)?;
        train_and_score(data, &m.spec, &suite.train, &suite.split).map_err(|e| e.to_string())
    };
    let results: BTreeMap<usize, Result<[EvaluationReport; 2], String>> = if suite.config.parallel {
        let run_one = &run_one;
        std::thread::scope(|s| {
            let handles: Vec<_> = to_train.iter().map(|&i| (i, s.spawn(move || run_one(i)))).collect();
            handles
                .into_iter()
                .map(|(i, h)| (i, h.join().unwrap_or_else(|_| Err("run panicked".to_string()))))
                .collect()
        })
    } else {
        to_train.iter().map(|&i| (i, run_one(i))).collect()
    };

    let mut reports = Vec::new();
    for (i, m) in members.iter().enumerate() {
        let src = alias.get(&i).copied().unwrap_or(i);
        let result = &results[&src];
        if let Err(e) = result {
            error!("ablation: {} '{}' failed: {e}", m.group.as_str(), m.name);
        }
        for (k, mode) in [Mode::Deterministic, Mode::Probabilistic].into_iter().enumerate() {
            let (status, report) = match result {
                Ok(pair) => (RunStatus::Ok, Some(pair[k].clone())),
                Err(e) => (RunStatus::Failed { error: e.clone() }, None),
            };
            reports.push(RunReport {
                group: m.group,
                name: m.name.clone(),
                mode,
                backbones: m.spec.ordered_backbones(),
                instruments: m.spec.ordered_instruments(),
                split_id_hash: split_id_hash.clone(),
                seed: suite.train.seed,
                shared_with: (src != i).then(|| members[src].name.clone()),
                status,
                report,
            });
        }
    }
    Ok(SuiteResults { split_id_hash, trained: to_train.len(), reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_variants_named_by_removed_set() {
        let base = ModelSpec::default();
        let v = enumerate_variants(&base).unwrap();
        let sets: Vec<Vec<BackboneKind>> = v.iter().map(|s| s.backbones.clone()).collect();
        use BackboneKind::*;
        assert_eq!(sets, vec![vec![Rn, Irn], vec![Irn], vec![Rn], vec![]]);
        let names: Vec<&str> = v.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["full", "full-RN", "full-IRN", "full-RN-IRN"]);
        let stub_base = ModelSpec { backbones: vec![Stub], ..ModelSpec::default() };
        assert!(enumerate_variants(&stub_base).is_err());
    }

    #[test]
    fn seven_cases_in_canonical_order() {
        let cases = enumerate_cases();
        assert_eq!(cases.len(), 7);
        assert!(cases.iter().all(|c| !c.is_empty()));
        assert_eq!(cases[6], Instrument::ALL.to_vec());
        let names: Vec<String> = cases.iter().map(|c| case_name(c)).collect();
        assert_eq!(names, ["C2", "EIT", "MDI", "C2+EIT", "C2+MDI", "EIT+MDI", "C2+EIT+MDI"]);
    }

    #[test]
    fn member_selection() {
        let base = ModelSpec::default();
        assert_eq!(members(&base, &AblationConfig::default()).unwrap().len(), 11);
        let cfg = AblationConfig { variants: vec!["RN-IRN".into()], cases: vec!["EIT+MDI".into()], ..AblationConfig::default() };
        let m = members(&base, &cfg).unwrap();
        assert_eq!(m.len(), 2);
        assert!(m[0].spec.backbones.is_empty());
        assert_eq!(m[1].spec.instruments, vec![Instrument::Eit, Instrument::Mdi]);
        let bad = AblationConfig { cases: vec!["EIT+C2".into()], ..AblationConfig::default() };
        assert!(matches!(members(&base, &bad), Err(AblationError::UnknownRun(_))));
    }
}
