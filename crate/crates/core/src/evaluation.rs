//! Forecast verification: confusion matrices, MCC, TSS, Brier score and
//! Brier skill score, threshold sweeps and report assembly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{decide, EventPrediction};
use crate::Label;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {labels} labels vs {probs} probabilities")]
    LengthMismatch { labels: usize, probs: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("Brier skill baseline undefined: all outcomes belong to one class")]
    UndefinedBaseline,
    #[error("threshold sweep needs both classes present")]
    SingleClass,
    #[error("no ground truth for event '{0}'")]
    MissingTruth(String),
}

/// Counts of a binary forecast against outcomes. Positive = geoeffective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Matrix seen from the negative class: positives and negatives exchanged.
    pub fn swapped(&self) -> Self {
        ConfusionMatrix { tp: self.tn, fp: self.fn_, fn_: self.fp, tn: self.tp }
    }

    pub fn mcc(&self) -> f64 {
        mcc(self)
    }

    pub fn tss(&self) -> f64 {
        tss(self)
    }
}

/// Counts (truth, prediction) pairs.
pub fn confusion<I>(pairs: I) -> ConfusionMatrix
where
    I: IntoIterator<Item = (Label, Label)>,
{
    let mut m = ConfusionMatrix::default();
    for (truth, pred) in pairs {
        match (truth.is_positive(), pred.is_positive()) {
            (true, true) => m.tp += 1,
            (false, true) => m.fp += 1,
            (true, false) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
    }
    m
}

/// Matthews correlation coefficient. A zero factor in the denominator
/// yields 0.
pub fn mcc(m: &ConfusionMatrix) -> f64 {
    let (tp, fp, fn_, tn) = (m.tp as f64, m.fp as f64, m.fn_ as f64, m.tn as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom.sqrt()
}

/// True skill statistic: hit rate minus false-alarm rate. A class with no
/// members contributes 0 to its term.
pub fn tss(m: &ConfusionMatrix) -> f64 {
    let pos = m.tp + m.fn_;
    let neg = m.fp + m.tn;
    let hit = if pos == 0 { 0.0 } else { m.tp as f64 / pos as f64 };
    let false_alarm = if neg == 0 { 0.0 } else { m.fp as f64 / neg as f64 };
    hit - false_alarm
}

fn check_lengths(y: &[u8], p: &[f64]) -> Result<(), EvalError> {
    if y.len() != p.len() {
        return Err(EvalError::LengthMismatch { labels: y.len(), probs: p.len() });
    }
    if y.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Mean squared difference between forecast probabilities and 0/1 outcomes.
pub fn brier(y: &[u8], p: &[f64]) -> Result<f64, EvalError> {
    check_lengths(y, p)?;
    let sum: f64 = y
        .iter()
        .zip(p)
        .map(|(&yi, &pi)| {
            let d = pi - f64::from(yi);
            d * d
        })
        .sum();
    Ok(sum / y.len() as f64)
}

/// Brier skill score against the base-rate forecast of the evaluated set.
pub fn brier_skill(y: &[u8], p: &[f64]) -> Result<f64, EvalError> {
    let bs = brier(y, p)?;
    let n = y.len() as f64;
    let mean = y.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let baseline = y.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    if baseline == 0.0 {
        return Err(EvalError::UndefinedBaseline);
    }
    Ok(1.0 - bs / baseline)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub mcc: f64,
    pub tss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub points: Vec<SweepPoint>,
    pub best_threshold: f64,
    pub best_mcc: f64,
    pub best_tss: f64,
}

/// Thresholds 0.05, 0.10, ..., 0.95.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

const TIE_EPS: f64 = 1e-12;

/// MCC and TSS at every threshold of `grid` (ascending). The best threshold
/// maximises MCC, then TSS, then sits closest to 0.5.
pub fn threshold_sweep(y: &[u8], p: &[f64], grid: &[f64]) -> Result<ThresholdSweep, EvalError> {
    check_lengths(y, p)?;
    if y.iter().all(|&v| v == y[0]) {
        return Err(EvalError::SingleClass);
    }
    if grid.is_empty() {
        return Err(EvalError::Empty);
    }
    let points: Vec<SweepPoint> = grid
        .iter()
        .map(|&t| {
            let m = confusion(
                y.iter()
                    .zip(p)
                    .map(|(&yi, &pi)| (Label::from_target(yi), decide(pi, t))),
            );
            SweepPoint { threshold: t, mcc: mcc(&m), tss: tss(&m) }
        })
        .collect();
    let mut best = points[0];
    for pt in &points[1..] {
        let better = if pt.mcc > best.mcc + TIE_EPS {
            true
        } else if (pt.mcc - best.mcc).abs() <= TIE_EPS {
            if pt.tss > best.tss + TIE_EPS {
                true
            } else {
                (pt.tss - best.tss).abs() <= TIE_EPS
                    && (pt.threshold - 0.5).abs() < (best.threshold - 0.5).abs()
            }
        } else {
            false
        };
        if better {
            best = *pt;
        }
    }
    Ok(ThresholdSweep {
        points,
        best_threshold: best.threshold,
        best_mcc: best.mcc,
        best_tss: best.tss,
    })
}

/// Whether a report scores the thresholded class or the raw probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Deterministic,
    Probabilistic,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Deterministic => "deterministic",
            Mode::Probabilistic => "probabilistic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: Mode,
    pub n_events: usize,
    pub threshold: f64,
    pub matrix: ConfusionMatrix,
    pub mcc: f64,
    pub tss: f64,
    pub bs: f64,
    /// Absent when the evaluated set holds a single class.
    pub bss: Option<f64>,
    /// Empty when the evaluated set holds a single class.
    pub sweep: Vec<SweepPoint>,
    /// Per-event (id, truth, probability) the metrics were computed from.
    pub events: Vec<EventScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventScore {
    pub event_id: String,
    pub truth: Label,
    pub probability: f64,
}

/// Scores event predictions against truths. Decisions are recomputed from
/// the event probabilities at `threshold`; cached decisions are ignored.
pub fn evaluate(
    predictions: &[EventPrediction],
    truths: &BTreeMap<String, Label>,
    threshold: f64,
    mode: Mode,
) -> Result<EvaluationReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut events = Vec::with_capacity(predictions.len());
    for pred in predictions {
        let truth = truths
            .get(&pred.event_id)
            .copied()
            .ok_or_else(|| EvalError::MissingTruth(pred.event_id.clone()))?;
        events.push(EventScore {
            event_id: pred.event_id.clone(),
            truth,
            probability: pred.event_probability,
        });
    }
    report_from_scores(events, threshold, mode)
}

/// Builds a report from (id, truth, probability) triples.
pub fn report_from_scores(
    events: Vec<EventScore>,
    threshold: f64,
    mode: Mode,
) -> Result<EvaluationReport, EvalError> {
    if events.is_empty() {
        return Err(EvalError::Empty);
    }
    let y: Vec<u8> = events.iter().map(|e| e.truth.as_target()).collect();
    let p: Vec<f64> = events.iter().map(|e| e.probability).collect();
    let matrix = confusion(events.iter().map(|e| (e.truth, decide(e.probability, threshold))));
    let bs = brier(&y, &p)?;
    let bss = match brier_skill(&y, &p) {
        Ok(v) => Some(v),
        Err(EvalError::UndefinedBaseline) => None,
        Err(e) => return Err(e),
    };
    let sweep = match threshold_sweep(&y, &p, &default_threshold_grid()) {
        Ok(s) => s.points,
        Err(EvalError::SingleClass) => Vec::new(),
        Err(e) => return Err(e),
    };
    Ok(EvaluationReport {
        mode,
        n_events: events.len(),
        threshold,
        matrix,
        mcc: mcc(&matrix),
        tss: tss(&matrix),
        bs,
        bss,
        sweep,
        events,
    })
}

impl EvaluationReport {
    /// Plain-text summary table.
    pub fn to_table(&self) -> String {
        let m = &self.matrix;
        let mut out = String::new();
        let _ = writeln!(out, "mode        {}", self.mode.as_str());
        let _ = writeln!(out, "events      {}", self.n_events);
        let _ = writeln!(out, "threshold   {:.3}", self.threshold);
        let _ = writeln!(out, "TP FP FN TN {} {} {} {}", m.tp, m.fp, m.fn_, m.tn);
        let _ = writeln!(out, "MCC         {:.3}", self.mcc);
        let _ = writeln!(out, "TSS         {:.3}", self.tss);
        let _ = writeln!(out, "BS          {:.3}", self.bs);
        match self.bss {
            Some(v) => {
                let _ = writeln!(out, "BSS         {v:.3}");
            }
            None => {
                let _ = writeln!(out, "BSS         undefined");
            }
        }
        out
    }
}

/// Scores reported for the full model on the real SOHO corpus with
/// pretrained backbones. Carried in reports for comparison only; they are
/// not reproducible without the original weights and split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTargets {
    pub test_mcc: f64,
    pub test_tss: f64,
    pub test_bs: f64,
    pub test_bss: f64,
    pub cv_mean_mcc: f64,
    pub cv_mean_tss: f64,
    pub cv_mean_bs: f64,
    pub cv_mean_bss: f64,
    pub no_backbone_mcc: f64,
    pub no_backbone_tss: f64,
    pub optimal_threshold: f64,
}

pub const REFERENCE_TARGETS: ReferenceTargets = ReferenceTargets {
    test_mcc: 0.807,
    test_tss: 0.714,
    test_bs: 0.094,
    test_bss: 0.493,
    cv_mean_mcc: 0.782,
    cv_mean_tss: 0.673,
    cv_mean_bs: 0.107,
    cv_mean_bss: 0.461,
    no_backbone_mcc: 0.365,
    no_backbone_tss: 0.380,
    optimal_threshold: 0.6,
};

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn published_test_matrix_scores() {
        let m = ConfusionMatrix::new(21, 2, 0, 5);
        assert_eq!(m.total(), 28);
        assert!((mcc(&m) - 0.807).abs() < 1e-3, "mcc {}", mcc(&m));
        assert!((tss(&m) - (1.0 - 2.0 / 7.0)).abs() < 1e-12);
        assert!((tss(&m) - 0.714).abs() < 1e-3);
    }

    #[test]
    fn confusion_counts() {
        use Label::*;
        let all_right = confusion([
            (Geoeffective, Geoeffective),
            (Geoeffective, Geoeffective),
            (NonGeoeffective, NonGeoeffective),
            (NonGeoeffective, NonGeoeffective),
        ]);
        assert_eq!(all_right, ConfusionMatrix::new(2, 0, 0, 2));
        let all_pos = confusion([
            (Geoeffective, Geoeffective),
            (Geoeffective, Geoeffective),
            (Geoeffective, Geoeffective),
            (NonGeoeffective, Geoeffective),
        ]);
        assert_eq!(all_pos, ConfusionMatrix::new(3, 1, 0, 0));
    }

    #[test]
    fn degenerate_conventions() {
        assert_eq!(mcc(&ConfusionMatrix::new(5, 0, 0, 0)), 0.0);
        assert_eq!(mcc(&ConfusionMatrix::new(4, 0, 0, 3)), 1.0);
        assert_eq!(tss(&ConfusionMatrix::new(4, 0, 0, 3)), 1.0);
        // always-positive forecaster
        assert_eq!(tss(&ConfusionMatrix::new(4, 3, 0, 0)), 0.0);
        assert_eq!(tss(&ConfusionMatrix::default()), 0.0);
    }

    #[test]
    fn brier_hand_cases() {
        assert_eq!(brier(&[1, 0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!((brier(&[1, 0], &[0.5, 0.5]).unwrap() - 0.25).abs() < 1e-12);
        let bs = brier(&[1, 1, 0], &[0.8, 0.6, 0.3]).unwrap();
        assert!((bs - (0.04 + 0.16 + 0.09) / 3.0).abs() < 1e-12);
        let bss = brier_skill(&[1, 1, 0, 0], &[0.9, 0.8, 0.2, 0.1]).unwrap();
        assert!((bss - 0.9).abs() < 1e-12);
        assert!((brier_skill(&[1, 0, 0, 0], &[0.25; 4]).unwrap()).abs() < 1e-12);
        assert_eq!(brier_skill(&[1, 1], &[0.5, 0.5]), Err(EvalError::UndefinedBaseline));
        assert_eq!(brier(&[1], &[0.5, 0.5]), Err(EvalError::LengthMismatch { labels: 1, probs: 2 }));
    }

    #[test]
    fn sweep_on_separated_scores() {
        let y = [1, 1, 1, 0, 0];
        let p = [0.95, 0.9, 0.92, 0.05, 0.1];
        let sweep = threshold_sweep(&y, &p, &default_threshold_grid()).unwrap();
        assert_eq!(sweep.points.len(), 19);
        assert!(sweep.points.windows(2).all(|w| w[0].threshold < w[1].threshold));
        let plateau: Vec<f64> = sweep
            .points
            .iter()
            .filter(|pt| (pt.mcc - 1.0).abs() < 1e-12)
            .map(|pt| pt.threshold)
            .collect();
        assert!(plateau.iter().any(|&t| (t - 0.5).abs() < 1e-12));
        assert!((sweep.best_threshold - 0.5).abs() < 1e-12);
        assert_eq!(threshold_sweep(&[1, 1], &[0.2, 0.3], &[0.5]), Err(EvalError::SingleClass));
    }

    #[test]
    fn evaluate_requires_truth() {
        let pred = EventPrediction::probabilistic_only("e1", 0.7);
        let truths = BTreeMap::new();
        assert_eq!(
            evaluate(&[pred], &truths, 0.6, Mode::Deterministic),
            Err(EvalError::MissingTruth("e1".into()))
        );
        assert_eq!(evaluate(&[], &truths, 0.6, Mode::Deterministic), Err(EvalError::Empty));
    }

    fn matrix_strategy() -> impl Strategy<Value = ConfusionMatrix> {
        (0u64..60, 0u64..60, 0u64..60, 0u64..60).prop_map(|(a, b, c, d)| ConfusionMatrix::new(a, b, c, d))
    }

    proptest! {
        #[test]
        fn class_swap_symmetry(m in matrix_strategy()) {
            prop_assert!((mcc(&m) - mcc(&m.swapped())).abs() < 1e-12);
            prop_assert!((tss(&m) - tss(&m.swapped())).abs() < 1e-12);
        }

        #[test]
        fn scores_are_bounded(m in matrix_strategy()) {
            prop_assert!((-1.0..=1.0).contains(&mcc(&m)));
            prop_assert!((-1.0..=1.0).contains(&tss(&m)));
        }

        #[test]
        fn brier_bounded_permutation_and_flip(
            pairs in proptest::collection::vec((0u8..2, 0.0f64..=1.0), 1..50),
            rot in 0usize..50,
        ) {
            let y: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let p: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let bs = brier(&y, &p).unwrap();
            prop_assert!((0.0..=1.0).contains(&bs));
            let k = rot % y.len();
            let mut y2 = y.clone();
            let mut p2 = p.clone();
            y2.rotate_left(k);
            p2.rotate_left(k);
            prop_assert!((brier(&y2, &p2).unwrap() - bs).abs() < 1e-12);
            let yf: Vec<u8> = y.iter().map(|&v| 1 - v).collect();
            let pf: Vec<f64> = p.iter().map(|&v| 1.0 - v).collect();
            prop_assert!((brier(&yf, &pf).unwrap() - bs).abs() < 1e-12);
        }
    }
}
