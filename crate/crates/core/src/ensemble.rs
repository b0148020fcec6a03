//! Late fusion: per-image probabilities are averaged per instrument, the
//! instrument means are averaged per event, and the event probability is
//! thresholded.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Instrument, Label};

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("instrument has no image probabilities")]
    InstrumentMissing,
    #[error("event '{0}' has no instrument probabilities")]
    NoInstruments(String),
    #[error("probability {0} outside [0, 1]")]
    OutOfRange(f64),
}

fn check_probability(p: f64) -> Result<f64, EnsembleError> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(EnsembleError::OutOfRange(p))
    }
}

/// Mean of the per-image probabilities of one instrument.
pub fn aggregate_instrument(probs: &[f64]) -> Result<f64, EnsembleError> {
    if probs.is_empty() {
        return Err(EnsembleError::InstrumentMissing);
    }
    let mut sorted = probs.iter().map(|&p| check_probability(p)).collect::<Result<Vec<_>, _>>()?;
    // summing in sorted order makes the mean independent of image order
    sorted.sort_by(f64::total_cmp);
    Ok(sorted.iter().sum::<f64>() / probs.len() as f64)
}

/// Mean over the instruments that are present. Absent instruments do not
/// enter the denominator.
pub fn aggregate_event(per_instrument: &BTreeMap<Instrument, f64>) -> Result<f64, EnsembleError> {
    if per_instrument.is_empty() {
        return Err(EnsembleError::NoInstruments(String::new()));
    }
    let mut sum = 0.0;
    for &p in per_instrument.values() {
        sum += check_probability(p)?;
    }
    Ok(sum / per_instrument.len() as f64)
}

/// Geoeffective iff `p >= threshold`.
pub fn decide(p: f64, threshold: f64) -> Label {
    if p >= threshold {
        Label::Geoeffective
    } else {
        Label::NonGeoeffective
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageProbability {
    pub observation_time: DateTime<Utc>,
    pub probability: f64,
}

/// Output record for one event, written one per line as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventPrediction {
    pub event_id: String,
    pub per_image: BTreeMap<Instrument, Vec<ImageProbability>>,
    pub per_instrument: BTreeMap<Instrument, f64>,
    pub event_probability: f64,
    /// Absent in probabilistic mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Label>,
    pub threshold_used: f64,
}

impl EventPrediction {
    /// Aggregates per-image probabilities. Instruments with an empty image
    /// list are treated as missing. With `threshold = None` the prediction
    /// is probabilistic and carries no decision.
    pub fn from_images(
        event_id: impl Into<String>,
        per_image: BTreeMap<Instrument, Vec<ImageProbability>>,
        threshold: Option<f64>,
        default_threshold: f64,
    ) -> Result<Self, EnsembleError> {
        let event_id = event_id.into();
        let per_image: BTreeMap<_, _> = per_image.into_iter().filter(|(_, v)| !v.is_empty()).collect();
        let mut per_instrument = BTreeMap::new();
        for (inst, images) in &per_image {
            let probs: Vec<f64> = images.iter().map(|i| i.probability).collect();
            per_instrument.insert(*inst, aggregate_instrument(&probs)?);
        }
        let event_probability = aggregate_event(&per_instrument).map_err(|e| match e {
            EnsembleError::NoInstruments(_) => EnsembleError::NoInstruments(event_id.clone()),
            other => other,
        })?;
        let threshold_used = threshold.unwrap_or(default_threshold);
        Ok(EventPrediction {
            event_id,
            per_image,
            per_instrument,
            event_probability,
            decision: threshold.map(|t| decide(event_probability, t)),
            threshold_used,
        })
    }

    /// A prediction carrying only an event probability, for tests and for
    /// re-scoring stored probabilities.
    pub fn probabilistic_only(event_id: impl Into<String>, p: f64) -> Self {
        EventPrediction {
            event_id: event_id.into(),
            per_image: BTreeMap::new(),
            per_instrument: BTreeMap::new(),
            event_probability: p,
            decision: None,
            threshold_used: 0.0,
        }
    }

    pub fn instruments(&self) -> Vec<Instrument> {
        self.per_instrument.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t0() -> DateTime<Utc> {
        DateTime::parse_from_rfc3339("2002-09-17T08:06:00Z").unwrap().with_timezone(&Utc)
    }

    #[test]
    fn instrument_mean() {
        assert!((aggregate_instrument(&[0.2, 0.4, 0.6]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(aggregate_instrument(&[0.37]).unwrap(), 0.37);
        assert_eq!(aggregate_instrument(&[]), Err(EnsembleError::InstrumentMissing));
        assert_eq!(aggregate_instrument(&[1.2]), Err(EnsembleError::OutOfRange(1.2)));
    }

    #[test]
    fn event_mean_over_present_instruments() {
        let full = BTreeMap::from([(Instrument::C2, 0.9), (Instrument::Eit, 0.6), (Instrument::Mdi, 0.3)]);
        assert!((aggregate_event(&full).unwrap() - 0.6).abs() < 1e-15);
        let eit_only = BTreeMap::from([(Instrument::Eit, 0.7)]);
        assert_eq!(aggregate_event(&eit_only).unwrap(), 0.7);
        assert!(aggregate_event(&BTreeMap::new()).is_err());
    }

    #[test]
    fn threshold_is_inclusive() {
        assert_eq!(decide(0.6, 0.6), Label::Geoeffective);
        assert_eq!(decide(0.59, 0.6), Label::NonGeoeffective);
        assert_eq!(decide(1.0, 1.0), Label::Geoeffective);
        assert_eq!(decide(1.0, 0.3), Label::Geoeffective);
    }

    #[test]
    fn prediction_modes() {
        let images = BTreeMap::from([
            (
                Instrument::C2,
                vec![
                    ImageProbability { observation_time: t0(), probability: 0.8 },
                    ImageProbability { observation_time: t0(), probability: 0.6 },
                ],
            ),
            (Instrument::Mdi, vec![]),
        ]);
        let det = EventPrediction::from_images("e", images.clone(), Some(0.6), 0.6).unwrap();
        assert_eq!(det.instruments(), vec![Instrument::C2]);
        assert!((det.event_probability - 0.7).abs() < 1e-15);
        assert_eq!(det.decision, Some(Label::Geoeffective));
        let prob = EventPrediction::from_images("e", images, None, 0.6).unwrap();
        assert_eq!(prob.decision, None);
        let json = serde_json::to_string(&prob).unwrap();
        assert!(!json.contains("decision"));
        let err = EventPrediction::from_images("lonely", BTreeMap::new(), None, 0.6).unwrap_err();
        assert_eq!(err, EnsembleError::NoInstruments("lonely".into()));
    }

    proptest! {
        #[test]
        fn mean_within_range(probs in proptest::collection::vec(0.0f64..=1.0, 1..24)) {
            let m = aggregate_instrument(&probs).unwrap();
            let lo = probs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
        }
    }
}
