//! Labeled synthetic datasets for running the pipeline without archive
//! access or pretrained weights.
//!
//! Every frame is Gaussian noise plus a Gaussian blob whose amplitude
//! depends on the label: `A (1 + s)/2` for geoeffective events and
//! `A (1 − s)/2` otherwise, with `s` the separability. The frames are fed
//! through [`imaging::build_manifest`] so the output is an ordinary tensor
//! dataset.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{event_id_for, CmeEvent, EventCatalog, HaloClass, Provenance};
use crate::imaging::{self, DatasetManifest, FrameSource, ImagingError, PreprocessConfig, WindowPolicy};
use crate::model::derive_seed;
use crate::Instrument;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Number of frames an instrument contributes per event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrameCount {
    Fixed { n: usize },
    /// Inclusive range, drawn uniformly per event.
    Uniform { min: usize, max: usize },
}

impl FrameCount {
    fn max(self) -> usize {
        match self {
            FrameCount::Fixed { n } => n,
            FrameCount::Uniform { max, .. } => max,
        }
    }

    fn draw(self, rng: &mut ChaCha8Rng) -> usize {
        match self {
            FrameCount::Fixed { n } => n,
            FrameCount::Uniform { min, max } => rng.random_range(min..=max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_events: usize,
    /// Fraction of geoeffective events.
    pub class_balance: f64,
    pub frames_per_instrument: BTreeMap<Instrument, FrameCount>,
    /// 0 gives label-independent images, 1 trivially separable ones.
    pub separability: f64,
    pub seed: u64,
    /// Side length of the square raw and stored frames.
    pub image_size: usize,
    /// Blob amplitude at full separability.
    pub amplitude: f32,
    /// Standard deviation of the background noise.
    pub noise: f32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_events: 40,
            class_balance: 0.5,
            frames_per_instrument: Instrument::ALL.iter().map(|&i| (i, FrameCount::Fixed { n: 2 })).collect(),
            separability: 1.0,
            seed: 0,
            image_size: 64,
            amplitude: 1.0,
            noise: 0.25,
        }
    }
}

/// MDI frames are in gauss; the others in arbitrary units.
fn raw_scale(inst: Instrument) -> f32 {
    match inst {
        Instrument::Mdi => 400.0,
        Instrument::C2 | Instrument::Eit => 1.0,
    }
}

/// Largest frame count each instrument's default window can hold.
fn window_capacity(inst: Instrument, policy: &WindowPolicy) -> usize {
    match inst {
        Instrument::C2 => (policy.c2_after_min / C2_CADENCE_MIN) as usize,
        Instrument::Eit => (policy.eit_before_min / EIT_CADENCE_MIN) as usize + 1,
        Instrument::Mdi => policy.mdi_count,
    }
}

const C2_CADENCE_MIN: i64 = 12;
const EIT_CADENCE_MIN: i64 = 12;
const MDI_CADENCE_MIN: i64 = 96;
const C2_BASE_OFFSET_MIN: i64 = 60;
const EVENT_SPACING_DAYS: i64 = 7;

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.n_events < 2 {
            return bad("at least 2 events are needed".into());
        }
        if !(0.0..=1.0).contains(&self.class_balance) || !(0.0..=1.0).contains(&self.separability) {
            return bad("class_balance and separability must be in [0, 1]".into());
        }
        if self.image_size < 8 {
            return bad("image_size must be at least 8".into());
        }
        if !(self.noise >= 0.0 && self.amplitude >= 0.0) {
            return bad("noise and amplitude must be non-negative".into());
        }
        let policy = WindowPolicy::default();
        for (&inst, &count) in &self.frames_per_instrument {
            if let FrameCount::Uniform { min, max } = count {
                if min > max {
                    return bad(format!("{inst}: uniform frame range {min}..={max} is empty"));
                }
            }
            let cap = window_capacity(inst, &policy);
            if count.max() > cap {
                return bad(format!("{inst}: at most {cap} frames fit the observation window"));
            }
        }
        Ok(())
    }

    fn start(&self) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2000, 1, 3, 6, 0, 0).unwrap()
    }
}

#[derive(Debug, Clone, Copy)]
struct FrameKey {
    event: usize,
    positive: bool,
    /// None for the C2 base frame.
    index: Option<usize>,
}

/// Frame source backed by the generative model.
pub struct SynthSource {
    spec: SynthSpec,
    frames: HashMap<(Instrument, DateTime<Utc>), FrameKey>,
}

impl SynthSource {
    fn new(spec: &SynthSpec, events: &[(DateTime<Utc>, bool)]) -> Self {
        let mut frames = HashMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0xF4A3));
        let m = Duration::minutes;
        for (event, &(onset, positive)) in events.iter().enumerate() {
            for (&inst, &count) in &spec.frames_per_instrument {
                let n = count.draw(&mut rng);
                if n == 0 {
                    continue;
                }
                for k in 0..n {
                    let t = match inst {
                        Instrument::C2 => onset + m(C2_CADENCE_MIN * (k as i64 + 1)),
                        Instrument::Eit => onset - m(EIT_CADENCE_MIN * (n - 1 - k) as i64),
                        Instrument::Mdi => onset - m(MDI_CADENCE_MIN * (n - k) as i64),
                    };
                    frames.insert((inst, t), FrameKey { event, positive, index: Some(k) });
                }
                if inst == Instrument::C2 {
                    frames.insert((inst, onset - m(C2_BASE_OFFSET_MIN)), FrameKey { event, positive, index: None });
                }
            }
        }
        SynthSource { spec: spec.clone(), frames }
    }

    fn render(&self, inst: Instrument, key: FrameKey) -> Array2<f32> {
        let s = &self.spec;
        let tag = (key.event as u64) << 16 | (inst.index() as u64) << 8 | key.index.map_or(0xFF, |i| i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s.seed, tag));
        let n = s.image_size;
        let noise = Normal::new(0.0f32, s.noise.max(f32::MIN_POSITIVE)).expect("valid noise");
        let mut img = Array2::from_shape_fn((n, n), |_| if s.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 });
        if key.index.is_some() {
            let sep = s.separability as f32;
            let amp = s.amplitude * if key.positive { (1.0 + sep) / 2.0 } else { (1.0 - sep) / 2.0 };
            let half = n as f32 / 2.0;
            let cy = half + rng.random_range(-0.25..0.25) * half;
            let cx = half + rng.random_range(-0.25..0.25) * half;
            let sigma = n as f32 / 8.0;
            for ((r, c), v) in img.indexed_iter_mut() {
                let d2 = (r as f32 - cy).powi(2) + (c as f32 - cx).powi(2);
                *v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        img * raw_scale(inst)
    }
}

impl FrameSource for SynthSource {
    fn available(&self, instrument: Instrument, start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Vec<DateTime<Utc>>, ImagingError> {
        let mut v: Vec<_> = self
            .frames
            .keys()
            .filter(|(i, t)| *i == instrument && *t >= start && *t <= end)
            .map(|(_, t)| *t)
            .collect();
        v.sort();
        Ok(v)
    }

    fn load(&self, instrument: Instrument, time: DateTime<Utc>) -> Result<Array2<f32>, ImagingError> {
        let key = self
            .frames
            .get(&(instrument, time))
            .ok_or_else(|| ImagingError::Source(format!("no synthetic {instrument} frame at {time}")))?;
        Ok(self.render(instrument, *key))
    }
}

/// The labeled catalog and the frame source of a spec.
pub fn scenario(spec: &SynthSpec) -> Result<(EventCatalog, SynthSource), SynthError> {
    spec.validate()?;
    let n_pos = (spec.n_events as f64 * spec.class_balance).round() as usize;
    let mut positive: Vec<bool> = (0..spec.n_events).map(|i| i < n_pos).collect();
    positive.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x1AB)));
    let events: Vec<(DateTime<Utc>, bool)> = positive
        .iter()
        .enumerate()
        .map(|(i, &p)| (spec.start() + Duration::days(EVENT_SPACING_DAYS * i as i64), p))
        .collect();
    let catalog = EventCatalog {
        events: events
            .iter()
            .map(|&(t, p)| CmeEvent::new(event_id_for(t), t, HaloClass::Halo, Some(if p { -120 } else { -20 })))
            .collect(),
        provenance: Provenance::default(),
    };
    Ok((catalog, SynthSource::new(spec, &events)))
}

/// Writes a synthetic tensor dataset under `root`, with the `SynthSpec` saved as
/// `synth_spec.json` next to the manifest.
pub fn generate(spec: &SynthSpec, root: &Path) -> Result<DatasetManifest, SynthError> {
    let (catalog, source) = scenario(spec)?;
    let pre = PreprocessConfig { target_shape: [spec.image_size, spec.image_size], ..PreprocessConfig::default() };
    let manifest = imaging::build_manifest(&catalog, &source, &WindowPolicy::default(), &pre, root)?;
    fs::write(root.join("synth_spec.json"), serde_json::to_vec_pretty(spec)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::read_tensor;

    fn small() -> SynthSpec {
        SynthSpec { n_events: 6, image_size: 16, ..SynthSpec::default() }
    }

    #[test]
    fn fixed_counts_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(&small(), dir.path()).unwrap();
        m.validate().unwrap();
        assert_eq!(m.entries.len(), 6);
        assert_eq!(m.entries.iter().filter(|e| e.label.is_positive()).count(), 3);
        for e in &m.entries {
            assert!(Instrument::ALL.iter().all(|i| e.counts[i] == 2));
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate(&small(), a.path()).unwrap();
        let mb = generate(&small(), b.path()).unwrap();
        assert_eq!(ma.entries, mb.entries);
        let rel = &ma.entries[0].files[&Instrument::Eit][1];
        assert_eq!(read_tensor(&a.path().join(rel)).unwrap().0, read_tensor(&b.path().join(rel)).unwrap().0);
    }

    #[test]
    fn zero_separability_ignores_label() {
        // blob mass, insensitive to the jittered centre
        let spec = SynthSpec { separability: 0.0, noise: 0.0, ..small() };
        let (catalog, source) = scenario(&spec).unwrap();
        let pos = catalog.events.iter().position(|e| e.label.unwrap().is_positive()).unwrap();
        let neg = catalog.events.iter().position(|e| !e.label.unwrap().is_positive()).unwrap();
        let mass = |i: usize| source.load(Instrument::Eit, catalog.events[i].onset_time).unwrap().sum();
        assert!((mass(pos) - mass(neg)).abs() < 1e-3 * mass(pos));
        let sep = SynthSpec { separability: 1.0, noise: 0.0, ..small() };
        let (catalog, source) = scenario(&sep).unwrap();
        let t = catalog.events[neg].onset_time;
        assert!(source.load(Instrument::Eit, t).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_counts_and_validation() {
        let mut spec = small();
        spec.frames_per_instrument.insert(Instrument::Mdi, FrameCount::Uniform { min: 0, max: 3 });
        let dir = tempfile::tempdir().unwrap();
        let m = generate(&spec, dir.path()).unwrap();
        m.validate().unwrap();
        assert!(m.entries.iter().all(|e| e.counts[&Instrument::Mdi] <= 3));
        spec.frames_per_instrument.insert(Instrument::Mdi, FrameCount::Fixed { n: 4 });
        assert!(spec.validate().is_err());
        assert!(SynthSpec { separability: 1.5, ..small() }.validate().is_err());
    }
}
