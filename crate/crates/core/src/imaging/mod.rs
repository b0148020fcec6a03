//! Per-event frame selection, C2 base differencing, normalisation and the
//! tensor dataset written for training.

pub mod fits;
pub mod tensor;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use log::{info, warn};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::EventCatalog;
use crate::{Instrument, Label};

pub use tensor::{preprocess, read_tensor, resize_bilinear, write_tensor, Normalization, Scaling, TensorSidecar};

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("no pre-event base frame for C2")]
    NoBaseCandidate,
    #[error("image format: {0}")]
    Format(String),
    #[error("frame source: {0}")]
    Source(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("manifest build aborted after {completed} events ({checkpoint}): {source}")]
    Aborted {
        completed: usize,
        checkpoint: PathBuf,
        #[source]
        source: Box<ImagingError>,
    },
}

/// Time windows around the LASCO onset. Durations are in minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowPolicy {
    pub c2_before_min: i64,
    pub c2_after_min: i64,
    pub eit_before_min: i64,
    pub eit_after_min: i64,
    pub mdi_count: usize,
    /// How far before the C2 window to look for a base frame.
    pub c2_base_lookback_min: i64,
    /// How far before onset to look for MDI frames.
    pub mdi_lookback_min: i64,
}

impl Default for WindowPolicy {
    fn default() -> Self {
        WindowPolicy {
            c2_before_min: 10,
            c2_after_min: 240,
            eit_before_min: 240,
            eit_after_min: 0,
            mdi_count: 3,
            c2_base_lookback_min: 120,
            mdi_lookback_min: 24 * 60,
        }
    }
}

impl WindowPolicy {
    pub fn validate(&self) -> Result<(), String> {
        let durations = [
            self.c2_before_min,
            self.c2_after_min,
            self.eit_before_min,
            self.eit_after_min,
            self.c2_base_lookback_min,
            self.mdi_lookback_min,
        ];
        if durations.iter().any(|&d| d < 0) {
            return Err("window durations must be non-negative".into());
        }
        if self.mdi_count == 0 {
            return Err("mdi_count must be at least 1".into());
        }
        Ok(())
    }

    /// Archive time range needed to build one instrument's frames for an
    /// event, including the C2 base lookback.
    pub fn query_range(&self, instrument: Instrument, onset: DateTime<Utc>) -> (DateTime<Utc>, DateTime<Utc>) {
        let m = Duration::minutes;
        match instrument {
            Instrument::C2 => (onset - m(self.c2_before_min + self.c2_base_lookback_min), onset + m(self.c2_after_min)),
            Instrument::Eit => (onset - m(self.eit_before_min), onset + m(self.eit_after_min)),
            Instrument::Mdi => (onset - m(self.mdi_lookback_min), onset),
        }
    }

    pub fn c2_base_cutoff(&self, onset: DateTime<Utc>) -> DateTime<Utc> {
        onset - Duration::minutes(self.c2_before_min)
    }
}

/// Frames of `available` (ascending) that fall in the instrument's window.
/// C2 and EIT windows are closed intervals; MDI takes the last
/// `mdi_count` frames strictly before onset. An empty result means the
/// instrument is missing for this event.
pub fn select_window(
    onset: DateTime<Utc>,
    instrument: Instrument,
    available: &[DateTime<Utc>],
    policy: &WindowPolicy,
) -> Vec<DateTime<Utc>> {
    let m = Duration::minutes;
    let within = |lo: DateTime<Utc>, hi: DateTime<Utc>| -> Vec<DateTime<Utc>> {
        available.iter().copied().filter(|t| *t >= lo && *t <= hi).collect()
    };
    match instrument {
        Instrument::C2 => within(onset - m(policy.c2_before_min), onset + m(policy.c2_after_min)),
        Instrument::Eit => within(onset - m(policy.eit_before_min), onset + m(policy.eit_after_min)),
        Instrument::Mdi => {
            let before: Vec<_> = available.iter().copied().filter(|t| *t < onset).collect();
            let skip = before.len().saturating_sub(policy.mdi_count);
            before[skip..].to_vec()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceFrames {
    pub base_time: DateTime<Utc>,
    pub frames: Vec<(DateTime<Utc>, Array2<f32>)>,
}

/// Subtracts the base frame (the latest frame at or before `base_cutoff`)
/// from every later frame. The base itself is not emitted. Frames whose
/// shape differs from the base are resampled to the base shape first.
pub fn base_difference(
    frames: &[(DateTime<Utc>, Array2<f32>)],
    base_cutoff: DateTime<Utc>,
) -> Result<DifferenceFrames, ImagingError> {
    let (base_time, base) = frames
        .iter()
        .filter(|(t, _)| *t <= base_cutoff)
        .max_by_key(|(t, _)| *t)
        .ok_or(ImagingError::NoBaseCandidate)?;
    let (rows, cols) = base.dim();
    let mut out: Vec<(DateTime<Utc>, Array2<f32>)> = frames
        .iter()
        .filter(|(t, _)| t > base_time)
        .map(|(t, img)| {
            let img = if img.dim() == (rows, cols) { img.clone() } else { resize_bilinear(img, rows, cols) };
            (*t, img - base)
        })
        .collect();
    out.sort_by_key(|(t, _)| *t);
    Ok(DifferenceFrames { base_time: *base_time, frames: out })
}

pub fn normalization_for(instrument: Instrument, mdi_cap_gauss: f32) -> Normalization {
    match instrument {
        Instrument::C2 | Instrument::Eit => Normalization::MinMax,
        Instrument::Mdi => Normalization::SymmetricClip { cap: mdi_cap_gauss },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_shape: [usize; 2],
    pub mdi_cap_gauss: f32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { target_shape: [256, 256], mdi_cap_gauss: 1000.0 }
    }
}

/// Source of raw frames, implemented by the archive cache and by in-memory
/// fixtures.
pub trait FrameSource {
    /// Observation times available in `[start, end]`, ascending.
    fn available(
        &self,
        instrument: Instrument,
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    ) -> Result<Vec<DateTime<Utc>>, ImagingError>;

    fn load(&self, instrument: Instrument, time: DateTime<Utc>) -> Result<Array2<f32>, ImagingError>;
}

/// Loads a raw frame from disk: FITS by extension, otherwise any image
/// format the `image` crate decodes (PNG/GIF quick-looks) as grey levels.
pub fn load_raw_frame(path: &Path) -> Result<Array2<f32>, ImagingError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let bytes = fs::read(path)?;
    if matches!(ext.as_str(), "fits" | "fts" | "fit") {
        return fits::read_fits_image(&bytes);
    }
    let img = image::load_from_memory(&bytes).map_err(|e| ImagingError::Format(e.to_string()))?;
    let grey = img.to_luma32f();
    let (w, h) = grey.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), grey.into_raw()).map_err(|e| ImagingError::Format(e.to_string()))
}

// ---------------------------------------------------------------------------
// Dataset manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub event_id: String,
    pub label: Label,
    pub onset_time: DateTime<Utc>,
    pub counts: BTreeMap<Instrument, usize>,
    /// Tensor paths relative to the dataset root.
    pub files: BTreeMap<Instrument, Vec<String>>,
    pub missing: Vec<Instrument>,
}

impl ManifestEntry {
    pub fn total_frames(&self) -> usize {
        self.counts.values().sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InstrumentStats {
    pub frames: usize,
    pub events: usize,
    pub mean_frames_per_event: f64,
    pub pixel_mean: f64,
    pub pixel_std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub policy: WindowPolicy,
    pub preprocess: PreprocessConfig,
    pub stats: BTreeMap<Instrument, InstrumentStats>,
    pub exclusions: Vec<ManifestExclusion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestExclusion {
    pub event_id: String,
    pub reason: String,
}

/// Index of a tensor dataset: `<root>/manifest.jsonl` holds one entry per
/// event, `<root>/manifest_meta.json` the policy and statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub meta: ManifestMeta,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_META_FILE: &str = "manifest_meta.json";
const PARTIAL_MANIFEST_FILE: &str = "manifest.partial.jsonl";

impl DatasetManifest {
    pub fn entry(&self, event_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.event_id == event_id)
    }

    pub fn truths(&self) -> BTreeMap<String, Label> {
        self.entries.iter().map(|e| (e.event_id.clone(), e.label)).collect()
    }

    /// Every tensor of an event's instrument, in time order.
    pub fn load_frames(&self, entry: &ManifestEntry, instrument: Instrument) -> Result<Vec<(TensorSidecar, Array2<f32>)>, ImagingError> {
        let Some(files) = entry.files.get(&instrument) else {
            return Ok(Vec::new());
        };
        files
            .iter()
            .map(|rel| read_tensor(&self.root.join(rel)).map(|(data, meta)| (meta, data)))
            .collect()
    }

    pub fn total_frames(&self) -> usize {
        self.entries.iter().map(ManifestEntry::total_frames).sum()
    }

    pub fn write(&self) -> Result<(), ImagingError> {
        fs::create_dir_all(&self.root)?;
        let mut f = File::create(self.root.join(MANIFEST_FILE))?;
        for e in &self.entries {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        fs::write(self.root.join(MANIFEST_META_FILE), serde_json::to_vec_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self, ImagingError> {
        let f = File::open(root.join(MANIFEST_FILE))?;
        let mut entries = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line)?);
            }
        }
        let meta = match fs::read(root.join(MANIFEST_META_FILE)) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => ManifestMeta::default(),
            Err(e) => return Err(e.into()),
        };
        Ok(DatasetManifest { root: root.to_path_buf(), entries, meta })
    }

    /// Checks the manifest invariants: every entry has at least one frame,
    /// counts agree with the file lists and every listed file exists with a
    /// well-formed tensor of the declared shape.
    pub fn validate(&self) -> Result<(), String> {
        let shape = self.meta.preprocess.target_shape;
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.event_id) {
                return Err(format!("duplicate event {}", e.event_id));
            }
            if e.total_frames() == 0 {
                return Err(format!("{} has no frames", e.event_id));
            }
            for inst in Instrument::ALL {
                let n = e.counts.get(&inst).copied().unwrap_or(0);
                let files = e.files.get(&inst).map_or(0, Vec::len);
                if n != files {
                    return Err(format!("{} {inst}: count {n} but {files} files", e.event_id));
                }
                if (n == 0) != e.missing.contains(&inst) {
                    return Err(format!("{} {inst}: missing flag disagrees with count", e.event_id));
                }
            }
            for (inst, files) in &e.files {
                let mut last: Option<DateTime<Utc>> = None;
                for rel in files {
                    let (data, meta) = read_tensor(&self.root.join(rel)).map_err(|err| err.to_string())?;
                    if meta.shape != shape || data.dim() != (shape[0], shape[1]) {
                        return Err(format!("{rel}: shape {:?}, expected {shape:?}", meta.shape));
                    }
                    if data.iter().any(|v| !v.is_finite()) {
                        return Err(format!("{rel}: non-finite values"));
                    }
                    if last.is_some_and(|t| t >= meta.observation_time) {
                        return Err(format!("{} {inst}: frames not strictly time-ordered", e.event_id));
                    }
                    if *inst == Instrument::C2 && meta.base_time.is_none_or(|b| b >= meta.observation_time) {
                        return Err(format!("{rel}: C2 frame without an earlier base"));
                    }
                    last = Some(meta.observation_time);
                }
            }
        }
        Ok(())
    }
}

/// Prepared frames of one (event, instrument) pair.
struct PreparedFrames {
    frames: Vec<(DateTime<Utc>, Array2<f32>, Scaling)>,
    base_time: Option<DateTime<Utc>>,
}

fn prepare_instrument<S: FrameSource + ?Sized>(
    source: &S,
    instrument: Instrument,
    onset: DateTime<Utc>,
    policy: &WindowPolicy,
    pre: &PreprocessConfig,
) -> Result<PreparedFrames, ImagingError> {
    let (start, end) = policy.query_range(instrument, onset);
    let available = source.available(instrument, start, end)?;
    let selected = select_window(onset, instrument, &available, policy);
    let target = (pre.target_shape[0], pre.target_shape[1]);
    let norm = normalization_for(instrument, pre.mdi_cap_gauss);
    let empty = PreparedFrames { frames: Vec::new(), base_time: None };
    if selected.is_empty() {
        return Ok(empty);
    }
    match instrument {
        Instrument::C2 => {
            let cutoff = policy.c2_base_cutoff(onset);
            let Some(base_t) = available.iter().copied().filter(|t| *t <= cutoff).max() else {
                return Ok(empty);
            };
            let mut raw = vec![(base_t, source.load(instrument, base_t)?)];
            for t in selected.into_iter().filter(|t| *t > base_t) {
                raw.push((t, source.load(instrument, t)?));
            }
            let diff = match base_difference(&raw, cutoff) {
                Ok(d) => d,
                Err(ImagingError::NoBaseCandidate) => return Ok(empty),
                Err(e) => return Err(e),
            };
            let frames = diff
                .frames
                .iter()
                .map(|(t, img)| {
                    let (out, scaling) = preprocess(img, target, norm);
                    (*t, out, scaling)
                })
                .collect();
            Ok(PreparedFrames { frames, base_time: Some(diff.base_time) })
        }
        Instrument::Eit | Instrument::Mdi => {
            let mut frames = Vec::with_capacity(selected.len());
            for t in selected {
                let raw = source.load(instrument, t)?;
                let (out, scaling) = preprocess(&raw, target, norm);
                frames.push((t, out, scaling));
            }
            Ok(PreparedFrames { frames, base_time: None })
        }
    }
}

/// Accumulates the running pixel statistics per instrument.
#[derive(Default)]
struct StatsAccumulator {
    frames: usize,
    events: usize,
    sum: f64,
    sum_sq: f64,
    pixels: usize,
}

impl StatsAccumulator {
    fn add(&mut self, img: &Array2<f32>) {
        self.frames += 1;
        for &v in img {
            let v = f64::from(v);
            self.sum += v;
            self.sum_sq += v * v;
        }
        self.pixels += img.len();
    }

    fn finish(&self) -> InstrumentStats {
        let mean = if self.pixels > 0 { self.sum / self.pixels as f64 } else { 0.0 };
        let var = if self.pixels > 0 { (self.sum_sq / self.pixels as f64 - mean * mean).max(0.0) } else { 0.0 };
        InstrumentStats {
            frames: self.frames,
            events: self.events,
            mean_frames_per_event: if self.events > 0 { self.frames as f64 / self.events as f64 } else { 0.0 },
            pixel_mean: mean,
            pixel_std: var.sqrt(),
        }
    }
}

/// Tensor path of frame `index` relative to the dataset root.
pub fn tensor_rel_path(event_id: &str, instrument: Instrument, index: usize) -> String {
    format!("{event_id}/{}/{index:03}.f32", instrument.as_str())
}

/// Builds the tensor dataset under `root` for every labeled catalog event.
/// Progress is appended to a partial manifest so an aborted build leaves a
/// checkpoint of completed events.
pub fn build_manifest<S: FrameSource + ?Sized>(
    catalog: &EventCatalog,
    source: &S,
    policy: &WindowPolicy,
    pre: &PreprocessConfig,
    root: &Path,
) -> Result<DatasetManifest, ImagingError> {
    policy.validate().map_err(ImagingError::Source)?;
    fs::create_dir_all(root)?;
    if catalog.is_empty() {
        warn!("empty catalog; writing an empty manifest");
    }
    let partial_path = root.join(PARTIAL_MANIFEST_FILE);
    let mut partial = File::create(&partial_path)?;
    let mut entries = Vec::new();
    let mut exclusions = Vec::new();
    let mut stats: BTreeMap<Instrument, StatsAccumulator> = BTreeMap::new();

    for (event, label) in catalog.labeled() {
        let result = (|| -> Result<Option<ManifestEntry>, ImagingError> {
            let mut counts = BTreeMap::new();
            let mut files = BTreeMap::new();
            let mut missing = Vec::new();
            let mut written = Vec::new();
            for inst in Instrument::ALL {
                let prepared = prepare_instrument(source, inst, event.onset_time, policy, pre)?;
                counts.insert(inst, prepared.frames.len());
                if prepared.frames.is_empty() {
                    missing.push(inst);
                    continue;
                }
                let mut paths = Vec::new();
                for (i, (t, img, scaling)) in prepared.frames.into_iter().enumerate() {
                    let rel = tensor_rel_path(&event.event_id, inst, i);
                    let sidecar = TensorSidecar {
                        shape: pre.target_shape,
                        dtype: "float32".into(),
                        byte_order: "little".into(),
                        observation_time: t,
                        base_time: prepared.base_time,
                        scaling,
                    };
                    write_tensor(&root.join(&rel), &img, &sidecar)?;
                    written.push((inst, img));
                    paths.push(rel);
                }
                files.insert(inst, paths);
            }
            if missing.len() == Instrument::ALL.len() {
                return Ok(None);
            }
            for (inst, img) in &written {
                stats.entry(*inst).or_default().add(img);
            }
            for inst in files.keys() {
                stats.entry(*inst).or_default().events += 1;
            }
            Ok(Some(ManifestEntry {
                event_id: event.event_id.clone(),
                label,
                onset_time: event.onset_time,
                counts,
                files,
                missing,
            }))
        })();
        match result {
            Ok(Some(entry)) => {
                serde_json::to_writer(&mut partial, &entry)?;
                partial.write_all(b"\n")?;
                partial.flush()?;
                entries.push(entry);
            }
            Ok(None) => {
                info!("{}: no frames from any instrument; excluded", event.event_id);
                exclusions.push(ManifestExclusion {
                    event_id: event.event_id.clone(),
                    reason: "all instruments missing".into(),
                });
            }
            Err(e) => {
                return Err(ImagingError::Aborted {
                    completed: entries.len(),
                    checkpoint: partial_path,
                    source: Box::new(e),
                })
            }
        }
    }
    drop(partial);
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        entries,
        meta: ManifestMeta {
            policy: policy.clone(),
            preprocess: pre.clone(),
            stats: stats.iter().map(|(k, v)| (*k, v.finish())).collect(),
            exclusions,
        },
    };
    manifest.write()?;
    fs::remove_file(&partial_path)?;
    Ok(manifest)
}
