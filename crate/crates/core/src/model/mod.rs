//! Per-image model: backbone adapters produce `8 × 8 × C` maps, the maps are
//! concatenated, and each instrument's own network turns the fused map into
//! one probability.

pub mod backbone;
pub mod layers;
pub mod network;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Instrument;
pub use backbone::{extract_features, fuse, BackboneAdapter, BackboneKind, PrecomputedBackbone, StubBackbone};
pub use network::{Arch, Mode, Network, Params, RunningStats};

/// Spatial size of every feature map entering the head.
pub const GRID: usize = 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("weights for backbone {adapter} unavailable: {detail}")]
    MissingWeights { adapter: String, detail: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: String },
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Mixes a base seed with a tag (splitmix64 finaliser).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadSpec {
    pub conv_filters: Vec<usize>,
    pub dense_units: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec { conv_filters: vec![64, 128, 256], dense_units: 1024, bn_eps: 1e-3, bn_momentum: 0.9 }
    }
}

/// Full architecture description of an ensemble variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub name: String,
    /// Active backbones. Empty means no transfer learning: a learnable 3×3
    /// conv embeds the 8×8-downsampled image instead.
    pub backbones: Vec<BackboneKind>,
    pub instruments: Vec<Instrument>,
    pub head: HeadSpec,
    pub threshold: f64,
    pub leaky_relu_slope: f64,
    pub seed: u64,
    pub stub_channels: usize,
    pub embedding_channels: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            name: "full".into(),
            backbones: vec![BackboneKind::Rn, BackboneKind::Irn],
            instruments: Instrument::ALL.to_vec(),
            head: HeadSpec::default(),
            threshold: 0.6,
            leaky_relu_slope: 0.01,
            seed: 0,
            stub_channels: 8,
            embedding_channels: 16,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.to_string()));
        if self.instruments.is_empty() {
            return bad("at least one instrument must be active");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if self.head.conv_filters.is_empty() || self.head.conv_filters.contains(&0) || self.head.dense_units == 0 {
            return bad("head dimensions must be positive");
        }
        let mut b = self.backbones.clone();
        b.sort();
        b.dedup();
        if b.len() != self.backbones.len() {
            return bad("duplicate backbone");
        }
        let mut i = self.instruments.clone();
        i.sort();
        i.dedup();
        if i.len() != self.instruments.len() {
            return bad("duplicate instrument");
        }
        if self.stub_channels == 0 || self.embedding_channels == 0 {
            return bad("channel counts must be positive");
        }
        Ok(())
    }

    /// Backbones in fusion order (RN before IRN before STUB).
    pub fn ordered_backbones(&self) -> Vec<BackboneKind> {
        let mut b = self.backbones.clone();
        b.sort();
        b
    }

    pub fn ordered_instruments(&self) -> Vec<Instrument> {
        let mut i = self.instruments.clone();
        i.sort();
        i
    }

    pub fn arch(&self, input_channels: usize, dropout: f64) -> Arch {
        Arch {
            input_channels,
            embedding_channels: self.backbones.is_empty().then_some(self.embedding_channels),
            conv_filters: self.head.conv_filters.clone(),
            dense_units: self.head.dense_units,
            dropout,
            leaky_slope: self.leaky_relu_slope,
            bn_eps: self.head.bn_eps,
            bn_momentum: self.head.bn_momentum,
        }
    }
}

/// Where backbone feature maps come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSource {
    /// Pretrained maps from a feature store (see [`backbone`]).
    FeatureStore { path: PathBuf },
    /// Seeded stubs stand in for every backbone slot. No weights needed.
    Stub { seed: u64 },
}

impl Default for BackboneSource {
    fn default() -> Self {
        BackboneSource::FeatureStore { path: PathBuf::from("features") }
    }
}

/// Turns a preprocessed image into the fused input map of a spec.
pub struct FeatureExtractor {
    adapters: Vec<Box<dyn BackboneAdapter>>,
}

impl FeatureExtractor {
    pub fn new(spec: &ModelSpec, source: &BackboneSource) -> Result<Self, ModelError> {
        let mut adapters: Vec<Box<dyn BackboneAdapter>> = Vec::new();
        for kind in spec.ordered_backbones() {
            let stub_seed = |s: u64| derive_seed(s, 0xB0 + kind as u64);
            let adapter: Box<dyn BackboneAdapter> = match (kind, source) {
                (BackboneKind::Stub, BackboneSource::Stub { seed }) => {
                    Box::new(StubBackbone::new(kind, spec.stub_channels, stub_seed(*seed)))
                }
                (BackboneKind::Stub, _) => Box::new(StubBackbone::new(kind, spec.stub_channels, stub_seed(spec.seed))),
                (_, BackboneSource::Stub { seed }) => Box::new(StubBackbone::new(kind, spec.stub_channels, stub_seed(*seed))),
                (_, BackboneSource::FeatureStore { path }) => Box::new(PrecomputedBackbone::open(kind, path)?),
            };
            adapters.push(adapter);
        }
        Ok(FeatureExtractor { adapters })
    }

    pub fn input_channels(&self) -> usize {
        if self.adapters.is_empty() {
            1
        } else {
            self.adapters.iter().map(|a| a.feature_channels()).sum()
        }
    }

    /// Fused `8 × 8 × C` map for one image; with no backbones, the
    /// block-averaged 8×8 image as a single channel.
    pub fn input_map(&self, image: &Array2<f32>) -> Result<Array3<f64>, ModelError> {
        if self.adapters.is_empty() {
            let small = backbone::downsample_area(image, GRID, GRID);
            return Ok(small.mapv(f64::from).as_standard_layout().into_owned().into_shape_with_order((GRID, GRID, 1)).expect("contiguous"));
        }
        let maps = self
            .adapters
            .iter()
            .map(|a| extract_features(image, a.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        fuse(&maps)
    }
}

/// Trained (or freshly initialised) networks, one per active instrument.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub spec: ModelSpec,
    pub pipelines: BTreeMap<Instrument, Network>,
}

impl ModelWeights {
    pub fn init(spec: &ModelSpec, input_channels: usize, dropout: f64) -> Result<Self, ModelError> {
        spec.validate()?;
        let pipelines = spec
            .ordered_instruments()
            .into_iter()
            .map(|inst| {
                let arch = spec.arch(input_channels, dropout);
                (inst, Network::new(arch, derive_seed(spec.seed, 0x100 + inst.index() as u64)))
            })
            .collect();
        Ok(ModelWeights { spec: spec.clone(), pipelines })
    }

    pub fn pipeline(&self, instrument: Instrument) -> Result<&Network, ModelError> {
        self.pipelines
            .get(&instrument)
            .ok_or_else(|| ModelError::Usage(format!("instrument {instrument} is not active in spec '{}'", self.spec.name)))
    }

    /// Inference-mode probabilities for a batch of fused maps of one
    /// instrument.
    pub fn predict_maps(&self, instrument: Instrument, maps: &[Array3<f64>]) -> Result<Array1<f64>, ModelError> {
        let net = self.pipeline(instrument)?;
        if maps.is_empty() {
            return Ok(Array1::zeros(0));
        }
        net.predict(&network::stack_inputs(maps))
    }

    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        checkpoint::save(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        checkpoint::load(dir)
    }
}

/// Probability that one preprocessed image shows a geoeffective CME, using
/// the instrument's own pipeline.
pub fn predict_image(
    image: &Array2<f32>,
    instrument: Instrument,
    weights: &ModelWeights,
    extractor: &FeatureExtractor,
) -> Result<f64, ModelError> {
    if !weights.spec.instruments.contains(&instrument) {
        return Err(ModelError::Usage(format!("instrument {instrument} is not active in spec '{}'", weights.spec.name)));
    }
    let map = extractor.input_map(image)?;
    Ok(weights.predict_maps(instrument, std::slice::from_ref(&map))?[0])
}

/// Checkpoint directory format:
///
/// ```text
/// <dir>/spec.json            {"spec": ModelSpec, "arch": Arch}
/// <dir>/tensors.json         [{"pipeline", "name", "shape": [rows, cols], "file"}]
/// <dir>/<INST>/<name>.f64    row-major little-endian float64
/// ```
///
/// Batch-norm running statistics are stored as `<layer>.running_mean` and
/// `<layer>.running_var` with shape `[1, n]`.
pub mod checkpoint {
    use super::*;

    #[derive(Debug, Serialize, Deserialize)]
    struct SpecFile {
        spec: ModelSpec,
        arch: Arch,
    }

    #[derive(Debug, Serialize, Deserialize)]
    struct TensorEntry {
        pipeline: Instrument,
        name: String,
        shape: [usize; 2],
        file: String,
    }

    fn bn_names(net: &Network) -> Vec<String> {
        let mut names: Vec<String> = (1..=net.arch.conv_filters.len()).map(|k| format!("conv{k}.bn")).collect();
        names.push("dense1.bn".into());
        names
    }

    fn write_f64(path: &Path, m: &Array2<f64>) -> std::io::Result<()> {
        let mut bytes = Vec::with_capacity(m.len() * 8);
        for v in m.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes)
    }

    fn read_f64(path: &Path, shape: [usize; 2]) -> Result<Array2<f64>, ModelError> {
        let bytes = fs::read(path)?;
        if bytes.len() != shape[0] * shape[1] * 8 {
            return Err(ModelError::Checkpoint(format!("{}: size does not match shape {shape:?}", path.display())));
        }
        let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Array2::from_shape_vec((shape[0], shape[1]), v).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn save(weights: &ModelWeights, dir: &Path) -> Result<(), ModelError> {
        fs::create_dir_all(dir)?;
        let arch = weights
            .pipelines
            .values()
            .next()
            .map(|n| n.arch.clone())
            .ok_or_else(|| ModelError::Checkpoint("no pipelines to save".into()))?;
        fs::write(
            dir.join("spec.json"),
            serde_json::to_vec_pretty(&SpecFile { spec: weights.spec.clone(), arch })?,
        )?;
        let mut index = Vec::new();
        for (inst, net) in &weights.pipelines {
            let sub = dir.join(inst.as_str());
            fs::create_dir_all(&sub)?;
            let mut tensors: Vec<(String, Array2<f64>)> =
                net.params.names.iter().cloned().zip(net.params.tensors.iter().cloned()).collect();
            for (name, stats) in bn_names(net).into_iter().zip(&net.bn_stats) {
                tensors.push((format!("{name}.running_mean"), stats.mean.clone().insert_axis(ndarray::Axis(0))));
                tensors.push((format!("{name}.running_var"), stats.var.clone().insert_axis(ndarray::Axis(0))));
            }
            for (name, t) in tensors {
                let file = format!("{}/{name}.f64", inst.as_str());
                write_f64(&dir.join(&file), &t)?;
                index.push(TensorEntry { pipeline: *inst, name, shape: [t.nrows(), t.ncols()], file });
            }
        }
        fs::write(dir.join("tensors.json"), serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ModelWeights, ModelError> {
        let spec_file: SpecFile = serde_json::from_slice(&fs::read(dir.join("spec.json"))?)?;
        let index: Vec<TensorEntry> = serde_json::from_slice(&fs::read(dir.join("tensors.json"))?)?;
        let mut pipelines = BTreeMap::new();
        for inst in spec_file.spec.ordered_instruments() {
            let entries: BTreeMap<&str, &TensorEntry> =
                index.iter().filter(|e| e.pipeline == inst).map(|e| (e.name.as_str(), e)).collect();
            let template = Network::new(spec_file.arch.clone(), 0);
            let mut params = Params { names: template.params.names.clone(), tensors: Vec::new() };
            for name in &template.params.names {
                let e = entries
                    .get(name.as_str())
                    .ok_or_else(|| ModelError::Checkpoint(format!("{inst}: missing tensor {name}")))?;
                params.tensors.push(read_f64(&dir.join(&e.file), e.shape)?);
            }
            let mut stats = Vec::new();
            for name in bn_names(&template) {
                let get = |suffix: &str| -> Result<Array1<f64>, ModelError> {
                    let key = format!("{name}.{suffix}");
                    let e = entries
                        .get(key.as_str())
                        .ok_or_else(|| ModelError::Checkpoint(format!("{inst}: missing tensor {key}")))?;
                    Ok(read_f64(&dir.join(&e.file), e.shape)?.row(0).to_owned())
                };
                stats.push(RunningStats { mean: get("running_mean")?, var: get("running_var")? });
            }
            pipelines.insert(inst, Network::from_parts(spec_file.arch.clone(), params, stats)?);
        }
        Ok(ModelWeights { spec: spec_file.spec, pipelines })
    }
}

#[cfg(test)]
mod tests;
