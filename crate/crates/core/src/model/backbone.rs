//! Backbone adapters: frozen feature extractors mapping a preprocessed
//! image to an `8 × 8 × C` map.
//!
//! Pretrained ImageNet backbones are not evaluated in-process. Their maps are
//! produced by an external extractor and read from a feature store:
//!
//! ```text
//! <store>/<rn|irn>/<sha256 of the image's little-endian f32 bytes>.f32
//! <store>/<rn|irn>/<sha256>.json      {"shape": [h, w, c]}
//! ```
//!
//! Values are row-major `(h, w, c)` little-endian float32. The extractor is
//! expected to resize the image to [`BackboneAdapter::required_input_shape`]
//! and export the final pre-pooling convolutional map. ResNet's 7×7 map is
//! resampled to 8×8 here.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Array3, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelError, GRID};
use crate::imaging::resize_bilinear;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BackboneKind {
    /// ResNet152, 2048-channel 7×7 final map.
    #[serde(rename = "RN")]
    Rn,
    /// InceptionResNetV2, 1536-channel 8×8 final map.
    #[serde(rename = "IRN")]
    Irn,
    /// Seeded random projection; needs no weights.
    #[serde(rename = "STUB")]
    Stub,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Rn => "RN",
            BackboneKind::Irn => "IRN",
            BackboneKind::Stub => "STUB",
        }
    }

    pub fn published_channels(self) -> Option<usize> {
        match self {
            BackboneKind::Rn => Some(2048),
            BackboneKind::Irn => Some(1536),
            BackboneKind::Stub => None,
        }
    }
}

pub trait BackboneAdapter: Send + Sync {
    fn kind(&self) -> BackboneKind;

    fn feature_channels(&self) -> usize;

    fn required_input_shape(&self) -> (usize, usize);

    /// The adapter's native final map, `(h, w, channels)`.
    fn native_map(&self, image: &Array2<f32>) -> Result<Array3<f64>, ModelError>;
}

/// Resamples each channel of an `(h, w, c)` map to `(rows, cols)`.
pub fn resample_map(map: &Array3<f64>, rows: usize, cols: usize) -> Array3<f64> {
    let (h, w, c) = map.dim();
    if (h, w) == (rows, cols) {
        return map.clone();
    }
    let mut out = Array3::zeros((rows, cols, c));
    for ch in 0..c {
        let plane = map.index_axis(Axis(2), ch).mapv(|v| v as f32);
        let res = resize_bilinear(&plane, rows, cols);
        out.index_axis_mut(Axis(2), ch).assign(&res.mapv(f64::from));
    }
    out
}

/// Runs the adapter and brings its map to the fixed `8 × 8` grid.
pub fn extract_features(image: &Array2<f32>, adapter: &dyn BackboneAdapter) -> Result<Array3<f64>, ModelError> {
    let native = adapter.native_map(image)?;
    if native.dim().2 != adapter.feature_channels() {
        return Err(ModelError::Shape(format!(
            "{} produced {} channels, declared {}",
            adapter.kind().as_str(),
            native.dim().2,
            adapter.feature_channels()
        )));
    }
    let map = resample_map(&native, GRID, GRID);
    if map.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite { layer: format!("backbone {}", adapter.kind().as_str()) });
    }
    Ok(map)
}

/// Concatenates `8 × 8 × C_i` maps along channels, in the given order.
pub fn fuse(maps: &[Array3<f64>]) -> Result<Array3<f64>, ModelError> {
    if maps.is_empty() {
        return Err(ModelError::Shape("nothing to fuse".into()));
    }
    for m in maps {
        let (h, w, _) = m.dim();
        if (h, w) != (GRID, GRID) {
            return Err(ModelError::Shape(format!("feature map is {h}x{w}, expected {GRID}x{GRID}")));
        }
    }
    let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
    concatenate(Axis(2), &views).map_err(|e| ModelError::Shape(e.to_string()))
}

/// Block-average downsampling; bilinear when the source is smaller.
pub fn downsample_area(src: &Array2<f32>, rows: usize, cols: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if h < rows || w < cols {
        return resize_bilinear(src, rows, cols);
    }
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (r0, r1) = (r * h / rows, (r + 1) * h / rows);
        let (c0, c1) = (c * w / cols, (c + 1) * w / cols);
        let block = src.slice(ndarray::s![r0..r1, c0..c1]);
        (block.iter().map(|&v| f64::from(v)).sum::<f64>() / block.len() as f64) as f32
    })
}

/// Downsamples to 32×32, then projects every 4×4 cell of the 8×8 grid to
/// `channels` values through a fixed seeded Gaussian matrix.
#[derive(Debug, Clone)]
pub struct StubBackbone {
    kind: BackboneKind,
    projection: Array2<f64>,
}

const STUB_INPUT: usize = 32;
const STUB_CELL: usize = STUB_INPUT / GRID;

impl StubBackbone {
    /// `kind` is the slot the stub stands in for (STUB itself, or RN/IRN in
    /// weight-free test runs).
    pub fn new(kind: BackboneKind, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = STUB_CELL * STUB_CELL;
        let scale = 1.0 / (cell as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((cell, channels), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        StubBackbone { kind, projection }
    }
}

impl BackboneAdapter for StubBackbone {
    fn kind(&self) -> BackboneKind {
        self.kind
    }

    fn feature_channels(&self) -> usize {
        self.projection.ncols()
    }

    fn required_input_shape(&self) -> (usize, usize) {
        (STUB_INPUT, STUB_INPUT)
    }

    fn native_map(&self, image: &Array2<f32>) -> Result<Array3<f64>, ModelError> {
        let small = downsample_area(image, STUB_INPUT, STUB_INPUT);
        let cell = STUB_CELL * STUB_CELL;
        let patches = Array2::from_shape_fn((GRID * GRID, cell), |(g, k)| {
            let (gy, gx) = (g / GRID, g % GRID);
            let (ky, kx) = (k / STUB_CELL, k % STUB_CELL);
            f64::from(small[[gy * STUB_CELL + ky, gx * STUB_CELL + kx]])
        });
        let out = patches.dot(&self.projection);
        let c = out.ncols();
        Ok(out.as_standard_layout().into_owned().into_shape_with_order((GRID, GRID, c)).expect("8x8 grid"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeatureSidecar {
    shape: [usize; 3],
}

/// Pretrained backbone served from a feature store written by an external
/// extractor.
#[derive(Debug, Clone)]
pub struct PrecomputedBackbone {
    kind: BackboneKind,
    dir: PathBuf,
}

impl PrecomputedBackbone {
    pub fn open(kind: BackboneKind, store: &Path) -> Result<Self, ModelError> {
        if kind == BackboneKind::Stub {
            return Err(ModelError::Usage("STUB has no feature store".into()));
        }
        let dir = store.join(kind.as_str().to_ascii_lowercase());
        if !dir.is_dir() {
            return Err(ModelError::MissingWeights {
                adapter: kind.as_str().into(),
                detail: format!("feature store {} not found", dir.display()),
            });
        }
        Ok(PrecomputedBackbone { kind, dir })
    }

    /// Store key of an image.
    pub fn image_key(image: &Array2<f32>) -> String {
        let mut hasher = Sha256::new();
        for v in image.iter() {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Writes a feature map into a store, for extractors and tests.
    pub fn store_map(store: &Path, kind: BackboneKind, image: &Array2<f32>, map: &Array3<f64>) -> std::io::Result<()> {
        let dir = store.join(kind.as_str().to_ascii_lowercase());
        fs::create_dir_all(&dir)?;
        let key = Self::image_key(image);
        let (h, w, c) = map.dim();
        let mut bytes = Vec::with_capacity(map.len() * 4);
        for v in map.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(dir.join(format!("{key}.f32")), bytes)?;
        let sidecar = serde_json::to_vec(&FeatureSidecar { shape: [h, w, c] }).map_err(std::io::Error::other)?;
        fs::write(dir.join(format!("{key}.json")), sidecar)
    }
}

impl BackboneAdapter for PrecomputedBackbone {
    fn kind(&self) -> BackboneKind {
        self.kind
    }

    fn feature_channels(&self) -> usize {
        self.kind.published_channels().unwrap_or(0)
    }

    fn required_input_shape(&self) -> (usize, usize) {
        match self.kind {
            BackboneKind::Irn => (299, 299),
            _ => (224, 224),
        }
    }

    fn native_map(&self, image: &Array2<f32>) -> Result<Array3<f64>, ModelError> {
        let key = Self::image_key(image);
        let missing = |detail: String| ModelError::MissingWeights { adapter: self.kind.as_str().into(), detail };
        let sidecar: FeatureSidecar = fs::read(self.dir.join(format!("{key}.json")))
            .map_err(|e| missing(format!("no features for image {key}: {e}")))
            .and_then(|b| serde_json::from_slice(&b).map_err(|e| missing(format!("bad sidecar for {key}: {e}"))))?;
        let bytes = fs::read(self.dir.join(format!("{key}.f32"))).map_err(|e| missing(format!("{key}.f32: {e}")))?;
        let [h, w, c] = sidecar.shape;
        if bytes.len() != h * w * c * 4 {
            return Err(missing(format!("{key}.f32 has {} bytes for shape {h}x{w}x{c}", bytes.len())));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        Array3::from_shape_vec((h, w, c), values).map_err(|e| ModelError::Shape(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Array2<f32> {
        Array2::from_shape_fn((64, 64), |(r, c)| ((r * 3 + c * 5) % 17) as f32 / 17.0)
    }

    #[test]
    fn stub_is_deterministic() {
        let a = StubBackbone::new(BackboneKind::Stub, 8, 42);
        let b = StubBackbone::new(BackboneKind::Stub, 8, 42);
        let fa = extract_features(&image(), &a).unwrap();
        let fb = extract_features(&image(), &b).unwrap();
        assert_eq!(fa.dim(), (8, 8, 8));
        let bytes = |m: &Array3<f64>| m.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
        assert_eq!(bytes(&fa), bytes(&fb));
        let c = StubBackbone::new(BackboneKind::Stub, 8, 43);
        assert_ne!(extract_features(&image(), &c).unwrap(), fa);
    }

    #[test]
    fn resnet_map_resampled_to_grid() {
        let dir = tempfile::tempdir().unwrap();
        let img = image();
        let native = Array3::from_shape_fn((7, 7, 2048), |(y, x, c)| (y + x) as f64 + c as f64 * 1e-3);
        PrecomputedBackbone::store_map(dir.path(), BackboneKind::Rn, &img, &native).unwrap();
        let rn = PrecomputedBackbone::open(BackboneKind::Rn, dir.path()).unwrap();
        let map = extract_features(&img, &rn).unwrap();
        assert_eq!(map.dim(), (8, 8, 2048));
    }

    #[test]
    fn inception_map_keeps_grid() {
        let dir = tempfile::tempdir().unwrap();
        let img = image();
        let native = Array3::from_shape_fn((8, 8, 1536), |(y, x, c)| (y * 8 + x + c) as f64);
        PrecomputedBackbone::store_map(dir.path(), BackboneKind::Irn, &img, &native).unwrap();
        let irn = PrecomputedBackbone::open(BackboneKind::Irn, dir.path()).unwrap();
        assert_eq!(irn.required_input_shape(), (299, 299));
        let map = extract_features(&img, &irn).unwrap();
        assert_eq!(map, native);
    }

    #[test]
    fn missing_store_names_the_adapter() {
        let dir = tempfile::tempdir().unwrap();
        match PrecomputedBackbone::open(BackboneKind::Irn, dir.path()) {
            Err(ModelError::MissingWeights { adapter, .. }) => assert_eq!(adapter, "IRN"),
            other => panic!("unexpected {other:?}"),
        }
        fs::create_dir_all(dir.path().join("rn")).unwrap();
        let rn = PrecomputedBackbone::open(BackboneKind::Rn, dir.path()).unwrap();
        let err = extract_features(&image(), &rn).unwrap_err();
        assert!(err.to_string().contains("RN"), "{err}");
    }

    #[test]
    fn fusion_concatenates_channels() {
        let a = Array3::<f64>::ones((8, 8, 2048));
        let b = Array3::<f64>::zeros((8, 8, 1536));
        let fused = fuse(&[a.clone(), b]).unwrap();
        assert_eq!(fused.dim(), (8, 8, 3584));
        assert_eq!(fused[[3, 4, 2047]], 1.0);
        assert_eq!(fused[[3, 4, 2048]], 0.0);
        assert_eq!(fuse(std::slice::from_ref(&a)).unwrap(), a);
        assert!(fuse(&[]).is_err());
        assert!(fuse(&[a, Array3::zeros((7, 7, 4))]).is_err());
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let img = Array2::from_shape_fn((4, 4), |(r, _)| r as f32);
        let small = downsample_area(&img, 2, 2);
        assert_eq!(small, ndarray::arr2(&[[0.5, 0.5], [2.5, 2.5]]));
    }
}
