//! Frame preprocessing and the on-disk tensor format.
//!
//! A tensor is stored as `<stem>.f32` (row-major little-endian float32) next
//! to `<stem>.json`, a sidecar recording shape, dtype and how the values were
//! produced.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ImagingError;

/// Resamples `src` to `(rows, cols)` by bilinear interpolation with
/// half-pixel centres.
pub fn resize_bilinear(src: &Array2<f32>, rows: usize, cols: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (rows, cols) {
        return src.clone();
    }
    let sy = h as f64 / rows as f64;
    let sx = w as f64 / cols as f64;
    let coord = |o: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let f = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, f - i0 as f64)
    };
    let xs: Vec<_> = (0..cols).map(|c| coord(c, sx, w)).collect();
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (y0, y1, fy) = coord(r, sy, h);
        let (x0, x1, fx) = xs[c];
        let top = f64::from(src[[y0, x0]]) * (1.0 - fx) + f64::from(src[[y0, x1]]) * fx;
        let bot = f64::from(src[[y1, x0]]) * (1.0 - fx) + f64::from(src[[y1, x1]]) * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    /// Per-image min-max scaling to [0, 1].
    MinMax,
    /// Clip to ±cap, then divide by cap, giving [−1, 1].
    SymmetricClip { cap: f32 },
}

/// Record of how a stored tensor was produced from its raw frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub target_shape: [usize; 2],
    pub normalization: Normalization,
    pub raw_min: f32,
    pub raw_max: f32,
}

/// Replaces non-finite pixels with 0, resizes to `target` and normalises.
/// A constant image scales to all zeros.
pub fn preprocess(frame: &Array2<f32>, target: (usize, usize), normalization: Normalization) -> (Array2<f32>, Scaling) {
    let clean = frame.mapv(|v| if v.is_finite() { v } else { 0.0 });
    let resized = resize_bilinear(&clean, target.0, target.1);
    let lo = resized.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = resized.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let out = match normalization {
        Normalization::MinMax => {
            if hi > lo {
                let span = f64::from(hi) - f64::from(lo);
                resized.mapv(|v| ((f64::from(v) - f64::from(lo)) / span) as f32)
            } else {
                warn!("constant frame (value {lo}); normalised to zeros");
                Array2::zeros(target)
            }
        }
        Normalization::SymmetricClip { cap } => resized.mapv(|v| v.clamp(-cap, cap) / cap),
    };
    let scaling = Scaling {
        target_shape: [target.0, target.1],
        normalization,
        raw_min: lo,
        raw_max: hi,
    };
    (out, scaling)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSidecar {
    pub shape: [usize; 2],
    pub dtype: String,
    pub byte_order: String,
    pub observation_time: DateTime<Utc>,
    /// For C2 difference images, the observation time of the base frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_time: Option<DateTime<Utc>>,
    pub scaling: Scaling,
}

pub fn sidecar_path(tensor_path: &Path) -> PathBuf {
    tensor_path.with_extension("json")
}

/// Writes `<path>` (.f32) and its `.json` sidecar.
pub fn write_tensor(path: &Path, data: &Array2<f32>, sidecar: &TensorSidecar) -> Result<(), ImagingError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(sidecar)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Array2<f32>, TensorSidecar), ImagingError> {
    let sidecar: TensorSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let bytes = fs::read(path)?;
    let [rows, cols] = sidecar.shape;
    if bytes.len() != rows * cols * 4 {
        return Err(ImagingError::Format(format!(
            "{}: {} bytes for shape {rows}x{cols}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array2::from_shape_vec((rows, cols), values).map_err(|e| ImagingError::Format(e.to_string()))?;
    Ok((data, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_frame_goes_to_zero() {
        let img = Array2::from_elem((10, 10), 7.0f32);
        let (out, _) = preprocess(&img, (4, 4), Normalization::MinMax);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn magnetogram_clip() {
        let mut img = Array2::zeros((2, 2));
        img[[0, 0]] = 2000.0f32;
        img[[1, 1]] = -500.0;
        let (out, _) = preprocess(&img, (2, 2), Normalization::SymmetricClip { cap: 1000.0 });
        assert_eq!(out[[0, 0]], 1.0);
        assert_eq!(out[[1, 1]], -0.5);
    }

    #[test]
    fn nan_pixels_become_zero() {
        let mut img = Array2::from_elem((3, 3), 1.0f32);
        img[[1, 1]] = f32::NAN;
        img[[0, 2]] = f32::INFINITY;
        let (out, scaling) = preprocess(&img, (3, 3), Normalization::MinMax);
        assert_eq!(scaling.raw_min, 0.0);
        assert_eq!(out[[1, 1]], 0.0);
        assert_eq!(out[[0, 0]], 1.0);
    }

    #[test]
    fn large_frame_downsamples() {
        let img = Array2::from_shape_fn((1024, 1024), |(r, c)| ((r * 31 + c * 17) % 997) as f32 - 300.0);
        let (out, _) = preprocess(&img, (256, 256), Normalization::MinMax);
        assert_eq!(out.dim(), (256, 256));
        assert!(out.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn resize_preserves_linear_ramps() {
        let img = Array2::from_shape_fn((8, 8), |(_, c)| c as f32);
        let out = resize_bilinear(&img, 8, 16);
        // interior output columns sample the ramp at (c + 0.5) / 2 - 0.5
        assert!((out[[3, 5]] - 2.25).abs() < 1e-6);
    }

    #[test]
    fn tensor_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e/C2/0.f32");
        let data = Array2::from_shape_fn((3, 4), |(r, c)| r as f32 - c as f32 * 0.25);
        let sidecar = TensorSidecar {
            shape: [3, 4],
            dtype: "float32".into(),
            byte_order: "little".into(),
            observation_time: DateTime::parse_from_rfc3339("2002-09-17T08:30:00Z").unwrap().with_timezone(&Utc),
            base_time: None,
            scaling: Scaling { target_shape: [3, 4], normalization: Normalization::MinMax, raw_min: 0.0, raw_max: 1.0 },
        };
        write_tensor(&path, &data, &sidecar).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 48);
        let (back, meta) = read_tensor(&path).unwrap();
        assert_eq!(back, data);
        assert_eq!(meta, sidecar);
    }

    proptest! {
        #[test]
        fn preprocess_is_shape_total(
            rows in 1usize..40, cols in 1usize..40,
            seed in any::<u64>(),
            mdi in any::<bool>(),
        ) {
            let img = Array2::from_shape_fn((rows, cols), |(r, c)| {
                let x = (seed ^ ((r * 977 + c * 131) as u64)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                (x >> 40) as f32 - 8000.0
            });
            let norm = if mdi { Normalization::SymmetricClip { cap: 1000.0 } } else { Normalization::MinMax };
            let (out, _) = preprocess(&img, (16, 12), norm);
            prop_assert_eq!(out.dim(), (16, 12));
            let (lo, hi) = if mdi { (-1.0, 1.0) } else { (0.0, 1.0) };
            prop_assert!(out.iter().all(|v| v.is_finite() && *v >= lo && *v <= hi));
            let (again, _) = preprocess(&img, (16, 12), norm);
            prop_assert_eq!(out, again);
        }
    }
}
