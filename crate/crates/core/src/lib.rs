//! Geoeffectiveness forecasting for Earth-directed coronal mass ejections.
//!
//! Given SOHO LASCO C2, EIT 195 Å and MDI imagery around a CME onset, the
//! pipeline predicts whether the CME will drive a geomagnetic storm
//! (minimum Dst below −50 nT), either as a thresholded class or as a
//! probability.
//!
//! The crate is organised along the data flow:
//!
//! * [`catalog`] parses the ICME list and the LASCO CME catalog and labels events.
//! * [`archive`] fetches raw frames from the SOHO archive into an immutable cache.
//! * [`imaging`] selects per-instrument frame windows, builds base-difference
//!   images and writes the tensor dataset.
//! * [`model`] is the per-image network: backbone adapters, fusion and the head.
//! * [`ensemble`] averages per-image probabilities into event probabilities.
//! * [`training`] holds the weighted loss, splits, folds and the training loop.
//! * [`evaluation`] computes confusion matrices and skill scores.
//! * [`ablation`] runs backbone-removal variants and instrument subsets.
//! * [`synth`] generates labeled synthetic datasets for offline testing.
//! * [`cli`] wires everything into the `geoeff` command.

pub mod ablation;
pub mod archive;
pub mod catalog;
pub mod cli;
pub mod ensemble;
pub mod evaluation;
pub mod imaging;
pub mod model;
pub mod synth;
pub mod training;

mod types;

pub use types::{Instrument, Label};
