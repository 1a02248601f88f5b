//! Sea-ice / open-water segmentation of Sentinel-1 SAR scenes.
//!
//! The crate covers the full experiment pipeline:
//!
//! * [`scene`] / [`ingest`] — scene ingestion, label rasterization, and the
//!   month-based train/validation/test split manifest.
//! * [`sampler`] — seeded random patch extraction and channel normalization.
//! * [`model`] — the fully-convolutional ResNet18-stem + ASPP network with
//!   random or pretrained-encoder initialization.
//! * [`train`] — masked cross-entropy, Adam with plateau learning-rate decay,
//!   early stopping, best-checkpoint selection, and multi-run experiments.
//! * [`infer`] — single-pass or tiled full-scene class maps and error masks.
//! * [`metrics`] — confusion matrices and the F1/IoU metric families.
//! * [`fixture`] — a procedural synthetic dataset so every command runs
//!   without the real scenes.

pub mod error;
pub mod figures;
pub mod fixture;
pub mod geotiff;
pub mod grid;
pub mod infer;
pub mod ingest;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rasterize;
pub mod sampler;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
