//! Wildfire segmentation over multispectral satellite scenes.
//!
//! The pipeline runs end to end at desk scale: scene ingestion and band
//! selection ([`raster`]), rule-based fire-mask generation with
//! intersection/voting combination ([`firemask`]), patch extraction and
//! seeded augmentation ([`dataset`]), a reverse-mode autodiff core
//! ([`autodiff`]), dilated/strided UNet and reduced-scale transformer
//! segmentation models ([`models`]), dice-loss training with AdamW and a
//! one-cycle schedule ([`train`]), and pixel-level evaluation ([`metrics`]).
//!
//! [`synth`] generates procedural fixture scenes so everything is runnable
//! without external data.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod firemask;
pub mod metrics;
pub mod models;
pub mod raster;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
