//! Toolkit for anatomy-constrained, progressively trained left-atrial scar
//! segmentation on 3D LGE-like volumes.
//!
//! Modules, roughly bottom-up:
//! - [`volume`]: volumes, NIfTI-1 I/O, resampling, cropping, z-score, patches
//! - [`edt`]: exact anisotropic Euclidean distance transform
//! - [`anatomy`]: LA wall band, spatial weight map, alpha ramp
//! - [`loss`]: Dice / CE / DiceCE and the wall-weighted scar loss
//! - [`augment`]: stochastic on-the-fly augmentation pipeline
//! - [`metrics`]: Dice score, Hausdorff and average surface distance
//! - [`phantom`]: procedural LGE-like phantoms
//! - [`micronet`]: dual-decoder 3D network with manual backprop and AdamW
//! - [`trainer`]: three-stage training, early stopping, cross-validation

pub mod anatomy;
pub mod augment;
pub mod config;
pub mod edt;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod micronet;
pub mod phantom;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Volume, VolumeKind};
