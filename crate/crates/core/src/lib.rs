//! Deformation-aware small-vessel segmentation.
//!
//! A Siamese 3D U-Net with multi-scale supervision, trained with a
//! supervised focal-Tversky objective plus a consistency term that asks the
//! network to commute with elastic deformations. Also provides a Frangi
//! vesselness baseline, the patch pipeline, overlap metrics, a synthetic
//! vessel phantom generator, and NIfTI/PNG I/O.

pub mod autodiff;
pub mod checkpoint;
pub mod deformation;
pub mod error;
pub mod fpmode;
pub mod frangi;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod patches;
pub mod phantom;
pub mod rng;
pub mod trainer;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
