//! Dense 3D volumes, maximum-intensity projections and on-disk formats.
//!
//! Voxels are stored x-fastest, the same order as a NIfTI payload:
//! `index = x + nx * (y + ny * z)`. Every other module uses this layout.

mod image;
mod nifti;
mod raw;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use image::quantize;
pub use image::{mip, overlay_mask, write_mip_png, write_rgb_png, Image2D, RgbImage};
pub use nifti::{read_nifti, read_nifti_with_info, write_nifti, NiftiDatatype, NiftiInfo, VolumeHeaderInfo};
pub use raw::{read_raw, sidecar_path, write_raw};

/// What the voxel values of a volume mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeKind {
    Intensity,
    BinaryMask,
    Probability,
}

impl VolumeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VolumeKind::Intensity => "intensity",
            VolumeKind::BinaryMask => "binary-mask",
            VolumeKind::Probability => "probability",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "intensity" => Some(VolumeKind::Intensity),
            "binary-mask" => Some(VolumeKind::BinaryMask),
            "probability" => Some(VolumeKind::Probability),
            _ => None,
        }
    }
}

/// Projection axis for MIPs and slicing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(format!("unknown axis `{other}` (expected x, y or z)")),
        }
    }
}

/// Immutable scalar volume with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
    kind: VolumeKind,
}

impl Volume3D {
    /// Validates every invariant: positive dims and spacing, matching data
    /// length, and value domain for masks and probabilities.
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>, kind: VolumeKind) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidVolume(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!("spacing must be positive, got {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::InvalidVolume(format!("data length {} does not match dims {dims:?} ({n} voxels)", data.len())));
        }
        match kind {
            VolumeKind::BinaryMask => {
                if let Some(v) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidVolume(format!("binary mask holds value {v}")));
                }
            }
            VolumeKind::Probability => {
                if let Some(v) = data.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::InvalidVolume(format!("probability volume holds value {v}")));
                }
            }
            VolumeKind::Intensity => {}
        }
        Ok(Volume3D { dims, spacing, data, kind })
    }

    /// Isotropic unit-spacing volume.
    pub fn from_data(dims: [usize; 3], data: Vec<f32>, kind: VolumeKind) -> Result<Self> {
        Self::new(dims, [1.0; 3], data, kind)
    }

    pub fn zeros(dims: [usize; 3], kind: VolumeKind) -> Result<Self> {
        Self::from_data(dims, vec![0.0; dims.iter().product()], kind)
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: [usize; 3], kind: VolumeKind, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::from_data(dims, data, kind)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Same geometry, new values and kind.
    pub fn with_data(&self, data: Vec<f32>, kind: VolumeKind) -> Result<Self> {
        Self::new(self.dims, self.spacing, data, kind)
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidVolume(format!("spacing must be positive, got {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    /// Binary mask `value >= threshold`.
    pub fn threshold(&self, threshold: f32) -> Volume3D {
        let data = self.data.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect();
        Volume3D { dims: self.dims, spacing: self.spacing, data, kind: VolumeKind::BinaryMask }
    }

    /// Copies the box `[origin, origin + size)` out of the volume.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Volume3D> {
        for a in 0..3 {
            if origin[a] + size[a] > self.dims[a] || size[a] == 0 {
                return Err(Error::InvalidVolume(format!("crop {origin:?}+{size:?} outside volume {:?}", self.dims)));
            }
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for z in 0..size[2] {
            for y in 0..size[1] {
                let start = self.index(origin[0], origin[1] + y, origin[2] + z);
                data.extend_from_slice(&self.data[start..start + size[0]]);
            }
        }
        Ok(Volume3D { dims: size, spacing: self.spacing, data, kind: self.kind })
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Reads a NIfTI (`.nii`, `.nii.gz`) or raw-with-sidecar volume, chosen by file name.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let name = path.to_string_lossy();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        read_nifti(path)
    } else {
        read_raw(path)
    }
}
