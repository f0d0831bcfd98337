//! Dense 3D volumes with physical voxel spacing.
//!
//! Data is stored x-fastest: the linear index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`. Every image, label, weight map and distance
//! field in the crate is a [`Volume`].

mod interp;
pub mod nifti;
mod preprocess;

pub use interp::{sample_nearest, sample_trilinear};
pub use nifti::{read_nifti, write_nifti};
pub use preprocess::{
    center_crop_or_pad, crop_at, extract_patch, patch_origin, resample, zscore, PatchPolicy,
    PatchSpec,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeKind {
    /// Arbitrary real-valued intensities.
    Intensity,
    /// Binary masks with values in {0, 1}.
    Label,
    /// Spatial weights, every value >= 1.
    Weight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f64>,
    kind: VolumeKind,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>, kind: VolumeKind) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::invalid(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::invalid(format!(
                "data length {} does not match dims {dims:?} ({n} voxels)",
                data.len()
            )));
        }
        check_kind(&data, kind)?;
        Ok(Volume {
            dims,
            spacing,
            data,
            kind,
        })
    }

    pub fn zeros(dims: Dims, spacing: Spacing, kind: VolumeKind) -> Result<Self> {
        let fill = if kind == VolumeKind::Weight { 1.0 } else { 0.0 };
        Self::filled(dims, spacing, fill, kind)
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f64, kind: VolumeKind) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, vec![value; n], kind)
    }

    /// Builds a label volume from a boolean predicate over voxel indices.
    pub fn label_from_fn(
        dims: Dims,
        spacing: Spacing,
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(if f(x, y, z) { 1.0 } else { 0.0 });
                }
            }
        }
        Self::new(dims, spacing, data, VolumeKind::Label)
    }

    pub fn intensity_from_fn(
        dims: Dims,
        spacing: Spacing,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, data, VolumeKind::Intensity)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    /// Same dims and spacing.
    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn ensure_same_grid(&self, other: &Volume, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {:?}@{:?} vs {:?}@{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    pub fn ensure_kind(&self, kind: VolumeKind, what: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: expected {kind:?} volume, got {:?}",
                self.kind
            )))
        }
    }

    /// Replaces the voxel values, keeping the grid; validates against `kind`.
    pub fn with_data(&self, data: Vec<f64>, kind: VolumeKind) -> Result<Self> {
        Self::new(self.dims, self.spacing, data, kind)
    }

    /// Reinterprets the voxel values under another kind, validating them.
    pub fn into_kind(self, kind: VolumeKind) -> Result<Self> {
        check_kind(&self.data, kind)?;
        Ok(Volume { kind, ..self })
    }

    /// Binarizes at `threshold` (value >= threshold maps to 1).
    pub fn threshold(&self, threshold: f64) -> Volume {
        let data = self
            .data
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect();
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data,
            kind: VolumeKind::Label,
        }
    }

    /// Number of voxels with value 1 (labels) or nonzero value (otherwise).
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub(crate) fn from_parts_unchecked(
        dims: Dims,
        spacing: Spacing,
        data: Vec<f64>,
        kind: VolumeKind,
    ) -> Self {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        Volume {
            dims,
            spacing,
            data,
            kind,
        }
    }
}

fn check_kind(data: &[f64], kind: VolumeKind) -> Result<()> {
    match kind {
        VolumeKind::Intensity => {
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("non-finite intensity at voxel {i}")));
            }
        }
        VolumeKind::Label => {
            if let Some(i) = data.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::invalid(format!(
                    "label volume has value {} at voxel {i}",
                    data[i]
                )));
            }
        }
        VolumeKind::Weight => {
            if let Some(i) = data.iter().position(|&v| !(v >= 1.0 && v.is_finite())) {
                return Err(Error::invalid(format!(
                    "weight volume has value {} < 1 at voxel {i}",
                    data[i]
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_values() {
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7], VolumeKind::Intensity).is_err());
        assert!(Volume::new([2, 1, 1], [1.0; 3], vec![0.0, 0.5], VolumeKind::Label).is_err());
        assert!(Volume::new([2, 1, 1], [1.0; 3], vec![1.0, 0.5], VolumeKind::Weight).is_err());
        assert!(Volume::new([2, 1, 1], [0.0, 1.0, 1.0], vec![0.0; 2], VolumeKind::Label).is_err());
        assert!(Volume::new([0, 1, 1], [1.0; 3], vec![], VolumeKind::Label).is_err());
    }

    #[test]
    fn index_and_coords_agree() {
        let v = Volume::zeros([3, 4, 5], [1.0; 3], VolumeKind::Intensity).unwrap();
        for i in 0..v.len() {
            let [x, y, z] = v.coords(i);
            assert_eq!(v.index(x, y, z), i);
        }
        assert_eq!(v.index(1, 0, 0), 1);
        assert_eq!(v.index(0, 1, 0), 3);
        assert_eq!(v.index(0, 0, 1), 12);
    }

    #[test]
    fn weight_zeros_are_ones() {
        let w = Volume::zeros([2, 2, 2], [1.0; 3], VolumeKind::Weight).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
    }
}
