//! Wall prior around the LA cavity, the spatial weight map built from it,
//! and the ramp schedule for the weighting strength.

use serde::{Deserialize, Serialize};

use crate::edt::{edt, DistanceSource};
use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

/// Band thicknesses in mm: `delta_in` inside the cavity, `delta_out` outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallParams {
    pub delta_in: f64,
    pub delta_out: f64,
}

impl Default for WallParams {
    fn default() -> Self {
        WallParams {
            delta_in: 3.0,
            delta_out: 2.5,
        }
    }
}

impl WallParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("delta_in", self.delta_in), ("delta_out", self.delta_out)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Linear ramp `alpha(t) = alpha_max * min(1, t / ramp_epochs)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub alpha_max: f64,
    pub ramp_epochs: u32,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule {
            alpha_max: 1.0,
            ramp_epochs: 50,
        }
    }
}

impl AlphaSchedule {
    /// A schedule that never weights (alpha = 0 at every epoch).
    pub fn disabled() -> Self {
        AlphaSchedule {
            alpha_max: 0.0,
            ramp_epochs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_max.is_finite() && self.alpha_max >= 0.0) {
            return Err(Error::invalid(format!("alpha_max must be >= 0, got {}", self.alpha_max)));
        }
        if self.ramp_epochs == 0 {
            return Err(Error::invalid("ramp_epochs must be positive"));
        }
        Ok(())
    }
}

pub fn alpha_at(s: &AlphaSchedule, epoch: u32) -> f64 {
    let ramp = s.ramp_epochs.max(1) as f64;
    (epoch as f64 / ramp).min(1.0) * s.alpha_max
}

/// Builds the wall band: LA voxels within `delta_in` of the background plus
/// background voxels within `delta_out` of the LA, by voxel-center distance.
pub fn wall_mask(la: &Volume, p: &WallParams) -> Result<Volume> {
    la.ensure_kind(VolumeKind::Label, "wall_mask")?;
    p.validate()?;
    let fg = la.count_nonzero();
    if fg == 0 || fg == la.len() {
        return Err(Error::DegenerateMask);
    }
    let to_bg = edt(la, DistanceSource::ToBackground)?;
    let to_la = edt(la, DistanceSource::ToForeground)?;
    let data = la
        .data()
        .iter()
        .zip(to_bg.values().iter().zip(to_la.values()))
        .map(|(&inside, (&d_in, &d_out))| {
            let wall = if inside != 0.0 {
                d_in <= p.delta_in
            } else {
                d_out <= p.delta_out
            };
            if wall {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    la.with_data(data, VolumeKind::Label)
}

/// `W = 1 + alpha * m`.
pub fn weight_map(m: &Volume, alpha: f64) -> Result<Volume> {
    m.ensure_kind(VolumeKind::Label, "weight_map")?;
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    let data = m.data().iter().map(|&v| 1.0 + alpha * v).collect();
    m.with_data(data, VolumeKind::Weight)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub scar_count: usize,
    pub outside_count: usize,
    /// `outside_count / scar_count`, 0 when there is no scar.
    pub outside_fraction: f64,
}

/// Counts scar voxels lying outside the wall band.
pub fn plausibility_audit(scar: &Volume, wall: &Volume) -> Result<AuditReport> {
    scar.ensure_same_grid(wall, "plausibility_audit")?;
    scar.ensure_kind(VolumeKind::Label, "plausibility_audit scar")?;
    wall.ensure_kind(VolumeKind::Label, "plausibility_audit wall")?;
    let mut scar_count = 0;
    let mut outside_count = 0;
    for (&s, &w) in scar.data().iter().zip(wall.data()) {
        if s != 0.0 {
            scar_count += 1;
            if w == 0.0 {
                outside_count += 1;
            }
        }
    }
    let outside_fraction = if scar_count == 0 {
        0.0
    } else {
        outside_count as f64 / scar_count as f64
    };
    Ok(AuditReport {
        scar_count,
        outside_count,
        outside_fraction,
    })
}
