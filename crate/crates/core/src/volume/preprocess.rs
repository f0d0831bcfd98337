//! Resampling, cropping, intensity normalization and patch extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::interp::{sample_nearest, sample_trilinear};
use super::{Dims, Spacing, Volume, VolumeKind};

/// Resamples onto `target` spacing, keeping the physical extent.
///
/// Output voxel `j` along an axis samples the input at continuous index
/// `(j + 0.5) * target / spacing - 0.5`, so voxel boundaries of both grids
/// start at the same physical position. Intensities are interpolated
/// trilinearly; labels and weights use nearest neighbour.
pub fn resample(v: &Volume, target: Spacing) -> Result<Volume> {
    if target.iter().any(|&t| !(t.is_finite() && t > 0.0)) {
        return Err(Error::invalid(format!("target spacing must be positive, got {target:?}")));
    }
    let dims = v.dims();
    let spacing = v.spacing();
    let mut out_dims = [0usize; 3];
    let mut ratio = [0.0f64; 3];
    for a in 0..3 {
        out_dims[a] = ((dims[a] as f64 * spacing[a] / target[a]).round() as usize).max(1);
        ratio[a] = target[a] / spacing[a];
    }
    let nearest = v.kind() != VolumeKind::Intensity;
    let mut data = Vec::with_capacity(out_dims.iter().product());
    for z in 0..out_dims[2] {
        let pz = (z as f64 + 0.5) * ratio[2] - 0.5;
        for y in 0..out_dims[1] {
            let py = (y as f64 + 0.5) * ratio[1] - 0.5;
            for x in 0..out_dims[0] {
                let px = (x as f64 + 0.5) * ratio[0] - 0.5;
                let p = [px, py, pz];
                data.push(if nearest {
                    sample_nearest(v, p)
                } else {
                    sample_trilinear(v, p)
                });
            }
        }
    }
    Volume::new(out_dims, target, data, v.kind())
}

/// Copies the block starting at `origin` (may be negative) with size `size`;
/// voxels outside the source are zero (one for weight volumes).
fn copy_block(v: &Volume, origin: [isize; 3], size: Dims) -> Volume {
    let dims = v.dims();
    let fill = if v.kind() == VolumeKind::Weight { 1.0 } else { 0.0 };
    let mut data = vec![fill; size.iter().product()];
    let src = v.data();
    for z in 0..size[2] {
        let sz = origin[2] + z as isize;
        if sz < 0 || sz >= dims[2] as isize {
            continue;
        }
        for y in 0..size[1] {
            let sy = origin[1] + y as isize;
            if sy < 0 || sy >= dims[1] as isize {
                continue;
            }
            let x_lo = (-origin[0]).max(0) as usize;
            let x_hi = ((dims[0] as isize - origin[0]).min(size[0] as isize)).max(0) as usize;
            if x_lo >= x_hi {
                continue;
            }
            let dst_row = size[0] * (y + size[1] * z);
            let src_row = v.index(0, sy as usize, sz as usize);
            let sx0 = (origin[0] + x_lo as isize) as usize;
            data[dst_row + x_lo..dst_row + x_hi]
                .copy_from_slice(&src[src_row + sx0..src_row + sx0 + (x_hi - x_lo)]);
        }
    }
    Volume::from_parts_unchecked(size, v.spacing(), data, v.kind())
}

/// Symmetric crop where the volume is larger than `target`, zero padding
/// where it is smaller. Odd differences put the extra voxel at the high end.
pub fn center_crop_or_pad(v: &Volume, target: Dims) -> Result<Volume> {
    if target.iter().any(|&t| t == 0) {
        return Err(Error::invalid(format!("target dims must be positive, got {target:?}")));
    }
    let dims = v.dims();
    let mut origin = [0isize; 3];
    for a in 0..3 {
        origin[a] = (dims[a] as isize - target[a] as isize).div_euclid(2);
    }
    Ok(copy_block(v, origin, target))
}

/// Crops a block fully contained in the volume.
pub fn crop_at(v: &Volume, origin: [usize; 3], size: Dims) -> Result<Volume> {
    let dims = v.dims();
    for a in 0..3 {
        if size[a] == 0 || origin[a] + size[a] > dims[a] {
            return Err(Error::invalid(format!(
                "block origin {origin:?} size {size:?} does not fit in {dims:?}"
            )));
        }
    }
    Ok(copy_block(
        v,
        [origin[0] as isize, origin[1] as isize, origin[2] as isize],
        size,
    ))
}

/// Zero mean, unit population standard deviation. A (numerically) constant
/// volume maps to all zeros.
pub fn zscore(v: &Volume) -> Result<Volume> {
    v.ensure_kind(VolumeKind::Intensity, "zscore")?;
    if v.len() < 2 {
        return Err(Error::invalid("zscore needs at least 2 voxels"));
    }
    let n = v.len() as f64;
    let mean = v.data().iter().sum::<f64>() / n;
    let var = v.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = mean.abs().max(1.0);
    let data = if std <= 1e-12 * scale {
        vec![0.0; v.len()]
    } else {
        v.data().iter().map(|x| (x - mean) / std).collect()
    };
    v.with_data(data, VolumeKind::Intensity)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchPolicy {
    /// Center on a uniformly chosen foreground voxel of a companion label.
    CenteredOnLabel,
    Fixed([usize; 3]),
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: Dims,
    pub policy: PatchPolicy,
}

impl PatchSpec {
    pub fn new(size: Dims, policy: PatchPolicy) -> Self {
        PatchSpec { size, policy }
    }
}

/// Chooses a patch origin. All randomness comes from `seed`.
pub fn patch_origin(
    dims: Dims,
    spec: &PatchSpec,
    label: Option<&Volume>,
    seed: u64,
) -> Result<[usize; 3]> {
    for a in 0..3 {
        if spec.size[a] == 0 || spec.size[a] > dims[a] {
            return Err(Error::invalid(format!(
                "patch {:?} does not fit in volume {dims:?}",
                spec.size
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_origin = [
        dims[0] - spec.size[0],
        dims[1] - spec.size[1],
        dims[2] - spec.size[2],
    ];
    let random = |rng: &mut ChaCha8Rng| {
        [
            rng.random_range(0..=max_origin[0]),
            rng.random_range(0..=max_origin[1]),
            rng.random_range(0..=max_origin[2]),
        ]
    };
    match spec.policy {
        PatchPolicy::Fixed(origin) => {
            for a in 0..3 {
                if origin[a] > max_origin[a] {
                    return Err(Error::invalid(format!(
                        "fixed origin {origin:?} puts patch {:?} outside {dims:?}",
                        spec.size
                    )));
                }
            }
            Ok(origin)
        }
        PatchPolicy::Random => Ok(random(&mut rng)),
        PatchPolicy::CenteredOnLabel => {
            let label = label.ok_or_else(|| {
                Error::invalid("centered-on-label patch policy needs a companion label")
            })?;
            if label.dims() != dims {
                return Err(Error::GridMismatch(format!(
                    "patch label {:?} vs volume {dims:?}",
                    label.dims()
                )));
            }
            let fg: Vec<usize> = label
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(i, _)| i)
                .collect();
            if fg.is_empty() {
                log::debug!("centered-on-label patch with empty label; using random origin");
                return Ok(random(&mut rng));
            }
            let c = label.coords(fg[rng.random_range(0..fg.len())]);
            let mut origin = [0usize; 3];
            for a in 0..3 {
                let half = spec.size[a] / 2;
                origin[a] = c[a].saturating_sub(half).min(max_origin[a]);
            }
            Ok(origin)
        }
    }
}

/// Extracts a patch from `v`. `label` is the companion label required by
/// [`PatchPolicy::CenteredOnLabel`]. Deterministic given `seed`.
pub fn extract_patch(
    v: &Volume,
    spec: &PatchSpec,
    label: Option<&Volume>,
    seed: u64,
) -> Result<Volume> {
    let origin = patch_origin(v.dims(), spec, label, seed)?;
    crop_at(v, origin, spec.size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: Dims) -> Volume {
        Volume::intensity_from_fn(dims, [1.0; 3], |x, y, z| (x + 10 * y + 100 * z) as f64).unwrap()
    }

    #[test]
    fn resample_identity_and_dims() {
        let v = ramp([4, 4, 4]);
        assert_eq!(resample(&v, [1.0; 3]).unwrap(), v);
        let d = resample(&v, [2.0; 3]).unwrap();
        assert_eq!(d.dims(), [2, 2, 2]);
        assert_eq!(d.spacing(), [2.0; 3]);
        // mean of the 2x2x2 block
        assert!((d.get(0, 0, 0) - (0.5 + 5.0 + 50.0)).abs() < 1e-12);
    }

    #[test]
    fn resample_constant_stays_constant() {
        let v = Volume::filled([10, 9, 7], [1.0, 1.2, 0.8], 4.25, VolumeKind::Intensity).unwrap();
        for target in [[0.625, 0.625, 2.5], [0.3, 2.0, 0.45], [3.0, 3.0, 3.0]] {
            let r = resample(&v, target).unwrap();
            let dev = r.data().iter().map(|x| (x - 4.25).abs()).fold(0.0, f64::max);
            assert!(dev < 1e-6, "max deviation {dev} at {target:?}");
            let back = resample(&r, v.spacing()).unwrap();
            let dev = back.data().iter().map(|x| (x - 4.25).abs()).fold(0.0, f64::max);
            assert!(dev < 1e-6);
        }
    }

    #[test]
    fn resample_labels_stay_binary() {
        let l = Volume::label_from_fn([9, 9, 9], [1.0; 3], |x, y, z| x + y + z < 9).unwrap();
        let r = resample(&l, [0.7, 1.3, 2.1]).unwrap();
        assert_eq!(r.kind(), VolumeKind::Label);
        assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn crop_and_pad() {
        let v = ramp([6, 6, 6]);
        assert_eq!(center_crop_or_pad(&v, [6, 6, 6]).unwrap(), v);
        let c = center_crop_or_pad(&v, [4, 4, 4]).unwrap();
        assert_eq!(c.get(0, 0, 0), v.get(1, 1, 1));
        assert_eq!(c.get(3, 3, 3), v.get(4, 4, 4));

        let small = Volume::filled([2, 2, 2], [1.0; 3], 1.0, VolumeKind::Intensity).unwrap();
        let p = center_crop_or_pad(&small, [4, 4, 4]).unwrap();
        assert_eq!(p.data().iter().sum::<f64>(), 8.0);
        assert_eq!(p.get(0, 0, 0), 0.0);
        assert_eq!(p.get(1, 1, 1), 1.0);
        assert_eq!(p.get(2, 2, 2), 1.0);
        assert_eq!(p.get(3, 3, 3), 0.0);
    }

    #[test]
    fn zscore_examples() {
        let v = Volume::new([2, 1, 1], [1.0; 3], vec![0.0, 2.0], VolumeKind::Intensity).unwrap();
        assert_eq!(zscore(&v).unwrap().data(), &[-1.0, 1.0]);
        let c = Volume::filled([3, 3, 3], [1.0; 3], 7.5, VolumeKind::Intensity).unwrap();
        assert!(zscore(&c).unwrap().data().iter().all(|&x| x == 0.0));
        let l = Volume::zeros([2, 2, 2], [1.0; 3], VolumeKind::Label).unwrap();
        assert!(zscore(&l).is_err());
    }

    #[test]
    fn patch_policies() {
        let v = ramp([8, 8, 8]);
        let whole = PatchSpec::new([8, 8, 8], PatchPolicy::Fixed([0, 0, 0]));
        assert_eq!(extract_patch(&v, &whole, None, 0).unwrap(), v);

        let label = Volume::label_from_fn([8, 8, 8], [1.0; 3], |x, y, z| (x, y, z) == (5, 2, 4))
            .unwrap();
        let spec = PatchSpec::new([4, 4, 4], PatchPolicy::CenteredOnLabel);
        let o = patch_origin([8, 8, 8], &spec, Some(&label), 3).unwrap();
        assert_eq!([o[0] + 2, o[1] + 2, o[2] + 2], [5, 2, 4]);

        // clamped at the low edge
        let corner = Volume::label_from_fn([8, 8, 8], [1.0; 3], |x, y, z| x + y + z == 0).unwrap();
        assert_eq!(patch_origin([8, 8, 8], &spec, Some(&corner), 1).unwrap(), [0, 0, 0]);

        let rnd = PatchSpec::new([3, 5, 2], PatchPolicy::Random);
        let a = extract_patch(&v, &rnd, None, 11).unwrap();
        let b = extract_patch(&v, &rnd, None, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), [3, 5, 2]);

        // empty label falls back to random
        let empty = Volume::zeros([8, 8, 8], [1.0; 3], VolumeKind::Label).unwrap();
        assert!(patch_origin([8, 8, 8], &spec, Some(&empty), 5).is_ok());
        assert!(patch_origin([8, 8, 8], &spec, None, 5).is_err());
        let too_big = PatchSpec::new([9, 4, 4], PatchPolicy::Random);
        assert!(extract_patch(&v, &too_big, None, 0).is_err());
    }
}
