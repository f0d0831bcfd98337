//! Procedural LGE-like phantoms: an ellipsoidal LA cavity, a thin wall shell
//! outside it, sparse hyperintense scar patches confined to that shell, and
//! optionally a fraction of scar labels relocated to implausible sites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anatomy::{wall_mask, WallParams};
use crate::augment::bias_field;
use crate::config::KeyValues;
use crate::edt::{edt, DistanceSource};
use crate::error::{Error, Result};
use crate::volume::{Dims, Spacing, Volume, VolumeKind};

pub const BACKGROUND_MEAN: f64 = 0.2;
pub const BLOOD_MEAN: f64 = 0.5;
pub const WALL_MEAN: f64 = 0.35;
pub const SCAR_MEAN: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    /// Cavity ellipsoid semi-axes in mm.
    pub semi_axes: [f64; 3],
    /// Relative per-axis jitter of the semi-axes, drawn in `[-j, j]`.
    pub axis_jitter: f64,
    /// Cavity center jitter in mm, per axis, drawn in `[-j, j]`.
    pub center_jitter: f64,
    /// Thickness of the rendered wall shell outside the cavity, mm.
    pub wall_thickness: f64,
    /// Target scar voxel count as a fraction of all voxels.
    pub scar_fraction: f64,
    /// Inclusive range of the number of scar patches.
    pub patch_count: [usize; 2],
    /// Relative patch sizes are drawn from this range and normalized so the
    /// patches add up to the target count.
    pub patch_weight: [f64; 2],
    pub noise_std: f64,
    /// Scale of the cubic polynomial coefficients of the multiplicative bias.
    pub bias_strength: f64,
    /// Fraction of scar voxels placed outside the wall band instead.
    pub implausible_fraction: f64,
    pub implausible_clusters: usize,
    /// Rendering of implausible scar: intensity moves this fraction of the
    /// way from the underlying tissue mean to the scar mean (0 = label only).
    pub implausible_contrast: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [96, 96, 24],
            spacing: [0.625, 0.625, 2.5],
            semi_axes: [18.0, 15.0, 20.0],
            axis_jitter: 0.1,
            center_jitter: 2.0,
            wall_thickness: 2.0,
            scar_fraction: 0.0069,
            patch_count: [3, 6],
            patch_weight: [0.5, 1.5],
            noise_std: 0.03,
            bias_strength: 0.05,
            implausible_fraction: 0.0,
            implausible_clusters: 2,
            implausible_contrast: 1.0,
        }
    }
}

const KEYS: &[&str] = &[
    "dims",
    "spacing",
    "semi_axes",
    "axis_jitter",
    "center_jitter",
    "wall_thickness",
    "scar_fraction",
    "patch_count",
    "patch_weight",
    "noise_std",
    "bias_strength",
    "implausible_fraction",
    "implausible_clusters",
    "implausible_contrast",
];

impl PhantomSpec {
    /// Defaults overridden by `key = value` entries (arrays comma-separated).
    pub fn from_config(kv: &KeyValues) -> Result<Self> {
        kv.ensure_known(KEYS)?;
        let mut s = Self::default();
        if let Some(v) = kv.get_array("dims")? {
            s.dims = v;
        }
        if let Some(v) = kv.get_array("spacing")? {
            s.spacing = v;
        }
        if let Some(v) = kv.get_array("semi_axes")? {
            s.semi_axes = v;
        }
        if let Some(v) = kv.get_array("patch_count")? {
            s.patch_count = v;
        }
        if let Some(v) = kv.get_array("patch_weight")? {
            s.patch_weight = v;
        }
        let scalars: [(&str, &mut f64); 8] = [
            ("axis_jitter", &mut s.axis_jitter),
            ("center_jitter", &mut s.center_jitter),
            ("wall_thickness", &mut s.wall_thickness),
            ("scar_fraction", &mut s.scar_fraction),
            ("noise_std", &mut s.noise_std),
            ("bias_strength", &mut s.bias_strength),
            ("implausible_fraction", &mut s.implausible_fraction),
            ("implausible_contrast", &mut s.implausible_contrast),
        ];
        for (key, slot) in scalars {
            if let Some(v) = kv.get::<f64>(key)? {
                *slot = v;
            }
        }
        if let Some(v) = kv.get("implausible_clusters")? {
            s.implausible_clusters = v;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dims.iter().any(|&d| d == 0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("bad grid {:?} / {:?}", self.dims, self.spacing));
        }
        if self.semi_axes.iter().any(|&a| !(a > 0.0)) {
            return bad(format!("semi_axes must be positive, got {:?}", self.semi_axes));
        }
        if !(0.0..1.0).contains(&self.axis_jitter) || !(self.center_jitter >= 0.0) {
            return bad("jitter must be non-negative (axis_jitter < 1)".into());
        }
        if !(self.wall_thickness > 0.0) {
            return bad(format!("wall_thickness must be > 0, got {}", self.wall_thickness));
        }
        if !(0.0..1.0).contains(&self.scar_fraction) {
            return bad(format!("scar_fraction must be in [0, 1), got {}", self.scar_fraction));
        }
        if self.patch_count[0] == 0 || self.patch_count[0] > self.patch_count[1] {
            return bad(format!("bad patch_count {:?}", self.patch_count));
        }
        if !(self.patch_weight[0] > 0.0 && self.patch_weight[0] <= self.patch_weight[1]) {
            return bad(format!("bad patch_weight {:?}", self.patch_weight));
        }
        if !(self.noise_std >= 0.0 && self.bias_strength >= 0.0) {
            return bad("noise_std and bias_strength must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.implausible_fraction) || self.implausible_clusters == 0 {
            return bad("implausible_fraction must be in [0, 1] with >= 1 cluster".into());
        }
        if !(0.0..=1.0).contains(&self.implausible_contrast) {
            return bad(format!("implausible_contrast must be in [0, 1], got {}", self.implausible_contrast));
        }
        Ok(())
    }

    pub fn target_scar_count(&self) -> usize {
        let n: usize = self.dims.iter().product();
        (self.scar_fraction * n as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Volume,
    pub la: Volume,
    pub scar: Volume,
}

fn dist2(a: [usize; 3], b: [usize; 3], s: Spacing) -> f64 {
    (0..3)
        .map(|k| ((a[k] as f64 - b[k] as f64) * s[k]).powi(2))
        .sum()
}

/// Grows `count` voxels out of `sites` around `seed`, nearest first, skipping
/// voxels already taken.
fn grow_patch(
    sites: &[usize],
    taken: &mut [bool],
    seed: usize,
    count: usize,
    dims: Dims,
    spacing: Spacing,
) -> usize {
    let c = coords(seed, dims);
    let mut order: Vec<(f64, usize)> = sites
        .iter()
        .filter(|&&i| !taken[i])
        .map(|&i| (dist2(coords(i, dims), c, spacing), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut added = 0;
    for &(_, i) in order.iter().take(count) {
        taken[i] = true;
        added += 1;
    }
    added
}

fn coords(i: usize, d: Dims) -> [usize; 3] {
    [i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1])]
}

/// Generates one phantom. Deterministic given `(spec, seed)`.
pub fn generate(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = spec.dims;
    let sp = spec.spacing;
    let n: usize = dims.iter().product();

    let extent: Vec<f64> = (0..3).map(|k| dims[k] as f64 * sp[k]).collect();
    let mut center = [0.0; 3];
    let mut axes = [0.0; 3];
    for k in 0..3 {
        center[k] = (dims[k] as f64 - 1.0) * sp[k] / 2.0
            + rng.random_range(-spec.center_jitter..=spec.center_jitter);
        axes[k] = spec.semi_axes[k] * (1.0 + rng.random_range(-spec.axis_jitter..=spec.axis_jitter));
        let reach = axes[k] + spec.wall_thickness;
        if center[k] - reach < 0.0 || center[k] + reach > extent[k] - sp[k] {
            return Err(Error::Infeasible(format!(
                "cavity with semi-axis {:.2} mm plus wall does not fit axis {k} ({:.2} mm)",
                axes[k], extent[k]
            )));
        }
    }

    let la = Volume::label_from_fn(dims, sp, |x, y, z| {
        let p = [x, y, z];
        (0..3)
            .map(|k| ((p[k] as f64 * sp[k] - center[k]) / axes[k]).powi(2))
            .sum::<f64>()
            <= 1.0
    })?;
    if la.count_nonzero() == 0 {
        return Err(Error::Infeasible("cavity contains no voxel".into()));
    }
    let to_la = edt(&la, DistanceSource::ToForeground)?;
    let in_la = |i: usize| la.data()[i] != 0.0;
    let shell: Vec<bool> = (0..n)
        .map(|i| !in_la(i) && to_la.values()[i] <= spec.wall_thickness)
        .collect();
    // scar must also sit inside the default outward wall band
    let band_limit = spec.wall_thickness.min(WallParams::default().delta_out);
    let band: Vec<usize> = (0..n)
        .filter(|&i| !in_la(i) && to_la.values()[i] <= band_limit)
        .collect();

    let target = spec.target_scar_count();
    let n_implausible = (spec.implausible_fraction * target as f64).round() as usize;
    let n_plausible = target - n_implausible;
    if n_plausible > band.len() {
        return Err(Error::Infeasible(format!(
            "scar target of {n_plausible} voxels exceeds the {}-voxel wall band",
            band.len()
        )));
    }

    let mut scar = vec![false; n];
    let n_patches = rng.random_range(spec.patch_count[0]..=spec.patch_count[1]);
    let weights: Vec<f64> = (0..n_patches)
        .map(|_| rng.random_range(spec.patch_weight[0]..=spec.patch_weight[1]))
        .collect();
    let total_w: f64 = weights.iter().sum();
    let mut placed = 0;
    for (p, w) in weights.iter().enumerate() {
        let want = if p + 1 == n_patches {
            n_plausible - placed
        } else {
            ((w / total_w) * n_plausible as f64).round() as usize
        }
        .min(n_plausible - placed);
        if want == 0 {
            continue;
        }
        let free: Vec<usize> = band.iter().copied().filter(|&i| !scar[i]).collect();
        let seed_voxel = free[rng.random_range(0..free.len())];
        placed += grow_patch(&free, &mut scar, seed_voxel, want, dims, sp);
    }

    let plausible = scar.clone();
    if n_implausible > 0 {
        let wall = wall_mask(&la, &WallParams::default())?;
        let sites: Vec<usize> = (0..n).filter(|&i| wall.data()[i] == 0.0).collect();
        if n_implausible > sites.len() {
            return Err(Error::Infeasible("no room for implausible scar".into()));
        }
        let k = spec.implausible_clusters.min(n_implausible);
        let mut left = n_implausible;
        for c in 0..k {
            let want = left / (k - c);
            let free: Vec<usize> = sites.iter().copied().filter(|&i| !scar[i]).collect();
            let seed_voxel = free[rng.random_range(0..free.len())];
            left -= grow_patch(&free, &mut scar, seed_voxel, want, dims, sp);
        }
    }

    let normal = Normal::new(0.0, spec.noise_std)
        .map_err(|e| Error::invalid(format!("noise_std: {e}")))?;
    let coeffs: Vec<f64> = (0..crate::augment::monomial_count(3))
        .map(|_| rng.random_range(-1.0..=1.0) * spec.bias_strength)
        .collect();
    let bias = bias_field(dims, 3, &coeffs)?;
    let image: Vec<f64> = (0..n)
        .map(|i| {
            let tissue = if in_la(i) {
                BLOOD_MEAN
            } else if shell[i] {
                WALL_MEAN
            } else {
                BACKGROUND_MEAN
            };
            let mean = if plausible[i] {
                SCAR_MEAN
            } else if scar[i] {
                tissue + spec.implausible_contrast * (SCAR_MEAN - tissue)
            } else {
                tissue
            };
            (mean + normal.sample(&mut rng)) * bias[i]
        })
        .collect();

    let scar = la.with_data(scar.iter().map(|&s| s as u8 as f64).collect(), VolumeKind::Label)?;
    let image = Volume::new(dims, sp, image, VolumeKind::Intensity)?;
    Ok(Phantom { image, la, scar })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::plausibility_audit;

    fn small() -> PhantomSpec {
        PhantomSpec {
            dims: [32, 32, 8],
            spacing: [1.25, 1.25, 2.5],
            semi_axes: [10.0, 8.0, 5.0],
            center_jitter: 1.0,
            wall_thickness: 2.5,
            scar_fraction: 0.015,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn plausible_scar_stays_in_wall() {
        for seed in 0..3 {
            let p = generate(&small(), seed).unwrap();
            let wall = wall_mask(&p.la, &WallParams::default()).unwrap();
            let a = plausibility_audit(&p.scar, &wall).unwrap();
            assert_eq!(a.outside_count, 0);
            assert_eq!(p.scar.count_nonzero(), small().target_scar_count());
            let overlap = p
                .scar
                .data()
                .iter()
                .zip(p.la.data())
                .filter(|(s, l)| **s != 0.0 && **l != 0.0)
                .count();
            assert_eq!(overlap, 0);
        }
    }

    #[test]
    fn implausible_fraction_is_outside() {
        let spec = PhantomSpec {
            implausible_fraction: 0.1,
            ..small()
        };
        let p = generate(&spec, 4).unwrap();
        let wall = wall_mask(&p.la, &WallParams::default()).unwrap();
        let a = plausibility_audit(&p.scar, &wall).unwrap();
        let want = (0.1 * spec.target_scar_count() as f64).round() as usize;
        assert_eq!(a.outside_count, want);
    }

    #[test]
    fn deterministic_and_ordered() {
        let a = generate(&small(), 11).unwrap();
        assert_eq!(a, generate(&small(), 11).unwrap());
        assert_ne!(a.image, generate(&small(), 12).unwrap().image);
        let mean_where = |pred: &dyn Fn(usize) -> bool| {
            let v: Vec<f64> = (0..a.image.len()).filter(|&i| pred(i)).map(|i| a.image.data()[i]).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let scar = mean_where(&|i| a.scar.data()[i] != 0.0);
        let blood = mean_where(&|i| a.la.data()[i] != 0.0);
        assert!(scar > blood && blood > BACKGROUND_MEAN);
    }

    #[test]
    fn default_scar_fraction() {
        let spec = PhantomSpec::default();
        let p = generate(&spec, 0).unwrap();
        let f = p.scar.count_nonzero() as f64 / p.scar.len() as f64;
        assert!((0.0048..=0.0090).contains(&f), "{f}");
    }

    #[test]
    fn infeasible_specs_error() {
        let too_much = PhantomSpec {
            scar_fraction: 0.5,
            ..small()
        };
        assert!(matches!(generate(&too_much, 0), Err(Error::Infeasible(_))));
        let too_big = PhantomSpec {
            semi_axes: [30.0, 8.0, 5.5],
            ..small()
        };
        assert!(matches!(generate(&too_big, 0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn config_overrides() {
        let kv = KeyValues::parse("dims = 32,32,8\nscar_fraction = 0.02\n").unwrap();
        let s = PhantomSpec::from_config(&kv).unwrap();
        assert_eq!(s.dims, [32, 32, 8]);
        assert_eq!(s.scar_fraction, 0.02);
        assert!(PhantomSpec::from_config(&KeyValues::parse("bogus = 1").unwrap()).is_err());
    }
}
