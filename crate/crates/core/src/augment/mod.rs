//! Stochastic on-the-fly augmentation.
//!
//! A pipeline is an ordered list of eight transforms, each with an
//! application probability and parameter ranges. One seeded generator drives
//! everything: for each transform in order a gate `u ~ U(0, 1)` is drawn and
//! the transform is applied when `u < probability`, with its parameters drawn
//! uniformly from the configured ranges. Spatial transforms (elastic,
//! rotation, zoom) warp the image trilinearly and the labels with nearest
//! neighbour; intensity transforms touch the image only.
//!
//! Sampling is split from application ([`AugPipeline::sample_plan`] /
//! [`apply_plan`]) so the random draws do not depend on the volume size.

mod intensity;
mod spatial;

pub use intensity::{bias_field, gaussian_smooth, t_bias, t_blur, t_contrast, t_noise, t_shift};
pub use spatial::{elastic_field, t_elastic, t_rotation, t_rotation_3d, t_zoom, warp};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Range { lo: v, hi: v }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi {
            Ok(())
        } else {
            Err(Error::Config(format!("{what}: invalid range [{}, {}]", self.lo, self.hi)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Bias,
    Elastic,
    Rotation,
    Zoom,
    Blur,
    Contrast,
    Shift,
    Noise,
}

impl TransformKind {
    pub const ALL: [TransformKind; 8] = [
        TransformKind::Bias,
        TransformKind::Elastic,
        TransformKind::Rotation,
        TransformKind::Zoom,
        TransformKind::Blur,
        TransformKind::Contrast,
        TransformKind::Shift,
        TransformKind::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Bias => "bias",
            TransformKind::Elastic => "elastic",
            TransformKind::Rotation => "rotation",
            TransformKind::Zoom => "zoom",
            TransformKind::Blur => "blur",
            TransformKind::Contrast => "contrast",
            TransformKind::Shift => "shift",
            TransformKind::Noise => "noise",
        }
    }

    pub fn is_spatial(self) -> bool {
        matches!(
            self,
            TransformKind::Elastic | TransformKind::Rotation | TransformKind::Zoom
        )
    }

    fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown transform {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationAxes {
    /// About the slice axis only (rotation in the x-y plane).
    InPlane,
    /// Independent angles about all three axes.
    ThreeAxis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TransformParams {
    /// Polynomial log-field of total degree `order`; coefficients are drawn
    /// from `U(-c, c)` with the magnitude `c` drawn from `coeff_scale`.
    Bias { coeff_scale: Range, order: u32 },
    /// Gaussian smoothing `sigma` (voxels) and per-axis peak displacement.
    Elastic {
        sigma: Range,
        amp_xy: Range,
        amp_z: Range,
    },
    Rotation { degrees: Range, axes: RotationAxes },
    Zoom { factor: Range },
    Blur { sigma: Range },
    Contrast { gamma: Range },
    Shift { delta: Range },
    Noise { mu: f64, sigma: f64 },
}

impl TransformParams {
    pub fn kind(&self) -> TransformKind {
        match self {
            TransformParams::Bias { .. } => TransformKind::Bias,
            TransformParams::Elastic { .. } => TransformKind::Elastic,
            TransformParams::Rotation { .. } => TransformKind::Rotation,
            TransformParams::Zoom { .. } => TransformKind::Zoom,
            TransformParams::Blur { .. } => TransformKind::Blur,
            TransformParams::Contrast { .. } => TransformKind::Contrast,
            TransformParams::Shift { .. } => TransformKind::Shift,
            TransformParams::Noise { .. } => TransformKind::Noise,
        }
    }

    /// Default ranges for each transform.
    pub fn default_for(kind: TransformKind) -> Self {
        match kind {
            TransformKind::Bias => TransformParams::Bias {
                coeff_scale: Range::new(0.02, 0.06),
                order: 3,
            },
            TransformKind::Elastic => TransformParams::Elastic {
                sigma: Range::new(3.0, 5.0),
                amp_xy: Range::new(3.0, 6.0),
                amp_z: Range::new(2.0, 5.0),
            },
            TransformKind::Rotation => TransformParams::Rotation {
                degrees: Range::new(-15.0, 15.0),
                axes: RotationAxes::InPlane,
            },
            TransformKind::Zoom => TransformParams::Zoom {
                factor: Range::new(0.9, 1.1),
            },
            TransformKind::Blur => TransformParams::Blur {
                sigma: Range::new(0.5, 1.5),
            },
            TransformKind::Contrast => TransformParams::Contrast {
                gamma: Range::new(0.8, 1.3),
            },
            TransformKind::Shift => TransformParams::Shift {
                delta: Range::new(-0.1, 0.1),
            },
            TransformKind::Noise => TransformParams::Noise {
                mu: 0.0,
                sigma: 0.02,
            },
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Sampled {
        match *self {
            TransformParams::Bias { coeff_scale, order } => {
                let c = coeff_scale.sample(rng);
                let n = monomial_count(order);
                let coeffs = (0..n)
                    .map(|_| if c == 0.0 { 0.0 } else { rng.random_range(-c..=c) })
                    .collect();
                Sampled::Bias { order, coeffs }
            }
            TransformParams::Elastic {
                sigma,
                amp_xy,
                amp_z,
            } => Sampled::Elastic {
                sigma: sigma.sample(rng),
                amp: [amp_xy.sample(rng), amp_xy.sample(rng), amp_z.sample(rng)],
                seed: rng.random(),
            },
            TransformParams::Rotation { degrees, axes } => {
                let angles = match axes {
                    RotationAxes::InPlane => [0.0, 0.0, degrees.sample(rng)],
                    RotationAxes::ThreeAxis => {
                        [degrees.sample(rng), degrees.sample(rng), degrees.sample(rng)]
                    }
                };
                Sampled::Rotation { degrees: angles }
            }
            TransformParams::Zoom { factor } => Sampled::Zoom {
                factor: factor.sample(rng),
            },
            TransformParams::Blur { sigma } => Sampled::Blur {
                sigma: sigma.sample(rng),
            },
            TransformParams::Contrast { gamma } => Sampled::Contrast {
                gamma: gamma.sample(rng),
            },
            TransformParams::Shift { delta } => Sampled::Shift {
                delta: delta.sample(rng),
            },
            TransformParams::Noise { mu, sigma } => Sampled::Noise {
                mu,
                sigma,
                seed: rng.random(),
            },
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            TransformParams::Bias { coeff_scale, .. } => coeff_scale.validate("bias.coeff"),
            TransformParams::Elastic {
                sigma,
                amp_xy,
                amp_z,
            } => {
                sigma.validate("elastic.sigma")?;
                amp_xy.validate("elastic.amp_xy")?;
                amp_z.validate("elastic.amp_z")?;
                if sigma.lo < 0.0 || amp_xy.lo < 0.0 || amp_z.lo < 0.0 {
                    return Err(Error::Config("elastic parameters must be >= 0".into()));
                }
                Ok(())
            }
            TransformParams::Rotation { degrees, .. } => degrees.validate("rotation.degrees"),
            TransformParams::Zoom { factor } => {
                factor.validate("zoom.factor")?;
                if factor.lo <= 0.0 {
                    return Err(Error::Config("zoom.factor must be > 0".into()));
                }
                Ok(())
            }
            TransformParams::Blur { sigma } => {
                sigma.validate("blur.sigma")?;
                if sigma.lo < 0.0 {
                    return Err(Error::Config("blur.sigma must be >= 0".into()));
                }
                Ok(())
            }
            TransformParams::Contrast { gamma } => {
                gamma.validate("contrast.gamma")?;
                if gamma.lo <= 0.0 {
                    return Err(Error::Config("contrast.gamma must be > 0".into()));
                }
                Ok(())
            }
            TransformParams::Shift { delta } => delta.validate("shift.delta"),
            TransformParams::Noise { mu, sigma } => {
                if mu.is_finite() && sigma.is_finite() && *sigma >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config("noise: mu finite and sigma >= 0 required".into()))
                }
            }
        }
    }
}

/// Number of monomials x^i y^j z^k with i + j + k <= order.
pub(crate) fn monomial_count(order: u32) -> usize {
    let d = order as usize;
    (d + 1) * (d + 2) * (d + 3) / 6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub probability: f64,
    pub params: TransformParams,
}

impl TransformSpec {
    pub fn kind(&self) -> TransformKind {
        self.params.kind()
    }

    pub fn default_for(kind: TransformKind) -> Self {
        let probability = match kind {
            TransformKind::Bias => 0.15,
            TransformKind::Elastic => 0.10,
            TransformKind::Rotation => 0.50,
            TransformKind::Zoom => 0.30,
            TransformKind::Blur => 0.20,
            TransformKind::Contrast => 0.30,
            TransformKind::Shift => 0.50,
            TransformKind::Noise => 0.20,
        };
        TransformSpec {
            probability,
            params: TransformParams::default_for(kind),
        }
    }
}

/// Parameters drawn for one applied transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Sampled {
    Bias { order: u32, coeffs: Vec<f64> },
    Elastic { sigma: f64, amp: [f64; 3], seed: u64 },
    /// Angles about the x, y and z axes, in degrees.
    Rotation { degrees: [f64; 3] },
    Zoom { factor: f64 },
    Blur { sigma: f64 },
    Contrast { gamma: f64 },
    Shift { delta: f64 },
    Noise { mu: f64, sigma: f64, seed: u64 },
}

impl Sampled {
    pub fn kind(&self) -> TransformKind {
        match self {
            Sampled::Bias { .. } => TransformKind::Bias,
            Sampled::Elastic { .. } => TransformKind::Elastic,
            Sampled::Rotation { .. } => TransformKind::Rotation,
            Sampled::Zoom { .. } => TransformKind::Zoom,
            Sampled::Blur { .. } => TransformKind::Blur,
            Sampled::Contrast { .. } => TransformKind::Contrast,
            Sampled::Shift { .. } => TransformKind::Shift,
            Sampled::Noise { .. } => TransformKind::Noise,
        }
    }

    /// Parameters at which the transform is exactly the identity.
    pub fn is_identity(&self) -> bool {
        match self {
            Sampled::Bias { coeffs, .. } => coeffs.iter().all(|&c| c == 0.0),
            Sampled::Elastic { amp, .. } => amp.iter().all(|&a| a == 0.0),
            Sampled::Rotation { degrees } => degrees.iter().all(|&a| a == 0.0),
            Sampled::Zoom { factor } => *factor == 1.0,
            Sampled::Blur { sigma } => *sigma == 0.0,
            Sampled::Contrast { gamma } => *gamma == 1.0,
            Sampled::Shift { delta } => *delta == 0.0,
            Sampled::Noise { mu, sigma, .. } => *mu == 0.0 && *sigma == 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugPipeline {
    pub specs: Vec<TransformSpec>,
}

impl Default for AugPipeline {
    fn default() -> Self {
        AugPipeline {
            specs: TransformKind::ALL
                .into_iter()
                .map(TransformSpec::default_for)
                .collect(),
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "order",
    "bias.probability",
    "bias.coeff",
    "bias.order",
    "elastic.probability",
    "elastic.sigma",
    "elastic.amp_xy",
    "elastic.amp_z",
    "rotation.probability",
    "rotation.degrees",
    "rotation.axes",
    "zoom.probability",
    "zoom.factor",
    "blur.probability",
    "blur.sigma",
    "contrast.probability",
    "contrast.gamma",
    "shift.probability",
    "shift.delta",
    "noise.probability",
    "noise.mu",
    "noise.sigma",
];

impl AugPipeline {
    /// A pipeline that never applies anything.
    pub fn disabled() -> Self {
        let mut p = Self::default();
        for s in &mut p.specs {
            s.probability = 0.0;
        }
        p
    }

    pub fn spec(&self, kind: TransformKind) -> Option<&TransformSpec> {
        self.specs.iter().find(|s| s.kind() == kind)
    }

    pub fn spec_mut(&mut self, kind: TransformKind) -> Option<&mut TransformSpec> {
        self.specs.iter_mut().find(|s| s.kind() == kind)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.specs {
            if !(0.0..=1.0).contains(&s.probability) {
                return Err(Error::Config(format!(
                    "{}.probability must be in [0, 1], got {}",
                    s.kind().name(),
                    s.probability
                )));
            }
            s.params.validate()?;
        }
        Ok(())
    }

    /// Default pipeline with overrides from a `key = value` file, e.g.
    /// `rotation.probability = 0.4` or `elastic.sigma = 3, 5`.
    pub fn from_config(kv: &KeyValues) -> Result<Self> {
        kv.ensure_known(CONFIG_KEYS)?;
        let mut p = Self::default();
        if let Some(order) = kv.get_str("order") {
            let kinds = order
                .split(',')
                .map(|s| TransformKind::from_name(s.trim()))
                .collect::<Result<Vec<_>>>()?;
            let mut specs = Vec::with_capacity(kinds.len());
            for k in kinds {
                if specs.iter().any(|s: &TransformSpec| s.kind() == k) {
                    return Err(Error::Config(format!("order lists {} twice", k.name())));
                }
                specs.push(TransformSpec::default_for(k));
            }
            p.specs = specs;
        }
        let range = |key: &str| -> Result<Option<Range>> {
            Ok(kv.get_array::<f64, 2>(key)?.map(|[lo, hi]| Range::new(lo, hi)))
        };
        for spec in &mut p.specs {
            let name = spec.kind().name();
            if let Some(prob) = kv.get::<f64>(&format!("{name}.probability"))? {
                spec.probability = prob;
            }
            match &mut spec.params {
                TransformParams::Bias { coeff_scale, order } => {
                    if let Some(r) = range("bias.coeff")? {
                        *coeff_scale = r;
                    }
                    if let Some(o) = kv.get::<u32>("bias.order")? {
                        *order = o;
                    }
                }
                TransformParams::Elastic {
                    sigma,
                    amp_xy,
                    amp_z,
                } => {
                    if let Some(r) = range("elastic.sigma")? {
                        *sigma = r;
                    }
                    if let Some(r) = range("elastic.amp_xy")? {
                        *amp_xy = r;
                    }
                    if let Some(r) = range("elastic.amp_z")? {
                        *amp_z = r;
                    }
                }
                TransformParams::Rotation { degrees, axes } => {
                    if let Some(r) = range("rotation.degrees")? {
                        *degrees = r;
                    }
                    match kv.get_str("rotation.axes") {
                        None => {}
                        Some("inplane") => *axes = RotationAxes::InPlane,
                        Some("3d") => *axes = RotationAxes::ThreeAxis,
                        Some(other) => {
                            return Err(Error::Config(format!(
                                "rotation.axes must be inplane or 3d, got {other:?}"
                            )))
                        }
                    }
                }
                TransformParams::Zoom { factor } => {
                    if let Some(r) = range("zoom.factor")? {
                        *factor = r;
                    }
                }
                TransformParams::Blur { sigma } => {
                    if let Some(r) = range("blur.sigma")? {
                        *sigma = r;
                    }
                }
                TransformParams::Contrast { gamma } => {
                    if let Some(r) = range("contrast.gamma")? {
                        *gamma = r;
                    }
                }
                TransformParams::Shift { delta } => {
                    if let Some(r) = range("shift.delta")? {
                        *delta = r;
                    }
                }
                TransformParams::Noise { mu, sigma } => {
                    if let Some(v) = kv.get::<f64>("noise.mu")? {
                        *mu = v;
                    }
                    if let Some(v) = kv.get::<f64>("noise.sigma")? {
                        *sigma = v;
                    }
                }
            }
        }
        p.validate()?;
        Ok(p)
    }

    /// Draws gates and parameters for one application. Returns the applied
    /// transforms in pipeline order.
    pub fn sample_plan(&self, seed: u64) -> Vec<Sampled> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plan = Vec::new();
        for spec in &self.specs {
            let gate: f64 = rng.random();
            if gate < spec.probability {
                plan.push(spec.params.sample(&mut rng));
            }
        }
        plan
    }

    pub fn apply(&self, img: &Volume, labels: &[Volume], seed: u64) -> Result<Augmented> {
        let plan = self.sample_plan(seed);
        let (image, labels) = apply_plan(img, labels, &plan)?;
        Ok(Augmented {
            image,
            labels,
            applied: plan,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: Volume,
    pub labels: Vec<Volume>,
    pub applied: Vec<Sampled>,
}

/// Runs `pipeline` on an image and its companion labels.
pub fn apply_pipeline(
    pipeline: &AugPipeline,
    img: &Volume,
    labels: &[Volume],
    seed: u64,
) -> Result<Augmented> {
    pipeline.apply(img, labels, seed)
}

/// Applies pre-sampled transforms in order.
pub fn apply_plan(img: &Volume, labels: &[Volume], plan: &[Sampled]) -> Result<(Volume, Vec<Volume>)> {
    img.ensure_kind(VolumeKind::Intensity, "augment image")?;
    for l in labels {
        img.ensure_same_grid(l, "augment labels")?;
        l.ensure_kind(VolumeKind::Label, "augment labels")?;
    }
    let mut img = img.clone();
    let mut labels = labels.to_vec();
    for step in plan {
        if step.is_identity() {
            continue;
        }
        match step {
            Sampled::Bias { order, coeffs } => img = t_bias(&img, *order, coeffs)?,
            Sampled::Elastic { sigma, amp, seed } => {
                let (i, l) = t_elastic(&img, &labels, *sigma, *amp, *seed)?;
                img = i;
                labels = l;
            }
            Sampled::Rotation { degrees } => {
                let (i, l) = t_rotation_3d(&img, &labels, *degrees)?;
                img = i;
                labels = l;
            }
            Sampled::Zoom { factor } => {
                let (i, l) = t_zoom(&img, &labels, *factor)?;
                img = i;
                labels = l;
            }
            Sampled::Blur { sigma } => img = t_blur(&img, *sigma)?,
            Sampled::Contrast { gamma } => img = t_contrast(&img, *gamma)?,
            Sampled::Shift { delta } => img = t_shift(&img, *delta)?,
            Sampled::Noise { mu, sigma, seed } => img = t_noise(&img, *mu, *sigma, *seed)?,
        }
    }
    Ok((img, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_order_and_probabilities() {
        let p = AugPipeline::default();
        let kinds: Vec<_> = p.specs.iter().map(|s| s.kind()).collect();
        assert_eq!(kinds, TransformKind::ALL.to_vec());
        let probs: Vec<_> = p.specs.iter().map(|s| s.probability).collect();
        assert_eq!(probs, vec![0.15, 0.10, 0.50, 0.30, 0.20, 0.30, 0.50, 0.20]);
    }

    #[test]
    fn config_overrides() {
        let kv = KeyValues::parse(
            "rotation.probability = 1\nrotation.degrees = -5, 5\nrotation.axes = 3d\nnoise.sigma = 0.05\n",
        )
        .unwrap();
        let p = AugPipeline::from_config(&kv).unwrap();
        let r = p.spec(TransformKind::Rotation).unwrap();
        assert_eq!(r.probability, 1.0);
        assert_eq!(
            r.params,
            TransformParams::Rotation {
                degrees: Range::new(-5.0, 5.0),
                axes: RotationAxes::ThreeAxis
            }
        );
        assert!(AugPipeline::from_config(&KeyValues::parse("rotation.prob = 1").unwrap()).is_err());
        assert!(AugPipeline::from_config(&KeyValues::parse("zoom.probability = 2").unwrap()).is_err());
        let reordered =
            AugPipeline::from_config(&KeyValues::parse("order = noise, bias").unwrap()).unwrap();
        assert_eq!(reordered.specs.len(), 2);
        assert_eq!(reordered.specs[0].kind(), TransformKind::Noise);
    }

    #[test]
    fn bias_has_twenty_cubic_terms() {
        assert_eq!(monomial_count(3), 20);
        assert_eq!(monomial_count(0), 1);
    }

    #[test]
    fn grid_mismatch_errors() {
        let img = Volume::zeros([4, 4, 4], [1.0; 3], VolumeKind::Intensity).unwrap();
        let lab = Volume::zeros([4, 4, 2], [1.0; 3], VolumeKind::Label).unwrap();
        assert!(matches!(
            apply_pipeline(&AugPipeline::default(), &img, &[lab], 0),
            Err(Error::GridMismatch(_))
        ));
    }
}
