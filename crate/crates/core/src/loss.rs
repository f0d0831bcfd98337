//! Soft Dice, binary cross-entropy, their convex combination, and the
//! wall-weighted scar loss, each with its analytic gradient with respect to
//! the predicted probabilities.
//!
//! All reductions run in voxel order so repeated evaluations are
//! bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// DiceCE evaluated on `W * pred` and `W * gt`.
    Literal,
    /// `W` used as per-voxel weights inside both the Dice and CE sums.
    PerVoxelNormalized,
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(WeightMode::Literal),
            "normalized" | "per-voxel-normalized" => Ok(WeightMode::PerVoxelNormalized),
            other => Err(Error::Config(format!("unknown weight mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Dice share of the DiceCE combination.
    pub lambda: f64,
    /// Dice smoothing constant.
    pub epsilon: f64,
    /// CE probabilities are clamped to `[clamp, 1 - clamp]`.
    pub clamp: f64,
    pub weight_mode: WeightMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.5,
            epsilon: 1e-5,
            clamp: 1e-7,
            weight_mode: WeightMode::PerVoxelNormalized,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.clamp > 0.0 && self.clamp < 0.5) {
            return Err(Error::invalid(format!("clamp must be in (0, 0.5), got {}", self.clamp)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    /// dL/d(pred) on the prediction grid.
    pub grad: Volume,
}

fn report(like: &Volume, value: f64, grad: Vec<f64>) -> LossReport {
    LossReport {
        value,
        grad: Volume::from_parts_unchecked(like.dims(), like.spacing(), grad, VolumeKind::Intensity),
    }
}

fn check_pair(pred: &Volume, gt: &Volume) -> Result<()> {
    pred.ensure_same_grid(gt, "loss pred/gt")?;
    gt.ensure_kind(VolumeKind::Label, "loss ground truth")?;
    if let Some(i) = pred.data().iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid(format!(
            "prediction {} at voxel {i} is not a probability",
            pred.data()[i]
        )));
    }
    Ok(())
}

fn check_weights(pred: &Volume, w: &Volume) -> Result<()> {
    pred.ensure_same_grid(w, "loss weights")?;
    if let Some(i) = w.data().iter().position(|&v| !(v >= 1.0 && v.is_finite())) {
        return Err(Error::invalid(format!(
            "weight {} at voxel {i} is below 1",
            w.data()[i]
        )));
    }
    Ok(())
}

/// `1 - (2 sum w p y + eps) / (sum w p + sum w y + eps)`; `w = None` is all ones.
pub(crate) fn dice_terms(pred: &[f64], gt: &[f64], w: Option<&[f64]>, eps: f64) -> (f64, Vec<f64>) {
    let mut inter = 0.0;
    let mut denom = eps;
    for i in 0..pred.len() {
        let wi = w.map_or(1.0, |w| w[i]);
        inter += wi * pred[i] * gt[i];
        denom += wi * pred[i] + wi * gt[i];
    }
    let numer = 2.0 * inter + eps;
    let value = 1.0 - numer / denom;
    let d2 = denom * denom;
    let grad = (0..pred.len())
        .map(|i| {
            let wi = w.map_or(1.0, |w| w[i]);
            -(2.0 * wi * gt[i] * denom - numer * wi) / d2
        })
        .collect();
    (value, grad)
}

/// Weighted mean binary cross-entropy with clamped probabilities.
pub(crate) fn ce_terms(pred: &[f64], gt: &[f64], w: Option<&[f64]>, clamp: f64) -> (f64, Vec<f64>) {
    let total_w: f64 = match w {
        Some(w) => w.iter().sum(),
        None => pred.len() as f64,
    };
    let mut acc = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for i in 0..pred.len() {
        let wi = w.map_or(1.0, |w| w[i]);
        let raw = pred[i];
        let p = raw.clamp(clamp, 1.0 - clamp);
        let y = gt[i];
        acc += wi * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        grad.push(if raw < clamp || raw > 1.0 - clamp {
            0.0
        } else {
            -(wi / total_w) * (y / p - (1.0 - y) / (1.0 - p))
        });
    }
    (-acc / total_w, grad)
}

pub fn dice_loss(pred: &Volume, gt: &Volume, eps: f64) -> Result<LossReport> {
    check_pair(pred, gt)?;
    let (v, g) = dice_terms(pred.data(), gt.data(), None, eps);
    Ok(report(pred, v, g))
}

pub fn ce_loss(pred: &Volume, gt: &Volume, clamp: f64) -> Result<LossReport> {
    check_pair(pred, gt)?;
    let (v, g) = ce_terms(pred.data(), gt.data(), None, clamp);
    Ok(report(pred, v, g))
}

fn combine(lambda: f64, dice: (f64, Vec<f64>), ce: (f64, Vec<f64>)) -> (f64, Vec<f64>) {
    let value = lambda * dice.0 + (1.0 - lambda) * ce.0;
    let grad = dice
        .1
        .iter()
        .zip(&ce.1)
        .map(|(d, c)| lambda * d + (1.0 - lambda) * c)
        .collect();
    (value, grad)
}

pub fn dice_ce_loss(pred: &Volume, gt: &Volume, cfg: &LossConfig) -> Result<LossReport> {
    cfg.validate()?;
    check_pair(pred, gt)?;
    let (v, g) = combine(
        cfg.lambda,
        dice_terms(pred.data(), gt.data(), None, cfg.epsilon),
        ce_terms(pred.data(), gt.data(), None, cfg.clamp),
    );
    Ok(report(pred, v, g))
}

/// Scar loss under the spatial weight map `w` (every entry >= 1).
///
/// In per-voxel-normalized mode the Dice term uses `w / mean(w)`.
pub fn weighted_scar_loss(
    pred: &Volume,
    gt: &Volume,
    w: &Volume,
    cfg: &LossConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    check_pair(pred, gt)?;
    check_weights(pred, w)?;
    let (p, y, wt) = (pred.data(), gt.data(), w.data());
    let (v, g) = match cfg.weight_mode {
        WeightMode::PerVoxelNormalized => {
            // Unit-mean weights keep the Dice smoothing term scale-free, so a
            // constant map reduces exactly to the unweighted loss.
            let mean = wt.iter().sum::<f64>() / wt.len() as f64;
            let unit: Vec<f64> = wt.iter().map(|v| v / mean).collect();
            combine(
                cfg.lambda,
                dice_terms(p, y, Some(&unit), cfg.epsilon),
                ce_terms(p, y, Some(wt), cfg.clamp),
            )
        }
        WeightMode::Literal => {
            let wp: Vec<f64> = p.iter().zip(wt).map(|(a, b)| a * b).collect();
            let wy: Vec<f64> = y.iter().zip(wt).map(|(a, b)| a * b).collect();
            // scaled targets can exceed 1; CE needs them in [0, 1]
            let wy_ce: Vec<f64> = wy.iter().map(|v| v.min(1.0)).collect();
            let (v, g) = combine(
                cfg.lambda,
                dice_terms(&wp, &wy, None, cfg.epsilon),
                ce_terms(&wp, &wy_ce, None, cfg.clamp),
            );
            // chain rule through pred' = w * pred
            let g = g.iter().zip(wt).map(|(gi, wi)| gi * wi).collect();
            (v, g)
        }
    };
    Ok(report(pred, v, g))
}

/// Task weights of the dual-task objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub beta_la: f64,
    pub beta_scar: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights {
            beta_la: 0.3,
            beta_scar: 0.7,
        }
    }
}

impl TaskWeights {
    pub fn combine(&self, la: f64, scar: f64) -> f64 {
        self.beta_la * la + self.beta_scar * scar
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Loss {
    pub la: LossReport,
    pub scar: LossReport,
    pub combined: f64,
}

impl Stage2Loss {
    pub fn from_reports(la: LossReport, scar: LossReport, betas: &TaskWeights) -> Self {
        let combined = betas.combine(la.value, scar.value);
        Stage2Loss { la, scar, combined }
    }
}

/// Dual-task objective: DiceCE on the LA head plus the weighted scar loss.
/// Per-task gradients are returned unscaled by the task weights.
pub fn stage2_loss(
    pred_la: &Volume,
    gt_la: &Volume,
    pred_scar: &Volume,
    gt_scar: &Volume,
    w: &Volume,
    betas: &TaskWeights,
    cfg: &LossConfig,
) -> Result<Stage2Loss> {
    pred_la.ensure_same_grid(pred_scar, "stage2 heads")?;
    let la = dice_ce_loss(pred_la, gt_la, cfg)?;
    let scar = weighted_scar_loss(pred_scar, gt_scar, w, cfg)?;
    Ok(Stage2Loss::from_reports(la, scar, betas))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(data: Vec<f64>, kind: VolumeKind) -> Volume {
        let n = data.len();
        Volume::new([n, 1, 1], [1.0; 3], data, kind).unwrap()
    }

    #[test]
    fn dice_examples() {
        let gt = vol(vec![1.0, 0.0, 1.0, 1.0], VolumeKind::Label);
        let pred = vol(vec![1.0, 0.0, 1.0, 1.0], VolumeKind::Intensity);
        assert!(dice_loss(&pred, &gt, 1e-5).unwrap().value.abs() < 1e-5);

        let r = dice_loss(
            &vol(vec![0.5], VolumeKind::Intensity),
            &vol(vec![1.0], VolumeKind::Label),
            1e-12,
        )
        .unwrap();
        assert!((r.value - 1.0 / 3.0).abs() < 1e-10);

        let gt = vol([1.0; 10].to_vec(), VolumeKind::Label);
        let zero = vol(vec![0.0; 10], VolumeKind::Intensity);
        let r = dice_loss(&zero, &gt, 1e-5).unwrap();
        assert!((r.value - (1.0 - 1e-5 / (10.0 + 1e-5))).abs() < 1e-15);
        assert!(r.value > 0.999999 - 1e-9);
    }

    #[test]
    fn ce_examples() {
        let half = vol(vec![0.5], VolumeKind::Intensity);
        let one = vol(vec![1.0], VolumeKind::Label);
        let zero = vol(vec![0.0], VolumeKind::Label);
        let ln2 = std::f64::consts::LN_2;
        assert!((ce_loss(&half, &one, 1e-7).unwrap().value - ln2).abs() < 1e-15);
        assert!((ce_loss(&half, &zero, 1e-7).unwrap().value - ln2).abs() < 1e-15);

        let gt = vol(vec![1.0, 0.0, 1.0], VolumeKind::Label);
        let pred = vol(vec![1.0, 0.0, 1.0], VolumeKind::Intensity);
        let r = ce_loss(&pred, &gt, 1e-7).unwrap();
        assert!(r.value <= -(1.0f64 - 1e-7).ln() + 1e-18);
        assert!(r.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn dice_ce_combination() {
        let pred = vol(vec![0.5], VolumeKind::Intensity);
        let gt = vol(vec![1.0], VolumeKind::Label);
        let cfg = LossConfig {
            epsilon: 1e-12,
            ..LossConfig::default()
        };
        let r = dice_ce_loss(&pred, &gt, &cfg).unwrap();
        let expected = 0.5 * (1.0 / 3.0) + 0.5 * std::f64::consts::LN_2;
        assert!((r.value - expected).abs() < 1e-10);
        assert!((r.value - 0.5132).abs() < 1e-4);

        let dice_only = LossConfig { lambda: 1.0, ..cfg };
        assert_eq!(
            dice_ce_loss(&pred, &gt, &dice_only).unwrap(),
            dice_loss(&pred, &gt, cfg.epsilon).unwrap()
        );
        let ce_only = LossConfig { lambda: 0.0, ..cfg };
        assert_eq!(
            dice_ce_loss(&pred, &gt, &ce_only).unwrap(),
            ce_loss(&pred, &gt, cfg.clamp).unwrap()
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let pred = vol(vec![0.5, 1.5], VolumeKind::Intensity);
        let gt = vol(vec![1.0, 0.0], VolumeKind::Label);
        assert!(dice_loss(&pred, &gt, 1e-5).is_err());
        let short = vol(vec![1.0], VolumeKind::Label);
        let ok = vol(vec![0.5, 0.5], VolumeKind::Intensity);
        assert!(matches!(dice_loss(&ok, &short, 1e-5), Err(Error::GridMismatch(_))));
        let w = vol(vec![1.0, 0.5], VolumeKind::Intensity);
        assert!(weighted_scar_loss(&ok, &gt, &w, &LossConfig::default()).is_err());
    }

    #[test]
    fn stage2_betas() {
        let synthetic = |v: f64| LossReport {
            value: v,
            grad: vol(vec![0.0], VolumeKind::Intensity),
        };
        let s = Stage2Loss::from_reports(synthetic(1.0), synthetic(1.0), &TaskWeights::default());
        assert!((s.combined - 1.0).abs() < 1e-15);
        assert_eq!(TaskWeights::default().beta_la, 0.3);
        assert_eq!(TaskWeights::default().beta_scar, 0.7);
    }
}
