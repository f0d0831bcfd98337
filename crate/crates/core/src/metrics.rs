//! Overlap and surface-distance metrics for binary segmentations.
//!
//! Surfaces are foreground voxels with at least one 6-neighbour in the
//! background (outside the grid counts as background). Surface distances are
//! between voxel centers in mm, computed with the exact EDT of the opposite
//! surface.

use serde::{Deserialize, Serialize};

use crate::edt::edt_from_seeds;
use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

fn check_masks(pred: &Volume, gt: &Volume) -> Result<()> {
    pred.ensure_same_grid(gt, "metric pred/gt")?;
    pred.ensure_kind(VolumeKind::Label, "metric prediction")?;
    gt.ensure_kind(VolumeKind::Label, "metric ground truth")
}

/// `2|P and G| / (|P| + |G|)`, defined as 1 when both masks are empty.
pub fn dice_score(pred: &Volume, gt: &Volume) -> Result<f64> {
    check_masks(pred, gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p != 0.0, g != 0.0);
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

fn surface_flags(mask: &Volume) -> Vec<bool> {
    let [nx, ny, nz] = mask.dims();
    let d = mask.data();
    let fg = |x: isize, y: isize, z: isize| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < nx
            && (y as usize) < ny
            && (z as usize) < nz
            && d[x as usize + nx * (y as usize + ny * z as usize)] != 0.0
    };
    let mut out = vec![false; d.len()];
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                if !fg(x, y, z) {
                    continue;
                }
                let boundary = !fg(x - 1, y, z)
                    || !fg(x + 1, y, z)
                    || !fg(x, y - 1, z)
                    || !fg(x, y + 1, z)
                    || !fg(x, y, z - 1)
                    || !fg(x, y, z + 1);
                out[x as usize + nx * (y as usize + ny * z as usize)] = boundary;
            }
        }
    }
    out
}

/// Surface voxel coordinates in x-fastest order.
pub fn surface_voxels(mask: &Volume) -> Vec<[usize; 3]> {
    surface_flags(mask)
        .iter()
        .enumerate()
        .filter(|(_, &s)| s)
        .map(|(i, _)| mask.coords(i))
        .collect()
}

/// Directed surface distances (pred -> gt, gt -> pred).
fn directed_distances(pred: &Volume, gt: &Volume, what: &'static str) -> Result<(Vec<f64>, Vec<f64>)> {
    check_masks(pred, gt)?;
    if pred.count_nonzero() == 0 || gt.count_nonzero() == 0 {
        return Err(Error::EmptyMask(what));
    }
    let sp = surface_flags(pred);
    let sg = surface_flags(gt);
    let to_g = edt_from_seeds(gt.dims(), gt.spacing(), &sg)?;
    let to_p = edt_from_seeds(pred.dims(), pred.spacing(), &sp)?;
    let p_to_g = sp.iter().zip(&to_g).filter(|(&s, _)| s).map(|(_, &d)| d).collect();
    let g_to_p = sg.iter().zip(&to_p).filter(|(&s, _)| s).map(|(_, &d)| d).collect();
    Ok((p_to_g, g_to_p))
}

/// Symmetric Hausdorff distance (maximum) in mm.
pub fn hausdorff(pred: &Volume, gt: &Volume) -> Result<f64> {
    let (a, b) = directed_distances(pred, gt, "HD")?;
    Ok(a.iter().chain(&b).fold(0.0f64, |m, &d| m.max(d)))
}

/// Percentile Hausdorff distance: the `q`-th percentile (nearest rank) of
/// the pooled directed surface distances. `q = 100` is [`hausdorff`].
pub fn hausdorff_percentile(pred: &Volume, gt: &Volume, q: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 100.0) {
        return Err(Error::invalid(format!("percentile must be in (0, 100], got {q}")));
    }
    let (a, b) = directed_distances(pred, gt, "HD")?;
    let mut all: Vec<f64> = a.into_iter().chain(b).collect();
    all.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * all.len() as f64).ceil() as usize;
    Ok(all[rank.clamp(1, all.len()) - 1])
}

/// Average symmetric surface distance in mm: both directed sums pooled over
/// the combined surface counts.
pub fn asd(pred: &Volume, gt: &Volume) -> Result<f64> {
    let (a, b) = directed_distances(pred, gt, "ASD")?;
    let total: f64 = a.iter().chain(&b).sum();
    Ok(total / (a.len() + b.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dsc: f64,
    /// `None` when either mask is empty.
    pub hd_mm: Option<f64>,
    pub asd_mm: Option<f64>,
    pub pred_fg: usize,
    pub gt_fg: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Report the 95th-percentile HD instead of the maximum.
    pub hd95: bool,
}

pub fn evaluate(pred: &Volume, gt: &Volume, opts: EvalOptions) -> Result<MetricReport> {
    let dsc = dice_score(pred, gt)?;
    let pred_fg = pred.count_nonzero();
    let gt_fg = gt.count_nonzero();
    let (hd_mm, asd_mm) = if pred_fg == 0 || gt_fg == 0 {
        (None, None)
    } else {
        let hd = if opts.hd95 {
            hausdorff_percentile(pred, gt, 95.0)?
        } else {
            hausdorff(pred, gt)?
        };
        (Some(hd), Some(asd(pred, gt)?))
    };
    Ok(MetricReport {
        dsc,
        hd_mm,
        asd_mm,
        pred_fg,
        gt_fg,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub dsc: Option<Summary>,
    pub hd_mm: Option<Summary>,
    pub asd_mm: Option<Summary>,
}

/// Mean +- population std over reports; missing HD/ASD values are skipped.
pub fn aggregate(reports: &[MetricReport]) -> AggregateReport {
    let summarize = |vals: Vec<f64>| {
        mean_std(&vals).map(|(mean, std)| Summary {
            mean,
            std,
            n: vals.len(),
        })
    };
    AggregateReport {
        dsc: summarize(reports.iter().map(|r| r.dsc).collect()),
        hd_mm: summarize(reports.iter().filter_map(|r| r.hd_mm).collect()),
        asd_mm: summarize(reports.iter().filter_map(|r| r.asd_mm).collect()),
    }
}

/// One CSV row: `case_id,structure,dsc,hd_mm,asd_mm`; missing values empty.
pub fn csv_row(case_id: &str, structure: &str, r: &MetricReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!("{case_id},{structure},{},{},{}", r.dsc, opt(r.hd_mm), opt(r.asd_mm))
}

pub const CSV_HEADER: &str = "case_id,structure,dsc,hd_mm,asd_mm";
