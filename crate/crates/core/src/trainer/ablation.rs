use std::path::{Path, PathBuf};

use super::{evaluate_cases, run_pipeline, Case, CaseMetrics, PipelineOutcome, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::micronet::Stage;

/// Ablation baselines. `External` carries a metrics CSV produced elsewhere
/// and is ingested without training.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    /// Stage III only, from random initialization.
    B1,
    /// Stages I and III.
    B2,
    /// Stage II only, from random initialization.
    B3,
    /// Stages II and III, from random initialization.
    B4,
    /// Stages I, II and III.
    Full,
    External(PathBuf),
}

impl Baseline {
    pub fn name(&self) -> &'static str {
        match self {
            Baseline::B1 => "B1",
            Baseline::B2 => "B2",
            Baseline::B3 => "B3",
            Baseline::B4 => "B4",
            Baseline::Full => "Full",
            Baseline::External(_) => "external",
        }
    }

    pub fn stages(&self) -> &'static [Stage] {
        match self {
            Baseline::B1 => &[Stage::III],
            Baseline::B2 => &[Stage::I, Stage::III],
            Baseline::B3 => &[Stage::II],
            Baseline::B4 => &[Stage::II, Stage::III],
            Baseline::Full => &[Stage::I, Stage::II, Stage::III],
            Baseline::External(_) => &[],
        }
    }

    /// Parses `B1`..`B4`, `Full`, or `external=<path>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "B1" | "b1" => Ok(Baseline::B1),
            "B2" | "b2" => Ok(Baseline::B2),
            "B3" | "b3" => Ok(Baseline::B3),
            "B4" | "b4" => Ok(Baseline::B4),
            "Full" | "full" => Ok(Baseline::Full),
            other => match other.strip_prefix("external=") {
                Some(p) if !p.is_empty() => Ok(Baseline::External(PathBuf::from(p))),
                _ => Err(Error::invalid(format!(
                    "unknown baseline {other:?} (expected B1, B2, B3, B4, Full or external=<csv>)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub baseline: Baseline,
    /// `None` for external reports.
    pub run: Option<PipelineOutcome>,
    pub metrics: Vec<CaseMetrics>,
}

pub fn run_ablation(train: &[Case], val: &[Case], baseline: &Baseline, cfg: &TrainConfig) -> Result<AblationOutcome> {
    if let Baseline::External(path) = baseline {
        return Ok(AblationOutcome {
            baseline: baseline.clone(),
            run: None,
            metrics: ingest_external_report(path)?,
        });
    }
    let run = run_pipeline(baseline.stages(), train, val, cfg)?;
    let metrics = evaluate_cases(&run.net, val, cfg)?;
    Ok(AblationOutcome {
        baseline: baseline.clone(),
        run: Some(run),
        metrics,
    })
}

/// Reads a `case_id,structure,dsc,hd_mm,asd_mm` CSV (as written by
/// `evaluate`) into per-case metrics. Voxel counts are unknown and left 0.
pub fn ingest_external_report(path: &Path) -> Result<Vec<CaseMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<CaseMetrics> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(Error::invalid(format!("{}:{}: expected 5 columns", path.display(), n + 1)));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                return Ok(None);
            }
            s.parse()
                .map(Some)
                .map_err(|_| Error::invalid(format!("{}:{}: bad number {s:?}", path.display(), n + 1)))
        };
        let report = MetricReport {
            dsc: num(f[2])?.ok_or_else(|| Error::invalid(format!("{}:{}: missing dsc", path.display(), n + 1)))?,
            hd_mm: num(f[3])?,
            asd_mm: num(f[4])?,
            pred_fg: 0,
            gt_fg: 0,
        };
        let idx = match rows.iter().position(|r| r.id == f[0]) {
            Some(i) => i,
            None => {
                rows.push(CaseMetrics {
                    id: f[0].to_string(),
                    la: MetricReport {
                        dsc: f64::NAN,
                        hd_mm: None,
                        asd_mm: None,
                        pred_fg: 0,
                        gt_fg: 0,
                    },
                    scar: None,
                    scar_audit: None,
                });
                rows.len() - 1
            }
        };
        match f[1] {
            "la" => rows[idx].la = report,
            "scar" => rows[idx].scar = Some(report),
            other => return Err(Error::invalid(format!("{}:{}: unknown structure {other:?}", path.display(), n + 1))),
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_stage_lists() {
        assert_eq!(Baseline::B2.stages(), &[Stage::I, Stage::III]);
        assert_eq!(Baseline::B3.stages(), &[Stage::II]);
        assert_eq!(Baseline::parse("Full").unwrap(), Baseline::Full);
        assert!(Baseline::parse("B9").is_err());
        assert_eq!(
            Baseline::parse("external=r.csv").unwrap(),
            Baseline::External(PathBuf::from("r.csv"))
        );
    }

    #[test]
    fn ingests_external_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, "case_id,structure,dsc,hd_mm,asd_mm\nc1,la,0.9,3,1\nc1,scar,0.5,,\n").unwrap();
        let rows = ingest_external_report(&p).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].la.dsc, 0.9);
        assert_eq!(rows[0].scar.unwrap().hd_mm, None);
        let o = run_ablation(&[], &[], &Baseline::External(p), &TrainConfig::default()).unwrap();
        assert!(o.run.is_none());
    }
}
