use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate_cases, run_pipeline, Case, CaseMetrics, RunLog, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, AggregateReport, MetricReport};
use crate::micronet::Stage;

/// Seeded shuffle of `0..n` cut into `k` contiguous folds whose sizes
/// differ by at most one.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::invalid(format!("{k}-fold cross-validation needs k >= 2 and at least k cases, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k).map(|f| idx[f * n / k..(f + 1) * n / k].to_vec()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub val_ids: Vec<String>,
    pub metrics: Vec<CaseMetrics>,
    pub log: RunLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValOutcome {
    pub folds: Vec<FoldOutcome>,
    pub la: AggregateReport,
    pub scar: AggregateReport,
}

/// Each fold is the validation set (for early stopping and reporting) of a
/// model trained on the remaining folds. Aggregates use population std.
pub fn run_crossval(cases: &[Case], k: usize, stages: &[Stage], cfg: &TrainConfig) -> Result<CrossValOutcome> {
    let folds = fold_assignment(cases.len(), k, cfg.seed)?;
    let mut out = Vec::with_capacity(k);
    for fold in &folds {
        let val: Vec<Case> = fold.iter().map(|&i| cases[i].clone()).collect();
        let train: Vec<Case> = (0..cases.len())
            .filter(|i| !fold.contains(i))
            .map(|i| cases[i].clone())
            .collect();
        let o = run_pipeline(stages, &train, &val, cfg)?;
        out.push(FoldOutcome {
            val_ids: val.iter().map(|c| c.id.clone()).collect(),
            metrics: evaluate_cases(&o.net, &val, cfg)?,
            log: o.log,
        });
    }
    let all: Vec<&CaseMetrics> = out.iter().flat_map(|f| &f.metrics).collect();
    let la: Vec<MetricReport> = all.iter().map(|m| m.la).collect();
    let scar: Vec<MetricReport> = all.iter().filter_map(|m| m.scar).collect();
    Ok(CrossValOutcome {
        folds: out,
        la: aggregate(&la),
        scar: aggregate(&scar),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_folds_partition_twenty_cases() {
        let f = fold_assignment(20, 5, 3).unwrap();
        assert_eq!(f.len(), 5);
        assert!(f.iter().all(|v| v.len() == 4));
        let mut all: Vec<usize> = f.concat();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(f, fold_assignment(20, 5, 3).unwrap());
        assert_ne!(f, fold_assignment(20, 5, 4).unwrap());
        assert!(fold_assignment(4, 5, 0).is_err());
    }
}
