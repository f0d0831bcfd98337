use serde::{Deserialize, Serialize};

use crate::micronet::Stage;

/// One training epoch. Optional values are empty in the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: u32,
    pub train_loss: f64,
    pub train_loss_la: Option<f64>,
    pub train_loss_scar: Option<f64>,
    pub alpha: f64,
    pub val_dsc_la: Option<f64>,
    pub val_dsc_scar: Option<f64>,
    /// Mean fraction of predicted scar voxels outside the GT wall band.
    pub val_outside_fraction: Option<f64>,
    pub beta_la: f64,
    pub beta_scar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub epochs_run: u32,
    pub stopped_early: bool,
    pub best_epoch: u32,
    pub best_value: f64,
    /// Hex SHA-256 of the stage checkpoint.
    pub checkpoint: String,
    pub parent: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    pub stages: Vec<StageRecord>,
}

pub const RUNLOG_HEADER: &str = "stage,epoch,train_loss,train_loss_la,train_loss_scar,alpha,\
val_dsc_la,val_dsc_scar,val_outside_fraction,beta_la,beta_scar";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunLog {
    /// Per-epoch CSV. Floats use shortest round-trip formatting, so equal
    /// runs give byte-identical files.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(RUNLOG_HEADER);
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                e.stage.name(),
                e.epoch,
                e.train_loss,
                opt(e.train_loss_la),
                opt(e.train_loss_scar),
                e.alpha,
                opt(e.val_dsc_la),
                opt(e.val_dsc_scar),
                opt(e.val_outside_fraction),
                e.beta_la,
                e.beta_scar
            ));
        }
        s
    }

    pub fn stage_epochs(&self, stage: Stage) -> impl Iterator<Item = &EpochRecord> {
        self.epochs.iter().filter(move |e| e.stage == stage)
    }

    pub fn extend(&mut self, other: RunLog) {
        self.epochs.extend(other.epochs);
        self.stages.extend(other.stages);
    }
}
