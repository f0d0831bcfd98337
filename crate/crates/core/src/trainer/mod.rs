//! Three-stage progressive training on top of [`crate::micronet`].
//!
//! - Stage I: LA segmentation only (DiceCE on the LA head).
//! - Stage II: both heads; `beta_la * DiceCE_LA + beta_scar * L_scar` with
//!   the scar loss weighted by `W = 1 + alpha(t) * M_wall`, where the wall is
//!   always built from the ground-truth LA.
//! - Stage III: scar-only DiceCE with the early encoder and LA decoder
//!   frozen.
//!
//! Each stage early-stops on the validation Dsc of its primary structure
//! (LA in I, scar in II and III), restores its best parameters and emits a
//! checkpoint whose parent is the previous stage's checkpoint.

mod ablation;
mod config;
mod crossval;
mod early_stop;
mod runlog;

pub use ablation::{ingest_external_report, run_ablation, AblationOutcome, Baseline};
pub use config::{parse_stages, TrainConfig, SEED_ENV};
pub use crossval::{fold_assignment, run_crossval, CrossValOutcome, FoldOutcome};
pub use early_stop::{stopping_epoch, EarlyStopping, StopDecision};
pub use runlog::{EpochRecord, RunLog, StageRecord, RUNLOG_HEADER};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anatomy::{alpha_at, plausibility_audit, wall_mask, weight_map, AuditReport, WallParams};
use crate::error::{Error, Result};
use crate::loss::{dice_ce_loss, stage2_loss, weighted_scar_loss};
use crate::metrics::{dice_score, evaluate, EvalOptions, MetricReport, CSV_HEADER};
use crate::micronet::checkpoint::hex;
use crate::micronet::{AdamW, Checkpoint, Heads, MicroNet, RngState, Stage};
use crate::volume::{crop_at, patch_origin, read_nifti, zscore, Volume, VolumeKind};

/// An annotation label. Wall masks in training are only ever built from
/// this type, never from network predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth(Volume);

impl GroundTruth {
    pub fn new(v: Volume) -> Result<Self> {
        v.ensure_kind(VolumeKind::Label, "ground truth")?;
        Ok(GroundTruth(v))
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn wall_mask(&self, p: &WallParams) -> Result<Volume> {
        wall_mask(&self.0, p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    /// Z-scored image.
    pub image: Volume,
    pub la: GroundTruth,
    pub scar: Option<GroundTruth>,
}

impl Case {
    /// Z-scores `image` and checks that all grids agree.
    pub fn new(id: impl Into<String>, image: &Volume, la: Volume, scar: Option<Volume>) -> Result<Self> {
        image.ensure_same_grid(&la, "case image/la")?;
        if let Some(s) = &scar {
            image.ensure_same_grid(s, "case image/scar")?;
        }
        Ok(Case {
            id: id.into(),
            image: zscore(image)?,
            la: GroundTruth::new(la)?,
            scar: scar.map(GroundTruth::new).transpose()?,
        })
    }
}

/// Loads every subdirectory of `dir` holding `image.nii` and `la.nii`
/// (and optionally `scar.nii`), sorted by name.
pub fn load_cases(dir: impl AsRef<Path>) -> Result<Vec<Case>> {
    let dir = dir.as_ref();
    let mut subdirs: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("image.nii").is_file() && p.join("la.nii").is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::invalid(format!("no cases (image.nii + la.nii) under {}", dir.display())));
    }
    subdirs
        .into_iter()
        .map(|p| {
            let id = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let image = read_nifti(p.join("image.nii"))?.into_kind(VolumeKind::Intensity)?;
            let la = read_nifti(p.join("la.nii"))?.into_kind(VolumeKind::Label)?;
            let scar_path = p.join("scar.nii");
            let scar = if scar_path.is_file() {
                Some(read_nifti(scar_path)?.into_kind(VolumeKind::Label)?)
            } else {
                None
            };
            Case::new(id, &image, la, scar)
        })
        .collect()
}

fn primary_uses_scar(stage: Stage) -> bool {
    stage != Stage::I
}

fn heads_for(stage: Stage) -> Heads {
    match stage {
        Stage::I => Heads::LA,
        Stage::II => Heads::BOTH,
        Stage::III => Heads::SCAR,
    }
}

fn scar_of<'a>(c: &'a Case, stage: Stage) -> Result<&'a GroundTruth> {
    c.scar.as_ref().ok_or_else(|| {
        Error::invalid(format!("case {} has no scar label, required by stage {}", c.id, stage.name()))
    })
}

struct StepLoss {
    total: f64,
    la: Option<f64>,
    scar: Option<f64>,
}

fn train_step(
    net: &mut MicroNet,
    opt: &mut AdamW,
    case: &Case,
    stage: Stage,
    cfg: &TrainConfig,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepLoss> {
    let aug_seed = rng.next_u64();
    let patch_seed = rng.next_u64();
    let mut labels = vec![case.la.volume().clone()];
    if primary_uses_scar(stage) {
        labels.push(scar_of(case, stage)?.volume().clone());
    }
    let aug = cfg.augment.apply(&case.image, &labels, aug_seed)?;
    let mut aug_labels = aug.labels.into_iter();
    let la = GroundTruth::new(aug_labels.next().expect("la label"))?;
    let scar = aug_labels.next().map(GroundTruth::new).transpose()?;
    let weighted = stage == Stage::II || (stage == Stage::III && cfg.stage3_weighted);
    let wall = if weighted { Some(la.wall_mask(&cfg.wall)?) } else { None };

    let dims = aug.image.dims();
    let (origin, size) = match &cfg.patch {
        None => ([0; 3], dims),
        Some(spec) => {
            let guide = scar.as_ref().unwrap_or(&la).volume();
            (patch_origin(dims, spec, Some(guide), patch_seed)?, spec.size)
        }
    };
    let crop = |v: &Volume| crop_at(v, origin, size);
    let image = crop(&aug.image)?;
    let la = crop(la.volume())?;
    let scar = scar.as_ref().map(|s| crop(s.volume())).transpose()?;
    let wall = wall.as_ref().map(crop).transpose()?;

    let out = net.forward(&image, heads_for(stage))?;
    let (loss, grads) = match stage {
        Stage::I => {
            let r = dice_ce_loss(out.la.as_ref().expect("la head"), &la, &cfg.loss)?;
            let g = net.backward(&out.cache, Some(r.grad.data()), None)?;
            (StepLoss { total: r.value, la: Some(r.value), scar: None }, g)
        }
        Stage::II => {
            let w = weight_map(wall.as_ref().expect("wall"), alpha)?;
            let scar = scar.as_ref().expect("scar");
            let r = stage2_loss(
                out.la.as_ref().expect("la head"),
                &la,
                out.scar.as_ref().expect("scar head"),
                scar,
                &w,
                &cfg.betas,
                &cfg.loss,
            )?;
            let gl: Vec<f64> = r.la.grad.data().iter().map(|g| g * cfg.betas.beta_la).collect();
            let gs: Vec<f64> = r.scar.grad.data().iter().map(|g| g * cfg.betas.beta_scar).collect();
            let g = net.backward(&out.cache, Some(&gl), Some(&gs))?;
            (
                StepLoss {
                    total: r.combined,
                    la: Some(r.la.value),
                    scar: Some(r.scar.value),
                },
                g,
            )
        }
        Stage::III => {
            let pred = out.scar.as_ref().expect("scar head");
            let scar = scar.as_ref().expect("scar");
            let r = match &wall {
                Some(m) => weighted_scar_loss(pred, scar, &weight_map(m, alpha)?, &cfg.loss)?,
                None => dice_ce_loss(pred, scar, &cfg.loss)?,
            };
            let g = net.backward(&out.cache, None, Some(r.grad.data()))?;
            (StepLoss { total: r.value, la: None, scar: Some(r.value) }, g)
        }
    };
    opt.step(net, &grads)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ValStats {
    dsc_la: Option<f64>,
    dsc_scar: Option<f64>,
    outside: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn validate_stage(net: &MicroNet, val: &[Case], walls: &[Volume], stage: Stage, cfg: &TrainConfig) -> Result<ValStats> {
    let mut la = Vec::new();
    let mut scar = Vec::new();
    let mut outside = Vec::new();
    for (i, c) in val.iter().enumerate() {
        let out = net.forward(&c.image, heads_for(stage))?;
        if let Some(p) = &out.la {
            la.push(dice_score(&p.threshold(cfg.threshold), c.la.volume())?);
        }
        if let Some(p) = &out.scar {
            let bin = p.threshold(cfg.threshold);
            scar.push(dice_score(&bin, scar_of(c, stage)?.volume())?);
            outside.push(plausibility_audit(&bin, &walls[i])?.outside_fraction);
        }
    }
    let m = |v: &Vec<f64>| (!v.is_empty()).then(|| mean(v));
    Ok(ValStats {
        dsc_la: m(&la),
        dsc_scar: m(&scar),
        outside: m(&outside),
    })
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub net: MicroNet,
    pub log: RunLog,
    pub checkpoint: Checkpoint,
    pub hash: [u8; 32],
}

/// Trains one stage starting from `net` and returns its best parameters.
pub fn run_stage(
    mut net: MicroNet,
    stage: Stage,
    train: &[Case],
    val: &[Case],
    cfg: &TrainConfig,
    parent: Option<[u8; 32]>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    if primary_uses_scar(stage) {
        for c in train.iter().chain(val) {
            scar_of(c, stage)?;
        }
    }
    let walls = if primary_uses_scar(stage) {
        val.iter().map(|c| c.la.wall_mask(&cfg.wall)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    net.set_stage_trainability(stage);
    let mut opt = AdamW::new(cfg.optimizer, &net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(stage));
    let mut es = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut best = (net.clone(), opt.clone());
    let mut log = RunLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let weighted = stage == Stage::II || (stage == Stage::III && cfg.stage3_weighted);
    let mut stopped_early = false;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        let alpha = if weighted { alpha_at(&cfg.alpha, epoch - 1) } else { 0.0 };
        order.shuffle(&mut rng);
        let (mut tl, mut tla, mut tsc) = (Vec::new(), Vec::new(), Vec::new());
        for &i in &order {
            let l = train_step(&mut net, &mut opt, &train[i], stage, cfg, alpha, &mut rng)?;
            tl.push(l.total);
            tla.extend(l.la);
            tsc.extend(l.scar);
        }
        let v = validate_stage(&net, val, &walls, stage, cfg)?;
        let primary = if primary_uses_scar(stage) { v.dsc_scar } else { v.dsc_la }.expect("primary head");
        let d = es.update(epoch, primary);
        if d.improved {
            best = (net.clone(), opt.clone());
        }
        log.epochs.push(EpochRecord {
            stage,
            epoch,
            train_loss: mean(&tl),
            train_loss_la: (!tla.is_empty()).then(|| mean(&tla)),
            train_loss_scar: (!tsc.is_empty()).then(|| mean(&tsc)),
            alpha,
            val_dsc_la: v.dsc_la,
            val_dsc_scar: v.dsc_scar,
            val_outside_fraction: v.outside,
            beta_la: cfg.betas.beta_la,
            beta_scar: cfg.betas.beta_scar,
        });
        log::info!(
            "stage {} epoch {epoch}: loss {:.4} val {:.4}",
            stage.name(),
            mean(&tl),
            primary
        );
        epochs_run = epoch;
        if d.stop {
            stopped_early = true;
            break;
        }
    }

    let (net, opt) = best;
    let checkpoint = Checkpoint {
        parent,
        stage: Some(stage),
        rng: RngState::capture(&rng),
        net: net.clone(),
        optimizer: Some(opt),
    };
    let hash = checkpoint.hash();
    log.stages.push(StageRecord {
        stage,
        epochs_run,
        stopped_early,
        best_epoch: es.best_epoch(),
        best_value: es.best().unwrap_or(0.0),
        checkpoint: hex(&hash),
        parent: parent.as_ref().map(hex),
    });
    Ok(StageOutcome {
        net,
        log,
        checkpoint,
        hash,
    })
}

pub fn run_stage1(net: MicroNet, train: &[Case], val: &[Case], cfg: &TrainConfig, parent: Option<[u8; 32]>) -> Result<StageOutcome> {
    run_stage(net, Stage::I, train, val, cfg, parent)
}

pub fn run_stage2(net: MicroNet, train: &[Case], val: &[Case], cfg: &TrainConfig, parent: Option<[u8; 32]>) -> Result<StageOutcome> {
    run_stage(net, Stage::II, train, val, cfg, parent)
}

pub fn run_stage3(net: MicroNet, train: &[Case], val: &[Case], cfg: &TrainConfig, parent: Option<[u8; 32]>) -> Result<StageOutcome> {
    run_stage(net, Stage::III, train, val, cfg, parent)
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub net: MicroNet,
    pub log: RunLog,
    pub checkpoints: Vec<(Checkpoint, [u8; 32])>,
}

/// Runs `stages` in order from a fresh network seeded by `cfg.seed`.
pub fn run_pipeline(stages: &[Stage], train: &[Case], val: &[Case], cfg: &TrainConfig) -> Result<PipelineOutcome> {
    if stages.is_empty() || stages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("stages must be a non-empty increasing list, got {stages:?}")));
    }
    let mut net = MicroNet::new(cfg.seed);
    let mut log = RunLog::default();
    let mut checkpoints = Vec::new();
    let mut parent = None;
    for &s in stages {
        let o = run_stage(net, s, train, val, cfg, parent)?;
        net = o.net;
        log.extend(o.log);
        parent = Some(o.hash);
        checkpoints.push((o.checkpoint, o.hash));
    }
    Ok(PipelineOutcome {
        net,
        log,
        checkpoints,
    })
}

impl PipelineOutcome {
    /// Writes `runlog.csv`, `stages.json` and `checkpoints/stage_<S>.ckpt`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let ck = dir.join("checkpoints");
        std::fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        for (c, _) in &self.checkpoints {
            let name = format!("stage_{}.ckpt", c.stage.map_or("none", Stage::name));
            c.save(ck.join(name))?;
        }
        write_atomic(&dir.join("runlog.csv"), self.log.to_csv().as_bytes())?;
        let stages = serde_json::to_string_pretty(&self.log.stages)
            .map_err(|e| Error::invalid(format!("serializing stage records: {e}")))?;
        write_atomic(&dir.join("stages.json"), stages.as_bytes())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub la: MetricReport,
    pub scar: Option<MetricReport>,
    /// Thresholded scar prediction against the GT wall band.
    pub scar_audit: Option<AuditReport>,
}

/// Full-volume evaluation of both heads at `cfg.threshold`.
pub fn evaluate_cases(net: &MicroNet, cases: &[Case], cfg: &TrainConfig) -> Result<Vec<CaseMetrics>> {
    cases
        .iter()
        .map(|c| {
            let out = net.forward(&c.image, Heads::BOTH)?;
            let la_bin = out.la.expect("la head").threshold(cfg.threshold);
            let scar_bin = out.scar.expect("scar head").threshold(cfg.threshold);
            let la = evaluate(&la_bin, c.la.volume(), EvalOptions::default())?;
            let (scar, scar_audit) = match &c.scar {
                Some(s) => {
                    let wall = c.la.wall_mask(&cfg.wall)?;
                    (
                        Some(evaluate(&scar_bin, s.volume(), EvalOptions::default())?),
                        Some(plausibility_audit(&scar_bin, &wall)?),
                    )
                }
                None => (None, None),
            };
            Ok(CaseMetrics {
                id: c.id.clone(),
                la,
                scar,
                scar_audit,
            })
        })
        .collect()
}

pub fn metrics_csv(rows: &[CaseMetrics]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&crate::metrics::csv_row(&r.id, "la", &r.la));
        s.push('\n');
        if let Some(m) = &r.scar {
            s.push_str(&crate::metrics::csv_row(&r.id, "scar", m));
            s.push('\n');
        }
    }
    s
}

pub fn mean_scar_dsc(rows: &[CaseMetrics]) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(|r| r.scar.map(|m| m.dsc)).collect();
    (!v.is_empty()).then(|| mean(&v))
}

pub fn mean_outside_fraction(rows: &[CaseMetrics]) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(|r| r.scar_audit.map(|a| a.outside_fraction)).collect();
    (!v.is_empty()).then(|| mean(&v))
}
