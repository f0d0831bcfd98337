use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use progseg::anatomy::{plausibility_audit, wall_mask, WallParams};
use progseg::augment::AugPipeline;
use progseg::config::KeyValues;
use progseg::edt::{edt, DistanceSource};
use progseg::loss::{dice_ce_loss, weighted_scar_loss, LossConfig, WeightMode};
use progseg::metrics::{csv_row, evaluate, EvalOptions, CSV_HEADER};
use progseg::micronet::checkpoint::hex;
use progseg::micronet::Stage;
use progseg::phantom::{generate, PhantomSpec};
use progseg::trainer::{
    fold_assignment, load_cases, mean_outside_fraction, mean_scar_dsc, metrics_csv, run_ablation, run_crossval,
    run_pipeline, Baseline, Case, CaseMetrics, PipelineOutcome, TrainConfig,
};
use progseg::volume::{center_crop_or_pad, read_nifti, resample, zscore, PatchPolicy, PatchSpec};
use progseg::{Volume, VolumeKind};
use serde_json::json;

use crate::output::{Staged, Summary};
use crate::overlay::{encode_png, render, OverlayInput};
use crate::{
    AblateArgs, AugmentArgs, AuditArgs, Command, EdtArgs, EvaluateArgs, LossArgs, ModeArg, OverlayArgs, PhantomArgs,
    PreprocessArgs, RunArgs, SourceArg, TrainArgs, WallmaskArgs,
};

/// Runs one command, commits its files and returns the summary text.
pub fn run(cmd: Command, json: Option<&Path>) -> Result<String> {
    let mut files = Staged::default();
    let mut s = Summary::default();
    match cmd {
        Command::Preprocess(a) => preprocess(a, &mut files, &mut s)?,
        Command::Phantom(a) => phantom(a, &mut files, &mut s)?,
        Command::Augment(a) => augment(a, &mut files, &mut s)?,
        Command::Edt(a) => edt_cmd(a, &mut files, &mut s)?,
        Command::Wallmask(a) => wallmask(a, &mut files, &mut s)?,
        Command::Audit(a) => audit(a, &mut s)?,
        Command::Loss(a) => loss(a, &mut files, &mut s)?,
        Command::Evaluate(a) => evaluate_cmd(a, &mut files, &mut s)?,
        Command::Train(a) => train(a, &mut files, &mut s)?,
        Command::Ablate(a) => ablate(a, &mut files, &mut s)?,
        Command::Overlay(a) => overlay(a, &mut files, &mut s)?,
    }
    let written: Vec<String> = files.paths().map(|p| p.display().to_string()).collect();
    if !written.is_empty() {
        s.put("written", written.join(","));
    }
    if let Some(path) = json {
        files.add(path, s.to_json());
    }
    files.commit()?;
    Ok(s.to_text())
}

fn read(path: &Path, kind: VolumeKind) -> Result<Volume> {
    Ok(read_nifti(path)?
        .into_kind(kind)
        .with_context(|| format!("reading {}", path.display()))?)
}

fn dims_str(d: [usize; 3]) -> String {
    format!("{},{},{}", d[0], d[1], d[2])
}

fn spacing_str(s: [f64; 3]) -> String {
    format!("{},{},{}", s[0], s[1], s[2])
}

fn preprocess(a: PreprocessArgs, files: &mut Staged, s: &mut Summary) -> Result<()> {
    let kind = if a.label { VolumeKind::Label } else { VolumeKind::Intensity };
    let v = read(&a.input, kind)?;
    s.put("in_dims", dims_str(v.dims()));
    s.put("in_spacing", spacing_str(v.spacing()));
    let mut out = center_crop_or_pad(&resample(&v, a.spacing)?, a.size)?;
    let normalized = !a.label && !a.no_zscore;
    if normalized {
        out = zscore(&out)?;
    }
    s.put("out_dims", dims_str(out.dims()));
    s.put("out_spacing", spacing_str(out.spacing()));
    s.put("kind", if a.label { "label" } else { "intensity" });
    s.put("zscore", normalized);
    files.add_nifti(a.out, &out);
    Ok(())
}

fn phantom(a: PhantomArgs, files: &mut Staged, s: &mut Summary) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => PhantomSpec::from_config(&KeyValues::load(p)?)?,
        None => PhantomSpec::default(),
    };
    let p = generate(&spec, a.seed)?;
    let wall = wall_mask(&p.la, &WallParams::default())?;
    let audit = plausibility_audit(&p.scar, &wall)?;
    s.put("seed", a.seed);
    s.put("dims", dims_str(p.image.dims()));
    s.put("spacing", spacing_str(p.image.spacing()));
    s.put("la_voxels", p.la.count_nonzero());
    s.put("scar_voxels", p.scar.count_nonzero());
    s.put("scar_fraction", p.scar.count_nonzero() as f64 / p.scar.len() as f64);
    s.put("outside_wall_fraction", audit.outside_fraction);
    files.add_nifti(a.out_dir.join("image.nii"), &p.image);
    files.add_nifti(a.out_dir.join("la.nii"), &p.la);
    files.add_nifti(a.out_dir.join("scar.nii"), &p.scar);
    Ok(())
}

fn prefixed(prefix: &str, input: &Path) -> PathBuf {
    let name = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    PathBuf::from(format!("{prefix}{name}"))
}

fn augment(a: AugmentArgs, files: &mut Staged, s: &mut Summary) -> Result<()> {
    let pipeline = match &a.config {
        Some(p) => AugPipeline::from_config(&KeyValues::load(p)?)?,
        None => AugPipeline::default(),
    };
    let img = read(&a.input, VolumeKind::Intensity)?;
    let labels = a
        .labels
        .iter()
        .map(|p| read(p, VolumeKind::Label))
        .collect::<Result<Vec<_>>>()?;
    let out = pipeline.apply(&img, &labels, a.seed)?;
    let applied: Vec<&str> = out.applied.iter().map(|t| t.kind().name()).collect();
    s.put("seed", a.seed);
    s.put("applied", applied.join(","));
    files.add_nifti(prefixed(&a.out_prefix, &a.input), &out.image);
    for (p, v) in a.labels.iter().zip(&out.labels) {
        files.add_nifti(prefixed(&a.out_prefix, p), v);
    }
    Ok(())
}

fn edt_cmd(a: EdtArgs, files: &mut Staged, s: &mut Summary) -> Result<()> {
    let mask = read(&a.input, VolumeKind::Label)?;
    let source = match a.source {
        SourceArg::Fg => DistanceSource::ToForeground,
        SourceArg::Bg => DistanceSource::ToBackground,
    };
    let field = edt(&mask, source)?;
    let max = field.values().iter().copied().fold(0.0, f64::max);
    s.put("source", if matches!(a.source, SourceArg::Fg) { "fg" } else { "bg" });
    s.put("max_mm", max);
    files.add_nifti(a.out, &field.into_volume());
    Ok(())
}

fn wallmask(a: WallmaskArgs, files: &mut Staged, s: &mut Summary) -> Result<()> {
    let la = read(&a.la, VolumeKind::Label)?;
    let p = WallParams {
        delta_in: a.din,
        delta_out: a.dout,
    };
    let wall = wall_mask(&la, &p)?;
    s.put("delta_in", a.din);
    s.put("delta_out", a.dout);
    s.put("la_voxels", la.count_nonzero());
    s.put("wall_voxels", wall.count_nonzero());
    files.add_nifti(a.out, &wall);
    Ok(())
}

fn audit(a: AuditArgs, s: &mut Summary) -> Result<()> {
    let scar = read(&a.scar, VolumeKind::Label)?;
    let wall = read(&a.wall, VolumeKind::Label)?;
    let r = plausibility_audit(&scar, &wall)?;
    s.put("scar_count", r.scar_count);
    s.put("outside_count", r.outside_count);
    s.put("outside_fraction", r.outside_fraction);
    Ok(())
}

fn loss(a: LossArgs, files: &mut Staged, s: &mut Summary) -> Result<()> {
    let pred = read(&a.pred, VolumeKind::Intensity)?;
    let gt = read(&a.gt, VolumeKind::Label)?;
    let cfg = LossConfig {
        lambda: a.lambda,
        epsilon: a.epsilon,
        clamp: a.clamp,
        weight_mode: match a.mode {
            ModeArg::Literal => WeightMode::Literal,
            ModeArg::Normalized => WeightMode::PerVoxelNormalized,
        },
    };
    let r = match &a.weights {
        Some(p) => {
            let w = read(p, VolumeKind::Weight)?;
            s.put("loss", "weighted_scar");
            s.put("mode", if matches!(a.mode, ModeArg::Literal) { "literal" } else { "normalized" });
            weighted_scar_loss(&pred, &gt, &w, &cfg)?
        }
        None => {
            s.put("loss", "dice_ce");
            dice_ce_loss(&pred, &gt, &cfg)?
        }
    };
    s.put("value", r.value);
    s.put("grad_l2", r.grad.data().iter().map(|g| g * g).sum::<f64>().sqrt());
    if let Some(p) = a.grad_out {
        files.add_nifti(p, &r.grad);
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs, files: &mut Staged, s: &mut Summary) -> Result<()> {
    let pred = read_nifti(&a.pred)?.threshold(a.threshold);
    let gt = read(&a.gt, VolumeKind::Label)?;
    let r = evaluate(&pred, &gt, EvalOptions { hd95: a.hd95 })?;
    s.put("case_id", a.case_id.clone());
    s.put("structure", a.structure.clone());
    s.put("dsc", r.dsc);
    s.put_opt("hd_mm", r.hd_mm);
    s.put_opt("asd_mm", r.asd_mm);
    s.put("pred_fg", r.pred_fg);
    s.put("gt_fg", r.gt_fg);
    if let Some(p) = a.csv {
        files.add(p, format!("{CSV_HEADER}\n{}\n", csv_row(&a.case_id, &a.structure, &r)));
    }
    Ok(())
}

fn run_config(a: &RunArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_config(&KeyValues::load(p)?)?,
        None => TrainConfig::default(),
    }
    .with_env_seed()?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    if let Some(v) = a.lr {
        cfg.optimizer.lr = v;
    }
    if let Some(size) = a.patch {
        let policy = cfg.patch.map_or(PatchPolicy::CenteredOnLabel, |p| p.policy);
        cfg.patch = Some(PatchSpec::new(size, policy));
    }
    if a.no_augment {
        cfg.augment = AugPipeline::disabled();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(a: &RunArgs) -> Result<Vec<Case>> {
    let dir = a
        .data
        .as_ref()
        .ok_or_else(|| progseg::Error::InvalidInput("--data is required".into()))?;
    Ok(load_cases(dir)?)
}

/// Holds out the first of `folds` seeded folds for validation.
fn split(cases: Vec<Case>, folds: usize, seed: u64) -> Result<(Vec<Case>, Vec<Case>)> {
    let f = fold_assignment(cases.len(), folds, seed)?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, c) in cases.into_iter().enumerate() {
        if f[0].contains(&i) {
            val.push(c);
        } else {
            train.push(c);
        }
    }
    Ok((train, val))
}

fn stage_list(stages: &[Stage]) -> String {
    stages.iter().map(|s| s.name()).collect::<Vec<_>>().join(",")
}

fn stage_pipeline_files(o: &PipelineOutcome, dir: &Path, files: &mut Staged, s: &mut Summary) {
    for (c, h) in &o.checkpoints {
        let name = c.stage.map_or("none", Stage::name);
        files.add(dir.join("checkpoints").join(format!("stage_{name}.ckpt")), c.encode());
        s.put(format!("checkpoint_{name}"), hex(h));
    }
    for r in &o.log.stages {
        let n = r.stage.name();
        s.put(format!("epochs_{n}"), r.epochs_run);
        s.put(format!("best_epoch_{n}"), r.best_epoch);
        s.put(format!("best_value_{n}"), r.best_value);
    }
    files.add(dir.join("runlog.csv"), o.log.to_csv());
    files.add(
        dir.join("stages.json"),
        serde_json::to_string_pretty(&o.log.stages).expect("stage records serialize"),
    );
}

fn audit_json(rows: &[CaseMetrics]) -> String {
    let cases: Vec<_> = rows
        .iter()
        .filter_map(|r| {
            r.scar_audit.map(|a| {
                json!({
                    "case_id": r.id,
                    "scar_count": a.scar_count,
                    "outside_count": a.outside_count,
                    "outside_fraction": a.outside_fraction,
                })
            })
        })
        .collect();
    let v = json!({ "mean_outside_fraction": mean_outside_fraction(rows), "cases": cases });
    serde_json::to_string_pretty(&v).expect("audit serializes")
}

fn metric_summary(rows: &[CaseMetrics], s: &mut Summary) {
    let la: Vec<f64> = rows.iter().map(|r| r.la.dsc).filter(|d| d.is_finite()).collect();
    s.put("val_cases", rows.len());
    s.put_opt("val_dsc_la", (!la.is_empty()).then(|| la.iter().sum::<f64>() / la.len() as f64));
    s.put_opt("val_dsc_scar", mean_scar_dsc(rows));
    s.put_opt("val_outside_fraction", mean_outside_fraction(rows));
}

fn train(a: TrainArgs, files: &mut Staged, s: &mut Summary) -> Result<()> {
    let mut cfg = run_config(&a.run)?;
    if let Some(st) = a.stages {
        cfg.stages = st;
    }
    let cases = load_data(&a.run)?;
    let dir = &a.run.out_dir;
    s.put("stages", stage_list(&cfg.stages));
    s.put("seed", cfg.seed);
    s.put("cases", cases.len());
    if a.crossval {
        let o = run_crossval(&cases, a.run.folds, &cfg.stages, &cfg)?;
        let mut all = Vec::new();
        for (k, f) in o.folds.iter().enumerate() {
            files.add(dir.join(format!("fold_{k}")).join("runlog.csv"), f.log.to_csv());
            all.extend(f.metrics.iter().cloned());
        }
        s.put("folds", o.folds.len());
        for (name, agg) in [("la", &o.la), ("scar", &o.scar)] {
            if let Some(d) = &agg.dsc {
                s.put(format!("{name}_dsc_mean"), d.mean);
                s.put(format!("{name}_dsc_std"), d.std);
            }
        }
        metric_summary(&all, s);
        files.add(dir.join("metrics.csv"), metrics_csv(&all));
        files.add(dir.join("audit.json"), audit_json(&all));
        files.add(
            dir.join("crossval.json"),
            serde_json::to_string_pretty(&json!({ "la": o.la, "scar": o.scar })).expect("aggregates serialize"),
        );
        return Ok(());
    }
    let (train, val) = split(cases, a.run.folds, cfg.seed)?;
    let o = run_pipeline(&cfg.stages, &train, &val, &cfg)?;
    let rows = progseg::trainer::evaluate_cases(&o.net, &val, &cfg)?;
    stage_pipeline_files(&o, dir, files, s);
    metric_summary(&rows, s);
    files.add(dir.join("metrics.csv"), metrics_csv(&rows));
    files.add(dir.join("audit.json"), audit_json(&rows));
    Ok(())
}

fn ablate(a: AblateArgs, files: &mut Staged, s: &mut Summary) -> Result<()> {
    let dir = &a.run.out_dir;
    s.put("baseline", a.baseline.name());
    let (train, val, cfg) = if matches!(a.baseline, Baseline::External(_)) {
        (Vec::new(), Vec::new(), TrainConfig::default())
    } else {
        let cfg = run_config(&a.run)?;
        let (train, val) = split(load_data(&a.run)?, a.run.folds, cfg.seed)?;
        s.put("stages", stage_list(a.baseline.stages()));
        s.put("seed", cfg.seed);
        (train, val, cfg)
    };
    let o = run_ablation(&train, &val, &a.baseline, &cfg)?;
    if let Some(run) = &o.run {
        stage_pipeline_files(run, dir, files, s);
        files.add(dir.join("audit.json"), audit_json(&o.metrics));
    }
    metric_summary(&o.metrics, s);
    files.add(dir.join("metrics.csv"), metrics_csv(&o.metrics));
    Ok(())
}

fn overlay(a: OverlayArgs, files: &mut Staged, s: &mut Summary) -> Result<()> {
    let image = read(&a.image, VolumeKind::Intensity)?;
    let la = a.la.as_deref().map(|p| read(p, VolumeKind::Label)).transpose()?;
    let scar = a.scar.as_deref().map(|p| read(p, VolumeKind::Label)).transpose()?;
    let slices = if a.slices.is_empty() {
        (0..image.dims()[2]).collect()
    } else {
        a.slices
    };
    let input = OverlayInput {
        image: &image,
        la: la.as_ref(),
        scar: scar.as_ref(),
    };
    let png = render(&input, &slices, a.scale)?;
    s.put("slices", slices.len());
    s.put("width", png.width());
    s.put("height", png.height());
    files.add(a.out, encode_png(&png)?);
    Ok(())
}
