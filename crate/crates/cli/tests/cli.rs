use std::path::Path;
use std::process::{Command, Output};

fn progseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_progseg"))
        .current_dir(dir)
        .args(args)
        .env_remove("PROGSEG_SEED")
        .output()
        .expect("spawn progseg")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
}

fn files_under(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

const SMALL_SPEC: &str = "dims = 16,16,8\nspacing = 1.25,1.25,2.5\nsemi_axes = 5,4,4\n\
center_jitter = 0.5\nwall_thickness = 2.5\nscar_fraction = 0.02\n";

fn make_phantoms(dir: &Path, n: u64) {
    std::fs::write(dir.join("spec.cfg"), SMALL_SPEC).unwrap();
    for i in 0..n {
        let out = format!("phantoms/case{i:03}");
        let o = progseg(dir, &["phantom", "--spec", "spec.cfg", "--seed", &i.to_string(), "--out-dir", &out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = progseg(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = progseg(dir.path(), &["edt", "--in", "m.nii", "--out", "d.nii", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(files_under(dir.path()).is_empty());
    let o = progseg(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for cmd in ["preprocess", "phantom", "augment", "edt", "wallmask", "audit", "loss", "evaluate", "train", "ablate", "overlay"] {
        assert!(stdout(&o).contains(cmd), "help lists {cmd}");
    }
}

#[test]
fn help_shows_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let h = stdout(&progseg(dir.path(), &["wallmask", "--help"]));
    assert!(h.contains("[default: 3]") && h.contains("[default: 2.5]"), "{h}");
    let h = stdout(&progseg(dir.path(), &["train", "--help"]));
    assert!(h.contains("[default: 250]") && h.contains("[default: 30]") && h.contains("0.0001"), "{h}");
}

#[test]
fn evaluate_identical_masks() {
    let dir = tempfile::tempdir().unwrap();
    make_phantoms(dir.path(), 1);
    let la = "phantoms/case000/la.nii";
    let o = progseg(dir.path(), &["evaluate", "--pred", la, "--gt", la, "--csv", "out.csv", "--json", "out.json", "--structure", "la"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(value(&text, "dsc"), "1.0");
    assert_eq!(value(&text, "hd_mm"), "0.0");
    let csv = std::fs::read_to_string(dir.path().join("out.csv")).unwrap();
    assert_eq!(csv, "case_id,structure,dsc,hd_mm,asd_mm\ncase,la,1,0,0\n");
    let js: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out.json")).unwrap()).unwrap();
    assert_eq!(js["dsc"], 1.0);
    assert_eq!(js["asd_mm"], 0.0);
}

#[test]
fn wallmask_audit_edt_loss_overlay_augment_preprocess() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    make_phantoms(d, 1);
    let c = "phantoms/case000";
    let ok = |args: &[&str]| {
        let o = progseg(d, args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    ok(&["wallmask", "--la", &format!("{c}/la.nii"), "--out", "wall.nii"]);
    let a = ok(&["audit", "--scar", &format!("{c}/scar.nii"), "--wall", "wall.nii", "--json", "report.json"]);
    assert_eq!(value(&a, "outside_count"), "0");
    assert!(d.join("report.json").is_file());
    let e = ok(&["edt", "--in", &format!("{c}/la.nii"), "--out", "dist.nii", "--source", "bg"]);
    assert!(value(&e, "max_mm").parse::<f64>().unwrap() > 0.0);
    let l = ok(&["loss", "--pred", &format!("{c}/scar.nii"), "--gt", &format!("{c}/scar.nii")]);
    assert!(value(&l, "value").parse::<f64>().unwrap() < 1e-3);
    let p = ok(&["overlay", "--image", &format!("{c}/image.nii"), "--la", &format!("{c}/la.nii"), "--scar", &format!("{c}/scar.nii"), "--slices", "3,4", "--scale", "2", "--out", "fig.png"]);
    assert_eq!(value(&p, "width"), "64");
    assert_eq!(&std::fs::read(d.join("fig.png")).unwrap()[1..4], b"PNG");
    let g = ok(&["augment", "--in", &format!("{c}/image.nii"), "--labels", &format!("{c}/la.nii,{c}/scar.nii"), "--seed", "7", "--out-prefix", "aug_"]);
    assert!(d.join("aug_image.nii").is_file() && d.join("aug_la.nii").is_file() && d.join("aug_scar.nii").is_file());
    let g2 = ok(&["augment", "--in", &format!("{c}/image.nii"), "--labels", &format!("{c}/la.nii,{c}/scar.nii"), "--seed", "7", "--out-prefix", "again_"]);
    assert_eq!(value(&g, "applied"), value(&g2, "applied"));
    assert_eq!(std::fs::read(d.join("aug_image.nii")).unwrap(), std::fs::read(d.join("again_image.nii")).unwrap());
    let r = ok(&["preprocess", "--in", &format!("{c}/image.nii"), "--out", "pre.nii", "--spacing", "2.5,2.5,2.5", "--size", "10,10,10"]);
    assert_eq!(value(&r, "out_dims"), "10,10,10");
}

#[test]
fn data_errors_exit_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    make_phantoms(d, 1);
    std::fs::write(d.join("bad.cfg"), "no_such_key = 1\n").unwrap();
    let o = progseg(d, &["phantom", "--spec", "bad.cfg", "--out-dir", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.join("x").exists());
    // Intensity image is not a binary label.
    let o = progseg(d, &["wallmask", "--la", "phantoms/case000/image.nii", "--out", "w.nii"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.join("w.nii").exists());
    let o = progseg(d, &["audit", "--scar", "missing.nii", "--wall", "missing.nii"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_writes_run_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    make_phantoms(d, 5);
    let args = ["train", "--stages", "I,II,III", "--data", "phantoms/", "--seed", "0", "--max-epochs", "2", "--patience", "2", "--lr", "0.002", "--patch", "8,8,4"];
    let o = progseg(d, &[&args[..], &["--out-dir", "a"]].concat());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files_under(&d.join("a")), ["audit.json", "checkpoints", "metrics.csv", "runlog.csv", "stages.json"]);
    assert_eq!(files_under(&d.join("a/checkpoints")), ["stage_I.ckpt", "stage_II.ckpt", "stage_III.ckpt"]);
    let text = stdout(&o);
    assert_eq!(value(&text, "stages"), "I,II,III");
    assert_eq!(value(&text, "val_cases"), "1");

    let o = progseg(d, &[&args[..], &["--out-dir", "b"]].concat());
    assert!(o.status.success());
    for f in ["runlog.csv", "metrics.csv", "checkpoints/stage_III.ckpt"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }

    let o = progseg(d, &["ablate", "--baseline", "B2", "--data", "phantoms/", "--max-epochs", "1", "--patch", "8,8,4", "--out-dir", "b2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files_under(&d.join("b2/checkpoints")), ["stage_I.ckpt", "stage_III.ckpt"]);
    let o = progseg(d, &["ablate", "--baseline", "external=a/metrics.csv", "--out-dir", "ext"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(value(&stdout(&o), "baseline"), "external");

    // Missing scar labels surface as a data error with nothing written.
    for i in 0..5 {
        std::fs::remove_file(d.join(format!("phantoms/case{i:03}/scar.nii"))).unwrap();
    }
    let o = progseg(d, &[&args[..], &["--out-dir", "c"]].concat());
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.join("c").exists());
}
