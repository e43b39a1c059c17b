use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dfcn::tensor::{read_label_file, read_tensor_file, write_tensor_file};
use dfcn::Tensor;

fn dfcn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfcn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(&o), stderr(&o));
    o
}

const TINY: &str = r#"{
  "network": {"kernels_per_layer": 4, "num_dilated_layers": 2, "head_widths": [8], "dropout_rate": 0.0},
  "train": {"max_epochs": 2, "optimizer": {"learning_rate": 0.01}},
  "seed": 5,
  "folds": 2,
  "split_stale_iters": 50
}"#;

/// Six 24×24 mosaics plus the tiny config.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dfcn(&["synth", "--seed", "3", "--count", "6", "--size", "24", "--out", "ds"], dir.path()));
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

#[test]
fn inspect_default_network() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&ok(dfcn(&["inspect"], dir.path())));
    assert!(out.contains("receptive field: 287"), "{out}");
    assert!(out.contains("parameters: 130056"), "{out}");
    assert!(out.contains("dilated_9"));
}

#[test]
fn inspect_ablation_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&ok(dfcn(&["inspect", "--table2"], dir.path())));
    for name in ["Proposed", "w/o concatenation", "64 kernels/layer", "9 dilated layers"] {
        assert!(out.contains(name), "{name} missing:\n{out}");
    }
    assert!(out.contains("421096"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"train": {"max_epoch": 3}}"#).unwrap();
    let o = dfcn(&["inspect", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("max_epoch"), "{}", stderr(&o));
}

#[test]
fn invalid_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"network": {"dropout_rate": 1.5}}"#).unwrap();
    let o = dfcn(&["inspect", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(dfcn(&["train", "--bogus"], dir.path()).status.code(), Some(2));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dfcn(&["train", "--manifest", "nope.json", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nope.json"));
}

#[test]
fn gradcheck_passes_on_small_network() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&ok(dfcn(&["gradcheck"], dir.path())));
    assert!(out.contains("network.input"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn synth_manifest_records_provenance() {
    let dir = workspace();
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ds/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["records"].as_array().unwrap().len(), 6);
    assert_eq!(m["provenance"]["seed"], 3);
    assert_eq!(m["provenance"]["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn split_then_train_then_predict() {
    let dir = workspace();
    let p = dir.path();
    ok(dfcn(&["split", "--manifest", "ds/manifest.json", "--folds", "2", "--iters", "50", "--out", "split.json"], p));
    let split: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("split.json")).unwrap()).unwrap();
    assert_eq!(split["split"]["fold_of_case"].as_object().unwrap().len(), 6);

    ok(dfcn(
        &["--threads", "1", "train", "--config", "tiny.json", "--manifest", "ds/manifest.json", "--split", "split.json", "--fold", "1", "--out", "run"],
        p,
    ));
    for f in ["best.ckpt", "final.ckpt", "runlog.jsonl", "report.json"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 5);
    assert_eq!(report["epochs_run"], 2);
    assert_eq!(report["held_out_cases"], 3);
    let log = fs::read_to_string(p.join("run/runlog.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.contains(report["config_hash"].as_str().unwrap()));

    // An all-zero image still yields a proper distribution at every pixel.
    write_tensor_file(&Tensor::zeros(&[1, 10, 12]).unwrap(), p.join("zero.tsr")).unwrap();
    ok(dfcn(&["predict", "--checkpoint", "run/final.ckpt", "--image", "zero.tsr", "--out", "pred"], p));
    let probs = read_tensor_file(p.join("pred/probs.tsr")).unwrap();
    assert_eq!(probs.shape(), &[6, 10, 12]);
    for px in 0..120 {
        let s: f32 = (0..6).map(|c| probs.channel(c)[px]).sum();
        assert!((s - 1.0).abs() < 1e-5, "{s}");
    }
    let labels = read_label_file(p.join("pred/labels.tsr")).unwrap();
    assert_eq!((labels.height, labels.width), (10, 12));
    let ppm = fs::read(p.join("pred/overlay.ppm")).unwrap();
    let header = String::from_utf8_lossy(&ppm[..ppm.len() - 10 * 12 * 3]).into_owned();
    assert!(header.starts_with("P6\n# dfcn seed=5 config_hash="), "{header}");
    assert!(header.ends_with("\n12 10\n255\n"), "{header}");
}

#[test]
fn training_is_deterministic_for_fixed_threads() {
    let dir = workspace();
    let p = dir.path();
    for out in ["a", "b"] {
        ok(dfcn(&["--threads", "1", "train", "--config", "tiny.json", "--manifest", "ds/manifest.json", "--out", out], p));
    }
    assert_eq!(fs::read(p.join("a/final.ckpt")).unwrap(), fs::read(p.join("b/final.ckpt")).unwrap());
}

#[test]
fn non_finite_values_exit_with_numeric_failure() {
    let dir = workspace();
    let p = dir.path();
    // Divergence during training is reported with its epoch and step.
    fs::write(p.join("wild.json"), TINY.replace("0.01", "1e30")).unwrap();
    let o = dfcn(&["train", "--config", "wild.json", "--manifest", "ds/manifest.json", "--out", "run"], p);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));

    // NaN pixels are caught while loading.
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("ds/manifest.json")).unwrap()).unwrap();
    let path = p.join("ds").join(m["records"][0]["image"].as_str().unwrap());
    let mut t = read_tensor_file(&path).unwrap();
    t.data_mut()[7] = f32::NAN;
    write_tensor_file(&t, &path).unwrap();
    let o = dfcn(&["train", "--config", "tiny.json", "--manifest", "ds/manifest.json", "--out", "run2"], p);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn alpha_sweep_writes_curves() {
    let dir = workspace();
    let p = dir.path();
    let out = stdout(&ok(dfcn(
        &["cv", "--config", "tiny.json", "--manifest", "ds/manifest.json", "--out", "sweep", "--sweep-alpha", "0,0.1"],
        p,
    )));
    assert!(out.contains("alpha 0:") && out.contains("alpha 0.1:"), "{out}");
    let csv = fs::read_to_string(p.join("sweep/curves.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("alpha,epoch,fold,bacc,seed,config_hash"));
    // 2 alphas × 2 folds × 2 epochs.
    assert_eq!(lines.count(), 8);
    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("sweep/sweep.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    assert!(p.join("sweep/alpha_0.1/fold_1/final.ckpt").exists());
}

#[test]
fn cross_validation_reports_every_fold() {
    let dir = workspace();
    let p = dir.path();
    ok(dfcn(&["cv", "--config", "tiny.json", "--manifest", "ds/manifest.json", "--out", "cv"], p));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("cv/cv_report.json")).unwrap()).unwrap();
    let folds = r["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 2);
    let mean = folds.iter().map(|f| f["report"]["bacc"].as_f64().unwrap()).sum::<f64>() / 2.0;
    assert!((mean - r["mean_bacc"].as_f64().unwrap()).abs() < 1e-9);
}

fn pgm(w: usize, h: usize, px: impl Fn(usize, usize) -> u8) -> Vec<u8> {
    let mut v = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            v.push(px(y, x));
        }
    }
    v
}

#[test]
fn import_crops_each_lung() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let (w, h) = (160, 40);
    let left = |x: usize| (10..40).contains(&x);
    let right = |x: usize| (110..140).contains(&x);
    fs::write(p.join("img.pgm"), pgm(w, h, |y, x| ((x * 3 + y) % 256) as u8)).unwrap();
    fs::write(p.join("mask.pgm"), pgm(w, h, |y, x| u8::from((5..35).contains(&y) && (left(x) || right(x))))).unwrap();
    // Only the left lung carries annotation.
    fs::write(p.join("lab.pgm"), pgm(w, h, |y, x| if (10..20).contains(&y) && left(x) { 2 } else { 255 })).unwrap();
    fs::write(p.join("cases.csv"), "# id,image,labels,mask\ncase1,img.pgm,lab.pgm,mask.pgm\n").unwrap();

    let out = stdout(&ok(dfcn(&["import", "--list", "cases.csv", "--out", "ds"], p)));
    assert!(out.contains("1 crops") && out.contains("1 without annotation"), "{out}");
    ok(dfcn(&["import", "--list", "cases.csv", "--out", "ds_all", "--keep-unannotated"], p));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("ds_all/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["records"].as_array().unwrap().len(), 2);
}
