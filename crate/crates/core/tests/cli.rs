use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cect_forge::cli::Manifest;
use cect_forge::registration::RigidTransform2D;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cect-forge"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn cect-forge")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn generate(dir: &Path, extra: &[&str]) -> Manifest {
    let mut args = vec!["generate", "--out", path(dir), "--count", "4", "--seed", "3"];
    if !extra.contains(&"--size") {
        args.extend(["--size", "64"]);
    }
    args.extend_from_slice(extra);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn missing_input_fails_with_exit_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.huv");
    let out = run(&["metrics", "--a", path(&missing), "--b", path(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.huv"));
}

#[test]
fn dice_without_mask_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    generate(&data, &[]);
    let ct = data.join("case_0000/ct.huv");
    let out = run(&["metrics", "--a", path(&ct), "--b", path(&ct), "--dice"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected_and_leaves_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let out_dir = tmp.path().join("out");
    let out = run(&["generate", "--out", path(&out_dir), "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
    assert!(!out_dir.exists());
}

#[test]
fn generate_writes_volumes_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let m = generate(&data, &["--depth", "2"]);
    assert_eq!(m.cases.len(), 4);
    assert_eq!(m.depth, 2);
    for c in &m.cases {
        for f in [&c.ct, &c.cect, &c.chamber_mask, &c.heart_mask] {
            let v = cect_forge::image::load_volume(data.join(f)).unwrap();
            assert_eq!((v.width, v.height, v.depth), (64, 64, 2));
        }
        assert!(c.chamber_volume_ml > 0.0);
        assert!(c.displacement.is_none());
    }
    assert!(data.join("resolved_config.toml").exists());
    // same seed, same bytes
    let again = tmp.path().join("e");
    generate(&again, &["--depth", "2"]);
    assert_eq!(
        fs::read(data.join("case_0002/cect.huv")).unwrap(),
        fs::read(again.join("case_0002/cect.huv")).unwrap()
    );
}

#[test]
fn metrics_of_identical_volumes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    generate(&data, &[]);
    let cect = data.join("case_0001/cect.huv");
    let heart = data.join("case_0001/heart_mask.huv");
    let out = run(&["metrics", "--a", path(&cect), "--b", path(&cect), "--mask", path(&heart), "--dice"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["psnr_db"], "+inf");
    assert!((v["nmi"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(v["dice"].as_f64().unwrap(), 1.0);
}

#[test]
fn oracle_eval_writes_report_and_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    generate(&data, &["--noise", "0"]);
    let out_dir = tmp.path().join("eval");
    let out = run(&["eval", "--oracle", "--all", "--data", path(&data), "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["psnr_db"], "+inf");
    assert_eq!(report["volumes"], 4);
    assert_eq!(report["dice"].as_f64().unwrap(), 1.0);
    assert_eq!(report["dv_percent"].as_f64().unwrap(), 0.0);
    let ba = fs::read_to_string(out_dir.join("bland_altman.csv")).unwrap();
    assert!(ba.starts_with("mean,diff\n"));
    assert_eq!(ba.lines().count(), 5);
    assert!(out_dir.join("predictions/case_0003_chamber_mask.huv").exists());
}

#[test]
fn register_undoes_injected_displacement() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let m = generate(&data, &["--displace", "--size", "128", "--noise", "0"]);
    let case = &m.cases[0];
    let applied = case.displacement.expect("displaced");
    let moved = tmp.path().join("aligned.huv");
    // moving: displaced CECT; fixed: the unmoved CT of the same anatomy
    let out = run(&[
        "register",
        "--moving",
        path(&data.join(&case.cect)),
        "--fixed",
        path(&data.join(&case.ct)),
        "--out",
        path(&moved),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = String::from_utf8_lossy(&out.stdout);
    let r: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    let found = RigidTransform2D::new(
        r["tx"].as_f64().unwrap(),
        r["ty"].as_f64().unwrap(),
        r["theta_deg"].as_f64().unwrap(),
    );
    let (dist, ang) = found.compose(&applied).magnitude();
    assert!(dist < 1.0 && ang < 1.0, "residual {dist} px {ang}°");
    assert!(r["mi_final"].as_f64().unwrap() >= r["mi_initial"].as_f64().unwrap());
    assert!(moved.exists());
}

#[test]
fn train_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let out = run(&["generate", "--out", path(&data), "--count", "15", "--size", "32", "--seed", "1"]);
    assert!(out.status.success());
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[model]\ninput_size = 32\n[train]\nbatch_size = 4\ncheckpoint_every = 1\n").unwrap();
    let run_dir = tmp.path().join("run");
    let out = run(&[
        "train", "--data", path(&data), "--out", path(&run_dir), "--config", path(&cfg), "--epochs", "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history = fs::read_to_string(run_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,val_dice,rmse,bce,l2\n"));
    assert_eq!(history.lines().count(), 3);
    assert!(run_dir.join("checkpoints/checkpoint_0002.cwt").exists());
    assert!(run_dir.join("checkpoints/checkpoint_0002.json").exists());
    let resolved = fs::read_to_string(run_dir.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("epochs = 2"));

    let eval_dir = tmp.path().join("eval");
    let weights = run_dir.join("weights.cwt");
    let out = run(&["eval", "--weights", path(&weights), "--data", path(&data), "--out", path(&eval_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    // 15 cases split 12/1/2
    assert_eq!(report["volumes"], 2);
}

#[test]
fn model_size_must_match_data() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    generate(&data, &[]);
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[model]\ninput_size = 32\n").unwrap();
    let run_dir = tmp.path().join("run");
    let out = run(&["train", "--data", path(&data), "--out", path(&run_dir), "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!run_dir.exists());
}
