use std::path::Path;
use std::process::{Command, Output};

fn fgr(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_fgr")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "fgr {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const CONFIG: &str = r#"{"model":"mlp","epochs":2,"batch_size":16,"lr":0.001,"rho":0.2,
    "stage1":{"epochs":2,"batch_size":16,"lr":0.003}}"#;

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let cfg = root.join("cfg.json");
    std::fs::write(&cfg, CONFIG).unwrap();

    fgr(&["gen-data", "--out", p(&data), "--n", "60", "--size", "8", "--seed", "3", "--texture-strength", "0.05"]);
    for split in ["train", "val", "test_id", "test_shift"] {
        assert!(data.join(format!("{split}.bin")).exists());
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["counts"]["train"], 60);

    let stage1 = root.join("stage1");
    fgr(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&stage1)]);
    assert!(stage1.join("model.ckpt").exists());

    let fgr_dir = root.join("fgr");
    let init = stage1.join("model.ckpt");
    fgr(&["finetune-fgr", "--config", p(&cfg), "--init", p(&init), "--data", p(&data), "--out", p(&fgr_dir)]);
    let log = std::fs::read_to_string(fgr_dir.join("training_log.csv")).unwrap();
    assert!(log.lines().next().unwrap().contains("alignment"));
    assert!(fgr_dir.join("conflict.json").exists());

    let ckpt = fgr_dir.join("model.ckpt");
    fgr(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--corruptions", "contrast,brightness"]);
    let metrics = std::fs::read_to_string(fgr_dir.join("metrics.csv")).unwrap();
    // Header, clean id row, 2 x 5 corrupted rows, clean shift row.
    assert_eq!(metrics.lines().count(), 1 + 1 + 10 + 1);

    let report = fgr(&["report", "--run", p(&fgr_dir)]);
    let text = String::from_utf8(report.stdout).unwrap();
    assert!(text.contains("# metrics") && text.contains("violations 0"));

    let ablate = root.join("ablate");
    fgr(&["ablate", "--config", p(&cfg), "--data", p(&data), "--out", p(&ablate)]);
    assert_eq!(std::fs::read_to_string(ablate.join("ablation.csv")).unwrap().lines().count(), 5);

    let sweep = root.join("sweep");
    fgr(&["sweep", "--config", p(&cfg), "--data", p(&data), "--param", "lambda", "--values", "15,25", "--out", p(&sweep)]);
    assert_eq!(std::fs::read_to_string(sweep.join("sweep.csv")).unwrap().lines().count(), 3);
}

#[test]
fn filter_round_trips_ppm() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in.ppm");
    let output = tmp.path().join("out.ppm");
    let mut bytes = b"P6\n16 16\n255\n".to_vec();
    bytes.extend((0..16 * 16 * 3).map(|i| if (i / 3 + i / 48) % 2 == 0 { 230u8 } else { 20 }));
    std::fs::write(&input, bytes).unwrap();
    fgr(&["filter", "--input", p(&input), "--lambda", "15", "--output", p(&output)]);
    let out = std::fs::read(&output).unwrap();
    assert!(out.starts_with(b"P6"));
    assert_eq!(out.len(), std::fs::read(&input).unwrap().len());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fgr"))
        .args(["eval", "--ckpt", p(&tmp.path().join("missing.ckpt"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = Command::new(env!("CARGO_BIN_EXE_fgr"))
        .args(["report", "--run", p(tmp.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
