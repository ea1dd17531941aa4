use std::path::Path;
use std::process::Command;

use udc::masks::{MaskSet, MaskStage, SIMPLEX_TOL};
use udc::mixsim::{Manifest, SimConfig};
use udc::tensor_io::read_tensor;

fn udc(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_udc"))
        .args(["--workers", "1"])
        .args(args)
        .output()
        .unwrap();
    out.status.code().unwrap()
}

fn simulate(root: &Path, count: usize) -> (Manifest, std::path::PathBuf) {
    let cfg = SimConfig {
        mics: 3,
        duration_s: 0.6,
        max_order: 2,
        ..SimConfig::default()
    };
    let cfg_path = root.join("sim.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let dir = root.join("corpus");
    let code = udc(&[
        "simulate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--seed",
        "3",
    ]);
    assert_eq!(code, 0);
    let manifest = Manifest::read(dir.join("manifest.json")).unwrap();
    (manifest, dir)
}

fn masks(path: &Path) -> MaskSet {
    MaskSet::from_tensor(&read_tensor(path).unwrap(), MaskStage::Aligned).unwrap()
}

#[test]
fn teach_then_align_a_single_file() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, dir) = simulate(tmp.path(), 1);
    assert_eq!(manifest.entries.len(), 1);
    let wav = dir.join(&manifest.entries[0].observation);
    let taught = tmp.path().join("m.tensor");
    let code = udc(&[
        "teach",
        "--in",
        wav.to_str().unwrap(),
        "--iters",
        "5",
        "--dft-size",
        "256",
        "--shift",
        "64",
        "--out",
        taught.to_str().unwrap(),
        "--dump-pgm",
    ]);
    assert_eq!(code, 0);
    let m = masks(&taught);
    m.check_simplex(SIMPLEX_TOL).unwrap();
    assert_eq!((m.classes(), m.bins()), (3, 129));
    assert!(tmp.path().join("m.class0.pgm").exists());

    let aligned = tmp.path().join("a.tensor");
    assert_eq!(udc(&["align", "--in", taught.to_str().unwrap(), "--out", aligned.to_str().unwrap()]), 0);
    masks(&aligned).check_simplex(SIMPLEX_TOL).unwrap();
}

#[test]
fn teacher_separation_and_evaluation_write_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, dir) = simulate(tmp.path(), 2);
    let m = dir.join("manifest.json");
    let sep = tmp.path().join("sep");
    let stft = ["--dft-size", "256", "--shift", "64"];
    let mut args = vec!["separate", "--manifest", m.to_str().unwrap(), "--out", sep.to_str().unwrap(), "--mode", "teacher"];
    args.extend(stft);
    assert_eq!(udc(&args), 0);
    let report = tmp.path().join("report.json");
    let mut args = vec![
        "evaluate",
        "--manifest",
        m.to_str().unwrap(),
        "--est-dir",
        sep.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ];
    args.extend(stft);
    assert_eq!(udc(&args), 0);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(report).unwrap()).unwrap();
    assert_eq!(json["count"], manifest.entries.len());
    assert!(json["gain_db"]["mean"].as_f64().unwrap().is_finite());
}

#[test]
fn bad_inputs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, dir) = simulate(tmp.path(), 1);
    let m = dir.join("manifest.json");
    let sep = tmp.path().join("sep");
    assert_eq!(udc(&["separate", "--manifest", m.to_str().unwrap(), "--out", sep.to_str().unwrap(), "--mode", "kmeans"]), 2);
    assert!(!sep.exists());
    let missing = tmp.path().join("missing.wav");
    let out = tmp.path().join("x.tensor");
    assert_eq!(udc(&["teach", "--in", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]), 2);
    assert_eq!(udc(&["teach", "--in", missing.to_str().unwrap(), "--classes", "1", "--out", out.to_str().unwrap()]), 2);
}
