use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lavrentiev"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn oracle_data_noise_invert_metrics_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("clean.bin");
    let noisy = d.join("noisy.bin");
    let inv = d.join("inv");
    let truth = d.join("truth");

    let out = run(&["make-data", "--desk", "--from", "oracle", "--phantom", "letter-c", "--out", path(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["add-noise", "--data", path(&data), "--delta", "0.05", "--seed", "3", "--out", path(&noisy)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        "invert", "--desk", "--data", path(&noisy), "--gamma", "1e-8", "--bvp", "1", "--solver", "direct", "--out",
        path(&inv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["gamma"], 1e-8);
    for f in ["q_rec.raw", "q_rec.raw.json", "c_rec.raw", "q_rec_slice_z.csv", "solver_log.json", "manifest.json"] {
        assert!(inv.join(f).exists(), "{f} missing");
    }

    let out = run(&["phantom", "--kind", "letter-c", "--out", path(&truth)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["metrics", "--rec", path(&inv.join("q_rec.raw")), "--true", path(&truth.join("letter_c.raw"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(m["rel_l2_error"].as_f64().unwrap() > 0.0);

    // Same inputs and seed: same noisy file.
    let again = d.join("noisy2.bin");
    run(&["add-noise", "--data", path(&data), "--delta", "0.05", "--seed", "3", "--out", path(&again)]);
    assert_eq!(std::fs::read(&noisy).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"N": 6, "no_such_field": 1}"#).unwrap();
    let out = run(&["basis", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(&cfg, r#"{"inv_h": 0.07}"#).unwrap();
    let out = run(&["phantom", "--config", path(&cfg), "--kind", "ball", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["phantom", "--kind", "unicorn", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["forward", "--desk", "--sources", "5..2", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["add-noise", "--data", path(&dir.path().join("missing.bin")), "--delta", "0.1", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn basis_dump_lists_the_derivative_matrix() {
    let out = run(&["basis", "--dump"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!text.trim().is_empty());
}
