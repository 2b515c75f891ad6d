use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use microrecon::volume::{save_image, Image2D, Volume3D};
use microrecon_cli::manifest::file_sha256;

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_microrecon")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

/// Blocky pseudo-random 64² reference.
fn reference(dir: &Path) -> PathBuf {
    let img = Image2D::from_fn(64, 64, |y, x| ((x / 4) * 31 + (y / 4) * 17 + (x / 4) * (y / 4)) % 5 < 2).unwrap();
    let path = dir.join("ref.pgm");
    save_image(&img, &path).unwrap();
    path
}

fn write_config(dir: &Path, out: &str) -> PathBuf {
    let cfg = format!(
        r#"{{
  "input": {{"reference": "ref.pgm"}},
  "design": {{"m": 2, "n": 4}},
  "train": {{"iterations": 4, "log_every": 0, "seed": 5}},
  "reconstruct": {{"dims": [16, 16, 16], "sub_block": [8, 8, 8], "seed": 9}},
  "evaluate": {{"max_lag": 6, "lpd_window": 4, "lpd_bin_width": 0.1}},
  "sa": {{"max_swaps": 2000, "max_lag": 8}},
  "output": "{out}"
}}"#
    );
    let path = dir.join(format!("{out}.json"));
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn full_pipeline_emits_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    reference(d);
    write_config(d, "run");
    for cmd in ["analyze", "design", "train", "reconstruct", "evaluate", "sa"] {
        ok(&bin(&["--config", "run.json", cmd], d));
    }
    for f in [
        "s2.csv",
        "prior.json",
        "design.json",
        "model.mm01",
        "train_report.json",
        "train_loss.csv",
        "recon.mv01",
        "recon.json",
        "recon_mid_xy.pgm",
        "evaluation.json",
        "eval_v0_s2.csv",
        "eval_v0_lineal.csv",
        "eval_v0_cluster.csv",
        "eval_v0_lpd.csv",
        "eval_reference_s2.csv",
        "sa_best.pgm",
        "sa_trace.csv",
        "sa.json",
    ] {
        assert!(d.join("run").join(f).is_file(), "missing {f}");
    }
    for cmd in ["analyze", "design", "train", "reconstruct", "evaluate", "sa"] {
        let text = std::fs::read_to_string(d.join("run").join(format!("manifest_{cmd}.json"))).unwrap();
        let m: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(m["command"], cmd);
        assert!(m["outputs"].as_array().is_some_and(|o| !o.is_empty()), "{cmd}");
    }
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/recon.json")).unwrap()).unwrap();
    assert_eq!(sidecar["model_sha256"], file_sha256(&d.join("run/model.mm01")).unwrap());
    let v = Volume3D::load(d.join("run/recon.mv01")).unwrap();
    assert_eq!(v.dims(), [16, 16, 16]);
}

#[test]
fn train_and_reconstruct_twice_give_identical_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    reference(d);
    let mut hashes = Vec::new();
    for out in ["a", "b"] {
        write_config(d, out);
        let cfg = format!("{out}.json");
        ok(&bin(&["--config", &cfg, "train"], d));
        ok(&bin(&["--config", &cfg, "reconstruct"], d));
        hashes.push([file_sha256(&d.join(out).join("model.mm01")).unwrap(), file_sha256(&d.join(out).join("recon.mv01")).unwrap()]);
    }
    assert_eq!(hashes[0], hashes[1]);
    ok(&bin(&["--config", "a.json", "--seed", "6", "reconstruct"], d));
    assert_ne!(file_sha256(&d.join("a/recon.mv01")).unwrap(), hashes[1][1]);
}

#[test]
fn evaluating_a_volume_against_itself_gives_zero_deviation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let v = Volume3D::from_fn([12, 12, 12], |z, y, x| (x + 2 * y + 3 * z) % 4 == 0 || (x * y + z) % 5 == 1).unwrap();
    v.save(d.join("v.mv01")).unwrap();
    ok(&bin(&["--out", "o", "evaluate", "--volume", "v.mv01", "--ground-truth", "v.mv01", "--max-lag", "5"], d));
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("o/evaluation.json")).unwrap()).unwrap();
    let devs = s["volumes"][0]["vs_ground_truth"].as_object().unwrap();
    assert_eq!(devs.len(), 4);
    assert!(devs.values().all(|x| x.as_f64() == Some(0.0)), "{devs:?}");
}

#[test]
fn analyze_flags_degenerate_and_unconverged_references() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    save_image(&Image2D::from_fn(32, 32, |_, _| true).unwrap(), d.join("pore.pgm")).unwrap();
    ok(&bin(&["--out", "o", "analyze", "--image", "pore.pgm"], d));
    let p: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("o/prior.json")).unwrap()).unwrap();
    assert_eq!(p[0]["l_cor"], 1);
    assert!(p[0]["warnings"][0].as_str().unwrap().contains("degenerate"));

    // Solid left half, pore right half: S₂ never settles to φ².
    save_image(&Image2D::from_fn(48, 48, |_, x| x >= 24).unwrap(), d.join("ramp.pgm")).unwrap();
    ok(&bin(&["--out", "o", "analyze", "--image", "ramp.pgm"], d));
    let p: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("o/prior.json")).unwrap()).unwrap();
    assert_eq!(p[0]["converged"], false);
    assert_eq!(p[0]["m"], 12);
    assert!(!p[0]["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"train": {"iters": 3}}"#).unwrap();
    assert_eq!(bin(&["--config", "bad.json", "train"], d).status.code(), Some(2));
    assert_eq!(bin(&["--config", "missing.json", "analyze"], d).status.code(), Some(2));
    assert_eq!(bin(&["analyze"], d).status.code(), Some(2));
    assert_eq!(bin(&["bogus"], d).status.code(), Some(2));
    assert_eq!(bin(&["--out", "o", "reconstruct"], d).status.code(), Some(3));

    let a = Volume3D::from_fn([8, 8, 8], |z, _, _| z % 2 == 0).unwrap();
    let b = Volume3D::from_fn([8, 8, 6], |z, _, _| z % 2 == 0).unwrap();
    a.save(d.join("a.mv01")).unwrap();
    b.save(d.join("b.mv01")).unwrap();
    assert_eq!(bin(&["--out", "o", "evaluate", "--volume", "a.mv01", "--ground-truth", "b.mv01"], d).status.code(), Some(3));
}
