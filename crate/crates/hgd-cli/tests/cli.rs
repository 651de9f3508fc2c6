//! End-to-end tests driving the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hgd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hgd"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    hgd()
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary should run")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Phantom data plus a small-scale run config in one temp directory.
fn setup(dir: &Path, steps: usize, seed: u64) -> PathBuf {
    assert_ok(&run(
        &["make-phantoms", "--seed", "3", "--subjects", "4", "--resolution", "32", "--out", "data"],
        dir,
    ));
    let cfg = format!(
        r#"{{
  "net": {{"resolution": 32, "content_hw": 8, "content_channels": 16, "attr_dim": 4,
          "base_channels": 4, "content_res_blocks": 2, "gen_res_blocks": 1}},
  "train": {{"steps": {steps}, "seed": {seed}, "checkpoint_every": 0}},
  "bank": {{"structure_slots": [[0,1],[1,1],[2,2],[3,2]], "global_slots": 6}},
  "data": {{"train_manifest": "data/manifest_train.json",
           "test_manifest": "data/manifest_test.json"}}
}}"#
    );
    let path = dir.join("cfg.json");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn make_phantoms_is_deterministic_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let args = ["make-phantoms", "--seed", "5", "--subjects", "3", "--resolution", "32"];
    assert_ok(&run(&[&args[..], &["--out", "a"]].concat(), dir));
    assert_ok(&run(&[&args[..], &["--out", "b"]].concat(), dir));
    assert!(dir.join("a/manifest_train.json").exists());
    assert!(dir.join("a/manifest_test.json").exists());

    let list = |root: &Path| {
        let mut v: Vec<PathBuf> = walk(root);
        v.sort();
        v
    };
    let a = list(&dir.join("a"));
    let b = list(&dir.join("b"));
    assert_eq!(a.len(), b.len());
    for (fa, fb) in a.iter().zip(&b) {
        assert_eq!(
            fa.strip_prefix(dir.join("a")).unwrap(),
            fb.strip_prefix(dir.join("b")).unwrap()
        );
        if fa.extension().is_some_and(|e| e == "json") {
            // manifests embed the output directory in their paths
            let ta = std::fs::read_to_string(fa).unwrap();
            let tb = std::fs::read_to_string(fb).unwrap();
            assert_eq!(ta.replace("a/", "b/"), tb, "{fa:?}");
        } else {
            assert_eq!(std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap(), "{fa:?}");
        }
    }

    let bad = run(&["make-phantoms", "--subjects", "1", "--out", "c"], dir);
    assert_eq!(code(&bad), 3);
}

fn walk(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn train_logs_all_terms_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = setup(dir, 6, 7);
    assert_ok(&run(&["train", "--config", cfg.to_str().unwrap(), "--out", "run"], dir));
    let log = std::fs::read_to_string(dir.join("run/train_log.csv")).unwrap();
    assert!(log.starts_with(
        "step,adv_content,adv_domain,cycle,self_recon,pgd,sgd,ggd,total\n"
    ));
    assert_eq!(log.lines().count(), 7);
    assert!(dir.join("run/checkpoint.bin").exists());
    assert!(dir.join("run/config.json").exists());

    assert_ok(&run(&["train", "--config", cfg.to_str().unwrap(), "--out", "run"], dir));
    assert_eq!(
        std::fs::read_to_string(dir.join("run/train_log.csv")).unwrap(),
        log,
        "rerun into the same --out must reproduce the log"
    );
}

#[test]
fn train_ablations_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = setup(dir, 4, 1);
    let cfg = cfg.to_str().unwrap();

    assert_ok(&run(
        &["train", "--config", cfg, "--out", "base", "--ablate", "pgd,sgd,ggd,bank"],
        dir,
    ));
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("base/config.json")).unwrap())
            .unwrap();
    assert_eq!(echoed["train"]["use_pgd"], false);
    assert_eq!(echoed["train"]["structural_slots"], false);
    let log = std::fs::read_to_string(dir.join("base/train_log.csv")).unwrap();
    let row: Vec<&str> = log.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[5..8], ["0.000000000", "0.000000000", "0.000000000"]);

    let bad = run(&["train", "--config", cfg, "--out", "x", "--ablate", "pgd,nope"], dir);
    assert_eq!(code(&bad), 2);

    assert_ok(&run(
        &["train", "--config", cfg, "--out", "ov", "--set", "train.steps=2", "--set", "loss.tau1=0.25"],
        dir,
    ));
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("ov/config.json")).unwrap())
            .unwrap();
    assert_eq!(echoed["train"]["steps"], 2);
    assert_eq!(echoed["loss"]["tau1"], 0.25);

    let bad = run(&["train", "--config", cfg, "--out", "x", "--set", "train.bogus=1"], dir);
    assert_eq!(code(&bad), 3);
    let bad = run(&["train", "--config", "absent.json", "--out", "x"], dir);
    assert_eq!(code(&bad), 3);
}

#[test]
fn translate_outputs_are_bounded_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = setup(dir, 4, 2);
    assert_ok(&run(&["train", "--config", cfg.to_str().unwrap(), "--out", "run"], dir));
    let base = [
        "translate", "--checkpoint", "run/checkpoint.bin",
        "--input", "data/manifest_test.json", "--source", "0", "--target", "1",
    ];
    assert_ok(&run(&[&base[..], &["--out", "t1"]].concat(), dir));
    assert_ok(&run(&[&base[..], &["--out", "t2"]].concat(), dir));

    let files = walk(&dir.join("t1"));
    assert!(!files.is_empty());
    for f in &files {
        let (_, _, px) = read_npy_f32(f);
        assert!(px.iter().all(|v| (-1.0..=1.0).contains(v)), "{f:?} out of range");
        let twin = dir.join("t2").join(f.file_name().unwrap());
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(&twin).unwrap());
    }

    let bad = run(
        &[&base[..5], &["--source", "0", "--target", "9", "--out", "x"]].concat(),
        dir,
    );
    assert_eq!(code(&bad), 3);
}

/// Minimal NPY v1.0 reader for little-endian f32 matrices.
fn read_npy_f32(path: &Path) -> (usize, usize, Vec<f32>) {
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(&bytes[..6], b"\x93NUMPY");
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(&bytes[10..10 + header_len]).unwrap();
    assert!(header.contains("'descr': '<f4'"), "{header}");
    let shape = header.split("'shape': (").nth(1).unwrap();
    let dims: Vec<usize> = shape
        .split(')')
        .next()
        .unwrap()
        .split(',')
        .filter_map(|s| s.trim().parse().ok())
        .collect();
    let data = &bytes[10 + header_len..];
    let vals: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(vals.len(), dims[0] * dims[1]);
    (dims[0], dims[1], vals)
}

#[test]
fn evaluate_reports_fidelity_and_overlap() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = setup(dir, 4, 3);
    assert_ok(&run(&["train", "--config", cfg.to_str().unwrap(), "--out", "run"], dir));
    let out = hgd()
        .args([
            "evaluate", "--checkpoint", "run/checkpoint.bin",
            "--manifest", "data/manifest_test.json", "--direction", "0to1", "--out", "ev",
        ])
        .env("HGD_NUM_WORKERS", "2")
        .current_dir(dir)
        .output()
        .unwrap();
    assert_ok(&out);
    let csv = std::fs::read_to_string(dir.join("ev/metrics.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.contains("PSNR,SSIM"));
    for class in ["background", "csf", "gm", "wm"] {
        assert!(header.contains(&format!("dice_{class}")), "{header}");
    }
    assert!(csv.lines().count() >= 2);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("ev/summary.json")).unwrap())
            .unwrap();
    assert!(summary["mean_psnr_db"].as_f64().unwrap().is_finite());
    assert!(summary["mean_ssim"].as_f64().unwrap().is_finite());

    let bad = run(
        &["evaluate", "--checkpoint", "gone.bin", "--manifest", "data/manifest_test.json",
          "--direction", "0to1", "--out", "x"],
        dir,
    );
    assert_eq!(code(&bad), 3);
    let bad = run(
        &["evaluate", "--checkpoint", "run/checkpoint.bin", "--manifest", "data/manifest_test.json",
          "--direction", "sideways", "--out", "x"],
        dir,
    );
    assert_eq!(code(&bad), 3);
}

#[test]
fn ablate_emits_sorted_variant_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = setup(dir, 3, 5);
    assert_ok(&run(
        &["ablate", "--config", cfg.to_str().unwrap(), "--out", "abl"],
        dir,
    ));
    let csv = std::fs::read_to_string(dir.join("abl/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,direction,PSNR,SSIM");
    assert_eq!(lines.len(), 9, "4 variants x 2 directions");
    let rows: Vec<Vec<&str>> = lines[1..].iter().map(|l| l.split(',').collect()).collect();
    let mut keys: Vec<(&str, &str)> = rows.iter().map(|r| (r[0], r[1])).collect();
    let sorted = {
        let mut s = keys.clone();
        s.sort();
        s
    };
    assert_eq!(keys, sorted, "table must be sorted by variant");
    keys.dedup();
    assert_eq!(keys.len(), 8);

    // identical seeds across variants: every run directory echoes the same seed
    for variant in ["0-baseline", "1-pgd", "2-pgd-sgd", "3-full"] {
        let echoed: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join(format!("abl/{variant}/config.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(echoed["train"]["seed"], 5);
    }
}
