use std::path::Path;
use std::process::Command;
use std::time::Instant;

use stepsnet::config::{emit_config, load_config, Format};
use stepsnet::harness::{TaskId, TrainConfig};
use stepsnet::presets::toy_mlp;
use stepsnet::steps::StepsConfig;
use stepsnet_cli::{preset_names, run_with, sha256_hex, MANIFEST};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stepsnet"));
    c.env_remove("STEPSNET_OUT");
    c
}

fn run(args: &[&str], out: Option<&Path>) -> (i32, String, String) {
    let mut argv = vec!["stepsnet".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let code = run_with(argv, out.map(Path::to_path_buf), &mut o, &mut e);
    (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
}

fn spiral_config(dir: &Path, steps: usize) -> std::path::PathBuf {
    let mut cfg = TrainConfig::new(TaskId::Spiral2, toy_mlp(&[8, 16], &[1, 1]).unwrap(), steps, 16);
    cfg.optimizer.lr = 1e-2;
    cfg.eval_every = 5;
    let path = dir.join("train.toml");
    std::fs::write(&path, emit_config(&cfg, Format::Toml).unwrap()).unwrap();
    path
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST)).unwrap()).unwrap()
}

#[test]
fn analyze_deit_s_json() {
    let (code, out, _) = run(&["analyze", "--preset", "deit-s"], None);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let flops = v["flops_total"].as_f64().unwrap();
    assert!((flops / 4.6e9 - 1.0).abs() <= 0.03, "{flops}");
    assert_eq!(v["params_total"], 22_050_664);
    assert_eq!(v["layers_total"], 62);
}

#[test]
fn analyze_every_preset_quickly() {
    for name in preset_names() {
        let t = Instant::now();
        let (code, out, err) = run(&["analyze", "--preset", name], None);
        assert_eq!(code, 0, "{name}: {err}");
        assert!(t.elapsed().as_secs_f64() < 1.0, "{name}");
        assert!(out.contains("layers_total"));
    }
}

#[test]
fn genconfig_three_steps() {
    let (code, out, _) = run(&["genconfig", "--base-depth", "12", "--width", "384", "--steps", "3"], None);
    assert_eq!(code, 0);
    let cfg: StepsConfig = toml::from_str(&out).unwrap();
    assert_eq!(cfg.step_widths(), vec![192, 272, 384]);
    assert_eq!(cfg.depths, vec![12, 6, 6]);
}

#[test]
fn unknown_subcommand_exits_1_with_usage() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_config_exits_1_and_names_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.toml");
    let mut spec = toy_mlp(&[8, 16], &[1, 1]).unwrap();
    spec.body.width = 20;
    std::fs::write(&path, emit_config(&spec, Format::Toml).unwrap()).unwrap();
    let (code, _, err) = run(&["analyze", "--config", path.to_str().unwrap()], None);
    assert_eq!(code, 1);
    assert!(err.contains("16") && err.contains("20"), "{err}");

    std::fs::write(&path, "tokens = 1\ntokenz = 3\n").unwrap();
    let (code, _, err) = run(&["analyze", "--config", path.to_str().unwrap()], None);
    assert_eq!(code, 1);
    assert!(err.contains("tokenz") && err.contains(":2:"), "{err}");
}

#[test]
fn train_writes_artifacts_and_manifest_under_env_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = spiral_config(dir.path(), 10);
    let out_dir = dir.path().join("run");
    let out = bin()
        .env("STEPSNET_OUT", &out_dir)
        .args(["train", "--config", cfg.to_str().unwrap(), "--set", "seed=3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["run.csv", "checkpoint.ssnc", "run.json", "config.toml", MANIFEST] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let m = manifest(&out_dir);
    assert_eq!(m["seed"], 3);
    assert_eq!(m["subcommand"], "train");
    let written = std::fs::read(out_dir.join("config.toml")).unwrap();
    assert_eq!(m["config_hash"], sha256_hex(&written));
    let artifacts: Vec<&str> = m["artifacts"].as_array().unwrap().iter().map(|a| a.as_str().unwrap()).collect();
    assert!(artifacts.contains(&"checkpoint.ssnc") && artifacts.contains(&"run.csv"));

    // The manifest's config and seed reproduce the run.
    let again: TrainConfig = load_config(&out_dir.join("config.toml"), &[]).unwrap();
    assert_eq!(again.seed, 3);
    let redo = dir.path().join("redo");
    let (code, _, err) = run(&["train", "--config", out_dir.join("config.toml").to_str().unwrap()], Some(&redo));
    assert_eq!(code, 0, "{err}");
    assert_eq!(std::fs::read(redo.join("run.csv")).unwrap(), std::fs::read(out_dir.join("run.csv")).unwrap());
    assert_eq!(
        std::fs::read(redo.join("checkpoint.ssnc")).unwrap(),
        std::fs::read(out_dir.join("checkpoint.ssnc")).unwrap()
    );

    // evaluate reproduces the last in-run metric
    let (code, out, err) = run(
        &["evaluate", "--config", cfg.to_str().unwrap(), "--set", "seed=3", "--checkpoint", out_dir.join("checkpoint.ssnc").to_str().unwrap()],
        None,
    );
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let csv = std::fs::read_to_string(out_dir.join("run.csv")).unwrap();
    let last: f64 = csv.lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!((v["value"].as_f64().unwrap() - last).abs() < 1e-6);
}

#[test]
fn divergence_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = spiral_config(dir.path(), 30);
    let (code, _, err) = run(
        &["train", "--config", cfg.to_str().unwrap(), "--set", "optimizer.lr=1e300", "--set", "optimizer.warmup_steps=0"],
        Some(&dir.path().join("out")),
    );
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("diverged"));
}

#[test]
fn ablate_mask_and_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = spiral_config(dir.path(), 10);
    let run_dir = dir.path().join("run");
    assert_eq!(run(&["train", "--config", cfg.to_str().unwrap()], Some(&run_dir)).0, 0);
    let ab = dir.path().join("ab");
    let ck = run_dir.join("checkpoint.ssnc");
    let (code, out, err) = run(
        &["ablate", "--config", cfg.to_str().unwrap(), "--sweep", "mask_table6", "--checkpoint", ck.to_str().unwrap()],
        Some(&ab),
    );
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("path,masked_channels,metric\n"));
    assert!(ab.join("ablation_mask_table6.csv").exists());
    assert_eq!(manifest(&ab)["subcommand"], "ablate");

    let (code, _, err) = run(&["ablate", "--config", cfg.to_str().unwrap(), "--sweep", "drop_table7"], Some(&ab));
    assert_eq!(code, 1);
    assert!(err.contains("precondition"), "{err}");
}

#[test]
fn probe_writes_gamma_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&["probe", "--preset", "toy-lm-steps2", "--zero-branches"], Some(dir.path()));
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(dir.path().join("gamma.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "block_index,step_index,width,sigma0,sigma_l,gamma");
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 6);
    for r in rows {
        let gamma: f64 = r.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(gamma, 1.0);
    }
    assert!(dir.path().join("gamma_depth.csv").exists());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, err) = run(&["gradcheck"], Some(dir.path()));
    assert_eq!(code, 0, "{out}{err}");
    assert!(!out.contains("FAIL"));
    assert!(dir.path().join("gradcheck.json").exists());
}
