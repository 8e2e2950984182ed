use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn prunekv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prunekv"))
        .args(args)
        .env("PRUNEKV_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--steps", "6", "--batch", "2", "--d-model", "16", "--layers", "2", "--heads", "2", "--r", "4",
    "--context", "32", "--synthetic-chars", "6000", "--lr", "3e-3", "--gamma", "0.3", "--log-every", "2",
];

fn train_tiny(out: &Path) {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let run = prunekv(&args);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = prunekv(&["train", "--no-such-flag"]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&prunekv(&[])), 2);
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let o = dir.path().to_str().unwrap();
    let out = prunekv(&["train", "--corpus", "/definitely/missing.txt", "--out", o]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = prunekv(&["generate", "--ckpt", "/definitely/missing", "--prompt", "a", "--out", o]);
    assert_eq!(code(&out), 2);
    let out = prunekv(&["train", "--steps", "1"]);
    assert_eq!(code(&out), 2, "output directory is required");
    let out = prunekv(&["benchmark", "--variant", "sideways", "--out", o]);
    assert_eq!(code(&out), 2);
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train\nsteps = ").unwrap();
    let out = prunekv(&["--config", cfg.to_str().unwrap(), "selftest"]);
    assert_eq!(code(&out), 2);
    std::fs::write(&cfg, "[train]\nstepz = 3\n").unwrap();
    let out = prunekv(&["--config", cfg.to_str().unwrap(), "train", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("stepz"));
}

#[test]
fn runtime_failure_exits_one() {
    let dir = TempDir::new().unwrap();
    let o = dir.path().to_str().unwrap();
    // a checkpoint directory whose tensor file is missing
    train_tiny(dir.path());
    std::fs::remove_file(dir.path().join("checkpoint/params.bin")).unwrap();
    let ckpt = dir.path().join("checkpoint");
    let out = prunekv(&["generate", "--ckpt", ckpt.to_str().unwrap(), "--prompt", "the", "--out", o]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn config_file_fills_in_and_flags_override() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[train]\nsteps = 3\nbatch = 1\nd_model = 16\nlayers = 1\nheads = 2\nr = 4\ncontext = 16\nsynthetic_chars = 4000\ngamma = 0.5\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let run = prunekv(&["--config", cfg.to_str().unwrap(), "train", "--gamma", "0.1", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let manifest: serde_json::Value = serde_json::from_slice(&read(&out_dir.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["gamma"], 0.1);
    assert_eq!(manifest["config"]["steps"], 3);
    assert_eq!(manifest["config"]["lr"], 1e-4);
    let records = String::from_utf8(read(&out_dir.join("records.csv"))).unwrap();
    assert_eq!(records.lines().count(), 4);
}

#[test]
fn commands_reproduce_their_outputs() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    train_tiny(a.path());
    train_tiny(b.path());
    // the run manifests echo their (different) output directories
    for f in ["records.csv", "eval.json", "checkpoint/params.bin", "checkpoint/manifest.json"] {
        assert!(read(&a.path().join(f)) == read(&b.path().join(f)), "{f} differs between identical runs");
    }

    let ckpt = a.path().join("checkpoint");
    let gen = |out: &Path| {
        let run = prunekv(&[
            "generate", "--ckpt", ckpt.to_str().unwrap(), "--prompt", "the red", "--prompt", "a", "--max-new", "12",
            "--sampling", "temperature:1.0", "--seed", "4", "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(code(&run), 0, "{}", stderr(&run));
    };
    let (g1, g2) = (a.path().join("gen"), b.path().join("gen"));
    gen(&g1);
    gen(&g2);
    for f in ["tokens.txt", "generations.txt", "drops.csv"] {
        assert_eq!(read(&g1.join(f)), read(&g2.join(f)), "{f}");
    }
    let tokens = String::from_utf8(read(&g1.join("tokens.txt"))).unwrap();
    assert_eq!(tokens.lines().count(), 2);
    assert!(tokens.lines().all(|l| l.split(' ').count() == 12));
    let steps = String::from_utf8(read(&g1.join("steps.csv"))).unwrap();
    assert!(steps.starts_with("step,step_ms,attention_ms,sparsity_l0,sparsity_l1"));
}

#[test]
fn generate_accepts_token_ids_and_dense_prefill() {
    let dir = TempDir::new().unwrap();
    train_tiny(dir.path());
    let prompts = dir.path().join("prompts.txt");
    std::fs::write(&prompts, "1 2 3 4\n5 6\n").unwrap();
    let out = dir.path().join("gen");
    let run = prunekv(&[
        "generate", "--ckpt", dir.path().join("checkpoint").to_str().unwrap(), "--prompts-file",
        prompts.to_str().unwrap(), "--token-ids", "--prefill", "dense", "--max-new", "5", "--variant", "local",
        "--k", "3", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let report: serde_json::Value = serde_json::from_slice(&read(&out.join("report.json"))).unwrap();
    assert_eq!(report["policy"], "local:3");
    assert_eq!(report["batch"], 2);
}

#[test]
fn benchmark_writes_one_row_per_cell() {
    let dir = TempDir::new().unwrap();
    let run = prunekv(&[
        "benchmark", "--variant", "dense", "--context", "24,40", "--batch", "1,2", "--steps", "2", "--repeats", "1",
        "--warmups", "0", "--d-model", "16", "--layers", "1", "--heads", "2", "--r", "4", "--homogeneous", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let csv = String::from_utf8(read(&dir.path().join("benchmark.csv"))).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("context,batch,policy,homogeneous"));
    assert!(lines[1..].iter().all(|l| l.contains(",dense,true,")));
    let manifest: serde_json::Value = serde_json::from_slice(&read(&dir.path().join("manifest.json"))).unwrap();
    assert_eq!(manifest["config"]["context"], serde_json::json!([24, 40]));
}

#[test]
fn analyze_emits_tables() {
    let dir = TempDir::new().unwrap();
    train_tiny(dir.path());
    let out = dir.path().join("analysis");
    let run = prunekv(&[
        "analyze", "--ckpt", dir.path().join("checkpoint").to_str().unwrap(), "--windows", "3", "--context", "24",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    for f in ["summary.json", "sparsity_per_layer.csv", "kept_by_position.csv", "triggers_by_token.csv", "mask_l0.csv", "mask_l1.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let mask = String::from_utf8(read(&out.join("mask_l1.csv"))).unwrap();
    assert_eq!(mask.lines().count(), 24);
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_prunekv"))
        .args(["selftest"])
        .env("PRUNEKV_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}
