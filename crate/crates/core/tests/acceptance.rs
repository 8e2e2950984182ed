//! Acceptance run: one line per criterion. Failures are reported, and make
//! the exit status nonzero only when `PRUNEKV_ACCEPTANCE_STRICT` is set.
//!
//! Criteria run sequentially so wall-clock checks are not disturbed by
//! each other.

use std::process::ExitCode;
use std::time::Instant;

use prunekv::inference::{benchmark, BenchmarkConfig, BenchmarkRow};
use prunekv::selftest::{self, SuiteReport};
use prunekv::training::{evaluate, train_from, Corpus, EvalReport, TrainConfig};
use prunekv::{Alpha, GateMode, ModelConfig, ModelParams, PruningVariant};

struct Line {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn from_suite(name: &'static str, report: SuiteReport, budget_secs: Option<f64>) -> Line {
    let in_time = budget_secs.is_none_or(|b| report.seconds < b);
    let budget = budget_secs.map_or(String::new(), |b| format!(", budget {b}s"));
    Line {
        name,
        passed: report.passed && in_time,
        detail: format!("{} [{:.1}s{budget}]", report.detail, report.seconds),
    }
}

const SWEEP_GAMMAS: [f64; 4] = [0.0, 0.1, 0.3, 1.0];
const SWEEP_STEPS: u64 = 3000;
const SWEEP_BUDGET_SECS: f64 = 3600.0;

fn gamma_sweep() -> Line {
    let started = Instant::now();
    let corpus = Corpus::synthetic(7, 400_000);
    let model = ModelConfig::new(corpus.vocab_size(), 128, 4, 4, 64, 256);
    let held_out = corpus.held_out_windows(256, 40);
    let mut results: Vec<(f64, EvalReport)> = Vec::new();
    for gamma in SWEEP_GAMMAS {
        let mut cfg = TrainConfig::new(gamma, SWEEP_STEPS);
        cfg.batch_size = 3;
        cfg.lr = 1e-3;
        let init = ModelParams::<f32>::init(&model, 1).expect("valid config");
        let run = train_from(init, &cfg, &corpus, |_| {}).and_then(|(params, _)| {
            evaluate(&params, &held_out, PruningVariant::Learned, GateMode::Hard, Alpha::ONE)
        });
        match run {
            Ok(eval) => {
                println!(
                    "    gamma={gamma}: hard sparsity {:.4}, held-out loss {:.4} ({:.0}s elapsed)",
                    eval.sparsity,
                    eval.lm_loss,
                    started.elapsed().as_secs_f64()
                );
                results.push((gamma, eval));
            }
            Err(e) => {
                return Line {
                    name: "desk-scale gamma sweep",
                    passed: false,
                    detail: format!("gamma={gamma} failed: {e}"),
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let monotone = results.windows(2).all(|w| w[1].1.sparsity >= w[0].1.sparsity);
    let base = results[0].1.lm_loss;
    let top = results[results.len() - 1].1;
    let sparse_enough = top.sparsity >= 0.4;
    let ratio = top.lm_loss / base;
    let loss_ok = ratio <= 1.15;
    let in_time = secs < SWEEP_BUDGET_SECS;
    let profile: Vec<String> = results.iter().map(|(g, e)| format!("{g}:{:.4}", e.sparsity)).collect();
    Line {
        name: "desk-scale gamma sweep",
        passed: monotone && sparse_enough && loss_ok && in_time,
        detail: format!(
            "sparsity [{}] non-decreasing={monotone}; gamma=1 sparsity {:.3} (>= 0.4: {sparse_enough}); loss ratio {ratio:.3} (<= 1.15: {loss_ok}) [{secs:.0}s, budget {SWEEP_BUDGET_SECS}s]",
            profile.join(", "),
            top.sparsity
        ),
    }
}

fn throughput_direction() -> Line {
    let model = ModelConfig::new(40, 128, 4, 4, 64, 1024);
    let params = ModelParams::<f32>::init(&model, 1).expect("valid config");
    let base = BenchmarkConfig {
        contexts: vec![1024],
        batch_sizes: vec![4],
        decode_steps: 32,
        warmups: 2,
        repeats: 5,
        ..BenchmarkConfig::default()
    };
    let cell = |cfg: BenchmarkConfig| -> Result<BenchmarkRow, String> {
        let row = benchmark(&params, &cfg).remove(0);
        match &row.error {
            Some(e) => Err(e.clone()),
            None => Ok(row),
        }
    };
    let rows = (|| {
        let dense = cell(BenchmarkConfig {
            variant: PruningVariant::Dense,
            ..base.clone()
        })?;
        let het = cell(BenchmarkConfig {
            keep_fraction: Some(0.25),
            ..base.clone()
        })?;
        let hom = cell(BenchmarkConfig {
            keep_fraction: Some(0.25),
            homogeneous: true,
            ..base.clone()
        })?;
        Ok::<_, String>((dense, het, hom))
    })();
    let (dense, het, hom) = match rows {
        Ok(r) => r,
        Err(e) => {
            return Line {
                name: "throughput direction",
                passed: false,
                detail: e,
            }
        }
    };
    let faster = het.attention_ms < dense.attention_ms && hom.attention_ms < dense.attention_ms;
    let aligned = hom.tokens_per_sec >= het.tokens_per_sec;
    Line {
        name: "throughput direction",
        passed: faster && aligned,
        detail: format!(
            "attention ms: dense {:.3}, 75% sparse {:.3} / {:.3} (hetero / homo); tokens/s: homo {:.0} >= hetero {:.0}: {aligned}; read sparsity {:.3} / {:.3}",
            dense.attention_ms, het.attention_ms, hom.attention_ms, hom.tokens_per_sec, het.tokens_per_sec, het.read_sparsity, hom.read_sparsity
        ),
    }
}

fn main() -> ExitCode {
    let seed = 0;
    let mut lines = Vec::new();
    let mut record = |line: Line| {
        let verdict = if line.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {}: {}", line.name, line.detail);
        lines.push(line);
    };
    record(from_suite("entmax oracle", selftest::entmax_oracle(1000, seed), Some(10.0)));
    record(from_suite(
        "gradient check",
        selftest::gradient_check(&[1.0, 2.0, 4.0], 0.3, seed),
        Some(300.0),
    ));
    record(from_suite("interaction oracle", selftest::interaction_oracle(100, seed), None));
    record(from_suite("cache-consistency keystone", selftest::cache_consistency(20, seed), Some(120.0)));
    record(from_suite("kv-cache structural suite", selftest::cache_structural(10_000, 4, seed), Some(60.0)));
    record(from_suite("flops accounting", selftest::flops_accounting(), None));
    record(from_suite("baseline masks", selftest::baseline_masks(), None));
    record(throughput_direction());
    record(gamma_sweep());

    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.name).collect();
    println!("{} of {} criteria passed", lines.len() - failed.len(), lines.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        if std::env::var_os("PRUNEKV_ACCEPTANCE_STRICT").is_some() {
            ExitCode::FAILURE
        } else {
            ExitCode::SUCCESS
        }
    }
}
