//! Decode-latency grid over context lengths and batch sizes.

use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decoder::{Decoder, GatePolicy, PrefillMode};
use super::{median, RunReport};
use crate::error::{Error, Result};
use crate::model::{cache_bytes, ModelParams};
use crate::pruning::PruningVariant;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub contexts: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    /// Timed decode steps per repeat; the prompt fills the rest of the context.
    pub decode_steps: usize,
    pub warmups: usize,
    pub repeats: usize,
    /// Identical prompts and drop choices in every row.
    pub homogeneous: bool,
    /// Hold this fraction of earlier tokens with synthetic gates instead of
    /// the model's own.
    pub keep_fraction: Option<f64>,
    pub variant: PruningVariant,
    pub seed: u64,
    /// Cells whose full cache would exceed this are reported as errors.
    pub max_cache_bytes: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            contexts: vec![256, 512, 1024],
            batch_sizes: vec![4],
            decode_steps: 8,
            warmups: 2,
            repeats: 5,
            homogeneous: false,
            keep_fraction: None,
            variant: PruningVariant::Learned,
            seed: 0,
            max_cache_bytes: 4 << 30,
        }
    }
}

/// One grid cell. Timings are medians over repeats.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub context: usize,
    pub batch: usize,
    pub policy: String,
    pub homogeneous: bool,
    pub step_ms: f64,
    pub attention_ms: f64,
    pub tokens_per_sec: f64,
    pub read_sparsity: f64,
    pub attention_flops_per_token: f64,
    pub flops_per_token: f64,
    pub peak_cache_bytes: u64,
    pub error: Option<String>,
}

pub const BENCHMARK_HEADER: &str = "context,batch,policy,homogeneous,step_ms,attention_ms,tokens_per_sec,read_sparsity,attention_flops_per_token,flops_per_token,peak_cache_bytes,error";

impl BenchmarkRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.3},{:.6},{:.1},{:.1},{},{}",
            self.context,
            self.batch,
            self.policy,
            self.homogeneous,
            self.step_ms,
            self.attention_ms,
            self.tokens_per_sec,
            self.read_sparsity,
            self.attention_flops_per_token,
            self.flops_per_token,
            self.peak_cache_bytes,
            self.error.as_deref().unwrap_or("").replace(',', ";")
        )
    }
}

/// Keep fractions spread evenly over `[0.5·f, 1.5·f]` (clamped to 1), mean `f`
/// when nothing clamps.
pub fn heterogeneous_keep(f: f64, batch: usize) -> Vec<f64> {
    if batch == 1 {
        return vec![f];
    }
    (0..batch)
        .map(|b| (f * (0.5 + b as f64 / (batch - 1) as f64)).min(1.0))
        .collect()
}

/// Runs every (context, batch) cell; failures are recorded per cell.
pub fn benchmark<T: Scalar>(params: &ModelParams<T>, config: &BenchmarkConfig) -> Vec<BenchmarkRow> {
    let mut rows = Vec::new();
    for &context in &config.contexts {
        for &batch in &config.batch_sizes {
            let mut row = match run_cell(params, config, context, batch) {
                Ok(row) => row,
                Err(e) => BenchmarkRow {
                    error: Some(e.to_string()),
                    ..BenchmarkRow::default()
                },
            };
            row.context = context;
            row.batch = batch;
            row.homogeneous = config.homogeneous;
            rows.push(row);
        }
    }
    rows
}

fn run_cell<T: Scalar>(params: &ModelParams<T>, config: &BenchmarkConfig, context: usize, batch: usize) -> Result<BenchmarkRow> {
    let cfg = &params.config;
    if config.repeats == 0 || config.decode_steps == 0 || batch == 0 {
        return Err(Error::Config("repeats, decode_steps and batch must be >= 1".into()));
    }
    if context > cfg.max_context || context <= config.decode_steps {
        return Err(Error::ContextOverflow {
            len: context,
            max: cfg.max_context,
        });
    }
    let policy = match config.keep_fraction {
        Some(f) => GatePolicy::Synthetic {
            keep: if config.homogeneous { vec![f; batch] } else { heterogeneous_keep(f, batch) },
            seed: config.seed,
            shared_rng: config.homogeneous,
        },
        None => GatePolicy::Model(config.variant),
    };
    let keys = !matches!(policy, GatePolicy::Model(v) if !v.is_learned());
    let need = cache_bytes(cfg, context, batch, keys);
    if need > config.max_cache_bytes {
        return Err(Error::Cache(format!("needs {need} bytes, budget {}", config.max_cache_bytes)));
    }
    let learned = keys;
    let prompt_len = context - config.decode_steps;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draw = || -> Vec<u32> { (0..prompt_len).map(|_| rng.random_range(0..cfg.n_vocab as u32)).collect() };
    let prompts: Vec<Vec<u32>> = if config.homogeneous {
        vec![draw(); batch]
    } else {
        (0..batch).map(|_| draw()).collect()
    };
    let refs: Vec<&[u32]> = prompts.iter().map(Vec::as_slice).collect();
    let mode = match policy {
        GatePolicy::Model(_) => PrefillMode::Pruned,
        GatePolicy::Synthetic { .. } => PrefillMode::Dense,
    };
    let mut base = Decoder::new(params, batch, policy)?;
    let (first, _) = base.prefill(&refs, mode)?;

    let active = vec![true; batch];
    let mut step_ms = Vec::new();
    let mut attn_ms = Vec::new();
    let mut tps = Vec::new();
    let mut last = RunReport::default();
    for rep in 0..config.warmups + config.repeats {
        let mut dec = base.clone();
        let mut report = RunReport::default();
        let mut logits = first.clone();
        let mut total = 0.0;
        for _ in 0..config.decode_steps {
            let feed: Vec<u32> = (0..batch).map(|b| argmax(logits.row(b))).collect();
            let started = Instant::now();
            let out = dec.step(&feed, &active)?;
            let secs = started.elapsed().as_secs_f64();
            total += secs;
            report.record_step(params, &out, &active, secs, learned)?;
            report.peak_cache_bytes = report.peak_cache_bytes.max(dec.cache_bytes());
            logits = out.logits;
        }
        if rep >= config.warmups {
            step_ms.push(report.step_ms.iter().sum::<f64>() / config.decode_steps as f64);
            attn_ms.push(report.attention_ms.iter().sum::<f64>() / config.decode_steps as f64);
            tps.push((batch * config.decode_steps) as f64 / total);
            last = report;
        }
    }
    let tokens = (batch * config.decode_steps) as f64;
    Ok(BenchmarkRow {
        policy: super::policy_name_for(&base),
        step_ms: median(&step_ms),
        attention_ms: median(&attn_ms),
        tokens_per_sec: median(&tps),
        read_sparsity: last.read_sparsity,
        attention_flops_per_token: last.flops.attention as f64 / tokens,
        flops_per_token: last.flops.total() as f64 / tokens,
        peak_cache_bytes: last.peak_cache_bytes,
        ..BenchmarkRow::default()
    })
}

fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}
