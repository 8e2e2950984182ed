//! Batched autoregressive generation with hard pruning over the KV cache.

mod analyze;
mod benchmark;
mod decoder;
mod sampling;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_flops_per_layer, FlopsByCategory, ModelParams};
use crate::pruning::PruningVariant;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub use analyze::{analyze, Analysis};
pub use benchmark::{benchmark, heterogeneous_keep, BenchmarkConfig, BenchmarkRow, BENCHMARK_HEADER};
pub use decoder::{equivalent_logits, Decoder, DropEvent, GatePolicy, PrefillMode, StepOutput};
pub use sampling::Sampling;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// One prompt per batch row; lengths may differ.
    pub prompts: Vec<Vec<u32>>,
    pub max_new_tokens: usize,
    pub sampling: Sampling,
    pub seed: u64,
    pub prefill: PrefillMode,
    /// Rows stop feeding tokens once they emit this id.
    pub stop_token: Option<u32>,
}

impl GenerationRequest {
    /// Greedy, seed 0, pruned prefill, no stop token.
    pub fn new(prompts: Vec<Vec<u32>>, max_new_tokens: usize) -> Self {
        Self {
            prompts,
            max_new_tokens,
            sampling: Sampling::Greedy,
            seed: 0,
            prefill: PrefillMode::Pruned,
            stop_token: None,
        }
    }

    pub fn validate<T>(&self, params: &ModelParams<T>) -> Result<()> {
        self.sampling.validate()?;
        if self.prompts.is_empty() {
            return Err(Error::Config("no prompts".into()));
        }
        let max = params.config.max_context;
        for p in &self.prompts {
            if p.is_empty() {
                return Err(Error::SequenceTooShort(0));
            }
            // the last sampled token is never fed back
            let fed = p.len() + self.max_new_tokens.saturating_sub(1);
            if fed > max {
                return Err(Error::ContextOverflow { len: fed, max });
            }
        }
        Ok(())
    }
}

/// Timing, sparsity, FLOPs and memory of one generation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: String,
    pub batch: usize,
    pub prefill_ms: f64,
    /// Wall time of every decode step.
    pub step_ms: Vec<f64>,
    /// Part of each step spent gating, updating caches and attending.
    pub attention_ms: Vec<f64>,
    /// `[step][layer]`: mean over active rows of the fraction of earlier
    /// tokens dropped.
    pub sparsity: Vec<Vec<f64>>,
    /// Earlier-token attention reads actually made, over all steps, rows
    /// and layers.
    pub kept_reads: u64,
    /// Reads a dense model would have made.
    pub dense_reads: u64,
    /// `1 - kept_reads / dense_reads`.
    pub read_sparsity: f64,
    pub flops: FlopsByCategory,
    /// Same tokens with nothing pruned and no pruning logic.
    pub dense_flops: FlopsByCategory,
    pub peak_cache_bytes: u64,
    /// Fed tokens per second of decode time.
    pub tokens_per_sec: f64,
    pub drop_events: Vec<DropEvent>,
}

impl RunReport {
    fn new(policy: String, batch: usize) -> Self {
        Self {
            policy,
            batch,
            ..Self::default()
        }
    }

    /// Folds one decode step into the report.
    pub fn record_step<T: Scalar>(&mut self, params: &ModelParams<T>, out: &StepOutput<T>, active: &[bool], step_secs: f64, learned: bool) -> Result<()> {
        let cfg = &params.config;
        self.step_ms.push(step_secs * 1e3);
        self.attention_ms.push(out.attention_secs * 1e3);
        let mut per_layer = vec![0.0; cfg.n_layers];
        let mut counted = 0usize;
        for b in (0..active.len()).filter(|&b| active[b]) {
            let ctx = out.context[b];
            let kept: Vec<u64> = out.kept.iter().map(|k| k[b] as u64).collect();
            self.flops.accumulate(&count_flops_per_layer(cfg, ctx as u64, &kept, learned)?);
            self.dense_flops
                .accumulate(&count_flops_per_layer(cfg, ctx as u64, &vec![ctx as u64; cfg.n_layers], false)?);
            self.kept_reads += kept.iter().sum::<u64>();
            self.dense_reads += (ctx * cfg.n_layers) as u64;
            if ctx > 0 {
                counted += 1;
                for (s, &k) in per_layer.iter_mut().zip(&kept) {
                    *s += (ctx as u64 - k) as f64 / ctx as f64;
                }
            }
        }
        if counted > 0 {
            per_layer.iter_mut().for_each(|s| *s /= counted as f64);
        }
        self.sparsity.push(per_layer);
        self.drop_events.extend_from_slice(&out.drops);
        self.read_sparsity = if self.dense_reads == 0 {
            0.0
        } else {
            1.0 - self.kept_reads as f64 / self.dense_reads as f64
        };
        Ok(())
    }

    /// Median step latency in milliseconds.
    pub fn median_step_ms(&self) -> f64 {
        median(&self.step_ms)
    }

    pub fn median_attention_ms(&self) -> f64 {
        median(&self.attention_ms)
    }

    /// `step,step_ms,attention_ms,sparsity_l0,...`
    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let layers = self.sparsity.first().map_or(0, Vec::len);
        write!(f, "step,step_ms,attention_ms")?;
        for l in 0..layers {
            write!(f, ",sparsity_l{l}")?;
        }
        writeln!(f)?;
        for (i, s) in self.sparsity.iter().enumerate() {
            write!(f, "{},{:.6},{:.6}", i + 1, self.step_ms[i], self.attention_ms[i])?;
            for v in s {
                write!(f, ",{v:.6}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }

    /// `step,row,layer,trigger_position,dropped_position`
    pub fn write_drops_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,row,layer,trigger_position,dropped_position")?;
        for e in &self.drop_events {
            writeln!(f, "{},{},{},{},{}", e.step, e.row, e.layer, e.trigger_position, e.dropped_position)?;
        }
        Ok(())
    }
}

pub(crate) fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

#[derive(Clone, Debug)]
pub struct Generation<T> {
    /// Sampled tokens per row, excluding the prompt.
    pub tokens: Vec<Vec<u32>>,
    /// `[batch × n_vocab]` per sampling round; entry 0 comes from the prefill.
    pub logits: Vec<Matrix<T>>,
    pub report: RunReport,
}

/// Generates with the model's own pruning variant.
pub fn generate<T: Scalar>(params: &ModelParams<T>, request: &GenerationRequest, variant: PruningVariant) -> Result<Generation<T>> {
    generate_with(params, request, GatePolicy::Model(variant), |_| {})
}

/// [`generate`] with an explicit gate policy; `before_step` sees the
/// decoder before every decode step.
pub fn generate_with<T: Scalar>(
    params: &ModelParams<T>,
    request: &GenerationRequest,
    policy: GatePolicy,
    mut before_step: impl FnMut(&mut Decoder<'_, T>),
) -> Result<Generation<T>> {
    request.validate(params)?;
    let batch = request.prompts.len();
    let learned = match &policy {
        GatePolicy::Model(v) => v.is_learned(),
        GatePolicy::Synthetic { .. } => true,
    };
    let mut report = RunReport::new(policy_name(&policy), batch);
    let mut decoder = Decoder::new(params, batch, policy)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..batch)
        .map(|b| ChaCha8Rng::seed_from_u64(request.seed.wrapping_add(b as u64)))
        .collect();
    let prompts: Vec<&[u32]> = request.prompts.iter().map(Vec::as_slice).collect();
    let started = Instant::now();
    let (first, drops) = decoder.prefill(&prompts, request.prefill)?;
    report.prefill_ms = started.elapsed().as_secs_f64() * 1e3;
    report.drop_events = drops;
    report.peak_cache_bytes = decoder.cache_bytes();

    let mut tokens: Vec<Vec<u32>> = vec![Vec::with_capacity(request.max_new_tokens); batch];
    let mut logits = Vec::with_capacity(request.max_new_tokens);
    let mut active = vec![true; batch];
    if request.max_new_tokens == 0 {
        return Ok(Generation { tokens, logits, report });
    }
    let mut current = first;
    let mut decode_secs = 0.0;
    let mut fed = 0usize;
    for round in 0..request.max_new_tokens {
        for b in (0..batch).filter(|&b| active[b]) {
            let t = request.sampling.pick(current.row(b), &mut rngs[b])?;
            tokens[b].push(t);
        }
        logits.push(current);
        if round + 1 == request.max_new_tokens {
            break;
        }
        for b in 0..batch {
            if request.stop_token.is_some() && tokens[b].last().copied() == request.stop_token {
                active[b] = false;
            }
        }
        if !active.iter().any(|&a| a) {
            break;
        }
        let feed: Vec<u32> = (0..batch).map(|b| tokens[b].last().copied().unwrap_or(0)).collect();
        before_step(&mut decoder);
        let started = Instant::now();
        let out = decoder.step(&feed, &active)?;
        let secs = started.elapsed().as_secs_f64();
        decode_secs += secs;
        fed += active.iter().filter(|&&a| a).count();
        report.record_step(params, &out, &active, secs, learned)?;
        report.peak_cache_bytes = report.peak_cache_bytes.max(decoder.cache_bytes());
        current = out.logits;
    }
    report.tokens_per_sec = if decode_secs > 0.0 { fed as f64 / decode_secs } else { 0.0 };
    Ok(Generation { tokens, logits, report })
}

pub(crate) fn policy_name_for<T: Scalar>(decoder: &Decoder<'_, T>) -> String {
    policy_name(decoder.policy())
}

fn policy_name(policy: &GatePolicy) -> String {
    match policy {
        GatePolicy::Model(v) => v.to_string(),
        GatePolicy::Synthetic { keep, shared_rng, .. } => {
            let mean = keep.iter().sum::<f64>() / keep.len().max(1) as f64;
            format!("synthetic:{mean:.3}{}", if *shared_rng { ":homogeneous" } else { "" })
        }
    }
}
