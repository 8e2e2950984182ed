//! Sparsity-regularized language-model training with Adam.

pub mod corpus;

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use corpus::{synthetic_context_switch, CharTokenizer, Corpus};

use crate::entmax::{Alpha, AlphaSchedule};
use crate::error::{Error, Result};
use crate::model::{backward, forward_batch, is_interaction_tensor, ModelConfig, ModelParams};
use crate::pruning::{measure_sparsity, GateMode, InteractionState, PruningVariant};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: AlphaSchedule,
    pub seed: u64,
    pub context_len: usize,
    pub variant: PruningVariant,
    /// Update only the interaction projections and gate biases.
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            steps: 25_000,
            batch_size: 6,
            lr: 1e-4,
            alpha: AlphaSchedule::default(),
            seed: 0,
            context_len: 256,
            variant: PruningVariant::Learned,
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    /// Defaults with the α schedule stretched over `steps`.
    pub fn new(gamma: f64, steps: u64) -> Self {
        let mut c = Self {
            gamma,
            steps,
            ..Self::default()
        };
        c.alpha.total_steps = steps.max(1);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.context_len < 2 {
            return Err(Error::Config("context_len must be >= 2".into()));
        }
        self.alpha.validate()?;
        self.variant.validate()
    }
}

/// Losses and gate statistics of one optimizer step, measured before the update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub lm_loss: f64,
    pub sparsity_loss: f64,
    pub total_loss: f64,
    pub alpha: f64,
    /// Aggregate sparsity of step gates applied to this step's logits.
    pub sparsity: f64,
}

/// Mean next-token cross entropy of `logits` rows `0..n-1` against `tokens[1..]`.
pub fn lm_loss<T: Scalar>(logits: &Matrix<T>, tokens: &[u32]) -> Result<f64> {
    let n = tokens.len();
    if n < 2 {
        return Err(Error::SequenceTooShort(n));
    }
    if logits.rows() != n {
        return Err(Error::Shape(format!("{} logit rows for {n} tokens", logits.rows())));
    }
    let mut total = 0.0;
    for t in 0..n - 1 {
        let row = logits.row(t);
        let target = tokens[t + 1] as usize;
        if target >= row.len() {
            return Err(Error::TokenOutOfVocab {
                token: tokens[t + 1],
                vocab: row.len(),
            });
        }
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[target].as_f64();
    }
    Ok(total / (n - 1) as f64)
}

/// `γ · 2/(L·n·(n−1)) · Σ_ℓ Σ_{j<i} I^ℓ_{ij}` over one sequence's layers.
pub fn sparsity_loss<T: Scalar>(states: &[InteractionState<T>], gamma: f64) -> f64 {
    let n = states.first().map_or(0, |s| s.len());
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for s in states {
        let c = &s.cumulative;
        for i in 1..n {
            sum += c.row(i)[..i].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    gamma * 2.0 / (states.len() as f64 * n as f64 * (n - 1) as f64) * sum
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ModelParams<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.data.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update to the tensors for which `trainable(name)` holds.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, trainable: impl Fn(&str) -> bool) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() / (T::one() - b1.powi(self.t));
        let c2 = T::one() / (T::one() - b2.powi(self.t));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let grads = grads.tensors();
        for (i, (p, g)) in params.tensors_mut().into_iter().zip(grads).enumerate() {
            if !trainable(&p.name) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                p.data[j] -= lr * (m[j] * c1) / ((v[j] * c2).sqrt() + eps);
            }
        }
    }
}

/// Trains a freshly initialized model (seeded by `config.seed`).
pub fn train<T: Scalar>(
    config: &TrainConfig,
    model_config: &ModelConfig,
    corpus: &Corpus,
) -> Result<(ModelParams<T>, Vec<TrainRecord>)> {
    let params = ModelParams::init(model_config, config.seed)?;
    train_from(params, config, corpus, |_| {})
}

/// Continues training `params`; `on_record` sees every record as it is produced.
pub fn train_from<T: Scalar>(
    mut params: ModelParams<T>,
    config: &TrainConfig,
    corpus: &Corpus,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<(ModelParams<T>, Vec<TrainRecord>)> {
    config.validate()?;
    if corpus.vocab_size() > params.config.n_vocab {
        return Err(Error::Config(format!(
            "corpus has {} symbols but the model vocabulary is {}",
            corpus.vocab_size(),
            params.config.n_vocab
        )));
    }
    if config.context_len > params.config.max_context {
        return Err(Error::ContextOverflow {
            len: config.context_len,
            max: params.config.max_context,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let mut adam = Adam::new(&params, config.lr);
    let mut records = Vec::with_capacity(config.steps as usize);
    let freeze = config.freeze_backbone;
    for step in 0..config.steps {
        let alpha = config.alpha.at(step);
        let batch = corpus.sample_batch(&mut rng, config.batch_size, config.context_len)?;
        let rows: Vec<&[u32]> = batch.iter().map(Vec::as_slice).collect();
        let (loss, grads) = backward(&params, &rows, alpha, GateMode::Soft, config.gamma, config.variant)?;
        let record = TrainRecord {
            step,
            lm_loss: loss.lm_loss,
            sparsity_loss: loss.sparsity_loss,
            total_loss: loss.total_loss,
            alpha: alpha.value(),
            sparsity: loss.hard_sparsity,
        };
        if !record.total_loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "training diverged: {}",
                serde_json::to_string(&record).unwrap_or_default()
            )));
        }
        on_record(&record);
        records.push(record);
        adam.step(&mut params, &grads, |name| !freeze || is_interaction_tensor(name));
    }
    Ok((params, records))
}

/// Held-out metrics of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub lm_loss: f64,
    pub perplexity: f64,
    /// Aggregate sparsity of the masks applied during evaluation.
    pub sparsity: f64,
    pub windows: usize,
}

/// Mean loss and sparsity over `windows` with the given gates.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    windows: &[Vec<u32>],
    variant: PruningVariant,
    mode: GateMode,
    alpha: Alpha,
) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::Config("no evaluation windows".into()));
    }
    let mut loss = 0.0;
    let mut sparsity = 0.0;
    for chunk in windows.chunks(8) {
        let rows: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        for (trace, tokens) in forward_batch(params, &rows, alpha, mode, variant)?.iter().zip(&rows) {
            loss += lm_loss(&trace.logits, tokens)?;
            let masks: Vec<Matrix<T>> = trace.interactions.iter().map(|s| s.keep_mask()).collect();
            sparsity += measure_sparsity(&masks)?.aggregate;
        }
    }
    let k = windows.len() as f64;
    Ok(EvalReport {
        lm_loss: loss / k,
        perplexity: (loss / k).exp(),
        sparsity: sparsity / k,
        windows: windows.len(),
    })
}

pub const RECORDS_HEADER: &str = "step,lm_loss,sparsity_loss,total_loss,alpha,sparsity";

pub fn write_records_csv(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{RECORDS_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.lm_loss, r.sparsity_loss, r.total_loss, r.alpha, r.sparsity
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::{state_from_mask, static_mask};

    #[test]
    fn lm_loss_examples() {
        let uniform = Matrix::<f64>::zeros(3, 4);
        assert!((lm_loss(&uniform, &[0, 1, 2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let mut sharp = Matrix::<f64>::zeros(3, 4);
        sharp[(0, 1)] = 100.0;
        sharp[(1, 2)] = 100.0;
        assert!(lm_loss(&sharp, &[0, 1, 2]).unwrap() < 1e-6);
        assert!(matches!(lm_loss(&uniform.row_block(0, 1).to_matrix(), &[0]), Err(Error::SequenceTooShort(1))));
    }

    #[test]
    fn sparsity_loss_examples() {
        let dense = state_from_mask(static_mask::<f64>(PruningVariant::Dense, 6).unwrap());
        let ident = state_from_mask(static_mask::<f64>(PruningVariant::Local(1), 6).unwrap());
        assert!((sparsity_loss(&[dense.clone(), dense.clone()], 0.7) - 0.7).abs() < 1e-12);
        assert_eq!(sparsity_loss(std::slice::from_ref(&ident), 0.7), 0.0);
        let half = sparsity_loss(&[dense.clone(), ident.clone()], 0.7);
        assert!((half - 0.35).abs() < 1e-12);
        assert_eq!(sparsity_loss(&[ident, dense], 0.7), half);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::new(0.1, 10).validate().is_ok());
        assert!(TrainConfig::new(-0.1, 10).validate().is_err());
        assert!(TrainConfig::new(0.1, 0).validate().is_err());
        assert_eq!(TrainConfig::new(0.1, 10).alpha.total_steps, 10);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = ModelConfig::new(5, 4, 1, 1, 2, 3);
        let mut p = ModelParams::<f64>::init(&cfg, 0).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.tok_emb[(0, 0)] = 3.0;
        g.w_logits[(1, 1)] = -0.5;
        let mut adam = Adam::new(&p, 0.01);
        adam.step(&mut p, &g, |_| true);
        assert!((before.tok_emb[(0, 0)] - p.tok_emb[(0, 0)] - 0.01).abs() < 1e-9);
        assert!((p.w_logits[(1, 1)] - before.w_logits[(1, 1)] - 0.01).abs() < 1e-9);
        assert_eq!(p.tok_emb[(0, 1)], before.tok_emb[(0, 1)]);
    }
}
