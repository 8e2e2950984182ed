//! Pre-LN decoder-only transformer with learned context pruning.

mod backward;
pub mod checkpoint;
mod flops;
pub(crate) mod forward;
pub(crate) mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub use backward::{backward, LossBreakdown};
pub use flops::{cache_bytes, count_flops, count_flops_per_layer, FlopsByCategory};
pub use forward::{forward, forward_batch, forward_with_masks, AttentionMask, ForwardTrace};

/// Initial value of every per-layer gate bias.
pub const BETA_INIT: f64 = 2.0;

/// Which stream feeds the interaction projections.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionInput {
    /// The layer-normalized input that attention also consumes.
    #[default]
    Normalized,
    /// The raw residual stream entering the layer.
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Interaction projection width.
    #[serde(default = "default_r")]
    pub r: usize,
    pub max_context: usize,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    #[serde(default)]
    pub interaction_input: InteractionInput,
}

fn default_r() -> usize {
    64
}

fn default_ff_mult() -> usize {
    4
}

impl ModelConfig {
    pub fn new(n_vocab: usize, d_model: usize, n_layers: usize, n_heads: usize, r: usize, max_context: usize) -> Self {
        Self {
            n_vocab,
            d_model,
            n_layers,
            n_heads,
            r,
            max_context,
            ff_mult: default_ff_mult(),
            interaction_input: InteractionInput::default(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn ff_dim(&self) -> usize {
        self.d_model * self.ff_mult
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_vocab == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return fail("vocab, width, layers and heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.r == 0 || self.r > self.d_model {
            return fail(format!("interaction dim r={} must be in 1..={}", self.r, self.d_model));
        }
        if self.max_context == 0 {
            return fail("max_context must be >= 1".into());
        }
        if self.ff_mult == 0 {
            return fail("ff_mult must be >= 1".into());
        }
        Ok(())
    }

    /// Floats cached per token per layer: keys, values and interaction keys.
    pub fn cache_width(&self, with_interaction: bool) -> usize {
        2 * self.d_model + if with_interaction { self.r } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Vec<T>,
    pub ln1_bias: Vec<T>,
    /// `[d × d]`; head `i` owns columns `i·p .. (i+1)·p`.
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_o: Matrix<T>,
    pub ln2_gain: Vec<T>,
    pub ln2_bias: Vec<T>,
    pub w_ff1: Matrix<T>,
    pub w_ff2: Matrix<T>,
    /// `[d × r]` interaction query projection.
    pub w_qint: Matrix<T>,
    /// `[d × r]` interaction key projection.
    pub w_kint: Matrix<T>,
    /// Gate bias shared by every head of the layer.
    pub beta: T,
}

/// All trainable weights. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tok_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: Vec<T>,
    pub lnf_bias: Vec<T>,
    pub w_logits: Matrix<T>,
}

pub type GradientSet<T> = ModelParams<T>;

/// Named view of one parameter tensor.
#[derive(Debug)]
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

#[derive(Debug)]
pub struct TensorMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

/// True for the tensors that implement pruning (interaction weights and β).
pub fn is_interaction_tensor(name: &str) -> bool {
    name.ends_with(".w_qint") || name.ends_with(".w_kint") || name.ends_with(".beta")
}

impl<T: Scalar> ModelParams<T> {
    /// GPT-2 style init: N(0, 0.02) weights, unit LN gains, zero shifts, β = 2.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut sample = |rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| T::lit(normal.sample(&mut rng)))
        };
        let d = config.d_model;
        let tok_emb = sample(config.n_vocab, d);
        let pos_emb = sample(config.max_context, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: vec![T::one(); d],
                ln1_bias: vec![T::zero(); d],
                w_q: sample(d, d),
                w_k: sample(d, d),
                w_v: sample(d, d),
                w_o: sample(d, d),
                ln2_gain: vec![T::one(); d],
                ln2_bias: vec![T::zero(); d],
                w_ff1: sample(d, config.ff_dim()),
                w_ff2: sample(config.ff_dim(), d),
                w_qint: sample(d, config.r),
                w_kint: sample(d, config.r),
                beta: T::lit(BETA_INIT),
            })
            .collect();
        let w_logits = sample(d, config.n_vocab);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: vec![T::one(); d],
            lnf_bias: vec![T::zero(); d],
            w_logits,
        })
    }

    /// Same shapes, all zeros (including β).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        fn mat<T: Scalar>(name: String, m: &Matrix<T>) -> TensorRef<'_, T> {
            TensorRef {
                name,
                shape: vec![m.rows(), m.cols()],
                data: m.as_slice(),
            }
        }
        fn vec<T>(name: String, v: &[T]) -> TensorRef<'_, T> {
            TensorRef {
                name,
                shape: vec![v.len()],
                data: v,
            }
        }
        let mut out = Vec::new();
        out.push(mat("tok_emb".into(), &self.tok_emb));
        out.push(mat("pos_emb".into(), &self.pos_emb));
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push(vec(p("ln1_gain"), &l.ln1_gain));
            out.push(vec(p("ln1_bias"), &l.ln1_bias));
            out.push(mat(p("w_q"), &l.w_q));
            out.push(mat(p("w_k"), &l.w_k));
            out.push(mat(p("w_v"), &l.w_v));
            out.push(mat(p("w_o"), &l.w_o));
            out.push(vec(p("ln2_gain"), &l.ln2_gain));
            out.push(vec(p("ln2_bias"), &l.ln2_bias));
            out.push(mat(p("w_ff1"), &l.w_ff1));
            out.push(mat(p("w_ff2"), &l.w_ff2));
            out.push(mat(p("w_qint"), &l.w_qint));
            out.push(mat(p("w_kint"), &l.w_kint));
            out.push(vec(p("beta"), std::slice::from_ref(&l.beta)));
        }
        out.push(vec("lnf_gain".into(), &self.lnf_gain));
        out.push(vec("lnf_bias".into(), &self.lnf_bias));
        out.push(mat("w_logits".into(), &self.w_logits));
        out
    }

    /// Mutable views in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        fn mat<T: Scalar>(name: String, m: &mut Matrix<T>) -> TensorMut<'_, T> {
            let shape = vec![m.rows(), m.cols()];
            TensorMut {
                name,
                shape,
                data: m.as_mut_slice(),
            }
        }
        fn vec<T>(name: String, v: &mut [T]) -> TensorMut<'_, T> {
            TensorMut {
                name,
                shape: vec![v.len()],
                data: v,
            }
        }
        let mut out = Vec::new();
        out.push(mat("tok_emb".into(), &mut self.tok_emb));
        out.push(mat("pos_emb".into(), &mut self.pos_emb));
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push(vec(p("ln1_gain"), &mut l.ln1_gain));
            out.push(vec(p("ln1_bias"), &mut l.ln1_bias));
            out.push(mat(p("w_q"), &mut l.w_q));
            out.push(mat(p("w_k"), &mut l.w_k));
            out.push(mat(p("w_v"), &mut l.w_v));
            out.push(mat(p("w_o"), &mut l.w_o));
            out.push(vec(p("ln2_gain"), &mut l.ln2_gain));
            out.push(vec(p("ln2_bias"), &mut l.ln2_bias));
            out.push(mat(p("w_ff1"), &mut l.w_ff1));
            out.push(mat(p("w_ff2"), &mut l.w_ff2));
            out.push(mat(p("w_qint"), &mut l.w_qint));
            out.push(mat(p("w_kint"), &mut l.w_kint));
            out.push(vec(p("beta"), std::slice::from_mut(&mut l.beta)));
        }
        out.push(vec("lnf_gain".into(), &mut self.lnf_gain));
        out.push(vec("lnf_bias".into(), &mut self.lnf_bias));
        out.push(mat("w_logits".into(), &mut self.w_logits));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let cv = |v: &[T]| v.iter().map(|&x| U::lit(x.as_f64())).collect::<Vec<U>>();
        ModelParams {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: cv(&l.ln1_gain),
                    ln1_bias: cv(&l.ln1_bias),
                    w_q: l.w_q.cast(),
                    w_k: l.w_k.cast(),
                    w_v: l.w_v.cast(),
                    w_o: l.w_o.cast(),
                    ln2_gain: cv(&l.ln2_gain),
                    ln2_bias: cv(&l.ln2_bias),
                    w_ff1: l.w_ff1.cast(),
                    w_ff2: l.w_ff2.cast(),
                    w_qint: l.w_qint.cast(),
                    w_kint: l.w_kint.cast(),
                    beta: U::lit(l.beta.as_f64()),
                })
                .collect(),
            lnf_gain: cv(&self.lnf_gain),
            lnf_bias: cv(&self.lnf_bias),
            w_logits: self.w_logits.cast(),
        }
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::SequenceTooShort(0));
        }
        if tokens.len() > self.config.max_context {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                max: self.config.max_context,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.n_vocab) {
            return Err(Error::TokenOutOfVocab {
                token: t,
                vocab: self.config.n_vocab,
            });
        }
        Ok(())
    }
}
