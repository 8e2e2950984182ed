//! Token-by-token decoding over per-layer [`KvCacheBuffer`]s.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entmax::Alpha;
use crate::error::{Error, Result};
use crate::kvcache::KvCacheBuffer;
use crate::model::forward::{run, Activations, AttentionMask};
use crate::model::layers::{gelu, layer_norm};
use crate::model::{InteractionInput, ModelParams};
use crate::pruning::{GateMode, PruningVariant};
use crate::scalar::Scalar;
use crate::tensor::{gemm, matmul, Matrix};

/// How the prompt enters the cache.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillMode {
    /// Gates act inside the prompt; only tokens the last prompt position
    /// still sees are cached.
    #[default]
    Pruned,
    /// The whole prompt is cached; gates start with the first decode step.
    Dense,
}

/// Decides which cached tokens each step drops.
#[derive(Clone, Debug, PartialEq)]
pub enum GatePolicy {
    /// The model's own gates (learned variants) or static masks.
    Model(PruningVariant),
    /// Random drops that hold row `b` at a fraction `keep[b]` of earlier
    /// tokens. With `shared_rng` every row draws the same choices, so equal
    /// prompts leave identical holes.
    Synthetic { keep: Vec<f64>, seed: u64, shared_rng: bool },
}

impl GatePolicy {
    fn caches_interaction_keys(&self) -> bool {
        match self {
            GatePolicy::Model(v) => v.is_learned(),
            GatePolicy::Synthetic { .. } => true,
        }
    }
}

/// `generating` (a token at `trigger_position`) removed the cached token at
/// `dropped_position` from `layer`. Step 0 is the prefill.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropEvent {
    pub step: usize,
    pub row: usize,
    pub layer: usize,
    pub trigger_position: usize,
    pub dropped_position: usize,
}

/// Result of one decode step.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    /// `[batch × n_vocab]`; zero rows for inactive sequences.
    pub logits: Matrix<T>,
    /// Seconds spent gating, updating the caches and attending.
    pub attention_secs: f64,
    /// Earlier tokens each active row attended to, `[layer][row]`.
    pub kept: Vec<Vec<usize>>,
    /// Earlier tokens each row had, i.e. its position.
    pub context: Vec<usize>,
    pub drops: Vec<DropEvent>,
}

/// One batched decoding session: caches plus per-row positions.
#[derive(Clone, Debug)]
pub struct Decoder<'p, T> {
    params: &'p ModelParams<T>,
    policy: GatePolicy,
    caches: Vec<KvCacheBuffer<T>>,
    next_pos: Vec<usize>,
    rngs: Vec<ChaCha8Rng>,
    step: usize,
    keys: bool,
}

impl<'p, T: Scalar> Decoder<'p, T> {
    pub fn new(params: &'p ModelParams<T>, batch: usize, policy: GatePolicy) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        match &policy {
            GatePolicy::Model(v) => v.validate()?,
            GatePolicy::Synthetic { keep, .. } => {
                if keep.len() != batch || keep.iter().any(|k| !(0.0..=1.0).contains(k)) {
                    return Err(Error::Config(format!("need {batch} keep fractions in [0, 1]")));
                }
            }
        }
        let keys = policy.caches_interaction_keys();
        let width = params.config.cache_width(keys);
        let caches = (0..params.config.n_layers)
            .map(|_| KvCacheBuffer::new(batch, width))
            .collect::<Result<_>>()?;
        let rngs = match &policy {
            GatePolicy::Synthetic { seed, shared_rng, .. } => (0..batch)
                .map(|b| ChaCha8Rng::seed_from_u64(if *shared_rng { *seed } else { seed.wrapping_add(b as u64 + 1) }))
                .collect(),
            GatePolicy::Model(_) => Vec::new(),
        };
        Ok(Self {
            params,
            policy,
            caches,
            next_pos: vec![0; batch],
            rngs,
            step: 0,
            keys,
        })
    }

    pub fn batch(&self) -> usize {
        self.next_pos.len()
    }

    pub fn policy(&self) -> &GatePolicy {
        &self.policy
    }

    /// Position the next fed token of row `b` will take.
    pub fn position(&self, b: usize) -> usize {
        self.next_pos[b]
    }

    pub fn caches(&self) -> &[KvCacheBuffer<T>] {
        &self.caches
    }

    pub fn caches_mut(&mut self) -> &mut [KvCacheBuffer<T>] {
        &mut self.caches
    }

    /// Allocated cache bytes across layers, at 4 bytes per value.
    pub fn cache_bytes(&self) -> u64 {
        self.caches
            .iter()
            .map(|c| (c.capacity() * c.width() * 4 * c.batch()) as u64)
            .sum()
    }

    /// Runs each prompt through a full hard forward pass and caches the
    /// tokens its last position keeps. Returns the last position's logits
    /// (`[batch × n_vocab]`) and the drops that happened inside the prompts.
    pub fn prefill(&mut self, prompts: &[&[u32]], mode: PrefillMode) -> Result<(Matrix<T>, Vec<DropEvent>)> {
        let cfg = &self.params.config;
        let batch = self.batch();
        if prompts.len() != batch {
            return Err(Error::Shape(format!("{} prompts for batch {batch}", prompts.len())));
        }
        if self.caches.iter().any(|c| c.extent() > 0) || self.step > 0 {
            return Err(Error::Config("prefill must come first".into()));
        }
        for p in prompts {
            self.params.check_tokens(p)?;
        }
        let per_row: Vec<(Vec<Vec<usize>>, Vec<Matrix<T>>, Vec<T>, Vec<DropEvent>)> = prompts
            .par_iter()
            .enumerate()
            .map(|(b, prompt)| self.prefill_row(b, prompt, mode))
            .collect::<Result<_>>()?;

        let mut logits = Matrix::zeros(batch, cfg.n_vocab);
        let mut drops = Vec::new();
        for (b, (_, _, row_logits, row_drops)) in per_row.iter().enumerate() {
            logits.row_mut(b).copy_from_slice(row_logits);
            drops.extend_from_slice(row_drops);
        }
        let width = cfg.cache_width(self.keys);
        for (l, cache) in self.caches.iter_mut().enumerate() {
            let rounds = per_row.iter().map(|r| r.0[l].len()).max().unwrap_or(0);
            let mut buf = vec![T::zero(); batch * width];
            let mut positions = vec![0u32; batch];
            let mut active = vec![false; batch];
            for i in 0..rounds {
                for (b, (kept, payload, _, _)) in per_row.iter().enumerate() {
                    active[b] = i < kept[l].len();
                    if active[b] {
                        let j = kept[l][i];
                        positions[b] = j as u32;
                        buf[b * width..(b + 1) * width].copy_from_slice(payload[l].row(j));
                    }
                }
                cache.push(&buf, &positions, Some(&active))?;
            }
        }
        for (b, p) in prompts.iter().enumerate() {
            self.next_pos[b] = p.len();
        }
        Ok((logits, drops))
    }

    /// Kept positions per layer, cache payload rows per layer, last logits
    /// and prompt-internal drop events for one prompt.
    #[allow(clippy::type_complexity)]
    fn prefill_row(
        &self,
        b: usize,
        prompt: &[u32],
        mode: PrefillMode,
    ) -> Result<(Vec<Vec<usize>>, Vec<Matrix<T>>, Vec<T>, Vec<DropEvent>)> {
        let n = prompt.len();
        let mask = match (&self.policy, mode) {
            (GatePolicy::Model(variant), PrefillMode::Pruned) => AttentionMask::Variant {
                variant: *variant,
                mode: GateMode::Hard,
                alpha: Alpha::ONE,
            },
            (GatePolicy::Model(variant), PrefillMode::Dense) => AttentionMask::OpenPrefix {
                variant: *variant,
                open_rows: n,
            },
            (GatePolicy::Synthetic { .. }, _) => AttentionMask::Variant {
                variant: PruningVariant::Dense,
                mode: GateMode::Hard,
                alpha: Alpha::ONE,
            },
        };
        let acts = run(self.params, &[prompt], mask, false)?;
        let payload = self.cache_rows(&acts);
        let mut kept = Vec::with_capacity(self.caches.len());
        let mut drops = Vec::new();
        for (l, layer) in acts.layers.iter().enumerate() {
            let state = &layer.rows[0].interaction;
            let row: Vec<usize> = match &self.policy {
                GatePolicy::Model(_) => (0..n).filter(|&j| state.is_kept(n - 1, j)).collect(),
                GatePolicy::Synthetic { keep, shared_rng, seed } => {
                    let target = ((n - 1) as f64 * keep[b]).round() as usize;
                    let stream = if *shared_rng { 0 } else { b as u64 + 1 };
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (l as u64 + 1).wrapping_mul(0x9e37_79b9) ^ stream);
                    let mut chosen: Vec<usize> = sample(&mut rng, n - 1, target).into_vec();
                    chosen.push(n - 1);
                    chosen.sort_unstable();
                    chosen
                }
            };
            if let GatePolicy::Model(_) = self.policy {
                for j in 0..n {
                    if let Some(k) = (j + 1..n).find(|&k| !state.is_kept(k, j)) {
                        drops.push(DropEvent {
                            step: 0,
                            row: b,
                            layer: l,
                            trigger_position: k,
                            dropped_position: j,
                        });
                    }
                }
            }
            kept.push(row);
        }
        let logits = acts.logits.row(n - 1).to_vec();
        Ok((kept, payload, logits, drops))
    }

    /// `[n × width]` cache payload (`k | v | k_int`) of every layer.
    fn cache_rows(&self, acts: &Activations<T>) -> Vec<Matrix<T>> {
        let cfg = &self.params.config;
        let d = cfg.d_model;
        let width = cfg.cache_width(self.keys);
        acts.layers
            .iter()
            .zip(&self.params.layers)
            .map(|(la, lp)| {
                let n = la.k.rows();
                let k_int = if !self.keys {
                    None
                } else if la.k_int.cols() == cfg.r {
                    Some(la.k_int.clone())
                } else {
                    let src = match cfg.interaction_input {
                        InteractionInput::Normalized => &la.a1,
                        InteractionInput::Residual => &la.x_in,
                    };
                    Some(matmul(src.view(), lp.w_kint.view()))
                };
                let mut out = Matrix::zeros(n, width);
                for i in 0..n {
                    let row = out.row_mut(i);
                    row[..d].copy_from_slice(la.k.row(i));
                    row[d..2 * d].copy_from_slice(la.v.row(i));
                    if let Some(ki) = &k_int {
                        row[2 * d..].copy_from_slice(ki.row(i));
                    }
                }
                out
            })
            .collect()
    }

    /// Feeds one token per row (`active[b] == false` rows are skipped and
    /// keep their cache) and returns the next-token logits.
    pub fn step(&mut self, tokens: &[u32], active: &[bool]) -> Result<StepOutput<T>> {
        let params = self.params;
        let cfg = &params.config;
        let batch = self.batch();
        if tokens.len() != batch || active.len() != batch {
            return Err(Error::Shape(format!("step expects {batch} tokens and flags")));
        }
        for b in (0..batch).filter(|&b| active[b]) {
            if self.next_pos[b] >= cfg.max_context {
                return Err(Error::ContextOverflow {
                    len: self.next_pos[b] + 1,
                    max: cfg.max_context,
                });
            }
            if tokens[b] as usize >= cfg.n_vocab {
                return Err(Error::TokenOutOfVocab {
                    token: tokens[b],
                    vocab: cfg.n_vocab,
                });
            }
        }
        self.step += 1;
        let d = cfg.d_model;
        let mut x = Matrix::zeros(batch, d);
        for b in (0..batch).filter(|&b| active[b]) {
            let (te, pe) = (params.tok_emb.row(tokens[b] as usize), params.pos_emb.row(self.next_pos[b]));
            for (o, (&t, &p)) in x.row_mut(b).iter_mut().zip(te.iter().zip(pe)) {
                *o = t + p;
            }
        }
        let mut attention_secs = 0.0;
        let mut kept = Vec::with_capacity(cfg.n_layers);
        let mut drops = Vec::new();
        // live positions of the previous layer, for depth propagation
        let mut prev_live: Option<Vec<Vec<bool>>> = None;
        for l in 0..cfg.n_layers {
            let lp = &params.layers[l];
            let (a1, _) = layer_norm(&x, &lp.ln1_gain, &lp.ln1_bias);
            let q = matmul(a1.view(), lp.w_q.view());
            let k = matmul(a1.view(), lp.w_k.view());
            let v = matmul(a1.view(), lp.w_v.view());
            let (q_int, k_int) = if self.keys {
                let src = match cfg.interaction_input {
                    InteractionInput::Normalized => &a1,
                    InteractionInput::Residual => &x,
                };
                (matmul(src.view(), lp.w_qint.view()), matmul(src.view(), lp.w_kint.view()))
            } else {
                (Matrix::zeros(batch, 0), Matrix::zeros(batch, 0))
            };

            let started = Instant::now();
            let drop_mask = self.drop_mask(l, &q_int, active, prev_live.as_deref(), &mut drops);
            self.caches[l].remove(&drop_mask)?;
            let width = cfg.cache_width(self.keys);
            let mut payload = vec![T::zero(); batch * width];
            for b in 0..batch {
                let row = &mut payload[b * width..(b + 1) * width];
                row[..d].copy_from_slice(k.row(b));
                row[d..2 * d].copy_from_slice(v.row(b));
                if self.keys {
                    row[2 * d..].copy_from_slice(k_int.row(b));
                }
            }
            let positions: Vec<u32> = self.next_pos.iter().map(|&p| p as u32).collect();
            self.caches[l].push(&payload, &positions, Some(active))?;
            let attn = attend_cached(&self.caches[l], &q, cfg.n_heads, active);
            attention_secs += started.elapsed().as_secs_f64();

            let view = self.caches[l].get();
            kept.push((0..batch).map(|b| self.caches[l].kept(b).saturating_sub(1)).collect());
            if self.policy == GatePolicy::Model(PruningVariant::LearnedDepthPropagated) {
                let live = (0..batch)
                    .map(|b| {
                        let mut m = vec![false; cfg.max_context];
                        for (s, &p) in view.positions(b).iter().enumerate() {
                            if view.mask(b)[s] {
                                m[p as usize] = true;
                            }
                        }
                        m
                    })
                    .collect();
                prev_live = Some(live);
            }

            gemm(T::one(), attn.view(), lp.w_o.view(), T::one(), x.view_mut());
            let (a2, _) = layer_norm(&x, &lp.ln2_gain, &lp.ln2_bias);
            let h = matmul(a2.view(), lp.w_ff1.view()).map(gelu);
            gemm(T::one(), h.view(), lp.w_ff2.view(), T::one(), x.view_mut());
        }
        let (z, _) = layer_norm(&x, &params.lnf_gain, &params.lnf_bias);
        let mut logits = matmul(z.view(), params.w_logits.view());
        let context = self.next_pos.clone();
        for b in 0..batch {
            if active[b] {
                self.next_pos[b] += 1;
            } else {
                logits.row_mut(b).fill(T::zero());
            }
        }
        Ok(StepOutput {
            logits,
            attention_secs,
            kept,
            context,
            drops,
        })
    }

    /// `[batch × extent]` slots to drop before the new token joins layer `l`.
    fn drop_mask(
        &mut self,
        l: usize,
        q_int: &Matrix<T>,
        active: &[bool],
        prev_live: Option<&[Vec<bool>]>,
        drops: &mut Vec<DropEvent>,
    ) -> Vec<bool> {
        let cfg = &self.params.config;
        let view = self.caches[l].get();
        let e = view.extent();
        let width = view.width();
        let mut mask = vec![false; self.batch() * e];
        let d = cfg.d_model;
        let scale = T::one() / T::lit(cfg.r as f64).sqrt();
        let beta = self.params.layers[l].beta;
        for b in (0..self.batch()).filter(|&b| active[b]) {
            let pos = self.next_pos[b];
            let valid = view.mask(b);
            let positions = view.positions(b);
            let row = view.row(b);
            let out = &mut mask[b * e..(b + 1) * e];
            match &self.policy {
                GatePolicy::Model(variant) => {
                    let static_keep = |j: usize| static_keep(*variant, pos, j);
                    for s in (0..e).filter(|&s| valid[s]) {
                        let j = positions[s] as usize;
                        out[s] = match variant {
                            PruningVariant::Dense => false,
                            PruningVariant::Local(_) | PruningVariant::StridedSparse(_) => !static_keep(j),
                            PruningVariant::Learned | PruningVariant::LearnedDepthPropagated => {
                                let kint = &row[s * width + 2 * d..(s + 1) * width];
                                let dot: T = q_int.row(b).iter().zip(kint).map(|(&a, &c)| a * c).sum();
                                let gate_closed = dot * scale + beta < T::zero();
                                gate_closed || prev_live.is_some_and(|live| !live[b][j])
                            }
                        };
                    }
                }
                GatePolicy::Synthetic { keep, .. } => {
                    let live: Vec<usize> = (0..e).filter(|&s| valid[s]).collect();
                    let target = (pos as f64 * keep[b]).round() as usize;
                    if live.len() > target {
                        for i in sample(&mut self.rngs[b], live.len(), live.len() - target) {
                            out[live[i]] = true;
                        }
                    }
                }
            }
            for s in (0..e).filter(|&s| out[s]) {
                drops.push(DropEvent {
                    step: self.step,
                    row: b,
                    layer: l,
                    trigger_position: pos,
                    dropped_position: positions[s] as usize,
                });
            }
        }
        mask
    }
}

/// Whether a static variant lets position `i` see position `j`.
fn static_keep(variant: PruningVariant, i: usize, j: usize) -> bool {
    match variant {
        PruningVariant::Local(k) => i - j < k,
        PruningVariant::StridedSparse(k) => i / k == j / k || (j % k == k - 1 && j < (i / k) * k),
        _ => true,
    }
}

/// Multi-head attention of each active row's query over the whole extent
/// block; free slots are masked out, never skipped.
fn attend_cached<T: Scalar>(cache: &KvCacheBuffer<T>, q: &Matrix<T>, heads: usize, active: &[bool]) -> Matrix<T> {
    let view = cache.get();
    let (batch, e, width) = (view.batch(), view.extent(), view.width());
    let d = q.cols();
    let p = d / heads;
    let scale = T::one() / T::lit(p as f64).sqrt();
    let rows: Vec<Vec<T>> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let mut out = vec![T::zero(); d];
            if !active[b] {
                return out;
            }
            let valid = view.mask(b);
            let data = view.row(b);
            let qb = q.row(b);
            let mut scores = vec![T::neg_infinity(); heads * e];
            for s in 0..e {
                let key = &data[s * width..s * width + d];
                for h in 0..heads {
                    let dot: T = qb[h * p..(h + 1) * p].iter().zip(&key[h * p..(h + 1) * p]).map(|(&a, &c)| a * c).sum();
                    scores[h * e + s] = if valid[s] { dot * scale } else { T::neg_infinity() };
                }
            }
            for h in 0..heads {
                let sc = &mut scores[h * e..(h + 1) * e];
                let max = sc.iter().copied().fold(T::neg_infinity(), T::max);
                for v in sc.iter_mut() {
                    *v = (*v - max).fast_exp();
                }
                let inv = T::one() / sc.iter().copied().sum::<T>();
                sc.iter_mut().for_each(|v| *v *= inv);
            }
            for s in 0..e {
                let live = valid[s];
                let value = &data[s * width + d..s * width + 2 * d];
                for h in 0..heads {
                    let w = scores[h * e + s];
                    for (o, &vv) in out[h * p..(h + 1) * p].iter_mut().zip(&value[h * p..(h + 1) * p]) {
                        *o += if live { w * vv } else { T::zero() };
                    }
                }
            }
            out
        })
        .collect();
    let mut out = Matrix::zeros(batch, d);
    for (b, r) in rows.into_iter().enumerate() {
        out.row_mut(b).copy_from_slice(&r);
    }
    out
}

/// Logits of a cache-free hard forward over `tokens` under the masks a
/// decoder applies when the first `prompt_len` tokens were prefilled with
/// `mode`. Row `t` should match the decoder's logits after feeding token `t`.
pub fn equivalent_logits<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    variant: PruningVariant,
    prompt_len: usize,
    mode: PrefillMode,
) -> Result<Matrix<T>> {
    let mask = match mode {
        PrefillMode::Pruned => AttentionMask::Variant {
            variant,
            mode: GateMode::Hard,
            alpha: Alpha::ONE,
        },
        PrefillMode::Dense => AttentionMask::OpenPrefix {
            variant,
            open_rows: prompt_len,
        },
    };
    Ok(run(params, &[tokens], mask, false)?.logits)
}
