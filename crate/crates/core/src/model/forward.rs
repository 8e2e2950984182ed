use rayon::prelude::*;

use super::layers::{gelu, layer_norm, masked_softmax_rows, LnCache};
use super::{InteractionInput, ModelParams};
use crate::entmax::Alpha;
use crate::error::{Error, Result};
use crate::pruning::{
    build_from_logits, deepen, interaction_logits, measure_sparsity, state_from_mask, static_mask, GateMode,
    InteractionState, PruningVariant, SparsityReport,
};
use crate::scalar::Scalar;
use crate::tensor::{gemm, matmul, MatRef, Matrix};

/// Where each layer's attention mask comes from.
#[derive(Clone, Copy, Debug)]
pub enum AttentionMask<'a, T> {
    Variant {
        variant: PruningVariant,
        mode: GateMode,
        alpha: Alpha,
    },
    /// Fixed binary keep masks, one per layer, shared by every row.
    Fixed(&'a [Matrix<T>]),
    /// Hard masks with every gate of query rows `< open_rows` forced open;
    /// what a cached decoder sees after an unpruned prefill.
    OpenPrefix { variant: PruningVariant, open_rows: usize },
}

impl<T> AttentionMask<'_, T> {
    fn variant(&self) -> Option<PruningVariant> {
        match *self {
            AttentionMask::Variant { variant, .. } | AttentionMask::OpenPrefix { variant, .. } => Some(variant),
            AttentionMask::Fixed(_) => None,
        }
    }
}

/// Per-sequence result of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    /// Residual stream `X^0 ..= X^L`, each `[n × d]`.
    pub hidden: Vec<Matrix<T>>,
    /// Interaction state applied at each layer.
    pub interactions: Vec<InteractionState<T>>,
    /// `[n × n_vocab]`.
    pub logits: Matrix<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Binary keep mask of every layer.
    pub fn keep_masks(&self) -> Vec<Matrix<T>> {
        self.interactions.iter().map(|s| s.keep_mask()).collect()
    }

    /// Sparsity of the applied masks; soft interactions count any
    /// non-floored entry as kept.
    pub fn sparsity(&self) -> Result<SparsityReport> {
        measure_sparsity(&self.keep_masks())
    }
}

pub(crate) struct RowAttn<T> {
    pub interaction: InteractionState<T>,
    /// Per-head attention probabilities; empty unless kept for backward.
    pub probs: Vec<Matrix<T>>,
}

pub(crate) struct LayerActs<T> {
    pub x_in: Matrix<T>,
    pub ln1: LnCache<T>,
    pub a1: Matrix<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// `[N × r]`, zero columns for non-learned variants.
    pub q_int: Matrix<T>,
    pub k_int: Matrix<T>,
    pub rows: Vec<RowAttn<T>>,
    pub attn: Matrix<T>,
    pub ln2: LnCache<T>,
    pub a2: Matrix<T>,
    pub h_pre: Matrix<T>,
    pub h_act: Matrix<T>,
}

pub(crate) struct Activations<T> {
    pub batch: usize,
    pub seq: usize,
    pub tokens: Vec<Vec<u32>>,
    pub layers: Vec<LayerActs<T>>,
    pub x_out: Matrix<T>,
    pub lnf: LnCache<T>,
    pub z: Matrix<T>,
    pub logits: Matrix<T>,
}

/// Forward pass of one sequence.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    alpha: Alpha,
    mode: GateMode,
    variant: PruningVariant,
) -> Result<ForwardTrace<T>> {
    let mask = AttentionMask::Variant { variant, mode, alpha };
    let acts = run(params, &[tokens], mask, false)?;
    Ok(into_traces(acts).pop().expect("one row"))
}

/// Forward pass of equally long sequences.
pub fn forward_batch<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[&[u32]],
    alpha: Alpha,
    mode: GateMode,
    variant: PruningVariant,
) -> Result<Vec<ForwardTrace<T>>> {
    let mask = AttentionMask::Variant { variant, mode, alpha };
    Ok(into_traces(run(params, batch, mask, false)?))
}

/// Forward pass with explicit binary keep masks per layer.
pub fn forward_with_masks<T: Scalar>(params: &ModelParams<T>, tokens: &[u32], masks: &[Matrix<T>]) -> Result<ForwardTrace<T>> {
    let acts = run(params, &[tokens], AttentionMask::Fixed(masks), false)?;
    Ok(into_traces(acts).pop().expect("one row"))
}

fn into_traces<T: Scalar>(acts: Activations<T>) -> Vec<ForwardTrace<T>> {
    let n = acts.seq;
    let mut traces: Vec<ForwardTrace<T>> = (0..acts.batch)
        .map(|b| ForwardTrace {
            hidden: Vec::with_capacity(acts.layers.len() + 1),
            interactions: Vec::with_capacity(acts.layers.len()),
            logits: acts.logits.row_block(b * n, n).to_matrix(),
        })
        .collect();
    for layer in acts.layers {
        for (b, row) in layer.rows.into_iter().enumerate() {
            traces[b].hidden.push(layer.x_in.row_block(b * n, n).to_matrix());
            traces[b].interactions.push(row.interaction);
        }
    }
    for (b, t) in traces.iter_mut().enumerate() {
        t.hidden.push(acts.x_out.row_block(b * n, n).to_matrix());
    }
    traces
}

/// Batched forward pass. With `keep_probs` the attention probabilities are
/// retained for the backward pass.
pub(crate) fn run<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[&[u32]],
    mask: AttentionMask<'_, T>,
    keep_probs: bool,
) -> Result<Activations<T>> {
    let cfg = &params.config;
    let b_count = batch.len();
    if b_count == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let n = batch[0].len();
    for seq in batch {
        if seq.len() != n {
            return Err(Error::Shape("batch rows must have equal length".into()));
        }
        params.check_tokens(seq)?;
    }
    if let AttentionMask::Fixed(masks) = mask {
        if masks.len() != cfg.n_layers || masks.iter().any(|m| m.rows() != n || m.cols() != n) {
            return Err(Error::Shape(format!("expected {} masks of {n}x{n}", cfg.n_layers)));
        }
    }
    if let Some(variant) = mask.variant() {
        variant.validate()?;
    }
    let d = cfg.d_model;
    let rows_total = b_count * n;

    let mut x = Matrix::zeros(rows_total, d);
    for (b, seq) in batch.iter().enumerate() {
        for (t, &tok) in seq.iter().enumerate() {
            let out = x.row_mut(b * n + t);
            let te = params.tok_emb.row(tok as usize);
            let pe = params.pos_emb.row(t);
            for j in 0..d {
                out[j] = te[j] + pe[j];
            }
        }
    }

    // shared by every row for non-learned variants
    let static_state = match (mask, mask.variant()) {
        (_, Some(variant)) if !variant.is_learned() => {
            let mut m = static_mask::<T>(variant, n)?;
            if let AttentionMask::OpenPrefix { open_rows, .. } = mask {
                for k in 0..open_rows.min(n) {
                    m.row_mut(k)[..=k].fill(T::one());
                }
            }
            Some(state_from_mask(m))
        }
        _ => None,
    };
    let learned = mask.variant().is_some_and(|v| v.is_learned());

    let mut layers: Vec<LayerActs<T>> = Vec::with_capacity(cfg.n_layers);
    for (li, lp) in params.layers.iter().enumerate() {
        let (a1, ln1) = layer_norm(&x, &lp.ln1_gain, &lp.ln1_bias);
        let q = matmul(a1.view(), lp.w_q.view());
        let k = matmul(a1.view(), lp.w_k.view());
        let v = matmul(a1.view(), lp.w_v.view());
        let (q_int, k_int) = if learned {
            let src = match cfg.interaction_input {
                InteractionInput::Normalized => &a1,
                InteractionInput::Residual => &x,
            };
            (matmul(src.view(), lp.w_qint.view()), matmul(src.view(), lp.w_kint.view()))
        } else {
            (Matrix::zeros(rows_total, 0), Matrix::zeros(rows_total, 0))
        };

        let interactions: Vec<InteractionState<T>> = (0..b_count)
            .into_par_iter()
            .map(|b| -> Result<InteractionState<T>> {
                let (variant, mode, alpha, open_rows) = match mask {
                    AttentionMask::Fixed(masks) => return Ok(state_from_mask(masks[li].clone())),
                    AttentionMask::Variant { variant, mode, alpha } => (variant, mode, alpha, 0),
                    AttentionMask::OpenPrefix { variant, open_rows } => (variant, GateMode::Hard, Alpha::ONE, open_rows),
                };
                if !variant.is_learned() {
                    return Ok(static_state.clone().expect("static state"));
                }
                let mut logits = interaction_logits(q_int.row_block(b * n, n), k_int.row_block(b * n, n), lp.beta)?;
                for k in 0..open_rows.min(n) {
                    logits.row_mut(k).fill(T::zero());
                }
                let own = build_from_logits(logits, alpha, mode)?;
                if variant == PruningVariant::LearnedDepthPropagated {
                    let prev = layers.last().map(|l| &l.rows[b].interaction);
                    Ok(deepen(prev, own))
                } else {
                    Ok(own)
                }
            })
            .collect::<Result<_>>()?;

        let heads = cfg.n_heads;
        let results: Vec<(RowAttn<T>, Matrix<T>)> = interactions
            .into_par_iter()
            .enumerate()
            .map(|(b, interaction)| {
                let (out, probs) = attend_row(
                    q.row_block(b * n, n),
                    k.row_block(b * n, n),
                    v.row_block(b * n, n),
                    &interaction.log_cumulative,
                    heads,
                    keep_probs,
                );
                (RowAttn { interaction, probs }, out)
            })
            .collect();
        let mut attn = Matrix::zeros(rows_total, d);
        let mut rows = Vec::with_capacity(b_count);
        for (b, (row, out)) in results.into_iter().enumerate() {
            attn.as_mut_slice()[b * n * d..(b + 1) * n * d].copy_from_slice(out.as_slice());
            rows.push(row);
        }

        let mut x_mid = x.clone();
        gemm(T::one(), attn.view(), lp.w_o.view(), T::one(), x_mid.view_mut());
        let (a2, ln2) = layer_norm(&x_mid, &lp.ln2_gain, &lp.ln2_bias);
        let h_pre = matmul(a2.view(), lp.w_ff1.view());
        let h_act = h_pre.map(gelu);
        let mut x_next = x_mid;
        gemm(T::one(), h_act.view(), lp.w_ff2.view(), T::one(), x_next.view_mut());

        let acts = LayerActs {
            x_in: x,
            ln1,
            a1,
            q,
            k,
            v,
            q_int,
            k_int,
            rows,
            attn,
            ln2,
            a2,
            h_pre,
            h_act,
        };
        layers.push(acts);
        x = x_next;
    }

    let (z, lnf) = layer_norm(&x, &params.lnf_gain, &params.lnf_bias);
    let logits = matmul(z.view(), params.w_logits.view());
    Ok(Activations {
        batch: b_count,
        seq: n,
        tokens: batch.iter().map(|s| s.to_vec()).collect(),
        layers,
        x_out: x,
        lnf,
        z,
        logits,
    })
}

/// Multi-head attention of one sequence with an additive log-interaction bias.
fn attend_row<T: Scalar>(
    q: MatRef<'_, T>,
    k: MatRef<'_, T>,
    v: MatRef<'_, T>,
    bias: &Matrix<T>,
    heads: usize,
    keep_probs: bool,
) -> (Matrix<T>, Vec<Matrix<T>>) {
    let n = q.rows();
    let d = q.cols();
    let p = d / heads;
    let scale = T::one() / T::lit(p as f64).sqrt();
    let mut out = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(if keep_probs { heads } else { 0 });
    let mut scores = Matrix::zeros(n, n);
    for h in 0..heads {
        let qh = q.col_block(h * p, p);
        let kh = k.col_block(h * p, p);
        let vh = v.col_block(h * p, p);
        gemm(scale, qh, kh.t(), T::zero(), scores.view_mut());
        masked_softmax_rows(&mut scores, bias);
        gemm(T::one(), scores.view(), vh, T::zero(), out.view_mut().col_block(h * p, p));
        if keep_probs {
            probs.push(scores.clone());
        }
    }
    (out, probs)
}
