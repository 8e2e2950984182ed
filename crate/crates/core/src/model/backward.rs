//! Exact gradients of `L = L_lm + L_sparsity` by manual backpropagation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{run, Activations, AttentionMask};
use super::layers::{gelu_grad, layer_norm_backward, softmax_xent};
use super::{GradientSet, InteractionInput, ModelParams};
use crate::entmax::Alpha;
use crate::error::{Error, Result};
use crate::pruning::{
    logits_grad_from_log_cumulative, measure_sparsity, GateMode, InteractionState, PruningVariant,
};
use crate::scalar::Scalar;
use crate::tensor::{gemm, matmul, MatRef, Matrix};

/// Batch-mean loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm_loss: f64,
    pub sparsity_loss: f64,
    pub total_loss: f64,
    /// Aggregate sparsity the same logits give under step gates.
    pub hard_sparsity: f64,
}

/// Loss and gradients for a batch of equally long sequences.
///
/// Targets are the inputs shifted by one. Only soft gates are
/// differentiable; hard mode returns [`Error::UnsupportedMode`].
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[&[u32]],
    alpha: Alpha,
    mode: GateMode,
    gamma: f64,
    variant: PruningVariant,
) -> Result<(LossBreakdown, GradientSet<T>)> {
    if mode == GateMode::Hard {
        return Err(Error::UnsupportedMode);
    }
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(Error::Config(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    if let Some(first) = batch.first() {
        if first.len() < 2 {
            return Err(Error::SequenceTooShort(first.len()));
        }
    }
    let acts = run(
        params,
        batch,
        AttentionMask::Variant {
            variant,
            mode: GateMode::Soft,
            alpha,
        },
        true,
    )?;
    Ok(backprop(params, &acts, alpha, gamma, variant))
}

fn backprop<T: Scalar>(
    params: &ModelParams<T>,
    acts: &Activations<T>,
    alpha: Alpha,
    gamma: f64,
    variant: PruningVariant,
) -> (LossBreakdown, GradientSet<T>) {
    let cfg = &params.config;
    let (bsz, n) = (acts.batch, acts.seq);
    let d = cfg.d_model;
    let mut grads = params.zeros_like();

    // language-model loss and its logits gradient
    let vocab = cfg.n_vocab;
    let mut dlogits = Matrix::zeros(bsz * n, vocab);
    let inv = T::one() / T::lit((bsz * (n - 1)) as f64);
    let mut lm_sum = 0.0;
    let mut probs = vec![T::zero(); vocab];
    for b in 0..bsz {
        for t in 0..n - 1 {
            let row = b * n + t;
            let target = acts.tokens[b][t + 1] as usize;
            lm_sum += softmax_xent(acts.logits.row(row), target, &mut probs).as_f64();
            let out = dlogits.row_mut(row);
            for (o, &p) in out.iter_mut().zip(&probs) {
                *o = p * inv;
            }
            out[target] -= inv;
        }
    }
    let lm_loss = lm_sum / (bsz * (n - 1)) as f64;

    let sparsity_coef = gamma * 2.0 / (cfg.n_layers as f64 * n as f64 * (n - 1) as f64);
    let mut sparsity_sum = 0.0;
    for layer in &acts.layers {
        for row in &layer.rows {
            sparsity_sum += lower_sum(&row.interaction.cumulative).as_f64();
        }
    }
    let sparsity_loss = sparsity_coef * sparsity_sum / bsz as f64;
    let sparsity_grad = T::lit(sparsity_coef / bsz as f64);

    // head
    gemm(T::one(), acts.z.view().t(), dlogits.view(), T::zero(), grads.w_logits.view_mut());
    let dz = matmul(dlogits.view(), params.w_logits.view().t());
    let mut dx = layer_norm_backward(&dz, &acts.lnf, &params.lnf_gain, &mut grads.lnf_gain, &mut grads.lnf_bias);

    let learned = variant.is_learned();
    let depth = variant == PruningVariant::LearnedDepthPropagated;
    let mut depth_acc: Vec<Option<Matrix<T>>> = vec![None; bsz];
    let heads = cfg.n_heads;
    let r_scale = T::one() / T::lit(cfg.r as f64).sqrt();

    for (li, (lp, la)) in params.layers.iter().zip(&acts.layers).enumerate().rev() {
        let g = &mut grads.layers[li];

        // feed-forward block
        gemm(T::one(), la.h_act.view().t(), dx.view(), T::one(), g.w_ff2.view_mut());
        let mut dh = matmul(dx.view(), lp.w_ff2.view().t());
        for (dv, &h) in dh.as_mut_slice().iter_mut().zip(la.h_pre.as_slice()) {
            *dv *= gelu_grad(h);
        }
        gemm(T::one(), la.a2.view().t(), dh.view(), T::one(), g.w_ff1.view_mut());
        let da2 = matmul(dh.view(), lp.w_ff1.view().t());
        let dln2 = layer_norm_backward(&da2, &la.ln2, &lp.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
        let mut dx_mid = dx;
        dx_mid.add_assign(&dln2);

        // attention output projection
        gemm(T::one(), la.attn.view().t(), dx_mid.view(), T::one(), g.w_o.view_mut());
        let dattn = matmul(dx_mid.view(), lp.w_o.view().t());

        let per_row: Vec<RowGrads<T>> = (0..bsz)
            .into_par_iter()
            .zip(depth_acc.par_iter_mut())
            .map(|(b, acc)| {
                let row = &la.rows[b];
                let (dq, dk, dv, dbias) = attend_row_backward(
                    la.q.row_block(b * n, n),
                    la.k.row_block(b * n, n),
                    la.v.row_block(b * n, n),
                    &row.probs,
                    dattn.row_block(b * n, n),
                    heads,
                );
                let interaction = if learned {
                    Some(interaction_backward(
                        &row.interaction,
                        dbias,
                        sparsity_grad,
                        alpha,
                        if depth { Some(acc) } else { None },
                        la.q_int.row_block(b * n, n),
                        la.k_int.row_block(b * n, n),
                        r_scale,
                    ))
                } else {
                    None
                };
                RowGrads {
                    dq,
                    dk,
                    dv,
                    interaction,
                }
            })
            .collect();

        let mut dq = Matrix::zeros(bsz * n, d);
        let mut dk = Matrix::zeros(bsz * n, d);
        let mut dv = Matrix::zeros(bsz * n, d);
        let mut dq_int = Matrix::zeros(bsz * n, if learned { cfg.r } else { 0 });
        let mut dk_int = Matrix::zeros(bsz * n, if learned { cfg.r } else { 0 });
        for (b, rg) in per_row.into_iter().enumerate() {
            let span = b * n * d..(b + 1) * n * d;
            dq.as_mut_slice()[span.clone()].copy_from_slice(rg.dq.as_slice());
            dk.as_mut_slice()[span.clone()].copy_from_slice(rg.dk.as_slice());
            dv.as_mut_slice()[span].copy_from_slice(rg.dv.as_slice());
            if let Some(ig) = rg.interaction {
                g.beta += ig.dbeta;
                let span = b * n * cfg.r..(b + 1) * n * cfg.r;
                dq_int.as_mut_slice()[span.clone()].copy_from_slice(ig.dq_int.as_slice());
                dk_int.as_mut_slice()[span].copy_from_slice(ig.dk_int.as_slice());
            }
        }

        gemm(T::one(), la.a1.view().t(), dq.view(), T::one(), g.w_q.view_mut());
        gemm(T::one(), la.a1.view().t(), dk.view(), T::one(), g.w_k.view_mut());
        gemm(T::one(), la.a1.view().t(), dv.view(), T::one(), g.w_v.view_mut());
        let mut da1 = matmul(dq.view(), lp.w_q.view().t());
        gemm(T::one(), dk.view(), lp.w_k.view().t(), T::one(), da1.view_mut());
        gemm(T::one(), dv.view(), lp.w_v.view().t(), T::one(), da1.view_mut());

        let mut dx_in = dx_mid;
        if learned {
            let src = match cfg.interaction_input {
                InteractionInput::Normalized => &la.a1,
                InteractionInput::Residual => &la.x_in,
            };
            gemm(T::one(), src.view().t(), dq_int.view(), T::one(), g.w_qint.view_mut());
            gemm(T::one(), src.view().t(), dk_int.view(), T::one(), g.w_kint.view_mut());
            let target = match cfg.interaction_input {
                InteractionInput::Normalized => &mut da1,
                InteractionInput::Residual => &mut dx_in,
            };
            gemm(T::one(), dq_int.view(), lp.w_qint.view().t(), T::one(), target.view_mut());
            gemm(T::one(), dk_int.view(), lp.w_kint.view().t(), T::one(), target.view_mut());
        }
        let dln1 = layer_norm_backward(&da1, &la.ln1, &lp.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
        dx_in.add_assign(&dln1);
        dx = dx_in;
    }

    // embeddings
    for b in 0..bsz {
        for t in 0..n {
            let src = dx.row(b * n + t);
            let tok = acts.tokens[b][t] as usize;
            for (o, &v) in grads.tok_emb.row_mut(tok).iter_mut().zip(src) {
                *o += v;
            }
            for (o, &v) in grads.pos_emb.row_mut(t).iter_mut().zip(src) {
                *o += v;
            }
        }
    }

    let losses = LossBreakdown {
        lm_loss,
        sparsity_loss,
        total_loss: lm_loss + sparsity_loss,
        hard_sparsity: hard_sparsity(acts, variant),
    };
    (losses, grads)
}

/// Mean over rows of the aggregate sparsity of the hard masks implied by the
/// soft pass's gate logits.
fn hard_sparsity<T: Scalar>(acts: &Activations<T>, variant: PruningVariant) -> f64 {
    let n = acts.seq;
    if !variant.is_learned() {
        let masks: Vec<Matrix<T>> = acts.layers.iter().map(|l| l.rows[0].interaction.keep_mask()).collect();
        return measure_sparsity(&masks).expect("binary masks").aggregate;
    }
    let depth = variant == PruningVariant::LearnedDepthPropagated;
    let per_row: Vec<f64> = (0..acts.batch)
        .into_par_iter()
        .map(|b| {
            // first position whose step gate drops column j
            let mut drop_at = vec![n; n];
            let mut hist = vec![0usize; n + 1];
            let mut total = 0.0;
            for layer in &acts.layers {
                let logits = &layer.rows[b].interaction.logits;
                if !depth {
                    drop_at.iter_mut().for_each(|d| *d = n);
                }
                for (j, d) in drop_at.iter_mut().enumerate() {
                    for k in j + 1..(*d).min(n) {
                        if logits[(k, j)] < T::zero() {
                            *d = k;
                            break;
                        }
                    }
                }
                hist.iter_mut().for_each(|h| *h = 0);
                for &d in &drop_at {
                    hist[d] += 1;
                }
                let mut dropped = 0usize;
                let mut layer_sum = 0.0;
                for i in 1..n {
                    dropped += hist[i];
                    layer_sum += dropped as f64 / i as f64;
                }
                total += layer_sum / (n - 1) as f64;
            }
            total / acts.layers.len() as f64
        })
        .collect();
    per_row.iter().sum::<f64>() / per_row.len() as f64
}

struct RowGrads<T> {
    dq: Matrix<T>,
    dk: Matrix<T>,
    dv: Matrix<T>,
    interaction: Option<InteractionGrads<T>>,
}

struct InteractionGrads<T> {
    dbeta: T,
    dq_int: Matrix<T>,
    dk_int: Matrix<T>,
}

pub(crate) fn lower_sum<T: Scalar>(m: &Matrix<T>) -> T {
    let mut s = T::zero();
    for k in 1..m.rows() {
        s += m.row(k)[..k].iter().copied().sum::<T>();
    }
    s
}

/// Gradients of one sequence's attention w.r.t. queries, keys, values and
/// the shared log-interaction bias (summed over heads).
fn attend_row_backward<T: Scalar>(
    q: MatRef<'_, T>,
    k: MatRef<'_, T>,
    v: MatRef<'_, T>,
    probs: &[Matrix<T>],
    d_out: MatRef<'_, T>,
    heads: usize,
) -> (Matrix<T>, Matrix<T>, Matrix<T>, Matrix<T>) {
    let n = q.rows();
    let d = q.cols();
    let p = d / heads;
    let scale = T::one() / T::lit(p as f64).sqrt();
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    let mut dbias = Matrix::zeros(n, n);
    let mut ds = Matrix::zeros(n, n);
    for (h, prob) in probs.iter().enumerate() {
        let cols = h * p;
        let doh = d_out.col_block(cols, p);
        gemm(T::one(), doh, v.col_block(cols, p).t(), T::zero(), ds.view_mut());
        for i in 0..n {
            let pr = prob.row(i);
            let row = ds.row_mut(i);
            let dot: T = pr[..=i].iter().zip(&row[..=i]).map(|(&a, &b)| a * b).sum();
            for j in 0..=i {
                row[j] = pr[j] * (row[j] - dot);
            }
            for x in row[i + 1..].iter_mut() {
                *x = T::zero();
            }
        }
        dbias.add_assign(&ds);
        gemm(T::one(), prob.view().t(), doh, T::zero(), dv.view_mut().col_block(cols, p));
        gemm(scale, ds.view(), k.col_block(cols, p), T::zero(), dq.view_mut().col_block(cols, p));
        gemm(scale, ds.view().t(), q.col_block(cols, p), T::zero(), dk.view_mut().col_block(cols, p));
    }
    (dq, dk, dv, dbias)
}

#[allow(clippy::too_many_arguments)]
fn interaction_backward<T: Scalar>(
    state: &InteractionState<T>,
    mut d_log_cum: Matrix<T>,
    sparsity_grad: T,
    alpha: Alpha,
    depth_acc: Option<&mut Option<Matrix<T>>>,
    q_int: MatRef<'_, T>,
    k_int: MatRef<'_, T>,
    r_scale: T,
) -> InteractionGrads<T> {
    let n = state.len();
    // d L_sparsity / d ln I = coef * I on learned entries
    for k in 1..n {
        let ci = &state.cumulative.row(k)[..k];
        let row = d_log_cum.row_mut(k);
        for j in 0..k {
            row[j] += sparsity_grad * ci[j];
        }
        for x in row[k..].iter_mut() {
            *x = T::zero();
        }
    }
    if n > 0 {
        d_log_cum.row_mut(0)[0] = T::zero();
    }
    // deeper layers' products include this layer's own factor
    if let Some(acc) = depth_acc {
        if let Some(prev) = acc.as_ref() {
            d_log_cum.add_assign(prev);
        }
        *acc = Some(d_log_cum.clone());
    }
    let d_logits = logits_grad_from_log_cumulative(&state.gates, &d_log_cum, alpha);
    let dbeta = lower_sum(&d_logits);
    let mut dq_int = Matrix::zeros(n, q_int.cols());
    let mut dk_int = Matrix::zeros(n, k_int.cols());
    gemm(r_scale, d_logits.view(), k_int, T::zero(), dq_int.view_mut());
    gemm(r_scale, d_logits.view().t(), q_int, T::zero(), dk_int.view_mut());
    InteractionGrads {
        dbeta,
        dq_int,
        dk_int,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};

    fn loss_of(params: &ModelParams<f64>, batch: &[&[u32]], alpha: Alpha, gamma: f64, variant: PruningVariant) -> f64 {
        backward(params, batch, alpha, GateMode::Soft, gamma, variant).unwrap().0.total_loss
    }

    fn tiny() -> ModelParams<f64> {
        let mut cfg = ModelConfig::new(9, 8, 2, 2, 3, 6);
        cfg.ff_mult = 2;
        let mut p = ModelParams::init(&cfg, 11).unwrap();
        for t in p.tensors_mut() {
            if t.shape.len() == 2 {
                t.data.iter_mut().for_each(|v| *v *= 5.0);
            }
        }
        // gates in the interior rather than saturated open
        for (i, l) in p.layers.iter_mut().enumerate() {
            l.w_qint = l.w_qint.map(|v| v * 6.0);
            l.w_kint = l.w_kint.map(|v| v * 6.0);
            l.beta = 0.2 + 0.1 * i as f64;
        }
        p
    }

    #[test]
    fn hard_sparsity_matches_rebuilt_masks() {
        let p = tiny();
        let batch: [&[u32]; 2] = [&[1, 4, 2, 7, 3, 0], &[5, 5, 8, 1, 2, 6]];
        for variant in [PruningVariant::Learned, PruningVariant::LearnedDepthPropagated] {
            let (loss, _) = backward(&p, &batch, Alpha::new(2.0).unwrap(), GateMode::Soft, 0.1, variant).unwrap();
            let mut want = 0.0;
            for toks in batch {
                let tr = forward(&p, toks, Alpha::new(2.0).unwrap(), GateMode::Soft, variant).unwrap();
                let own: Vec<_> = tr
                    .interactions
                    .iter()
                    .map(|s| crate::pruning::build_from_logits(s.logits.clone(), Alpha::ONE, GateMode::Hard).unwrap())
                    .collect();
                let states = if variant == PruningVariant::Learned { own } else { crate::pruning::propagate_depth(own) };
                let masks: Vec<_> = states.iter().map(|s| s.keep_mask()).collect();
                want += measure_sparsity(&masks).unwrap().aggregate / 2.0;
            }
            assert!(want > 0.0);
            assert!((loss.hard_sparsity - want).abs() < 1e-12, "{variant}");
        }
    }

    #[test]
    fn hard_mode_is_rejected() {
        let p = tiny();
        let r = backward(&p, &[&[1, 2, 3]], Alpha::ONE, GateMode::Hard, 0.1, PruningVariant::Learned);
        assert!(matches!(r, Err(Error::UnsupportedMode)));
    }

    #[test]
    fn lm_loss_matches_forward_logits() {
        let p = tiny();
        let toks = [1u32, 4, 2, 7, 3];
        let (loss, _) = backward(&p, &[&toks], Alpha::ONE, GateMode::Soft, 0.0, PruningVariant::Learned).unwrap();
        let tr = forward(&p, &toks, Alpha::ONE, GateMode::Soft, PruningVariant::Learned).unwrap();
        let mut ce = 0.0;
        for t in 0..4 {
            let row = tr.logits.row(t);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            ce += lse - row[toks[t + 1] as usize];
        }
        assert!((loss.lm_loss - ce / 4.0).abs() < 1e-12);
        assert_eq!(loss.sparsity_loss, 0.0);
    }

    #[test]
    fn spot_check_against_differences() {
        let p = tiny();
        let batch: [&[u32]; 2] = [&[1, 4, 2, 7, 3, 0], &[5, 5, 8, 1, 2, 6]];
        for (variant, alpha) in [
            (PruningVariant::Learned, 1.0),
            (PruningVariant::Learned, 2.5),
            (PruningVariant::LearnedDepthPropagated, 1.7),
            (PruningVariant::Local(2), 1.0),
        ] {
            let alpha = Alpha::new(alpha).unwrap();
            let (_, g) = backward(&p, &batch, alpha, GateMode::Soft, 0.3, variant).unwrap();
            let mut probe = p.clone();
            let names: Vec<String> = p.tensors().iter().map(|t| t.name.clone()).collect();
            let grads: Vec<Vec<f64>> = g.tensors().iter().map(|t| t.data.to_vec()).collect();
            for (ti, name) in names.iter().enumerate() {
                let len = grads[ti].len();
                for idx in [0, len / 2, len - 1] {
                    let h = 1e-4;
                    let orig = probe.tensors()[ti].data[idx];
                    probe.tensors_mut()[ti].data[idx] = orig + h;
                    let up = loss_of(&probe, &batch, alpha, 0.3, variant);
                    probe.tensors_mut()[ti].data[idx] = orig - h;
                    let down = loss_of(&probe, &batch, alpha, 0.3, variant);
                    probe.tensors_mut()[ti].data[idx] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = grads[ti][idx];
                    let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    assert!(err < 1e-4, "{variant} {name}[{idx}]: fd={fd} analytic={an}");
                }
            }
        }
    }

    #[test]
    fn duplicate_rows_contribute_equally() {
        let p = tiny();
        let row: &[u32] = &[2, 3, 1, 0, 4];
        let alpha = Alpha::new(3.0).unwrap();
        let (l1, g1) = backward(&p, &[row], alpha, GateMode::Soft, 0.2, PruningVariant::Learned).unwrap();
        let (l2, g2) = backward(&p, &[row, row], alpha, GateMode::Soft, 0.2, PruningVariant::Learned).unwrap();
        assert!((l1.total_loss - l2.total_loss).abs() < 1e-12);
        for (a, b) in g1.tensors().iter().zip(g2.tensors().iter()) {
            for (x, y) in a.data.iter().zip(b.data) {
                assert!((x - y).abs() < 1e-12, "{}", a.name);
            }
        }
    }

    #[test]
    fn saturated_open_gates_block_interaction_gradient() {
        let mut p = tiny();
        for l in p.layers.iter_mut() {
            l.beta = 50.0;
        }
        let alpha = Alpha::new(2.0).unwrap();
        let (_, g) = backward(&p, &[&[1, 2, 3, 4, 5]], alpha, GateMode::Soft, 0.0, PruningVariant::Learned).unwrap();
        for l in &g.layers {
            assert!(l.w_qint.as_slice().iter().all(|&v| v == 0.0));
            assert!(l.w_kint.as_slice().iter().all(|&v| v == 0.0));
            assert_eq!(l.beta, 0.0);
        }
    }
}
