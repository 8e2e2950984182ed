//! Interaction matrices: which cached tokens each position may still see.
//!
//! For layer ℓ the gate logits are `Q_int K_intᵀ / √r + β`. Entry
//! `(n, j)` with `j < n` is the decision of token `n` about token `j`; the
//! interaction `I[k][j]` is the product of gates `(j+1..=k, j)`, so once a
//! gate closes the token stays dropped for every later position.
//!
//! Soft products are accumulated as clamped log sums; anything at or below
//! [`LOG_FLOOR`] is treated as fully masked downstream.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::entmax::{alpha_sigmoid, grad_from_output, step_gate, Alpha};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm, MatRef, Matrix};

/// Log-space clamp for interaction values; entries at the floor are masked.
pub const LOG_FLOOR: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// α-sigmoid gates, differentiable.
    Soft,
    /// Step gates, inference only.
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k")]
pub enum PruningVariant {
    Learned,
    LearnedDepthPropagated,
    Dense,
    Local(usize),
    StridedSparse(usize),
}

impl PruningVariant {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PruningVariant::Local(0) | PruningVariant::StridedSparse(0) => {
                Err(Error::Config("static variants need k >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(
            self,
            PruningVariant::Learned | PruningVariant::LearnedDepthPropagated
        )
    }

    /// Builds a variant from a name plus the `k` used by static baselines.
    pub fn from_name(name: &str, k: Option<usize>) -> Result<Self> {
        let need_k = || k.ok_or_else(|| Error::Config(format!("variant `{name}` requires k")));
        let v = match name {
            "learned" => PruningVariant::Learned,
            "learned_depth_propagated" | "depth" => PruningVariant::LearnedDepthPropagated,
            "dense" => PruningVariant::Dense,
            "local" => PruningVariant::Local(need_k()?),
            "strided" | "strided_sparse" => PruningVariant::StridedSparse(need_k()?),
            other => return Err(Error::Config(format!("unknown variant `{other}`"))),
        };
        v.validate()?;
        Ok(v)
    }
}

impl fmt::Display for PruningVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PruningVariant::Learned => write!(f, "learned"),
            PruningVariant::LearnedDepthPropagated => write!(f, "learned_depth_propagated"),
            PruningVariant::Dense => write!(f, "dense"),
            PruningVariant::Local(k) => write!(f, "local:{k}"),
            PruningVariant::StridedSparse(k) => write!(f, "strided_sparse:{k}"),
        }
    }
}

impl FromStr for PruningVariant {
    type Err = Error;

    /// Accepts `learned`, `dense`, `local:8`, `strided_sparse:4`, ...
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((name, k)) => {
                let k = k
                    .parse()
                    .map_err(|_| Error::Config(format!("bad k in variant `{s}`")))?;
                Self::from_name(name, Some(k))
            }
            None => Self::from_name(s, None),
        }
    }
}

/// One layer's interaction state for a single sequence.
#[derive(Clone, Debug)]
pub struct InteractionState<T> {
    /// Gate logits; only the strictly lower triangle is meaningful.
    pub logits: Matrix<T>,
    /// Per-step gates `Ī`; 1 on the diagonal, 0 above.
    pub gates: Matrix<T>,
    /// Interaction `I` actually applied to attention.
    pub cumulative: Matrix<T>,
    /// `ln I` clamped to [`LOG_FLOOR`]; the attention bias.
    pub log_cumulative: Matrix<T>,
}

impl<T: Scalar> InteractionState<T> {
    pub fn len(&self) -> usize {
        self.cumulative.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether `(k, j)` may be attended.
    #[inline]
    pub fn is_kept(&self, k: usize, j: usize) -> bool {
        self.log_cumulative[(k, j)] > T::lit(LOG_FLOOR)
    }

    /// Binary keep mask (1 where attention may read).
    pub fn keep_mask(&self) -> Matrix<T> {
        let n = self.len();
        Matrix::from_fn(n, n, |k, j| {
            if self.is_kept(k, j) {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// `Q_int K_intᵀ / √r + β`, with zeros outside the strict lower triangle.
pub fn interaction_logits<T: Scalar>(q_int: MatRef<'_, T>, k_int: MatRef<'_, T>, beta: T) -> Result<Matrix<T>> {
    if q_int.rows() != k_int.rows() || q_int.cols() != k_int.cols() {
        return Err(Error::Shape(format!(
            "interaction queries {}x{} vs keys {}x{}",
            q_int.rows(),
            q_int.cols(),
            k_int.rows(),
            k_int.cols()
        )));
    }
    let r = q_int.cols();
    if r == 0 {
        return Err(Error::Shape("interaction dimension r must be >= 1".into()));
    }
    let n = q_int.rows();
    let scale = T::one() / T::lit(r as f64).sqrt();
    let mut logits = Matrix::zeros(n, n);
    gemm(scale, q_int, k_int.t(), T::zero(), logits.view_mut());
    for k in 0..n {
        let row = logits.row_mut(k);
        for v in row[..k].iter_mut() {
            *v += beta;
        }
        for v in row[k..].iter_mut() {
            *v = T::zero();
        }
    }
    Ok(logits)
}

/// One layer of interaction from queries/keys.
pub fn build_interaction<T: Scalar>(
    q_int: MatRef<'_, T>,
    k_int: MatRef<'_, T>,
    beta: T,
    alpha: Alpha,
    mode: GateMode,
) -> Result<InteractionState<T>> {
    let logits = interaction_logits(q_int, k_int, beta)?;
    build_from_logits(logits, alpha, mode)
}

/// One layer of interaction from precomputed gate logits.
pub fn build_from_logits<T: Scalar>(logits: Matrix<T>, alpha: Alpha, mode: GateMode) -> Result<InteractionState<T>> {
    let n = logits.rows();
    if logits.cols() != n {
        return Err(Error::Shape(format!("logits must be square, got {}x{}", n, logits.cols())));
    }
    let floor = T::lit(LOG_FLOOR);
    let mut gates = Matrix::zeros(n, n);
    for k in 0..n {
        for j in 0..k {
            let x = logits[(k, j)];
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("interaction logit ({k}, {j})")));
            }
            gates[(k, j)] = match mode {
                GateMode::Soft => alpha_sigmoid(x, alpha),
                GateMode::Hard => step_gate(x),
            };
        }
        gates[(k, k)] = T::one();
    }

    let mut log_cum = Matrix::filled(n, n, floor);
    for k in 0..n {
        log_cum[(k, k)] = T::zero();
        for j in 0..k {
            let prev = if k == j + 1 { T::zero() } else { log_cum[(k - 1, j)] };
            let g = gates[(k, j)];
            log_cum[(k, j)] = match mode {
                GateMode::Soft => {
                    let lg = if g > T::zero() { g.ln().max(floor) } else { floor };
                    (prev + lg).max(floor)
                }
                GateMode::Hard => {
                    if prev > floor && g > T::zero() {
                        T::zero()
                    } else {
                        floor
                    }
                }
            };
        }
    }
    let cumulative = exp_masked(&log_cum);
    Ok(InteractionState {
        logits,
        gates,
        cumulative,
        log_cumulative: log_cum,
    })
}

fn exp_masked<T: Scalar>(log_cum: &Matrix<T>) -> Matrix<T> {
    let floor = T::lit(LOG_FLOOR);
    log_cum.map(|v| if v <= floor { T::zero() } else { v.exp() })
}

/// Depth-propagated interaction: the effective matrix at layer ℓ is the
/// elementwise product of the per-layer cumulative matrices of layers
/// `1..=ℓ`, so a token dropped at one layer is dropped at every deeper one.
///
/// Each layer's own gates use that layer's queries and keys.
pub fn build_interaction_depth_propagated<T: Scalar>(
    layers: &[(MatRef<'_, T>, MatRef<'_, T>, T)],
    alpha: Alpha,
    mode: GateMode,
) -> Result<Vec<InteractionState<T>>> {
    if layers.is_empty() {
        return Err(Error::Config("depth propagation needs at least one layer".into()));
    }
    let own = layers
        .iter()
        .map(|&(q, k, beta)| build_interaction(q, k, beta, alpha, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(propagate_depth(own))
}

/// Combines independently built layer states into depth-propagated ones.
pub fn propagate_depth<T: Scalar>(own: Vec<InteractionState<T>>) -> Vec<InteractionState<T>> {
    let mut out: Vec<InteractionState<T>> = Vec::with_capacity(own.len());
    for state in own {
        let next = deepen(out.last(), state);
        out.push(next);
    }
    out
}

/// Stacks one layer's own state under the effective state of the layer
/// above it (`None` for the first layer).
pub fn deepen<T: Scalar>(prev: Option<&InteractionState<T>>, own: InteractionState<T>) -> InteractionState<T> {
    let Some(prev) = prev else {
        return own;
    };
    let floor = T::lit(LOG_FLOOR);
    let mut log_cumulative = prev.log_cumulative.clone();
    for (a, &b) in log_cumulative.as_mut_slice().iter_mut().zip(own.log_cumulative.as_slice()) {
        *a = (*a + b).max(floor);
    }
    let cumulative = exp_masked(&log_cumulative);
    InteractionState {
        logits: own.logits,
        gates: own.gates,
        cumulative,
        log_cumulative,
    }
}

/// Back-propagates `dL/d(ln I)` of one layer's own cumulative matrix to
/// the gate logits (soft mode).
///
/// `ln I[k][j] = Σ_{n=j+1..=k} ln Ī[n][j]`, so the gradient of a gate is the
/// column suffix sum of the incoming gradient, times `σ'/σ`.
pub fn logits_grad_from_log_cumulative<T: Scalar>(
    gates: &Matrix<T>,
    d_log_cum: &Matrix<T>,
    alpha: Alpha,
) -> Matrix<T> {
    let n = gates.rows();
    let mut d_logits = Matrix::zeros(n, n);
    let mut suffix = vec![T::zero(); n];
    for k in (1..n).rev() {
        for j in 0..k {
            suffix[j] += d_log_cum[(k, j)];
            let g = gates[(k, j)];
            if g > T::zero() {
                let slope = grad_from_output(g, alpha);
                d_logits[(k, j)] = suffix[j] * slope / g;
            }
        }
    }
    d_logits
}

/// Causal binary mask of a non-learned variant.
pub fn static_mask<T: Scalar>(variant: PruningVariant, n: usize) -> Result<Matrix<T>> {
    variant.validate()?;
    let keep: Box<dyn Fn(usize, usize) -> bool> = match variant {
        PruningVariant::Dense => Box::new(|_, _| true),
        PruningVariant::Local(k) => Box::new(move |i, j| i - j < k),
        PruningVariant::StridedSparse(k) => Box::new(move |i, j| {
            let same_block = i / k == j / k;
            let stride_column = j % k == k - 1 && j < (i / k) * k;
            same_block || stride_column
        }),
        PruningVariant::Learned | PruningVariant::LearnedDepthPropagated => {
            return Err(Error::Config(format!("{variant} has no static mask")));
        }
    };
    Ok(Matrix::from_fn(n, n, |i, j| {
        if j <= i && keep(i, j) {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// Interaction state for a fixed binary mask.
pub fn state_from_mask<T: Scalar>(mask: Matrix<T>) -> InteractionState<T> {
    let n = mask.rows();
    let floor = T::lit(LOG_FLOOR);
    let log_cumulative = mask.map(|v| if v > T::zero() { T::zero() } else { floor });
    InteractionState {
        logits: Matrix::zeros(n, n),
        gates: mask.clone(),
        cumulative: mask,
        log_cumulative,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    /// `[layer][position]`; position 0 (no predecessors) reports 0.
    pub per_position: Vec<Vec<f64>>,
    /// Dropped-predecessor counts, `[layer][position]`.
    pub dropped: Vec<Vec<usize>>,
    /// Mean over positions with at least one predecessor.
    pub per_layer: Vec<f64>,
    /// Mean of `per_layer`.
    pub aggregate: f64,
}

/// Fraction of previous tokens dropped, per position and layer.
pub fn measure_sparsity<T: Scalar>(masks: &[Matrix<T>]) -> Result<SparsityReport> {
    let mut report = SparsityReport::default();
    for (layer, mask) in masks.iter().enumerate() {
        let n = mask.rows();
        if mask.cols() != n {
            return Err(Error::Shape(format!("layer {layer} mask is not square")));
        }
        let mut per_pos = vec![0.0; n];
        let mut dropped = vec![0usize; n];
        for i in 0..n {
            for j in 0..i {
                let v = mask[(i, j)];
                if v == T::zero() {
                    dropped[i] += 1;
                } else if v != T::one() {
                    return Err(Error::Config(format!(
                        "mask entry ({i}, {j}) of layer {layer} is not binary: {v}"
                    )));
                }
            }
            if i > 0 {
                per_pos[i] = dropped[i] as f64 / i as f64;
            }
        }
        let layer_mean = if n > 1 {
            per_pos[1..].iter().sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        report.per_position.push(per_pos);
        report.dropped.push(dropped);
        report.per_layer.push(layer_mean);
    }
    report.aggregate = if report.per_layer.is_empty() {
        0.0
    } else {
        report.per_layer.iter().sum::<f64>() / report.per_layer.len() as f64
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn alpha(v: f64) -> Alpha {
        Alpha::new(v).unwrap()
    }

    /// Logits such that every gate has the same value under α = 2.
    fn uniform_gate_logits(n: usize, gate: f64) -> Matrix<f64> {
        Matrix::from_fn(n, n, |k, j| if j < k { 2.0 * gate - 1.0 } else { 0.0 })
    }

    #[test]
    fn single_token_is_kept() {
        let s = build_from_logits(Matrix::<f64>::zeros(1, 1), alpha(2.0), GateMode::Soft).unwrap();
        assert_eq!(s.cumulative.as_slice(), &[1.0]);
    }

    #[test]
    fn open_gates_give_causal_mask() {
        let s = build_from_logits(uniform_gate_logits(5, 1.0), alpha(2.0), GateMode::Soft).unwrap();
        let dense = static_mask::<f64>(PruningVariant::Dense, 5).unwrap();
        assert_eq!(s.cumulative, dense);
    }

    #[test]
    fn cumulative_product_of_half_gates() {
        // 1-based: Ī(2,1) = Ī(3,1) = 0.5, all else open => I(3,1) = 0.25
        let mut logits = uniform_gate_logits(3, 1.0);
        logits[(1, 0)] = 0.0;
        logits[(2, 0)] = 0.0;
        let s = build_from_logits(logits, alpha(2.0), GateMode::Soft).unwrap();
        assert!((s.cumulative[(2, 0)] - 0.25).abs() < 1e-12);
        assert!((s.cumulative[(1, 0)] - 0.5).abs() < 1e-12);
        assert_eq!(s.cumulative[(2, 1)], 1.0);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let mut logits = Matrix::<f64>::zeros(3, 3);
        logits[(2, 1)] = f64::NAN;
        assert!(matches!(
            build_from_logits(logits, alpha(2.0), GateMode::Soft),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn depth_single_layer_matches_plain() {
        let q = Matrix::from_fn(6, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        let k = Matrix::from_fn(6, 3, |i, j| ((i + 2 * j) as f64 * 0.71).cos());
        let plain = build_interaction(q.view(), k.view(), 0.1, alpha(3.0), GateMode::Soft).unwrap();
        let deep = build_interaction_depth_propagated(&[(q.view(), k.view(), 0.1)], alpha(3.0), GateMode::Soft).unwrap();
        assert_eq!(deep.len(), 1);
        assert_eq!(deep[0].cumulative, plain.cumulative);
    }

    #[test]
    fn depth_product_of_two_layers() {
        // layer 1: I(1,0) = 0.5 ; layer 2 own factor 0.5 => 0.25
        let mut l1 = uniform_gate_logits(2, 1.0);
        l1[(1, 0)] = 0.0;
        let l2 = l1.clone();
        let own = vec![
            build_from_logits(l1, alpha(2.0), GateMode::Soft).unwrap(),
            build_from_logits(l2, alpha(2.0), GateMode::Soft).unwrap(),
        ];
        let deep = propagate_depth(own);
        assert!((deep[0].cumulative[(1, 0)] - 0.5).abs() < 1e-12);
        assert!((deep[1].cumulative[(1, 0)] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn depth_hard_drop_propagates() {
        let mut l1 = uniform_gate_logits(4, 1.0);
        l1[(2, 0)] = -1.0;
        let l2 = uniform_gate_logits(4, 1.0);
        let l3 = uniform_gate_logits(4, 1.0);
        let own = [l1, l2, l3]
            .into_iter()
            .map(|l| build_from_logits(l, alpha(2.0), GateMode::Hard).unwrap())
            .collect();
        for s in propagate_depth(own) {
            assert_eq!(s.cumulative[(1, 0)], 1.0);
            assert_eq!(s.cumulative[(2, 0)], 0.0);
            assert_eq!(s.cumulative[(3, 0)], 0.0);
        }
    }

    #[test]
    fn local_masks() {
        let n = 6;
        let id = static_mask::<f64>(PruningVariant::Local(1), n).unwrap();
        assert_eq!(id, Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 }));
        let full = static_mask::<f64>(PruningVariant::Local(n), n).unwrap();
        assert_eq!(full, static_mask(PruningVariant::Dense, n).unwrap());
        let wide = static_mask::<f64>(PruningVariant::Local(3 * n), n).unwrap();
        assert_eq!(wide, full);
        let m = static_mask::<f64>(PruningVariant::Local(3), n).unwrap();
        for i in 0..n {
            assert_eq!(m.row(i).iter().sum::<f64>(), (i + 1).min(3) as f64);
        }
    }

    #[test]
    fn strided_row_three_of_four() {
        let m = static_mask::<f64>(PruningVariant::StridedSparse(2), 4).unwrap();
        assert_eq!(m.row(3), &[0.0, 1.0, 1.0, 1.0]);
        assert_eq!(m.row(1), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.row(2), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn static_mask_rejects_learned_and_zero_k() {
        assert!(static_mask::<f64>(PruningVariant::Learned, 3).is_err());
        assert!(static_mask::<f64>(PruningVariant::Local(0), 3).is_err());
    }

    #[test]
    fn sparsity_examples() {
        let dense = static_mask::<f64>(PruningVariant::Dense, 5).unwrap();
        let r = measure_sparsity(&[dense]).unwrap();
        assert_eq!(r.aggregate, 0.0);

        let id = static_mask::<f64>(PruningVariant::Local(1), 5).unwrap();
        let r = measure_sparsity(&[id]).unwrap();
        assert_eq!(r.per_position[0][0], 0.0);
        assert!(r.per_position[0][1..].iter().all(|&s| s == 1.0));
        assert_eq!(r.aggregate, 1.0);

        // 1-based row 5 keeps {3, 5}
        let mut m = static_mask::<f64>(PruningVariant::Dense, 5).unwrap();
        for j in [0, 1, 3] {
            m[(4, j)] = 0.0;
        }
        let r = measure_sparsity(&[m]).unwrap();
        assert_eq!(r.per_position[0][4], 0.75);
        assert_eq!(r.dropped[0][4], 3);
    }

    #[test]
    fn sparsity_rejects_soft_values() {
        let mut m = static_mask::<f64>(PruningVariant::Dense, 3).unwrap();
        m[(2, 0)] = 0.5;
        assert!(measure_sparsity(&[m]).is_err());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("learned".parse::<PruningVariant>().unwrap(), PruningVariant::Learned);
        assert_eq!("local:4".parse::<PruningVariant>().unwrap(), PruningVariant::Local(4));
        assert_eq!(
            PruningVariant::from_name("strided", Some(2)).unwrap(),
            PruningVariant::StridedSparse(2)
        );
        assert!("local".parse::<PruningVariant>().is_err());
        assert!("bogus".parse::<PruningVariant>().is_err());
        let v = PruningVariant::StridedSparse(3);
        assert_eq!(v.to_string().parse::<PruningVariant>().unwrap(), v);
    }

    proptest! {
        #[test]
        fn irreversible_and_diagonal(seed in 0u64..500, n in 1usize..20, al in 1.0f64..6.0, hard in any::<bool>()) {
            let logits = Matrix::from_fn(n, n, |k, j| ((seed as f64 + (k * 31 + j * 7) as f64) * 0.618).sin() * 1.5 + 0.3);
            let mode = if hard { GateMode::Hard } else { GateMode::Soft };
            let s = build_from_logits(logits, alpha(al), mode).unwrap();
            for k in 0..n {
                prop_assert_eq!(s.cumulative[(k, k)], 1.0);
                for j in k + 1..n {
                    prop_assert_eq!(s.cumulative[(k, j)], 0.0);
                }
                if k > 0 {
                    for j in 0..k {
                        prop_assert!(s.cumulative[(k, j)] <= s.cumulative[(k - 1, j)]);
                    }
                }
            }
        }

        #[test]
        fn hard_is_large_alpha_limit(seed in 0u64..500, n in 2usize..16) {
            let logits = Matrix::from_fn(n, n, |k, j| {
                let v = ((seed as f64 * 1.3 + (k * 13 + j * 5) as f64) * 0.77).sin() * 2.0;
                if v.abs() < 0.1 { 0.5 } else { v }
            });
            let hard = build_from_logits(logits.clone(), alpha(2.0), GateMode::Hard).unwrap();
            let soft = build_from_logits(logits, alpha(64.0), GateMode::Soft).unwrap();
            prop_assert_eq!(hard.cumulative, soft.cumulative.map(|v| v.round()));
        }
    }
}
