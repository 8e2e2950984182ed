//! Invariant suites checked against independent reference implementations.
//!
//! Each suite returns a [`SuiteReport`] instead of panicking so callers can
//! print one line per suite and keep going.

use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::entmax::{alpha_sigmoid, Alpha};
use crate::inference::{equivalent_logits, generate, generate_with, GatePolicy, GenerationRequest, PrefillMode, Sampling};
use crate::kvcache::KvCacheBuffer;
use crate::model::{backward, count_flops, ModelConfig, ModelParams};
use crate::pruning::{build_interaction, static_mask, GateMode, PruningVariant};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{verdict}] {} ({:.2}s): {}", self.name, self.seconds, self.detail)
    }
}

fn timed(name: &str, body: impl FnOnce() -> Result<String, String>) -> SuiteReport {
    let started = Instant::now();
    let (passed, detail) = match body() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    SuiteReport {
        name: name.to_string(),
        passed,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    }
}

/// `p·x + H_α(p)` for the distribution `(p, 1-p)`.
pub fn gate_objective(p: f64, x: f64, alpha: f64) -> f64 {
    let q = 1.0 - p;
    let entropy = if alpha == 1.0 {
        let xlx = |v: f64| if v > 0.0 { v * v.ln() } else { 0.0 };
        -xlx(p) - xlx(q)
    } else {
        (p - p.powf(alpha) + q - q.powf(alpha)) / (alpha * (alpha - 1.0))
    };
    p * x + entropy
}

/// Maximizer of [`gate_objective`] over the grid `{i·step}` of `[0, 1]`.
///
/// The objective is concave in `p`, so an integer ternary search finds the
/// same grid point as scanning all of them.
pub fn grid_maximizer(x: f64, alpha: f64, step: f64) -> f64 {
    let n = (1.0 / step).round() as i64;
    let f = |i: i64| gate_objective(i as f64 / n as f64, x, alpha);
    let (mut lo, mut hi) = (0i64, n);
    while hi - lo > 2 {
        let m1 = lo + (hi - lo) / 3;
        let m2 = hi - (hi - lo) / 3;
        if f(m1) < f(m2) {
            lo = m1 + 1;
        } else {
            hi = m2 - 1;
        }
    }
    let best = (lo..=hi).max_by(|&a, &b| f(a).total_cmp(&f(b))).unwrap_or(lo);
    best as f64 / n as f64
}

/// α-sigmoid against grid maximization on `pairs` random `(x, α)`, plus
/// exact saturation at `±1/(α-1)`.
pub fn entmax_oracle(pairs: usize, seed: u64) -> SuiteReport {
    timed("entmax oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..pairs {
            let alpha = if rng.random_bool(0.1) { 1.0 } else { rng.random_range(1.0..8.0) };
            let x = rng.random_range(-4.0..4.0);
            let got = alpha_sigmoid(x, Alpha::new(alpha).map_err(|e| e.to_string())?);
            let want = grid_maximizer(x, alpha, 1e-6);
            let err = (got - want).abs();
            if err > 1e-5 {
                return Err(format!("x={x} alpha={alpha}: {got} vs grid {want}"));
            }
            worst = worst.max(err);
        }
        for alpha in [1.5, 2.0, 4.0, 8.0] {
            let a = Alpha::new(alpha).map_err(|e| e.to_string())?;
            let s = 1.0 / (alpha - 1.0);
            for (x, want) in [(s, 1.0), (-s, 0.0), (s * 1.5, 1.0), (-s * 1.5, 0.0)] {
                if alpha_sigmoid(x, a) != want {
                    return Err(format!("alpha={alpha}: gate({x}) is not exactly {want}"));
                }
            }
            if !(alpha_sigmoid(s * 0.999, a) < 1.0 && alpha_sigmoid(-s * 0.999, a) > 0.0) {
                return Err(format!("alpha={alpha}: saturates before ±{s}"));
            }
        }
        Ok(format!("{pairs} pairs, max |err| {worst:.2e}; saturation exact"))
    })
}

/// Interaction matrix by the defining product: `I[k][j]` is the product of
/// the gates of steps `j+1..=k` on token `j`.
pub fn naive_interaction(logits: &Matrix<f64>, alpha: Alpha, mode: GateMode) -> Matrix<f64> {
    let n = logits.rows();
    let gate = |k: usize, j: usize| match mode {
        GateMode::Soft => alpha_sigmoid(logits[(k, j)], alpha),
        GateMode::Hard => {
            if logits[(k, j)] >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
    };
    let mut out = Matrix::zeros(n, n);
    for k in 0..n {
        for j in 0..=k {
            let mut prod = 1.0;
            for step in j + 1..=k {
                prod *= gate(step, j);
            }
            out[(k, j)] = prod;
        }
    }
    out
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `build_interaction` against [`naive_interaction`] on random instances,
/// plus irreversibility down every column.
pub fn interaction_oracle(instances: usize, seed: u64) -> SuiteReport {
    timed("interaction oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for case in 0..instances {
            let n = rng.random_range(1..=32);
            let r = rng.random_range(1..=8);
            let q = normal_matrix(&mut rng, n, r, 1.5);
            let k = normal_matrix(&mut rng, n, r, 1.5);
            let beta = rng.random_range(-2.0..3.0);
            let alpha = Alpha::new(*[1.0, 1.5, 2.0, 3.7, 8.0].get(case % 5).unwrap_or(&1.0)).map_err(|e| e.to_string())?;
            for mode in [GateMode::Soft, GateMode::Hard] {
                let state = build_interaction(q.view(), k.view(), beta, alpha, mode).map_err(|e| e.to_string())?;
                let want = naive_interaction(&state.logits, alpha, mode);
                for a in 0..n {
                    for b in 0..n {
                        let (got, w) = (state.cumulative[(a, b)], want[(a, b)]);
                        let ok = match mode {
                            GateMode::Soft => (got - w).abs() <= 1e-6,
                            GateMode::Hard => got == w,
                        };
                        if !ok {
                            return Err(format!("case {case} {mode:?} ({a}, {b}): {got} vs {w}"));
                        }
                        if mode == GateMode::Soft {
                            worst = worst.max((got - w).abs());
                        }
                        let above = if a > 0 { state.cumulative[(a - 1, b)] } else { 1.0 };
                        if b < a && got > above {
                            return Err(format!("case {case} {mode:?}: token {b} revived at step {a}"));
                        }
                        if b < a && above == 0.0 && state.is_kept(a, b) {
                            return Err(format!("case {case} {mode:?}: dropped token {b} readable at step {a}"));
                        }
                    }
                }
            }
        }
        Ok(format!("{instances} instances, soft max |err| {worst:.2e}, hard exact"))
    })
}

/// Hand-enumerated local and strided masks for `n = 8`.
pub const BASELINE_PATTERNS: [(PruningVariant, [&str; 8]); 6] = [
    (
        PruningVariant::Local(1),
        ["10000000", "01000000", "00100000", "00010000", "00001000", "00000100", "00000010", "00000001"],
    ),
    (
        PruningVariant::Local(2),
        ["10000000", "11000000", "01100000", "00110000", "00011000", "00001100", "00000110", "00000011"],
    ),
    (
        PruningVariant::Local(4),
        ["10000000", "11000000", "11100000", "11110000", "01111000", "00111100", "00011110", "00001111"],
    ),
    (
        PruningVariant::StridedSparse(1),
        ["10000000", "11000000", "11100000", "11110000", "11111000", "11111100", "11111110", "11111111"],
    ),
    (
        PruningVariant::StridedSparse(2),
        ["10000000", "11000000", "01100000", "01110000", "01011000", "01011100", "01010110", "01010111"],
    ),
    (
        PruningVariant::StridedSparse(4),
        ["10000000", "11000000", "11100000", "11110000", "00011000", "00011100", "00011110", "00011111"],
    ),
];

pub fn baseline_masks() -> SuiteReport {
    timed("baseline masks", || {
        for (variant, rows) in BASELINE_PATTERNS {
            let mask: Matrix<f64> = static_mask(variant, 8).map_err(|e| e.to_string())?;
            for (i, want) in rows.iter().enumerate() {
                let got: String = mask.row(i).iter().map(|&v| if v == 1.0 { '1' } else { '0' }).collect();
                if got != *want {
                    return Err(format!("{variant} row {i}: {got} vs {want}"));
                }
            }
        }
        Ok(format!("{} patterns exact", BASELINE_PATTERNS.len()))
    })
}

/// Randomized push/remove against a naive list per row, checking payload
/// multisets, the load-factor floor and that freed slots are never exposed.
pub fn cache_structural(ops: usize, batch: usize, seed: u64) -> SuiteReport {
    timed("kv-cache structure", || {
        let width = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cache = KvCacheBuffer::<f32>::new(batch, width).map_err(|e| e.to_string())?;
        cache.set_poison(true);
        let mut reference: Vec<Vec<(u32, Vec<f32>)>> = vec![Vec::new(); batch];
        let mut next_pos = vec![0u32; batch];
        let mut min_load = 1.0f64;
        for op in 0..ops {
            let pushing = rng.random_bool(0.55) || reference.iter().all(Vec::is_empty);
            if pushing {
                let active: Vec<bool> = (0..batch).map(|_| rng.random_bool(0.8)).collect();
                let mut tokens = Vec::with_capacity(batch * width);
                for b in 0..batch {
                    let payload: Vec<f32> = (0..width).map(|c| (next_pos[b] * 10 + c as u32) as f32 + b as f32 * 0.25).collect();
                    tokens.extend_from_slice(&payload);
                    if active[b] {
                        reference[b].push((next_pos[b], payload));
                    }
                }
                cache.push(&tokens, &next_pos, Some(&active)).map_err(|e| format!("op {op}: {e}"))?;
                for b in 0..batch {
                    if active[b] {
                        next_pos[b] += 1;
                    }
                }
            } else {
                let view = cache.get();
                let e = view.extent();
                let mut mask = vec![false; batch * e];
                for b in 0..batch {
                    for s in 0..e {
                        if view.mask(b)[s] && rng.random_bool(0.3) {
                            mask[b * e + s] = true;
                            let pos = view.positions(b)[s];
                            reference[b].retain(|(p, _)| *p != pos);
                        }
                    }
                }
                cache.remove(&mask).map_err(|e| format!("op {op}: {e}"))?;
            }
            let lf = cache.load_factor();
            min_load = min_load.min(lf);
            if lf < 0.9 {
                return Err(format!("op {op}: load factor {lf:.3}"));
            }
            let view = cache.get();
            for b in 0..batch {
                let mut live: Vec<(u32, Vec<f32>)> = Vec::new();
                for s in 0..view.extent() {
                    let slot = view.slot(b, s);
                    match (view.mask(b)[s], slot) {
                        (true, Some(p)) => live.push((view.positions(b)[s], p.to_vec())),
                        (false, None) => {}
                        (valid, _) => return Err(format!("op {op}: row {b} slot {s} valid={valid} exposed wrongly")),
                    }
                    let raw = &view.row(b)[s * width..(s + 1) * width];
                    if !view.mask(b)[s] && raw.iter().any(|v| !v.is_nan()) && !raw.iter().all(|&v| v == 0.0) {
                        return Err(format!("op {op}: freed slot {s} of row {b} still holds a payload"));
                    }
                }
                live.sort_by_key(|(p, _)| *p);
                if live != reference[b] || cache.kept(b) != reference[b].len() {
                    return Err(format!("op {op}: row {b} diverged from the reference"));
                }
            }
        }
        Ok(format!("{ops} ops on batch {batch}, min load factor {min_load:.3}"))
    })
}

/// Tiny model with gates that fire often; varies with `seed`.
pub fn tiny_gated_model(seed: u64, max_context: usize) -> ModelParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig::new(24, 16, 2, 2, 4, max_context);
    let mut p = ModelParams::<f32>::init(&cfg, seed).expect("valid tiny config");
    for layer in &mut p.layers {
        layer.beta = rng.random_range(-1.0..2.0);
        let scale = rng.random_range(2.0..5.0);
        layer.w_qint.as_mut_slice().iter_mut().for_each(|w| *w *= scale);
        layer.w_kint.as_mut_slice().iter_mut().for_each(|w| *w *= scale);
    }
    p
}

const KEYSTONE_VARIANTS: [PruningVariant; 5] = [
    PruningVariant::Learned,
    PruningVariant::LearnedDepthPropagated,
    PruningVariant::Learned,
    PruningVariant::Local(3),
    PruningVariant::StridedSparse(2),
];

/// Cached generation against the cache-free masked forward on `models`
/// random tiny models, and garbage written into freed slots.
pub fn cache_consistency(models: usize, seed: u64) -> SuiteReport {
    timed("cache consistency", || {
        let mut worst = 0.0f64;
        let mut removals = 0usize;
        for m in 0..models {
            let mseed = seed.wrapping_add(m as u64);
            let params = tiny_gated_model(mseed, 48);
            let variant = KEYSTONE_VARIANTS[m % KEYSTONE_VARIANTS.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(mseed ^ 0xabc);
            let prompts = (0..3)
                .map(|_| {
                    let n = rng.random_range(1..=16);
                    (0..n).map(|_| rng.random_range(0..24)).collect()
                })
                .collect();
            let mut req = GenerationRequest::new(prompts, 16);
            req.sampling = Sampling::Temperature(1.0);
            req.seed = mseed;
            req.prefill = if m % 2 == 0 { PrefillMode::Pruned } else { PrefillMode::Dense };
            let gen = generate(&params, &req, variant).map_err(|e| e.to_string())?;
            for (b, prompt) in req.prompts.iter().enumerate() {
                let mut seq = prompt.clone();
                seq.extend_from_slice(&gen.tokens[b][..gen.tokens[b].len() - 1]);
                let reference = equivalent_logits(&params, &seq, variant, prompt.len(), req.prefill).map_err(|e| e.to_string())?;
                for (i, step) in gen.logits.iter().enumerate() {
                    let want = reference.row(prompt.len() - 1 + i);
                    for (a, w) in step.row(b).iter().zip(want) {
                        let err = (a - w).abs() as f64;
                        if !(err <= 1e-4) {
                            return Err(format!("model {m} ({variant}) row {b} step {i}: |diff| {err:.3e}"));
                        }
                        worst = worst.max(err);
                    }
                }
            }
            let dirty = generate_with(&params, &req, GatePolicy::Model(variant), |d| {
                for c in d.caches_mut() {
                    c.scribble_free_slots(1e30);
                }
            })
            .map_err(|e| e.to_string())?;
            let same = gen.tokens == dirty.tokens && gen.logits.iter().zip(&dirty.logits).all(|(a, b)| a.as_slice() == b.as_slice());
            if !same {
                return Err(format!("model {m} ({variant}): garbage in freed slots changed the output"));
            }
            removals += gen.report.drop_events.len();
        }
        if removals == 0 {
            return Err("no token was ever removed; the suite exercised nothing".into());
        }
        Ok(format!("{models} models, max |diff| {worst:.2e}, {removals} removals, garbage ignored"))
    })
}

/// Extrapolated central differences of the total loss against analytic gradients for
/// every parameter of a tiny model, in soft mode at each α.
pub fn gradient_check(alphas: &[f64], gamma: f64, seed: u64) -> SuiteReport {
    timed("gradient check", || {
        let mut cfg = ModelConfig::new(32, 16, 2, 2, 4, 8);
        cfg.ff_mult = 4;
        let mut params = ModelParams::<f64>::init(&cfg, seed).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut params.layers {
            // keep some gates inside the unsaturated band for every α
            layer.beta = rng.random_range(-0.2..0.2);
            layer.w_qint.as_mut_slice().iter_mut().for_each(|w| *w *= 0.5);
        }
        let batch: Vec<Vec<u32>> = (0..2).map(|_| (0..8).map(|_| rng.random_range(0..32)).collect()).collect();
        let rows: Vec<&[u32]> = batch.iter().map(Vec::as_slice).collect();
        let h = 1e-4;
        let mut worst = 0.0f64;
        let mut checked = 0usize;
        for &a in alphas {
            let alpha = Alpha::new(a).map_err(|e| e.to_string())?;
            let loss = |p: &ModelParams<f64>| -> Result<f64, String> {
                backward(p, &rows, alpha, GateMode::Soft, gamma, PruningVariant::Learned)
                    .map(|(l, _)| l.total_loss)
                    .map_err(|e| e.to_string())
            };
            let (_, grads) =
                backward(&params, &rows, alpha, GateMode::Soft, gamma, PruningVariant::Learned).map_err(|e| e.to_string())?;
            let analytic: Vec<(String, Vec<f64>)> = grads.tensors().iter().map(|t| (t.name.clone(), t.data.to_vec())).collect();
            let mut probe = params.clone();
            for (ti, (name, g)) in analytic.iter().enumerate() {
                for (idx, &an) in g.iter().enumerate() {
                    let orig = probe.tensors()[ti].data[idx];
                    let mut central = |step: f64| -> Result<f64, String> {
                        probe.tensors_mut()[ti].data[idx] = orig + step;
                        let up = loss(&probe)?;
                        probe.tensors_mut()[ti].data[idx] = orig - step;
                        let down = loss(&probe)?;
                        probe.tensors_mut()[ti].data[idx] = orig;
                        Ok((up - down) / (2.0 * step))
                    };
                    // Richardson step cancels the h² truncation term
                    let fd = (4.0 * central(h / 2.0)? - central(h)?) / 3.0;
                    // below ~1e-6 the difference quotient is mostly roundoff
                    let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    if err > 1e-4 {
                        return Err(format!("alpha={a} {name}[{idx}]: fd {fd:.6e} vs analytic {an:.6e}"));
                    }
                    worst = worst.max(err);
                    checked += 1;
                }
            }
        }
        Ok(format!("{checked} partials, max rel err {worst:.2e}"))
    })
}

/// Attention FLOPs scale exactly with kept tokens, and summed drop-token
/// FLOPs over a dense sequence equal `n·L·4dr + L·r·n(n-1)`.
pub fn flops_accounting() -> SuiteReport {
    timed("flops accounting", || {
        let cfg = ModelConfig::new(64, 128, 4, 4, 64, 1024);
        let err = |e: crate::Error| e.to_string();
        let dense = count_flops(&cfg, 1024, 1024, false).map_err(err)?;
        let sparse = count_flops(&cfg, 1024, 256, true).map_err(err)?;
        if sparse.attention * 4 != dense.attention {
            return Err(format!("attention {} vs dense {}", sparse.attention, dense.attention));
        }
        let (d, l, r) = (cfg.d_model as u64, cfg.n_layers as u64, cfg.r as u64);
        for n in [1u64, 7, 256, 1024] {
            let summed: u64 = (0..n)
                .map(|t| count_flops(&cfg, t, t, true).map(|f| f.drop_tokens))
                .sum::<crate::Result<u64>>()
                .map_err(err)?;
            let closed = n * l * 4 * d * r + l * r * n * (n - 1);
            if summed != closed {
                return Err(format!("n={n}: summed drop-token FLOPs {summed} vs {closed}"));
            }
        }
        Ok("attention at 75% sparsity is 25% of dense; drop-token sums exact".into())
    })
}

/// The suites `selftest` runs.
pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    vec![
        entmax_oracle(1000, seed),
        interaction_oracle(100, seed),
        baseline_masks(),
        cache_structural(10_000, 4, seed),
        cache_consistency(20, seed),
        gradient_check(&[1.0, 2.0, 4.0], 0.3, seed),
        flops_accounting(),
    ]
}
