//! Two-outcome entmax ("α-sigmoid") gate numerics.
//!
//! `alpha_sigmoid(x, α)` is the maximizer over `p ∈ [0, 1]` of
//! `p·x + H_α(p)` where `H_α` is the Tsallis entropy of the distribution
//! `(p, 1 - p)`:
//!
//! ```text
//! H_α(p) = (p - p^α + (1-p) - (1-p)^α) / (α(α-1))   α ≠ 1
//! H_1(p) = -p ln p - (1-p) ln(1-p)
//! ```
//!
//! For `α = 1` this is the logistic sigmoid. For `α > 1` the maximizer
//! saturates to exactly 0 / 1 once `|x| ≥ 1/(α-1)`; in between it is the
//! root of `x(α-1) = p^(α-1) - (1-p)^(α-1)`, which is strictly increasing
//! in `p`. At inference the gate is replaced by a step function, the
//! `α → ∞` limit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sparsity-shape parameter of the α-sigmoid, always `≥ 1`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Alpha(f64);

impl Alpha {
    pub const ONE: Alpha = Alpha(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() || value < 1.0 {
            return Err(Error::AlphaDomain(value));
        }
        Ok(Self(value))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// `|x|` beyond which the gate is exactly 0 or 1; infinite for `α = 1`.
    pub fn saturation(self) -> f64 {
        if self.0 == 1.0 {
            f64::INFINITY
        } else {
            1.0 / (self.0 - 1.0)
        }
    }
}

impl TryFrom<f64> for Alpha {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Alpha::new(v)
    }
}

impl From<Alpha> for f64 {
    fn from(a: Alpha) -> f64 {
        a.0
    }
}

/// Logistic sigmoid evaluated without overflow for either sign.
#[inline]
pub fn logistic<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// The α-sigmoid gate.
pub fn alpha_sigmoid<T: Scalar>(x: T, alpha: Alpha) -> T {
    if x.is_nan() {
        return x;
    }
    if alpha.0 == 1.0 {
        return logistic(x);
    }
    let sat = T::lit(alpha.saturation());
    if x >= sat {
        return T::one();
    }
    if x <= -sat {
        return T::zero();
    }
    if alpha.0 == 2.0 {
        return (x + T::one()) * T::lit(0.5);
    }
    solve_interior(x, alpha)
}

/// Root of `x(α-1) = p^(α-1) - (1-p)^(α-1)` for `|x| < 1/(α-1)`, solved
/// in f64 for every scalar type.
fn solve_interior<T: Scalar>(x: T, alpha: Alpha) -> T {
    let xf = x.as_f64();
    let p = solve_positive(xf.abs(), alpha.0);
    T::lit(if xf < 0.0 { 1.0 - p } else { p })
}

const SOLVE_TOL: f64 = 1e-12;
const SEED_INTERVALS: usize = 1024;
const SEED_SPAN: f64 = 64.0;

/// Solutions on a uniform grid of `x ∈ [0, span]` for one α, used to
/// bracket and seed Newton.
struct Seeds {
    alpha: f64,
    step: f64,
    p: Vec<f64>,
    /// `dp/dx` at each grid point.
    slope: Vec<f64>,
}

impl Seeds {
    fn build(alpha: f64) -> Self {
        let span = (1.0 / (alpha - 1.0)).min(SEED_SPAN);
        let step = span / SEED_INTERVALS as f64;
        let mut p = Vec::with_capacity(SEED_INTERVALS + 1);
        let mut prev = 0.5;
        for i in 0..=SEED_INTERVALS {
            let target = i as f64 * step * (alpha - 1.0);
            prev = newton(target, alpha, prev, 1.0, prev);
            p.push(prev);
        }
        let slope = p.iter().map(|&v| grad_from_output(v, Alpha(alpha))).collect();
        Self { alpha, step, p, slope }
    }
}

thread_local! {
    static SEEDS: std::cell::RefCell<Option<Seeds>> = const { std::cell::RefCell::new(None) };
}

fn solve_positive(x: f64, alpha: f64) -> f64 {
    let target = x * (alpha - 1.0);
    let seeded = SEEDS.with(|cell| {
        let mut cell = cell.borrow_mut();
        if cell.as_ref().is_none_or(|s| s.alpha != alpha) {
            *cell = Some(Seeds::build(alpha));
        }
        let seeds = cell.as_ref().expect("just built");
        let pos = x / seeds.step;
        if pos >= SEED_INTERVALS as f64 {
            return None;
        }
        let i = pos as usize;
        let (lo, hi) = (seeds.p[i], seeds.p[i + 1]);
        // cubic Hermite through the neighbouring grid points
        let u = pos - i as f64;
        let (u2, u3) = (u * u, u * u * u);
        let h = seeds.step;
        let guess = (2.0 * u3 - 3.0 * u2 + 1.0) * lo
            + (u3 - 2.0 * u2 + u) * h * seeds.slope[i]
            + (3.0 * u2 - 2.0 * u3) * hi
            + (u3 - u2) * h * seeds.slope[i + 1];
        Some((lo, hi, guess))
    });
    match seeded {
        Some((lo, hi, guess)) => newton(target, alpha, (lo - SOLVE_TOL).max(0.5), (hi + SOLVE_TOL).min(1.0), guess),
        None => newton(target, alpha, 0.5, 1.0, (0.5 + 0.5 * target).min(1.0)),
    }
}

/// Newton iterations on `p^a - (1-p)^a = target` (`a = α-1`) kept inside the
/// bracket `[lo, hi]`. The residual is strictly increasing, so the bracket
/// always holds the root and a rejected Newton step falls back to bisection.
fn newton(target: f64, alpha: f64, mut lo: f64, mut hi: f64, guess: f64) -> f64 {
    let a = alpha - 1.0;
    let am1 = alpha - 2.0;
    let mut p = guess.clamp(lo, hi);
    for _ in 0..200 {
        let q = 1.0 - p;
        let p_am1 = p.powf(am1);
        let q_am1 = q.powf(am1);
        let residual = p * p_am1 - q * q_am1 - target;
        if residual == 0.0 {
            break;
        }
        if residual > 0.0 {
            hi = p;
        } else {
            lo = p;
        }
        let slope = a * (p_am1 + q_am1);
        let newton_step = p - residual / slope;
        let accepted = newton_step > lo && newton_step < hi && newton_step.is_finite();
        let next = if accepted { newton_step } else { 0.5 * (lo + hi) };
        let step = (next - p).abs();
        // Newton error after this step is about c·step², c = |F''| / 2F'
        let c = if accepted {
            (am1 * (p_am1 / p - q_am1 / q)).abs() / (2.0 * (p_am1 + q_am1))
        } else {
            f64::INFINITY
        };
        p = next;
        if step <= SOLVE_TOL || hi - lo <= SOLVE_TOL || c * step * step <= 0.1 * SOLVE_TOL {
            break;
        }
    }
    p
}

/// Derivative of [`alpha_sigmoid`] with respect to `x`.
///
/// Zero in the saturated regions. In the interior it follows from
/// implicit differentiation of the stationarity condition:
/// `1 / (p^(α-2) + (1-p)^(α-2))`.
pub fn alpha_sigmoid_grad<T: Scalar>(x: T, alpha: Alpha) -> T {
    let p = alpha_sigmoid(x, alpha);
    grad_from_output(p, alpha)
}

/// Same as [`alpha_sigmoid_grad`] given an already computed gate value.
#[inline]
pub fn grad_from_output<T: Scalar>(p: T, alpha: Alpha) -> T {
    if alpha.0 == 1.0 {
        return p * (T::one() - p);
    }
    if p <= T::zero() || p >= T::one() {
        return T::zero();
    }
    if alpha.0 == 2.0 {
        return T::lit(0.5);
    }
    let e = T::lit(alpha.0 - 2.0);
    T::one() / (p.powf(e) + (T::one() - p).powf(e))
}

/// Inference-time gate: keep (1) for `x ≥ 0`, drop (0) otherwise.
#[inline]
pub fn step_gate<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

/// Cosine ramp of α over training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub total_steps: u64,
}

impl AlphaSchedule {
    pub fn new(alpha_start: f64, alpha_end: f64, total_steps: u64) -> Result<Self> {
        let sched = Self {
            alpha_start,
            alpha_end,
            total_steps,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_start >= 1.0) {
            return Err(Error::AlphaDomain(self.alpha_start));
        }
        if !(self.alpha_end >= self.alpha_start) {
            return Err(Error::Config(format!(
                "alpha_end {} below alpha_start {}",
                self.alpha_end, self.alpha_start
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("alpha schedule needs total_steps >= 1".into()));
        }
        Ok(())
    }

    pub fn at(&self, step: u64) -> Alpha {
        schedule_alpha(step, self)
    }
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        Self {
            alpha_start: 1.0,
            alpha_end: 8.0,
            total_steps: 25_000,
        }
    }
}

/// α at `step`; steps past the end clamp to `alpha_end`.
pub fn schedule_alpha(step: u64, sched: &AlphaSchedule) -> Alpha {
    if step >= sched.total_steps {
        return Alpha(sched.alpha_end);
    }
    let frac = step as f64 / sched.total_steps as f64;
    let ramp = (1.0 - (std::f64::consts::PI * frac).cos()) / 2.0;
    let v = sched.alpha_start + (sched.alpha_end - sched.alpha_start) * ramp;
    // cos rounding can dip a hair below the start
    Alpha(v.max(sched.alpha_start).max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn a(v: f64) -> Alpha {
        Alpha::new(v).unwrap()
    }

    #[test]
    fn alpha_below_one_is_rejected() {
        assert!(matches!(Alpha::new(0.5), Err(Error::AlphaDomain(_))));
        assert!(Alpha::new(f64::NAN).is_err());
        assert!(Alpha::new(1.0).is_ok());
    }

    #[test]
    fn center_is_one_half() {
        for al in [1.0, 1.3, 2.0, 3.7, 8.0, 64.0] {
            assert_eq!(alpha_sigmoid(0.0f64, a(al)), 0.5);
        }
    }

    #[test]
    fn saturates_at_inverse_alpha_minus_one() {
        assert_eq!(alpha_sigmoid(1.0f64, a(2.0)), 1.0);
        assert_eq!(alpha_sigmoid(-1.0f64, a(2.0)), 0.0);
        assert_eq!(alpha_sigmoid(0.25f64, a(5.0)), 1.0);
    }

    #[test]
    fn alpha_two_is_linear_ramp() {
        assert_abs_diff_eq!(alpha_sigmoid(0.4f64, a(2.0)), 0.7, epsilon = 1e-15);
        assert_eq!(alpha_sigmoid_grad(0.4f64, a(2.0)), 0.5);
    }

    #[test]
    fn alpha_one_is_logistic() {
        assert_abs_diff_eq!(
            alpha_sigmoid(2.0f64, a(1.0)),
            1.0 / (1.0 + (-2.0f64).exp()),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(alpha_sigmoid(2.0f64, a(1.0)), 0.880797, epsilon = 1e-6);
        assert_eq!(alpha_sigmoid_grad(0.0f64, a(1.0)), 0.25);
    }

    #[test]
    fn saturated_gradient_is_zero() {
        assert_eq!(alpha_sigmoid_grad(5.0f64, a(2.0)), 0.0);
        assert_eq!(alpha_sigmoid_grad(-5.0f64, a(4.0)), 0.0);
    }

    #[test]
    fn step_gate_keeps_ties() {
        assert_eq!(step_gate(0.3f64), 1.0);
        assert_eq!(step_gate(-0.3f64), 0.0);
        assert_eq!(step_gate(0.0f64), 1.0);
        assert_eq!(step_gate(-0.0f64), 1.0);
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let s = AlphaSchedule::new(1.0, 8.0, 25_000).unwrap();
        assert_eq!(schedule_alpha(0, &s).value(), 1.0);
        assert_eq!(schedule_alpha(25_000, &s).value(), 8.0);
        assert_abs_diff_eq!(schedule_alpha(12_500, &s).value(), 4.5, epsilon = 1e-12);
        assert_eq!(schedule_alpha(99_999, &s).value(), 8.0);
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(AlphaSchedule::new(0.5, 8.0, 10).is_err());
        assert!(AlphaSchedule::new(4.0, 2.0, 10).is_err());
        assert!(AlphaSchedule::new(1.0, 2.0, 0).is_err());
    }

    #[test]
    fn f32_solver_is_close_to_f64() {
        for &al in &[1.5, 3.0, 6.0] {
            for i in -20..=20 {
                let x = i as f64 * 0.03;
                let hi = alpha_sigmoid(x, a(al));
                let lo = alpha_sigmoid(x as f32, a(al)) as f64;
                assert!((hi - lo).abs() < 1e-5, "alpha={al} x={x}: {hi} vs {lo}");
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_in_x(x1 in -4.0f64..4.0, x2 in -4.0f64..4.0, al in 1.0f64..10.0) {
            let (lo, hi) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
            prop_assert!(alpha_sigmoid(lo, a(al)) <= alpha_sigmoid(hi, a(al)) + 1e-12);
        }

        #[test]
        fn point_symmetric(x in -4.0f64..4.0, al in 1.0f64..10.0) {
            let s = alpha_sigmoid(x, a(al)) + alpha_sigmoid(-x, a(al));
            prop_assert!((s - 1.0).abs() < 1e-11);
        }

        #[test]
        fn schedule_is_monotone(s1 in 0u64..1000, s2 in 0u64..1000, end in 1.0f64..16.0) {
            let sched = AlphaSchedule::new(1.0, end, 1000).unwrap();
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            prop_assert!(sched.at(lo).value() <= sched.at(hi).value());
        }

        #[test]
        fn large_alpha_approaches_step(x in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0]) {
            prop_assert!((alpha_sigmoid(x, a(64.0)) - step_gate(x)).abs() < 1e-3);
        }
    }
}
