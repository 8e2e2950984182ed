//! Floating point abstraction shared by every numeric module.
//!
//! All model math is written against [`Scalar`], which is implemented for
//! `f32` (training and inference) and `f64` (oracles and gradient checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short dtype tag used in checkpoint manifests.
    const DTYPE: &'static str;

    /// `c <- alpha * a * b + beta * c` on strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the shapes and strides must be in
    /// bounds of the respective pointer, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `exp` in a branch-free form that loops can vectorize. Defaults to
    /// [`Float::exp`].
    #[inline]
    fn fast_exp(self) -> Self {
        self.exp()
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    /// Range reduction by `ln 2` plus a degree-6 polynomial; within 2 ulp
    /// of `f32::exp`, zero below -87 and infinite above 88.3.
    #[inline]
    fn fast_exp(self) -> f32 {
        const MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23, rounds to integer
        let x = self.clamp(-87.0, 88.3);
        let t = x * std::f32::consts::LOG2_E + MAGIC;
        let n = t - MAGIC;
        let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
        let mut p = 1.987_569_1e-4f32;
        p = p * r + 1.398_199_9e-3;
        p = p * r + 8.333_452e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 1.666_666_5e-1;
        p = p * r + 0.5;
        let y = p * r * r + r + 1.0;
        // the integer n sits in the low mantissa bits of t
        let e = (t.to_bits() as i32).wrapping_sub(MAGIC.to_bits() as i32) + 127;
        let out = y * f32::from_bits((e as u32) << 23);
        let out = if self < -87.0 { 0.0 } else { out };
        let out = if self > 88.3 { f32::INFINITY } else { out };
        if self.is_nan() {
            self
        } else {
            out
        }
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_matches_std() {
        let mut worst = 0.0f32;
        for i in -8700..=8820 {
            let x = i as f32 * 0.01 + 0.003;
            let rel = (x.fast_exp() - x.exp()).abs() / x.exp();
            worst = worst.max(rel);
        }
        assert!(worst < 3e-7, "{worst}");
        assert_eq!((-90.0f32).fast_exp(), 0.0);
        assert_eq!(f32::NEG_INFINITY.fast_exp(), 0.0);
        assert_eq!(0.0f32.fast_exp(), 1.0);
        assert_eq!(100.0f32.fast_exp(), f32::INFINITY);
        assert!(f32::NAN.fast_exp().is_nan());
        assert_eq!(1.5f64.fast_exp(), 1.5f64.exp());
    }
}
