//! Row-wise building blocks: layer norm, GELU, masked softmax.

use crate::pruning::LOG_FLOOR;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Saved statistics for the layer-norm backward pass.
#[derive(Clone, Debug)]
pub(crate) struct LnCache<T> {
    pub xhat: Matrix<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm<T: Scalar>(x: &Matrix<T>, gain: &[T], bias: &[T]) -> (Matrix<T>, LnCache<T>) {
    let (n, d) = (x.rows(), x.cols());
    let mut y = Matrix::zeros(n, d);
    let mut xhat = Matrix::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    let inv_d = T::one() / T::lit(d as f64);
    let eps = T::lit(LN_EPS);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(i);
        for j in 0..d {
            xh[j] = (row[j] - mean) * rs;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = xh[j] * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns `dx`; accumulates gain/bias gradients.
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &Matrix<T>,
    cache: &LnCache<T>,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
) -> Matrix<T> {
    let (n, d) = (dy.rows(), dy.cols());
    let inv_d = T::one() / T::lit(d as f64);
    let mut dx = Matrix::zeros(n, d);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let g = dy.row(i);
        let xh = cache.xhat.row(i);
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            dgain[j] += g[j] * xh[j];
            dbias[j] += g[j];
            dxhat[j] = g[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `tanh` through one `exp`; libm's `tanh` is several times slower.
#[inline]
fn tanh_exp<T: Scalar>(u: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * u).fast_exp() + T::one())
}

/// Tanh-approximated GELU.
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    half * x * (T::one() + tanh_exp(c * (x + k * x * x * x)))
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    let t = tanh_exp(c * (x + k * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

/// In-place causal softmax of `scores` with an additive bias.
///
/// Entries above the diagonal or with bias at [`LOG_FLOOR`] get exactly
/// zero weight and their scores are never read.
pub(crate) fn masked_softmax_rows<T: Scalar>(scores: &mut Matrix<T>, bias: &Matrix<T>) {
    let n = scores.rows();
    let floor = T::lit(LOG_FLOOR);
    for k in 0..n {
        let b = &bias.row(k)[..=k];
        let row = scores.row_mut(k);
        let (live, rest) = row.split_at_mut(k + 1);
        let mut max = T::neg_infinity();
        for (v, &bj) in live.iter_mut().zip(b) {
            *v = if bj > floor { *v + bj } else { T::neg_infinity() };
            max = max.max(*v);
        }
        for v in live.iter_mut() {
            *v = (*v - max).fast_exp();
        }
        let sum = live.iter().copied().sum::<T>();
        let inv = T::one() / sum;
        for v in live.iter_mut() {
            *v *= inv;
        }
        rest.fill(T::zero());
    }
}

/// Cross entropy of one logits row against `target`, plus its softmax.
pub(crate) fn softmax_xent<T: Scalar>(logits: &[T], target: usize, probs: &mut [T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (p, &l) in probs.iter_mut().zip(logits) {
        *p = (l - max).fast_exp();
        sum += *p;
    }
    let inv = T::one() / sum;
    probs.iter_mut().for_each(|p| *p *= inv);
    sum.ln() + max - logits[target]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for i in -30..=30 {
            let x = i as f64 * 0.2;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_rows_are_normalized() {
        let x = Matrix::from_fn(3, 6, |i, j| (i * 6 + j) as f64 * 0.3 - 2.0 + (j * j) as f64);
        let (y, _) = layer_norm(&x, &[1.0; 6], &[0.0; 6]);
        for i in 0..3 {
            let r = y.row(i);
            let mean: f64 = r.iter().sum::<f64>() / 6.0;
            let var: f64 = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut s = Matrix::from_fn(3, 3, |i, j| (i + j) as f64);
        let mut bias = Matrix::<f64>::zeros(3, 3);
        bias[(2, 0)] = LOG_FLOOR;
        masked_softmax_rows(&mut s, &bias);
        assert_eq!(s[(0, 0)], 1.0);
        assert_eq!(s[(2, 0)], 0.0);
        assert_eq!(s[(0, 2)], 0.0);
        for i in 0..3 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
