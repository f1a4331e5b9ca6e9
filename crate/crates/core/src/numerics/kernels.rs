//! Slice-level kernels shared by the eager tensor API and the autodiff graph.

use super::Scalar;

/// In-place max-shifted softmax over consecutive rows of width `n`.
pub fn softmax_rows_inplace<T: Scalar>(data: &mut [T], n: usize) {
    for row in data.chunks_mut(n) {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum = sum + *x;
        }
        let inv = sum.recip();
        for x in row.iter_mut() {
            *x = *x * inv;
        }
    }
}

/// Backward of a row softmax given its output `p` and upstream `dp`:
/// `dx = p ⊙ (dp − ⟨dp, p⟩)`, accumulated into `dx`.
pub fn softmax_rows_backward<T: Scalar>(p: &[T], dp: &[T], dx: &mut [T], n: usize) {
    for ((pr, dpr), dxr) in p.chunks(n).zip(dp.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot = pr.iter().zip(dpr).fold(T::zero(), |s, (&a, &b)| s + a * b);
        for ((dx, &p), &dp) in dxr.iter_mut().zip(pr).zip(dpr) {
            *dx = *dx + p * (dp - dot);
        }
    }
}

/// Row-wise normalization without affine parameters. Writes the
/// normalized rows to `out` and the per-row reciprocal std to `rstd`.
pub fn layer_norm_rows<T: Scalar>(x: &[T], n: usize, eps: T, out: &mut [T], rstd: &mut [T]) {
    let inv_n = T::lit(1.0 / n as f64);
    for ((xr, or), rs) in x.chunks(n).zip(out.chunks_mut(n)).zip(rstd.iter_mut()) {
        let mean = xr.iter().copied().sum::<T>() * inv_n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let r = (var + eps).sqrt().recip();
        *rs = r;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - mean) * r;
        }
    }
}

/// Backward of `layer_norm_rows` given the normalized output `y`.
pub fn layer_norm_rows_backward<T: Scalar>(y: &[T], rstd: &[T], dy: &[T], dx: &mut [T], n: usize) {
    let inv_n = T::lit(1.0 / n as f64);
    for (((yr, dyr), dxr), &r) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)).zip(rstd) {
        let mean_dy = dyr.iter().copied().sum::<T>() * inv_n;
        let mean_dy_y = yr.iter().zip(dyr).fold(T::zero(), |s, (&a, &b)| s + a * b) * inv_n;
        for ((dx, &y), &dy) in dxr.iter_mut().zip(yr).zip(dyr) {
            *dx = *dx + r * (dy - mean_dy - y * mean_dy_y);
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let inner = c * (x + T::lit(GELU_CUBIC) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * sech2 * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = (T::one() + (-x).exp()).recip();
    s * (T::one() + x * (T::one() - s))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn all_finite<T: Scalar>(data: &[T]) -> bool {
    data.iter().all(|x| x.is_finite())
}
