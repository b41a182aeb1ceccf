//! Scalar element abstraction: training runs in f32, gradient verification in f64.

use std::fmt::{Debug, Display};

/// Floating-point element of all tensors. Implemented for f32 (training) and
/// f64 (gradient-verification mode). Every method must evaluate the same
/// mathematical formula in both widths so the two modes agree up to rounding.
pub trait Elem:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;

    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// C = alpha*A*B + beta*C over row-major buffers with explicit strides.
    ///
    /// # Safety
    /// Pointers must cover m*k, k*n, m*n elements under the given strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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
}

impl Elem for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f32(x: f32) -> Self {
        x
    }
    #[inline(always)]
    fn to_f32(self) -> f32 {
        self
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f32::exp(self)
    }
    #[inline(always)]
    fn max(self, other: Self) -> Self {
        f32::max(self, other)
    }
    #[inline(always)]
    fn min(self, other: Self) -> Self {
        f32::min(self, other)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }

    unsafe fn gemm(
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Elem for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    #[inline(always)]
    fn to_f32(self) -> f32 {
        self as f32
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline(always)]
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }
    #[inline(always)]
    fn min(self, other: Self) -> Self {
        f64::min(self, other)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    unsafe fn gemm(
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Rational tanh approximation, exact at 0 and clamped to [-1, 1] with zero
/// slope at |x| = 3. Autovectorizes, unlike libm tanh; used inside gelu on the
/// hottest activation path.
#[inline(always)]
pub fn tanh_approx<E: Elem>(x: E) -> E {
    let three = E::from_f64(3.0);
    let x = x.max(-three).min(three);
    let x2 = x * x;
    let c27 = E::from_f64(27.0);
    let c9 = E::from_f64(9.0);
    x * (c27 + x2) / (c27 + c9 * x2)
}

/// Derivative of `tanh_approx` (quotient rule on the clamped rational form).
#[inline(always)]
pub fn tanh_approx_deriv<E: Elem>(x: E) -> E {
    let three = E::from_f64(3.0);
    if x.to_f64().abs() >= 3.0 {
        return E::ZERO;
    }
    let x = x.max(-three).min(three);
    let x2 = x * x;
    let c27 = E::from_f64(27.0);
    let c9 = E::from_f64(9.0);
    let denom = c27 + c9 * x2;
    // d/dx [x(27+x^2)/(27+9x^2)] = ((27+3x^2)(27+9x^2) - 18x^2(27+x^2)) / (27+9x^2)^2
    ((c27 + E::from_f64(3.0) * x2) * denom - E::from_f64(18.0) * x2 * (c27 + x2)) / (denom * denom)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// GELU with the tanh-form inner polynomial.
#[inline(always)]
pub fn gelu<E: Elem>(x: E) -> E {
    let k = E::from_f64(GELU_K);
    let c = E::from_f64(GELU_C);
    let inner = k * (x + c * x * x * x);
    let half = E::from_f64(0.5);
    half * x * (E::ONE + tanh_approx(inner))
}

/// d gelu / dx, differentiating the same approximation used forward.
#[inline(always)]
pub fn gelu_deriv<E: Elem>(x: E) -> E {
    let k = E::from_f64(GELU_K);
    let c = E::from_f64(GELU_C);
    let inner = k * (x + c * x * x * x);
    let t = tanh_approx(inner);
    let dt = tanh_approx_deriv(inner);
    let dinner = k * (E::ONE + E::from_f64(3.0) * c * x * x);
    let half = E::from_f64(0.5);
    half * (E::ONE + t) + half * x * dt * dinner
}

/// Logistic sigmoid; only used on small modulation tensors.
#[inline(always)]
pub fn sigmoid<E: Elem>(x: E) -> E {
    E::ONE / (E::ONE + (-x).exp())
}

/// x * sigmoid(x).
#[inline(always)]
pub fn silu<E: Elem>(x: E) -> E {
    x * sigmoid(x)
}

/// d silu / dx.
#[inline(always)]
pub fn silu_deriv<E: Elem>(x: E) -> E {
    let s = sigmoid(x);
    s * (E::ONE + x * (E::ONE - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_approx_matches_libm_inside_clamp() {
        for i in -280..=280 {
            let x = i as f64 * 0.01;
            let err = (tanh_approx(x) - x.tanh()).abs();
            assert!(err < 4e-3, "x={x} err={err}");
        }
        assert_eq!(tanh_approx(5.0f64), 1.0);
        assert_eq!(tanh_approx(-5.0f64), -1.0);
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        let eps = 1e-6;
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let fd_gelu = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!(
                (gelu_deriv(x) - fd_gelu).abs() < 1e-6,
                "gelu' mismatch at {x}: {} vs {}",
                gelu_deriv(x),
                fd_gelu
            );
            let fd_silu = (silu(x + eps) - silu(x - eps)) / (2.0 * eps);
            assert!((silu_deriv(x) - fd_silu).abs() < 1e-6, "silu' mismatch at {x}");
        }
    }
}
