use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic abstraction shared by plain `f64` evaluation and tape-recorded
/// evaluation. Every basis/encoder formula is written once against this
/// trait; the `f64` instantiation is the fast path, the [`super::tape::Var`]
/// instantiation records the same computation for reverse-mode parameter
/// gradients.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// Current numeric value.
    fn val(self) -> f64;

    /// A constant in the same evaluation context as `self`.
    fn lit(self, c: f64) -> Self;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;

    /// Branch on the current value; derivative follows the taken branch
    /// (second derivative at the kink is treated as zero).
    fn relu(self) -> Self {
        if self.val() > 0.0 {
            self
        } else {
            self.lit(0.0)
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn val(self) -> f64 {
        self
    }

    #[inline]
    fn lit(self, c: f64) -> Self {
        c
    }

    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }

    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }

    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }

    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }

    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }

    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}
