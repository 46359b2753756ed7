//! Float math that works in both std and `libm` builds.
//!
//! Under `std` the inherent `f64` methods shadow this trait, so the shim only
//! takes effect in freestanding builds.

#[allow(dead_code)]
pub(crate) trait F64Ext: Sized {
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
    fn floor(self) -> Self;
    fn ceil(self) -> Self;
    fn round(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn powf(self, p: Self) -> Self;
    fn atan2(self, other: Self) -> Self;
    fn max_f(self, other: Self) -> Self;
    fn min_f(self, other: Self) -> Self;
}

#[cfg(not(feature = "std"))]
impl F64Ext for f64 {
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
    fn exp(self) -> Self {
        libm::exp(self)
    }
    fn ln(self) -> Self {
        libm::log(self)
    }
    fn ln_1p(self) -> Self {
        libm::log1p(self)
    }
    fn sin(self) -> Self {
        libm::sin(self)
    }
    fn cos(self) -> Self {
        libm::cos(self)
    }
    fn abs(self) -> Self {
        libm::fabs(self)
    }
    fn floor(self) -> Self {
        libm::floor(self)
    }
    fn ceil(self) -> Self {
        libm::ceil(self)
    }
    fn round(self) -> Self {
        libm::round(self)
    }
    fn powi(self, n: i32) -> Self {
        libm::pow(self, n as f64)
    }
    fn powf(self, p: Self) -> Self {
        libm::pow(self, p)
    }
    fn atan2(self, other: Self) -> Self {
        libm::atan2(self, other)
    }
    fn max_f(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }
    fn min_f(self, other: Self) -> Self {
        if self < other {
            self
        } else {
            other
        }
    }
}

#[cfg(feature = "std")]
impl F64Ext for f64 {
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn floor(self) -> Self {
        f64::floor(self)
    }
    fn ceil(self) -> Self {
        f64::ceil(self)
    }
    fn round(self) -> Self {
        f64::round(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn powf(self, p: Self) -> Self {
        f64::powf(self, p)
    }
    fn atan2(self, other: Self) -> Self {
        f64::atan2(self, other)
    }
    fn max_f(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn min_f(self, other: Self) -> Self {
        f64::min(self, other)
    }
}

/// Numerically stable logistic function.
pub(crate) fn logistic(x: f64) -> f64 {
    #[allow(unused_imports)]
    use crate::math::F64Ext as _;
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
