//! Double-double scalar used as the finite-difference oracle.
//!
//! Addition, multiplication and `sqrt` come from `twofloat`. Its division is
//! only good to f64 precision and its transcendentals to 1e-13..1e-21, so
//! division, `exp`, `ln`, `ln_1p`, `sin`, `cos` and `acos` are replaced here
//! (long division; argument reduction, series and Newton refinement),
//! accurate to ~1e-30.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};
use twofloat::TwoFloat;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dd(pub TwoFloat);

const LN_2: Dd = Dd(TwoFloat::from_f64(std::f64::consts::LN_2));
const LN_2_LO: f64 = 2.319_046_813_846_299_6e-17;
const PIO2_HI: f64 = std::f64::consts::FRAC_PI_2;
const PIO2_LO: f64 = 6.123_233_995_736_766e-17;

impl Dd {
    pub const fn of(v: f64) -> Self {
        Dd(TwoFloat::from_f64(v))
    }

    pub fn hi(self) -> f64 {
        self.0.hi()
    }

    pub fn lo(self) -> f64 {
        self.0.lo()
    }

    fn ln2() -> Dd {
        LN_2 + Dd::of(LN_2_LO)
    }

    fn ldexp(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        // Scaling by a power of two is exact on both limbs.
        Dd(TwoFloat::try_from((self.hi() * f, self.lo() * f)).unwrap_or_else(|_| TwoFloat::from_f64(self.hi() * f)))
    }

    /// `(sin r, cos r)` for `|r| <= pi/4` by Taylor series.
    fn sin_cos_small(r: Dd) -> (Dd, Dd) {
        let r2 = r * r;
        let (mut s_term, mut c_term) = (r, Dd::one());
        let (mut s, mut c) = (r, Dd::one());
        for n in 1..=14 {
            let k = (2 * n) as f64;
            s_term = -s_term * r2 / Dd::of(k * (k + 1.0));
            c_term = -c_term * r2 / Dd::of((k - 1.0) * k);
            s += s_term;
            c += c_term;
        }
        (s, c)
    }

    /// `(sin x, cos x)` after reduction by multiples of pi/2.
    fn sin_cos_dd(self) -> (Dd, Dd) {
        let x = self.hi();
        if !x.is_finite() {
            return (Dd::nan(), Dd::nan());
        }
        let pio2 = Dd::of(PIO2_HI) + Dd::of(PIO2_LO);
        let k = (x / PIO2_HI).round();
        let (s, c) = Dd::sin_cos_small(self - pio2 * Dd::of(k));
        match (k as i64).rem_euclid(4) {
            0 => (s, c),
            1 => (c, -s),
            2 => (-s, -c),
            _ => (-c, s),
        }
    }

    /// `exp(r) - 1` for `|r| <= ~1e-3` by Taylor series.
    fn expm1_small(r: Dd) -> Dd {
        let mut term = r;
        let mut sum = r;
        for n in 2..=12 {
            term = term * r / Dd::of(n as f64);
            sum += term;
        }
        sum
    }
}

impl From<f64> for Dd {
    fn from(v: f64) -> Self {
        Dd::of(v)
    }
}

impl fmt::Display for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:e}{:+e}", self.hi(), self.lo())
    }
}

macro_rules! binop {
    ($tr:ident, $f:ident, $atr:ident, $af:ident) => {
        impl $tr for Dd {
            type Output = Dd;
            #[inline]
            fn $f(self, rhs: Dd) -> Dd {
                Dd($tr::$f(self.0, rhs.0))
            }
        }
        impl $atr for Dd {
            #[inline]
            fn $af(&mut self, rhs: Dd) {
                self.0 = $tr::$f(self.0, rhs.0);
            }
        }
    };
}
binop!(Add, add, AddAssign, add_assign);
binop!(Sub, sub, SubAssign, sub_assign);
binop!(Mul, mul, MulAssign, mul_assign);

impl Div for Dd {
    type Output = Dd;
    fn div(self, rhs: Dd) -> Dd {
        let b = rhs.hi();
        if !self.is_finite() || !rhs.is_finite() || b == 0.0 {
            return Dd::of(self.hi() / b);
        }
        // Three quotient digits, each from the running remainder.
        let q1 = self.hi() / b;
        let r = self - rhs * Dd::of(q1);
        let q2 = r.hi() / b;
        let r = r - rhs * Dd::of(q2);
        let q3 = r.hi() / b;
        Dd(TwoFloat::new_add(q1, q2)) + Dd::of(q3)
    }
}

impl DivAssign for Dd {
    fn div_assign(&mut self, rhs: Dd) {
        *self = *self / rhs;
    }
}

impl Rem for Dd {
    type Output = Dd;
    fn rem(self, rhs: Dd) -> Dd {
        Dd(self.0 % rhs.0)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd(-self.0)
    }
}

impl Sum for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        iter.fold(Dd::zero(), |a, b| a + b)
    }
}

impl Zero for Dd {
    fn zero() -> Self {
        Dd(TwoFloat::zero())
    }
    fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl One for Dd {
    fn one() -> Self {
        Dd(TwoFloat::one())
    }
}

impl Num for Dd {
    type FromStrRadixErr = <TwoFloat as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        TwoFloat::from_str_radix(s, radix).map(Dd)
    }
}

impl ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        self.0.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.0.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi() + self.lo())
    }
}

impl NumCast for Dd {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        <TwoFloat as NumCast>::from(n).map(Dd)
    }
}

impl FromPrimitive for Dd {
    fn from_i64(n: i64) -> Option<Self> {
        TwoFloat::from_i64(n).map(Dd)
    }
    fn from_u64(n: u64) -> Option<Self> {
        TwoFloat::from_u64(n).map(Dd)
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Dd::of(n))
    }
}

impl ScalarOperand for Dd {}

macro_rules! delegate {
    ($($f:ident),*) => {
        $(
            #[inline]
            fn $f(self) -> Self {
                Dd(Float::$f(self.0))
            }
        )*
    };
}

impl Float for Dd {
    fn nan() -> Self {
        Dd(TwoFloat::nan())
    }
    fn infinity() -> Self {
        Dd::of(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Dd::of(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Dd(TwoFloat::neg_zero())
    }
    fn min_value() -> Self {
        Dd(TwoFloat::min_value())
    }
    fn min_positive_value() -> Self {
        Dd(TwoFloat::min_positive_value())
    }
    fn max_value() -> Self {
        Dd(TwoFloat::max_value())
    }
    fn epsilon() -> Self {
        Dd(TwoFloat::epsilon())
    }
    fn is_nan(self) -> bool {
        self.0.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi().is_finite() && self.lo().is_finite()
    }
    fn is_normal(self) -> bool {
        self.0.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.0.classify()
    }
    fn is_sign_positive(self) -> bool {
        self.0.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.0.is_sign_negative()
    }
    fn recip(self) -> Self {
        Dd::one() / self
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn powi(self, n: i32) -> Self {
        Dd(self.0.powi(n))
    }
    fn powf(self, n: Self) -> Self {
        (self.ln() * n).exp()
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.ln() / Dd::ln2()
    }
    fn log10(self) -> Self {
        self.ln() / Dd::of(10.0).ln()
    }
    fn exp2(self) -> Self {
        (self * Dd::ln2()).exp()
    }
    fn max(self, other: Self) -> Self {
        if self.is_nan() || other > self {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if self.is_nan() || other < self {
            other
        } else {
            self
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            Dd::zero()
        }
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn atan2(self, other: Self) -> Self {
        Dd(self.0.atan2(other.0))
    }
    fn sin_cos(self) -> (Self, Self) {
        self.sin_cos_dd()
    }
    fn sin(self) -> Self {
        self.sin_cos_dd().0
    }
    fn cos(self) -> Self {
        self.sin_cos_dd().1
    }
    fn tan(self) -> Self {
        let (s, c) = self.sin_cos_dd();
        s / c
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi().integer_decode()
    }

    delegate!(floor, ceil, round, trunc, fract, abs, signum, sqrt, cbrt, asin, atan);
    delegate!(sinh, cosh, tanh, asinh, acosh, atanh);

    fn exp(self) -> Self {
        let x = self.hi();
        if x.is_nan() {
            return self;
        }
        if x > 709.0 {
            return Dd::infinity();
        }
        if x < -745.0 {
            return Dd::zero();
        }
        // x = k ln2 + r, |r| <= ln2 / 2; exp(r) = (1 + e)^(2^10) with
        // e = expm1(r / 2^10), squared via e <- e (e + 2) to keep precision.
        let k = (x / std::f64::consts::LN_2).round();
        let r = self - Dd::ln2() * Dd::of(k);
        let mut e = Dd::expm1_small(r.ldexp(-10));
        for _ in 0..10 {
            e = e * (e + Dd::of(2.0));
        }
        (e + Dd::one()).ldexp(k as i32)
    }

    fn exp_m1(self) -> Self {
        if self.hi().abs() < 1e-3 {
            Dd::expm1_small(self)
        } else {
            self.exp() - Dd::one()
        }
    }

    fn ln(self) -> Self {
        let x = self.hi();
        if !(x > 0.0) || !x.is_finite() {
            return Dd::of(x.ln());
        }
        // One Newton step on exp(y) = x doubles the f64 accuracy.
        let y = Dd::of(x.ln());
        y + (self * (-y).exp() - Dd::one())
    }

    fn ln_1p(self) -> Self {
        let x = self.hi() + self.lo();
        if !(x > -1.0) || !x.is_finite() {
            return Dd::of(x.ln_1p());
        }
        if x.abs() < 1e-3 {
            // The Newton form below only has absolute precision; the series
            // keeps relative precision for small arguments.
            let mut power = self;
            let mut sum = self;
            for n in 2..=12 {
                power = -power * self;
                sum += power / Dd::of(n as f64);
            }
            return sum;
        }
        let y = Dd::of(x.ln_1p());
        y + ((Dd::one() + self) * (-y).exp() - Dd::one())
    }

    fn acos(self) -> Self {
        let c = self.hi();
        if !(c.abs() < 1.0) {
            return Dd::of(c.acos());
        }
        // Newton on cos(t) = c.
        let mut t = Dd::of(c.acos());
        for _ in 0..2 {
            let (s, c) = t.sin_cos_dd();
            t += (c - self) / s;
        }
        t
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi().partial_cmp(&other.hi())? {
            Ordering::Equal if self.hi().is_finite() => self.lo().partial_cmp(&other.lo()),
            ord => Some(ord),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dd(hi: f64, lo: f64) -> Dd {
        Dd(TwoFloat::try_from((hi, lo)).unwrap())
    }

    fn close(a: Dd, b: Dd, tol: f64) {
        let err = ((a - b) / b).abs().hi();
        assert!(err <= tol, "{a} vs {b}: {err:e}");
    }

    // Reference values computed to 300 bits and rounded to double-double.
    #[test]
    fn transcendentals_match_reference_values() {
        close(Dd::one().exp(), dd(std::f64::consts::E, 1.4456468917292502e-16), 1e-30);
        close(Dd::of(-0.7).exp(), dd(0.4965853037914095, 9.827550225511106e-18), 1e-30);
        close(
            Dd::of(-20.5).exp(),
            dd(1.2501528663867426e-09, 6.448235878237776e-26),
            1e-30,
        );
        close(
            Dd::of(2.0).ln(),
            dd(std::f64::consts::LN_2, 2.3190468138462996e-17),
            1e-30,
        );
        close(Dd::of(40.0).ln(), dd(3.6888794541139363, 5.134991886373236e-17), 1e-30);
        close(Dd::of(1e-9).ln_1p(), dd(9.999999995e-10, 7.493897403823754e-26), 1e-30);
        close(Dd::of(0.3).acos(), dd(1.2661036727794992, -7.78313736852488e-17), 1e-30);
        close(
            Dd::of(-0.6).acos(),
            dd(2.214297435588181, 1.6033385185569867e-16),
            1e-30,
        );
    }

    #[test]
    fn exp_and_ln_are_inverse() {
        for &x in &[-30.0, -2.5, -1e-4, 0.0, 3e-7, 0.9, 12.0] {
            let v = Dd::of(x) + Dd::of(x * 1e-17);
            let back = v.exp().ln();
            assert!((back - v).abs().hi() <= 1e-30 * v.abs().hi().max(1.0), "{x}");
        }
    }

    #[test]
    fn small_values_keep_relative_precision() {
        let tiny = Dd::of(1e-20);
        close(tiny.ln_1p(), tiny - tiny * tiny / Dd::of(2.0), 1e-30);
        close(tiny.exp_m1(), tiny + tiny * tiny / Dd::of(2.0), 1e-30);
    }

    #[test]
    fn extremes() {
        assert!(Dd::of(800.0).exp().is_infinite());
        assert_eq!(Dd::of(-800.0).exp(), Dd::zero());
        assert!(Dd::of(-1.0).ln().is_nan() || Dd::of(-1.0).ln().is_infinite());
        assert_eq!(Dd::one().acos().hi(), 0.0);
        let ni = Dd::neg_infinity();
        assert!(ni < Dd::of(-1e300) && !ni.is_nan());
        assert_eq!(Float::max(ni, Dd::of(0.3)), Dd::of(0.3));
        assert!(Dd::of(1.0) + Dd::of(1e-20) > Dd::one());
    }
}
