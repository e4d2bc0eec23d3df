//! `f64` wrapper that counts the arithmetic performed on it, one per add,
//! subtract, multiply, divide, negate or elementary function call.
//! Comparisons, `abs` and conversions are free.
#![allow(dead_code)]

use std::cell::Cell;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, Div, Mul, Neg, Rem, Sub};

use logvm_core::Scalar;
use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

thread_local! {
    static OPS: Cell<u64> = const { Cell::new(0) };
}

fn tick(n: u64) {
    OPS.with(|c| c.set(c.get() + n));
}

/// Runs `f` and returns its result with the operations it performed on this
/// thread.
pub fn count<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = OPS.with(Cell::get);
    let r = f();
    (r, OPS.with(Cell::get) - before)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd)]
pub struct Counted(pub f64);

impl fmt::Display for Counted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident, $op:tt) => {
        impl $tr for Counted {
            type Output = Counted;
            #[inline]
            fn $m(self, o: Counted) -> Counted {
                tick(1);
                Counted(self.0 $op o.0)
            }
        }
    };
}
binop!(Add, add, +);
binop!(Sub, sub, -);
binop!(Mul, mul, *);
binop!(Div, div, /);
binop!(Rem, rem, %);

impl Neg for Counted {
    type Output = Counted;
    fn neg(self) -> Counted {
        tick(1);
        Counted(-self.0)
    }
}

impl Sum for Counted {
    fn sum<I: Iterator<Item = Counted>>(iter: I) -> Counted {
        iter.fold(Counted(0.0), |a, b| a + b)
    }
}

impl Zero for Counted {
    fn zero() -> Self {
        Counted(0.0)
    }
    fn is_zero(&self) -> bool {
        self.0 == 0.0
    }
}

impl One for Counted {
    fn one() -> Self {
        Counted(1.0)
    }
}

impl Num for Counted {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Counted)
    }
}

impl ToPrimitive for Counted {
    fn to_i64(&self) -> Option<i64> {
        self.0.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.0.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.0)
    }
}

impl NumCast for Counted {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Counted)
    }
}

impl FromPrimitive for Counted {
    fn from_i64(n: i64) -> Option<Self> {
        Some(Counted(n as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        Some(Counted(n as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Counted(n))
    }
}

macro_rules! free {
    ($($m:ident),*) => { $(fn $m(self) -> Self { Counted(self.0.$m()) })* };
}
macro_rules! counted {
    ($($m:ident),*) => { $(fn $m(self) -> Self { tick(1); Counted(self.0.$m()) })* };
}
macro_rules! constant {
    ($($m:ident),*) => { $(fn $m() -> Self { Counted(f64::$m()) })* };
}
macro_rules! predicate {
    ($($m:ident),*) => { $(fn $m(self) -> bool { self.0.$m() })* };
}

impl Float for Counted {
    constant!(nan, infinity, neg_infinity, neg_zero, min_value, min_positive_value, max_value, epsilon);
    predicate!(is_nan, is_infinite, is_finite, is_normal, is_sign_positive, is_sign_negative);
    free!(floor, ceil, round, trunc, abs, signum);
    counted!(fract, recip, sqrt, exp, exp2, ln, log2, log10, cbrt, sin, cos, tan, asin, acos, atan, exp_m1, ln_1p,
             sinh, cosh, tanh, asinh, acosh, atanh, to_degrees, to_radians);

    fn classify(self) -> FpCategory {
        self.0.classify()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        tick(2);
        Counted(self.0.mul_add(a.0, b.0))
    }
    fn powi(self, n: i32) -> Self {
        tick(1);
        Counted(self.0.powi(n))
    }
    fn powf(self, n: Self) -> Self {
        tick(1);
        Counted(self.0.powf(n.0))
    }
    fn log(self, base: Self) -> Self {
        tick(1);
        Counted(self.0.log(base.0))
    }
    fn max(self, o: Self) -> Self {
        Counted(self.0.max(o.0))
    }
    fn min(self, o: Self) -> Self {
        Counted(self.0.min(o.0))
    }
    #[allow(deprecated)]
    fn abs_sub(self, o: Self) -> Self {
        tick(1);
        Counted((self.0 - o.0).max(0.0))
    }
    fn hypot(self, o: Self) -> Self {
        tick(1);
        Counted(self.0.hypot(o.0))
    }
    fn atan2(self, o: Self) -> Self {
        tick(1);
        Counted(self.0.atan2(o.0))
    }
    fn sin_cos(self) -> (Self, Self) {
        tick(2);
        let (s, c) = self.0.sin_cos();
        (Counted(s), Counted(c))
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.0.integer_decode()
    }
}

impl Scalar for Counted {}
