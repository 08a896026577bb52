//! Scalar types for the reference loops.
//!
//! The loops are generic over [`Real`] so the same transcription runs in
//! plain `f64` (loss-value comparisons) and in double-double arithmetic
//! ([`Dd`], ~106-bit significand), which the finite-difference driver uses
//! so that round-off in `f(x ± h)` stays far below the differences being
//! measured.

use std::ops::{Add, Div, Mul, Neg, Sub};

use twofloat::consts::LN_2;
use twofloat::TwoFloat;

pub trait Real:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powf(self, power: f64) -> Self;
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn powf(self, power: f64) -> Self {
        f64::powf(self, power)
    }
}

/// Double-double scalar. Addition and multiplication come from `twofloat`;
/// division, `exp`, `ln` and `sqrt` are evaluated here to full
/// double-double accuracy.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Dd(TwoFloat);

impl Dd {
    pub fn hi(self) -> f64 {
        self.0.hi()
    }
    pub fn lo(self) -> f64 {
        self.0.lo()
    }
}

macro_rules! forward_op {
    ($tr:ident, $m:ident) => {
        impl $tr for Dd {
            type Output = Dd;
            fn $m(self, rhs: Dd) -> Dd {
                Dd($tr::$m(self.0, rhs.0))
            }
        }
    };
}
forward_op!(Add, add);
forward_op!(Sub, sub);
forward_op!(Mul, mul);

impl Div for Dd {
    type Output = Dd;
    fn div(self, rhs: Dd) -> Dd {
        Dd(div_dd(self.0, rhs.0))
    }
}

/// Long division with three f64 quotient digits (twofloat's own quotient
/// is only f64-accurate for some operands).
fn div_dd(a: TwoFloat, b: TwoFloat) -> TwoFloat {
    let q1 = a.hi() / b.hi();
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    TwoFloat::new_add(q1, q2) + q3
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd(-self.0)
    }
}

const EXP_HALVINGS: i32 = 10;
const EXP_TERMS: u32 = 12;

fn exp_dd(x: TwoFloat) -> TwoFloat {
    let hi = x.hi();
    assert!(hi < 700.0, "exp argument {hi} out of range");
    if hi < -700.0 {
        return TwoFloat::from(0.0);
    }
    // x = k·ln2 + r, |r| ≤ ln2/2; then exp(r) = exp(r / 2^m)^(2^m)
    let k = (hi / LN_2.hi()).round();
    let r = (x - LN_2 * k) * 2f64.powi(-EXP_HALVINGS);
    let mut p = TwoFloat::from(1.0);
    for i in (1..=EXP_TERMS).rev() {
        p = div_dd(r * p, TwoFloat::from(f64::from(i))) + 1.0;
    }
    for _ in 0..EXP_HALVINGS {
        p = p * p;
    }
    p * 2f64.powi(k as i32)
}

fn ln_dd(x: TwoFloat) -> TwoFloat {
    assert!(x.hi() > 0.0, "ln of non-positive value {}", x.hi());
    // Newton on e^y = x: y ← y − 1 + x·e^(−y); the f64 seed doubles its
    // correct digits per step.
    let mut y = TwoFloat::from(x.hi().ln());
    for _ in 0..2 {
        y = y + x * exp_dd(-y) - 1.0;
    }
    y
}

fn sqrt_dd(x: TwoFloat) -> TwoFloat {
    if x.hi() <= 0.0 {
        return TwoFloat::from(0.0);
    }
    let mut s = TwoFloat::from(x.hi().sqrt());
    for _ in 0..2 {
        s = (s + div_dd(x, s)) * 0.5;
    }
    s
}

impl Real for Dd {
    fn of(v: f64) -> Self {
        Dd(TwoFloat::from(v))
    }
    fn to_f64(self) -> f64 {
        self.0.hi() + self.0.lo()
    }
    fn exp(self) -> Self {
        Dd(exp_dd(self.0))
    }
    fn ln(self) -> Self {
        Dd(ln_dd(self.0))
    }
    fn sqrt(self) -> Self {
        Dd(sqrt_dd(self.0))
    }
    fn powf(self, power: f64) -> Self {
        if power == 0.0 {
            return Dd::of(1.0);
        }
        if self.0.hi() == 0.0 {
            return Dd::of(0.0);
        }
        (self.ln() * Dd::of(power)).exp()
    }
}
