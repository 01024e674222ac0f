//! Double-double arithmetic (about 106 significand bits) for evaluating
//! finite differences far below `f64` rounding noise.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use dun::model::{DepthDistribution, DunModel};
use dun::numerics::{Matrix, ParamBundle};
use dun::objectives::{Objective, Targets};
use dun::Scalar;
use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

#[derive(Debug, Clone, Copy, Default, PartialEq, PartialOrd)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

const LN2: Dd = Dd {
    hi: 6.931_471_805_599_453e-1,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    pub const fn new(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }

    fn scale2(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        Dd { hi: self.hi * f, lo: self.lo * f }
    }

    fn from_hi(f: impl Fn(f64) -> f64, x: Dd) -> Dd {
        Dd::new(f(x.hi))
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::new(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::new(q2);
        let q3 = r.hi / o.hi;
        quick_two_sum(q1, q2) + Dd::new(q3)
    }
}

impl Rem for Dd {
    type Output = Dd;
    fn rem(self, o: Dd) -> Dd {
        self - (self / o).trunc() * o
    }
}

macro_rules! assign_ops {
    ($($tr:ident $m:ident $op:tt),*) => {$(
        impl $tr for Dd {
            fn $m(&mut self, o: Dd) {
                *self = *self $op o;
            }
        }
    )*};
}
assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /, RemAssign rem_assign %);

impl Sum for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        iter.fold(Dd::zero(), |a, b| a + b)
    }
}

impl fmt::Display for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.value(), f)
    }
}

impl Zero for Dd {
    fn zero() -> Self {
        Dd::new(0.0)
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for Dd {
    fn one() -> Self {
        Dd::new(1.0)
    }
}

impl Num for Dd {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Dd::new)
    }
}

impl ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        self.value().to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.value().to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.value())
    }
}

impl FromPrimitive for Dd {
    fn from_i64(n: i64) -> Option<Self> {
        Some(Dd::new(n as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        Some(Dd::new(n as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Dd::new(n))
    }
}

impl NumCast for Dd {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        n.to_f64().map(Dd::new)
    }
}

macro_rules! via_hi {
    ($($m:ident),*) => {$(
        fn $m(self) -> Self {
            Dd::from_hi(f64::$m, self)
        }
    )*};
}

impl Float for Dd {
    fn nan() -> Self {
        Dd::new(f64::NAN)
    }
    fn infinity() -> Self {
        Dd::new(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Dd::new(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Dd::new(-0.0)
    }
    fn min_value() -> Self {
        Dd::new(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Dd::new(f64::MIN_POSITIVE)
    }
    fn max_value() -> Self {
        Dd::new(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.hi.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite()
    }
    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }
    fn floor(self) -> Self {
        let h = self.hi.floor();
        if h == self.hi {
            quick_two_sum(h, self.lo.floor())
        } else {
            Dd::new(h)
        }
    }
    fn ceil(self) -> Self {
        -(-self).floor()
    }
    fn round(self) -> Self {
        (self + Dd::new(0.5)).floor()
    }
    fn trunc(self) -> Self {
        if self.hi >= 0.0 {
            self.floor()
        } else {
            self.ceil()
        }
    }
    fn fract(self) -> Self {
        self - self.trunc()
    }
    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Dd::new(self.hi.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        Dd::one() / self
    }
    fn powi(self, n: i32) -> Self {
        let mut base = if n < 0 { self.recip() } else { self };
        let mut e = n.unsigned_abs();
        let mut acc = Dd::one();
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * base;
            }
            base = base * base;
            e >>= 1;
        }
        acc
    }
    fn powf(self, n: Self) -> Self {
        (self.ln() * n).exp()
    }
    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::new(self.hi.sqrt());
        }
        let y = Dd::new(self.hi.sqrt());
        y + (self - y * y) / (y + y)
    }
    fn exp(self) -> Self {
        if self.hi < -745.0 {
            return Dd::zero();
        }
        if self.hi > 709.0 {
            return Dd::infinity();
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Dd::new(k)).scale2(-10);
        let mut term = Dd::one();
        let mut sum = Dd::one();
        for i in 1..=16 {
            term = term * r / Dd::new(i as f64);
            sum += term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.scale2(k as i32)
    }
    fn exp2(self) -> Self {
        (self * LN2).exp()
    }
    fn ln(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return Dd::new(self.hi.ln());
        }
        let mut y = Dd::new(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::one();
        }
        y
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.ln() / LN2
    }
    fn log10(self) -> Self {
        self.ln() / Dd::new(10.0).ln()
    }
    fn max(self, o: Self) -> Self {
        if o > self || self.is_nan() {
            o
        } else {
            self
        }
    }
    fn min(self, o: Self) -> Self {
        if o < self || self.is_nan() {
            o
        } else {
            self
        }
    }
    fn abs_sub(self, o: Self) -> Self {
        (self - o).max(Dd::zero())
    }
    fn hypot(self, o: Self) -> Self {
        (self * self + o * o).sqrt()
    }
    fn exp_m1(self) -> Self {
        self.exp() - Dd::one()
    }
    fn ln_1p(self) -> Self {
        (Dd::one() + self).ln()
    }
    fn tanh(self) -> Self {
        let e = (self + self).exp();
        (e - Dd::one()) / (e + Dd::one())
    }
    via_hi!(cbrt, sin, cos, tan, asin, acos, atan, sinh, cosh, asinh, acosh, atanh);
    fn atan2(self, o: Self) -> Self {
        Dd::new(self.hi.atan2(o.hi))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

impl Scalar for Dd {
    fn c(v: f64) -> Self {
        Dd::new(v)
    }

    fn f64(self) -> f64 {
        self.value()
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
        for i in 0..m as isize {
            for j in 0..n as isize {
                let mut acc = Dd::zero();
                for l in 0..k as isize {
                    acc += *a.offset(i * rsa + l * csa) * *b.offset(l * rsb + j * csb);
                }
                let out = c.offset(i * rsc + j * csc);
                *out = if beta.is_zero() { alpha * acc } else { alpha * acc + beta * *out };
            }
        }
    }
}

impl PartialEq<f64> for Dd {
    fn eq(&self, o: &f64) -> bool {
        self.hi == *o && self.lo == 0.0
    }
}

impl PartialOrd<f64> for Dd {
    fn partial_cmp(&self, o: &f64) -> Option<Ordering> {
        self.partial_cmp(&Dd::new(*o))
    }
}

pub fn widen_matrix(m: &Matrix<f64>) -> Matrix<Dd> {
    Matrix::from_fn(m.rows(), m.cols(), |r, c| Dd::new(m.get(r, c)))
}

pub fn widen_objective(o: &Objective<f64>) -> Objective<Dd> {
    match o {
        Objective::Elbo { n_total } => Objective::Elbo { n_total: *n_total },
        Objective::Mll { n_total } => Objective::Mll { n_total: *n_total },
        Objective::Weighted { weights, n_total } => Objective::Weighted {
            weights: weights.iter().map(|&w| Dd::new(w)).collect(),
            n_total: *n_total,
        },
    }
}

pub fn widen_targets(y: &Targets<f64>) -> Targets<Dd> {
    match y {
        Targets::Regression(m) => Targets::Regression(widen_matrix(m)),
        Targets::Classification(l) => Targets::Classification(l.clone()),
    }
}

/// Exact copy of `model` in double-double precision.
pub fn widen_model(model: &DunModel<f64>) -> DunModel<Dd> {
    let prior = DepthDistribution::from_logits(model.prior().logits().iter().map(|&v| Dd::new(v)).collect()).unwrap();
    let mut wide = DunModel::<Dd>::with_prior(model.config.clone(), model.seed, prior).unwrap();
    let mut values = Vec::new();
    model.visit_params(&mut |p| values.push((p.value.clone(), p.frozen)));
    let mut i = 0;
    wide.visit_params_mut(&mut |p| {
        p.value = widen_matrix(&values[i].0);
        p.frozen = values[i].1;
        i += 1;
    });
    for (w, b) in wide.blocks.iter_mut().zip(&model.blocks) {
        w.dropout = b.dropout;
        if let (Some(wn), Some(bn)) = (&mut w.norm, &b.norm) {
            wn.running_mean = bn.running_mean.iter().map(|&v| Dd::new(v)).collect();
            wn.running_var = bn.running_var.iter().map(|&v| Dd::new(v)).collect();
        }
    }
    wide
}

/// Central differences of `loss` for every non-frozen entry, evaluated in
/// double-double precision and rounded to `f64`.
pub fn central_differences(
    model: &mut DunModel<Dd>,
    eps: f64,
    mut loss: impl FnMut(&mut DunModel<Dd>) -> Dd,
) -> Vec<Option<Vec<f64>>> {
    let mut shapes = Vec::new();
    model.visit_params(&mut |p| shapes.push((!p.frozen).then_some(p.value.len())));
    let h = Dd::new(eps);
    let mut out = Vec::with_capacity(shapes.len());
    for (index, len) in shapes.iter().enumerate() {
        let Some(len) = *len else {
            out.push(None);
            continue;
        };
        let mut diffs = Vec::with_capacity(len);
        for j in 0..len {
            let set = |m: &mut DunModel<Dd>, v: Dd| {
                let mut k = 0;
                m.visit_params_mut(&mut |p| {
                    if k == index {
                        p.value.as_mut_slice()[j] = v;
                    }
                    k += 1;
                });
            };
            let mut original = Dd::zero();
            let mut k = 0;
            model.visit_params(&mut |p| {
                if k == index {
                    original = p.value.as_slice()[j];
                }
                k += 1;
            });
            set(model, original + h);
            let plus = loss(model);
            set(model, original - h);
            let minus = loss(model);
            set(model, original);
            diffs.push(((plus - minus) / (h + h)).value());
        }
        out.push(Some(diffs));
    }
    out
}
