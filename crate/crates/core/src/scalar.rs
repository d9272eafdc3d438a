//! Scalar types used throughout the planner.
//!
//! Every polynomial and dynamics routine is written once, generic over
//! [`Real`], and then evaluated either on plain `f64` or on one of the
//! differentiation types defined here:
//!
//! * [`Dual`] carries `N` directional derivatives (forward-mode AD). The
//!   [`jacobian`] helper seeds the input directions in chunks of `N`, so any
//!   number of inputs can be handled with a fixed lane width.
//! * [`Jet`] carries a truncated univariate Taylor expansion (value, first
//!   and second derivative) and is used to obtain exact parameter
//!   derivatives of frame quantities at spline joins.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Field operations shared by `f64` and the differentiation types.
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    /// Lift a constant.
    fn cst(v: f64) -> Self;
    /// Primal value.
    fn re(self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tan(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn one() -> Self {
        Self::cst(1.0)
    }

    fn recip(self) -> Self {
        Self::one() / self
    }

    fn powi(self, n: u32) -> Self {
        let mut acc = Self::one();
        for _ in 0..n {
            acc *= self;
        }
        acc
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
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
    fn tan(self) -> Self {
        f64::tan(self)
    }
}

/// Forward-mode dual number with `N` tangent lanes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub eps: [f64; N],
}

impl<const N: usize> Dual<N> {
    #[inline]
    pub fn constant(re: f64) -> Self {
        Self { re, eps: [0.0; N] }
    }

    /// A variable whose derivative is 1 along `lane`.
    #[inline]
    pub fn variable(re: f64, lane: usize) -> Self {
        let mut eps = [0.0; N];
        eps[lane] = 1.0;
        Self { re, eps }
    }

    #[inline]
    fn chain(self, value: f64, slope: f64) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e *= slope;
        }
        Self { re: value, eps }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.re += rhs.re;
        for i in 0..N {
            self.eps[i] += rhs.eps[i];
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.re -= rhs.re;
        for i in 0..N {
            self.eps[i] -= rhs.eps[i];
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = self.eps[i] * rhs.re + self.re * rhs.eps[i];
        }
        Self {
            re: self.re * rhs.re,
            eps,
        }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.re;
        let re = self.re * inv;
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = (self.eps[i] - re * rhs.eps[i]) * inv;
        }
        Self { re, eps }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.re = -self.re;
        for e in self.eps.iter_mut() {
            *e = -*e;
        }
        self
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.re += rhs;
        self
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.re -= rhs;
        self
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, rhs: f64) -> Self {
        self.re *= rhs;
        for e in self.eps.iter_mut() {
            *e *= rhs;
        }
        self
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}

impl<const N: usize> AddAssign for Dual<N> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<const N: usize> SubAssign for Dual<N> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<const N: usize> MulAssign for Dual<N> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<const N: usize> Real for Dual<N> {
    #[inline]
    fn cst(v: f64) -> Self {
        Self::constant(v)
    }
    #[inline]
    fn re(self) -> f64 {
        self.re
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    fn tan(self) -> Self {
        let t = self.re.tan();
        self.chain(t, 1.0 + t * t)
    }
}

/// Lane width used by [`jacobian`] callers in this crate.
pub const LANES: usize = 8;

/// Dense Jacobian of `f: R^n -> R^m` by chunked forward-mode AD.
///
/// `values` receives `f(x)` and `jac` the row-major `m x n` Jacobian.
pub fn jacobian<const N: usize, F>(x: &[f64], m: usize, mut f: F, values: &mut [f64], jac: &mut [f64])
where
    F: FnMut(&[Dual<N>], &mut [Dual<N>]),
{
    let n = x.len();
    debug_assert_eq!(values.len(), m);
    debug_assert_eq!(jac.len(), m * n);
    let mut input: Vec<Dual<N>> = x.iter().map(|&v| Dual::constant(v)).collect();
    let mut output = vec![Dual::<N>::constant(0.0); m];
    let mut start = 0;
    loop {
        let end = (start + N).min(n);
        for (j, slot) in input.iter_mut().enumerate() {
            *slot = if (start..end).contains(&j) {
                Dual::variable(x[j], j - start)
            } else {
                Dual::constant(x[j])
            };
        }
        f(&input, &mut output);
        for (i, out) in output.iter().enumerate() {
            values[i] = out.re;
            for j in start..end {
                jac[i * n + j] = out.eps[j - start];
            }
        }
        if end >= n {
            break;
        }
        start = end;
    }
}

/// Second-order univariate Taylor jet: value and first two derivatives
/// with respect to a single parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet {
    /// The independent variable itself at `t`.
    pub fn variable(t: f64) -> Self {
        Self { v: t, d1: 1.0, d2: 0.0 }
    }

    fn chain(self, f0: f64, f1: f64, f2: f64) -> Self {
        Self {
            v: f0,
            d1: f1 * self.d1,
            d2: f2 * self.d1 * self.d1 + f1 * self.d2,
        }
    }
}

impl Add for Jet {
    type Output = Self;
    fn add(self, r: Self) -> Self {
        Self { v: self.v + r.v, d1: self.d1 + r.d1, d2: self.d2 + r.d2 }
    }
}

impl Sub for Jet {
    type Output = Self;
    fn sub(self, r: Self) -> Self {
        Self { v: self.v - r.v, d1: self.d1 - r.d1, d2: self.d2 - r.d2 }
    }
}

impl Mul for Jet {
    type Output = Self;
    fn mul(self, r: Self) -> Self {
        Self {
            v: self.v * r.v,
            d1: self.d1 * r.v + self.v * r.d1,
            d2: self.d2 * r.v + 2.0 * self.d1 * r.d1 + self.v * r.d2,
        }
    }
}

impl Div for Jet {
    type Output = Self;
    fn div(self, r: Self) -> Self {
        self * r.recip_jet()
    }
}

impl Jet {
    fn recip_jet(self) -> Self {
        let inv = 1.0 / self.v;
        self.chain(inv, -inv * inv, 2.0 * inv * inv * inv)
    }
}

impl Neg for Jet {
    type Output = Self;
    fn neg(self) -> Self {
        Self { v: -self.v, d1: -self.d1, d2: -self.d2 }
    }
}

impl Add<f64> for Jet {
    type Output = Self;
    fn add(mut self, r: f64) -> Self {
        self.v += r;
        self
    }
}

impl Sub<f64> for Jet {
    type Output = Self;
    fn sub(mut self, r: f64) -> Self {
        self.v -= r;
        self
    }
}

impl Mul<f64> for Jet {
    type Output = Self;
    fn mul(self, r: f64) -> Self {
        Self { v: self.v * r, d1: self.d1 * r, d2: self.d2 * r }
    }
}

impl Div<f64> for Jet {
    type Output = Self;
    fn div(self, r: f64) -> Self {
        self * (1.0 / r)
    }
}

impl AddAssign for Jet {
    fn add_assign(&mut self, r: Self) {
        *self = *self + r;
    }
}

impl SubAssign for Jet {
    fn sub_assign(&mut self, r: Self) {
        *self = *self - r;
    }
}

impl MulAssign for Jet {
    fn mul_assign(&mut self, r: Self) {
        *self = *self * r;
    }
}

impl Real for Jet {
    fn cst(v: f64) -> Self {
        Self { v, d1: 0.0, d2: 0.0 }
    }
    fn re(self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * s * s))
    }
    fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }
    fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }
    fn tan(self) -> Self {
        let t = self.v.tan();
        let sec2 = 1.0 + t * t;
        self.chain(t, sec2, 2.0 * t * sec2)
    }
}
