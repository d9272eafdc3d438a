//! Polynomials in Bernstein form on the unit interval.
//!
//! Nothing in the crate converts to the power basis: products, derivatives
//! and degree elevation all act on Bernstein coefficients directly, and
//! evaluation uses de Casteljau's algorithm.

use crate::scalar::Real;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BernsteinError {
    #[error("parameter {0} is outside [0, 1]")]
    Domain(f64),
    #[error("a Bernstein polynomial needs at least one coefficient")]
    Empty,
}

/// Binomial coefficient as f64 (exact for the small degrees used here).
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc.round()
}

/// De Casteljau evaluation of Bernstein coefficients at `xi`.
///
/// No domain check; callers that accept user input go through
/// [`BernsteinPoly::eval`].
pub fn de_casteljau<T: Real>(coeffs: &[T], xi: T) -> T {
    const STACK: usize = 24;
    let n = coeffs.len();
    if n <= STACK {
        let mut work = [T::zero(); STACK];
        work[..n].copy_from_slice(coeffs);
        casteljau_in_place(&mut work[..n], xi)
    } else {
        casteljau_in_place(&mut coeffs.to_vec(), xi)
    }
}

fn casteljau_in_place<T: Real>(work: &mut [T], xi: T) -> T {
    let one_minus = T::one() - xi;
    let n = work.len();
    for r in 1..n {
        for i in 0..n - r {
            work[i] = work[i] * one_minus + work[i + 1] * xi;
        }
    }
    work[0]
}

/// De Casteljau on vector-valued control points.
pub fn de_casteljau_points<T: Real>(points: &[[T; 3]], xi: T) -> [T; 3] {
    let mut work: Vec<[T; 3]> = points.to_vec();
    let one_minus = T::one() - xi;
    let n = work.len();
    for r in 1..n {
        for i in 0..n - r {
            for c in 0..3 {
                work[i][c] = work[i][c] * one_minus + work[i + 1][c] * xi;
            }
        }
    }
    work[0]
}

#[derive(Clone, Debug, PartialEq)]
pub struct BernsteinPoly<T = f64> {
    coeffs: Vec<T>,
}

impl<T: Real> BernsteinPoly<T> {
    pub fn new(coeffs: Vec<T>) -> Result<Self, BernsteinError> {
        if coeffs.is_empty() {
            return Err(BernsteinError::Empty);
        }
        Ok(Self { coeffs })
    }

    pub fn constant(value: T, degree: usize) -> Self {
        Self {
            coeffs: vec![value; degree + 1],
        }
    }

    pub fn zero(degree: usize) -> Self {
        Self::constant(T::zero(), degree)
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<T> {
        self.coeffs
    }

    pub fn eval(&self, xi: f64) -> Result<T, BernsteinError> {
        if !(0.0..=1.0).contains(&xi) {
            return Err(BernsteinError::Domain(xi));
        }
        Ok(de_casteljau(&self.coeffs, T::cst(xi)))
    }

    /// Evaluation at an already-validated (possibly non-`f64`) parameter.
    pub fn at(&self, xi: T) -> T {
        de_casteljau(&self.coeffs, xi)
    }

    /// Exact product; the degree is the sum of the degrees.
    pub fn mul(&self, other: &Self) -> Self {
        let m = self.degree();
        let n = other.degree();
        let mut out = vec![T::zero(); m + n + 1];
        for (i, &a) in self.coeffs.iter().enumerate() {
            let wi = binomial(m, i);
            for (j, &b) in other.coeffs.iter().enumerate() {
                let w = wi * binomial(n, j) / binomial(m + n, i + j);
                out[i + j] += a * b * w;
            }
        }
        Self { coeffs: out }
    }

    pub fn square(&self) -> Self {
        self.mul(self)
    }

    /// Sum of two polynomials; the lower-degree operand is elevated first.
    pub fn add(&self, other: &Self) -> Self {
        let d = self.degree().max(other.degree());
        let a = self.elevate_to(d);
        let b = other.elevate_to(d);
        Self {
            coeffs: a.coeffs.iter().zip(&b.coeffs).map(|(&x, &y)| x + y).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|&c| c * s).collect(),
        }
    }

    /// Derivative with respect to the local parameter. A constant
    /// (degree 0) maps to the degree-0 zero polynomial.
    pub fn derivative(&self) -> Self {
        let n = self.degree();
        if n == 0 {
            return Self::zero(0);
        }
        let coeffs = self
            .coeffs
            .windows(2)
            .map(|w| (w[1] - w[0]) * n as f64)
            .collect();
        Self { coeffs }
    }

    /// Degree elevation by one.
    pub fn elevate(&self) -> Self {
        let n = self.degree();
        let mut out = Vec::with_capacity(n + 2);
        out.push(self.coeffs[0]);
        for i in 1..=n {
            let a = i as f64 / (n + 1) as f64;
            out.push(self.coeffs[i - 1] * a + self.coeffs[i] * (1.0 - a));
        }
        out.push(self.coeffs[n]);
        Self { coeffs: out }
    }

    pub fn elevate_to(&self, degree: usize) -> Self {
        assert!(degree >= self.degree(), "cannot lower degree by elevation");
        let mut p = self.clone();
        while p.degree() < degree {
            p = p.elevate();
        }
        p
    }

    /// Exact integral over [0, 1]: the mean of the coefficients.
    pub fn integral(&self) -> T {
        let mut acc = T::zero();
        for &c in &self.coeffs {
            acc += c;
        }
        acc / self.coeffs.len() as f64
    }

    /// Coefficients of the antiderivative vanishing at 0 (degree + 1).
    pub fn antiderivative(&self) -> Self {
        let n = self.degree() + 1;
        let mut out = Vec::with_capacity(n + 1);
        let mut acc = T::zero();
        out.push(acc);
        for &c in &self.coeffs {
            acc += c / n as f64;
            out.push(acc);
        }
        Self { coeffs: out }
    }
}
