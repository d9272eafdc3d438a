//! Pythagorean-hodograph segments generated by quaternion polynomials.
//!
//! A quaternion polynomial `Z(ξ) = u + v i + g j + h k` of degree `n` in
//! Bernstein form generates the hodograph `γ'(ξ) = Z i Z*`, whose norm is
//! the polynomial `σ = u² + v² + g² + h²`. The curve itself has degree
//! `2n + 1`, and its Bézier control points follow from integrating the
//! hodograph coefficients.
//!
//! The Euler–Rodrigues frame `R = [Z i Z*, Z j Z*, Z k Z*] / σ` is an
//! orthonormal adapted frame (first column tangent). Its angular velocity
//! expressed in the frame itself is `χ = 2 vec(Z* Z') / σ`, per unit of the
//! local parameter.

use crate::bernstein::{de_casteljau, de_casteljau_points, BernsteinPoly};
use crate::geom::{self, Mat3, Vec3};
use crate::quadrature::gauss_legendre_64;
use crate::scalar::Real;
use thiserror::Error;

/// Parametric speed below which frames are undefined.
pub const SIGMA_DEGENERATE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhError {
    #[error("local parameter {0} is outside [0, 1]")]
    Domain(f64),
    #[error("degenerate curve: parametric speed {sigma:e} at xi = {xi}")]
    Degenerate { xi: f64, sigma: f64 },
    #[error("irregular segment: parametric speed coefficient {index} is {value:e} (must be > 0)")]
    Irregular { index: usize, value: f64 },
    #[error("quaternion polynomial needs at least one coefficient tuple")]
    Empty,
}

/// Quaternion polynomial in Bernstein form; `tuples[i] = (u_i, v_i, g_i, h_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuaternionPolynomial<T = f64> {
    tuples: Vec<[T; 4]>,
}

impl<T: Real> QuaternionPolynomial<T> {
    pub fn new(tuples: Vec<[T; 4]>) -> Result<Self, PhError> {
        if tuples.is_empty() {
            return Err(PhError::Empty);
        }
        Ok(Self { tuples })
    }

    pub fn constant(q: [T; 4], degree: usize) -> Self {
        Self {
            tuples: vec![q; degree + 1],
        }
    }

    pub fn degree(&self) -> usize {
        self.tuples.len() - 1
    }

    pub fn tuples(&self) -> &[[T; 4]] {
        &self.tuples
    }

    /// One scalar channel (0 = u, 1 = v, 2 = g, 3 = h).
    pub fn channel(&self, c: usize) -> BernsteinPoly<T> {
        BernsteinPoly::new(self.tuples.iter().map(|t| t[c]).collect()).expect("non-empty")
    }

    pub fn at(&self, xi: T) -> [T; 4] {
        let mut out = [T::zero(); 4];
        let n = self.tuples.len();
        if n > 16 {
            for (c, slot) in out.iter_mut().enumerate() {
                let coeffs: Vec<T> = self.tuples.iter().map(|t| t[c]).collect();
                *slot = de_casteljau(&coeffs, xi);
            }
            return out;
        }
        let mut work = [[T::zero(); 4]; 16];
        work[..n].copy_from_slice(&self.tuples);
        let one_minus = T::one() - xi;
        for r in 1..n {
            for i in 0..n - r {
                for c in 0..4 {
                    work[i][c] = work[i][c] * one_minus + work[i + 1][c] * xi;
                }
            }
        }
        out = work[0];
        out
    }

    pub fn derivative(&self) -> Self {
        let n = self.degree();
        if n == 0 {
            return Self::constant([T::zero(); 4], 0);
        }
        let tuples = self
            .tuples
            .windows(2)
            .map(|w| {
                let mut d = [T::zero(); 4];
                for c in 0..4 {
                    d[c] = (w[1][c] - w[0][c]) * n as f64;
                }
                d
            })
            .collect();
        Self { tuples }
    }

    pub fn map<S: Real>(&self, f: impl Fn(T) -> S) -> QuaternionPolynomial<S> {
        QuaternionPolynomial {
            tuples: self.tuples.iter().map(|t| [f(t[0]), f(t[1]), f(t[2]), f(t[3])]).collect(),
        }
    }
}

impl QuaternionPolynomial<f64> {
    pub fn lift<S: Real>(&self) -> QuaternionPolynomial<S> {
        self.map(S::cst)
    }
}

/// Components of `γ' = Z i Z*`, each of degree `2n`.
pub fn hodograph<T: Real>(z: &QuaternionPolynomial<T>) -> [BernsteinPoly<T>; 3] {
    let u = z.channel(0);
    let v = z.channel(1);
    let g = z.channel(2);
    let h = z.channel(3);
    let x = u.square().add(&v.square()).sub(&g.square()).sub(&h.square());
    let y = u.mul(&h).add(&v.mul(&g)).scale(2.0);
    let zc = v.mul(&h).sub(&u.mul(&g)).scale(2.0);
    [x, y, zc]
}

/// `σ = u² + v² + g² + h²`, degree `2n`.
pub fn parametric_speed<T: Real>(z: &QuaternionPolynomial<T>) -> BernsteinPoly<T> {
    let mut s = z.channel(0).square();
    for c in 1..4 {
        s = s.add(&z.channel(c).square());
    }
    s
}

/// Bézier control points of `origin + ∫ γ'`: `2n + 2` points.
pub fn control_points<T: Real>(z: &QuaternionPolynomial<T>, origin: [T; 3]) -> Vec<[T; 3]> {
    let hod = hodograph(z);
    hodograph_control_points(&hod, origin)
}

pub(crate) fn hodograph_control_points<T: Real>(hod: &[BernsteinPoly<T>; 3], origin: [T; 3]) -> Vec<[T; 3]> {
    let deg = hod[0].degree();
    let denom = (deg + 1) as f64;
    let mut pts = Vec::with_capacity(deg + 2);
    let mut c = origin;
    pts.push(c);
    for i in 0..=deg {
        for k in 0..3 {
            c[k] += hod[k].coeffs()[i] / denom;
        }
        pts.push(c);
    }
    pts
}

/// Frame quantities at one parameter value, generic so that coefficient
/// sensitivities (dual numbers) or parameter derivatives (jets) can flow
/// through.
#[derive(Clone, Copy, Debug)]
pub struct FrameParts<T> {
    /// Columns e1, e2, e3.
    pub rotation: [[T; 3]; 3],
    pub sigma: T,
    pub chi: [T; 3],
}

/// Frame, speed and angular velocity from `Z(ξ)` and `Z'(ξ)`.
pub fn frame_parts<T: Real>(zq: [T; 4], dzq: [T; 4]) -> FrameParts<T> {
    let sigma = geom::qnorm2(zq);
    let inv = sigma.recip();
    let cols = geom::scaled_rotation_columns(zq);
    let rotation = [
        [cols[0][0] * inv, cols[0][1] * inv, cols[0][2] * inv],
        [cols[1][0] * inv, cols[1][1] * inv, cols[1][2] * inv],
        [cols[2][0] * inv, cols[2][1] * inv, cols[2][2] * inv],
    ];
    let w = geom::qmul(geom::qconj(zq), dzq);
    let two_inv = inv * 2.0;
    FrameParts {
        rotation,
        sigma,
        chi: [w[1] * two_inv, w[2] * two_inv, w[3] * two_inv],
    }
}

fn check_local(xi: f64) -> Result<(), PhError> {
    if (0.0..=1.0).contains(&xi) {
        Ok(())
    } else {
        Err(PhError::Domain(xi))
    }
}

fn checked_parts(z: &QuaternionPolynomial, xi: f64) -> Result<FrameParts<f64>, PhError> {
    check_local(xi)?;
    let zq = z.at(xi);
    let sigma = geom::qnorm2(zq);
    if sigma < SIGMA_DEGENERATE {
        return Err(PhError::Degenerate { xi, sigma });
    }
    Ok(frame_parts(zq, z.derivative().at(xi)))
}

/// Euler–Rodrigues frame at `xi`, normalised to a rotation.
pub fn erf_frame(z: &QuaternionPolynomial, xi: f64) -> Result<Mat3, PhError> {
    Ok(checked_parts(z, xi)?.rotation)
}

/// Frame angular velocity `(χ1, χ2, χ3)` per unit local parameter.
pub fn frame_angular_velocity(z: &QuaternionPolynomial, xi: f64) -> Result<Vec3, PhError> {
    Ok(checked_parts(z, xi)?.chi)
}

/// Position, frame, speed and angular velocity at one parameter value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameSample {
    pub position: Vec3,
    /// Columns e1, e2, e3.
    pub rotation: Mat3,
    pub sigma: f64,
    pub chi: Vec3,
}

impl FrameSample {
    pub fn e1(&self) -> Vec3 {
        self.rotation[0]
    }
    pub fn e2(&self) -> Vec3 {
        self.rotation[1]
    }
    pub fn e3(&self) -> Vec3 {
        self.rotation[2]
    }
}

/// One PH segment with its derived polynomials cached.
#[derive(Clone, Debug, PartialEq)]
pub struct PHSegment {
    z: QuaternionPolynomial,
    dz: QuaternionPolynomial,
    origin: Vec3,
    hodograph: [BernsteinPoly; 3],
    sigma: BernsteinPoly,
    control_points: Vec<Vec3>,
}

impl PHSegment {
    /// Fails if any Bernstein coefficient of σ is not strictly positive.
    pub fn new(z: QuaternionPolynomial, origin: Vec3) -> Result<Self, PhError> {
        let sigma = parametric_speed(&z);
        if let Some((index, &value)) = sigma.coeffs().iter().enumerate().find(|(_, &c)| !(c > 0.0)) {
            return Err(PhError::Irregular { index, value });
        }
        let hodograph = hodograph(&z);
        let control_points = hodograph_control_points(&hodograph, origin);
        let dz = z.derivative();
        Ok(Self {
            z,
            dz,
            origin,
            hodograph,
            sigma,
            control_points,
        })
    }

    pub fn quaternion(&self) -> &QuaternionPolynomial {
        &self.z
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn hodograph(&self) -> &[BernsteinPoly; 3] {
        &self.hodograph
    }

    pub fn sigma(&self) -> &BernsteinPoly {
        &self.sigma
    }

    /// Degree of the curve, `2n + 1`.
    pub fn curve_degree(&self) -> usize {
        2 * self.z.degree() + 1
    }

    pub fn control_points(&self) -> &[Vec3] {
        &self.control_points
    }

    pub fn end_point(&self) -> Vec3 {
        *self.control_points.last().expect("non-empty")
    }

    pub fn arc_length(&self) -> f64 {
        self.sigma.integral()
    }

    pub fn position(&self, xi: f64) -> Result<Vec3, PhError> {
        check_local(xi)?;
        Ok(de_casteljau_points(&self.control_points, xi))
    }

    pub fn frame(&self, xi: f64) -> Result<FrameSample, PhError> {
        check_local(xi)?;
        let zq = self.z.at(xi);
        let sigma = geom::qnorm2(zq);
        if sigma < SIGMA_DEGENERATE {
            return Err(PhError::Degenerate { xi, sigma });
        }
        let parts = frame_parts(zq, self.dz.at(xi));
        Ok(FrameSample {
            position: de_casteljau_points(&self.control_points, xi),
            rotation: parts.rotation,
            sigma: parts.sigma,
            chi: parts.chi,
        })
    }

    /// Frame quantities with exact first and second parameter derivatives.
    pub fn frame_jet(&self, xi: f64) -> FrameParts<crate::scalar::Jet> {
        use crate::scalar::Jet;
        let t = Jet::variable(xi);
        let z: QuaternionPolynomial<Jet> = self.z.lift();
        let dz: QuaternionPolynomial<Jet> = self.dz.lift();
        frame_parts(z.at(t), dz.at(t))
    }

    /// `(∫|χ|² dξ, ∫χ1² dξ)` by 64-point Gauss–Legendre.
    pub fn chi_energy(&self) -> (f64, f64) {
        let (nodes, weights) = gauss_legendre_64();
        let mut e = 0.0;
        let mut tw = 0.0;
        for (&x, &w) in nodes.iter().zip(weights) {
            let p = frame_parts(self.z.at(x), self.dz.at(x));
            e += w * geom::dot(p.chi, p.chi);
            tw += w * p.chi[0] * p.chi[0];
        }
        (e, tw)
    }
}

/// Generic χ energy integrals for one segment; used inside the stage-1 NLP.
pub fn chi_energy_generic<T: Real>(z: &QuaternionPolynomial<T>) -> (T, T) {
    let dz = z.derivative();
    let (nodes, weights) = gauss_legendre_64();
    let mut e = T::zero();
    let mut tw = T::zero();
    for (&x, &w) in nodes.iter().zip(weights) {
        let xi = T::cst(x);
        let p = frame_parts(z.at(xi), dz.at(xi));
        e += geom::dot(p.chi, p.chi) * w;
        tw += p.chi[0] * p.chi[0] * w;
    }
    (e, tw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::adaptive_simpson;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant(q: [f64; 4]) -> QuaternionPolynomial {
        QuaternionPolynomial::constant(q, 4)
    }

    fn random_z(rng: &mut ChaCha8Rng) -> QuaternionPolynomial {
        let tuples = (0..5)
            .map(|_| [rng.gen_range(0.5..1.5), rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)])
            .collect();
        QuaternionPolynomial::new(tuples).unwrap()
    }

    fn hod_at(z: &QuaternionPolynomial, xi: f64) -> Vec3 {
        let h = hodograph(z);
        [h[0].eval(xi).unwrap(), h[1].eval(xi).unwrap(), h[2].eval(xi).unwrap()]
    }

    #[test]
    fn hodograph_examples() {
        let h = hod_at(&constant([1.0, 0.0, 0.0, 0.0]), 0.4);
        assert_eq!(h, [1.0, 0.0, 0.0]);
        // k i k* = -i
        let h = hod_at(&constant([0.0, 0.0, 0.0, 1.0]), 0.4);
        assert!((h[0] + 1.0).abs() < 1e-15 && h[1].abs() < 1e-15 && h[2].abs() < 1e-15);
        let h = hod_at(&constant([1.0, 2.0, 0.0, 2.0]), 0.7);
        for (a, b) in h.iter().zip([1.0, 4.0, 8.0]) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn speed_examples() {
        let s = parametric_speed(&constant([1.0, 2.0, 0.0, 2.0]));
        assert!(s.coeffs().iter().all(|&c| (c - 9.0).abs() < 1e-13));
        let s = parametric_speed(&constant([1.0, 0.0, 0.0, 0.0]));
        assert!(s.coeffs().iter().all(|&c| (c - 1.0).abs() < 1e-15));
    }

    #[test]
    fn speed_squares_to_hodograph_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let z = random_z(&mut rng);
            let s = parametric_speed(&z);
            for i in 0..=1000 {
                let xi = i as f64 / 1000.0;
                let sv = s.eval(xi).unwrap();
                let h = hod_at(&z, xi);
                let gap = (sv * sv - geom::dot(h, h)).abs();
                assert!(gap <= 1e-9 * (1.0 + sv * sv));
            }
        }
    }

    #[test]
    fn degree_bookkeeping() {
        let z = constant([1.0, 0.1, 0.0, 0.0]);
        let seg = PHSegment::new(z.clone(), [0.0; 3]).unwrap();
        assert_eq!(seg.hodograph()[0].degree(), 8);
        assert_eq!(seg.sigma().degree(), 8);
        assert_eq!(seg.curve_degree(), 9);
        assert_eq!(seg.control_points().len(), 10);
    }

    #[test]
    fn frame_identity_and_axis_rotation() {
        let r = erf_frame(&constant([1.0, 0.0, 0.0, 0.0]), 0.3).unwrap();
        assert_eq!(r, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let th: f64 = 0.7;
        let r = erf_frame(&constant([(th / 2.0).cos(), (th / 2.0).sin(), 0.0, 0.0]), 0.5).unwrap();
        let expect = [[1.0, 0.0, 0.0], [0.0, th.cos(), th.sin()], [0.0, -th.sin(), th.cos()]];
        for c in 0..3 {
            for k in 0..3 {
                assert!((r[c][k] - expect[c][k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn frame_orthonormal_and_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = random_z(&mut rng);
        let r = erf_frame(&z, 0.37).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((geom::dot(r[a], r[b]) - want).abs() < 1e-9);
            }
        }
        let s = parametric_speed(&z).eval(0.37).unwrap();
        let h = hod_at(&z, 0.37);
        for k in 0..3 {
            assert!((r[0][k] * s - h[k]).abs() < 1e-9 * s);
        }
    }

    #[test]
    fn degenerate_and_domain_errors() {
        let z = constant([0.0; 4]);
        assert!(matches!(erf_frame(&z, 0.5), Err(PhError::Degenerate { .. })));
        assert!(matches!(frame_angular_velocity(&z, 0.5), Err(PhError::Degenerate { .. })));
        let z = constant([1.0, 0.0, 0.0, 0.0]);
        assert_eq!(erf_frame(&z, 1.2), Err(PhError::Domain(1.2)));
        let seg = PHSegment::new(constant([1e-5, 0.0, 0.0, 0.0]), [0.0; 3]).unwrap();
        assert!(matches!(seg.frame(0.5), Err(PhError::Degenerate { .. })));
    }

    #[test]
    fn irregular_segment_rejected() {
        // u passes through zero: σ coefficient 0 at the middle
        let z = QuaternionPolynomial::new(vec![[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(PHSegment::new(z, [0.0; 3]), Err(PhError::Irregular { .. })));
    }

    #[test]
    fn angular_velocity_constant_is_zero() {
        let chi = frame_angular_velocity(&constant([0.3, -0.2, 0.5, 0.1]), 0.6).unwrap();
        assert!(chi.iter().all(|c| c.abs() < 1e-15));
    }

    fn frame_fd(z: &QuaternionPolynomial, xi: f64, h: f64) -> (Mat3, Mat3) {
        let r = erf_frame(z, xi).unwrap();
        let rp = erf_frame(z, xi + h).unwrap();
        let rm = erf_frame(z, xi - h).unwrap();
        let mut d = [[0.0; 3]; 3];
        for c in 0..3 {
            for k in 0..3 {
                d[c][k] = (rp[c][k] - rm[c][k]) / (2.0 * h);
            }
        }
        (r, d)
    }

    #[test]
    fn angular_velocity_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let z = random_z(&mut rng);
            for i in 1..100 {
                let xi = i as f64 / 100.0;
                let chi = frame_angular_velocity(&z, xi).unwrap();
                let (r, d) = frame_fd(&z, xi, 1e-5);
                assert!((chi[0] - geom::dot(d[1], r[2])).abs() < 1e-6);
                assert!((chi[1] - geom::dot(d[2], r[0])).abs() < 1e-6);
                assert!((chi[2] - geom::dot(d[0], r[1])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rotation_about_k_is_planar_and_twist_free() {
        // v = g = 0 keeps the curve in the xy-plane: only χ3 survives.
        let z = QuaternionPolynomial::new(vec![
            [1.0, 0.0, 0.0, 0.0],
            [0.9, 0.0, 0.0, 0.3],
            [0.8, 0.0, 0.0, 0.7],
            [1.1, 0.0, 0.0, 0.2],
            [1.0, 0.0, 0.0, -0.4],
        ])
        .unwrap();
        let seg = PHSegment::new(z.clone(), [0.0; 3]).unwrap();
        for i in 0..=50 {
            let xi = i as f64 / 50.0;
            let chi = frame_angular_velocity(&z, xi).unwrap();
            assert_eq!(chi[0], 0.0);
            assert_eq!(chi[1], 0.0);
            assert_eq!(seg.position(xi).unwrap()[2], 0.0);
        }
        let (_, twist) = seg.chi_energy();
        assert_eq!(twist, 0.0);
    }

    #[test]
    fn control_points_of_straight_line() {
        let seg = PHSegment::new(constant([1.0, 0.0, 0.0, 0.0]), [0.0; 3]).unwrap();
        for (i, p) in seg.control_points().iter().enumerate() {
            assert!((p[0] - i as f64 / 9.0).abs() < 1e-15);
            assert_eq!(p[1], 0.0);
            assert_eq!(p[2], 0.0);
        }
    }

    #[test]
    fn control_points_reproduce_integrated_hodograph() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = random_z(&mut rng);
        let origin = [0.3, -1.0, 2.0];
        let seg = PHSegment::new(z.clone(), origin).unwrap();
        assert_eq!(seg.control_points()[0], origin);
        let hod = hodograph(&z);
        for i in 0..=100 {
            let xi = i as f64 / 100.0;
            let p = seg.position(xi).unwrap();
            for k in 0..3 {
                let q = origin[k] + adaptive_simpson(&|s: f64| hod[k].eval(s).unwrap(), 0.0, xi.max(1e-300), 1e-13);
                let q = if xi == 0.0 { origin[k] } else { q };
                assert!((p[k] - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn arc_length_examples() {
        let seg = PHSegment::new(constant([1.0, 2.0, 0.0, 2.0]), [0.0; 3]).unwrap();
        assert!((seg.arc_length() - 9.0).abs() < 1e-13);
        let seg = PHSegment::new(constant([1.0, 0.0, 0.0, 0.0]), [0.0; 3]).unwrap();
        assert!((seg.arc_length() - 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let seg = PHSegment::new(random_z(&mut rng), [0.0; 3]).unwrap();
        let hod = seg.hodograph().clone();
        let quad = adaptive_simpson(
            &|s: f64| {
                let v = [hod[0].eval(s).unwrap(), hod[1].eval(s).unwrap(), hod[2].eval(s).unwrap()];
                geom::norm(v)
            },
            0.0,
            1.0,
            1e-13,
        );
        assert!((seg.arc_length() - quad).abs() <= 1e-9 * quad);
    }

    #[test]
    fn jet_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seg = PHSegment::new(random_z(&mut rng), [0.0; 3]).unwrap();
        let xi = 0.42;
        let j = seg.frame_jet(xi);
        let h = 1e-5;
        let cp = seg.frame(xi + h).unwrap();
        let cm = seg.frame(xi - h).unwrap();
        for k in 0..3 {
            assert!((j.chi[k].d1 - (cp.chi[k] - cm.chi[k]) / (2.0 * h)).abs() < 1e-6);
        }
        let s = seg.sigma().derivative();
        assert!((j.sigma.d1 - s.eval(xi).unwrap()).abs() < 1e-12);
        assert!((j.sigma.d2 - s.derivative().eval(xi).unwrap()).abs() < 1e-11);
    }
}
