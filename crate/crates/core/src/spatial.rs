//! Spatial reformulation: progress rate and transverse coordinates with
//! respect to the Euler–Rodrigues frame of a reference spline, and the
//! ξ-parameterised dynamics of a [`DynamicsModel`].
//!
//! For a point `p = γ(ξ) + w₁ e₂ + w₂ e₃` moving with velocity `v`:
//!
//! ```text
//! ξ̇  = e₁·v / (σ − χ₃ w₁ + χ₂ w₂)
//! ẇ₁ = e₂·v + ξ̇ χ₁ w₂
//! ẇ₂ = e₃·v − ξ̇ χ₁ w₁
//! ```
//!
//! and the chain rule gives `dx/dξ = f(x, u) / ξ̇`, `dt/dξ = 1 / ξ̇`.

use crate::geom::{self, Vec3};
use crate::models::{rk4_step, DynamicsModel};
use crate::ph::FrameSample;
use crate::scalar::Real;
use crate::spline::{PHSpline, SplineError};
use thiserror::Error;

/// Smallest accepted denominator of the progress rate.
pub const DENOM_MIN: f64 = 1e-6;
/// Smallest accepted progress rate.
pub const XIDOT_MIN: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum SpatialError {
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("point is outside the projection tube at xi = {xi} (denominator {denom:e})")]
    OutOfTube { xi: f64, denom: f64 },
    #[error("forward progress lost at xi = {xi} (xidot = {xidot:e})")]
    ForwardProgress { xi: f64, xidot: f64 },
}

/// Progress rate and transverse coordinates at one frame sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress<T> {
    pub xidot: T,
    /// `σ − χ₃ w₁ + χ₂ w₂`.
    pub denom: T,
    pub w: [T; 2],
}

pub fn progress<T: Real>(frame: &FrameSample, p: [T; 3], v: [T; 3]) -> Progress<T> {
    let d = geom::sub(p, geom::lift(frame.position));
    let w1 = geom::dot(d, geom::lift(frame.e2()));
    let w2 = geom::dot(d, geom::lift(frame.e3()));
    let denom = w2 * frame.chi[1] - w1 * frame.chi[2] + frame.sigma;
    let xidot = geom::dot(v, geom::lift(frame.e1())) / denom;
    Progress { xidot, denom, w: [w1, w2] }
}

/// Writes `[f/ξ̇, 1/ξ̇]` into `out` (length `nx + 1`).
pub fn spatial_rhs<M: DynamicsModel, T: Real>(
    model: &M,
    frame: &FrameSample,
    x: &[T],
    u: &[T],
    out: &mut [T],
) -> Progress<T> {
    let nx = model.nx();
    let pr = progress(frame, model.output(x), model.velocity(x));
    model.dynamics(x, u, &mut out[..nx]);
    let inv = T::one() / pr.xidot;
    for o in &mut out[..nx] {
        *o = *o * inv;
    }
    out[nx] = inv;
    pr
}

pub fn transverse_coordinates(spline: &PHSpline, xi: f64, p: Vec3) -> Result<(f64, f64), SplineError> {
    let f = spline.frame(xi)?;
    let d = geom::sub(p, f.position);
    Ok((geom::dot(d, f.e2()), geom::dot(d, f.e3())))
}

pub fn spatial_rate(spline: &PHSpline, xi: f64, p: Vec3, v: Vec3) -> Result<f64, SpatialError> {
    Ok(spatial_rates(spline, xi, p, v)?.0)
}

/// `(ξ̇, ẇ₁, ẇ₂)`.
pub fn spatial_rates(spline: &PHSpline, xi: f64, p: Vec3, v: Vec3) -> Result<(f64, f64, f64), SpatialError> {
    let f = spline.frame(xi)?;
    let pr = progress(&f, p, v);
    if pr.denom <= DENOM_MIN {
        return Err(SpatialError::OutOfTube { xi, denom: pr.denom });
    }
    let [w1, w2] = pr.w;
    let chi1 = f.chi[0];
    Ok((
        pr.xidot,
        geom::dot(f.e2(), v) + pr.xidot * chi1 * w2,
        geom::dot(f.e3(), v) - pr.xidot * chi1 * w1,
    ))
}

/// `x' = f/ξ̇` with the time channel `t' = 1/ξ̇`.
#[derive(Clone, Copy, Debug)]
pub struct SpatialOde<'a, M> {
    pub model: &'a M,
    pub spline: &'a PHSpline,
    pub xidot_min: f64,
}

impl<'a, M: DynamicsModel> SpatialOde<'a, M> {
    pub fn new(model: &'a M, spline: &'a PHSpline) -> Self {
        Self { model, spline, xidot_min: XIDOT_MIN }
    }

    pub fn eval(&self, xi: f64, x: &[f64], u: &[f64]) -> Result<(Vec<f64>, f64), SpatialError> {
        let f = self.spline.frame(xi)?;
        let mut out = vec![0.0; self.model.nx() + 1];
        let pr = spatial_rhs(self.model, &f, x, u, &mut out);
        if pr.denom <= DENOM_MIN {
            return Err(SpatialError::OutOfTube { xi, denom: pr.denom });
        }
        if pr.xidot <= self.xidot_min {
            return Err(SpatialError::ForwardProgress { xi, xidot: pr.xidot });
        }
        let t = out.pop().expect("time channel");
        Ok((out, t))
    }
}

/// Re-simulates `ẋ = f(x, u)` in time from `states[0]`, holding `inputs[k]`
/// on `[times[k], times[k+1]]` with `steps` RK4 steps per interval, and
/// returns the largest deviation from `states` at the grid points.
pub fn roundtrip_check<M: DynamicsModel>(
    model: &M,
    times: &[f64],
    states: &[Vec<f64>],
    inputs: &[Vec<f64>],
    steps: usize,
) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let steps = steps.max(1);
    let mut x = states[0].clone();
    let mut next = vec![0.0; x.len()];
    let mut worst: f64 = 0.0;
    for k in 0..states.len() - 1 {
        let dt = (times[k + 1] - times[k]) / steps as f64;
        for _ in 0..steps {
            rk4_step(model, &x, &inputs[k], dt, &mut next);
            std::mem::swap(&mut x, &mut next);
        }
        for (a, b) in x.iter().zip(&states[k + 1]) {
            let d = (a - b).abs();
            worst = if d.is_nan() { f64::INFINITY } else { worst.max(d) };
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DoubleIntegrator, Quadrotor};
    use proptest::prelude::*;

    fn straight() -> PHSpline {
        PHSpline::from_tuples([0.0; 3], vec![vec![[1.0, 0.0, 0.0, 0.0]; 5]]).unwrap()
    }

    fn planar_arc() -> PHSpline {
        PHSpline::from_tuples(
            [0.0; 3],
            vec![vec![[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.2], [0.9, 0.0, 0.0, 0.4], [0.8, 0.0, 0.0, 0.5], [0.7, 0.0, 0.0, 0.6]]],
        )
        .unwrap()
    }

    fn twisted() -> PHSpline {
        PHSpline::from_tuples(
            [0.1, -0.2, 0.3],
            vec![vec![[1.0, 0.1, 0.0, 0.0], [0.9, 0.3, -0.2, 0.1], [0.8, 0.2, 0.3, 0.4], [0.6, -0.1, 0.4, 0.5], [0.7, 0.0, 0.2, 0.3]]],
        )
        .unwrap()
    }

    #[test]
    fn straight_examples() {
        let s = straight();
        assert_eq!(transverse_coordinates(&s, 0.3, [0.3, 0.2, -0.1]).unwrap(), (0.2, -0.1));
        assert_eq!(transverse_coordinates(&s, 0.3, s.position(0.3).unwrap()).unwrap(), (0.0, 0.0));
        assert_eq!(spatial_rate(&s, 0.5, [0.5, 0.0, 0.0], [2.0, 0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(spatial_rate(&s, 0.5, [0.5, 0.0, 0.0], [0.0, 3.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn curved_offset_halves_denominator() {
        let s = planar_arc();
        let xi = 0.4;
        let f = s.frame(xi).unwrap();
        assert!(f.chi[2].abs() > 0.1);
        let w1 = f.sigma / (2.0 * f.chi[2]);
        let p = geom::add(f.position, geom::scale(f.e2(), w1));
        let r = spatial_rate(&s, xi, p, f.e1()).unwrap();
        assert!((r - 2.0 / f.sigma).abs() < 1e-12);
        // beyond the centre of curvature
        let far = geom::add(f.position, geom::scale(f.e2(), 2.0 * w1));
        assert!(matches!(spatial_rate(&s, xi, far, f.e1()), Err(SpatialError::OutOfTube { .. })));
    }

    #[test]
    fn transverse_of_normal_offset() {
        let s = twisted();
        for xi in [0.0, 0.25, 0.7, 1.0] {
            let f = s.frame(xi).unwrap();
            let (w1, w2) = transverse_coordinates(&s, xi, geom::add(f.position, geom::scale(f.e2(), 0.37))).unwrap();
            assert!((w1 - 0.37).abs() < 1e-9 && w2.abs() < 1e-9);
        }
    }

    #[test]
    fn rates_match_finite_motion_on_curved_spline() {
        // move p along v for dt; the projection parameter and the transverse
        // coordinates must move at the predicted rates
        let s = twisted();
        let dt = 1e-6;
        for &(xi, w1, w2, v) in &[
            (0.3, 0.05, -0.08, [0.4, -0.3, 0.7]),
            (0.6, -0.1, 0.02, [1.0, 0.2, -0.5]),
            (0.45, 0.12, 0.09, [-0.2, 0.9, 0.3]),
        ] {
            let f = s.frame(xi).unwrap();
            let p = geom::add(f.position, geom::add(geom::scale(f.e2(), w1), geom::scale(f.e3(), w2)));
            let (xd, w1d, w2d) = spatial_rates(&s, xi, p, v).unwrap();
            let p1 = geom::add(p, geom::scale(v, dt));
            let xi1 = xi + xd * dt;
            let f1 = s.frame(xi1).unwrap();
            let along = geom::dot(f1.e1(), geom::sub(p1, f1.position));
            assert!(along.abs() < 1e-10, "projection drifted: {along:e}");
            let (a1, a2) = transverse_coordinates(&s, xi1, p1).unwrap();
            assert!(((a1 - w1) / dt - w1d).abs() < 1e-5);
            assert!(((a2 - w2) / dt - w2d).abs() < 1e-5);
        }
    }

    #[test]
    fn ode_double_integrator_examples() {
        let s = straight();
        let di = DoubleIntegrator::default();
        let ode = SpatialOde::new(&di, &s);
        assert_eq!(ode.eval(0.0, &[0.0, 1.0], &[0.0]).unwrap(), (vec![1.0, 0.0], 1.0));
        assert_eq!(ode.eval(0.0, &[0.0, 2.0], &[0.0]).unwrap(), (vec![1.0, 0.0], 0.5));
        assert!(matches!(ode.eval(0.5, &[0.5, 1e-4], &[0.0]), Err(SpatialError::ForwardProgress { .. })));
        assert!(matches!(ode.eval(1.5, &[0.5, 1.0], &[0.0]), Err(SpatialError::Spline(_))));
    }

    #[test]
    fn roundtrip_examples() {
        let di = DoubleIntegrator::default();
        assert_eq!(roundtrip_check(&di, &[], &[], &[], 10), 0.0);
        // bang-bang rest-to-rest over unit distance, switch at t = 1
        let n = 20;
        let times: Vec<f64> = (0..=n).map(|k| 2.0 * k as f64 / n as f64).collect();
        let states: Vec<Vec<f64>> = times
            .iter()
            .map(|&t| if t <= 1.0 { vec![0.5 * t * t, t] } else { vec![1.0 - 0.5 * (2.0 - t).powi(2), 2.0 - t] })
            .collect();
        let inputs: Vec<Vec<f64>> = (0..n).map(|k| vec![if k < n / 2 { 1.0 } else { -1.0 }]).collect();
        assert!(roundtrip_check(&di, &times, &states, &inputs, 10) < 1e-6);
        let mut bad = times.clone();
        for t in &mut bad[5..] {
            *t += 0.2;
        }
        assert!(roundtrip_check(&di, &bad, &states, &inputs, 10) > 0.1);
    }

    proptest! {
        #[test]
        fn chain_rule_identity(xi in 0.0..1.0f64, o in prop::array::uniform3(-0.1..0.1f64),
                               vel in prop::array::uniform3(-1.0..1.0f64), q in prop::array::uniform4(-1.0..1.0f64),
                               u in prop::array::uniform4(-5.0..5.0f64)) {
            let s = twisted();
            let f = s.frame(xi).unwrap();
            let v = geom::add(vel, geom::scale(f.e1(), 2.0));
            let model = Quadrotor::default();
            let mut x = vec![0.0; 10];
            x[..3].copy_from_slice(&geom::add(f.position, o));
            x[3..6].copy_from_slice(&v);
            x[6..].copy_from_slice(&q);
            x[6] += 2.0;
            model.normalize(&mut x);
            let mut out = vec![0.0; 11];
            let pr = spatial_rhs(&model, &f, &x, &u, &mut out);
            prop_assume!(pr.xidot > 1e-3 && pr.denom > 1e-3);
            let mut fx = vec![0.0; 10];
            model.dynamics(&x, &u, &mut fx);
            for i in 0..10 {
                prop_assert!((out[i] * pr.xidot - fx[i]).abs() <= 1e-12 * fx[i].abs().max(1.0));
            }
            prop_assert!((out[10] * pr.xidot - 1.0).abs() < 1e-12);
        }

        #[test]
        fn straight_reduces_to_cartesian(xi in 0.0..1.0f64, p in prop::array::uniform3(-0.5..0.5f64),
                                         v in prop::array::uniform3(-3.0..3.0f64)) {
            let s = straight();
            let (a, b, c) = spatial_rates(&s, xi, p, v).unwrap();
            prop_assert!((a - v[0]).abs() < 1e-14);
            prop_assert!((b - v[1]).abs() < 1e-14);
            prop_assert!((c - v[2]).abs() < 1e-14);
        }
    }
}
