//! Reference dynamic systems.
//!
//! * [`DoubleIntegrator`]: position and speed along a fixed axis; the
//!   analytic minimum-time oracle.
//! * [`Car`]: kinematic bicycle with a first-order drivetrain, planar
//!   (embedded at `z = 0`).
//! * [`Quadrotor`]: point mass with attitude quaternion, collective thrust
//!   and body rates as inputs.
//!
//! Car state `[p_x, p_y, ψ, v, D, δ]`, input `[Ḋ, δ̇]`:
//!
//! ```text
//! ṗ_x = v cos ψ     ṗ_y = v sin ψ     ψ̇ = v tan δ / L
//! v̇   = c_m D - c_r v                 Ḋ = u_0    δ̇ = u_1
//! a_∥ = c_m D - c_r v                 a_⊥ = v² tan δ / L
//! ```
//!
//! The drivetrain coefficients are illustrative; only the bounds below
//! are meaningful for comparisons.
//!
//! Quadrotor state `[p, v, q]` (quaternion scalar-first), input
//! `[f_c, ω_x, ω_y, ω_z]`:
//!
//! ```text
//! ṗ = v     v̇ = R(q) (0, 0, f_c) / m - (0, 0, g)     q̇ = ½ q ⊗ (0, ω)
//! ```

use crate::geom::{self, Vec3};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Car bounds: `D`, `δ`, `Ḋ`, `δ̇`, and the acceleration limit on `a_∥`, `a_⊥`.
pub const CAR_THROTTLE: (f64, f64) = (-1.0, 1.0);
pub const CAR_STEER: (f64, f64) = (-0.4, 0.4);
pub const CAR_THROTTLE_RATE: (f64, f64) = (-10.0, 10.0);
pub const CAR_STEER_RATE: (f64, f64) = (-2.0, 2.0);
pub const CAR_ACCEL: (f64, f64) = (-4.0, 4.0);

/// Quadrotor bounds: collective thrust (N), roll/pitch rate and yaw rate (rad/s).
pub const QUAD_THRUST: (f64, f64) = (0.0, 27.52);
pub const QUAD_RATE_XY: (f64, f64) = (-15.0, 15.0);
pub const QUAD_RATE_Z: (f64, f64) = (-0.3, 0.3);

/// A dynamic system `ẋ = f(x, u)` with position output `y = h(x)`.
pub trait DynamicsModel {
    fn name(&self) -> &'static str;
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;

    fn dynamics<T: Real>(&self, x: &[T], u: &[T], dx: &mut [T]);

    /// Position in ℝ³.
    fn output<T: Real>(&self, x: &[T]) -> [T; 3];

    /// Time derivative of [`DynamicsModel::output`] along the dynamics.
    fn velocity<T: Real>(&self, x: &[T]) -> [T; 3];

    fn state_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![f64::NEG_INFINITY; self.nx()], vec![f64::INFINITY; self.nx()])
    }

    fn input_bounds(&self) -> (Vec<f64>, Vec<f64>);

    fn num_path_constraints(&self) -> usize {
        0
    }

    /// Values `c(x, u)` constrained to [`DynamicsModel::path_bounds`].
    fn path_constraints<T: Real>(&self, _x: &[T], _u: &[T], _out: &mut [T]) {}

    fn path_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (Vec::new(), Vec::new())
    }

    /// Equilibrium-like `(state, input)` used to seed unobserved states.
    fn trim(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }

    /// State placed at `position` moving with `velocity`, other states at
    /// trim.
    fn guess_state(&self, position: Vec3, velocity: Vec3) -> Vec<f64>;

    /// Projection back onto the state manifold after an integration step.
    fn normalize<T: Real>(&self, _x: &mut [T]) {}

    fn state_names(&self) -> Vec<String> {
        (0..self.nx()).map(|i| format!("x{i}")).collect()
    }

    fn input_names(&self) -> Vec<String> {
        (0..self.nu()).map(|i| format!("u{i}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoubleIntegrator {
    pub a_max: f64,
    /// Unit direction of motion.
    pub axis: Vec3,
    /// Output position at `p = 0`.
    pub origin: Vec3,
}

impl Default for DoubleIntegrator {
    fn default() -> Self {
        Self { a_max: 1.0, axis: [1.0, 0.0, 0.0], origin: [0.0; 3] }
    }
}

impl DynamicsModel for DoubleIntegrator {
    fn name(&self) -> &'static str {
        "double_integrator"
    }
    fn nx(&self) -> usize {
        2
    }
    fn nu(&self) -> usize {
        1
    }
    fn dynamics<T: Real>(&self, x: &[T], u: &[T], dx: &mut [T]) {
        dx[0] = x[1];
        dx[1] = u[0];
    }
    fn output<T: Real>(&self, x: &[T]) -> [T; 3] {
        let o = geom::lift::<T>(self.origin);
        [o[0] + x[0] * self.axis[0], o[1] + x[0] * self.axis[1], o[2] + x[0] * self.axis[2]]
    }
    fn velocity<T: Real>(&self, x: &[T]) -> [T; 3] {
        [x[1] * self.axis[0], x[1] * self.axis[1], x[1] * self.axis[2]]
    }
    fn input_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-self.a_max], vec![self.a_max])
    }
    fn trim(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((vec![0.0, 0.0], vec![0.0]))
    }
    fn guess_state(&self, position: Vec3, velocity: Vec3) -> Vec<f64> {
        vec![geom::dot(geom::sub(position, self.origin), self.axis), geom::dot(velocity, self.axis)]
    }
    fn state_names(&self) -> Vec<String> {
        vec!["p".into(), "v".into()]
    }
    fn input_names(&self) -> Vec<String> {
        vec!["a".into()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Car {
    /// Wheelbase (m).
    pub wheelbase: f64,
    /// Drivetrain gain (m/s² per unit throttle).
    pub c_m: f64,
    /// Linear drag (1/s).
    pub c_r: f64,
}

impl Default for Car {
    fn default() -> Self {
        Self { wheelbase: 0.09, c_m: 6.0, c_r: 1.5 }
    }
}

impl Car {
    fn accelerations<T: Real>(&self, x: &[T]) -> (T, T) {
        let (v, d, delta) = (x[3], x[4], x[5]);
        let along = d * self.c_m - v * self.c_r;
        let across = v * v * delta.tan() / self.wheelbase;
        (along, across)
    }
}

impl DynamicsModel for Car {
    fn name(&self) -> &'static str {
        "car"
    }
    fn nx(&self) -> usize {
        6
    }
    fn nu(&self) -> usize {
        2
    }
    fn dynamics<T: Real>(&self, x: &[T], u: &[T], dx: &mut [T]) {
        let (psi, v, delta) = (x[2], x[3], x[5]);
        dx[0] = v * psi.cos();
        dx[1] = v * psi.sin();
        dx[2] = v * delta.tan() / self.wheelbase;
        dx[3] = self.accelerations(x).0;
        dx[4] = u[0];
        dx[5] = u[1];
    }
    fn output<T: Real>(&self, x: &[T]) -> [T; 3] {
        [x[0], x[1], T::zero()]
    }
    fn velocity<T: Real>(&self, x: &[T]) -> [T; 3] {
        [x[3] * x[2].cos(), x[3] * x[2].sin(), T::zero()]
    }
    fn state_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let inf = f64::INFINITY;
        (
            vec![-inf, -inf, -inf, -inf, CAR_THROTTLE.0, CAR_STEER.0],
            vec![inf, inf, inf, inf, CAR_THROTTLE.1, CAR_STEER.1],
        )
    }
    fn input_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![CAR_THROTTLE_RATE.0, CAR_STEER_RATE.0], vec![CAR_THROTTLE_RATE.1, CAR_STEER_RATE.1])
    }
    fn num_path_constraints(&self) -> usize {
        2
    }
    fn path_constraints<T: Real>(&self, x: &[T], _u: &[T], out: &mut [T]) {
        let (a, b) = self.accelerations(x);
        out[0] = a;
        out[1] = b;
    }
    fn path_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![CAR_ACCEL.0; 2], vec![CAR_ACCEL.1; 2])
    }
    fn trim(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((vec![0.0; 6], vec![0.0; 2]))
    }
    fn guess_state(&self, position: Vec3, velocity: Vec3) -> Vec<f64> {
        let speed = (velocity[0] * velocity[0] + velocity[1] * velocity[1]).sqrt();
        // throttle that holds the speed against drag
        let d = (self.c_r * speed / self.c_m).clamp(CAR_THROTTLE.0, CAR_THROTTLE.1);
        vec![position[0], position[1], velocity[1].atan2(velocity[0]), speed, d, 0.0]
    }
    fn state_names(&self) -> Vec<String> {
        ["px", "py", "psi", "v", "D", "delta"].iter().map(|s| s.to_string()).collect()
    }
    fn input_names(&self) -> Vec<String> {
        vec!["dD".into(), "ddelta".into()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Quadrotor {
    /// Mass (kg).
    pub mass: f64,
    /// Gravitational acceleration (m/s²).
    pub gravity: f64,
}

impl Default for Quadrotor {
    fn default() -> Self {
        Self { mass: 0.8, gravity: 9.81 }
    }
}

impl DynamicsModel for Quadrotor {
    fn name(&self) -> &'static str {
        "quadrotor"
    }
    fn nx(&self) -> usize {
        10
    }
    fn nu(&self) -> usize {
        4
    }
    fn dynamics<T: Real>(&self, x: &[T], u: &[T], dx: &mut [T]) {
        let q = [x[6], x[7], x[8], x[9]];
        let thrust = geom::rotate(q, [T::zero(), T::zero(), u[0] / self.mass]);
        for i in 0..3 {
            dx[i] = x[3 + i];
            dx[3 + i] = thrust[i];
        }
        dx[5] = dx[5] - self.gravity;
        let qd = geom::qmul(q, [T::zero(), u[1], u[2], u[3]]);
        for i in 0..4 {
            dx[6 + i] = qd[i] * 0.5;
        }
    }
    fn output<T: Real>(&self, x: &[T]) -> [T; 3] {
        [x[0], x[1], x[2]]
    }
    fn velocity<T: Real>(&self, x: &[T]) -> [T; 3] {
        [x[3], x[4], x[5]]
    }
    fn input_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (
            vec![QUAD_THRUST.0, QUAD_RATE_XY.0, QUAD_RATE_XY.0, QUAD_RATE_Z.0],
            vec![QUAD_THRUST.1, QUAD_RATE_XY.1, QUAD_RATE_XY.1, QUAD_RATE_Z.1],
        )
    }
    fn trim(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let mut x = vec![0.0; 10];
        x[6] = 1.0;
        Some((x, vec![self.mass * self.gravity, 0.0, 0.0, 0.0]))
    }
    fn guess_state(&self, position: Vec3, velocity: Vec3) -> Vec<f64> {
        let mut x = vec![0.0; 10];
        x[..3].copy_from_slice(&position);
        x[3..6].copy_from_slice(&velocity);
        x[6] = 1.0;
        x
    }
    fn normalize<T: Real>(&self, x: &mut [T]) {
        let n = (x[6] * x[6] + x[7] * x[7] + x[8] * x[8] + x[9] * x[9]).sqrt();
        for v in &mut x[6..10] {
            *v = *v / n;
        }
    }
    fn state_names(&self) -> Vec<String> {
        ["px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz"].iter().map(|s| s.to_string()).collect()
    }
    fn input_names(&self) -> Vec<String> {
        ["fc", "wx", "wy", "wz"].iter().map(|s| s.to_string()).collect()
    }
}

/// Closed set of shipped models, used for file-driven dispatch.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    DoubleIntegrator(DoubleIntegrator),
    Car(Car),
    Quadrotor(Quadrotor),
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            AnyModel::DoubleIntegrator($m) => $e,
            AnyModel::Car($m) => $e,
            AnyModel::Quadrotor($m) => $e,
        }
    };
}

impl DynamicsModel for AnyModel {
    fn name(&self) -> &'static str {
        dispatch!(self, m => m.name())
    }
    fn nx(&self) -> usize {
        dispatch!(self, m => m.nx())
    }
    fn nu(&self) -> usize {
        dispatch!(self, m => m.nu())
    }
    fn dynamics<T: Real>(&self, x: &[T], u: &[T], dx: &mut [T]) {
        dispatch!(self, m => m.dynamics(x, u, dx))
    }
    fn output<T: Real>(&self, x: &[T]) -> [T; 3] {
        dispatch!(self, m => m.output(x))
    }
    fn velocity<T: Real>(&self, x: &[T]) -> [T; 3] {
        dispatch!(self, m => m.velocity(x))
    }
    fn state_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        dispatch!(self, m => m.state_bounds())
    }
    fn input_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        dispatch!(self, m => m.input_bounds())
    }
    fn num_path_constraints(&self) -> usize {
        dispatch!(self, m => m.num_path_constraints())
    }
    fn path_constraints<T: Real>(&self, x: &[T], u: &[T], out: &mut [T]) {
        dispatch!(self, m => m.path_constraints(x, u, out))
    }
    fn path_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        dispatch!(self, m => m.path_bounds())
    }
    fn trim(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        dispatch!(self, m => m.trim())
    }
    fn guess_state(&self, position: Vec3, velocity: Vec3) -> Vec<f64> {
        dispatch!(self, m => m.guess_state(position, velocity))
    }
    fn normalize<T: Real>(&self, x: &mut [T]) {
        dispatch!(self, m => m.normalize(x))
    }
    fn state_names(&self) -> Vec<String> {
        dispatch!(self, m => m.state_names())
    }
    fn input_names(&self) -> Vec<String> {
        dispatch!(self, m => m.input_names())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read model config: {0}")]
    Io(String),
    #[error("cannot parse model config: {0}")]
    Parse(String),
    #[error("model config: {0}")]
    Invalid(String),
}

/// Model config file contents.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub model: AnyModel,
    pub x0: Vec<f64>,
    /// Per-state terminal value, `None` leaves the state free.
    pub terminal_mask: Option<Vec<Option<f64>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    model: String,
    #[serde(default)]
    params: serde_json::Value,
    x0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    terminal_mask: Option<Vec<Option<f64>>>,
}

fn params<T: serde::de::DeserializeOwned + Default>(v: serde_json::Value) -> Result<T, ModelError> {
    if v.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(v).map_err(|e| ModelError::Parse(format!("params: {e}")))
}

impl ModelConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        let model = match file.model.as_str() {
            "double_integrator" => AnyModel::DoubleIntegrator(params(file.params)?),
            "car" => AnyModel::Car(params(file.params)?),
            "quadrotor" => AnyModel::Quadrotor(params(file.params)?),
            other => return Err(ModelError::Invalid(format!("unknown model `{other}`"))),
        };
        if let AnyModel::DoubleIntegrator(di) = &model {
            let n = geom::norm(di.axis);
            if (n - 1.0).abs() > 1e-9 {
                return Err(ModelError::Invalid(format!("double integrator axis must be a unit vector (norm {n})")));
            }
        }
        if file.x0.len() != model.nx() {
            return Err(ModelError::Invalid(format!(
                "x0 has {} entries, {} expects {}",
                file.x0.len(),
                model.name(),
                model.nx()
            )));
        }
        if let Some(mask) = &file.terminal_mask {
            if mask.len() != model.nx() {
                return Err(ModelError::Invalid(format!(
                    "terminal_mask has {} entries, {} expects {}",
                    mask.len(),
                    model.name(),
                    model.nx()
                )));
            }
        }
        Ok(Self { model, x0: file.x0, terminal_mask: file.terminal_mask })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ModelError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        let params = match &self.model {
            AnyModel::DoubleIntegrator(m) => serde_json::to_value(m),
            AnyModel::Car(m) => serde_json::to_value(m),
            AnyModel::Quadrotor(m) => serde_json::to_value(m),
        }
        .expect("params serialise");
        let file = ModelFile {
            model: self.model.name().to_string(),
            params,
            x0: self.x0.clone(),
            terminal_mask: self.terminal_mask.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model config serialises")
    }
}

/// Classic RK4 step of `ẋ = f(x, u)` followed by [`DynamicsModel::normalize`].
pub fn rk4_step<M: DynamicsModel, T: Real>(model: &M, x: &[T], u: &[T], dt: f64, out: &mut [T]) {
    let n = x.len();
    let mut k1 = vec![T::zero(); n];
    let mut k2 = vec![T::zero(); n];
    let mut k3 = vec![T::zero(); n];
    let mut k4 = vec![T::zero(); n];
    let mut tmp = vec![T::zero(); n];
    model.dynamics(x, u, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + k1[i] * (0.5 * dt);
    }
    model.dynamics(&tmp, u, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + k2[i] * (0.5 * dt);
    }
    model.dynamics(&tmp, u, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + k3[i] * dt;
    }
    model.dynamics(&tmp, u, &mut k4);
    for i in 0..n {
        out[i] = x[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0);
    }
    model.normalize(out);
}
