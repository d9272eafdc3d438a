//! Stage 2: minimum-time transcription in the spatial domain.
//!
//! The horizon `ξ ∈ [0, m]` is split into `N` uniform intervals per spline
//! segment. Each node carries the model state augmented with elapsed time;
//! each interval carries a constant input. Defects come from RK4 on
//! `dx/dξ = f/ξ̇`, `dt/dξ = 1/ξ̇`, and the objective is the time at the last
//! node.
//!
//! Per node `k` (all `g ≤ 0`):
//!
//! * halfspaces of the region(s) containing `ξ_k`; nodes at interior
//!   integer `ξ` satisfy both adjacent regions,
//! * `ξ̇ ≥ xidot_min` and `σ − χ₃ w₁ + χ₂ w₂ ≥ denom_min`,
//! * model path constraints, using the input of the interval starting at
//!   the node (the last interval's input at the final node),
//! * at the final node, a box of half-width `terminal_tol` around the goal.
//!
//! Inside each interval, `ξ̇ ≥ xidot_min` also holds at every RK4 stage
//! state, so the integrator never steps across `ξ̇ = 0`.

use crate::corridor::Corridor;
use crate::geom::{self, Vec3};
use crate::models::DynamicsModel;
use crate::nlp::{self, NlpError, NlpOptions, NlpProblem, SolveReport, SolveStatus};
use crate::ph::FrameSample;
use crate::scalar::{jacobian, Dual, Real, LANES};
use crate::spatial::{self, progress, spatial_rhs, SpatialError};
use crate::spline::PHSpline;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Containment and bound tolerance used by [`SpatialTrajectory::verify`].
pub const FEASIBILITY_TOL: f64 = 1e-6;
/// Largest accepted time-domain re-simulation deviation.
pub const ROUNDTRIP_TOL: f64 = 1e-3;
/// Re-simulation refinement relative to the transcription substeps.
pub const ROUNDTRIP_REFINE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranscriptionConfig {
    pub nodes_per_segment: usize,
    pub xidot_min: f64,
    pub denom_min: f64,
    /// RK4 steps per interval.
    pub substeps: usize,
    /// Half-width of the terminal position box (m).
    pub terminal_tol: f64,
    /// Cruise speed of the initial guess (m/s).
    pub v_guess: f64,
    /// Solver options; fields given here override the stage-2 defaults.
    #[serde(deserialize_with = "nlp_overrides")]
    pub nlp: NlpOptions,
}

fn stage2_nlp() -> NlpOptions {
    NlpOptions { max_outer: 100, max_inner: 3000, initial_penalty: 1e3, newton_after: Some(2000), ..NlpOptions::default() }
}

fn nlp_overrides<'de, D: serde::Deserializer<'de>>(d: D) -> Result<NlpOptions, D::Error> {
    use serde::de::Error;
    let overrides = serde_json::Map::<String, serde_json::Value>::deserialize(d)?;
    let mut merged = match serde_json::to_value(stage2_nlp()).map_err(D::Error::custom)? {
        serde_json::Value::Object(m) => m,
        _ => unreachable!("options serialise to an object"),
    };
    merged.extend(overrides);
    serde_json::from_value(serde_json::Value::Object(merged)).map_err(D::Error::custom)
}

impl Default for TranscriptionConfig {
    fn default() -> Self {
        Self {
            nodes_per_segment: 25,
            xidot_min: spatial::XIDOT_MIN,
            denom_min: spatial::DENOM_MIN,
            substeps: 4,
            terminal_tol: 1e-4,
            v_guess: 1.0,
            nlp: stage2_nlp(),
        }
    }
}

impl TranscriptionConfig {
    pub fn check(&self) -> Result<(), OcpError> {
        if self.nodes_per_segment < 2 {
            return Err(OcpError::Setup(format!("nodes_per_segment must be at least 2, got {}", self.nodes_per_segment)));
        }
        if self.substeps == 0 {
            return Err(OcpError::Setup("substeps must be positive".into()));
        }
        for (name, v) in [
            ("xidot_min", self.xidot_min),
            ("denom_min", self.denom_min),
            ("terminal_tol", self.terminal_tol),
            ("v_guess", self.v_guess),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(OcpError::Setup(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("stage-2 setup: {0}")]
    Setup(String),
    #[error("stage-2 solver: {0}")]
    Solver(#[from] NlpError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error("stage-2 solver stopped with status {status:?} after {iterations} outer iterations: worst constraint {worst} (violation {violation:e})")]
    NotConverged {
        status: SolveStatus,
        iterations: usize,
        node: Option<usize>,
        worst: String,
        violation: f64,
        report: Box<SolveReport>,
    },
    #[error("forward progress pinned at the floor from node {node} on (xidot = {xidot:e}); the corridor and model are likely incompatible")]
    ForwardProgress { node: usize, xidot: f64, report: Box<SolveReport> },
    #[error("trajectory failed verification: {}", .failures.join("; "))]
    Verification { failures: Vec<String>, trajectory: Box<SpatialTrajectory> },
}

#[derive(Clone, Debug)]
struct Node {
    xi: f64,
    regions: Vec<usize>,
    frame: FrameSample,
    row_start: usize,
    rows: usize,
}

/// The transcribed nonlinear program.
pub struct Transcription<'a, M> {
    model: &'a M,
    corridor: &'a Corridor,
    config: TranscriptionConfig,
    x0: Vec<f64>,
    terminal: Vec<Option<f64>>,
    goal: Vec3,
    nx: usize,
    nu: usize,
    intervals: usize,
    /// `2·substeps + 1` frames per interval at half-step spacing.
    frames: Vec<Vec<FrameSample>>,
    nodes: Vec<Node>,
    /// `(path index, bound, is_upper)`.
    path_rows: Vec<(usize, f64, bool)>,
    num_node_rows: usize,
}

impl<'a, M: DynamicsModel> Transcription<'a, M> {
    pub fn new(
        model: &'a M,
        spline: &'a PHSpline,
        corridor: &'a Corridor,
        x0: &[f64],
        terminal_mask: Option<&[Option<f64>]>,
        config: &TranscriptionConfig,
    ) -> Result<Self, OcpError> {
        config.check()?;
        let (nx, nu) = (model.nx(), model.nu());
        let m = spline.num_segments();
        if m != corridor.num_regions() {
            return Err(OcpError::Setup(format!(
                "spline has {m} segments but the corridor has {} regions",
                corridor.num_regions()
            )));
        }
        if x0.len() != nx {
            return Err(OcpError::Setup(format!("x0 has {} entries, {} expects {nx}", x0.len(), model.name())));
        }
        let terminal = match terminal_mask {
            Some(mask) if mask.len() != nx => {
                return Err(OcpError::Setup(format!("terminal mask has {} entries, expected {nx}", mask.len())))
            }
            Some(mask) => mask.to_vec(),
            None => vec![None; nx],
        };
        let goal = corridor.goal();
        let gap = geom::sub(spline.end_point(), goal).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gap > config.terminal_tol {
            return Err(OcpError::Setup(format!(
                "spline ends {gap:e} m from the corridor goal (terminal tolerance {:e})",
                config.terminal_tol
            )));
        }
        let gap = geom::sub(spline.start(), corridor.start()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gap > config.terminal_tol {
            return Err(OcpError::Setup(format!("spline starts {gap:e} m from the corridor start")));
        }
        let (slo, shi) = model.state_bounds();
        for i in 0..nx {
            if !(x0[i] >= slo[i] - FEASIBILITY_TOL && x0[i] <= shi[i] + FEASIBILITY_TOL) {
                return Err(OcpError::Setup(format!("x0[{i}] = {} is outside [{}, {}]", x0[i], slo[i], shi[i])));
            }
        }
        let p0 = model.output(x0);
        let excess = corridor.region(0).max_excess(p0);
        if excess > FEASIBILITY_TOL {
            return Err(OcpError::Setup(format!("initial position {p0:?} is outside region 1 by {excess:e}")));
        }

        let n = config.nodes_per_segment;
        let s = config.substeps;
        let intervals = m * n;
        let mut frames = Vec::with_capacity(intervals);
        for k in 0..intervals {
            let (seg, j) = (k / n, k % n);
            let segment = &spline.segments()[seg];
            let mut f = Vec::with_capacity(2 * s + 1);
            for i in 0..=2 * s {
                let local = (j as f64 + i as f64 / (2 * s) as f64) / n as f64;
                f.push(segment.frame(local.min(1.0)).map_err(|e| OcpError::Setup(format!("segment {seg}: {e}")))?);
            }
            frames.push(f);
        }

        let pr = progress(&frames[0][0], p0, model.velocity(x0));
        if pr.denom <= config.denom_min || pr.xidot <= config.xidot_min {
            return Err(OcpError::Setup(format!(
                "initial state makes no forward progress along the spline (xidot = {:e}, denominator {:e})",
                pr.xidot, pr.denom
            )));
        }

        let (plo, phi) = model.path_bounds();
        let mut path_rows = Vec::new();
        for j in 0..model.num_path_constraints() {
            if phi[j].is_finite() {
                path_rows.push((j, phi[j], true));
            }
            if plo[j].is_finite() {
                path_rows.push((j, plo[j], false));
            }
        }

        let mut nodes = Vec::with_capacity(intervals + 1);
        let mut row = 0;
        for k in 0..=intervals {
            let regions = if k % n == 0 && k > 0 && k < intervals {
                vec![k / n - 1, k / n]
            } else {
                vec![(k / n).min(m - 1)]
            };
            let frame = if k < intervals { frames[k][0].clone() } else { frames[k - 1][2 * s].clone() };
            let mut rows: usize = regions.iter().map(|&r| corridor.region(r).halfspaces().len()).sum();
            rows += 2 + path_rows.len();
            if k == intervals {
                rows += 6;
            }
            nodes.push(Node { xi: k as f64 / n as f64, regions, frame, row_start: row, rows });
            row += rows;
        }

        Ok(Self {
            model,
            corridor,
            config: config.clone(),
            x0: x0.to_vec(),
            terminal,
            goal,
            nx,
            nu,
            intervals,
            frames,
            nodes,
            path_rows,
            num_node_rows: row,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.intervals + 1
    }

    pub fn num_intervals(&self) -> usize {
        self.intervals
    }

    fn stride(&self) -> usize {
        self.nx + 1 + self.nu
    }

    /// Offset of node `k`'s state; the time channel follows the state.
    pub fn state_offset(&self, k: usize) -> usize {
        k * self.stride()
    }

    pub fn input_offset(&self, k: usize) -> usize {
        k * self.stride() + self.nx + 1
    }

    fn node_input(&self, k: usize) -> usize {
        self.input_offset(k.min(self.intervals - 1))
    }

    pub fn xi_grid(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.xi).collect()
    }

    /// RK4 over interval `k`: writes the end state, the elapsed time and
    /// `xidot_min − ξ̇` at each stage state after the first.
    fn integrate<T: Real>(&self, k: usize, x: &[T], u: &[T], out: &mut [T]) {
        let n1 = self.nx + 1;
        let s = self.config.substeps;
        let hs = 1.0 / (self.config.nodes_per_segment * s) as f64;
        let f = &self.frames[k];
        let mut z: Vec<T> = x.iter().copied().chain(std::iter::once(T::zero())).collect();
        let mut k1 = vec![T::zero(); n1];
        let mut k2 = vec![T::zero(); n1];
        let mut k3 = vec![T::zero(); n1];
        let mut k4 = vec![T::zero(); n1];
        let mut tmp = vec![T::zero(); n1];
        let floor = T::cst(self.config.xidot_min);
        let mut r = n1;
        for j in 0..s {
            let (fa, fm, fb) = (&f[2 * j], &f[2 * j + 1], &f[2 * j + 2]);
            let p1 = spatial_rhs(self.model, fa, &z[..self.nx], u, &mut k1);
            if j > 0 {
                out[r] = floor - p1.xidot;
                r += 1;
            }
            for i in 0..n1 {
                tmp[i] = z[i] + k1[i] * (0.5 * hs);
            }
            let p2 = spatial_rhs(self.model, fm, &tmp[..self.nx], u, &mut k2);
            for i in 0..n1 {
                tmp[i] = z[i] + k2[i] * (0.5 * hs);
            }
            let p3 = spatial_rhs(self.model, fm, &tmp[..self.nx], u, &mut k3);
            for i in 0..n1 {
                tmp[i] = z[i] + k3[i] * hs;
            }
            let p4 = spatial_rhs(self.model, fb, &tmp[..self.nx], u, &mut k4);
            for p in [p2, p3, p4] {
                out[r] = floor - p.xidot;
                r += 1;
            }
            for i in 0..n1 {
                z[i] = z[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (hs / 6.0);
            }
            self.model.normalize(&mut z[..self.nx]);
        }
        out[..n1].copy_from_slice(&z);
    }

    fn interior_rows(&self) -> usize {
        4 * self.config.substeps - 1
    }

    /// First inequality row of the interior progress block.
    fn interior_base(&self) -> usize {
        self.num_node_rows
    }

    fn node_values<T: Real>(&self, k: usize, x: &[T], u: &[T], out: &mut [T]) {
        let node = &self.nodes[k];
        let p = self.model.output(x);
        let mut r = 0;
        for &reg in &node.regions {
            for h in self.corridor.region(reg).halfspaces() {
                out[r] = geom::dot(p, geom::lift(h.a)) - h.b;
                r += 1;
            }
        }
        let pr = progress(&node.frame, p, self.model.velocity(x));
        out[r] = T::cst(self.config.xidot_min) - pr.xidot;
        out[r + 1] = T::cst(self.config.denom_min) - pr.denom;
        r += 2;
        if !self.path_rows.is_empty() {
            let mut c = vec![T::zero(); self.model.num_path_constraints()];
            self.model.path_constraints(x, u, &mut c);
            for &(j, bound, upper) in &self.path_rows {
                out[r] = if upper { c[j] - bound } else { T::cst(bound) - c[j] };
                r += 1;
            }
        }
        if k == self.intervals {
            let tol = self.config.terminal_tol;
            for i in 0..3 {
                out[r] = p[i] - (self.goal[i] + tol);
                out[r + 1] = T::cst(self.goal[i] - tol) - p[i];
                r += 2;
            }
        }
        debug_assert_eq!(r, node.rows);
    }

    fn uses_input_in_nodes(&self) -> bool {
        !self.path_rows.is_empty()
    }

    /// Human-readable name of constraint row `row`, with its node.
    pub fn describe_row(&self, row: usize) -> (usize, String) {
        let n1 = self.nx + 1;
        let neq = self.intervals * n1;
        if row < neq {
            let (k, i) = (row / n1, row % n1);
            let what = if i == self.nx { "time".to_string() } else { format!("state {i}") };
            return (k + 1, format!("defect of {what} on interval {k} (node {})", k + 1));
        }
        let r = row - neq;
        if r >= self.interior_base() {
            let i = r - self.interior_base();
            let (k, j) = (i / self.interior_rows(), i % self.interior_rows());
            return (k, format!("minimum progress rate at stage {} of interval {k}", j + 2));
        }
        let k = self.nodes.partition_point(|n| n.row_start + n.rows <= r);
        let node = &self.nodes[k];
        let mut local = r - node.row_start;
        for &reg in &node.regions {
            let h = self.corridor.region(reg).halfspaces().len();
            if local < h {
                return (k, format!("halfspace {local} of region {} at node {k}", reg + 1));
            }
            local -= h;
        }
        let text = match local {
            0 => format!("minimum progress rate at node {k}"),
            1 => format!("projection tube at node {k}"),
            l if l < 2 + self.path_rows.len() => {
                let (j, _, upper) = self.path_rows[l - 2];
                format!("{} bound of path constraint {j} at node {k}", if upper { "upper" } else { "lower" })
            }
            l => format!("terminal box axis {} at node {k}", (l - 2 - self.path_rows.len()) / 2),
        };
        (k, text)
    }

    /// Seed: states on the spline at cruise speed, inputs at trim, time by
    /// arc length over cruise speed.
    pub fn initial_guess(&self, spline: &PHSpline) -> Vec<f64> {
        let (x_trim, u_trim) = self.model.trim().unwrap_or_else(|| {
            log::warn!("{} has no trim; seeding with zeros", self.model.name());
            (vec![0.0; self.nx], vec![0.0; self.nu])
        });
        let n = self.config.nodes_per_segment;
        let mut z = vec![0.0; self.num_variables()];
        let mut s_before = 0.0;
        for k in 0..=self.intervals {
            let seg = (k / n).min(spline.num_segments() - 1);
            if k > 0 && k % n == 0 && k < self.intervals {
                s_before += spline.segments()[seg - 1].arc_length();
            }
            let local = (k - seg * n) as f64 / n as f64;
            let sigma_int = spline.segments()[seg].sigma().antiderivative();
            let s = s_before + sigma_int.at(local);
            let node = &self.nodes[k];
            let mut x = self.model.guess_state(node.frame.position, geom::scale(node.frame.e1(), self.config.v_guess));
            if k == 0 {
                x = self.x0.clone();
            } else if self.model.trim().is_none() {
                // keep position and velocity from the guess, nothing else to fill
            } else {
                let fallback = self.model.guess_state([0.0; 3], [0.0; 3]);
                for i in 0..self.nx {
                    if !x[i].is_finite() {
                        x[i] = if fallback[i].is_finite() { fallback[i] } else { x_trim[i] };
                    }
                }
            }
            if k == self.intervals {
                for (xi, t) in x.iter_mut().zip(&self.terminal) {
                    if let Some(v) = t {
                        *xi = *v;
                    }
                }
            }
            let off = self.state_offset(k);
            z[off..off + self.nx].copy_from_slice(&x);
            z[off + self.nx] = s / self.config.v_guess;
            if k < self.intervals {
                let o = self.input_offset(k);
                z[o..o + self.nu].copy_from_slice(&u_trim);
            }
        }
        z
    }

    /// Unpacks a decision vector.
    pub fn trajectory(&self, z: &[f64], report: SolveReport) -> SpatialTrajectory {
        let mut states = Vec::with_capacity(self.intervals + 1);
        let mut times = Vec::with_capacity(self.intervals + 1);
        let mut inputs = Vec::with_capacity(self.intervals);
        let mut xidot = Vec::with_capacity(self.intervals + 1);
        for k in 0..=self.intervals {
            let off = self.state_offset(k);
            let x = z[off..off + self.nx].to_vec();
            let pr = progress(&self.nodes[k].frame, self.model.output(&x), self.model.velocity(&x));
            xidot.push(pr.xidot);
            states.push(x);
            times.push(z[off + self.nx]);
            if k < self.intervals {
                let o = self.input_offset(k);
                inputs.push(z[o..o + self.nu].to_vec());
            }
        }
        SpatialTrajectory {
            model: self.model.name().to_string(),
            state_names: self.model.state_names(),
            input_names: self.model.input_names(),
            nodes_per_segment: self.config.nodes_per_segment,
            xi_grid: self.xi_grid(),
            total_time: *times.last().expect("nodes"),
            states,
            inputs,
            times,
            xidot,
            report,
        }
    }
}

impl<M: DynamicsModel> NlpProblem for Transcription<'_, M> {
    fn num_variables(&self) -> usize {
        (self.intervals + 1) * (self.nx + 1) + self.intervals * self.nu
    }

    fn num_equalities(&self) -> usize {
        self.intervals * (self.nx + 1)
    }

    fn num_inequalities(&self) -> usize {
        self.num_node_rows + self.intervals * self.interior_rows()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.num_variables();
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        let (slo, shi) = self.model.state_bounds();
        let (ulo, uhi) = self.model.input_bounds();
        for k in 0..=self.intervals {
            let off = self.state_offset(k);
            lo[off..off + self.nx].copy_from_slice(&slo);
            hi[off..off + self.nx].copy_from_slice(&shi);
            lo[off + self.nx] = 0.0;
            if k < self.intervals {
                let o = self.input_offset(k);
                lo[o..o + self.nu].copy_from_slice(&ulo);
                hi[o..o + self.nu].copy_from_slice(&uhi);
            }
        }
        for i in 0..self.nx {
            lo[i] = self.x0[i];
            hi[i] = self.x0[i];
        }
        hi[self.nx] = 0.0;
        let last = self.state_offset(self.intervals);
        for (i, t) in self.terminal.iter().enumerate() {
            if let Some(v) = t {
                lo[last + i] = *v;
                hi[last + i] = *v;
            }
        }
        (lo, hi)
    }

    fn objective(&self, z: &[f64]) -> f64 {
        z[self.state_offset(self.intervals) + self.nx]
    }

    fn gradient(&self, _z: &[f64], grad: &mut [f64]) {
        grad.fill(0.0);
        grad[self.state_offset(self.intervals) + self.nx] = 1.0;
    }

    fn constraints(&self, z: &[f64], out: &mut [f64]) {
        let n1 = self.nx + 1;
        let ni = self.interior_rows();
        let base = self.intervals * n1;
        let mut end = vec![0.0; n1 + ni];
        for k in 0..self.intervals {
            let (xo, uo, yo) = (self.state_offset(k), self.input_offset(k), self.state_offset(k + 1));
            self.integrate(k, &z[xo..xo + self.nx], &z[uo..uo + self.nu], &mut end);
            for i in 0..n1 {
                let t0 = if i == self.nx { z[xo + self.nx] } else { 0.0 };
                out[k * n1 + i] = end[i] + t0 - z[yo + i];
            }
            let at = base + self.interior_base() + k * ni;
            out[at..at + ni].copy_from_slice(&end[n1..]);
        }
        for (k, node) in self.nodes.iter().enumerate() {
            let (xo, uo) = (self.state_offset(k), self.node_input(k));
            let rows = &mut out[base + node.row_start..base + node.row_start + node.rows];
            self.node_values(k, &z[xo..xo + self.nx], &z[uo..uo + self.nu], rows);
        }
    }

    fn jacobian_structure(&self) -> Vec<(usize, usize)> {
        let (nx, nu, n1) = (self.nx, self.nu, self.nx + 1);
        let mut s = Vec::new();
        for k in 0..self.intervals {
            let (xo, uo, yo) = (self.state_offset(k), self.input_offset(k), self.state_offset(k + 1));
            for i in 0..n1 {
                let row = k * n1 + i;
                s.extend((0..nx).map(|j| (row, xo + j)));
                s.extend((0..nu).map(|j| (row, uo + j)));
                if i == nx {
                    s.push((row, xo + nx));
                }
                s.push((row, yo + i));
            }
        }
        let base = self.intervals * n1;
        for (k, node) in self.nodes.iter().enumerate() {
            let (xo, uo) = (self.state_offset(k), self.node_input(k));
            for r in 0..node.rows {
                let row = base + node.row_start + r;
                s.extend((0..nx).map(|j| (row, xo + j)));
                if self.uses_input_in_nodes() {
                    s.extend((0..nu).map(|j| (row, uo + j)));
                }
            }
        }
        let ni = self.interior_rows();
        for k in 0..self.intervals {
            let (xo, uo) = (self.state_offset(k), self.input_offset(k));
            for r in 0..ni {
                let row = base + self.interior_base() + k * ni + r;
                s.extend((0..nx).map(|j| (row, xo + j)));
                s.extend((0..nu).map(|j| (row, uo + j)));
            }
        }
        s
    }

    fn jacobian(&self, z: &[f64], values: &mut [f64]) {
        let (nx, nu, n1) = (self.nx, self.nu, self.nx + 1);
        let nv = nx + nu;
        let ni = self.interior_rows();
        let mut input = vec![0.0; nv];
        let mut vals = vec![0.0; n1 + ni];
        let mut jac = vec![0.0; (n1 + ni) * nv];
        let mut interior = vec![0.0; self.intervals * ni * nv];
        let mut at = 0;
        for k in 0..self.intervals {
            let (xo, uo) = (self.state_offset(k), self.input_offset(k));
            input[..nx].copy_from_slice(&z[xo..xo + nx]);
            input[nx..].copy_from_slice(&z[uo..uo + nu]);
            jacobian::<LANES, _>(
                &input,
                n1 + ni,
                |v: &[Dual<LANES>], out: &mut [Dual<LANES>]| self.integrate(k, &v[..nx], &v[nx..], out),
                &mut vals,
                &mut jac,
            );
            for i in 0..n1 {
                values[at..at + nv].copy_from_slice(&jac[i * nv..(i + 1) * nv]);
                at += nv;
                if i == nx {
                    values[at] = 1.0;
                    at += 1;
                }
                values[at] = -1.0;
                at += 1;
            }
            interior[k * ni * nv..(k + 1) * ni * nv].copy_from_slice(&jac[n1 * nv..]);
        }
        let with_u = self.uses_input_in_nodes();
        for (k, node) in self.nodes.iter().enumerate() {
            let (xo, uo) = (self.state_offset(k), self.node_input(k));
            input[..nx].copy_from_slice(&z[xo..xo + nx]);
            input[nx..].copy_from_slice(&z[uo..uo + nu]);
            let rows = node.rows;
            let mut nvals = vec![0.0; rows];
            let mut njac = vec![0.0; rows * nv];
            jacobian::<LANES, _>(
                &input,
                rows,
                |v: &[Dual<LANES>], out: &mut [Dual<LANES>]| self.node_values(k, &v[..nx], &v[nx..], out),
                &mut nvals,
                &mut njac,
            );
            for r in 0..rows {
                let width = if with_u { nv } else { nx };
                values[at..at + width].copy_from_slice(&njac[r * nv..r * nv + width]);
                at += width;
            }
        }
        values[at..at + interior.len()].copy_from_slice(&interior);
        at += interior.len();
        debug_assert_eq!(at, values.len());
    }
}

/// Solved stage-2 trajectory on the uniform ξ grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialTrajectory {
    pub model: String,
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
    pub nodes_per_segment: usize,
    pub xi_grid: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// One per interval.
    pub inputs: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub total_time: f64,
    /// Progress rate at each node.
    pub xidot: Vec<f64>,
    pub report: SolveReport,
}

impl SpatialTrajectory {
    /// Checks the trajectory invariants against a model, spline and
    /// corridor; returns one message per failure.
    pub fn verify<M: DynamicsModel>(
        &self,
        model: &M,
        spline: &PHSpline,
        corridor: &Corridor,
        config: &TranscriptionConfig,
    ) -> Vec<String> {
        let mut fails = Vec::new();
        let nodes = self.states.len();
        let m = spline.num_segments();
        if m != corridor.num_regions() {
            fails.push(format!("spline has {m} segments, corridor has {} regions", corridor.num_regions()));
            return fails;
        }
        let n = self.nodes_per_segment;
        if n < 1 || nodes != m * n + 1 || self.xi_grid.len() != nodes || self.times.len() != nodes || self.inputs.len() + 1 != nodes {
            fails.push(format!(
                "grid shape mismatch: {nodes} states, {} xi, {} times, {} inputs for {m} segments of {n} intervals",
                self.xi_grid.len(),
                self.times.len(),
                self.inputs.len()
            ));
            return fails;
        }
        if self.states.iter().any(|x| x.len() != model.nx()) || self.inputs.iter().any(|u| u.len() != model.nu()) {
            fails.push(format!("state or input width does not match {}", model.name()));
            return fails;
        }
        for (k, &xi) in self.xi_grid.iter().enumerate() {
            if (xi - k as f64 / n as f64).abs() > 1e-12 {
                fails.push(format!("node {k}: xi {xi} is off the uniform grid"));
            }
        }
        if self.times[0].abs() > 1e-12 {
            fails.push(format!("node 0: time {} is not zero", self.times[0]));
        }
        for k in 1..nodes {
            if !(self.times[k] > self.times[k - 1]) {
                fails.push(format!("node {k}: time {} does not increase", self.times[k]));
            }
        }
        if self.total_time != self.times[nodes - 1] {
            fails.push(format!("total_time {} differs from the last node time", self.total_time));
        }
        for (k, x) in self.states.iter().enumerate() {
            let p = model.output(x);
            let regions = if k % n == 0 && k > 0 && k < nodes - 1 { vec![k / n - 1, k / n] } else { vec![(k / n).min(m - 1)] };
            for r in regions {
                let e = corridor.region(r).max_excess(p);
                if e > FEASIBILITY_TOL {
                    fails.push(format!("node {k}: position leaves region {} by {e:e}", r + 1));
                }
            }
        }
        let (slo, shi) = model.state_bounds();
        for (k, x) in self.states.iter().enumerate() {
            for i in 0..model.nx() {
                if x[i] < slo[i] - FEASIBILITY_TOL || x[i] > shi[i] + FEASIBILITY_TOL || !x[i].is_finite() {
                    fails.push(format!("node {k}: state {i} = {} violates [{}, {}]", x[i], slo[i], shi[i]));
                }
            }
        }
        let (ulo, uhi) = model.input_bounds();
        for (k, u) in self.inputs.iter().enumerate() {
            for i in 0..model.nu() {
                if u[i] < ulo[i] - FEASIBILITY_TOL || u[i] > uhi[i] + FEASIBILITY_TOL || !u[i].is_finite() {
                    fails.push(format!("interval {k}: input {i} = {} violates [{}, {}]", u[i], ulo[i], uhi[i]));
                }
            }
        }
        let (plo, phi) = model.path_bounds();
        let mut c = vec![0.0; model.num_path_constraints()];
        for (k, x) in self.states.iter().enumerate() {
            model.path_constraints(x, &self.inputs[k.min(nodes - 2)], &mut c);
            for j in 0..c.len() {
                if c[j] < plo[j] - FEASIBILITY_TOL || c[j] > phi[j] + FEASIBILITY_TOL {
                    fails.push(format!("node {k}: path constraint {j} = {} violates [{}, {}]", c[j], plo[j], phi[j]));
                }
            }
        }
        let p_end = model.output(&self.states[nodes - 1]);
        let miss = geom::sub(p_end, corridor.goal()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if miss > config.terminal_tol + FEASIBILITY_TOL {
            fails.push(format!("final position misses the goal by {miss:e}"));
        }
        if fails.is_empty() {
            let dev = self.roundtrip(model, config);
            if !(dev <= ROUNDTRIP_TOL) {
                fails.push(format!("time-domain re-simulation deviates by {dev:e}"));
            }
        }
        fails
    }

    /// Largest state deviation of a time-domain re-simulation.
    pub fn roundtrip<M: DynamicsModel>(&self, model: &M, config: &TranscriptionConfig) -> f64 {
        spatial::roundtrip_check(model, &self.times, &self.states, &self.inputs, ROUNDTRIP_REFINE * config.substeps)
    }

    /// Fraction of intervals where some input or path constraint is within
    /// `tol` of a bound.
    pub fn saturation<M: DynamicsModel>(&self, model: &M, tol: f64) -> f64 {
        if self.inputs.is_empty() {
            return 0.0;
        }
        let (ulo, uhi) = model.input_bounds();
        let (plo, phi) = model.path_bounds();
        let mut c = vec![0.0; model.num_path_constraints()];
        let active = self
            .inputs
            .iter()
            .enumerate()
            .filter(|(k, u)| {
                let on_input = u.iter().enumerate().any(|(i, v)| (v - ulo[i]).abs() <= tol || (v - uhi[i]).abs() <= tol);
                model.path_constraints(&self.states[*k], u, &mut c);
                let on_path = c.iter().enumerate().any(|(j, v)| (v - plo[j]).abs() <= tol || (v - phi[j]).abs() <= tol);
                on_input || on_path
            })
            .count();
        active as f64 / self.inputs.len() as f64
    }

    /// CSV with columns `xi, t, x0.., u0..`; the last input row is
    /// repeated on the closing node.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let nx = self.states.first().map_or(0, |x| x.len());
        let nu = self.inputs.first().map_or(0, |u| u.len());
        let mut header = vec!["xi".to_string(), "t".to_string()];
        header.extend((0..nx).map(|i| format!("x{i}")));
        header.extend((0..nu).map(|i| format!("u{i}")));
        w.write_record(&header).expect("in-memory write");
        for k in 0..self.states.len() {
            let u = &self.inputs[k.min(self.inputs.len().saturating_sub(1))];
            let mut rec = vec![self.xi_grid[k].to_string(), self.times[k].to_string()];
            rec.extend(self.states[k].iter().map(|v| v.to_string()));
            rec.extend(u.iter().map(|v| v.to_string()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Replaces grid, times, states and inputs from CSV text.
    pub fn with_csv(mut self, text: &str) -> Result<Self, String> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| e.to_string())?.clone();
        let nx = header.iter().filter(|h| h.starts_with('x') && h.len() > 1 && h[1..].parse::<usize>().is_ok()).count();
        let nu = header.iter().filter(|h| h.starts_with('u')).count();
        if header.len() != 2 + nx + nu || &header[0] != "xi" || &header[1] != "t" {
            return Err(format!("unexpected trajectory header {:?}", header.iter().collect::<Vec<_>>()));
        }
        let (mut xi, mut t, mut xs, mut us) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| e.to_string())?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| format!("row {}: {e}", line + 1))?;
            if vals.len() != 2 + nx + nu {
                return Err(format!("row {} has {} fields", line + 1, vals.len()));
            }
            xi.push(vals[0]);
            t.push(vals[1]);
            xs.push(vals[2..2 + nx].to_vec());
            us.push(vals[2 + nx..].to_vec());
        }
        us.pop();
        self.total_time = t.last().copied().unwrap_or(0.0);
        self.xi_grid = xi;
        self.times = t;
        self.states = xs;
        self.inputs = us;
        Ok(self)
    }
}

/// Transcribes and solves, then verifies the result.
pub fn solve_min_time<M: DynamicsModel>(
    model: &M,
    spline: &PHSpline,
    corridor: &Corridor,
    x0: &[f64],
    terminal_mask: Option<&[Option<f64>]>,
    config: &TranscriptionConfig,
) -> Result<SpatialTrajectory, OcpError> {
    let problem = Transcription::new(model, spline, corridor, x0, terminal_mask, config)?;
    let guess = problem.initial_guess(spline);
    // restoration: reach the feasible set before minimising time
    let (start, restoration) = nlp::minimize(&nlp::Feasibility(&problem), &guess, &config.nlp)?;
    log::info!(
        "stage 2 restoration: {:?} after {} outer / {} inner iterations, violation {:e}",
        restoration.status,
        restoration.iterations,
        restoration.inner_iterations,
        restoration.max_violation
    );
    let (z, report) = nlp::minimize(&problem, &start, &config.nlp)?;
    let traj = problem.trajectory(&z, report.clone());

    let feasible = report.max_violation <= config.nlp.tol_feas;
    if !report.converged() && !feasible {
        // forward progress pinned at the floor over consecutive nodes
        let floor = config.xidot_min * (1.0 + 1e-3) + 1e-9;
        if let Some(k) = (1..traj.xidot.len()).find(|&k| traj.xidot[k] <= floor && traj.xidot[k - 1] <= floor) {
            return Err(OcpError::ForwardProgress { node: k - 1, xidot: traj.xidot[k - 1], report: Box::new(report) });
        }
        let (node, worst) = match report.worst_constraint {
            Some(row) => {
                let (k, text) = problem.describe_row(row);
                (Some(k), text)
            }
            None => (None, "none".to_string()),
        };
        return Err(OcpError::NotConverged {
            status: report.status,
            iterations: report.iterations,
            node,
            worst,
            violation: report.max_violation,
            report: Box::new(report),
        });
    }
    if !report.converged() {
        log::warn!(
            "stage 2 stopped with status {:?} at a feasible point (violation {:e}, residual {:e})",
            report.status,
            report.max_violation,
            report.residual
        );
    }
    let failures = traj.verify(model, spline, corridor, config);
    if !failures.is_empty() {
        return Err(OcpError::Verification { failures, trajectory: Box::new(traj) });
    }
    Ok(traj)
}
