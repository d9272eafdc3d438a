//! Stage 1: a C³-joined PH spline inside a corridor.
//!
//! Segment `k` of the spline lives on the local parameter `ξ - k` and is
//! paired with region `k` of the corridor. Joins match the quaternion
//! polynomial up to its third derivative, which makes σ, the frame and χ
//! twice continuously differentiable. For degree 4 this leaves the last
//! tuple of every segment after the first as its only free coefficients:
//!
//! ```text
//! b0 = a4
//! b1 = 2 a4 - a3
//! b2 = 4 a4 - 4 a3 + a2
//! b3 = 8 a4 - 12 a3 + 6 a2 - a1
//! ```
//!
//! The free vector holds tuples 1..=4 of segment 0 followed by tuple 4 of
//! each later segment. Tuple 0 of segment 0 is the start frame times
//! `start_scale`; with a goal frame, tuple 4 of the last segment is the goal
//! frame times `goal_scale` and drops out of the free vector.

use crate::corridor::Corridor;
use crate::geom::{self, Vec3};
use crate::nlp::{minimize, NlpError, NlpOptions, NlpProblem, SolveReport, SolveStatus};
use crate::ph::{self, FrameSample, PHSegment, PhError, QuaternionPolynomial};
use crate::scalar::{jacobian, Dual, Jet, Real, LANES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

/// Quaternion polynomial degree used by every spline.
pub const DEGREE: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("segment {segment}: {source}")]
    Segment { segment: usize, source: PhError },
    #[error("free coefficient vector has length {got}, expected {expected}")]
    Layout { expected: usize, got: usize },
    #[error("spline needs at least one segment")]
    Empty,
    #[error("segments must share degree {expected}, segment {segment} has degree {got}")]
    Degree { segment: usize, expected: usize, got: usize },
    #[error("global parameter {xi} is outside [0, {m}]")]
    Domain { xi: f64, m: usize },
    #[error("stage-1 problem is infeasible: worst constraint is {worst} (violation {violation:e})")]
    Infeasible { worst: String, violation: f64, report: Box<SolveReport> },
    #[error("stage-1 solver did not converge: {status:?} after {iterations} outer iterations, violation {violation:e}")]
    NotConverged { status: SolveStatus, iterations: usize, violation: f64, report: Box<SolveReport> },
    #[error("stage-1 solver: {0}")]
    Solver(#[from] NlpError),
    #[error("cannot read spline file: {0}")]
    Io(String),
    #[error("cannot parse spline: {0}")]
    Parse(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    ArcLength,
    Energy,
    Twist,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::ArcLength, Criterion::Energy, Criterion::Twist];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::ArcLength => "arc_length",
            Criterion::Energy => "energy",
            Criterion::Twist => "twist",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "arc_length" => Ok(Criterion::ArcLength),
            "energy" => Ok(Criterion::Energy),
            "twist" => Ok(Criterion::Twist),
            other => Err(format!("unknown criterion `{other}` (expected arc_length, energy or twist)")),
        }
    }
}

/// Arc length, total frame energy `∫|χ|²` and twist energy `∫χ1²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Functionals {
    pub arc_length: f64,
    pub energy: f64,
    pub twist: f64,
}

impl Functionals {
    pub fn get(&self, c: Criterion) -> f64 {
        match c {
            Criterion::ArcLength => self.arc_length,
            Criterion::Energy => self.energy,
            Criterion::Twist => self.twist,
        }
    }
}

/// Net degrees of freedom of a degree-4 spline after C³ elimination:
/// `20 + 4(m - 1)`, minus 4 per fixed end frame, minus 3 for the endpoint
/// equality.
pub fn coefficient_ledger(m: usize, fixed_start: bool, fixed_goal_frame: bool, endpoint_constrained: bool) -> i64 {
    let mut dof = 20 + 4 * (m as i64 - 1);
    if fixed_start {
        dof -= 4;
    }
    if fixed_goal_frame {
        dof -= 4;
    }
    if endpoint_constrained {
        dof -= 3;
    }
    dof
}

/// Length of the free vector for `m` segments with a fixed start frame.
pub fn free_len(m: usize, fixed_goal_frame: bool) -> usize {
    let base = 16 + 4 * (m - 1);
    if fixed_goal_frame {
        base - 4
    } else {
        base
    }
}

/// C³ continuation of a degree-4 segment: tuples 0..=3 of the next one.
pub fn continue_tuples<T: Real>(a: &[[T; 4]]) -> [[T; 4]; 4] {
    let mut b = [[T::zero(); 4]; 4];
    for c in 0..4 {
        let (a1, a2, a3, a4) = (a[1][c], a[2][c], a[3][c], a[4][c]);
        b[0][c] = a4;
        b[1][c] = a4 * 2.0 - a3;
        b[2][c] = a4 * 4.0 - a3 * 4.0 + a2;
        b[3][c] = a4 * 8.0 - a3 * 12.0 + a2 * 6.0 - a1;
    }
    b
}

/// Maps a free vector to the full tuple set and control points.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineLayout {
    pub segments: usize,
    pub start: Vec3,
    /// Scaled start tuple (tuple 0 of segment 0).
    pub start_tuple: [f64; 4],
    /// Scaled goal tuple (tuple 4 of the last segment), if fixed.
    pub goal_tuple: Option<[f64; 4]>,
}

impl SplineLayout {
    pub fn new(corridor: &Corridor, config: &SplineConfig) -> Self {
        let start_q = corridor.start_frame_or_default();
        let start_tuple = scaled(start_q, config.start_scale);
        let goal_tuple = corridor.goal_frame().map(|g| {
            // pick the sign agreeing with the last chord
            let w = corridor.waypoints();
            let chord = geom::quat_from_x_to(geom::sub(w[w.len() - 1], w[w.len() - 2]));
            let g = if geom::qdot(g, chord) < 0.0 { [-g[0], -g[1], -g[2], -g[3]] } else { g };
            scaled(g, config.goal_scale)
        });
        Self {
            segments: corridor.num_regions(),
            start: corridor.start(),
            start_tuple,
            goal_tuple,
        }
    }

    pub fn len(&self) -> usize {
        free_len(self.segments, self.goal_tuple.is_some())
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn check(&self, free: &[f64]) -> Result<(), SplineError> {
        if free.len() != self.len() {
            return Err(SplineError::Layout { expected: self.len(), got: free.len() });
        }
        Ok(())
    }

    /// All `m` tuple sets from the free vector.
    pub fn tuples<T: Real>(&self, free: &[T]) -> Vec<[[T; 4]; 5]> {
        let m = self.segments;
        let lift = |q: [f64; 4]| [T::cst(q[0]), T::cst(q[1]), T::cst(q[2]), T::cst(q[3])];
        let take = |at: usize| [free[at], free[at + 1], free[at + 2], free[at + 3]];
        let mut out = Vec::with_capacity(m);
        let mut first = [lift(self.start_tuple); 5];
        let fixed_goal_here = m == 1 && self.goal_tuple.is_some();
        let mut cursor = 0;
        for slot in first.iter_mut().skip(1).take(if fixed_goal_here { 3 } else { 4 }) {
            *slot = take(cursor);
            cursor += 4;
        }
        if fixed_goal_here {
            first[4] = lift(self.goal_tuple.unwrap());
        }
        out.push(first);
        for k in 1..m {
            let prev = out[k - 1];
            let b = continue_tuples(&prev);
            let last = if k == m - 1 && self.goal_tuple.is_some() {
                lift(self.goal_tuple.unwrap())
            } else {
                let t = take(cursor);
                cursor += 4;
                t
            };
            out.push([b[0], b[1], b[2], b[3], last]);
        }
        out
    }

    /// Control points of every segment, origins chained.
    pub fn control_points<T: Real>(&self, free: &[T]) -> Vec<Vec<[T; 3]>> {
        let mut origin = geom::lift::<T>(self.start);
        self.tuples(free)
            .into_iter()
            .map(|t| {
                let z = QuaternionPolynomial::new(t.to_vec()).expect("five tuples");
                let pts = ph::control_points(&z, origin);
                origin = pts[pts.len() - 1];
                pts
            })
            .collect()
    }

    pub fn assemble(&self, free: &[f64]) -> Result<PHSpline, SplineError> {
        self.check(free)?;
        PHSpline::from_tuples(self.start, self.tuples(free).iter().map(|t| t.to_vec()).collect())
    }
}

fn scaled(q: [f64; 4], s: f64) -> [f64; 4] {
    [q[0] * s, q[1] * s, q[2] * s, q[3] * s]
}

/// Concatenated PH segments on the global parameter `ξ ∈ [0, m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PHSpline {
    segments: Vec<PHSegment>,
}

#[derive(Serialize, Deserialize)]
struct SegmentFile {
    tuples: Vec<[f64; 4]>,
    origin: Vec3,
}

#[derive(Serialize, Deserialize)]
struct SplineFile {
    n: usize,
    m: usize,
    segments: Vec<SegmentFile>,
}

/// Two-sided mismatches at the joins of a spline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JoinReport {
    /// Position gap.
    pub position: f64,
    /// Largest gap in Z, Z', Z'', Z'''.
    pub quaternion: [f64; 4],
    /// σ and its first two derivatives.
    pub sigma: [f64; 3],
    /// Frame entries and their first two derivatives.
    pub rotation: [f64; 3],
    /// χ and its first two derivatives.
    pub chi: [f64; 3],
}

impl JoinReport {
    /// Largest mismatch of σ, R, χ and their first two derivatives.
    pub fn max_frame_mismatch(&self) -> f64 {
        self.sigma.iter().chain(&self.rotation).chain(&self.chi).fold(0.0, |m, v| m.max(*v))
    }

    pub fn max_quaternion_mismatch(&self) -> f64 {
        self.quaternion.iter().fold(0.0, |m, v| m.max(*v))
    }
}

impl PHSpline {
    pub fn new(segments: Vec<PHSegment>) -> Result<Self, SplineError> {
        let Some(first) = segments.first() else {
            return Err(SplineError::Empty);
        };
        let n = first.quaternion().degree();
        for (k, s) in segments.iter().enumerate() {
            if s.quaternion().degree() != n {
                return Err(SplineError::Degree { segment: k, expected: n, got: s.quaternion().degree() });
            }
        }
        Ok(Self { segments })
    }

    /// Builds segments from tuples, chaining origins from `start`.
    pub fn from_tuples(start: Vec3, tuples: Vec<Vec<[f64; 4]>>) -> Result<Self, SplineError> {
        let mut origin = start;
        let mut segments = Vec::with_capacity(tuples.len());
        for (k, t) in tuples.into_iter().enumerate() {
            let z = QuaternionPolynomial::new(t).map_err(|source| SplineError::Segment { segment: k, source })?;
            let seg = PHSegment::new(z, origin).map_err(|source| SplineError::Segment { segment: k, source })?;
            origin = seg.end_point();
            segments.push(seg);
        }
        Self::new(segments)
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn degree(&self) -> usize {
        self.segments[0].quaternion().degree()
    }

    pub fn segments(&self) -> &[PHSegment] {
        &self.segments
    }

    pub fn start(&self) -> Vec3 {
        self.segments[0].origin()
    }

    pub fn end_point(&self) -> Vec3 {
        self.segments[self.segments.len() - 1].end_point()
    }

    /// `(segment, local parameter)`; integer `ξ < m` belongs to the segment
    /// starting there.
    pub fn locate(&self, xi: f64) -> Result<(usize, f64), SplineError> {
        let m = self.segments.len();
        if !(0.0..=m as f64).contains(&xi) {
            return Err(SplineError::Domain { xi, m });
        }
        let k = (xi.floor() as usize).min(m - 1);
        Ok((k, (xi - k as f64).clamp(0.0, 1.0)))
    }

    pub fn position(&self, xi: f64) -> Result<Vec3, SplineError> {
        let (k, t) = self.locate(xi)?;
        self.segments[k].position(t).map_err(|source| SplineError::Segment { segment: k, source })
    }

    pub fn frame(&self, xi: f64) -> Result<FrameSample, SplineError> {
        let (k, t) = self.locate(xi)?;
        self.segments[k].frame(t).map_err(|source| SplineError::Segment { segment: k, source })
    }

    pub fn arc_length(&self) -> f64 {
        self.segments.iter().map(|s| s.arc_length()).sum()
    }

    pub fn functionals(&self) -> Functionals {
        let mut f = Functionals { arc_length: 0.0, energy: 0.0, twist: 0.0 };
        for s in &self.segments {
            f.arc_length += s.arc_length();
            let (e, tw) = s.chi_energy();
            f.energy += e;
            f.twist += tw;
        }
        f
    }

    /// Control points of every segment.
    pub fn control_points(&self) -> Vec<&[Vec3]> {
        self.segments.iter().map(|s| s.control_points()).collect()
    }

    /// Worst two-sided mismatches over all joins.
    pub fn join_report(&self) -> JoinReport {
        let mut r = JoinReport::default();
        for k in 1..self.segments.len() {
            let a = &self.segments[k - 1];
            let b = &self.segments[k];
            r.position = r.position.max(geom::norm(geom::sub(a.end_point(), b.origin())));
            let mut za = a.quaternion().clone();
            let mut zb = b.quaternion().clone();
            for d in 0..4 {
                let (ea, eb) = (za.at(1.0), zb.at(0.0));
                let gap = (0..4).fold(0.0f64, |m, c| m.max((ea[c] - eb[c]).abs()));
                r.quaternion[d] = r.quaternion[d].max(gap);
                za = za.derivative();
                zb = zb.derivative();
            }
            let ja = a.frame_jet(1.0);
            let jb = b.frame_jet(0.0);
            let gaps = |x: Jet, y: Jet| [(x.v - y.v).abs(), (x.d1 - y.d1).abs(), (x.d2 - y.d2).abs()];
            let fold = |slot: &mut [f64; 3], x: Jet, y: Jet| {
                for (s, g) in slot.iter_mut().zip(gaps(x, y)) {
                    *s = s.max(g);
                }
            };
            fold(&mut r.sigma, ja.sigma, jb.sigma);
            for c in 0..3 {
                for i in 0..3 {
                    fold(&mut r.rotation, ja.rotation[c][i], jb.rotation[c][i]);
                }
                fold(&mut r.chi, ja.chi[c], jb.chi[c]);
            }
        }
        r
    }

    pub fn to_json(&self) -> String {
        let file = SplineFile {
            n: self.degree(),
            m: self.segments.len(),
            segments: self
                .segments
                .iter()
                .map(|s| SegmentFile { tuples: s.quaternion().tuples().to_vec(), origin: s.origin() })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("spline serialises")
    }

    pub fn from_json_str(text: &str) -> Result<Self, SplineError> {
        let file: SplineFile = serde_json::from_str(text).map_err(|e| SplineError::Parse(e.to_string()))?;
        if file.m != file.segments.len() {
            return Err(SplineError::Parse(format!("m = {} but {} segments given", file.m, file.segments.len())));
        }
        let mut segments = Vec::with_capacity(file.m);
        for (k, s) in file.segments.into_iter().enumerate() {
            if s.tuples.len() != file.n + 1 {
                return Err(SplineError::Parse(format!("segment {k} has {} tuples, expected {}", s.tuples.len(), file.n + 1)));
            }
            let z = QuaternionPolynomial::new(s.tuples).map_err(|source| SplineError::Segment { segment: k, source })?;
            segments.push(PHSegment::new(z, s.origin).map_err(|source| SplineError::Segment { segment: k, source })?);
        }
        Self::new(segments)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SplineError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| SplineError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json_str(&text)
    }

    /// Largest halfspace excess of any control point over its region.
    pub fn hull_excess(&self, corridor: &Corridor) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for (k, s) in self.segments.iter().enumerate() {
            let region = corridor.region(k.min(corridor.num_regions() - 1));
            for p in s.control_points() {
                worst = worst.max(region.max_excess(*p));
            }
        }
        worst
    }

    /// Largest halfspace excess of `samples` curve points per segment.
    pub fn sampled_excess(&self, corridor: &Corridor, samples: usize) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for (k, s) in self.segments.iter().enumerate() {
            let region = corridor.region(k.min(corridor.num_regions() - 1));
            for i in 0..samples {
                let t = i as f64 / (samples - 1).max(1) as f64;
                let p = s.position(t).expect("in range");
                worst = worst.max(region.max_excess(p));
            }
        }
        worst
    }
}

/// Stage-1 options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplineConfig {
    /// Scale of the start tuple; sets the boundary parametric speed.
    pub start_scale: f64,
    pub goal_scale: f64,
    /// Lower bound on every Bernstein coefficient of σ.
    pub sigma_min: f64,
    /// Control points are kept this far inside their halfspaces.
    pub hull_margin: f64,
    /// Relative uniform jitter applied to the initial guess.
    pub jitter: f64,
    pub seed: u64,
    pub nlp: NlpOptions,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            start_scale: 1.0,
            goal_scale: 1.0,
            sigma_min: 1e-3,
            hull_margin: 2e-6,
            jitter: 1e-3,
            seed: 0,
            nlp: NlpOptions::default(),
        }
    }
}

/// Build the spline for `free` using the corridor's start (and goal) frame.
pub fn assemble_spline(free: &[f64], corridor: &Corridor, config: &SplineConfig) -> Result<PHSpline, SplineError> {
    SplineLayout::new(corridor, config).assemble(free)
}

/// Control points of the spline assembled from `free`.
pub fn spline_control_points(
    free: &[f64],
    corridor: &Corridor,
    config: &SplineConfig,
) -> Result<Vec<Vec<Vec3>>, SplineError> {
    let layout = SplineLayout::new(corridor, config);
    layout.check(free)?;
    Ok(layout.control_points(free))
}

/// Deterministic initial guess.
///
/// Each segment targets the quaternion taking x onto its chord, scaled so
/// that σ matches the chord length. Because the join conditions extrapolate
/// tuples from one segment into the next, the free vector is the
/// least-squares fit of all tuples to these targets rather than the targets
/// themselves. A relative jitter from a seeded generator is applied last.
pub fn initial_free(corridor: &Corridor, config: &SplineConfig) -> Vec<f64> {
    let layout = SplineLayout::new(corridor, config);
    let w = corridor.waypoints();
    let m = layout.segments;
    let mut targets: Vec<[f64; 4]> = Vec::with_capacity(m);
    let mut prev = layout.start_tuple;
    for k in 0..m {
        let d = geom::sub(w[k + 1], w[k]);
        let mut q = geom::quat_from_x_to(d);
        if geom::qdot(q, prev) < 0.0 {
            q = [-q[0], -q[1], -q[2], -q[3]];
        }
        prev = q;
        targets.push(scaled(q, geom::norm(d).max(1e-6).sqrt()));
    }
    let mut free = Vec::with_capacity(layout.len());
    let first_count = if m == 1 && layout.goal_tuple.is_some() { 3 } else { 4 };
    for _ in 0..first_count {
        free.extend_from_slice(&targets[0]);
    }
    for (k, t) in targets.iter().enumerate().skip(1) {
        if k == m - 1 && layout.goal_tuple.is_some() {
            break;
        }
        free.extend_from_slice(t);
    }
    if m > 1 {
        let fit = GuessFit { layout: &layout, targets: &targets };
        let opts = NlpOptions { tol_opt: 1e-10, max_inner: 2000, ..NlpOptions::default() };
        if let Ok((x, _)) = minimize(&fit, &free, &opts) {
            free = x;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for v in free.iter_mut() {
        let r: f64 = rng.gen_range(-1.0..=1.0);
        *v *= 1.0 + config.jitter * r;
    }
    free
}

/// Least-squares fit of every tuple to its segment target.
struct GuessFit<'a> {
    layout: &'a SplineLayout,
    targets: &'a [[f64; 4]],
}

impl GuessFit<'_> {
    fn eval<T: Real>(&self, x: &[T]) -> T {
        let mut acc = T::zero();
        for (k, t) in self.layout.tuples(x).iter().enumerate() {
            for tuple in t {
                for c in 0..4 {
                    let d = tuple[c] - self.targets[k][c];
                    acc += d * d;
                }
            }
        }
        acc
    }
}

impl NlpProblem for GuessFit<'_> {
    fn num_variables(&self) -> usize {
        self.layout.len()
    }
    fn objective(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        let mut v = [0.0];
        jacobian::<LANES, _>(x, 1, |xd: &[Dual<LANES>], out| out[0] = self.eval(xd), &mut v, grad);
    }
}

/// Stage-1 program: minimise a criterion subject to the endpoint equality,
/// convex-hull containment and σ regularity.
pub struct Stage1Problem<'a> {
    corridor: &'a Corridor,
    layout: SplineLayout,
    criterion: Criterion,
    sigma_min: f64,
    margin: f64,
    /// `(segment, point)` pairs constrained to their region.
    hull_points: Vec<(usize, usize)>,
    rows: usize,
}

impl<'a> Stage1Problem<'a> {
    pub fn new(corridor: &'a Corridor, criterion: Criterion, config: &SplineConfig) -> Self {
        let layout = SplineLayout::new(corridor, config);
        let m = layout.segments;
        let npts = 2 * DEGREE + 2;
        let mut hull_points = Vec::new();
        let mut rows = 3;
        for k in 0..m {
            for i in 0..npts {
                // the start point is fixed and the goal point is pinned by
                // the endpoint equality
                if (k == 0 && i == 0) || (k == m - 1 && i == npts - 1) {
                    continue;
                }
                hull_points.push((k, i));
                rows += corridor.region(k).halfspaces().len();
            }
        }
        rows += m * (2 * DEGREE + 1);
        Self {
            corridor,
            layout,
            criterion,
            sigma_min: config.sigma_min,
            margin: config.hull_margin,
            hull_points,
            rows,
        }
    }

    pub fn layout(&self) -> &SplineLayout {
        &self.layout
    }

    fn objective_generic<T: Real>(&self, x: &[T]) -> T {
        let mut acc = T::zero();
        for t in self.layout.tuples(x) {
            let z = QuaternionPolynomial::new(t.to_vec()).expect("five tuples");
            match self.criterion {
                Criterion::ArcLength => acc += ph::parametric_speed(&z).integral(),
                Criterion::Energy => acc += ph::chi_energy_generic(&z).0,
                Criterion::Twist => acc += ph::chi_energy_generic(&z).1,
            }
        }
        acc
    }

    fn constraints_generic<T: Real>(&self, x: &[T], out: &mut [T]) {
        let tuples = self.layout.tuples(x);
        let pts = self.layout.control_points(x);
        let goal = self.corridor.goal();
        let end = pts[pts.len() - 1][2 * DEGREE + 1];
        for c in 0..3 {
            out[c] = end[c] - goal[c];
        }
        let mut r = 3;
        for &(k, i) in &self.hull_points {
            let p = pts[k][i];
            for h in self.corridor.region(k).halfspaces() {
                out[r] = geom::dot(geom::lift::<T>(h.a), p) - (h.b - self.margin);
                r += 1;
            }
        }
        for t in &tuples {
            let z = QuaternionPolynomial::new(t.to_vec()).expect("five tuples");
            for &s in ph::parametric_speed(&z).coeffs() {
                out[r] = -s + self.sigma_min;
                r += 1;
            }
        }
        debug_assert_eq!(r, self.rows);
    }

    /// Human-readable label of constraint row `row`.
    pub fn describe_row(&self, row: usize) -> String {
        if row < 3 {
            return format!("endpoint {}", ["x", "y", "z"][row]);
        }
        let mut r = 3;
        for &(k, i) in &self.hull_points {
            let n = self.corridor.region(k).halfspaces().len();
            if row < r + n {
                return format!(
                    "segment {} control point {} against region {} halfspace {}",
                    k + 1,
                    i,
                    k + 1,
                    row - r + 1
                );
            }
            r += n;
        }
        let per = 2 * DEGREE + 1;
        let idx = row - r;
        format!("segment {} sigma coefficient {} >= sigma_min", idx / per + 1, idx % per)
    }
}

impl NlpProblem for Stage1Problem<'_> {
    fn num_variables(&self) -> usize {
        self.layout.len()
    }

    fn num_equalities(&self) -> usize {
        3
    }

    fn num_inequalities(&self) -> usize {
        self.rows - 3
    }

    fn objective(&self, x: &[f64]) -> f64 {
        self.objective_generic(x)
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        let mut v = [0.0];
        jacobian::<LANES, _>(x, 1, |xd: &[Dual<LANES>], out| out[0] = self.objective_generic(xd), &mut v, grad);
    }

    fn constraints(&self, x: &[f64], out: &mut [f64]) {
        self.constraints_generic(x, out);
    }

    fn jacobian_structure(&self) -> Vec<(usize, usize)> {
        let n = self.layout.len();
        (0..self.rows).flat_map(|r| (0..n).map(move |c| (r, c))).collect()
    }

    fn jacobian(&self, x: &[f64], values: &mut [f64]) {
        let mut v = vec![0.0; self.rows];
        jacobian::<LANES, _>(x, self.rows, |xd: &[Dual<LANES>], out| self.constraints_generic(xd, out), &mut v, values);
    }
}

/// Outcome of a stage-1 solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineReport {
    pub criterion: Criterion,
    pub initial_objective: f64,
    /// Largest constraint violation of the initial guess.
    pub initial_violation: f64,
    pub objective: f64,
    pub functionals: Functionals,
    /// Net degrees of freedom of the configuration.
    pub degrees_of_freedom: i64,
    pub free_coefficients: usize,
    pub max_hull_excess: f64,
    pub solver: SolveReport,
}

/// Solve stage 1 for `criterion`.
pub fn optimize_spline(
    corridor: &Corridor,
    criterion: Criterion,
    config: &SplineConfig,
) -> Result<(PHSpline, Vec<f64>, SplineReport), SplineError> {
    let problem = Stage1Problem::new(corridor, criterion, config);
    let x0 = initial_free(corridor, config);
    let initial_objective = problem.objective(&x0);
    let initial_violation = {
        let mut c = vec![0.0; problem.num_equalities() + problem.num_inequalities()];
        problem.constraints(&x0, &mut c);
        let (eq, ineq) = c.split_at(problem.num_equalities());
        eq.iter().map(|v| v.abs()).chain(ineq.iter().map(|v| v.max(0.0))).fold(0.0, f64::max)
    };
    let (x, solver) = minimize(&problem, &x0, &config.nlp)?;
    log::info!(
        "stage 1 ({criterion}): {:?} after {} outer / {} inner iterations, objective {:.6}",
        solver.status,
        solver.iterations,
        solver.inner_iterations,
        solver.objective
    );
    match solver.status {
        SolveStatus::Converged => {}
        SolveStatus::Infeasible => {
            let worst = solver.worst_constraint.map(|r| problem.describe_row(r)).unwrap_or_else(|| "unknown".into());
            return Err(SplineError::Infeasible { worst, violation: solver.max_violation, report: Box::new(solver) });
        }
        status => {
            // accept a stalled but feasible first-order point
            if solver.max_violation > config.nlp.tol_feas || !solver.objective.is_finite() {
                let worst = solver.worst_constraint.map(|r| problem.describe_row(r)).unwrap_or_else(|| "unknown".into());
                if status == SolveStatus::MaxIter {
                    return Err(SplineError::Infeasible { worst, violation: solver.max_violation, report: Box::new(solver) });
                }
                return Err(SplineError::NotConverged {
                    status,
                    iterations: solver.iterations,
                    violation: solver.max_violation,
                    report: Box::new(solver),
                });
            }
            log::warn!("stage 1 stopped with status {status:?} at a feasible point");
        }
    }
    let spline = problem.layout().assemble(&x)?;
    let report = SplineReport {
        criterion,
        initial_objective,
        initial_violation,
        objective: solver.objective,
        functionals: spline.functionals(),
        degrees_of_freedom: coefficient_ledger(
            corridor.num_regions(),
            true,
            corridor.goal_frame().is_some(),
            true,
        ),
        free_coefficients: x.len(),
        max_hull_excess: spline.hull_excess(corridor),
        solver,
    };
    Ok((spline, x, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corridor::{box_split, ConvexRegion};

    fn unit_box_corridor() -> Corridor {
        Corridor::new(vec![ConvexRegion::from_box([0.0; 3], [1.0; 3])], [0.1, 0.5, 0.5], [0.9, 0.5, 0.5], None, None)
            .unwrap()
    }

    #[test]
    fn ledger_examples() {
        assert_eq!(coefficient_ledger(1, true, true, true), 9);
        assert_eq!(coefficient_ledger(4, true, true, true), 21);
        assert_eq!(coefficient_ledger(2, false, false, false), 24);
        for m in 1..=6 {
            assert_eq!(coefficient_ledger(m, true, true, true), 4 * m as i64 + 5);
        }
        assert_eq!(free_len(3, false), 24);
        assert_eq!(free_len(3, true), 20);
    }

    #[test]
    fn identity_free_vector_gives_unit_line() {
        let c = Corridor::new(vec![ConvexRegion::from_box([0.0; 3], [2.0; 3])], [0.0; 3], [1.0, 0.0, 0.0], None, None).unwrap();
        let free = [1.0, 0.0, 0.0, 0.0].repeat(4);
        let s = assemble_spline(&free, &c, &SplineConfig::default()).unwrap();
        assert!(s.segments()[0].sigma().coeffs().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!((s.arc_length() - 1.0).abs() < 1e-15);
        let pts = s.control_points();
        assert_eq!(pts[0].len(), 10);
        for (i, p) in pts[0].iter().enumerate() {
            assert!((p[0] - i as f64 / 9.0).abs() < 1e-14 && p[1] == 0.0 && p[2] == 0.0);
        }
    }

    #[test]
    fn layout_lengths_and_goal_frame() {
        let regions = box_split(&ConvexRegion::from_box([0.0; 3], [3.0, 1.0, 1.0]), 2).unwrap();
        let c = Corridor::new(regions, [0.1, 0.5, 0.5], [2.9, 0.5, 0.5], None, Some([1.0, 0.0, 0.0, 0.0])).unwrap();
        let cfg = SplineConfig::default();
        let layout = SplineLayout::new(&c, &cfg);
        assert_eq!(layout.len(), 12 + 4 * 2);
        let free = initial_free(&c, &cfg);
        let t = layout.tuples(&free);
        assert_eq!(t[2][4], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(t[0][0], layout.start_tuple);
        assert!(matches!(layout.assemble(&free[1..]), Err(SplineError::Layout { .. })));

        let c1 = Corridor::new(vec![ConvexRegion::from_box([0.0; 3], [1.0; 3])], [0.1; 3], [0.9; 3], None, Some([1.0, 0.0, 0.0, 0.0]))
            .unwrap();
        let l1 = SplineLayout::new(&c1, &cfg);
        assert_eq!(l1.len(), 12);
        let t1 = l1.tuples(&initial_free(&c1, &cfg));
        assert_eq!(t1[0][4], [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn joins_are_c3_and_chained() {
        let regions = box_split(&ConvexRegion::from_box([0.0; 3], [2.0, 1.0, 1.0]), 1).unwrap();
        let c = Corridor::new(regions, [0.1, 0.5, 0.5], [1.9, 0.5, 0.5], None, None).unwrap();
        let cfg = SplineConfig { jitter: 0.2, seed: 7, ..SplineConfig::default() };
        let free = initial_free(&c, &cfg);
        let s = assemble_spline(&free, &c, &cfg).unwrap();
        let j = s.join_report();
        assert!(j.position <= 1e-12);
        assert!(j.max_quaternion_mismatch() <= 1e-9, "{j:?}");
        assert!(j.max_frame_mismatch() <= 1e-6, "{j:?}");
        let pts = spline_control_points(&free, &c, &cfg).unwrap();
        assert_eq!(pts.len() * pts[0].len(), 2 * 10);
        assert_eq!(pts[1][0], pts[0][9]);

        // negative control: perturb an eliminated coefficient
        let mut tuples: Vec<Vec<[f64; 4]>> = s.segments().iter().map(|g| g.quaternion().tuples().to_vec()).collect();
        tuples[1][2][0] += 1e-3;
        let bad = PHSpline::from_tuples(s.start(), tuples).unwrap();
        assert!(bad.join_report().max_quaternion_mismatch() > 1e-6);
    }

    #[test]
    fn json_roundtrip() {
        let c = unit_box_corridor();
        let cfg = SplineConfig::default();
        let s = assemble_spline(&initial_free(&c, &cfg), &c, &cfg).unwrap();
        let back = PHSpline::from_json_str(&s.to_json()).unwrap();
        assert_eq!(s, back);
        assert!(PHSpline::from_json_str("{\"n\":4,\"m\":2,\"segments\":[]}").is_err());
    }

    #[test]
    fn straight_box_arc_length() {
        let c = unit_box_corridor();
        let (s, _, rep) = optimize_spline(&c, Criterion::ArcLength, &SplineConfig::default()).unwrap();
        assert!((rep.functionals.arc_length - 0.8).abs() <= 0.008, "{rep:?}");
        assert!(geom::norm(geom::sub(s.end_point(), c.goal())) <= 1e-6);
        assert!(rep.max_hull_excess <= 1e-6);
        assert!(rep.objective <= rep.initial_objective + 1e-9);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let regions = box_split(&ConvexRegion::from_box([0.0; 3], [2.0, 1.0, 1.0]), 1).unwrap();
        let c = Corridor::new(regions, [0.1, 0.5, 0.5], [1.9, 0.7, 0.4], None, None).unwrap();
        let cfg = SplineConfig { jitter: 0.1, ..SplineConfig::default() };
        for crit in Criterion::ALL {
            let p = Stage1Problem::new(&c, crit, &cfg);
            let x = initial_free(&c, &cfg);
            let e = crate::nlp::check_derivatives(&p, &x, 1e-6);
            assert!(e <= 1e-6, "{crit}: {e}");
        }
    }

    #[test]
    fn criterion_parsing() {
        for c in Criterion::ALL {
            assert_eq!(c.as_str().parse::<Criterion>().unwrap(), c);
        }
        assert!("curvature".parse::<Criterion>().is_err());
    }
}
