//! Free space as an ordered chain of overlapping convex polytopes.
//!
//! Halfspaces are stored normalised (`|a| = 1`), so membership tolerances
//! are distances. Region indices in the API are 0-based; error messages
//! number regions from 1.

use crate::geom::{self, Vec3};
use crate::nlp::{minimize, LinearProgram, NlpOptions};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Tolerance used when checking start/goal membership and LP probes.
pub const MEMBERSHIP_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorridorError {
    #[error("cannot read corridor file: {0}")]
    Io(String),
    #[error("cannot parse corridor: {0}")]
    Parse(String),
    #[error("corridor has no regions")]
    Empty,
    #[error("region {region}: {message}")]
    Shape { region: usize, message: String },
    #[error("region {region} is empty")]
    Infeasible { region: usize },
    #[error("region {region} is unbounded")]
    Unbounded { region: usize },
    #[error("non-overlapping chain: region {region} does not intersect region {}", region - 1)]
    Disjoint { region: usize },
    #[error("{which} {point:?} is outside region {region}")]
    Outside { which: &'static str, point: Vec3, region: usize },
    #[error("{which} frame must be a non-zero quaternion")]
    Frame { which: &'static str },
    #[error("path parameter {xi} is outside [0, {m}]")]
    Domain { xi: f64, m: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// `a · p <= b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Halfspace {
    pub a: Vec3,
    pub b: f64,
}

impl Halfspace {
    /// Signed distance of `p` past the boundary (positive outside).
    pub fn excess(&self, p: Vec3) -> f64 {
        geom::dot(self.a, p) - self.b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvexRegion {
    halfspaces: Vec<Halfspace>,
    vertices: Option<Vec<Vec3>>,
}

impl ConvexRegion {
    /// Normalises the halfspaces and checks that the region is nonempty
    /// and bounded. `index` (0-based) only labels errors.
    pub fn new(halfspaces: Vec<Halfspace>, vertices: Option<Vec<Vec3>>, index: usize) -> Result<Self, CorridorError> {
        let label = index + 1;
        if halfspaces.is_empty() {
            return Err(CorridorError::Unbounded { region: label });
        }
        let mut normalised = Vec::with_capacity(halfspaces.len());
        for (j, h) in halfspaces.iter().enumerate() {
            let n = geom::norm(h.a);
            if !(n > 0.0) || !n.is_finite() || !h.b.is_finite() {
                return Err(CorridorError::Shape {
                    region: label,
                    message: format!("halfspace {j} has a zero or non-finite normal"),
                });
            }
            normalised.push(Halfspace { a: geom::scale(h.a, 1.0 / n), b: h.b / n });
        }
        let region = Self { halfspaces: normalised, vertices };
        if let Some(vs) = &region.vertices {
            if let Some(v) = vs.iter().find(|v| !region.contains(**v, 1e-9)) {
                return Err(CorridorError::Shape {
                    region: label,
                    message: format!("vertex {v:?} violates the halfspaces"),
                });
            }
        }
        match region.chebyshev_center() {
            Some((_, r)) if r >= -MEMBERSHIP_TOL => {}
            _ => return Err(CorridorError::Infeasible { region: label }),
        }
        if !region.is_bounded() {
            return Err(CorridorError::Unbounded { region: label });
        }
        Ok(region)
    }

    /// Axis-aligned box `[lo, hi]` with its eight corners as vertices.
    pub fn from_box(lo: Vec3, hi: Vec3) -> Self {
        let mut halfspaces = Vec::with_capacity(6);
        for i in 0..3 {
            let mut a = [0.0; 3];
            a[i] = 1.0;
            halfspaces.push(Halfspace { a, b: hi[i] });
            let mut a = [0.0; 3];
            a[i] = -1.0;
            halfspaces.push(Halfspace { a, b: -lo[i] });
        }
        let mut vertices = Vec::with_capacity(8);
        for k in 0..8 {
            vertices.push([
                if k & 1 == 0 { lo[0] } else { hi[0] },
                if k & 2 == 0 { lo[1] } else { hi[1] },
                if k & 4 == 0 { lo[2] } else { hi[2] },
            ]);
        }
        Self { halfspaces, vertices: Some(vertices) }
    }

    pub fn halfspaces(&self) -> &[Halfspace] {
        &self.halfspaces
    }

    pub fn vertices(&self) -> Option<&[Vec3]> {
        self.vertices.as_deref()
    }

    pub fn contains(&self, p: Vec3, tol: f64) -> bool {
        self.halfspaces.iter().all(|h| h.excess(p) <= tol)
    }

    /// Largest halfspace excess at `p` (non-positive inside).
    pub fn max_excess(&self, p: Vec3) -> f64 {
        self.halfspaces.iter().map(|h| h.excess(p)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(lo, hi)` if every halfspace is a coordinate bound and each axis is
    /// bounded on both sides.
    pub fn as_box(&self) -> Option<(Vec3, Vec3)> {
        let mut lo = [f64::NEG_INFINITY; 3];
        let mut hi = [f64::INFINITY; 3];
        for h in &self.halfspaces {
            let axis = (0..3).find(|&i| (h.a[i].abs() - 1.0).abs() < 1e-12)?;
            if (0..3).any(|i| i != axis && h.a[i].abs() > 1e-12) {
                return None;
            }
            if h.a[axis] > 0.0 {
                hi[axis] = hi[axis].min(h.b);
            } else {
                lo[axis] = lo[axis].max(-h.b);
            }
        }
        if lo.iter().chain(&hi).all(|v| v.is_finite()) {
            Some((lo, hi))
        } else {
            None
        }
    }

    /// Chebyshev centre and radius (negative if empty).
    pub fn chebyshev_center(&self) -> Option<(Vec3, f64)> {
        chebyshev(&self.halfspaces, self.vertices.as_deref())
    }

    /// Point in both regions, if they intersect.
    ///
    /// The Chebyshev centre of an overlap is often not unique (thin slabs),
    /// so the returned point is the projection of the midpoint of the two
    /// region centres onto the overlap shrunk by half its inradius.
    pub fn intersection_point(&self, other: &Self) -> Option<Vec3> {
        let mut hs = self.halfspaces.clone();
        hs.extend_from_slice(&other.halfspaces);
        let (p0, r) = chebyshev(&hs, None)?;
        if r < -MEMBERSHIP_TOL {
            return None;
        }
        let target = geom::scale(geom::add(self.center(), other.center()), 0.5);
        let shrink = 0.5 * r.max(0.0);
        let problem = Projection { target, halfspaces: &hs, shrink };
        match minimize(&problem, &p0, &lp_options()) {
            Ok((p, _)) if hs.iter().all(|h| h.excess([p[0], p[1], p[2]]) <= MEMBERSHIP_TOL) => Some([p[0], p[1], p[2]]),
            _ => Some(p0),
        }
    }

    /// Centroid of the vertices, or the Chebyshev centre.
    pub fn center(&self) -> Vec3 {
        match &self.vertices {
            Some(vs) if !vs.is_empty() => {
                let mut c = [0.0; 3];
                for v in vs {
                    c = geom::add(c, *v);
                }
                geom::scale(c, 1.0 / vs.len() as f64)
            }
            _ => self.chebyshev_center().map(|(p, _)| p).unwrap_or([0.0; 3]),
        }
    }

    /// True iff the recession cone `{d : a·d <= 0}` is trivial.
    fn is_bounded(&self) -> bool {
        for axis in 0..3 {
            for sign in [1.0, -1.0] {
                let mut cost = vec![0.0; 3];
                cost[axis] = -sign;
                let lp = LinearProgram {
                    cost,
                    rows: self.halfspaces.iter().map(|h| h.a.to_vec()).collect(),
                    rhs: vec![0.0; self.halfspaces.len()],
                    lower: vec![-1.0; 3],
                    upper: vec![1.0; 3],
                };
                let Ok((d, _)) = minimize(&lp, &[0.0; 3], &lp_options()) else {
                    return false;
                };
                if sign * d[axis] > 1e-4 {
                    return false;
                }
            }
        }
        true
    }
}

/// `min |p - target|²` over halfspaces pulled in by `shrink`.
struct Projection<'a> {
    target: Vec3,
    halfspaces: &'a [Halfspace],
    shrink: f64,
}

impl crate::nlp::NlpProblem for Projection<'_> {
    fn num_variables(&self) -> usize {
        3
    }
    fn num_inequalities(&self) -> usize {
        self.halfspaces.len()
    }
    fn objective(&self, x: &[f64]) -> f64 {
        (0..3).map(|i| (x[i] - self.target[i]).powi(2)).sum()
    }
    fn gradient(&self, x: &[f64], g: &mut [f64]) {
        for i in 0..3 {
            g[i] = 2.0 * (x[i] - self.target[i]);
        }
    }
    fn constraints(&self, x: &[f64], out: &mut [f64]) {
        for (o, h) in out.iter_mut().zip(self.halfspaces) {
            *o = h.excess([x[0], x[1], x[2]]) + self.shrink;
        }
    }
    fn jacobian_structure(&self) -> Vec<(usize, usize)> {
        (0..self.halfspaces.len()).flat_map(|r| (0..3).map(move |c| (r, c))).collect()
    }
    fn jacobian(&self, _x: &[f64], v: &mut [f64]) {
        for (r, h) in self.halfspaces.iter().enumerate() {
            v[3 * r..3 * r + 3].copy_from_slice(&h.a);
        }
    }
}

fn lp_options() -> NlpOptions {
    NlpOptions { tol_feas: 1e-9, tol_opt: 1e-9, ..NlpOptions::default() }
}

/// Maximise `s` subject to `a·p + s <= b` over normalised halfspaces.
fn chebyshev(hs: &[Halfspace], hint: Option<&[Vec3]>) -> Option<(Vec3, f64)> {
    const CAP: f64 = 1e6;
    let start = match hint {
        Some(vs) if !vs.is_empty() => {
            let mut c = [0.0; 3];
            for v in vs {
                c = geom::add(c, *v);
            }
            geom::scale(c, 1.0 / vs.len() as f64)
        }
        _ => [0.0; 3],
    };
    let s0 = hs.iter().map(|h| -h.excess(start)).fold(f64::INFINITY, f64::min).min(CAP);
    let lp = LinearProgram {
        cost: vec![0.0, 0.0, 0.0, -1.0],
        rows: hs.iter().map(|h| vec![h.a[0], h.a[1], h.a[2], 1.0]).collect(),
        rhs: hs.iter().map(|h| h.b).collect(),
        lower: vec![-CAP, -CAP, -CAP, -CAP],
        upper: vec![CAP, CAP, CAP, CAP],
    };
    let (x, _) = minimize(&lp, &[start[0], start[1], start[2], s0], &lp_options()).ok()?;
    let p = [x[0], x[1], x[2]];
    // report the radius actually achieved by p
    let r = hs.iter().map(|h| -h.excess(p)).fold(f64::INFINITY, f64::min);
    Some((p, r))
}

/// Split an axis-aligned box along its longest axis into `cuts + 1`
/// boxes; each piece extends 5% of the nominal piece width past its
/// nominal ends (clipped to the box), giving 10% overlaps.
pub fn box_split(region: &ConvexRegion, cuts: usize) -> Result<Vec<ConvexRegion>, CorridorError> {
    let (lo, hi) = region
        .as_box()
        .ok_or_else(|| CorridorError::Unsupported("box_split needs an axis-aligned box".into()))?;
    if cuts == 0 {
        return Ok(vec![region.clone()]);
    }
    let axis = (0..3).fold(0, |best, i| if hi[i] - lo[i] > hi[best] - lo[best] { i } else { best });
    let pieces = cuts + 1;
    let w = (hi[axis] - lo[axis]) / pieces as f64;
    Ok((0..pieces)
        .map(|i| {
            let mut a = lo;
            let mut b = hi;
            a[axis] = (lo[axis] + i as f64 * w - 0.05 * w).max(lo[axis]);
            b[axis] = (lo[axis] + (i + 1) as f64 * w + 0.05 * w).min(hi[axis]);
            ConvexRegion::from_box(a, b)
        })
        .collect())
}

/// Ordered chain of regions with start and goal.
#[derive(Clone, Debug, PartialEq)]
pub struct Corridor {
    regions: Vec<ConvexRegion>,
    start: Vec3,
    goal: Vec3,
    start_frame: Option<[f64; 4]>,
    goal_frame: Option<[f64; 4]>,
    overlaps: Vec<Vec3>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionFile {
    #[serde(rename = "A")]
    a: Vec<Vec3>,
    b: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vertices: Option<Vec<Vec3>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorridorFile {
    regions: Vec<RegionFile>,
    start: Vec3,
    goal: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    start_frame: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    goal_frame: Option<[f64; 4]>,
}

fn unit_frame(q: Option<[f64; 4]>, which: &'static str) -> Result<Option<[f64; 4]>, CorridorError> {
    match q {
        None => Ok(None),
        Some(q) => {
            let n = geom::qnorm2(q).sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(CorridorError::Frame { which });
            }
            Ok(Some(geom::qnormalize(q)))
        }
    }
}

impl Corridor {
    /// Validates overlaps of consecutive regions and start/goal membership.
    /// Frames are normalised to unit quaternions.
    pub fn new(
        regions: Vec<ConvexRegion>,
        start: Vec3,
        goal: Vec3,
        start_frame: Option<[f64; 4]>,
        goal_frame: Option<[f64; 4]>,
    ) -> Result<Self, CorridorError> {
        if regions.is_empty() {
            return Err(CorridorError::Empty);
        }
        let mut overlaps = Vec::with_capacity(regions.len() - 1);
        for k in 1..regions.len() {
            let q = regions[k - 1]
                .intersection_point(&regions[k])
                .ok_or(CorridorError::Disjoint { region: k + 1 })?;
            overlaps.push(q);
        }
        if !regions[0].contains(start, 1e-9) {
            return Err(CorridorError::Outside { which: "start", point: start, region: 1 });
        }
        let m = regions.len();
        if !regions[m - 1].contains(goal, 1e-9) {
            return Err(CorridorError::Outside { which: "goal", point: goal, region: m });
        }
        Ok(Self {
            regions,
            start,
            goal,
            start_frame: unit_frame(start_frame, "start")?,
            goal_frame: unit_frame(goal_frame, "goal")?,
            overlaps,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, CorridorError> {
        let file: CorridorFile = serde_json::from_str(text).map_err(|e| CorridorError::Parse(e.to_string()))?;
        let mut regions = Vec::with_capacity(file.regions.len());
        for (k, r) in file.regions.into_iter().enumerate() {
            if r.a.len() != r.b.len() {
                return Err(CorridorError::Shape {
                    region: k + 1,
                    message: format!("{} rows in A but {} entries in b", r.a.len(), r.b.len()),
                });
            }
            let hs = r.a.iter().zip(&r.b).map(|(&a, &b)| Halfspace { a, b }).collect();
            regions.push(ConvexRegion::new(hs, r.vertices, k)?);
        }
        Self::new(regions, file.start, file.goal, file.start_frame, file.goal_frame)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorridorError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| CorridorError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json_str(&text)
    }

    /// JSON document in the load format (normalised halfspaces).
    pub fn to_json(&self) -> String {
        let file = CorridorFile {
            regions: self
                .regions
                .iter()
                .map(|r| RegionFile {
                    a: r.halfspaces.iter().map(|h| h.a).collect(),
                    b: r.halfspaces.iter().map(|h| h.b).collect(),
                    vertices: r.vertices.clone(),
                })
                .collect(),
            start: self.start,
            goal: self.goal,
            start_frame: self.start_frame,
            goal_frame: self.goal_frame,
        };
        serde_json::to_string_pretty(&file).expect("corridor serialises")
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn regions(&self) -> &[ConvexRegion] {
        &self.regions
    }

    pub fn region(&self, k: usize) -> &ConvexRegion {
        &self.regions[k]
    }

    pub fn start(&self) -> Vec3 {
        self.start
    }

    pub fn goal(&self) -> Vec3 {
        self.goal
    }

    pub fn start_frame(&self) -> Option<[f64; 4]> {
        self.start_frame
    }

    pub fn goal_frame(&self) -> Option<[f64; 4]> {
        self.goal_frame
    }

    /// Probe point in the intersection of regions `k` and `k + 1`.
    pub fn overlap_points(&self) -> &[Vec3] {
        &self.overlaps
    }

    /// Start, overlap probes, goal.
    pub fn waypoints(&self) -> Vec<Vec3> {
        let mut w = Vec::with_capacity(self.overlaps.len() + 2);
        w.push(self.start);
        w.extend_from_slice(&self.overlaps);
        w.push(self.goal);
        w
    }

    /// Start frame, or the shortest-arc rotation of x onto the first chord.
    pub fn start_frame_or_default(&self) -> [f64; 4] {
        self.start_frame.unwrap_or_else(|| {
            let w = self.waypoints();
            geom::quat_from_x_to(geom::sub(w[1], w[0]))
        })
    }

    /// 0-based region paired with global parameter `xi ∈ [0, m]`.
    pub fn region_of(&self, xi: f64) -> Result<usize, CorridorError> {
        let m = self.regions.len();
        if !(0.0..=m as f64).contains(&xi) {
            return Err(CorridorError::Domain { xi, m });
        }
        Ok((xi.floor() as usize).min(m - 1))
    }

    pub fn with_frames(mut self, start_frame: Option<[f64; 4]>, goal_frame: Option<[f64; 4]>) -> Result<Self, CorridorError> {
        self.start_frame = unit_frame(start_frame, "start")?;
        self.goal_frame = unit_frame(goal_frame, "goal")?;
        Ok(self)
    }
}
