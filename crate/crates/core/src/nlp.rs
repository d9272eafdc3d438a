//! Smooth constrained minimisation by an augmented Lagrangian.
//!
//! Problems have the form
//!
//! ```text
//! min f(x)  s.t.  c_E(x) = 0,  c_I(x) <= 0,  lower <= x <= upper
//! ```
//!
//! The outer loop updates multipliers (Powell–Hestenes–Rockafellar
//! form) and grows the penalty by 10x whenever the combined
//! feasibility/complementarity measure fails to halve. Each subproblem is
//! bound-constrained and solved by a limited-memory BFGS iteration with a
//! projected Armijo backtracking line search.
//!
//! Everything is sequential and allocation-stable, so identical inputs
//! reproduce identical iterate sequences.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub trait NlpProblem {
    fn num_variables(&self) -> usize;

    fn num_equalities(&self) -> usize {
        0
    }

    /// Number of `g(x) <= 0` rows; they follow the equalities.
    fn num_inequalities(&self) -> usize {
        0
    }

    /// `(lower, upper)`; infinite entries are unbounded.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.num_variables();
        (vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
    }

    fn objective(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64], grad: &mut [f64]);

    /// Equality values followed by inequality values.
    fn constraints(&self, _x: &[f64], _out: &mut [f64]) {}

    /// `(row, col)` of every structurally nonzero Jacobian entry. Entries
    /// must be unique.
    fn jacobian_structure(&self) -> Vec<(usize, usize)> {
        Vec::new()
    }

    /// Values in the order of [`NlpProblem::jacobian_structure`].
    fn jacobian(&self, _x: &[f64], _values: &mut [f64]) {}
}

/// `problem` with a zero objective: minimising it searches for a feasible
/// point only.
pub struct Feasibility<'a, P: ?Sized>(pub &'a P);

impl<P: NlpProblem + ?Sized> NlpProblem for Feasibility<'_, P> {
    fn num_variables(&self) -> usize {
        self.0.num_variables()
    }
    fn num_equalities(&self) -> usize {
        self.0.num_equalities()
    }
    fn num_inequalities(&self) -> usize {
        self.0.num_inequalities()
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        self.0.bounds()
    }
    fn objective(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn gradient(&self, _x: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
    }
    fn constraints(&self, x: &[f64], out: &mut [f64]) {
        self.0.constraints(x, out)
    }
    fn jacobian_structure(&self) -> Vec<(usize, usize)> {
        self.0.jacobian_structure()
    }
    fn jacobian(&self, x: &[f64], values: &mut [f64]) {
        self.0.jacobian(x, values)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NlpOptions {
    pub tol_feas: f64,
    pub tol_opt: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub memory: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    /// Inner stationarity tolerance of the first subproblem.
    pub initial_inner_tol: f64,
    /// Use the banded Gauss–Newton matrix of the penalty term as the
    /// initial Hessian of the quasi-Newton recursion.
    pub precondition: bool,
    /// Once a subproblem has taken this many quasi-Newton iterations, add a
    /// finite-difference Hessian of the Lagrangian to the preconditioner
    /// and take damped Newton steps for the rest of the solve. The
    /// objective Hessian must lie within the band of the constraint
    /// Jacobian.
    pub newton_after: Option<usize>,
}

impl Default for NlpOptions {
    fn default() -> Self {
        Self {
            tol_feas: 1e-6,
            tol_opt: 1e-5,
            max_outer: 50,
            max_inner: 500,
            memory: 10,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_penalty: 1e8,
            initial_inner_tol: 1e-2,
            precondition: true,
            newton_after: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    /// Outer (multiplier) iterations.
    pub iterations: usize,
    pub inner_iterations: usize,
    pub objective: f64,
    pub max_violation: f64,
    /// Projected gradient of the Lagrangian, infinity norm.
    pub residual: f64,
    pub penalty: f64,
    /// Constraint row with the largest violation, if any is violated.
    pub worst_constraint: Option<usize>,
    /// Largest violation after each accepted outer iteration. Non-increasing
    /// until the penalty reaches its cap.
    pub violation_history: Vec<f64>,
    #[serde(skip)]
    pub multipliers: Vec<f64>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlpError {
    #[error("objective or constraints are not finite at the initial point")]
    NonFiniteStart,
    #[error("initial point has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

/// Maximum violation of `c_E = 0`, `c_I <= 0` and the index attaining it.
pub fn violation(values: &[f64], num_eq: usize) -> (f64, Option<usize>) {
    let mut worst = 0.0;
    let mut at = None;
    for (i, &v) in values.iter().enumerate() {
        let viol = if i < num_eq { v.abs() } else { v.max(0.0) };
        if viol > worst || viol.is_nan() {
            worst = viol;
            at = Some(i);
        }
    }
    (worst, at)
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].max(lower[i]).min(upper[i]);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..x.len() {
        let p = (x[i] - g[i]).max(lower[i]).min(upper[i]);
        m = m.max((p - x[i]).abs());
    }
    m
}

/// Augmented Lagrangian evaluation context.
struct Merit<'a, P: NlpProblem + ?Sized> {
    problem: &'a P,
    num_eq: usize,
    structure: Vec<(usize, usize)>,
    lambda: Vec<f64>,
    rho: f64,
    cbuf: Vec<f64>,
    jbuf: Vec<f64>,
    weights: Vec<f64>,
}

impl<P: NlpProblem + ?Sized> Merit<'_, P> {
    fn value(&mut self, x: &[f64]) -> f64 {
        let f = self.problem.objective(x);
        self.problem.constraints(x, &mut self.cbuf);
        f + self.penalty_terms()
    }

    fn penalty_terms(&self) -> f64 {
        let rho = self.rho;
        let mut acc = 0.0;
        for (i, &c) in self.cbuf.iter().enumerate() {
            let l = self.lambda[i];
            if i < self.num_eq {
                acc += l * c + 0.5 * rho * c * c;
            } else {
                let t = (l + rho * c).max(0.0);
                acc += (t * t - l * l) / (2.0 * rho);
            }
        }
        acc
    }

    /// Gradient at `x`; assumes `value(x)` was the last call.
    fn gradient(&mut self, x: &[f64], grad: &mut [f64]) {
        self.problem.gradient(x, grad);
        if self.cbuf.is_empty() {
            return;
        }
        for (i, &c) in self.cbuf.iter().enumerate() {
            let l = self.lambda[i];
            self.weights[i] = if i < self.num_eq { l + self.rho * c } else { (l + self.rho * c).max(0.0) };
        }
        self.problem.jacobian(x, &mut self.jbuf);
        for (k, &(r, c)) in self.structure.iter().enumerate() {
            grad[c] += self.weights[r] * self.jbuf[k];
        }
    }
}

struct InnerOutcome {
    iterations: usize,
    pg_norm: f64,
}

/// `ρ J_Aᵀ J_A + μ I` on the free variables, factorised in band storage.
/// `J_A` holds the equality rows and the inequality rows with positive
/// weight; fixed variables get a unit diagonal.
struct GaussNewton {
    n: usize,
    bw: usize,
    /// Structure indices grouped by row.
    rows: Vec<Vec<usize>>,
    /// Lower band, `l[i * (bw + 1) + (i - j)]`.
    l: Vec<f64>,
    /// Undamped copy of `l` for refactorisation.
    raw: Vec<f64>,
    gbase: Vec<f64>,
    gp: Vec<f64>,
    xp: Vec<f64>,
    jp: Vec<f64>,
}

impl GaussNewton {
    fn new(n: usize, m: usize, structure: &[(usize, usize)]) -> Self {
        let mut rows = vec![Vec::new(); m];
        for (k, &(r, _)) in structure.iter().enumerate() {
            rows[r].push(k);
        }
        let mut bw = 0;
        for row in &rows {
            let lo = row.iter().map(|&k| structure[k].1).min();
            let hi = row.iter().map(|&k| structure[k].1).max();
            if let (Some(lo), Some(hi)) = (lo, hi) {
                bw = bw.max(hi - lo);
            }
        }
        let nnz = structure.len();
        Self {
            n,
            bw,
            rows,
            l: vec![0.0; n * (bw + 1)],
            raw: Vec::new(),
            gbase: vec![0.0; n],
            gp: vec![0.0; n],
            xp: vec![0.0; n],
            jp: vec![0.0; nnz],
        }
    }

    /// `∇f(x) + J(x)ᵀ w` with the weights of the last merit gradient.
    fn lagrangian_gradient<P: NlpProblem + ?Sized>(merit: &Merit<'_, P>, x: &[f64], jbuf: &mut [f64], out: &mut [f64]) {
        merit.problem.gradient(x, out);
        merit.problem.jacobian(x, jbuf);
        for (k, &(r, c)) in merit.structure.iter().enumerate() {
            out[c] += merit.weights[r] * jbuf[k];
        }
    }

    /// Adds the band of `∇²f + Σ wᵢ ∇²cᵢ` by forward differences of the
    /// Lagrangian gradient, perturbing columns `bw + 1` apart together.
    fn add_curvature<P: NlpProblem + ?Sized>(&mut self, merit: &Merit<'_, P>, x: &[f64], free: &[bool]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let stride = (2 * bw + 1).min(n);
        let mut gbase = std::mem::take(&mut self.gbase);
        let mut gp = std::mem::take(&mut self.gp);
        let mut jp = std::mem::take(&mut self.jp);
        Self::lagrangian_gradient(merit, x, &mut jp, &mut gbase);
        for color in 0..stride {
            self.xp.copy_from_slice(x);
            let mut any = false;
            for j in (color..n).step_by(stride) {
                if free[j] {
                    self.xp[j] += 1.5e-8 * x[j].abs().max(1.0);
                    any = true;
                }
            }
            if !any {
                continue;
            }
            Self::lagrangian_gradient(merit, &self.xp, &mut jp, &mut gp);
            for j in (color..n).step_by(stride) {
                if !free[j] {
                    continue;
                }
                let h = self.xp[j] - x[j];
                for i in j..(j + w).min(n) {
                    if free[i] {
                        let v = (gp[i] - gbase[i]) / h;
                        if v.is_finite() {
                            self.l[i * w + (i - j)] += v;
                        }
                    }
                }
            }
        }
        self.gbase = gbase;
        self.gp = gp;
        self.jp = jp;
    }

    fn snapshot(&mut self) -> f64 {
        self.raw.clone_from(&self.l);
        let w = self.bw + 1;
        (0..self.n).map(|i| self.l[i * w].abs()).fold(0.0, f64::max)
    }

    fn restore(&mut self) {
        self.l.clone_from(&self.raw);
    }

    fn assemble<P: NlpProblem + ?Sized>(&mut self, merit: &Merit<'_, P>, free: &[bool]) {
        let w = self.bw + 1;
        self.l.fill(0.0);
        for (r, entries) in self.rows.iter().enumerate() {
            if r >= merit.num_eq && merit.weights[r] <= 0.0 {
                continue;
            }
            for &a in entries {
                let ca = merit.structure[a].1;
                if !free[ca] {
                    continue;
                }
                let va = merit.rho * merit.jbuf[a];
                for &b in entries {
                    let cb = merit.structure[b].1;
                    if cb <= ca && free[cb] {
                        self.l[ca * w + (ca - cb)] += va * merit.jbuf[b];
                    }
                }
            }
        }
    }

    /// Adds `mu` to the free diagonal and factorises in place.
    fn factor(&mut self, free: &[bool], mu: f64) -> bool {
        let (n, w) = (self.n, self.bw + 1);
        for i in 0..n {
            self.l[i * w] = if free[i] { self.l[i * w] + mu } else { 1.0 };
        }
        for j in 0..n {
            let lo = j.saturating_sub(self.bw);
            let mut d = self.l[j * w];
            for k in lo..j {
                let v = self.l[j * w + (j - k)];
                d -= v * v;
            }
            if !(d > 0.0) || !d.is_finite() {
                return false;
            }
            let d = d.sqrt();
            self.l[j * w] = d;
            for i in j + 1..(j + w).min(n) {
                let mut v = self.l[i * w + (i - j)];
                for k in i.saturating_sub(self.bw)..j {
                    v -= self.l[i * w + (i - k)] * self.l[j * w + (j - k)];
                }
                self.l[i * w + (i - j)] = v / d;
            }
        }
        true
    }

    fn solve(&self, v: &mut [f64]) {
        let (n, w) = (self.n, self.bw + 1);
        for i in 0..n {
            let mut acc = v[i];
            for k in i.saturating_sub(self.bw)..i {
                acc -= self.l[i * w + (i - k)] * v[k];
            }
            v[i] = acc / self.l[i * w];
        }
        for i in (0..n).rev() {
            let mut acc = v[i];
            for k in i + 1..(i + w).min(n) {
                acc -= self.l[k * w + (k - i)] * v[k];
            }
            v[i] = acc / self.l[i * w];
        }
    }
}

/// Projected limited-memory BFGS on the merit function, optionally with
/// the Gauss–Newton matrix of the penalty as initial Hessian; `mu` is its
/// damping, carried across calls.
#[allow(clippy::too_many_arguments)]
fn inner_solve<P: NlpProblem + ?Sized>(
    merit: &mut Merit<'_, P>,
    gn: &mut Option<GaussNewton>,
    mu: &mut f64,
    x: &mut Vec<f64>,
    lower: &[f64],
    upper: &[f64],
    tol: f64,
    max_iter: usize,
    memory: usize,
    newton_after: Option<usize>,
    newton: &mut bool,
) -> InnerOutcome {
    let n = x.len();
    let mut f = merit.value(x);
    let mut g = vec![0.0; n];
    merit.gradient(x, &mut g);
    let mut s_hist: Vec<Vec<f64>> = Vec::with_capacity(memory);
    let mut y_hist: Vec<Vec<f64>> = Vec::with_capacity(memory);
    let mut rho_hist: Vec<f64> = Vec::with_capacity(memory);
    let mut d = vec![0.0; n];
    let mut free = vec![true; n];
    let mut alpha_buf = vec![0.0; memory];
    let mut xt = vec![0.0; n];
    let mut gt = vec![0.0; n];
    let mut iterations = 0;
    let mut pg = projected_gradient_norm(x, &g, lower, upper);

    while iterations < max_iter && pg > tol {
        iterations += 1;
        if !*newton && newton_after.is_some_and(|k| iterations > k) && gn.is_some() {
            log::debug!("switching to Newton steps");
            *newton = true;
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        }
        for i in 0..n {
            free[i] = !((x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0));
            d[i] = if free[i] { -g[i] } else { 0.0 };
        }
        let preconditioned = match gn.as_mut() {
            Some(gn) => {
                gn.assemble(merit, &free);
                if *newton {
                    gn.add_curvature(merit, x, &free);
                }
                let scale = gn.snapshot();
                if *mu <= 0.0 {
                    *mu = 1e-3 * scale.max(1.0);
                }
                *mu = mu.max(1e-12 * scale).max(1e-10).min(1e4 * scale.max(1.0));
                let mut ok = gn.factor(&free, *mu);
                while !ok && *mu < 1e12 * scale.max(1.0) {
                    *mu *= 10.0;
                    gn.restore();
                    ok = gn.factor(&free, *mu);
                }
                ok
            }
            None => false,
        };
        // two-loop recursion on the free subspace
        let k = s_hist.len();
        for j in (0..k).rev() {
            let a = rho_hist[j] * dot_masked(&s_hist[j], &d, &free);
            alpha_buf[j] = a;
            axpy_masked(-a, &y_hist[j], &mut d, &free);
        }
        if preconditioned {
            for i in 0..n {
                if !free[i] {
                    d[i] = 0.0;
                }
            }
            gn.as_ref().expect("preconditioner").solve(&mut d);
        } else if k > 0 {
            let last = k - 1;
            let yy = dot(&y_hist[last], &y_hist[last]);
            let gamma = 1.0 / (rho_hist[last] * yy);
            for v in d.iter_mut() {
                *v *= gamma;
            }
        }
        for j in 0..k {
            let b = rho_hist[j] * dot_masked(&y_hist[j], &d, &free);
            axpy_masked(alpha_buf[j] - b, &s_hist[j], &mut d, &free);
        }
        for i in 0..n {
            if !free[i] {
                d[i] = 0.0;
            }
        }
        let slope = dot(&g, &d);
        let dn = dot(&d, &d).sqrt();
        let gn_norm = dot_masked(&g, &g, &free).sqrt();
        if !(slope < -1e-12 * dn * gn_norm) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            for i in 0..n {
                d[i] = if free[i] { -g[i] } else { 0.0 };
            }
            if preconditioned {
                gn.as_ref().expect("preconditioner").solve(&mut d);
            }
        }
        let mut alpha = if s_hist.is_empty() && !preconditioned {
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            (1.0 / dmax.max(1e-300)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = false;
        let mut halvings = 0;
        let mut ft = f;
        for _ in 0..60 {
            for i in 0..n {
                xt[i] = (x[i] + alpha * d[i]).max(lower[i]).min(upper[i]);
            }
            let decrease: f64 = (0..n).map(|i| g[i] * (xt[i] - x[i])).sum();
            if decrease < 0.0 {
                ft = merit.value(&xt);
                if ft.is_finite() && ft <= f + 1e-4 * decrease {
                    merit.gradient(&xt, &mut gt);
                    if gt.iter().all(|v| v.is_finite()) {
                        accepted = true;
                        break;
                    }
                }
            }
            alpha *= 0.5;
            halvings += 1;
        }
        if preconditioned {
            *mu = if !accepted {
                *mu * 100.0
            } else if halvings == 0 {
                *mu * 0.3
            } else {
                *mu * 2f64.powi(halvings.min(4))
            };
        }
        if !accepted {
            if s_hist.is_empty() && !preconditioned {
                break;
            }
            // retry from steepest descent with a fresh memory
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            merit.value(x);
            merit.gradient(x, &mut g);
            continue;
        }
        let mut s = vec![0.0; n];
        let mut y = vec![0.0; n];
        for i in 0..n {
            s[i] = xt[i] - x[i];
            y[i] = gt[i] - g[i];
        }
        let sy = dot(&s, &y);
        if !*newton && sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if s_hist.len() == memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
        }
        std::mem::swap(x, &mut xt);
        std::mem::swap(&mut g, &mut gt);
        f = ft;
        pg = projected_gradient_norm(x, &g, lower, upper);
        log::trace!("inner {iterations}: f = {f:.6e}, pg = {pg:.3e}, alpha = {alpha:.1e}, mu = {:.1e}, pairs = {}", *mu, s_hist.len());
    }
    // leave the merit buffers consistent with x
    merit.value(x);
    InnerOutcome { iterations, pg_norm: pg }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dot_masked(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        if mask[i] {
            s += a[i] * b[i];
        }
    }
    s
}

fn axpy_masked(a: f64, x: &[f64], y: &mut [f64], mask: &[bool]) {
    for i in 0..x.len() {
        if mask[i] {
            y[i] += a * x[i];
        }
    }
}

/// Minimise `problem` from `x_init` (projected onto the bounds first).
pub fn minimize<P: NlpProblem + ?Sized>(
    problem: &P,
    x_init: &[f64],
    options: &NlpOptions,
) -> Result<(Vec<f64>, SolveReport), NlpError> {
    let n = problem.num_variables();
    if x_init.len() != n {
        return Err(NlpError::Dimension { expected: n, got: x_init.len() });
    }
    let num_eq = problem.num_equalities();
    let m = num_eq + problem.num_inequalities();
    let (lower, upper) = problem.bounds();
    let mut x = x_init.to_vec();
    project(&mut x, &lower, &upper);

    let structure = problem.jacobian_structure();
    let nnz = structure.len();
    let mut merit = Merit {
        problem,
        num_eq,
        structure,
        lambda: vec![0.0; m],
        rho: options.initial_penalty,
        cbuf: vec![0.0; m],
        jbuf: vec![0.0; nnz],
        weights: vec![0.0; m],
    };
    let f0 = merit.value(&x);
    if !f0.is_finite() || merit.cbuf.iter().any(|v| !v.is_finite()) {
        return Err(NlpError::NonFiniteStart);
    }

    let mut omega = options.initial_inner_tol.max(options.tol_opt);
    let mut inner_total = 0;
    let mut history = Vec::new();
    let mut v_prev = f64::INFINITY;
    let mut status = SolveStatus::MaxIter;
    let mut residual = f64::INFINITY;
    let mut outer = 0;
    let mut stalled_at_cap = 0;
    let mut grad = vec![0.0; n];
    let mut gn = (options.precondition && m > 0).then(|| GaussNewton::new(n, m, &merit.structure));
    let mut mu = 0.0;
    let mut newton = false;

    let mut x_prev = x.clone();
    while outer < options.max_outer {
        outer += 1;
        x_prev.copy_from_slice(&x);
        let inner = inner_solve(
            &mut merit,
            &mut gn,
            &mut mu,
            &mut x,
            &lower,
            &upper,
            omega,
            options.max_inner,
            options.memory,
            options.newton_after,
            &mut newton,
        );
        inner_total += inner.iterations;

        // keep outer feasibility monotone: retry from the last accepted
        // iterate with a larger penalty
        let (viol, _) = violation(&merit.cbuf, num_eq);
        if history.last().is_some_and(|&last| viol > last) && merit.rho < options.max_penalty {
            log::debug!("outer {outer}: violation rose to {viol:.3e}, raising the penalty");
            x.copy_from_slice(&x_prev);
            merit.rho = (merit.rho * options.penalty_growth).min(options.max_penalty);
            continue;
        }
        // merit.cbuf holds c(x); form the complementarity-aware measure
        // with the multipliers used in this subproblem
        let rho = merit.rho;
        let mut v_meas: f64 = 0.0;
        for (i, &c) in merit.cbuf.iter().enumerate() {
            let t = if i < num_eq { c.abs() } else { c.max(-merit.lambda[i] / rho).abs() };
            v_meas = v_meas.max(t);
        }
        // first-order multipliers; gradient of the merit equals ∇L there
        merit.gradient(&x, &mut grad);
        for i in 0..m {
            merit.lambda[i] = merit.weights[i];
        }
        residual = projected_gradient_norm(&x, &grad, &lower, &upper);
        history.push(viol);
        log::debug!(
            "outer {outer}: f = {:.6e}, viol = {viol:.3e}, V = {v_meas:.3e}, residual = {residual:.3e}, rho = {rho:.1e}, inner = {} (pg {:.2e})",
            problem.objective(&x),
            inner.iterations,
            inner.pg_norm
        );
        if !viol.is_finite() {
            status = SolveStatus::Degenerate;
            break;
        }
        if v_meas <= options.tol_feas && residual <= options.tol_opt {
            status = SolveStatus::Converged;
            break;
        }
        if v_meas > options.tol_feas && (v_meas > 0.5 * v_prev || outer == 1 && v_meas > options.tol_feas * 1e3) {
            if merit.rho >= options.max_penalty {
                if viol > options.tol_feas {
                    stalled_at_cap += 1;
                    if stalled_at_cap >= 3 {
                        status = SolveStatus::Infeasible;
                        break;
                    }
                }
            } else {
                merit.rho = (merit.rho * options.penalty_growth).min(options.max_penalty);
            }
        }
        v_prev = v_meas;
        omega = (omega * 0.1).max(options.tol_opt * 0.5);
    }

    let objective = problem.objective(&x);
    problem.constraints(&x, &mut merit.cbuf);
    let (max_violation, worst) = violation(&merit.cbuf, num_eq);
    if status == SolveStatus::MaxIter && max_violation > options.tol_feas && merit.rho >= options.max_penalty {
        status = SolveStatus::Infeasible;
    }
    let report = SolveReport {
        status,
        iterations: outer,
        inner_iterations: inner_total,
        objective,
        max_violation,
        residual,
        penalty: merit.rho,
        worst_constraint: if max_violation > options.tol_feas { worst } else { None },
        violation_history: history,
        multipliers: merit.lambda,
    };
    Ok((x, report))
}

/// Worst mismatch between supplied first derivatives and central
/// differences with step `h`, relative to `max(1, |finite difference|)`.
pub fn check_derivatives<P: NlpProblem + ?Sized>(problem: &P, x: &[f64], h: f64) -> f64 {
    let n = problem.num_variables();
    let m = problem.num_equalities() + problem.num_inequalities();
    let mut grad = vec![0.0; n];
    problem.gradient(x, &mut grad);
    let structure = problem.jacobian_structure();
    let mut jv = vec![0.0; structure.len()];
    problem.jacobian(x, &mut jv);
    // column-wise lookup of the analytic Jacobian
    let mut columns: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (k, &(r, c)) in structure.iter().enumerate() {
        columns[c].push((r, jv[k]));
    }
    let rel = |a: f64, fd: f64| (a - fd).abs() / fd.abs().max(1.0);
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    let mut cp = vec![0.0; m];
    let mut cm = vec![0.0; m];
    let mut dense = vec![0.0; m];
    for j in 0..n {
        let orig = xp[j];
        xp[j] = orig + h;
        let fp = problem.objective(&xp);
        problem.constraints(&xp, &mut cp);
        xp[j] = orig - h;
        let fm = problem.objective(&xp);
        problem.constraints(&xp, &mut cm);
        xp[j] = orig;
        worst = worst.max(rel(grad[j], (fp - fm) / (2.0 * h)));
        dense.iter_mut().for_each(|v| *v = 0.0);
        for &(r, v) in &columns[j] {
            dense[r] = v;
        }
        for r in 0..m {
            worst = worst.max(rel(dense[r], (cp[r] - cm[r]) / (2.0 * h)));
        }
    }
    worst
}

/// `min c·x  s.t.  A x <= b,  lower <= x <= upper` as an [`NlpProblem`].
#[derive(Clone, Debug)]
pub struct LinearProgram {
    pub cost: Vec<f64>,
    /// Dense rows of `A`.
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl NlpProblem for LinearProgram {
    fn num_variables(&self) -> usize {
        self.cost.len()
    }
    fn num_inequalities(&self) -> usize {
        self.rows.len()
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lower.clone(), self.upper.clone())
    }
    fn objective(&self, x: &[f64]) -> f64 {
        dot(&self.cost, x)
    }
    fn gradient(&self, _x: &[f64], grad: &mut [f64]) {
        grad.copy_from_slice(&self.cost);
    }
    fn constraints(&self, x: &[f64], out: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            out[i] = dot(row, x) - self.rhs[i];
        }
    }
    fn jacobian_structure(&self) -> Vec<(usize, usize)> {
        let n = self.cost.len();
        (0..self.rows.len()).flat_map(|r| (0..n).map(move |c| (r, c))).collect()
    }
    fn jacobian(&self, _x: &[f64], values: &mut [f64]) {
        let n = self.cost.len();
        for (i, row) in self.rows.iter().enumerate() {
            values[i * n..(i + 1) * n].copy_from_slice(row);
        }
    }
}
