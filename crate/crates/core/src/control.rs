//! Stochastic control layer: the Hamiltonian
//!
//! ```text
//! psi(t,x,y,z) = inf_u [ l(t,x,u) + <z, r(t,x,u)> + lambda(t,x,u) y ]
//! ```
//!
//! its minimizer `Gamma`, closed-loop simulation under the feedback
//! `u = Gamma(t, X, v, G^T grad v)`, discounted costs, and an audit of the
//! fundamental relation
//!
//! ```text
//! J(t,x,u) - v(t,x) = E int D_s H(s, X_s, v, G^T grad v, u_s) ds,
//! H(s,x,y,z,u) = l + <z,r> + lambda y - psi(s,x,y,z) >= 0.
//! ```

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::StepFit;
use crate::error::{FbsdeError, Result};
use crate::forward::{check_finite, first_error, IncrementBundle, Stepper};
use crate::grid::TimeGrid;
use crate::kolmogorov::{solve_ensemble, Ensemble, McSpec};
use crate::model::FbsdeProblem;
use crate::rng;
use crate::stats::{mean, norm, McEstimate};
use crate::validate::{Sampler, ValidationReport, Violation};

/// `r(t, x, u)`, writes `dim_xi` entries.
pub type ControlDriftFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Scalar functions of `(t, x, u)`: running cost and discount rate.
pub type ControlScalarFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;
/// `Gamma(t, x, y, z)`, writes `u_dim` entries.
pub type FeedbackFn = Arc<dyn Fn(f64, &[f64], f64, &[f64], &mut [f64]) + Send + Sync>;
/// An explicit control process `u(t, x)`.
pub type PolicyFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// How the infimum is computed.
#[derive(Clone)]
pub enum ControlSet {
    /// The driver of the base problem is `psi`; `gamma` is its minimizer.
    ClosedForm { gamma: FeedbackFn },
    /// Exact minimum over a finite set of controls.
    Grid { points: Vec<Vec<f64>> },
}

impl fmt::Debug for ControlSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ClosedForm { .. } => f.write_str("ClosedForm"),
            Self::Grid { points } => f.debug_struct("Grid").field("points", &points.len()).finish(),
        }
    }
}

#[derive(Clone)]
pub struct ControlProblem {
    pub base: FbsdeProblem,
    pub u_dim: usize,
    pub r: ControlDriftFn,
    pub r_bound: f64,
    pub l: ControlScalarFn,
    pub lambda: ControlScalarFn,
    pub control_set: ControlSet,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("base", &self.base)
            .field("u_dim", &self.u_dim)
            .field("r_bound", &self.r_bound)
            .field("control_set", &self.control_set)
            .finish_non_exhaustive()
    }
}

/// Evaluates `l + <z, r> + lambda y` at one control.
fn objective(
    r: &ControlDriftFn,
    l: &ControlScalarFn,
    lambda: &ControlScalarFn,
    t: f64,
    x: &[f64],
    y: f64,
    z: &[f64],
    u: &[f64],
    rbuf: &mut [f64],
) -> f64 {
    r(t, x, u, rbuf);
    let zr: f64 = z.iter().zip(rbuf.iter()).map(|(a, b)| a * b).sum();
    l(t, x, u) + zr + lambda(t, x, u) * y
}

/// Index of the minimizing grid point, lowest index on ties.
fn grid_argmin(
    points: &[Vec<f64>],
    r: &ControlDriftFn,
    l: &ControlScalarFn,
    lambda: &ControlScalarFn,
    t: f64,
    x: &[f64],
    y: f64,
    z: &[f64],
    rbuf: &mut [f64],
) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, u) in points.iter().enumerate() {
        let v = objective(r, l, lambda, t, x, y, z, u, rbuf);
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}

impl ControlProblem {
    /// Assembles a control problem. In grid mode the driver of `base` is
    /// replaced by the grid minimum, with derivatives from the envelope
    /// theorem at the minimizing control; its declared constants are kept.
    pub fn new(
        mut base: FbsdeProblem,
        u_dim: usize,
        r: ControlDriftFn,
        r_bound: f64,
        l: ControlScalarFn,
        lambda: ControlScalarFn,
        control_set: ControlSet,
    ) -> Result<Self> {
        if base.spaces.dim_k != 1 {
            return Err(FbsdeError::structural("control problems need a scalar value space"));
        }
        if u_dim == 0 {
            return Err(FbsdeError::structural("u_dim must be positive"));
        }
        if !(r_bound >= 0.0) {
            return Err(FbsdeError::domain("r_bound must be >= 0"));
        }
        if let ControlSet::Grid { points } = &control_set {
            if points.is_empty() {
                return Err(FbsdeError::domain("control grid is empty"));
            }
            if points.iter().any(|p| p.len() != u_dim) {
                return Err(FbsdeError::structural("control grid point does not match u_dim"));
            }
            let xi = base.spaces.dim_xi;
            let pts = Arc::new(points.clone());
            let (r1, l1, m1) = (r.clone(), l.clone(), lambda.clone());
            let pts1 = pts.clone();
            base.driver.psi = Arc::new(move |t, x, y, z, o| {
                let mut rb = vec![0.0; xi];
                o[0] = grid_argmin(&pts1, &r1, &l1, &m1, t, x, y[0], z, &mut rb).1;
            });
            let (r2, l2, m2) = (r.clone(), l.clone(), lambda.clone());
            let pts2 = pts.clone();
            base.driver.d_y = Arc::new(move |t, x, y, z, o| {
                let mut rb = vec![0.0; xi];
                let (i, _) = grid_argmin(&pts2, &r2, &l2, &m2, t, x, y[0], z, &mut rb);
                o[0] = m2(t, x, &pts2[i]);
            });
            let (r3, l3, m3) = (r.clone(), l.clone(), lambda.clone());
            let pts3 = pts.clone();
            base.driver.d_z = Arc::new(move |t, x, y, z, dz, o| {
                let mut rb = vec![0.0; xi];
                let (i, _) = grid_argmin(&pts3, &r3, &l3, &m3, t, x, y[0], z, &mut rb);
                r3(t, x, &pts3[i], &mut rb);
                o[0] = rb.iter().zip(dz).map(|(a, b)| a * b).sum();
            });
            let (r4, l4, m4) = (r.clone(), l.clone(), lambda.clone());
            base.driver.d_x = Arc::new(move |t, x, y, z, dx, o| {
                let mut rb = vec![0.0; xi];
                let (i, _) = grid_argmin(&pts, &r4, &l4, &m4, t, x, y[0], z, &mut rb);
                let u = &pts[i];
                let size = norm(dx);
                if size == 0.0 {
                    o[0] = 0.0;
                    return;
                }
                let eps = 1e-6 * (1.0 + norm(x)) / size;
                let xp: Vec<f64> = x.iter().zip(dx).map(|(a, b)| a + eps * b).collect();
                let xm: Vec<f64> = x.iter().zip(dx).map(|(a, b)| a - eps * b).collect();
                let up = objective(&r4, &l4, &m4, t, &xp, y[0], z, u, &mut rb);
                let dn = objective(&r4, &l4, &m4, t, &xm, y[0], z, u, &mut rb);
                o[0] = (up - dn) / (2.0 * eps);
            });
        }
        Ok(Self { base, u_dim, r, r_bound, l, lambda, control_set })
    }

    pub fn is_grid(&self) -> bool {
        matches!(self.control_set, ControlSet::Grid { .. })
    }

    fn check_point(&self, x: &[f64], z: &[f64]) -> Result<()> {
        if x.len() != self.base.spaces.dim_h || z.len() != self.base.spaces.dim_xi {
            return Err(FbsdeError::structural("state or z does not match the problem dimensions"));
        }
        Ok(())
    }

    /// `l + <z, r> + lambda y` at control `u`.
    pub fn objective(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]) -> f64 {
        let mut rb = vec![0.0; self.base.spaces.dim_xi];
        objective(&self.r, &self.l, &self.lambda, t, x, y, z, u, &mut rb)
    }

    /// `Gamma(t, x, y, z)` into `out`.
    fn feedback_into(&self, t: f64, x: &[f64], y: f64, z: &[f64], out: &mut [f64], rb: &mut [f64]) {
        match &self.control_set {
            ControlSet::ClosedForm { gamma } => gamma(t, x, y, z, out),
            ControlSet::Grid { points } => {
                let (i, _) = grid_argmin(points, &self.r, &self.l, &self.lambda, t, x, y, z, rb);
                out.copy_from_slice(&points[i]);
            }
        }
    }

    /// Hamiltonian defect `H = l + <z,r> + lambda y - psi`.
    pub fn defect(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]) -> f64 {
        let mut psi = [0.0];
        (self.base.driver.psi)(t, x, &[y], z, &mut psi);
        self.objective(t, x, y, z, u) - psi[0]
    }
}

/// `(psi(t,x,y,z), Gamma(t,x,y,z))`.
pub fn hamiltonian(cp: &ControlProblem, t: f64, x: &[f64], y: f64, z: &[f64]) -> Result<(f64, Vec<f64>)> {
    cp.check_point(x, z)?;
    if !(t.is_finite() && y.is_finite() && x.iter().chain(z).all(|v| v.is_finite())) {
        return Err(FbsdeError::domain("hamiltonian inputs must be finite"));
    }
    let mut u = vec![0.0; cp.u_dim];
    let mut rb = vec![0.0; cp.base.spaces.dim_xi];
    let value = match &cp.control_set {
        ControlSet::ClosedForm { gamma } => {
            gamma(t, x, y, z, &mut u);
            cp.base.driver.eval(1, t, x, &[y], z)[0]
        }
        ControlSet::Grid { points } => {
            let (i, v) = grid_argmin(points, &cp.r, &cp.l, &cp.lambda, t, x, y, z, &mut rb);
            u.copy_from_slice(&points[i]);
            v
        }
    };
    Ok((value, u))
}

/// Samples `|r| <= r_bound` and `lambda <= 0` at controls produced by the
/// feedback (or every grid point) at random `(t, x, y, z)`.
pub fn validate_control(cp: &ControlProblem, sampler: &Sampler) -> Result<ValidationReport> {
    if sampler.n_samples == 0 {
        return Err(FbsdeError::domain("validation requires at least one sample"));
    }
    let sp = cp.base.spaces;
    let mut rng = rng::stream(sampler.seed, "validate-control", 0, 0);
    let mut violations = Vec::new();
    let mut samples = 0;
    let mut rb = vec![0.0; sp.dim_xi];
    let mut u = vec![0.0; cp.u_dim];
    let tol = sampler.tolerance;
    for _ in 0..sampler.n_samples {
        let t = rng.random_range(sampler.time_range.0..=sampler.time_range.1);
        let x: Vec<f64> = (0..sp.dim_h).map(|_| rng.random_range(-sampler.x_radius..=sampler.x_radius)).collect();
        let y = rng.random_range(-sampler.y_radius..=sampler.y_radius);
        let z: Vec<f64> = (0..sp.dim_xi).map(|_| rng.random_range(-sampler.z_radius..=sampler.z_radius)).collect();
        let controls: Vec<Vec<f64>> = match &cp.control_set {
            ControlSet::ClosedForm { .. } => {
                cp.feedback_into(t, &x, y, &z, &mut u, &mut rb);
                vec![u.clone()]
            }
            ControlSet::Grid { points } => points.clone(),
        };
        for c in controls {
            (cp.r)(t, &x, &c, &mut rb);
            let rn = norm(&rb);
            let lam = (cp.lambda)(t, &x, &c);
            if rn > cp.r_bound * (1.0 + tol) + tol || lam > tol {
                violations.push(Violation {
                    point: vec![("t", vec![t]), ("x", x.clone()), ("u", c)],
                    lhs: rn.max(lam),
                    rhs: cp.r_bound,
                });
            }
            samples += 1;
        }
    }
    Ok(ValidationReport { check: "control-bounds", samples, violations })
}

/// Which control process to run.
#[derive(Clone)]
pub enum Strategy {
    /// `u_i = Gamma(t_i, X_i, v(t_i, X_i), G^T grad v(t_i, X_i))`.
    Feedback,
    Constant(Vec<f64>),
    Policy(PolicyFn),
}

impl Strategy {
    pub fn label(&self) -> String {
        match self {
            Self::Feedback => "feedback".into(),
            Self::Constant(u) => format!("constant{u:?}"),
            Self::Policy(_) => "policy".into(),
        }
    }
}

impl fmt::Debug for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Controlled paths with their controls, discounts and the value
/// surrogates seen along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledTrajectory {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub dim_h: usize,
    pub u_dim: usize,
    pub dim_xi: usize,
    pub increments_seed: u64,
    /// `[path][node][h]`
    states: Vec<f64>,
    /// `[path][step][u]`
    controls: Vec<f64>,
    /// `[path][node]`
    discount: Vec<f64>,
    /// `v(t_i, X_i)`, `[path][step]`
    values: Vec<f64>,
    /// `G^T grad v(t_i, X_i)`, `[path][step][xi]`
    gradients: Vec<f64>,
}

impl ControlledTrajectory {
    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        let o = (path * (self.grid.n_steps + 1) + node) * self.dim_h;
        &self.states[o..o + self.dim_h]
    }

    pub fn control(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.grid.n_steps + step) * self.u_dim;
        &self.controls[o..o + self.u_dim]
    }

    pub fn discount(&self, path: usize, node: usize) -> f64 {
        self.discount[path * (self.grid.n_steps + 1) + node]
    }

    pub fn value(&self, path: usize, step: usize) -> f64 {
        self.values[path * self.grid.n_steps + step]
    }

    pub fn gradient(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.grid.n_steps + step) * self.dim_xi;
        &self.gradients[o..o + self.dim_xi]
    }
}

/// Simulates `X_{i+1} = e^{hA}(X_i + h F + G (r(t_i, X_i, u_i) h + dW_i))`
/// with `D_{i+1} = D_i exp(lambda(t_i, X_i, u_i) h)`. `fits` supplies the
/// surrogates of `v` and `G^T grad v` for each step of `grid`.
pub fn simulate_controlled(
    cp: &ControlProblem,
    fits: &[StepFit],
    strategy: &Strategy,
    x: &[f64],
    grid: &TimeGrid,
    increments: &IncrementBundle,
) -> Result<ControlledTrajectory> {
    let sp = cp.base.spaces;
    let (dim, xi, ud) = (sp.dim_h, sp.dim_xi, cp.u_dim);
    if x.len() != dim {
        return Err(FbsdeError::structural("initial state does not match dim_h"));
    }
    if fits.len() != grid.n_steps {
        return Err(FbsdeError::structural(format!(
            "{} value surrogates for {} steps",
            fits.len(),
            grid.n_steps
        )));
    }
    if let Strategy::Constant(u) = strategy {
        if u.len() != ud {
            return Err(FbsdeError::structural("constant control does not match u_dim"));
        }
    }
    increments.conforms(grid, xi)?;
    let n = grid.n_steps;
    let n_paths = increments.n_paths;
    let h = grid.step();

    struct PathOut {
        states: Vec<f64>,
        controls: Vec<f64>,
        discount: Vec<f64>,
        values: Vec<f64>,
        gradients: Vec<f64>,
    }

    let results: Vec<Result<PathOut>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut stepper = Stepper::new(&cp.base, h);
            let mut out = PathOut {
                states: vec![0.0; (n + 1) * dim],
                controls: vec![0.0; n * ud],
                discount: vec![0.0; n + 1],
                values: vec![0.0; n],
                gradients: vec![0.0; n * xi],
            };
            out.states[..dim].copy_from_slice(x);
            out.discount[0] = 1.0;
            let mut rb = vec![0.0; xi];
            let mut extra = vec![0.0; xi];
            let mut v = [0.0];
            for i in 0..n {
                let t = grid.node(i);
                let (head, tail) = out.states.split_at_mut((i + 1) * dim);
                let xi_state = &head[i * dim..];
                fits[i].value.eval(xi_state, &mut v);
                let zg = &mut out.gradients[i * xi..(i + 1) * xi];
                fits[i].z.eval(xi_state, zg);
                out.values[i] = v[0];
                let u = &mut out.controls[i * ud..(i + 1) * ud];
                match strategy {
                    Strategy::Feedback => cp.feedback_into(t, xi_state, v[0], zg, u, &mut rb),
                    Strategy::Constant(c) => u.copy_from_slice(c),
                    Strategy::Policy(f) => f(t, xi_state, u),
                }
                (cp.r)(t, xi_state, u, &mut rb);
                for j in 0..xi {
                    extra[j] = rb[j] * h;
                }
                let lam = (cp.lambda)(t, xi_state, u);
                out.discount[i + 1] = out.discount[i] * (lam * h).exp();
                stepper.step(t, xi_state, increments.get(p, i), Some(&extra), &mut tail[..dim]);
                check_finite(&tail[..dim], i + 1, p)?;
            }
            Ok(out)
        })
        .collect();
    let mut traj = ControlledTrajectory {
        grid: *grid,
        n_paths,
        dim_h: dim,
        u_dim: ud,
        dim_xi: xi,
        increments_seed: increments.seed,
        states: Vec::with_capacity(n_paths * (n + 1) * dim),
        controls: Vec::with_capacity(n_paths * n * ud),
        discount: Vec::with_capacity(n_paths * (n + 1)),
        values: Vec::with_capacity(n_paths * n),
        gradients: Vec::with_capacity(n_paths * n * xi),
    };
    let mut outs = Vec::with_capacity(n_paths);
    first_error(results.into_iter().map(|r| r.map(|o| outs.push(o))).collect())?;
    for o in outs {
        traj.states.extend(o.states);
        traj.controls.extend(o.controls);
        traj.discount.extend(o.discount);
        traj.values.extend(o.values);
        traj.gradients.extend(o.gradients);
    }
    Ok(traj)
}

/// Closed loop under the optimal feedback.
pub fn simulate_closed_loop(
    cp: &ControlProblem,
    fits: &[StepFit],
    x: &[f64],
    grid: &TimeGrid,
    increments: &IncrementBundle,
) -> Result<ControlledTrajectory> {
    simulate_controlled(cp, fits, &Strategy::Feedback, x, grid, increments)
}

/// Per-path discounted costs and their ensemble mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    pub per_path: Vec<f64>,
    pub estimate: McEstimate,
}

/// `J = sum_i D_i l(t_i, X_i, u_i) h + D_T phi(X_T)` per path.
pub fn cost_j(cp: &ControlProblem, traj: &ControlledTrajectory) -> CostEstimate {
    let n = traj.grid.n_steps;
    let h = traj.grid.step();
    let per_path: Vec<f64> = (0..traj.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut running = 0.0;
            for i in 0..n {
                let t = traj.grid.node(i);
                running += traj.discount(p, i) * (cp.l)(t, traj.state(p, i), traj.control(p, i)) * h;
            }
            let terminal = cp.base.terminal.eval(1, traj.state(p, n))[0];
            running + traj.discount(p, n) * terminal
        })
        .collect();
    let estimate = McEstimate::from_samples(&per_path);
    CostEstimate { per_path, estimate }
}

/// Cross-path averages at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub t: f64,
    pub mean_control: f64,
    pub mean_discount: f64,
    pub mean_defect: f64,
}

/// Outcome of one fundamental-relation audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub strategy: String,
    pub t: f64,
    pub x: Vec<f64>,
    pub v: McEstimate,
    pub j: McEstimate,
    /// `J - v`, with the standard error of the paired per-path difference.
    pub gap: McEstimate,
    /// `E sum_i D_i H_i h` along the controlled paths.
    pub predicted_gap: f64,
    /// Smallest defect `H` over all steps and paths.
    pub h_min: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub per_step: Vec<StepSummary>,
}

/// Audits several strategies against one value solve, all driven by the
/// increments of that solve.
pub fn audit_strategies(
    cp: &ControlProblem,
    strategies: &[Strategy],
    t: f64,
    x: &[f64],
    spec: &McSpec,
) -> Result<(Ensemble, Vec<AuditReport>)> {
    let ens = solve_ensemble(&cp.base, t, x, spec)?;
    let reports = strategies
        .iter()
        .map(|s| audit_on(cp, &ens, s, t, x))
        .collect::<Result<Vec<_>>>()?;
    Ok((ens, reports))
}

/// `J(t,x,u) - v(t,x)` for one strategy, with the minimum Hamiltonian
/// defect seen along the controlled paths.
pub fn fundamental_relation_audit(
    cp: &ControlProblem,
    strategy: &Strategy,
    t: f64,
    x: &[f64],
    spec: &McSpec,
) -> Result<AuditReport> {
    let (_, mut reports) = audit_strategies(cp, std::slice::from_ref(strategy), t, x, spec)?;
    Ok(reports.remove(0))
}

fn audit_on(cp: &ControlProblem, ens: &Ensemble, strategy: &Strategy, t: f64, x: &[f64]) -> Result<AuditReport> {
    let sol = &ens.solution;
    let traj = simulate_controlled(cp, &sol.fits, strategy, x, &ens.grid, &ens.increments)?;
    let cost = cost_j(cp, &traj);
    let n = ens.grid.n_steps;
    let h = ens.grid.step();
    let defects: Vec<Vec<f64>> = (0..traj.n_paths)
        .into_par_iter()
        .map(|p| {
            (0..n)
                .map(|i| {
                    cp.defect(
                        ens.grid.node(i),
                        traj.state(p, i),
                        traj.value(p, i),
                        traj.gradient(p, i),
                        traj.control(p, i),
                    )
                })
                .collect()
        })
        .collect();
    let h_min = defects.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let predicted: Vec<f64> = (0..traj.n_paths)
        .map(|p| (0..n).map(|i| traj.discount(p, i) * defects[p][i] * h).sum())
        .collect();
    let diffs: Vec<f64> = (0..traj.n_paths).map(|p| cost.per_path[p] - sol.pathwise(p)[0]).collect();
    let v = sol.y0_estimate(0);
    let gap = McEstimate { mean: cost.estimate.mean - v.mean, std_error: McEstimate::from_samples(&diffs).std_error };
    let per_step = (0..n)
        .map(|i| StepSummary {
            step: i,
            t: ens.grid.node(i),
            mean_control: mean(&(0..traj.n_paths).map(|p| traj.control(p, i)[0]).collect::<Vec<_>>()),
            mean_discount: mean(&(0..traj.n_paths).map(|p| traj.discount(p, i)).collect::<Vec<_>>()),
            mean_defect: mean(&(0..traj.n_paths).map(|p| defects[p][i]).collect::<Vec<_>>()),
        })
        .collect();
    Ok(AuditReport {
        strategy: strategy.label(),
        t,
        x: x.to_vec(),
        v,
        j: cost.estimate,
        gap,
        predicted_gap: mean(&predicted),
        h_min,
        n_paths: traj.n_paths,
        n_steps: n,
        per_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{generate_increments, simulate_forward};
    use crate::model::{CoefficientSpec, DriverSpec, SemigroupSpec, SpaceSpec, TerminalSpec};
    use crate::regression::{RegressionBasis, Surrogate};
    use crate::validate::{validate_monotonicity, validate_z_lipschitz};

    fn base(driver: DriverSpec, phi_zero: bool) -> FbsdeProblem {
        let terminal = if phi_zero {
            TerminalSpec {
                phi: Arc::new(|_, o| o[0] = 0.0),
                grad_dir: Arc::new(|_, _, o| o[0] = 0.0),
                growth_c: 0.0,
                growth_m: 0.0,
            }
        } else {
            TerminalSpec {
                phi: Arc::new(|x, o| o[0] = x[0] * x[0]),
                grad_dir: Arc::new(|x, h, o| o[0] = 2.0 * x[0] * h[0]),
                growth_c: 2.0,
                growth_m: 1.0,
            }
        };
        FbsdeProblem::new(
            SpaceSpec::new(1, 1, 1).unwrap(),
            SemigroupSpec::zero(1),
            CoefficientSpec::affine(1, 1, vec![0.0], vec![0.0], vec![1.0]).unwrap(),
            driver,
            terminal,
            1.0,
        )
        .unwrap()
    }

    fn paper_example() -> ControlProblem {
        let d = DriverSpec::scalar_in_y(|y| -0.5 * y.max(0.0).powi(2), |y| -y.max(0.0), 0.0);
        ControlProblem::new(
            base(d, false),
            1,
            Arc::new(|_, _, _, o| o[0] = 0.0),
            0.0,
            Arc::new(|_, _, u| 0.5 * u[0] * u[0]),
            Arc::new(|_, _, u| -u[0]),
            ControlSet::ClosedForm { gamma: Arc::new(|_, _, y, _, o| o[0] = y.max(0.0)) },
        )
        .unwrap()
    }

    fn constant_fits(n: usize, v: f64, z: f64) -> Vec<StepFit> {
        (0..n).map(|_| StepFit { value: Surrogate::Mean(vec![v]), z: Surrogate::Mean(vec![z]) }).collect()
    }

    #[test]
    fn paper_example_hamiltonian() {
        let cp = paper_example();
        assert_eq!(hamiltonian(&cp, 0.0, &[0.0], 2.0, &[0.0]).unwrap(), (-2.0, vec![2.0]));
        assert_eq!(hamiltonian(&cp, 0.0, &[0.0], -1.0, &[0.0]).unwrap(), (0.0, vec![0.0]));
        assert!(hamiltonian(&cp, 0.0, &[0.0], f64::NAN, &[0.0]).is_err());
    }

    #[test]
    fn singleton_grid() {
        let cp = ControlProblem::new(
            base(DriverSpec::zero(), false),
            1,
            Arc::new(|_, _, u, o| o[0] = u[0]),
            1.0,
            Arc::new(|_, _, u| u[0] * u[0]),
            Arc::new(|_, _, _| -0.5),
            ControlSet::Grid { points: vec![vec![0.7]] },
        )
        .unwrap();
        let (v, u) = hamiltonian(&cp, 0.1, &[0.3], 2.0, &[1.5]).unwrap();
        assert_eq!(u, vec![0.7]);
        assert_eq!(v, 0.49 + 1.5 * 0.7 - 0.5 * 2.0);
        let empty = ControlProblem::new(
            base(DriverSpec::zero(), false),
            1,
            Arc::new(|_, _, _, o| o[0] = 0.0),
            0.0,
            Arc::new(|_, _, _| 0.0),
            Arc::new(|_, _, _| 0.0),
            ControlSet::Grid { points: vec![] },
        );
        assert!(matches!(empty, Err(FbsdeError::Domain(_))));
    }

    #[test]
    fn grid_ties_take_lowest_index() {
        let cp = ControlProblem::new(
            base(DriverSpec::zero(), false),
            1,
            Arc::new(|_, _, _, o| o[0] = 0.0),
            0.0,
            Arc::new(|_, _, u| u[0] * u[0]),
            Arc::new(|_, _, _| 0.0),
            ControlSet::Grid { points: vec![vec![1.0], vec![-1.0], vec![2.0]] },
        )
        .unwrap();
        assert_eq!(hamiltonian(&cp, 0.0, &[0.0], 0.0, &[0.0]).unwrap().1, vec![1.0]);
    }

    #[test]
    fn paper_example_defect_properties() {
        let cp = paper_example();
        for y in [-3.0, -0.5, 0.0, 0.25, 1.0, 4.0] {
            let (_, u) = hamiltonian(&cp, 0.0, &[0.0], y, &[0.0]).unwrap();
            assert!(cp.defect(0.0, &[0.0], y, &[0.0], &u).abs() <= 1e-12);
            for w in [0.0, 0.5, 1.0, 2.0, 7.0] {
                let h = cp.defect(0.0, &[0.0], y, &[0.0], &[w]);
                assert!(h >= -1e-12);
                if y >= 0.0 {
                    assert!((h - 0.5 * (w - y) * (w - y)).abs() < 1e-12);
                }
            }
        }
        let s = Sampler::new(1, 1.0);
        assert!(validate_monotonicity(&cp.base.driver, &cp.base.spaces, &s).unwrap().passed());
        assert!(validate_z_lipschitz(&cp.base.driver, &cp.base.spaces, &s).unwrap().passed());
        assert!(validate_control(&cp, &s).unwrap().passed());
    }

    #[test]
    fn zero_drift_reproduces_forward_paths() {
        let cp = paper_example();
        let g = TimeGrid::new(0.0, 1.0, 16, 1.0).unwrap();
        let inc = generate_increments(3, 50, &g, 1).unwrap();
        let fits = constant_fits(16, 0.7, 0.0);
        let traj = simulate_closed_loop(&cp, &fits, &[0.2], &g, &inc).unwrap();
        let paths = simulate_forward(&cp.base, &[0.2], &g, &inc).unwrap();
        for p in 0..50 {
            for i in 0..=16 {
                assert_eq!(traj.state(p, i), paths.state(p, i));
            }
            for i in 0..16 {
                assert_eq!(traj.control(p, i), &[0.7]);
                assert!(traj.discount(p, i + 1) <= traj.discount(p, i));
            }
            assert_eq!(traj.discount(p, 0), 1.0);
        }
    }

    #[test]
    fn constant_drift_telescopes() {
        let cp = ControlProblem::new(
            base(DriverSpec::zero(), false),
            1,
            Arc::new(|_, _, _, o| o[0] = 0.3),
            0.3,
            Arc::new(|_, _, _| 0.0),
            Arc::new(|_, _, _| 0.0),
            ControlSet::Grid { points: vec![vec![0.0]] },
        )
        .unwrap();
        let g = TimeGrid::new(0.0, 1.0, 32, 1.0).unwrap();
        let inc = generate_increments(4, 20, &g, 1).unwrap();
        let traj = simulate_controlled(&cp, &constant_fits(32, 0.0, 0.0), &Strategy::Feedback, &[0.5], &g, &inc).unwrap();
        for p in 0..20 {
            let sum_dw: f64 = (0..32).map(|i| inc.get(p, i)[0]).sum();
            assert!((traj.state(p, 32)[0] - (0.5 + 0.3 + sum_dw)).abs() < 1e-12);
        }
    }

    #[test]
    fn elementary_costs() {
        let running = |l: f64| {
            ControlProblem::new(
                base(DriverSpec::zero(), true),
                1,
                Arc::new(|_, _, _, o| o[0] = 0.0),
                0.0,
                Arc::new(move |_, _, _| l),
                Arc::new(|_, _, _| 0.0),
                ControlSet::Grid { points: vec![vec![0.0]] },
            )
            .unwrap()
        };
        let g = TimeGrid::new(0.25, 1.0, 12, 1.0).unwrap();
        let inc = generate_increments(4, 30, &g, 1).unwrap();
        let fits = constant_fits(12, 0.0, 0.0);
        let cp = running(1.0);
        let traj = simulate_closed_loop(&cp, &fits, &[0.0], &g, &inc).unwrap();
        for c in cost_j(&cp, &traj).per_path {
            assert!((c - 0.75).abs() < 1e-14);
        }
        let cp = running(0.0);
        let traj = simulate_closed_loop(&cp, &fits, &[0.0], &g, &inc).unwrap();
        assert_eq!(cost_j(&cp, &traj).estimate, McEstimate::exact(0.0));
    }

    #[test]
    fn paper_example_audit() {
        let cp = paper_example();
        let spec = McSpec::new(10_000, 32, 7, RegressionBasis::polynomial(3));
        let strategies = [
            Strategy::Feedback,
            Strategy::Constant(vec![0.0]),
            Strategy::Constant(vec![1.0]),
        ];
        let (_, reports) = audit_strategies(&cp, &strategies, 0.0, &[0.5], &spec).unwrap();
        let fb = &reports[0];
        assert!(fb.h_min.abs() <= 1e-6, "{fb:?}");
        assert!(fb.gap.mean.abs() <= (3.0 * fb.gap.std_error).max(5e-2 * (1.0 + fb.v.mean.abs())), "{fb:?}");
        for r in &reports[1..] {
            assert!(r.gap.mean >= -3.0 * r.gap.std_error, "{r:?}");
            assert!(r.h_min >= -1e-9);
        }
    }
}
