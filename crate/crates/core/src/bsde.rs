//! Backward time-stepping for
//!
//! ```text
//! Y_t = phi(X_T) + int_t^T psi(s, X_s, Y_s, Z_s) ds - int_t^T Z_s dW_s
//! ```
//!
//! on a forward ensemble. Each step first estimates `Z_i` from the
//! martingale increment, then solves the implicit equation
//! `Y_i = E[Y_{i+1} | X_i] + h psi(t_i, X_i, Y_i, Z_i)` path by path:
//!
//! ```text
//! Z_i = E[(Y_{i+1} - E[Y_{i+1} | X_i]) dW_i^T | X_i] / h
//! ```
//!
//! Subtracting the fitted conditional mean leaves the estimator unchanged in
//! expectation (`E[dW_i | X_i] = 0`) but removes most of its variance.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FbsdeError, Result};
use crate::forward::{IncrementBundle, PathBundle};
use crate::grid::TimeGrid;
use crate::model::{DriverSpec, FbsdeProblem};
use crate::regression::{residual_rms, FactorInfo, RegressionBasis, Regressor, Surrogate};
use crate::stats::{mean, norm, McEstimate};

pub const IMPLICIT_TOLERANCE: f64 = 1e-12;
pub const MAX_NEWTON_ITERATIONS: usize = 50;
const MAX_HALVINGS: usize = 60;

/// Outcome of one implicit step.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitStep {
    pub y: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Scratch space for repeated implicit solves of `y = v + h psi(s,x,y,z)`.
pub struct ImplicitSolver<'a> {
    driver: &'a DriverSpec,
    k: usize,
    psi: Vec<f64>,
    jac: Vec<f64>,
    res: Vec<f64>,
    trial: Vec<f64>,
    trial_res: Vec<f64>,
    dir: Vec<f64>,
}

impl<'a> ImplicitSolver<'a> {
    pub fn new(driver: &'a DriverSpec, dim_k: usize) -> Self {
        Self {
            driver,
            k: dim_k,
            psi: vec![0.0; dim_k],
            jac: vec![0.0; dim_k * dim_k],
            res: vec![0.0; dim_k],
            trial: vec![0.0; dim_k],
            trial_res: vec![0.0; dim_k],
            dir: vec![0.0; dim_k],
        }
    }

    fn residual(&mut self, s: f64, x: &[f64], z: &[f64], v: &[f64], h: f64, y: &[f64], out: &mut [f64]) -> f64 {
        (self.driver.psi)(s, x, y, z, &mut self.psi);
        for i in 0..self.k {
            out[i] = y[i] - v[i] - h * self.psi[i];
        }
        norm(out)
    }

    /// Damped Newton on `R(y) = y - v - h psi(s,x,y,z)`, starting from `v`.
    /// A step that does not reduce `|R|` is halved along the Newton
    /// direction until it does.
    pub fn solve(&mut self, s: f64, x: &[f64], z: &[f64], v: &[f64], h: f64, y: &mut [f64]) -> Result<(usize, f64)> {
        let k = self.k;
        y.copy_from_slice(v);
        let tol = IMPLICIT_TOLERANCE * (1.0 + norm(v));
        let mut res = std::mem::take(&mut self.res);
        let mut r = self.residual(s, x, z, v, h, y, &mut res);
        let mut iterations = 0;
        while r > tol {
            if iterations == MAX_NEWTON_ITERATIONS || !r.is_finite() {
                self.res = res;
                return Err(FbsdeError::StepFailure { step: None, path: None, iterations, residual: r });
            }
            iterations += 1;
            (self.driver.d_y)(s, x, y, z, &mut self.jac);
            if k == 1 {
                let j = 1.0 - h * self.jac[0];
                self.dir[0] = if j != 0.0 && j.is_finite() { -res[0] / j } else { -res[0] };
            } else {
                let m = DMatrix::from_fn(k, k, |i, c| f64::from(i == c) - h * self.jac[i * k + c]);
                let rhs = DVector::from_iterator(k, res.iter().map(|v| -v));
                match m.lu().solve(&rhs) {
                    Some(d) => self.dir.copy_from_slice(d.as_slice()),
                    None => self.dir.iter_mut().zip(&res).for_each(|(d, r)| *d = -r),
                }
            }
            let mut alpha = 1.0;
            let mut accepted = false;
            let mut trial_res = std::mem::take(&mut self.trial_res);
            let mut trial = std::mem::take(&mut self.trial);
            for _ in 0..MAX_HALVINGS {
                for i in 0..k {
                    trial[i] = y[i] + alpha * self.dir[i];
                }
                let rt = self.residual(s, x, z, v, h, &trial, &mut trial_res);
                if rt < r || rt <= tol {
                    y.copy_from_slice(&trial);
                    res.copy_from_slice(&trial_res);
                    r = rt;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            self.trial = trial;
            self.trial_res = trial_res;
            if !accepted {
                self.res = res;
                return Err(FbsdeError::StepFailure { step: None, path: None, iterations, residual: r });
            }
        }
        self.res = res;
        Ok((iterations, r))
    }
}

/// Solves `y = v + h psi(s, x, y, z)` for `y`. Requires `h > 0` and
/// `h mu < 1`, under which the map `y -> y - h psi` is strongly monotone.
pub fn implicit_driver_step(
    driver: &DriverSpec,
    dim_k: usize,
    s: f64,
    x: &[f64],
    z: &[f64],
    v: &[f64],
    h: f64,
) -> Result<ImplicitStep> {
    check_step(driver, h)?;
    if v.len() != dim_k {
        return Err(FbsdeError::structural("value vector does not match dim_k"));
    }
    let mut solver = ImplicitSolver::new(driver, dim_k);
    let mut y = vec![0.0; dim_k];
    let (iterations, residual) = solver.solve(s, x, z, v, h, &mut y)?;
    Ok(ImplicitStep { y, iterations, residual })
}

pub(crate) fn check_step(driver: &DriverSpec, h: f64) -> Result<()> {
    if !(h > 0.0) {
        return Err(FbsdeError::domain(format!("step must be positive, got {h}")));
    }
    if h * driver.mu >= 1.0 {
        return Err(FbsdeError::domain(format!(
            "h * mu = {} >= 1: the implicit step is not well posed",
            h * driver.mu
        )));
    }
    Ok(())
}

/// Per-step regression diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub factor: FactorInfo,
    /// RMS of `Y_{i+1} - E[Y_{i+1} | X_i]` (first component).
    pub y_residual_rms: f64,
    /// RMS residual of the `Z` regression (first entry).
    pub z_residual_rms: f64,
    pub max_newton_iterations: usize,
}

/// Regression surrogates of `Y_i` and `Z_i` as functions of the state.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFit {
    pub value: Surrogate,
    pub z: Surrogate,
}

/// Discrete `(Y, Z)` on the ensemble.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub dim_k: usize,
    pub dim_xi: usize,
    /// `[node][path][k]`
    y: Vec<f64>,
    /// `[step][path][k * xi]`
    z: Vec<f64>,
    /// `phi(X_T) + sum_i h psi_i` per path, `[path][k]`.
    pathwise: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Surrogates for steps `0..n_steps`.
    pub fits: Vec<StepFit>,
}

impl BsdeSolution {
    pub fn y(&self, path: usize, node: usize) -> &[f64] {
        let o = (node * self.n_paths + path) * self.dim_k;
        &self.y[o..o + self.dim_k]
    }

    pub fn z(&self, path: usize, step: usize) -> &[f64] {
        let zl = self.dim_k * self.dim_xi;
        let o = (step * self.n_paths + path) * zl;
        &self.z[o..o + zl]
    }

    /// Cross-path mean of `Y` at the first node.
    pub fn y0(&self) -> Vec<f64> {
        (0..self.dim_k)
            .map(|c| mean(&(0..self.n_paths).map(|p| self.y(p, 0)[c]).collect::<Vec<_>>()))
            .collect()
    }

    /// Estimate of component `c` of `Y_0` with its standard error.
    ///
    /// Because every least-squares projection reproduces the cross-path
    /// mean, `Y_0` coincides with the sample mean of the pathwise quantity
    /// `phi(X_T) + sum_i h psi(t_i, X_i, Y_i, Z_i)`, whose sample deviation
    /// gives the standard error.
    pub fn y0_estimate(&self, c: usize) -> McEstimate {
        let samples: Vec<f64> = (0..self.n_paths).map(|p| self.pathwise[p * self.dim_k + c]).collect();
        let est = McEstimate::from_samples(&samples);
        McEstimate { mean: self.y(0, 0)[c], std_error: est.std_error }
    }

    pub fn pathwise(&self, path: usize) -> &[f64] {
        &self.pathwise[path * self.dim_k..(path + 1) * self.dim_k]
    }

    /// Largest Newton iteration count over all steps.
    pub fn max_newton_iterations(&self) -> usize {
        self.diagnostics.iter().map(|d| d.max_newton_iterations).max().unwrap_or(0)
    }

    pub fn any_rank_deficient(&self) -> bool {
        self.diagnostics.iter().any(|d| d.factor.rank_deficient)
    }
}

pub(crate) fn check_ensemble(problem: &FbsdeProblem, paths: &PathBundle, increments: &IncrementBundle) -> Result<()> {
    if paths.n_paths != increments.n_paths {
        return Err(FbsdeError::structural(format!(
            "{} paths but {} increment paths",
            paths.n_paths, increments.n_paths
        )));
    }
    if paths.increments_seed != increments.seed {
        return Err(FbsdeError::structural("paths were simulated with different increments"));
    }
    if paths.dim_h != problem.spaces.dim_h {
        return Err(FbsdeError::structural("path dimension does not match dim_h"));
    }
    increments.conforms(&paths.grid, problem.spaces.dim_xi)
}

pub(crate) fn gather_states(paths: &PathBundle, node: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(paths.n_paths * paths.dim_h);
    for p in 0..paths.n_paths {
        out.extend_from_slice(paths.state(p, node));
    }
    out
}

/// `(target - fitted) dW^T / h`, laid out `[path][k * xi]`.
pub(crate) fn martingale_targets(
    next: &[f64],
    fitted: &[f64],
    increments: &IncrementBundle,
    step: usize,
    dim_k: usize,
    h: f64,
) -> Vec<f64> {
    let xi = increments.dim_xi;
    let n_paths = increments.n_paths;
    let mut out = vec![0.0; n_paths * dim_k * xi];
    out.par_chunks_mut(dim_k * xi).enumerate().for_each(|(p, row)| {
        let dw = increments.get(p, step);
        for c in 0..dim_k {
            let centered = next[p * dim_k + c] - fitted[p * dim_k + c];
            for j in 0..xi {
                row[c * xi + j] = centered * dw[j] / h;
            }
        }
    });
    out
}

/// Solves the backward equation on the ensemble.
pub fn solve_bsde(
    problem: &FbsdeProblem,
    paths: &PathBundle,
    increments: &IncrementBundle,
    basis: &RegressionBasis,
) -> Result<BsdeSolution> {
    check_ensemble(problem, paths, increments)?;
    let grid = paths.grid;
    let h = grid.step();
    check_step(&problem.driver, h)?;
    let (n, n_paths) = (grid.n_steps, paths.n_paths);
    let k = problem.spaces.dim_k;
    let xi = problem.spaces.dim_xi;
    let zl = k * xi;
    let dim_h = problem.spaces.dim_h;

    let mut y = vec![0.0; (n + 1) * n_paths * k];
    let mut z = vec![0.0; n * n_paths * zl];
    {
        let terminal = &mut y[n * n_paths * k..];
        terminal.par_chunks_mut(k).enumerate().for_each(|(p, out)| {
            (problem.terminal.phi)(paths.terminal(p), out);
        });
    }
    let mut pathwise = y[n * n_paths * k..].to_vec();
    let mut diagnostics = Vec::with_capacity(n);
    let mut fits = Vec::with_capacity(n);

    for i in (0..n).rev() {
        let t_i = grid.node(i);
        let features = gather_states(paths, i);
        let reg = Regressor::new(&features, n_paths, dim_h, basis)?;
        let (head, tail) = y.split_at_mut((i + 1) * n_paths * k);
        let next = &tail[..n_paths * k];
        let y_i = &mut head[i * n_paths * k..];

        let cond = reg.fit(next, k)?;
        let z_targets = martingale_targets(next, &cond.fitted, increments, i, k, h);
        let z_fit = reg.fit(&z_targets, zl)?;
        let z_i = &mut z[i * n_paths * zl..(i + 1) * n_paths * zl];
        z_i.copy_from_slice(&z_fit.fitted);

        let iterations: Vec<Result<usize>> = y_i
            .par_chunks_mut(k)
            .enumerate()
            .map_init(
                || ImplicitSolver::new(&problem.driver, k),
                |solver, (p, out)| {
                    let v = &cond.fitted[p * k..(p + 1) * k];
                    let zp = &z_fit.fitted[p * zl..(p + 1) * zl];
                    solver
                        .solve(t_i, paths.state(p, i), zp, v, h, out)
                        .map(|(it, _)| it)
                        .map_err(|e| e.at(i, p))
                },
            )
            .collect();
        let mut max_it = 0;
        for r in iterations {
            max_it = max_it.max(r?);
        }
        for (p, acc) in pathwise.chunks_mut(k).enumerate() {
            for c in 0..k {
                acc[c] += y_i[p * k + c] - cond.fitted[p * k + c];
            }
        }
        if let Some((p, _)) = y_i.chunks(k).enumerate().find(|(_, v)| v.iter().any(|a| !a.is_finite())) {
            return Err(FbsdeError::Blowup { step: i, path: p, magnitude: f64::INFINITY });
        }
        let value_fit = reg.fit(y_i, k)?;
        diagnostics.push(StepDiagnostics {
            step: i,
            factor: reg.info(),
            y_residual_rms: residual_rms(next, &cond, k, 0),
            z_residual_rms: residual_rms(&z_targets, &z_fit, zl, 0),
            max_newton_iterations: max_it,
        });
        fits.push(StepFit { value: value_fit.surrogate, z: z_fit.surrogate });
    }
    diagnostics.reverse();
    fits.reverse();
    Ok(BsdeSolution {
        grid,
        n_paths,
        dim_k: k,
        dim_xi: xi,
        y,
        z,
        pathwise,
        diagnostics,
        fits,
    })
}

/// Monte-Carlo estimate of
/// `( E[sup_t |Y_t|^p] + E[(int |Z|^2 dt)^{p/2}] )^{1/p}`
/// using grid maxima and left-endpoint quadrature.
pub fn kp_norm(solution: &BsdeSolution, p: f64) -> Result<f64> {
    kp_norm_of(&solution.grid, solution.n_paths, p, |k, i| solution.y(k, i), |k, i| solution.z(k, i))
}

pub(crate) fn kp_norm_of<'a>(
    grid: &TimeGrid,
    n_paths: usize,
    p: f64,
    y: impl Fn(usize, usize) -> &'a [f64],
    z: impl Fn(usize, usize) -> &'a [f64],
) -> Result<f64> {
    if !(p > 1.0) {
        return Err(FbsdeError::domain(format!("norm exponent must be > 1, got {p}")));
    }
    let h = grid.step();
    let n = grid.n_steps;
    let sup_terms: Vec<f64> = (0..n_paths)
        .map(|k| (0..=n).map(|i| norm(y(k, i))).fold(0.0, f64::max).powf(p))
        .collect();
    let z_terms: Vec<f64> = (0..n_paths)
        .map(|k| {
            let q: f64 = (0..n).map(|i| z(k, i).iter().map(|v| v * v).sum::<f64>() * h).sum();
            q.powf(p / 2.0)
        })
        .collect();
    Ok((mean(&sup_terms) + mean(&z_terms)).powf(1.0 / p))
}
