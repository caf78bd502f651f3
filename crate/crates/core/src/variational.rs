//! Linearized forward flow and the linear backward equation solved by the
//! directional derivative `(G, H) = (d_x Y h, d_x Z h)`.
//!
//! The backward step mirrors [`crate::bsde::solve_bsde`] with the
//! coefficients frozen along a base solution:
//!
//! ```text
//! (I - h d_y psi) G_i = E[G_{i+1} | F_i] + h (d_x psi N_i + d_z psi H_i)
//! ```

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::bsde::{check_ensemble, check_step, kp_norm_of, gather_states, martingale_targets, BsdeSolution, StepDiagnostics};
use crate::error::{FbsdeError, Result};
use crate::forward::{check_finite, first_error, IncrementBundle, PathBundle};
use crate::grid::TimeGrid;
use crate::model::FbsdeProblem;
use crate::regression::{residual_rms, RegressionBasis, Regressor};
use crate::stats::{mean, McEstimate};

/// Tangent paths `N` laid out `[path][node][h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentBundle {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub dim_h: usize,
    data: Vec<f64>,
}

impl TangentBundle {
    pub fn get(&self, path: usize, node: usize) -> &[f64] {
        let o = (path * (self.grid.n_steps + 1) + node) * self.dim_h;
        &self.data[o..o + self.dim_h]
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        self.get(path, self.grid.n_steps)
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &TangentBundle, b: f64) -> Result<TangentBundle> {
        if self.data.len() != other.data.len() {
            return Err(FbsdeError::structural("tangent bundles have different shapes"));
        }
        let data = self.data.iter().zip(&other.data).map(|(u, v)| a * u + b * v).collect();
        Ok(TangentBundle { data, ..self.clone() })
    }
}

/// Simulates `N_{i+1} = e^{hA}(N_i + h dF(X_i) N_i + (dG(X_i) N_i) dW_i)`
/// with `N_0 = direction` along the given paths.
pub fn flow_derivative(
    problem: &FbsdeProblem,
    paths: &PathBundle,
    increments: &IncrementBundle,
    direction: &[f64],
) -> Result<TangentBundle> {
    check_ensemble(problem, paths, increments)?;
    let dim = problem.spaces.dim_h;
    let xi = problem.spaces.dim_xi;
    if direction.len() != dim {
        return Err(FbsdeError::structural(format!(
            "direction has {} entries, dim_h = {dim}",
            direction.len()
        )));
    }
    let grid = paths.grid;
    let n = grid.n_steps;
    let h = grid.step();
    let factors = problem.semigroup.factors(h);
    let stride = (n + 1) * dim;
    let mut data = vec![0.0; paths.n_paths * stride];
    let results: Vec<Result<()>> = data
        .par_chunks_mut(stride)
        .enumerate()
        .map(|(p, chunk)| {
            let mut df = vec![0.0; dim];
            let mut dg = vec![0.0; dim * xi];
            chunk[..dim].copy_from_slice(direction);
            for i in 0..n {
                let (head, tail) = chunk.split_at_mut((i + 1) * dim);
                let nv = &head[i * dim..];
                let x = paths.state(p, i);
                let t = grid.node(i);
                (problem.coefficients.drift_dir)(t, x, nv, &mut df);
                (problem.coefficients.diffusion_dir)(t, x, nv, &mut dg);
                let dw = increments.get(p, i);
                for r in 0..dim {
                    let noise: f64 = (0..xi).map(|j| dg[r * xi + j] * dw[j]).sum();
                    tail[r] = factors[r] * (nv[r] + h * df[r] + noise);
                }
                check_finite(&tail[..dim], i + 1, p)?;
            }
            Ok(())
        })
        .collect();
    first_error(results)?;
    Ok(TangentBundle { grid, n_paths: paths.n_paths, dim_h: dim, data })
}

/// `zeta = d phi(X_T) N_T` per path, laid out `[path][k]`.
pub fn terminal_tangent(problem: &FbsdeProblem, paths: &PathBundle, tangent: &TangentBundle) -> Vec<f64> {
    let k = problem.spaces.dim_k;
    let mut out = vec![0.0; paths.n_paths * k];
    out.par_chunks_mut(k).enumerate().for_each(|(p, o)| {
        (problem.terminal.grad_dir)(paths.terminal(p), tangent.terminal(p), o);
    });
    out
}

/// Discrete `(G, H)` on the ensemble.
#[derive(Debug, Clone)]
pub struct VariationalSolution {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub dim_k: usize,
    pub dim_xi: usize,
    /// `[node][path][k]`
    g: Vec<f64>,
    /// `[step][path][k * xi]`
    h: Vec<f64>,
    pathwise: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl VariationalSolution {
    pub fn g(&self, path: usize, node: usize) -> &[f64] {
        let o = (node * self.n_paths + path) * self.dim_k;
        &self.g[o..o + self.dim_k]
    }

    pub fn h(&self, path: usize, step: usize) -> &[f64] {
        let zl = self.dim_k * self.dim_xi;
        let o = (step * self.n_paths + path) * zl;
        &self.h[o..o + zl]
    }

    pub fn g0(&self) -> Vec<f64> {
        (0..self.dim_k)
            .map(|c| mean(&(0..self.n_paths).map(|p| self.g(p, 0)[c]).collect::<Vec<_>>()))
            .collect()
    }

    /// Component `c` of `G_0` with the standard error of its pathwise
    /// representation (see [`BsdeSolution::y0_estimate`]).
    pub fn g0_estimate(&self, c: usize) -> McEstimate {
        let samples: Vec<f64> = (0..self.n_paths).map(|p| self.pathwise[p * self.dim_k + c]).collect();
        McEstimate { mean: self.g(0, 0)[c], std_error: McEstimate::from_samples(&samples).std_error }
    }

    /// The norm of [`crate::bsde::kp_norm`] applied to `(G, H)`.
    pub fn kp_norm(&self, p: f64) -> Result<f64> {
        kp_norm_of(&self.grid, self.n_paths, p, |k, i| self.g(k, i), |k, i| self.h(k, i))
    }
}

/// Solves the linear backward equation with terminal value `zeta`
/// (laid out `[path][k]`) and forward tangent `tangent`. Conditional
/// expectations are projections on functions of the state alone, so the
/// solution is linear in `(tangent, zeta)`.
pub fn solve_variational_bsde(
    problem: &FbsdeProblem,
    paths: &PathBundle,
    increments: &IncrementBundle,
    base: &BsdeSolution,
    tangent: &TangentBundle,
    zeta: &[f64],
    basis: &RegressionBasis,
) -> Result<VariationalSolution> {
    check_ensemble(problem, paths, increments)?;
    let grid = paths.grid;
    let (n, n_paths) = (grid.n_steps, paths.n_paths);
    let k = problem.spaces.dim_k;
    let xi = problem.spaces.dim_xi;
    let zl = k * xi;
    if base.grid != grid || base.n_paths != n_paths || tangent.grid != grid || tangent.n_paths != n_paths {
        return Err(FbsdeError::structural("base solution or tangent was computed on a different ensemble"));
    }
    if zeta.len() != n_paths * k {
        return Err(FbsdeError::structural("terminal tangent does not match n_paths x dim_k"));
    }
    let h = grid.step();
    check_step(&problem.driver, h)?;

    let mut g = vec![0.0; (n + 1) * n_paths * k];
    let mut hz = vec![0.0; n * n_paths * zl];
    g[n * n_paths * k..].copy_from_slice(zeta);
    let mut pathwise = zeta.to_vec();
    let mut diagnostics = Vec::with_capacity(n);

    for i in (0..n).rev() {
        let t_i = grid.node(i);
        let reg = Regressor::new(&gather_states(paths, i), n_paths, paths.dim_h, basis)?;
        let (head, tail) = g.split_at_mut((i + 1) * n_paths * k);
        let next = &tail[..n_paths * k];
        let g_i = &mut head[i * n_paths * k..];

        let cond = reg.fit(next, k)?;
        let targets = martingale_targets(next, &cond.fitted, increments, i, k, h);
        let h_fit = reg.fit(&targets, zl)?;
        hz[i * n_paths * zl..(i + 1) * n_paths * zl].copy_from_slice(&h_fit.fitted);

        let results: Vec<Result<()>> = g_i
            .par_chunks_mut(k)
            .enumerate()
            .map(|(p, out)| {
                let x = paths.state(p, i);
                let y = base.y(p, i);
                let z = base.z(p, i);
                let hp = &h_fit.fitted[p * zl..(p + 1) * zl];
                let mut jac = vec![0.0; k * k];
                let mut dx = vec![0.0; k];
                let mut dz = vec![0.0; k];
                (problem.driver.d_y)(t_i, x, y, z, &mut jac);
                (problem.driver.d_x)(t_i, x, y, z, tangent.get(p, i), &mut dx);
                (problem.driver.d_z)(t_i, x, y, z, hp, &mut dz);
                let rhs: Vec<f64> = (0..k).map(|c| cond.fitted[p * k + c] + h * (dx[c] + dz[c])).collect();
                if k == 1 {
                    let a = 1.0 - h * jac[0];
                    if a == 0.0 || !a.is_finite() {
                        return Err(singular(i, p));
                    }
                    out[0] = rhs[0] / a;
                } else {
                    let m = DMatrix::from_fn(k, k, |r, c| f64::from(r == c) - h * jac[r * k + c]);
                    let sol = m.lu().solve(&DVector::from_vec(rhs)).ok_or_else(|| singular(i, p))?;
                    out.copy_from_slice(sol.as_slice());
                }
                Ok(())
            })
            .collect();
        first_error(results)?;
        for (p, acc) in pathwise.chunks_mut(k).enumerate() {
            for c in 0..k {
                acc[c] += g_i[p * k + c] - cond.fitted[p * k + c];
            }
        }
        diagnostics.push(StepDiagnostics {
            step: i,
            factor: reg.info(),
            y_residual_rms: residual_rms(next, &cond, k, 0),
            z_residual_rms: residual_rms(&targets, &h_fit, zl, 0),
            max_newton_iterations: 0,
        });
    }
    diagnostics.reverse();
    Ok(VariationalSolution { grid, n_paths, dim_k: k, dim_xi: xi, g, h: hz, pathwise, diagnostics })
}

fn singular(step: usize, path: usize) -> FbsdeError {
    FbsdeError::ModelInconsistency(format!(
        "singular linear step at step {step} on path {path}: the driver violates its declared monotonicity"
    ))
}
