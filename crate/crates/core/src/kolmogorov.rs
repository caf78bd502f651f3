//! Evaluation of the mild solution `u(t,x) = Y(t,t,x)` of the semilinear
//! Kolmogorov equation, its directional derivative, and audits of the
//! variation-of-constants formula and of the identity `Z = G^T grad u`.

use serde::{Deserialize, Serialize};

use crate::bsde::{solve_bsde, BsdeSolution};
use crate::error::{FbsdeError, Result};
use crate::forward::{generate_increments, simulate_forward, IncrementBundle, PathBundle};
use crate::grid::TimeGrid;
use crate::model::FbsdeProblem;
use crate::regression::RegressionBasis;
use crate::rng::derive_seed;
use crate::stats::{norm, McEstimate};
use crate::variational::{flow_derivative, solve_variational_bsde, terminal_tangent};

/// Monte-Carlo resolution of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McSpec {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub basis: RegressionBasis,
}

impl McSpec {
    pub fn new(n_paths: usize, n_steps: usize, seed: u64, basis: RegressionBasis) -> Self {
        Self { n_paths, n_steps, seed, basis }
    }

    /// Same resolution on the independent stream `(seed, "child", j, 0)`.
    pub fn child(&self, j: u64) -> Self {
        Self { seed: derive_seed(self.seed, "child", j, 0), ..*self }
    }

    fn check(&self) -> Result<()> {
        if self.n_paths == 0 || self.n_steps == 0 {
            return Err(FbsdeError::domain("n_paths and n_steps must be positive"));
        }
        Ok(())
    }
}

/// A forward ensemble started at `(t, x)` together with its backward solution.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub grid: TimeGrid,
    pub increments: IncrementBundle,
    pub paths: PathBundle,
    pub solution: BsdeSolution,
}

/// Simulates from `(t, x)` to the horizon and solves the backward equation.
pub fn solve_ensemble(problem: &FbsdeProblem, t: f64, x: &[f64], spec: &McSpec) -> Result<Ensemble> {
    spec.check()?;
    let grid = TimeGrid::new(t, problem.horizon, spec.n_steps, problem.horizon)?;
    let increments = generate_increments(spec.seed, spec.n_paths, &grid, problem.spaces.dim_xi)?;
    let paths = simulate_forward(problem, x, &grid, &increments)?;
    let solution = solve_bsde(problem, &paths, &increments, &spec.basis)?;
    Ok(Ensemble { grid, increments, paths, solution })
}

fn check_point(problem: &FbsdeProblem, t: f64, x: &[f64]) -> Result<()> {
    if !(0.0..=problem.horizon).contains(&t) {
        return Err(FbsdeError::domain(format!("t = {t} outside [0, {}]", problem.horizon)));
    }
    if x.len() != problem.spaces.dim_h {
        return Err(FbsdeError::structural(format!(
            "state has {} entries, dim_h = {}",
            x.len(),
            problem.spaces.dim_h
        )));
    }
    Ok(())
}

/// `u(t, x)` with its standard error and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MildEvaluation {
    pub t: f64,
    pub x: Vec<f64>,
    /// One entry per component of the value space.
    pub u_value: Vec<f64>,
    pub std_error: Vec<f64>,
    pub n_paths: usize,
    pub n_steps: usize,
    pub basis: RegressionBasis,
}

impl MildEvaluation {
    pub fn estimate(&self, c: usize) -> McEstimate {
        McEstimate { mean: self.u_value[c], std_error: self.std_error[c] }
    }
}

fn evaluation_from(problem: &FbsdeProblem, t: f64, x: &[f64], spec: &McSpec, solution: &BsdeSolution) -> MildEvaluation {
    let k = problem.spaces.dim_k;
    let est: Vec<McEstimate> = (0..k).map(|c| solution.y0_estimate(c)).collect();
    MildEvaluation {
        t,
        x: x.to_vec(),
        u_value: est.iter().map(|e| e.mean).collect(),
        std_error: est.iter().map(|e| e.std_error).collect(),
        n_paths: spec.n_paths,
        n_steps: spec.n_steps,
        basis: spec.basis,
    }
}

fn is_terminal(problem: &FbsdeProblem, t: f64) -> bool {
    t >= problem.horizon
}

/// Evaluates `u(t, x)` as the initial-node mean of `Y`. At `t = T` the
/// terminal map is returned exactly.
pub fn eval_u(problem: &FbsdeProblem, t: f64, x: &[f64], spec: &McSpec) -> Result<MildEvaluation> {
    check_point(problem, t, x)?;
    spec.check()?;
    if is_terminal(problem, t) {
        let v = problem.terminal.eval(problem.spaces.dim_k, x);
        return Ok(MildEvaluation {
            t,
            x: x.to_vec(),
            std_error: vec![0.0; v.len()],
            u_value: v,
            n_paths: spec.n_paths,
            n_steps: spec.n_steps,
            basis: spec.basis,
        });
    }
    let e = solve_ensemble(problem, t, x, spec)?;
    Ok(evaluation_from(problem, t, x, spec, &e.solution))
}

/// How a directional derivative of `u` is computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GradientMethod {
    VariationalBsde,
    /// Central difference with shared seeds; `eps = None` uses
    /// `1e-4 (1 + |x|)`.
    FiniteDifference { eps: Option<f64> },
}

/// `grad u(t,x) . h` with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEvaluation {
    pub t: f64,
    pub x: Vec<f64>,
    pub direction: Vec<f64>,
    pub dir_derivative: Vec<f64>,
    pub std_error: Vec<f64>,
    pub method: GradientMethod,
}

impl GradientEvaluation {
    pub fn estimate(&self, c: usize) -> McEstimate {
        McEstimate { mean: self.dir_derivative[c], std_error: self.std_error[c] }
    }
}

pub fn default_fd_eps(x: &[f64]) -> f64 {
    1e-4 * (1.0 + norm(x))
}

pub fn eval_grad_u(
    problem: &FbsdeProblem,
    t: f64,
    x: &[f64],
    direction: &[f64],
    method: GradientMethod,
    spec: &McSpec,
) -> Result<GradientEvaluation> {
    check_point(problem, t, x)?;
    spec.check()?;
    if direction.len() != x.len() {
        return Err(FbsdeError::structural("direction does not match dim_h"));
    }
    if norm(direction) == 0.0 {
        return Err(FbsdeError::domain("direction must be nonzero"));
    }
    let k = problem.spaces.dim_k;
    let (value, se): (Vec<f64>, Vec<f64>) = match method {
        GradientMethod::VariationalBsde => {
            if is_terminal(problem, t) {
                let mut out = vec![0.0; k];
                (problem.terminal.grad_dir)(x, direction, &mut out);
                (out, vec![0.0; k])
            } else {
                let e = solve_ensemble(problem, t, x, spec)?;
                let tangent = flow_derivative(problem, &e.paths, &e.increments, direction)?;
                let zeta = terminal_tangent(problem, &e.paths, &tangent);
                let v = solve_variational_bsde(problem, &e.paths, &e.increments, &e.solution, &tangent, &zeta, &spec.basis)?;
                (0..k).map(|c| v.g0_estimate(c)).map(|e| (e.mean, e.std_error)).unzip()
            }
        }
        GradientMethod::FiniteDifference { eps } => {
            let eps = eps.unwrap_or_else(|| default_fd_eps(x));
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(FbsdeError::domain(format!("finite-difference step must be positive, got {eps}")));
            }
            let plus: Vec<f64> = x.iter().zip(direction).map(|(a, b)| a + eps * b).collect();
            let minus: Vec<f64> = x.iter().zip(direction).map(|(a, b)| a - eps * b).collect();
            if is_terminal(problem, t) {
                let up = problem.terminal.eval(k, &plus);
                let dn = problem.terminal.eval(k, &minus);
                (up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * eps)).collect(), vec![0.0; k])
            } else {
                let up = solve_ensemble(problem, t, &plus, spec)?.solution;
                let dn = solve_ensemble(problem, t, &minus, spec)?.solution;
                (0..k)
                    .map(|c| {
                        let diffs: Vec<f64> = (0..spec.n_paths)
                            .map(|p| (up.pathwise(p)[c] - dn.pathwise(p)[c]) / (2.0 * eps))
                            .collect();
                        let se = McEstimate::from_samples(&diffs).std_error;
                        ((up.y(0, 0)[c] - dn.y(0, 0)[c]) / (2.0 * eps), se)
                    })
                    .unzip()
            }
        }
    };
    Ok(GradientEvaluation {
        t,
        x: x.to_vec(),
        direction: direction.to_vec(),
        dir_derivative: value,
        std_error: se,
        method,
    })
}

/// Monte-Carlo estimate of `P_{t,tau}[f](x) = E f(X(tau, t, x))`, one entry
/// per output of `f`.
pub fn transition_apply(
    problem: &FbsdeProblem,
    t: f64,
    tau: f64,
    x: &[f64],
    f: &(dyn Fn(&[f64], &mut [f64]) + Sync),
    out_dim: usize,
    spec: &McSpec,
) -> Result<Vec<McEstimate>> {
    check_point(problem, t, x)?;
    spec.check()?;
    if !(tau >= t && tau <= problem.horizon) {
        return Err(FbsdeError::domain(format!("tau = {tau} outside [{t}, {}]", problem.horizon)));
    }
    let mut buf = vec![0.0; out_dim];
    if tau == t {
        f(x, &mut buf);
        return Ok(buf.into_iter().map(McEstimate::exact).collect());
    }
    let grid = TimeGrid::new(t, tau, spec.n_steps, problem.horizon)?;
    let inc = generate_increments(spec.seed, spec.n_paths, &grid, problem.spaces.dim_xi)?;
    let paths = simulate_forward(problem, x, &grid, &inc)?;
    let mut samples = vec![Vec::with_capacity(spec.n_paths); out_dim];
    for p in 0..spec.n_paths {
        f(paths.terminal(p), &mut buf);
        for (c, s) in samples.iter_mut().enumerate() {
            s.push(buf[c]);
        }
    }
    Ok(samples.iter().map(|s| McEstimate::from_samples(s)).collect())
}

/// One quadrature node of the mild-formula audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureNode {
    pub tau: f64,
    pub weight: f64,
    pub value: McEstimate,
}

/// `u(t,x) - P_{t,T}[phi](x) - sum_j w_j P_{t,tau_j}[psi(tau_j, ., u, Z)](x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MildResidual {
    pub residual: f64,
    /// Combined standard error of the independent estimates entering the
    /// residual.
    pub std_error: f64,
    pub u: McEstimate,
    pub terminal_term: McEstimate,
    pub integral_term: f64,
    pub nodes: Vec<QuadratureNode>,
}

impl MildResidual {
    fn zero(u: f64) -> Self {
        Self {
            residual: 0.0,
            std_error: 0.0,
            u: McEstimate::exact(u),
            terminal_term: McEstimate::exact(u),
            integral_term: 0.0,
            nodes: Vec::new(),
        }
    }
}

fn require_scalar(problem: &FbsdeProblem) -> Result<()> {
    if problem.spaces.dim_k != 1 {
        return Err(FbsdeError::structural("operation requires a scalar value space (dim_k = 1)"));
    }
    Ok(())
}

/// Audits the variation-of-constants formula with trapezoid quadrature on
/// `quad_steps` sub-intervals. `u` and `Z` inside the integrand come from the
/// per-step regression surrogates of one main solve; each transition is
/// estimated on an independent child ensemble.
pub fn mild_residual(problem: &FbsdeProblem, t: f64, x: &[f64], quad_steps: usize, spec: &McSpec) -> Result<MildResidual> {
    check_point(problem, t, x)?;
    require_scalar(problem)?;
    spec.check()?;
    if quad_steps == 0 {
        return Err(FbsdeError::domain("quad_steps must be at least 1"));
    }
    if spec.n_steps % quad_steps != 0 {
        return Err(FbsdeError::domain(format!(
            "n_steps = {} must be a multiple of quad_steps = {quad_steps}",
            spec.n_steps
        )));
    }
    if is_terminal(problem, t) {
        return Ok(MildResidual::zero(problem.terminal.eval(1, x)[0]));
    }
    let main = solve_ensemble(problem, t, x, spec)?;
    let u = main.solution.y0_estimate(0);
    let xi = problem.spaces.dim_xi;
    let dim_h = problem.spaces.dim_h;
    let stride = spec.n_steps / quad_steps;
    let width = (problem.horizon - t) / quad_steps as f64;

    let phi = |y: &[f64], o: &mut [f64]| (problem.terminal.phi)(y, o);
    let terminal_spec = McSpec { seed: derive_seed(spec.seed, "child-terminal", 0, 0), ..*spec };
    let terminal_term = transition_apply(problem, t, problem.horizon, x, &phi, 1, &terminal_spec)?[0];

    let mut nodes = Vec::with_capacity(quad_steps + 1);
    for j in 0..=quad_steps {
        let idx = j * stride;
        let tau = main.grid.node(idx);
        let weight = if j == 0 || j == quad_steps { 0.5 * width } else { width };
        let integrand = |y: &[f64], o: &mut [f64]| {
            let mut value = [0.0];
            let mut z = vec![0.0; xi];
            if idx == spec.n_steps {
                (problem.terminal.phi)(y, &mut value);
                let mut g = vec![0.0; dim_h * xi];
                (problem.coefficients.diffusion)(tau, y, &mut g);
                let mut col = vec![0.0; dim_h];
                for c in 0..xi {
                    for r in 0..dim_h {
                        col[r] = g[r * xi + c];
                    }
                    let mut d = [0.0];
                    (problem.terminal.grad_dir)(y, &col, &mut d);
                    z[c] = d[0];
                }
            } else {
                let fit = &main.solution.fits[idx];
                fit.value.eval(y, &mut value);
                fit.z.eval(y, &mut z);
            }
            (problem.driver.psi)(tau, y, &value, &z, o);
        };
        let child = McSpec { n_steps: idx.max(1), ..spec.child(j as u64) };
        let value = if idx == 0 {
            let mut o = [0.0];
            let mut z = vec![0.0; xi];
            main.solution.fits[0].z.eval(x, &mut z);
            (problem.driver.psi)(tau, x, &[u.mean], &z, &mut o);
            McEstimate::exact(o[0])
        } else {
            transition_apply(problem, t, tau, x, &integrand, 1, &child)?[0]
        };
        nodes.push(QuadratureNode { tau, weight, value });
    }
    let integral_term: f64 = nodes.iter().map(|n| n.weight * n.value.mean).sum();
    let var = u.std_error.powi(2)
        + terminal_term.std_error.powi(2)
        + nodes.iter().map(|n| (n.weight * n.value.std_error).powi(2)).sum::<f64>();
    Ok(MildResidual {
        residual: u.mean - terminal_term.mean - integral_term,
        std_error: var.sqrt(),
        u,
        terminal_term,
        integral_term,
        nodes,
    })
}

/// Deviation between the solver's `Z` and `G^T grad u` on sampled states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZGradientReport {
    pub max_abs_deviation: f64,
    /// Largest `|G^T grad u|` over the same points.
    pub max_reference: f64,
    /// `max_abs_deviation / max_reference`, or the absolute deviation when
    /// the reference vanishes.
    pub relative_deviation: f64,
    pub nodes: Vec<usize>,
    pub n_points: usize,
}

/// Number of paths sampled per node by [`z_gradient_identity`].
pub const Z_IDENTITY_PATHS: usize = 1000;

/// Compares `Z_i` with `G(t_i, X_i)^T grad u(t_i, X_i)` at nodes
/// `n/4, n/2, 3n/4`. The gradient is a central difference of the fitted value
/// surrogate of `Y_i` with step `1e-4 (1 + |X_i|)`.
pub fn z_gradient_identity(problem: &FbsdeProblem, t: f64, x: &[f64], spec: &McSpec) -> Result<ZGradientReport> {
    check_point(problem, t, x)?;
    require_scalar(problem)?;
    spec.check()?;
    if is_terminal(problem, t) {
        return Err(FbsdeError::domain("z_gradient_identity needs t < T"));
    }
    let e = solve_ensemble(problem, t, x, spec)?;
    let n = spec.n_steps;
    let mut nodes: Vec<usize> = [n / 4, n / 2, 3 * n / 4].into_iter().filter(|&i| i >= 1 && i < n).collect();
    nodes.dedup();
    if nodes.is_empty() {
        nodes.push(0);
    }
    let dim = problem.spaces.dim_h;
    let xi = problem.spaces.dim_xi;
    let mut max_dev: f64 = 0.0;
    let mut max_ref: f64 = 0.0;
    let mut n_points = 0;
    let mut g = vec![0.0; dim * xi];
    let mut grad = vec![0.0; dim];
    let mut probe = vec![0.0; dim];
    for &i in &nodes {
        let tau = e.grid.node(i);
        let fit = &e.solution.fits[i].value;
        for p in 0..spec.n_paths.min(Z_IDENTITY_PATHS) {
            let xs = e.paths.state(p, i);
            let eps = default_fd_eps(xs);
            for m in 0..dim {
                let mut up = [0.0];
                let mut dn = [0.0];
                probe.copy_from_slice(xs);
                probe[m] += eps;
                fit.eval(&probe, &mut up);
                probe[m] = xs[m] - eps;
                fit.eval(&probe, &mut dn);
                grad[m] = (up[0] - dn[0]) / (2.0 * eps);
            }
            (problem.coefficients.diffusion)(tau, xs, &mut g);
            let z = e.solution.z(p, i);
            for j in 0..xi {
                let reference: f64 = (0..dim).map(|m| grad[m] * g[m * xi + j]).sum();
                max_dev = max_dev.max((z[j] - reference).abs());
                max_ref = max_ref.max(reference.abs());
            }
            n_points += 1;
        }
    }
    Ok(ZGradientReport {
        max_abs_deviation: max_dev,
        max_reference: max_ref,
        relative_deviation: if max_ref > 0.0 { max_dev / max_ref } else { max_dev },
        nodes,
        n_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoefficientSpec, DriverSpec, SemigroupSpec, SpaceSpec, TerminalSpec};
    use std::sync::Arc;

    fn heat(diffusion: f64, driver: DriverSpec, quadratic: bool) -> FbsdeProblem {
        let terminal = if quadratic {
            TerminalSpec {
                phi: Arc::new(|x, o| o[0] = x[0] * x[0]),
                grad_dir: Arc::new(|x, h, o| o[0] = 2.0 * x[0] * h[0]),
                growth_c: 2.0,
                growth_m: 1.0,
            }
        } else {
            TerminalSpec {
                phi: Arc::new(|x, o| o[0] = x[0]),
                grad_dir: Arc::new(|_, h, o| o[0] = h[0]),
                growth_c: 1.0,
                growth_m: 0.0,
            }
        };
        FbsdeProblem::new(
            SpaceSpec::new(1, 1, 1).unwrap(),
            SemigroupSpec::zero(1),
            CoefficientSpec::affine(1, 1, vec![0.0], vec![0.0], vec![diffusion]).unwrap(),
            driver,
            terminal,
            1.0,
        )
        .unwrap()
    }

    fn constant_driver(c: f64) -> DriverSpec {
        DriverSpec { psi: Arc::new(move |_, _, _, _, o| o[0] = c), ..DriverSpec::zero() }
    }

    #[test]
    fn terminal_time_is_exact() {
        let p = heat(1.0, DriverSpec::zero(), true);
        let spec = McSpec::new(100, 8, 1, RegressionBasis::polynomial(2));
        let e = eval_u(&p, 1.0, &[1.5], &spec).unwrap();
        assert_eq!(e.u_value, vec![2.25]);
        assert_eq!(e.std_error, vec![0.0]);
        let r = mild_residual(&p, 1.0, &[1.5], 4, &spec).unwrap();
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn heat_value() {
        let p = heat(1.0, DriverSpec::zero(), true);
        let spec = McSpec::new(20_000, 16, 3, RegressionBasis::polynomial(2));
        let e = eval_u(&p, 0.25, &[0.7], &spec).unwrap();
        assert!(e.estimate(0).covers(0.49 + 0.75, 3.0, 0.0), "{e:?}");
    }

    #[test]
    fn constant_driver_value() {
        let p = heat(1.0, constant_driver(0.5), true);
        let spec = McSpec::new(20_000, 16, 4, RegressionBasis::polynomial(2));
        let e = eval_u(&p, 0.0, &[-0.4], &spec).unwrap();
        assert!(e.estimate(0).covers(0.16 + 1.0 + 0.5, 3.0, 1e-12), "{e:?}");
    }

    #[test]
    fn gradient_of_identity_terminal() {
        let p = heat(1.0, DriverSpec::zero(), false);
        let spec = McSpec::new(2000, 8, 5, RegressionBasis::polynomial(1));
        for method in [GradientMethod::VariationalBsde, GradientMethod::FiniteDifference { eps: None }] {
            let g = eval_grad_u(&p, 0.3, &[1.2], &[0.5], method, &spec).unwrap();
            assert!((g.dir_derivative[0] - 0.5).abs() < 1e-8, "{method:?}: {g:?}");
        }
        assert!(eval_grad_u(&p, 0.3, &[1.2], &[0.0], GradientMethod::VariationalBsde, &spec).is_err());
        assert!(matches!(
            eval_grad_u(&p, 0.3, &[1.2], &[1.0], GradientMethod::FiniteDifference { eps: Some(0.0) }, &spec),
            Err(FbsdeError::Domain(_))
        ));
    }

    #[test]
    fn deterministic_linear_gradient() {
        let d = DriverSpec::scalar_in_y(|y| -y, |_| -1.0, -1.0);
        let p = heat(0.0, d, false);
        let spec = McSpec::new(1, 1024, 5, RegressionBasis::pathwise_exact());
        for method in [GradientMethod::VariationalBsde, GradientMethod::FiniteDifference { eps: None }] {
            let g = eval_grad_u(&p, 0.0, &[2.0], &[1.0], method, &spec).unwrap();
            assert!((g.dir_derivative[0] - (-1.0f64).exp()).abs() <= 2e-3);
        }
    }

    #[test]
    fn transition_examples() {
        let p = heat(1.0, DriverSpec::zero(), true);
        let spec = McSpec::new(20_000, 8, 9, RegressionBasis::polynomial(2));
        let one = transition_apply(&p, 0.2, 0.9, &[0.3], &|_, o| o[0] = 1.0, 1, &spec).unwrap();
        assert_eq!(one[0], McEstimate::exact(1.0));
        let lin = transition_apply(&p, 0.2, 0.9, &[0.3], &|y, o| o[0] = y[0], 1, &spec).unwrap();
        assert!(lin[0].covers(0.3, 3.0, 0.0));
        let sq = transition_apply(&p, 0.2, 0.9, &[0.3], &|y, o| o[0] = y[0] * y[0], 1, &spec).unwrap();
        assert!(sq[0].covers(0.09 + 0.7, 3.0, 0.0));
    }

    #[test]
    fn mild_residual_vanishes_on_additive_cases() {
        let spec = McSpec::new(20_000, 16, 21, RegressionBasis::polynomial(2));
        for driver in [DriverSpec::zero(), constant_driver(0.5)] {
            let p = heat(1.0, driver, true);
            let r = mild_residual(&p, 0.0, &[0.5], 8, &spec).unwrap();
            assert!(r.residual.abs() <= 3.0 * r.std_error, "{r:?}");
        }
        let p = heat(1.0, DriverSpec::zero(), true);
        assert!(mild_residual(&p, 0.0, &[0.5], 3, &spec).is_err());
        assert!(mild_residual(&p, 0.0, &[0.5], 0, &spec).is_err());
    }

    #[test]
    fn z_identity_without_noise() {
        let d = DriverSpec::scalar_in_y(|y| -y, |_| -1.0, -1.0);
        let p = heat(0.0, d, false);
        let spec = McSpec::new(1, 64, 5, RegressionBasis::pathwise_exact());
        let r = z_gradient_identity(&p, 0.0, &[1.0], &spec).unwrap();
        assert_eq!(r.max_abs_deviation, 0.0);
    }

    #[test]
    fn z_identity_heat() {
        let p = heat(1.0, DriverSpec::zero(), true);
        let spec = McSpec::new(20_000, 16, 8, RegressionBasis::polynomial(2));
        let r = z_gradient_identity(&p, 0.0, &[0.5], &spec).unwrap();
        assert!(r.relative_deviation <= 0.1, "{r:?}");
    }
}
