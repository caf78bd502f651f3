//! Exponential Euler simulation of the mild forward equation
//!
//! ```text
//! X_{i+1} = e^{hA} ( X_i + h F(t_i, X_i) + G(t_i, X_i) dW_i )
//! ```
//!
//! on seeded Brownian ensembles. Paths are simulated in parallel into
//! disjoint slots; every path only reads its own increment substream.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{FbsdeError, Result};
use crate::grid::TimeGrid;
use crate::model::FbsdeProblem;
use crate::rng;
use crate::stats::{norm, McEstimate};

/// States beyond this magnitude are treated as non-finite.
pub const BLOWUP_THRESHOLD: f64 = 1e12;

/// Brownian increments `dW` for an ensemble, laid out `[path][step][xi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementBundle {
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub dim_xi: usize,
    pub step: f64,
    data: Vec<f64>,
}

impl IncrementBundle {
    /// Increment `dW_step` on path `path`.
    pub fn get(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.n_steps + step) * self.dim_xi;
        &self.data[o..o + self.dim_xi]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn conforms(&self, grid: &TimeGrid, dim_xi: usize) -> Result<()> {
        if self.n_steps != grid.n_steps || self.dim_xi != dim_xi {
            return Err(FbsdeError::structural(format!(
                "increments are {} steps x {} noise dims, grid/model need {} x {}",
                self.n_steps, self.dim_xi, grid.n_steps, dim_xi
            )));
        }
        if (self.step - grid.step()).abs() > 1e-12 * grid.step() {
            return Err(FbsdeError::structural("increments were drawn for a different step size"));
        }
        Ok(())
    }
}

/// Draws i.i.d. `N(0, h)` increments. Path `k` uses the substream
/// `(seed, "increments", k)`, so any subset of paths is reproducible alone.
pub fn generate_increments(seed: u64, n_paths: usize, grid: &TimeGrid, dim_xi: usize) -> Result<IncrementBundle> {
    if n_paths == 0 {
        return Err(FbsdeError::domain("n_paths must be >= 1"));
    }
    if dim_xi == 0 {
        return Err(FbsdeError::structural("dim_xi must be >= 1"));
    }
    let h = grid.step();
    let sd = h.sqrt();
    let stride = grid.n_steps * dim_xi;
    let mut data = vec![0.0; n_paths * stride];
    data.par_chunks_mut(stride).enumerate().for_each(|(path, chunk)| {
        let mut r = rng::stream(seed, "increments", path as u64, 0);
        for v in chunk.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut r);
            *v = sd * g;
        }
    });
    Ok(IncrementBundle { seed, n_paths, n_steps: grid.n_steps, dim_xi, step: h, data })
}

/// Forward trajectories laid out `[path][node][h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub initial_state: Vec<f64>,
    pub n_paths: usize,
    pub dim_h: usize,
    /// Seed of the increments the paths were driven by.
    pub increments_seed: u64,
    states: Vec<f64>,
}

impl PathBundle {
    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        let o = (path * (self.grid.n_steps + 1) + node) * self.dim_h;
        &self.states[o..o + self.dim_h]
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        self.state(path, self.grid.n_steps)
    }

    pub fn path(&self, path: usize) -> &[f64] {
        let stride = (self.grid.n_steps + 1) * self.dim_h;
        &self.states[path * stride..(path + 1) * stride]
    }

    /// True when every path has identical states at `node`.
    pub fn is_degenerate_at(&self, node: usize) -> bool {
        let first = self.state(0, node);
        (1..self.n_paths).all(|p| self.state(p, node) == first)
    }
}

/// One exponential Euler step. `extra` is an additional noise-space drift
/// increment (the `r h` term of a controlled system), added to `dw`.
pub(crate) struct Stepper<'a> {
    problem: &'a FbsdeProblem,
    factors: Vec<f64>,
    h: f64,
    f: Vec<f64>,
    g: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(problem: &'a FbsdeProblem, h: f64) -> Self {
        let sp = problem.spaces;
        Self {
            problem,
            factors: problem.semigroup.factors(h),
            h,
            f: vec![0.0; sp.dim_h],
            g: vec![0.0; sp.g_len()],
        }
    }

    pub(crate) fn step(&mut self, t: f64, x: &[f64], dw: &[f64], extra: Option<&[f64]>, out: &mut [f64]) {
        let dim_xi = self.problem.spaces.dim_xi;
        (self.problem.coefficients.drift)(t, x, &mut self.f);
        (self.problem.coefficients.diffusion)(t, x, &mut self.g);
        for i in 0..x.len() {
            let mut acc = x[i] + self.h * self.f[i];
            let row = &self.g[i * dim_xi..(i + 1) * dim_xi];
            match extra {
                Some(e) => {
                    for j in 0..dim_xi {
                        acc += row[j] * (e[j] + dw[j]);
                    }
                }
                None => {
                    for j in 0..dim_xi {
                        acc += row[j] * dw[j];
                    }
                }
            }
            out[i] = self.factors[i] * acc;
        }
    }
}

pub(crate) fn check_finite(x: &[f64], step: usize, path: usize) -> Result<()> {
    let m = norm(x);
    if !m.is_finite() || m > BLOWUP_THRESHOLD {
        return Err(FbsdeError::Blowup { step, path, magnitude: m });
    }
    Ok(())
}

/// Returns the error of the lowest-indexed failing path, if any.
pub(crate) fn first_error(results: Vec<Result<()>>) -> Result<()> {
    results.into_iter().collect()
}

/// Simulates nodes `from..=n` of each path, starting from `start(path)` at
/// node `from`. `out` holds `n - from + 1` nodes per path.
fn propagate<'s>(
    problem: &FbsdeProblem,
    grid: &TimeGrid,
    from: usize,
    start: impl Fn(usize) -> &'s [f64] + Sync,
    increments: &IncrementBundle,
    out: &mut [f64],
) -> Result<()> {
    let dim = problem.spaces.dim_h;
    let n = grid.n_steps;
    let stride = (n - from + 1) * dim;
    let h = grid.step();
    let results: Vec<Result<()>> = out
        .par_chunks_mut(stride)
        .enumerate()
        .map(|(path, chunk)| {
            let mut stepper = Stepper::new(problem, h);
            let x0 = start(path);
            chunk[..dim].copy_from_slice(x0);
            check_finite(x0, from, path)?;
            for i in from..n {
                let local = i - from;
                let (head, tail) = chunk.split_at_mut((local + 1) * dim);
                let x = &head[local * dim..];
                let next = &mut tail[..dim];
                stepper.step(grid.node(i), x, increments.get(path, i), None, next);
                check_finite(next, i + 1, path)?;
            }
            Ok(())
        })
        .collect();
    first_error(results)
}

/// Simulates the forward equation from `x` at `grid.t_start`.
pub fn simulate_forward(
    problem: &FbsdeProblem,
    x: &[f64],
    grid: &TimeGrid,
    increments: &IncrementBundle,
) -> Result<PathBundle> {
    if x.len() != problem.spaces.dim_h {
        return Err(FbsdeError::structural(format!(
            "initial state has {} entries, dim_h = {}",
            x.len(),
            problem.spaces.dim_h
        )));
    }
    increments.conforms(grid, problem.spaces.dim_xi)?;
    if grid.t_end > problem.horizon * (1.0 + 1e-14) {
        return Err(FbsdeError::domain("grid extends beyond the model horizon"));
    }
    let n_paths = increments.n_paths;
    let mut states = vec![0.0; n_paths * (grid.n_steps + 1) * x.len()];
    propagate(problem, grid, 0, |_| x, increments, &mut states)?;
    Ok(PathBundle {
        grid: *grid,
        initial_state: x.to_vec(),
        n_paths,
        dim_h: x.len(),
        increments_seed: increments.seed,
        states,
    })
}

/// `max |X(tau, s, X(s,t,x)) - X(tau, t, x)|` over nodes `tau` in `[s, t_end]`
/// and all paths, where the restarted simulation reuses the increments of
/// the original one on `[s, t_end]`.
pub fn flow_discrepancy(
    problem: &FbsdeProblem,
    t: f64,
    s: f64,
    x: &[f64],
    grid: &TimeGrid,
    increments: &IncrementBundle,
) -> Result<f64> {
    if t != grid.t_start {
        return Err(FbsdeError::domain(format!("t = {t} must equal the grid start {}", grid.t_start)));
    }
    if !(s >= t && s <= grid.t_end) {
        return Err(FbsdeError::domain(format!("restart time {s} outside [{t}, {}]", grid.t_end)));
    }
    let from = grid
        .node_index(s)
        .ok_or_else(|| FbsdeError::domain(format!("restart time {s} is not a grid node")))?;
    let full = simulate_forward(problem, x, grid, increments)?;
    let n = grid.n_steps;
    let dim = problem.spaces.dim_h;
    let mut restarted = vec![0.0; full.n_paths * (n - from + 1) * dim];
    propagate(problem, grid, from, |p| full.state(p, from), increments, &mut restarted)?;
    let stride = (n - from + 1) * dim;
    let worst = (0..full.n_paths)
        .map(|p| {
            let tail = &restarted[p * stride..(p + 1) * stride];
            (from..=n)
                .map(|i| {
                    let a = &tail[(i - from) * dim..(i - from + 1) * dim];
                    let d: Vec<f64> = a.iter().zip(full.state(p, i)).map(|(u, v)| u - v).collect();
                    norm(&d)
                })
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    Ok(worst)
}

/// Monte-Carlo estimate of `E[sup_tau |X_tau|^p]` over the grid nodes.
pub fn sup_moment(paths: &PathBundle, p: f64) -> Result<McEstimate> {
    if !(p >= 1.0) {
        return Err(FbsdeError::domain(format!("moment order must be >= 1, got {p}")));
    }
    let samples: Vec<f64> = (0..paths.n_paths)
        .map(|k| {
            (0..=paths.grid.n_steps)
                .map(|i| norm(paths.state(k, i)))
                .fold(0.0, f64::max)
                .powf(p)
        })
        .collect();
    Ok(McEstimate::from_samples(&samples))
}
