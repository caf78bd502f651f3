//! Least-squares estimators of conditional expectations `E[target | X_i]`.
//!
//! Targets are projected on total-degree monomials of the state. The design
//! matrix is factored once per time step by a thin SVD, singular values
//! below `1e-10` of the largest are dropped, and the minimum-norm solution
//! is returned for every target sharing the factorization. When all paths
//! share the same state (deterministic forward dynamics, or the initial node)
//! the conditional expectation is the plain cross-path mean.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FbsdeError, Result};
use crate::stats::{mean, pairwise_sum};

/// Relative singular-value cutoff of the rank-revealing solve.
pub const RANK_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    PolynomialTotalDegree,
    PathwiseExact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub kind: BasisKind,
    pub degree: usize,
}

impl RegressionBasis {
    pub fn polynomial(degree: usize) -> Self {
        Self { kind: BasisKind::PolynomialTotalDegree, degree }
    }

    pub fn pathwise_exact() -> Self {
        Self { kind: BasisKind::PathwiseExact, degree: 0 }
    }

    /// `C(dim + degree, degree)` for the polynomial kind, 1 otherwise.
    pub fn n_features(&self, dim: usize) -> usize {
        match self.kind {
            BasisKind::PathwiseExact => 1,
            BasisKind::PolynomialTotalDegree => binomial(dim + self.degree, self.degree),
        }
    }

    /// Feature count must not exceed a tenth of the ensemble.
    pub fn check(&self, dim: usize, n_paths: usize) -> Result<()> {
        if self.kind == BasisKind::PolynomialTotalDegree && self.n_features(dim) * 10 > n_paths {
            return Err(FbsdeError::domain(format!(
                "basis of degree {} in dimension {dim} has {} features, more than n_paths/10 = {}",
                self.degree,
                self.n_features(dim),
                n_paths / 10
            )));
        }
        Ok(())
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Total-degree monomials, graded order with the constant first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Monomials {
    pub dim: usize,
    pub exponents: Vec<Vec<u32>>,
}

impl Monomials {
    pub fn new(dim: usize, degree: usize) -> Self {
        let mut exponents = Vec::new();
        for total in 0..=degree as u32 {
            let mut current = vec![0u32; dim];
            push_compositions(total, 0, &mut current, &mut exponents);
        }
        Self { dim, exponents }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e.iter().zip(x).map(|(&p, &v)| v.powi(p as i32)).product();
        }
    }

    /// Partial derivative of every monomial in coordinate `k`.
    pub fn eval_partial(&self, x: &[f64], k: usize, out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = if e[k] == 0 {
                0.0
            } else {
                e.iter()
                    .zip(x)
                    .enumerate()
                    .map(|(j, (&p, &v))| if j == k { p as f64 * v.powi(p as i32 - 1) } else { v.powi(p as i32) })
                    .product()
            };
        }
    }
}

fn push_compositions(remaining: u32, idx: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if idx + 1 == current.len() {
        current[idx] = remaining;
        out.push(current.clone());
        return;
    }
    for take in (0..=remaining).rev() {
        current[idx] = take;
        push_compositions(remaining - take, idx + 1, current, out);
    }
    current[idx] = 0;
}

/// A fitted map `state -> targets`, usable off the training sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Surrogate {
    /// Cross-path mean of each target.
    Mean(Vec<f64>),
    /// Coefficients laid out `[target][feature]`.
    Polynomial { monomials: Arc<Monomials>, coefficients: Vec<f64> },
}

impl Surrogate {
    pub fn n_targets(&self) -> usize {
        match self {
            Self::Mean(m) => m.len(),
            Self::Polynomial { monomials, coefficients } => coefficients.len() / monomials.len(),
        }
    }

    pub fn coefficients(&self, target: usize) -> &[f64] {
        match self {
            Self::Mean(m) => std::slice::from_ref(&m[target]),
            Self::Polynomial { monomials, coefficients } => {
                let p = monomials.len();
                &coefficients[target * p..(target + 1) * p]
            }
        }
    }

    /// Evaluates all targets at `x`.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Mean(m) => out.copy_from_slice(m),
            Self::Polynomial { monomials, coefficients } => {
                let p = monomials.len();
                let mut phi = vec![0.0; p];
                monomials.eval(x, &mut phi);
                for (t, o) in out.iter_mut().enumerate() {
                    *o = dot(&coefficients[t * p..(t + 1) * p], &phi);
                }
            }
        }
    }

    /// Gradient of target `target` at `x`; zero for the mean surrogate.
    pub fn gradient(&self, x: &[f64], target: usize, out: &mut [f64]) {
        match self {
            Self::Mean(_) => out.fill(0.0),
            Self::Polynomial { monomials, coefficients } => {
                let p = monomials.len();
                let c = &coefficients[target * p..(target + 1) * p];
                let mut dphi = vec![0.0; p];
                for (k, o) in out.iter_mut().enumerate() {
                    monomials.eval_partial(x, k, &mut dphi);
                    *o = dot(c, &dphi);
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fitted values for every path plus the reusable surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    /// Laid out `[path][target]`.
    pub fitted: Vec<f64>,
    pub surrogate: Surrogate,
}

impl Fit {
    pub fn value(&self, path: usize, target: usize) -> f64 {
        self.fitted[path * self.surrogate.n_targets() + target]
    }
}

/// Diagnostics of one factorization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorInfo {
    pub n_features: usize,
    pub rank: usize,
    pub rank_deficient: bool,
    /// True when all paths share one state and the mean was used.
    pub exact_mean: bool,
}

/// Factored design matrix for one set of features.
pub struct Regressor {
    n_paths: usize,
    info: FactorInfo,
    kind: Factor,
}

enum Factor {
    Mean,
    Svd {
        monomials: Arc<Monomials>,
        /// Retained left singular vectors, `n_paths x rank`.
        u: DMatrix<f64>,
        /// Retained right singular vectors scaled by `1/sigma`, `p x rank`.
        v_scaled: DMatrix<f64>,
    },
}

impl Regressor {
    /// Factors the design matrix of `features` (laid out `[path][dim]`).
    pub fn new(features: &[f64], n_paths: usize, dim: usize, basis: &RegressionBasis) -> Result<Self> {
        if n_paths == 0 || features.len() != n_paths * dim {
            return Err(FbsdeError::structural(format!(
                "feature array has {} entries, expected {n_paths} x {dim}",
                features.len()
            )));
        }
        let first = &features[..dim];
        let degenerate = features.chunks_exact(dim).all(|row| row == first);
        if degenerate {
            return Ok(Self {
                n_paths,
                info: FactorInfo { n_features: 1, rank: 1, rank_deficient: false, exact_mean: true },
                kind: Factor::Mean,
            });
        }
        if basis.kind == BasisKind::PathwiseExact {
            return Err(FbsdeError::structural(
                "pathwise-exact regression requires identical features on all paths",
            ));
        }
        basis.check(dim, n_paths)?;
        let monomials = Arc::new(Monomials::new(dim, basis.degree));
        let p = monomials.len();
        let mut design = DMatrix::<f64>::zeros(n_paths, p);
        let mut row = vec![0.0; p];
        for (k, x) in features.chunks_exact(dim).enumerate() {
            monomials.eval(x, &mut row);
            for (j, v) in row.iter().enumerate() {
                design[(k, j)] = *v;
            }
        }
        let svd = design.svd(true, true);
        let u_full = svd.u.expect("left singular vectors requested");
        let v_t = svd.v_t.expect("right singular vectors requested");
        let sigma = svd.singular_values;
        let s_max = sigma.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..sigma.len()).filter(|&i| sigma[i] > RANK_THRESHOLD * s_max).collect();
        let rank = keep.len();
        let u = DMatrix::from_fn(n_paths, rank, |r, c| u_full[(r, keep[c])]);
        let v_scaled = DMatrix::from_fn(p, rank, |r, c| v_t[(keep[c], r)] / sigma[keep[c]]);
        Ok(Self {
            n_paths,
            info: FactorInfo { n_features: p, rank, rank_deficient: rank < p, exact_mean: false },
            kind: Factor::Svd { monomials, u, v_scaled },
        })
    }

    pub fn info(&self) -> FactorInfo {
        self.info
    }

    /// Projects targets laid out `[path][target]`.
    pub fn fit(&self, targets: &[f64], n_targets: usize) -> Result<Fit> {
        if targets.len() != self.n_paths * n_targets {
            return Err(FbsdeError::structural(format!(
                "target array has {} entries, expected {} x {n_targets}",
                targets.len(),
                self.n_paths
            )));
        }
        match &self.kind {
            Factor::Mean => {
                let means: Vec<f64> = (0..n_targets)
                    .map(|t| {
                        let col: Vec<f64> = targets.iter().skip(t).step_by(n_targets).copied().collect();
                        mean(&col)
                    })
                    .collect();
                let fitted = means.iter().copied().cycle().take(self.n_paths * n_targets).collect();
                Ok(Fit { fitted, surrogate: Surrogate::Mean(means) })
            }
            Factor::Svd { monomials, u, v_scaled } => {
                let b = DMatrix::from_fn(self.n_paths, n_targets, |r, c| targets[r * n_targets + c]);
                let ub = u.tr_mul(&b);
                let coef = v_scaled * &ub;
                let fitted_m = u * &ub;
                let mut fitted = vec![0.0; self.n_paths * n_targets];
                for r in 0..self.n_paths {
                    for c in 0..n_targets {
                        fitted[r * n_targets + c] = fitted_m[(r, c)];
                    }
                }
                let p = monomials.len();
                let mut coefficients = vec![0.0; p * n_targets];
                for t in 0..n_targets {
                    for j in 0..p {
                        coefficients[t * p + j] = coef[(j, t)];
                    }
                }
                Ok(Fit { fitted, surrogate: Surrogate::Polynomial { monomials: monomials.clone(), coefficients } })
            }
        }
    }
}

/// One-shot least-squares projection of `targets` on the basis evaluated at
/// `features`.
pub fn regress_conditional(
    features: &[f64],
    n_paths: usize,
    dim: usize,
    targets: &[f64],
    n_targets: usize,
    basis: &RegressionBasis,
) -> Result<(Fit, FactorInfo)> {
    let reg = Regressor::new(features, n_paths, dim, basis)?;
    let fit = reg.fit(targets, n_targets)?;
    Ok((fit, reg.info()))
}

/// Root-mean-square of `targets - fitted` for target `t`.
pub fn residual_rms(targets: &[f64], fit: &Fit, n_targets: usize, t: usize) -> f64 {
    let sq: Vec<f64> = targets
        .iter()
        .skip(t)
        .step_by(n_targets)
        .zip(fit.fitted.iter().skip(t).step_by(n_targets))
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    (pairwise_sum(&sq) / sq.len().max(1) as f64).sqrt()
}
