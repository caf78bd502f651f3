//! Finite-dimensional model of the coupled forward-backward system.
//!
//! The state space `H`, the noise space `Xi` and the value space `K` are
//! truncated to `R^d`. The generator `A` is diagonal, so `e^{tA}` is applied
//! exactly. Matrices are stored row-major in flat slices:
//!
//! * `G(t,x)` is `dim_h x dim_xi`,
//! * `z` (an element of `L_2(Xi, K)`) is `dim_k x dim_xi`,
//! * `d_y psi` is `dim_k x dim_k`.
//!
//! All callables write into caller-provided buffers so that the inner loops
//! of the solvers do not allocate.

use std::fmt;
use std::sync::Arc;

use crate::error::{FbsdeError, Result};
use crate::stats::norm;

/// `(t, x) -> out`, used for `F` (length `dim_h`) and `G` (`dim_h * dim_xi`).
pub type TimeStateFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, h) -> out`, the directional derivative of a [`TimeStateFn`] along `h`.
pub type TimeStateDirFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(s, x, y, z) -> out`.
pub type DriverFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(s, x, y, z, direction) -> out`.
pub type DriverDirFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `x -> out`.
pub type StateFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `(x, h) -> out`.
pub type StateDirFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Scalar function of time.
pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Dimensions of the truncated spaces `H`, `Xi` and `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpaceSpec {
    pub dim_h: usize,
    pub dim_xi: usize,
    pub dim_k: usize,
}

impl SpaceSpec {
    pub fn new(dim_h: usize, dim_xi: usize, dim_k: usize) -> Result<Self> {
        if dim_h == 0 || dim_xi == 0 || dim_k == 0 {
            return Err(FbsdeError::structural(format!(
                "all dimensions must be >= 1, got dim_h={dim_h} dim_xi={dim_xi} dim_k={dim_k}"
            )));
        }
        Ok(Self { dim_h, dim_xi, dim_k })
    }

    /// Length of a flattened `z` value.
    pub fn z_len(&self) -> usize {
        self.dim_k * self.dim_xi
    }

    /// Length of a flattened `G(t,x)` value.
    pub fn g_len(&self) -> usize {
        self.dim_h * self.dim_xi
    }
}

/// Diagonal representation of the generator `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemigroupSpec {
    pub eigenvalues: Vec<f64>,
}

impl SemigroupSpec {
    pub fn new(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.iter().any(|e| !e.is_finite()) {
            return Err(FbsdeError::structural("semigroup eigenvalues must be finite"));
        }
        Ok(Self { eigenvalues })
    }

    pub fn zero(dim: usize) -> Self {
        Self { eigenvalues: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Diagonal of `e^{dt A}`.
    pub fn factors(&self, dt: f64) -> Vec<f64> {
        self.eigenvalues.iter().map(|e| (e * dt).exp()).collect()
    }

    /// `sup_{s in [0,T]} |e^{sA}| = max(1, max_k e^{T eig_k})`.
    pub fn sup_norm(&self, horizon: f64) -> f64 {
        self.eigenvalues
            .iter()
            .map(|e| (e * horizon).exp())
            .fold(1.0, f64::max)
    }
}

/// Applies `e^{dt A}` to `v`.
pub fn semigroup_apply(semigroup: &SemigroupSpec, dt: f64, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != semigroup.dim() {
        return Err(FbsdeError::structural(format!(
            "vector has {} entries, semigroup acts on dimension {}",
            v.len(),
            semigroup.dim()
        )));
    }
    if !(dt >= 0.0) {
        return Err(FbsdeError::domain(format!("time step must be >= 0, got {dt}")));
    }
    Ok(semigroup
        .eigenvalues
        .iter()
        .zip(v)
        .map(|(e, x)| (e * dt).exp() * x)
        .collect())
}

/// Drift `F`, diffusion `G` and their derivatives.
#[derive(Clone)]
pub struct CoefficientSpec {
    pub drift: TimeStateFn,
    pub drift_dir: TimeStateDirFn,
    pub diffusion: TimeStateFn,
    pub diffusion_dir: TimeStateDirFn,
    pub lipschitz_l: f64,
    /// Exponent of the Hilbert-Schmidt singularity; metadata only.
    pub gamma: f64,
}

impl CoefficientSpec {
    /// `F(t,x) = B x + b` and constant `G`.
    pub fn affine(
        dim_h: usize,
        dim_xi: usize,
        drift_matrix: Vec<f64>,
        drift_offset: Vec<f64>,
        diffusion: Vec<f64>,
    ) -> Result<Self> {
        if drift_matrix.len() != dim_h * dim_h
            || drift_offset.len() != dim_h
            || diffusion.len() != dim_h * dim_xi
        {
            return Err(FbsdeError::structural("affine coefficient shapes do not match dimensions"));
        }
        let b_norm = frobenius(&drift_matrix);
        let lipschitz_l = b_norm.max(norm(&drift_offset)).max(frobenius(&diffusion));
        let bm = Arc::new(drift_matrix);
        let bo = Arc::new(drift_offset);
        let g = Arc::new(diffusion);
        let (bm1, bm2) = (bm.clone(), bm);
        Ok(Self {
            drift: Arc::new(move |_t, x, out| {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = bo[i] + (0..x.len()).map(|j| bm1[i * x.len() + j] * x[j]).sum::<f64>();
                }
            }),
            drift_dir: Arc::new(move |_t, _x, h, out| {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..h.len()).map(|j| bm2[i * h.len() + j] * h[j]).sum();
                }
            }),
            diffusion: Arc::new(move |_t, _x, out| out.copy_from_slice(&g)),
            diffusion_dir: Arc::new(|_t, _x, _h, out| out.fill(0.0)),
            lipschitz_l,
            gamma: 0.0,
        })
    }
}

impl fmt::Debug for CoefficientSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSpec")
            .field("lipschitz_l", &self.lipschitz_l)
            .field("gamma", &self.gamma)
            .finish_non_exhaustive()
    }
}

/// The backward generator `psi` with its partial derivatives and the
/// constants of the structural hypotheses.
///
/// `growth_c` plays the role of both the gradient-bound constant and the
/// constant of the derived growth bound on `|psi|`.
#[derive(Clone)]
pub struct DriverSpec {
    pub psi: DriverFn,
    /// `d_x psi . dx`, writes `dim_k` entries.
    pub d_x: DriverDirFn,
    /// Jacobian `d_y psi`, writes `dim_k * dim_k` entries.
    pub d_y: DriverFn,
    /// `d_z psi . dz`, writes `dim_k` entries.
    pub d_z: DriverDirFn,
    pub mu: f64,
    pub lip_z: f64,
    pub growth_m: f64,
    pub growth_n: f64,
    pub growth_c: f64,
    pub q: TimeFn,
    /// `L^1(0,T)` norm of `q`, supplied by the model author.
    pub q_l1: f64,
}

impl DriverSpec {
    /// The zero driver.
    pub fn zero() -> Self {
        Self {
            psi: Arc::new(|_, _, _, _, out| out.fill(0.0)),
            d_x: Arc::new(|_, _, _, _, _, out| out.fill(0.0)),
            d_y: Arc::new(|_, _, _, _, out| out.fill(0.0)),
            d_z: Arc::new(|_, _, _, _, _, out| out.fill(0.0)),
            mu: 0.0,
            lip_z: 0.0,
            growth_m: 0.0,
            growth_n: 0.0,
            growth_c: 0.0,
            q: Arc::new(|_| 0.0),
            q_l1: 0.0,
        }
    }

    /// A scalar driver `psi(s,x,y,z) = f(y)` for `dim_k = 1`, with `f'` given.
    /// Growth constants are set to zero and must be filled by the caller.
    pub fn scalar_in_y(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
        mu: f64,
    ) -> Self {
        Self {
            psi: Arc::new(move |_, _, y, _, out| out[0] = f(y[0])),
            d_y: Arc::new(move |_, _, y, _, out| out[0] = df(y[0])),
            mu,
            ..Self::zero()
        }
    }

    /// Evaluates `psi` into a fresh vector.
    pub fn eval(&self, dim_k: usize, s: f64, x: &[f64], y: &[f64], z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; dim_k];
        (self.psi)(s, x, y, z, &mut out);
        out
    }
}

impl fmt::Debug for DriverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriverSpec")
            .field("mu", &self.mu)
            .field("lip_z", &self.lip_z)
            .field("growth_m", &self.growth_m)
            .field("growth_n", &self.growth_n)
            .field("growth_c", &self.growth_c)
            .field("q_l1", &self.q_l1)
            .finish_non_exhaustive()
    }
}

/// Terminal map `phi` with its gradient.
#[derive(Clone)]
pub struct TerminalSpec {
    pub phi: StateFn,
    pub grad_dir: StateDirFn,
    pub growth_c: f64,
    pub growth_m: f64,
}

impl TerminalSpec {
    pub fn eval(&self, dim_k: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; dim_k];
        (self.phi)(x, &mut out);
        out
    }
}

impl fmt::Debug for TerminalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TerminalSpec")
            .field("growth_c", &self.growth_c)
            .field("growth_m", &self.growth_m)
            .finish_non_exhaustive()
    }
}

/// The full coupled system on `[0, horizon]`.
#[derive(Debug, Clone)]
pub struct FbsdeProblem {
    pub spaces: SpaceSpec,
    pub semigroup: SemigroupSpec,
    pub coefficients: CoefficientSpec,
    pub driver: DriverSpec,
    pub terminal: TerminalSpec,
    pub horizon: f64,
}

impl FbsdeProblem {
    pub fn new(
        spaces: SpaceSpec,
        semigroup: SemigroupSpec,
        coefficients: CoefficientSpec,
        driver: DriverSpec,
        terminal: TerminalSpec,
        horizon: f64,
    ) -> Result<Self> {
        if semigroup.dim() != spaces.dim_h {
            return Err(FbsdeError::structural(format!(
                "semigroup has {} eigenvalues but dim_h = {}",
                semigroup.dim(),
                spaces.dim_h
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(FbsdeError::domain(format!("horizon must be positive, got {horizon}")));
        }
        if !(0.0..0.5).contains(&coefficients.gamma) {
            return Err(FbsdeError::domain("gamma must lie in [0, 1/2)"));
        }
        let nonneg = [
            ("lipschitz_l", coefficients.lipschitz_l),
            ("lip_z", driver.lip_z),
            ("growth_m", driver.growth_m),
            ("growth_n", driver.growth_n),
            ("growth_c", driver.growth_c),
            ("q_l1", driver.q_l1),
            ("terminal growth_c", terminal.growth_c),
            ("terminal growth_m", terminal.growth_m),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                return Err(FbsdeError::domain(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !driver.mu.is_finite() {
            return Err(FbsdeError::domain("mu must be finite"));
        }
        Ok(Self { spaces, semigroup, coefficients, driver, terminal, horizon })
    }

    /// `p_* = max(2, n) + 1/(m+1)`, reported as metadata.
    pub fn p_star(&self) -> f64 {
        self.driver.growth_n.max(2.0) + 1.0 / (self.driver.growth_m + 1.0)
    }

    /// True when `G` vanishes at the given state, i.e. the forward
    /// dynamics started there receive no noise.
    pub fn diffusion_vanishes(&self, t: f64, x: &[f64]) -> bool {
        let mut g = vec![0.0; self.spaces.g_len()];
        (self.coefficients.diffusion)(t, x, &mut g);
        g.iter().all(|v| *v == 0.0)
    }
}

/// Result of [`driver_growth_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
}

/// Evaluates both sides of
/// `|psi(s,x,y,z)| <= L|z| + (|x|+|y|)(q(s) + C(|x|^m + |y|^n)) + |psi(s,0,0,0)|`.
pub fn driver_growth_check(
    driver: &DriverSpec,
    spaces: &SpaceSpec,
    s: f64,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    tolerance: f64,
) -> Result<GrowthCheck> {
    if x.len() != spaces.dim_h || y.len() != spaces.dim_k || z.len() != spaces.z_len() {
        return Err(FbsdeError::structural("growth check point does not match the space dimensions"));
    }
    let lhs = norm(&driver.eval(spaces.dim_k, s, x, y, z));
    let base = norm(&driver.eval(
        spaces.dim_k,
        s,
        &vec![0.0; spaces.dim_h],
        &vec![0.0; spaces.dim_k],
        &vec![0.0; spaces.z_len()],
    ));
    let (nx, ny, nz) = (norm(x), norm(y), norm(z));
    let rhs = driver.lip_z * nz
        + (nx + ny) * ((driver.q)(s) + driver.growth_c * (nx.powf(driver.growth_m) + ny.powf(driver.growth_n)))
        + base;
    Ok(GrowthCheck { lhs, rhs, ok: lhs <= rhs + tolerance })
}

pub(crate) fn frobenius(m: &[f64]) -> f64 {
    norm(m)
}
