//! Sampled falsification of the structural hypotheses.
//!
//! Constants are supplied by the model author; the validators search for
//! counterexamples on a deterministic lattice of anchor points followed by
//! uniform random samples drawn from a seeded stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FbsdeError, Result};
use crate::model::{CoefficientSpec, DriverSpec, FbsdeProblem, SpaceSpec, TerminalSpec};
use crate::rng;
use crate::stats::norm;

pub const DEFAULT_SAMPLES: usize = 10_000;
pub const DEFAULT_TOLERANCE: f64 = 1e-9;

/// Where and how densely to sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampler {
    pub seed: u64,
    pub n_samples: usize,
    pub tolerance: f64,
    pub time_range: (f64, f64),
    pub x_radius: f64,
    pub y_radius: f64,
    pub z_radius: f64,
}

impl Sampler {
    pub fn new(seed: u64, horizon: f64) -> Self {
        Self {
            seed,
            n_samples: DEFAULT_SAMPLES,
            tolerance: DEFAULT_TOLERANCE,
            time_range: (0.0, horizon),
            x_radius: 5.0,
            y_radius: 5.0,
            z_radius: 5.0,
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(FbsdeError::domain("validation requires at least one sample"));
        }
        Ok(())
    }

    fn rng(&self, tag: &str) -> ChaCha8Rng {
        rng::stream(self.seed, tag, 0, 0)
    }

    /// Anchor values for one coordinate.
    fn anchors(radius: f64) -> Vec<f64> {
        vec![1.0, 0.0, -1.0, radius, -radius, 0.5]
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, len: usize, radius: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-radius..=radius)).collect()
}

fn anchor_vec(value: f64, len: usize) -> Vec<f64> {
    vec![value; len]
}

/// One sampled counterexample.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Flattened sample, labelled by `(name, values)`.
    pub point: Vec<(&'static str, Vec<f64>)>,
    pub lhs: f64,
    pub rhs: f64,
}

impl Violation {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.point.iter().find(|(n, _)| *n == name).map(|(_, v)| v.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub check: &'static str,
    pub samples: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// First violation in sampling order.
    pub fn witness(&self) -> Option<&Violation> {
        self.violations.first()
    }
}

fn exceeds(lhs: f64, rhs: f64, tol: f64) -> bool {
    !(lhs <= rhs + tol * (1.0 + lhs.abs() + rhs.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks `<y1-y2, psi(s,x,y1,z) - psi(s,x,y2,z)> <= mu |y1-y2|^2`.
pub fn validate_monotonicity(
    driver: &DriverSpec,
    spaces: &SpaceSpec,
    sampler: &Sampler,
) -> Result<ValidationReport> {
    sampler.check()?;
    let k = spaces.dim_k;
    let mut rng = sampler.rng("validate-monotone");
    let mut p1 = vec![0.0; k];
    let mut p2 = vec![0.0; k];
    let mut violations = Vec::new();
    let mut samples = 0;
    let mut test = |s: f64, x: Vec<f64>, y1: Vec<f64>, y2: Vec<f64>, z: Vec<f64>| {
        (driver.psi)(s, &x, &y1, &z, &mut p1);
        (driver.psi)(s, &x, &y2, &z, &mut p2);
        let dy: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| a - b).collect();
        let dp: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| a - b).collect();
        let lhs = dot(&dy, &dp);
        let rhs = driver.mu * dot(&dy, &dy);
        if exceeds(lhs, rhs, sampler.tolerance) {
            violations.push(Violation {
                point: vec![("s", vec![s]), ("x", x), ("y1", y1), ("y2", y2), ("z", z)],
                lhs,
                rhs,
            });
        }
    };
    let s0 = sampler.time_range.0;
    let anchors = Sampler::anchors(sampler.y_radius);
    for &a in &anchors {
        for &b in &anchors {
            if a != b {
                test(
                    s0,
                    anchor_vec(0.0, spaces.dim_h),
                    anchor_vec(a, k),
                    anchor_vec(b, k),
                    anchor_vec(0.0, spaces.z_len()),
                );
                samples += 1;
            }
        }
    }
    for _ in 0..sampler.n_samples {
        let s = rng.random_range(sampler.time_range.0..=sampler.time_range.1);
        let x = uniform_vec(&mut rng, spaces.dim_h, sampler.x_radius);
        let y1 = uniform_vec(&mut rng, k, sampler.y_radius);
        let y2 = uniform_vec(&mut rng, k, sampler.y_radius);
        let z = uniform_vec(&mut rng, spaces.z_len(), sampler.z_radius);
        test(s, x, y1, y2, z);
        samples += 1;
    }
    Ok(ValidationReport { check: "monotonicity", samples, violations })
}

/// Checks `|psi(s,x,y,z1) - psi(s,x,y,z2)| <= lip_z |z1 - z2|`.
pub fn validate_z_lipschitz(
    driver: &DriverSpec,
    spaces: &SpaceSpec,
    sampler: &Sampler,
) -> Result<ValidationReport> {
    sampler.check()?;
    let k = spaces.dim_k;
    let zl = spaces.z_len();
    let mut rng = sampler.rng("validate-z-lipschitz");
    let mut p1 = vec![0.0; k];
    let mut p2 = vec![0.0; k];
    let mut violations = Vec::new();
    let mut samples = 0;
    let mut test = |s: f64, x: Vec<f64>, y: Vec<f64>, z1: Vec<f64>, z2: Vec<f64>| {
        (driver.psi)(s, &x, &y, &z1, &mut p1);
        (driver.psi)(s, &x, &y, &z2, &mut p2);
        let dp: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| a - b).collect();
        let dz: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a - b).collect();
        let lhs = norm(&dp);
        let rhs = driver.lip_z * norm(&dz);
        if exceeds(lhs, rhs, sampler.tolerance) {
            violations.push(Violation {
                point: vec![("s", vec![s]), ("x", x), ("y", y), ("z1", z1), ("z2", z2)],
                lhs,
                rhs,
            });
        }
    };
    let s0 = sampler.time_range.0;
    let anchors = Sampler::anchors(sampler.z_radius);
    for &a in &anchors {
        for &b in &anchors {
            if a != b {
                test(
                    s0,
                    anchor_vec(0.0, spaces.dim_h),
                    anchor_vec(0.0, k),
                    anchor_vec(a, zl),
                    anchor_vec(b, zl),
                );
                samples += 1;
            }
        }
    }
    for _ in 0..sampler.n_samples {
        let s = rng.random_range(sampler.time_range.0..=sampler.time_range.1);
        let x = uniform_vec(&mut rng, spaces.dim_h, sampler.x_radius);
        let y = uniform_vec(&mut rng, k, sampler.y_radius);
        let z1 = uniform_vec(&mut rng, zl, sampler.z_radius);
        let z2 = uniform_vec(&mut rng, zl, sampler.z_radius);
        test(s, x, y, z1, z2);
        samples += 1;
    }
    Ok(ValidationReport { check: "z-lipschitz", samples, violations })
}

/// Checks `|d_x psi| + |d_y psi| <= q(s) + c(|x|^m + |y|^n + |z|^2)`.
///
/// Operator norms are bounded from below by probing `d_x psi` along the
/// normalized direction of each sample and using the Frobenius norm of the
/// `d_y psi` Jacobian for `dim_k = 1` (where they coincide).
pub fn validate_driver_gradient(
    driver: &DriverSpec,
    spaces: &SpaceSpec,
    sampler: &Sampler,
) -> Result<ValidationReport> {
    sampler.check()?;
    let k = spaces.dim_k;
    let mut rng = sampler.rng("validate-gradient");
    let mut gx = vec![0.0; k];
    let mut gy = vec![0.0; k * k];
    let mut violations = Vec::new();
    for _ in 0..sampler.n_samples {
        let s = rng.random_range(sampler.time_range.0..=sampler.time_range.1);
        let x = uniform_vec(&mut rng, spaces.dim_h, sampler.x_radius);
        let y = uniform_vec(&mut rng, k, sampler.y_radius);
        let z = uniform_vec(&mut rng, spaces.z_len(), sampler.z_radius);
        let dir = uniform_vec(&mut rng, spaces.dim_h, 1.0);
        let dn = norm(&dir);
        if dn == 0.0 {
            continue;
        }
        let dir: Vec<f64> = dir.iter().map(|d| d / dn).collect();
        (driver.d_x)(s, &x, &y, &z, &dir, &mut gx);
        (driver.d_y)(s, &x, &y, &z, &mut gy);
        let y_norm = if k == 1 { gy[0].abs() } else { spectral_lower_bound(&gy, k) };
        let lhs = norm(&gx) + y_norm;
        let rhs = (driver.q)(s)
            + driver.growth_c
                * (norm(&x).powf(driver.growth_m) + norm(&y).powf(driver.growth_n) + norm(&z).powi(2));
        if exceeds(lhs, rhs, sampler.tolerance) {
            violations.push(Violation {
                point: vec![("s", vec![s]), ("x", x), ("y", y), ("z", z)],
                lhs,
                rhs,
            });
        }
    }
    Ok(ValidationReport { check: "driver-gradient", samples: sampler.n_samples, violations })
}

/// Largest column norm, a lower bound of the operator norm.
fn spectral_lower_bound(m: &[f64], k: usize) -> f64 {
    (0..k)
        .map(|j| (0..k).map(|i| m[i * k + j] * m[i * k + j]).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Checks the Lipschitz and linear-growth bounds on `F` and the growth bound on `G`.
pub fn validate_coefficients(
    coefficients: &CoefficientSpec,
    spaces: &SpaceSpec,
    sampler: &Sampler,
) -> Result<ValidationReport> {
    sampler.check()?;
    let mut rng = sampler.rng("validate-coefficients");
    let l = coefficients.lipschitz_l;
    let mut f1 = vec![0.0; spaces.dim_h];
    let mut f2 = vec![0.0; spaces.dim_h];
    let mut g = vec![0.0; spaces.g_len()];
    let mut violations = Vec::new();
    for _ in 0..sampler.n_samples {
        let t = rng.random_range(sampler.time_range.0..=sampler.time_range.1);
        let x = uniform_vec(&mut rng, spaces.dim_h, sampler.x_radius);
        let y = uniform_vec(&mut rng, spaces.dim_h, sampler.x_radius);
        (coefficients.drift)(t, &x, &mut f1);
        (coefficients.drift)(t, &y, &mut f2);
        (coefficients.diffusion)(t, &x, &mut g);
        let diff: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a - b).collect();
        let dx: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let checks = [
            ("drift-lipschitz", norm(&diff), l * norm(&dx)),
            ("drift-growth", norm(&f1), l * (1.0 + norm(&x))),
            ("diffusion-growth", norm(&g), l * (1.0 + norm(&x))),
        ];
        for (label, lhs, rhs) in checks {
            if exceeds(lhs, rhs, sampler.tolerance) {
                violations.push(Violation {
                    point: vec![(label, vec![]), ("t", vec![t]), ("x", x.clone()), ("y", y.clone())],
                    lhs,
                    rhs,
                });
            }
        }
    }
    Ok(ValidationReport { check: "coefficients", samples: sampler.n_samples, violations })
}

/// Checks `|grad phi(x) h| <= C |h| (1 + |x|^m)`.
pub fn validate_terminal(
    terminal: &TerminalSpec,
    spaces: &SpaceSpec,
    sampler: &Sampler,
) -> Result<ValidationReport> {
    sampler.check()?;
    let mut rng = sampler.rng("validate-terminal");
    let mut out = vec![0.0; spaces.dim_k];
    let mut violations = Vec::new();
    for _ in 0..sampler.n_samples {
        let x = uniform_vec(&mut rng, spaces.dim_h, sampler.x_radius);
        let h = uniform_vec(&mut rng, spaces.dim_h, 1.0);
        (terminal.grad_dir)(&x, &h, &mut out);
        let lhs = norm(&out);
        let rhs = terminal.growth_c * norm(&h) * (1.0 + norm(&x).powf(terminal.growth_m));
        if exceeds(lhs, rhs, sampler.tolerance) {
            violations.push(Violation { point: vec![("x", x), ("h", h)], lhs, rhs });
        }
    }
    Ok(ValidationReport { check: "terminal-growth", samples: sampler.n_samples, violations })
}

/// Runs every structural check on a problem.
pub fn validate_problem(problem: &FbsdeProblem, sampler: &Sampler) -> Result<Vec<ValidationReport>> {
    let sp = &problem.spaces;
    Ok(vec![
        validate_monotonicity(&problem.driver, sp, sampler)?,
        validate_z_lipschitz(&problem.driver, sp, sampler)?,
        validate_driver_gradient(&problem.driver, sp, sampler)?,
        validate_coefficients(&problem.coefficients, sp, sampler)?,
        validate_terminal(&problem.terminal, sp, sampler)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn scalar() -> SpaceSpec {
        SpaceSpec::new(1, 1, 1).unwrap()
    }

    fn sampler() -> Sampler {
        Sampler::new(11, 1.0)
    }

    #[test]
    fn cubic_is_monotone() {
        let d = DriverSpec::scalar_in_y(|y| -y * y * y, |y| -3.0 * y * y, 0.0);
        assert!(validate_monotonicity(&d, &scalar(), &sampler()).unwrap().passed());
    }

    #[test]
    fn increasing_driver_fails_with_unit_witness() {
        let d = DriverSpec::scalar_in_y(|y| y, |_| 1.0, 0.0);
        let r = validate_monotonicity(&d, &scalar(), &sampler()).unwrap();
        let w = r.witness().expect("violation expected");
        assert_eq!(w.get("y1").unwrap(), &[1.0]);
        assert_eq!(w.get("y2").unwrap(), &[0.0]);
        assert_eq!(w.lhs, 1.0);
    }

    #[test]
    fn nonsmooth_hamiltonian_is_nonincreasing() {
        let d = DriverSpec::scalar_in_y(|y| -0.5 * y.max(0.0).powi(2), |y| -y.max(0.0), 0.0);
        assert!(validate_monotonicity(&d, &scalar(), &sampler()).unwrap().passed());
    }

    #[test]
    fn odd_power_drivers_pass_with_zero_mu() {
        for k in 0..4 {
            for c in [0.0, 0.3, 2.0] {
                let p = 2 * k + 1;
                let d = DriverSpec::scalar_in_y(
                    move |y| -c * y.powi(p),
                    move |y| -c * p as f64 * y.powi(p - 1),
                    0.0,
                );
                let r = validate_monotonicity(&d, &scalar(), &sampler()).unwrap();
                assert!(r.passed(), "power {p}, c={c}: {:?}", r.witness());
            }
        }
    }

    fn z_driver(f: fn(f64) -> f64, lip: f64) -> DriverSpec {
        DriverSpec {
            psi: Arc::new(move |_, _, _, z, out| out[0] = f(z[0])),
            lip_z: lip,
            ..DriverSpec::zero()
        }
    }

    #[test]
    fn z_independent_driver_passes_any_constant() {
        let d = DriverSpec::scalar_in_y(|y| -y, |_| -1.0, -1.0);
        assert!(validate_z_lipschitz(&d, &scalar(), &sampler()).unwrap().passed());
    }

    #[test]
    fn doubled_z_fails_unit_constant() {
        let r = validate_z_lipschitz(&z_driver(|z| 2.0 * z, 1.0), &scalar(), &sampler()).unwrap();
        let w = r.witness().unwrap();
        assert_eq!(w.get("z1").unwrap(), &[1.0]);
        assert_eq!(w.get("z2").unwrap(), &[0.0]);
    }

    #[test]
    fn sine_is_one_lipschitz() {
        let r = validate_z_lipschitz(&z_driver(f64::sin, 1.0), &scalar(), &sampler()).unwrap();
        assert!(r.passed());
    }

    #[test]
    fn zero_samples_rejected() {
        let mut s = sampler();
        s.n_samples = 0;
        let d = DriverSpec::zero();
        assert!(matches!(validate_monotonicity(&d, &scalar(), &s), Err(FbsdeError::Domain(_))));
        assert!(matches!(validate_z_lipschitz(&d, &scalar(), &s), Err(FbsdeError::Domain(_))));
    }

    #[test]
    fn reports_are_deterministic_in_seed() {
        let d = DriverSpec::scalar_in_y(|y| y.sin(), |y| y.cos(), 0.0);
        let a = validate_monotonicity(&d, &scalar(), &sampler()).unwrap();
        let b = validate_monotonicity(&d, &scalar(), &sampler()).unwrap();
        assert_eq!(a, b);
        assert!(!a.passed());
    }

    #[test]
    fn gradient_bound_of_cubic() {
        let d = DriverSpec {
            growth_n: 2.0,
            growth_c: 3.0,
            ..DriverSpec::scalar_in_y(|y| -y * y * y, |y| -3.0 * y * y, 0.0)
        };
        assert!(validate_driver_gradient(&d, &scalar(), &sampler()).unwrap().passed());
        let too_tight = DriverSpec { growth_c: 1.0, ..d };
        assert!(!validate_driver_gradient(&too_tight, &scalar(), &sampler()).unwrap().passed());
    }

    #[test]
    fn affine_coefficients_satisfy_their_constant() {
        let c = CoefficientSpec::affine(2, 1, vec![0.5, 0.0, 0.1, -1.0], vec![0.2, 0.0], vec![1.0, 0.3]).unwrap();
        let sp = SpaceSpec::new(2, 1, 1).unwrap();
        assert!(validate_coefficients(&c, &sp, &sampler()).unwrap().passed());
    }

    #[test]
    fn quadratic_terminal_needs_linear_growth() {
        let t = TerminalSpec {
            phi: Arc::new(|x, out| out[0] = x[0] * x[0]),
            grad_dir: Arc::new(|x, h, out| out[0] = 2.0 * x[0] * h[0]),
            growth_c: 2.0,
            growth_m: 1.0,
        };
        assert!(validate_terminal(&t, &scalar(), &sampler()).unwrap().passed());
        let bounded = TerminalSpec { growth_m: 0.0, ..t };
        assert!(!validate_terminal(&bounded, &scalar(), &sampler()).unwrap().passed());
    }
}
