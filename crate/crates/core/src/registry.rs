//! Built-in analytic models.
//!
//! Every model is described by a serializable [`ModelDescription`], so the
//! same constructors serve named registry entries and inline models written
//! in a configuration file. Coefficients are affine with constant diagonal
//! diffusion `G = sigma I` on `dim_h = dim_xi = dim`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::control::{ControlProblem, ControlSet};
use crate::error::{FbsdeError, Result};
use crate::model::{CoefficientSpec, DriverSpec, FbsdeProblem, SemigroupSpec, SpaceSpec, TerminalSpec};

/// Eigenvalues of the stiff three-dimensional generator.
pub const STIFF3_EIGENVALUES: [f64; 3] = [0.0, -5.0, -50.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriverDescription {
    Zero,
    /// `psi = -rate y`, monotone with `mu = -rate`.
    Linear { rate: f64 },
    /// `psi = -y^3`.
    Cubic,
    /// `psi = -y_+^2 / 2`.
    PositivePartSquare,
    /// `psi = value`.
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TerminalDescription {
    /// `phi(x) = <w, x>`; all-ones weights by default.
    Linear {
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
    /// `phi(x) = scale |x|^2`.
    Quadratic {
        #[serde(default = "one")]
        scale: f64,
    },
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControlDescription {
    /// Controls `u >= 0`, `r = 0`, `l = u^2/2`, `lambda = -u`, giving
    /// `psi = -y_+^2/2` and `Gamma = y_+`.
    DiscountControl,
    /// Controls in the box `[-bound, bound]^dim`, `r = u`, `l = |u|^2/2`,
    /// `lambda = 0`: a componentwise Huber driver in `z` with
    /// `Gamma = clamp(-z, -bound, bound)`. With `grid_points` set (scalar
    /// models only) the infimum is taken over that many equispaced controls.
    BoundedDrift {
        #[serde(default = "one")]
        bound: f64,
        #[serde(default)]
        grid_points: Option<usize>,
    },
}

fn one() -> f64 {
    1.0
}

/// A complete model: dynamics, driver (or control structure) and terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescription {
    pub dim: usize,
    /// Diagonal of `A`; zeros by default.
    #[serde(default)]
    pub eigenvalues: Option<Vec<f64>>,
    /// Row-major `B` in `F(x) = B x + b`; zero by default.
    #[serde(default)]
    pub drift_matrix: Option<Vec<f64>>,
    #[serde(default)]
    pub drift_offset: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub diffusion: f64,
    /// Required unless `control` is given, in which case the driver is the
    /// Hamiltonian of the control problem.
    #[serde(default)]
    pub driver: Option<DriverDescription>,
    pub terminal: TerminalDescription,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default)]
    pub control: Option<ControlDescription>,
}

/// A built model.
#[derive(Debug, Clone)]
pub enum Model {
    Fbsde(FbsdeProblem),
    Control(ControlProblem),
}

impl Model {
    pub fn problem(&self) -> &FbsdeProblem {
        match self {
            Self::Fbsde(p) => p,
            Self::Control(c) => &c.base,
        }
    }

    pub fn control(&self) -> Option<&ControlProblem> {
        match self {
            Self::Fbsde(_) => None,
            Self::Control(c) => Some(c),
        }
    }
}

fn build_driver(d: &DriverDescription) -> DriverSpec {
    match *d {
        DriverDescription::Zero => DriverSpec::zero(),
        DriverDescription::Linear { rate } => DriverSpec {
            growth_c: rate.abs(),
            ..DriverSpec::scalar_in_y(move |y| -rate * y, move |_| -rate, -rate)
        },
        DriverDescription::Cubic => DriverSpec {
            growth_n: 2.0,
            growth_c: 3.0,
            ..DriverSpec::scalar_in_y(|y| -y * y * y, |y| -3.0 * y * y, 0.0)
        },
        DriverDescription::PositivePartSquare => positive_part_square(),
        DriverDescription::Constant { value } => DriverSpec {
            psi: Arc::new(move |_, _, _, _, o| o[0] = value),
            ..DriverSpec::zero()
        },
    }
}

fn positive_part_square() -> DriverSpec {
    DriverSpec {
        growth_n: 1.0,
        growth_c: 1.0,
        ..DriverSpec::scalar_in_y(|y| -0.5 * y.max(0.0).powi(2), |y| -y.max(0.0), 0.0)
    }
}

fn build_terminal(t: &TerminalDescription, dim: usize) -> Result<TerminalSpec> {
    Ok(match t {
        TerminalDescription::Linear { weights } => {
            let w = weights.clone().unwrap_or_else(|| vec![1.0; dim]);
            if w.len() != dim {
                return Err(FbsdeError::structural(format!("terminal weights have {} entries, dim = {dim}", w.len())));
            }
            let growth_c = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            let w = Arc::new(w);
            let w2 = w.clone();
            TerminalSpec {
                phi: Arc::new(move |x, o| o[0] = x.iter().zip(w.iter()).map(|(a, b)| a * b).sum()),
                grad_dir: Arc::new(move |_, h, o| o[0] = h.iter().zip(w2.iter()).map(|(a, b)| a * b).sum()),
                growth_c,
                growth_m: 0.0,
            }
        }
        &TerminalDescription::Quadratic { scale } => TerminalSpec {
            phi: Arc::new(move |x, o| o[0] = scale * x.iter().map(|v| v * v).sum::<f64>()),
            grad_dir: Arc::new(move |x, h, o| o[0] = 2.0 * scale * x.iter().zip(h).map(|(a, b)| a * b).sum::<f64>()),
            growth_c: 2.0 * scale.abs(),
            growth_m: 1.0,
        },
        &TerminalDescription::Constant { value } => TerminalSpec {
            phi: Arc::new(move |_, o| o[0] = value),
            grad_dir: Arc::new(|_, _, o| o[0] = 0.0),
            growth_c: 0.0,
            growth_m: 0.0,
        },
    })
}

fn huber(z: f64, b: f64) -> f64 {
    if z.abs() <= b {
        -0.5 * z * z
    } else {
        -b * z.abs() + 0.5 * b * b
    }
}

impl ModelDescription {
    pub fn build(&self) -> Result<Model> {
        let dim = self.dim;
        if dim == 0 {
            return Err(FbsdeError::structural("dim must be positive"));
        }
        let spaces = SpaceSpec::new(dim, dim, 1)?;
        let semigroup = SemigroupSpec::new(self.eigenvalues.clone().unwrap_or_else(|| vec![0.0; dim]))?;
        let mut g = vec![0.0; dim * dim];
        for i in 0..dim {
            g[i * dim + i] = self.diffusion;
        }
        let coefficients = CoefficientSpec::affine(
            dim,
            dim,
            self.drift_matrix.clone().unwrap_or_else(|| vec![0.0; dim * dim]),
            self.drift_offset.clone().unwrap_or_else(|| vec![0.0; dim]),
            g,
        )?;
        let terminal = build_terminal(&self.terminal, dim)?;
        match (&self.driver, &self.control) {
            (Some(d), None) => Ok(Model::Fbsde(FbsdeProblem::new(
                spaces,
                semigroup,
                coefficients,
                build_driver(d),
                terminal,
                self.horizon,
            )?)),
            (None, Some(c)) => {
                let (driver, build): (DriverSpec, Box<dyn FnOnce(FbsdeProblem) -> Result<ControlProblem>>) = match *c {
                    ControlDescription::DiscountControl => (
                        positive_part_square(),
                        Box::new(|base| {
                            ControlProblem::new(
                                base,
                                1,
                                Arc::new(|_, _, _, o| o.fill(0.0)),
                                0.0,
                                Arc::new(|_, _, u| 0.5 * u[0] * u[0]),
                                Arc::new(|_, _, u| -u[0]),
                                ControlSet::ClosedForm { gamma: Arc::new(|_, _, y, _, o| o[0] = y.max(0.0)) },
                            )
                        }),
                    ),
                    ControlDescription::BoundedDrift { bound, grid_points } => {
                        if !(bound > 0.0 && bound.is_finite()) {
                            return Err(FbsdeError::domain("control bound must be positive"));
                        }
                        let r_bound = bound * (dim as f64).sqrt();
                        let driver = DriverSpec {
                            psi: Arc::new(move |_, _, _, z, o| o[0] = z.iter().map(|v| huber(*v, bound)).sum()),
                            d_z: Arc::new(move |_, _, _, z, dz, o| {
                                o[0] = z.iter().zip(dz).map(|(v, d)| -v.clamp(-bound, bound) * d).sum()
                            }),
                            lip_z: r_bound,
                            ..DriverSpec::zero()
                        };
                        let set = match grid_points {
                            None => ControlSet::ClosedForm {
                                gamma: Arc::new(move |_, _, _, z, o| {
                                    for (u, v) in o.iter_mut().zip(z) {
                                        *u = (-v).clamp(-bound, bound);
                                    }
                                }),
                            },
                            Some(m) => {
                                if dim != 1 || m < 2 {
                                    return Err(FbsdeError::domain(
                                        "grid controls need a scalar model and at least 2 points",
                                    ));
                                }
                                let pts = (0..m).map(|i| vec![-bound + 2.0 * bound * i as f64 / (m - 1) as f64]).collect();
                                ControlSet::Grid { points: pts }
                            }
                        };
                        (
                            driver,
                            Box::new(move |base| {
                                ControlProblem::new(
                                    base,
                                    dim,
                                    Arc::new(|_, _, u, o| o.copy_from_slice(u)),
                                    r_bound,
                                    Arc::new(|_, _, u| 0.5 * u.iter().map(|v| v * v).sum::<f64>()),
                                    Arc::new(|_, _, _| 0.0),
                                    set,
                                )
                            }),
                        )
                    }
                };
                let base = FbsdeProblem::new(spaces, semigroup, coefficients, driver, terminal, self.horizon)?;
                Ok(Model::Control(build(base)?))
            }
            (Some(_), Some(_)) => Err(FbsdeError::structural(
                "a controlled model derives its driver; remove either `driver` or `control`",
            )),
            (None, None) => Err(FbsdeError::structural("model needs a `driver` or a `control` section")),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.diffusion == 0.0
    }

    fn eigen(&self) -> Vec<f64> {
        self.eigenvalues.clone().unwrap_or_else(|| vec![0.0; self.dim])
    }

    fn has_zero_drift(&self) -> bool {
        self.drift_matrix.as_ref().is_none_or(|m| m.iter().all(|v| *v == 0.0))
            && self.drift_offset.as_ref().is_none_or(|m| m.iter().all(|v| *v == 0.0))
    }

    /// `<w, e^{(T-t)A} x>` for a linear terminal.
    fn transported(&self, t: f64, x: &[f64]) -> Option<f64> {
        let TerminalDescription::Linear { weights } = &self.terminal else {
            return None;
        };
        let w = weights.clone().unwrap_or_else(|| vec![1.0; self.dim]);
        let tau = self.horizon - t;
        Some(self.eigen().iter().zip(&w).zip(x).map(|((e, w), x)| w * (e * tau).exp() * x).sum())
    }

    /// Closed-form `u(t, x)` when one is known, with its formula id.
    pub fn closed_form(&self) -> Option<ClosedForm> {
        if self.control.is_some() || !self.has_zero_drift() {
            return None;
        }
        let zero_a = self.eigen().iter().all(|e| *e == 0.0);
        let unit_quadratic = self.dim == 1
            && zero_a
            && matches!(self.terminal, TerminalDescription::Quadratic { scale } if scale == 1.0);
        let linear = matches!(self.terminal, TerminalDescription::Linear { .. });
        match self.driver.as_ref()? {
            DriverDescription::Zero if linear => Some(ClosedForm::Martingale),
            DriverDescription::Zero if unit_quadratic && self.diffusion == 1.0 => Some(ClosedForm::Heat { constant: 0.0 }),
            &DriverDescription::Constant { value } if unit_quadratic && self.diffusion == 1.0 => {
                Some(ClosedForm::Heat { constant: value })
            }
            &DriverDescription::Linear { rate } if linear && self.is_deterministic() => Some(ClosedForm::LinearOde { rate }),
            DriverDescription::Cubic if linear && self.is_deterministic() => Some(ClosedForm::CubicOde),
            _ => None,
        }
    }

    /// Evaluates the closed form, if any.
    pub fn reference(&self, t: f64, x: &[f64]) -> Option<f64> {
        let tau = self.horizon - t;
        Some(match self.closed_form()? {
            ClosedForm::Martingale => self.transported(t, x)?,
            ClosedForm::Heat { constant } => x[0] * x[0] + (1.0 + constant) * tau,
            ClosedForm::LinearOde { rate } => (-rate * tau).exp() * self.transported(t, x)?,
            ClosedForm::CubicOde => {
                let a = self.transported(t, x)?;
                a / (1.0 + 2.0 * a * a * tau).sqrt()
            }
        })
    }
}

/// Known closed forms of `u(t, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClosedForm {
    /// `u = <w, e^{(T-t)A} x>`.
    Martingale,
    /// `u = x^2 + (1 + c)(T - t)`.
    Heat { constant: f64 },
    /// `u = e^{-rate (T-t)} <w, e^{(T-t)A} x>`.
    LinearOde { rate: f64 },
    /// `u = a / sqrt(1 + 2 a^2 (T-t))` with `a = <w, e^{(T-t)A} x>`.
    CubicOde,
}

impl ClosedForm {
    pub fn formula_id(&self) -> &'static str {
        match self {
            Self::Martingale => "martingale-transport",
            Self::Heat { constant } if *constant == 0.0 => "heat-second-moment",
            Self::Heat { .. } => "heat-constant-driver",
            Self::LinearOde { .. } => "ode-linear-exponential",
            Self::CubicOde => "ode-cubic-algebraic",
        }
    }

    pub fn formula(&self) -> &'static str {
        match self {
            Self::Martingale => "u(t,x) = <w, exp((T-t)A) x>",
            Self::Heat { constant } if *constant == 0.0 => "u(t,x) = x^2 + (T-t)",
            Self::Heat { .. } => "u(t,x) = x^2 + (1+c)(T-t)",
            Self::LinearOde { .. } => "u(t,x) = exp(-rate (T-t)) <w, exp((T-t)A) x>",
            Self::CubicOde => "u(t,x) = a / sqrt(1 + 2 a^2 (T-t)), a = <w, exp((T-t)A) x>",
        }
    }
}

/// A named model with metadata used by the harness and the test suites.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub name: &'static str,
    pub summary: &'static str,
    pub description: ModelDescription,
    pub default_x: Vec<f64>,
    /// The declared monotonicity constant is attained by the driver.
    pub mu_attained: bool,
    /// The declared z-Lipschitz constant is attained by the driver.
    pub lip_z_attained: bool,
}

impl RegistryEntry {
    pub fn build(&self) -> Result<Model> {
        self.description.build()
    }
}

fn scalar(diffusion: f64, driver: Option<DriverDescription>, terminal: TerminalDescription, horizon: f64) -> ModelDescription {
    ModelDescription {
        dim: 1,
        eigenvalues: None,
        drift_matrix: None,
        drift_offset: None,
        diffusion,
        driver,
        terminal,
        horizon,
        control: None,
    }
}

fn stiff3(base: &ModelDescription) -> ModelDescription {
    ModelDescription { dim: 3, eigenvalues: Some(STIFF3_EIGENVALUES.to_vec()), ..base.clone() }
}

/// All built-in models, scalar ones first, then their stiff variants.
pub fn registry() -> Vec<RegistryEntry> {
    let linear = || TerminalDescription::Linear { weights: None };
    let quadratic = || TerminalDescription::Quadratic { scale: 1.0 };
    let control = |c: ControlDescription, terminal: TerminalDescription| ModelDescription {
        control: Some(c),
        ..scalar(1.0, None, terminal, 1.0)
    };
    let martingale = scalar(1.0, Some(DriverDescription::Zero), linear(), 1.0);
    let heat = scalar(1.0, Some(DriverDescription::Zero), quadratic(), 1.0);
    let heat_c = scalar(1.0, Some(DriverDescription::Constant { value: 0.5 }), quadratic(), 1.0);
    let ode_linear = scalar(0.0, Some(DriverDescription::Linear { rate: 1.0 }), linear(), 1.0);
    let ode_cubic = scalar(0.0, Some(DriverDescription::Cubic), linear(), 0.5);
    let nonsmooth = scalar(1.0, Some(DriverDescription::PositivePartSquare), linear(), 1.0);
    let discount = control(ControlDescription::DiscountControl, quadratic());
    let drift = control(ControlDescription::BoundedDrift { bound: 1.0, grid_points: None }, quadratic());

    let entry = |name, summary, description: ModelDescription, x: f64, mu_attained, lip_z_attained| RegistryEntry {
        name,
        summary,
        default_x: vec![x; description.dim],
        description,
        mu_attained,
        lip_z_attained,
    };
    vec![
        entry("martingale", "psi = 0, phi = x, G = 1", martingale.clone(), 0.5, false, false),
        entry("heat", "psi = 0, phi = x^2, G = 1", heat.clone(), 0.5, false, false),
        entry("heat-constant-driver", "psi = 1/2, phi = x^2, G = 1", heat_c, 0.5, false, false),
        entry("ode-linear", "psi = -y, phi = x, deterministic", ode_linear.clone(), 1.0, true, false),
        entry("ode-cubic", "psi = -y^3, phi = x, deterministic, T = 1/2", ode_cubic.clone(), 1.0, false, false),
        entry("monotone-nonsmooth", "psi = -y_+^2/2, phi = x, G = 1", nonsmooth.clone(), 0.5, false, false),
        entry("hjb-paper-example", "r = 0, l = u^2/2, lambda = -u on u >= 0, phi = x^2", discount.clone(), 0.5, false, false),
        entry("hjb-bounded-drift", "r = u on [-1,1], l = u^2/2, lambda = 0, phi = x^2", drift, 1.0, false, true),
        entry("martingale-stiff3", "stiff A = diag(0,-5,-50), psi = 0, phi = sum x", stiff3(&martingale), 0.5, false, false),
        entry("heat-stiff3", "stiff A, psi = 0, phi = |x|^2", stiff3(&heat), 0.5, false, false),
        entry("ode-linear-stiff3", "stiff A, psi = -y, phi = sum x, deterministic", stiff3(&ode_linear), 1.0, true, false),
        entry("ode-cubic-stiff3", "stiff A, psi = -y^3, phi = sum x, deterministic", stiff3(&ode_cubic), 1.0, false, false),
        entry("monotone-nonsmooth-stiff3", "stiff A, psi = -y_+^2/2, phi = sum x", stiff3(&nonsmooth), 0.5, false, false),
        entry("hjb-paper-example-stiff3", "stiff A, discount control, phi = |x|^2", stiff3(&discount), 0.5, false, false),
    ]
}

pub fn lookup(name: &str) -> Option<RegistryEntry> {
    registry().into_iter().find(|e| e.name == name)
}

pub fn names() -> Vec<&'static str> {
    registry().iter().map(|e| e.name).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{hamiltonian, validate_control};
    use crate::validate::{validate_problem, Sampler};

    #[test]
    fn every_entry_builds_and_validates() {
        for e in registry() {
            let m = e.build().unwrap_or_else(|err| panic!("{}: {err}", e.name));
            let p = m.problem();
            assert_eq!(e.default_x.len(), p.spaces.dim_h);
            let s = Sampler { n_samples: 2000, ..Sampler::new(3, p.horizon) };
            for r in validate_problem(p, &s).unwrap() {
                assert!(r.passed(), "{} fails {}: {:?}", e.name, r.check, r.witness());
            }
            if let Some(cp) = m.control() {
                assert!(validate_control(cp, &s).unwrap().passed(), "{}", e.name);
            }
        }
    }

    #[test]
    fn names_are_unique() {
        let mut n = names();
        n.sort();
        n.dedup();
        assert_eq!(n.len(), registry().len());
    }

    #[test]
    fn closed_forms() {
        let r = |name: &str, t: f64, x: &[f64]| lookup(name).unwrap().description.reference(t, x);
        assert_eq!(r("martingale", 0.3, &[0.7]), Some(0.7));
        assert_eq!(r("heat", 0.25, &[2.0]), Some(4.75));
        assert_eq!(r("heat-constant-driver", 0.0, &[1.0]), Some(2.5));
        assert!((r("ode-linear", 0.0, &[1.0]).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!((r("ode-cubic", 0.0, &[1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        let m3 = r("martingale-stiff3", 0.0, &[1.0, 1.0, 1.0]).unwrap();
        assert!((m3 - (1.0 + (-5.0f64).exp() + (-50.0f64).exp())).abs() < 1e-15);
        assert_eq!(r("monotone-nonsmooth", 0.0, &[1.0]), None);
        assert_eq!(r("hjb-paper-example", 0.0, &[1.0]), None);
        assert_eq!(r("heat-stiff3", 0.0, &[1.0, 1.0, 1.0]), None);
        for e in registry() {
            if let Some(c) = e.description.closed_form() {
                assert!(!c.formula_id().is_empty() && !c.formula().is_empty());
            }
        }
    }

    #[test]
    fn bounded_drift_modes_agree() {
        let closed = lookup("hjb-bounded-drift").unwrap().build().unwrap();
        let mut desc = lookup("hjb-bounded-drift").unwrap().description;
        desc.control = Some(ControlDescription::BoundedDrift { bound: 1.0, grid_points: Some(201) });
        let grid = desc.build().unwrap();
        let (cc, gc) = (closed.control().unwrap(), grid.control().unwrap());
        for z in [-3.0, -1.0, -0.37, 0.0, 0.2, 0.9, 2.5] {
            let (a, ua) = hamiltonian(cc, 0.0, &[0.0], 0.0, &[z]).unwrap();
            let (b, ub) = hamiltonian(gc, 0.0, &[0.0], 0.0, &[z]).unwrap();
            assert!((a - b).abs() <= 1e-4, "z = {z}: {a} vs {b}");
            assert!((ua[0] - ub[0]).abs() <= 1e-2);
            for u in [-1.0, -0.5, 0.0, 0.5, 1.0] {
                assert!(gc.defect(0.0, &[0.0], 0.0, &[z], &[u]) >= -1e-12);
            }
        }
    }

    #[test]
    fn inconsistent_descriptions_are_rejected() {
        let mut d = lookup("heat").unwrap().description;
        d.control = Some(ControlDescription::DiscountControl);
        assert!(d.build().is_err());
        d.driver = None;
        d.control = None;
        assert!(d.build().is_err());
        let mut w = lookup("martingale").unwrap().description;
        w.terminal = TerminalDescription::Linear { weights: Some(vec![1.0, 2.0]) };
        assert!(w.build().is_err());
        let mut g = lookup("hjb-bounded-drift-stiff3").map(|e| e.description).unwrap_or_else(|| stiff3(&lookup("hjb-bounded-drift").unwrap().description));
        g.control = Some(ControlDescription::BoundedDrift { bound: 1.0, grid_points: Some(5) });
        assert!(g.build().is_err());
    }
}
