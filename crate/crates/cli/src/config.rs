//! Experiment configuration: parsing, validation and default filling.
//!
//! Validation collects every problem in the document instead of stopping at
//! the first one.

use std::fmt;
use std::path::PathBuf;

use fbsde_core::registry::{lookup, names, ControlDescription, ModelDescription};
use fbsde_core::regression::{BasisKind, RegressionBasis};
use serde::{Deserialize, Serialize};

pub const TASKS: [&str; 7] = [
    "forward",
    "bsde",
    "variational",
    "kolmogorov-scan",
    "mild-residual",
    "hjb-audit",
    "convergence-table",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Forward,
    Bsde,
    Variational,
    KolmogorovScan,
    MildResidual,
    HjbAudit,
    ConvergenceTable,
}

impl TaskKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "forward" => Self::Forward,
            "bsde" => Self::Bsde,
            "variational" => Self::Variational,
            "kolmogorov-scan" => Self::KolmogorovScan,
            "mild-residual" => Self::MildResidual,
            "hjb-audit" => Self::HjbAudit,
            "convergence-table" => Self::ConvergenceTable,
            _ => return None,
        })
    }

    pub fn as_str(&self) -> &'static str {
        TASKS[*self as usize]
    }
}

/// All problems found in a configuration document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} configuration error(s):", self.0.len())?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: Option<RawModel>,
    task: Option<RawTask>,
    mc: Option<RawMc>,
    output: Option<RawOutput>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: Option<String>,
    inline: Option<ModelDescription>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    kind: Option<String>,
    t: Option<f64>,
    x: Option<Vec<f64>>,
    direction: Option<Vec<f64>>,
    restart_times: Option<Vec<f64>>,
    quad_steps: Option<usize>,
    controls: Option<Vec<f64>>,
    scan_t: Option<Vec<f64>>,
    scan_x: Option<Vec<f64>>,
    fd_eps: Option<f64>,
    export_paths: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBasis {
    kind: Option<BasisKind>,
    degree: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMc {
    seed: Option<u64>,
    n_paths: Option<usize>,
    n_steps: Option<usize>,
    schedule: Option<Vec<usize>>,
    basis: Option<RawBasis>,
    p_list: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    /// Registry name, or `None` for an inline model.
    pub name: Option<String>,
    pub description: ModelDescription,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub t: f64,
    pub x: Vec<f64>,
    pub direction: Vec<f64>,
    pub restart_times: Vec<f64>,
    pub quad_steps: usize,
    /// Constant controls audited next to the feedback strategy.
    pub controls: Vec<f64>,
    pub scan_t: Vec<f64>,
    pub scan_x: Vec<f64>,
    /// Finite-difference step; `None` means `1e-4 (1 + |x|)`.
    pub fd_eps: Option<f64>,
    /// Number of paths written to per-path CSV files.
    pub export_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McConfig {
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub schedule: Vec<usize>,
    pub basis: RegressionBasis,
    pub p_list: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

/// A validated experiment with all defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub mc: McConfig,
    pub output: OutputConfig,
}

/// Command-line overrides applied before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn load_config(document: &str) -> Result<ExperimentConfig, ConfigErrors> {
    load_config_with(document, &Overrides::default())
}

pub fn load_config_with(document: &str, overrides: &Overrides) -> Result<ExperimentConfig, ConfigErrors> {
    let raw: RawConfig = toml::from_str(document).map_err(|e| ConfigErrors(vec![format!("parse error: {e}")]))?;
    let mut errors = Vec::new();

    let raw_model = raw.model.unwrap_or_default();
    let model = match (raw_model.name, raw_model.inline) {
        (Some(name), None) => match lookup(&name) {
            Some(e) => Some((Some(name), e.description, Some(e.default_x))),
            None => {
                errors.push(format!("unknown model '{name}'; available: {}", names().join(", ")));
                None
            }
        },
        (None, Some(d)) => Some((None, d, None)),
        (Some(_), Some(_)) => {
            errors.push("model: give either `name` or `inline`, not both".into());
            None
        }
        (None, None) => {
            errors.push("model: missing `name` (or an `inline` table)".into());
            None
        }
    };
    let built = model.as_ref().and_then(|(_, d, _)| match d.build() {
        Ok(m) => Some(m),
        Err(e) => {
            errors.push(format!("model: {e}"));
            None
        }
    });

    let raw_task = raw.task.unwrap_or_default();
    let kind = match raw_task.kind.as_deref() {
        None => {
            errors.push(format!("task.kind is missing; valid tasks: {}", TASKS.join(", ")));
            None
        }
        Some(k) => TaskKind::parse(k).or_else(|| {
            errors.push(format!("unknown task '{k}'; valid tasks: {}", TASKS.join(", ")));
            None
        }),
    };

    let raw_mc = raw.mc.unwrap_or_default();
    let seed = overrides.seed.or(raw_mc.seed);
    if seed.is_none() {
        errors.push("mc.seed is required (there is no entropy-based default)".into());
    }

    let (dim, horizon, deterministic) = model
        .as_ref()
        .map(|(_, d, _)| (d.dim, d.horizon, d.is_deterministic()))
        .unwrap_or((1, 1.0, false));

    let t = raw_task.t.unwrap_or(0.0);
    if !(0.0..=horizon).contains(&t) {
        errors.push(format!("task.t = {t} outside [0, {horizon}]"));
    }
    let default_x = model.as_ref().and_then(|(_, _, x)| x.clone()).unwrap_or_else(|| vec![0.0; dim]);
    let x = raw_task.x.unwrap_or(default_x);
    if x.len() != dim {
        errors.push(format!("task.x has {} entries, model dimension is {dim}", x.len()));
    }
    let mut unit = vec![0.0; dim];
    unit[0] = 1.0;
    let direction = raw_task.direction.unwrap_or(unit);
    if direction.len() != dim {
        errors.push(format!("task.direction has {} entries, model dimension is {dim}", direction.len()));
    } else if direction.iter().all(|v| *v == 0.0) {
        errors.push("task.direction must be nonzero".into());
    }

    let n_steps = raw_mc.n_steps.unwrap_or(64);
    if n_steps == 0 {
        errors.push("mc.n_steps must be positive".into());
    }
    let n_paths = raw_mc.n_paths.unwrap_or(if deterministic { 1 } else { 10_000 });
    if n_paths == 0 {
        errors.push("mc.n_paths must be positive".into());
    }
    let rb = raw_mc.basis.unwrap_or_default();
    let basis = match rb.kind.unwrap_or(if deterministic { BasisKind::PathwiseExact } else { BasisKind::PolynomialTotalDegree }) {
        BasisKind::PathwiseExact => {
            if !deterministic {
                errors.push("mc.basis: pathwise-exact needs a deterministic forward model (diffusion = 0)".into());
            }
            RegressionBasis::pathwise_exact()
        }
        BasisKind::PolynomialTotalDegree => RegressionBasis::polynomial(rb.degree.unwrap_or(2)),
    };
    if !deterministic {
        if let Err(e) = basis.check(dim, n_paths) {
            errors.push(format!("mc.basis / mc.n_paths: {e}"));
        }
    }
    let p_list = raw_mc.p_list.unwrap_or_else(|| vec![2.0]);
    if p_list.is_empty() || p_list.iter().any(|p| !(*p > 1.0)) {
        errors.push("mc.p_list must be a nonempty list of exponents > 1".into());
    }
    let schedule = raw_mc.schedule.unwrap_or_else(|| vec![128, 256, 512, 1024]);
    if schedule.is_empty() || schedule.contains(&0) {
        errors.push("mc.schedule must be a nonempty list of positive step counts".into());
    }

    let span = horizon - t;
    let restart_times = raw_task
        .restart_times
        .unwrap_or_else(|| (1..=3).map(|j| t + span * j as f64 / 4.0).collect());
    let quad_steps = raw_task.quad_steps.unwrap_or(8);
    let controls = raw_task.controls.unwrap_or_else(|| match model.as_ref().and_then(|(_, d, _)| d.control.clone()) {
        Some(ControlDescription::BoundedDrift { bound, .. }) => vec![-bound, -0.5 * bound, 0.0, 0.5 * bound, bound],
        _ => vec![0.0, 0.5, 1.0, 2.0],
    });
    let scan_t = raw_task
        .scan_t
        .unwrap_or_else(|| (0..4).map(|j| t + span * j as f64 / 4.0).collect());
    let scan_x = raw_task.scan_x.unwrap_or_else(|| vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
    if let Some(eps) = raw_task.fd_eps {
        if !(eps > 0.0) {
            errors.push("task.fd_eps must be positive".into());
        }
    }

    if let Some(kind) = kind {
        match kind {
            TaskKind::Forward => {
                for &s in &restart_times {
                    let on_grid = span > 0.0 && {
                        let r = (s - t) / span * n_steps as f64;
                        (r - r.round()).abs() <= 1e-9 && (0.0..=n_steps as f64).contains(&r.round())
                    };
                    if !on_grid {
                        errors.push(format!("task.restart_times: {s} is not a node of the {n_steps}-step grid on [{t}, {horizon}]"));
                    }
                }
            }
            TaskKind::MildResidual => {
                if quad_steps == 0 || n_steps % quad_steps.max(1) != 0 {
                    errors.push(format!("task.quad_steps = {quad_steps} must be positive and divide mc.n_steps = {n_steps}"));
                }
            }
            TaskKind::HjbAudit => {
                if let Some(m) = &built {
                    match m.control() {
                        None => errors.push("task hjb-audit needs a controlled model".into()),
                        Some(cp) => {
                            if cp.u_dim != 1 {
                                errors.push("task hjb-audit supports scalar controls only".into());
                            }
                        }
                    }
                }
                if t >= horizon {
                    errors.push("task hjb-audit needs t < T".into());
                }
            }
            TaskKind::ConvergenceTable => {
                if model.as_ref().is_some_and(|(_, d, _)| d.closed_form().is_none()) {
                    errors.push("task convergence-table needs a model with a closed-form reference".into());
                }
            }
            TaskKind::Bsde | TaskKind::Variational | TaskKind::KolmogorovScan => {}
        }
        if matches!(kind, TaskKind::MildResidual | TaskKind::KolmogorovScan) && built.as_ref().is_some_and(|m| m.problem().spaces.dim_k != 1) {
            errors.push("task needs a scalar value space".into());
        }
    }

    let dir = overrides
        .out
        .clone()
        .or(raw.output.and_then(|o| o.dir).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"));

    if !errors.is_empty() {
        return Err(ConfigErrors(errors));
    }
    let (name, description, _) = model.expect("model validated");
    Ok(ExperimentConfig {
        model: ModelConfig { name, description },
        task: TaskConfig {
            kind: kind.expect("task validated"),
            t,
            x,
            direction,
            restart_times,
            quad_steps,
            controls,
            scan_t,
            scan_x,
            fd_eps: raw_task.fd_eps,
            export_paths: raw_task.export_paths.unwrap_or(100),
        },
        mc: McConfig {
            seed: seed.expect("seed validated"),
            n_paths,
            n_steps,
            schedule,
            basis,
            p_list,
        },
        output: OutputConfig { dir },
    })
}
