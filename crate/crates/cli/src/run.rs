//! Experiment orchestration and result persistence.
//!
//! Every task writes `summary.json` (keys sorted, config echoed) next to its
//! task-specific CSV files. Solver errors are recorded in the summary rather
//! than aborting the bundle.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use fbsde_core::bsde::kp_norm;
use fbsde_core::control::{audit_strategies, hamiltonian, ControlProblem, Strategy};
use fbsde_core::forward::{flow_discrepancy, generate_increments, simulate_forward, sup_moment};
use fbsde_core::grid::TimeGrid;
use fbsde_core::kolmogorov::{eval_grad_u, eval_u, mild_residual, solve_ensemble, z_gradient_identity, GradientMethod, McSpec};
use fbsde_core::registry::{ClosedForm, Model};
use fbsde_core::stats::{norm, McEstimate};
use fbsde_core::FbsdeError;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, TaskKind};
use crate::HarnessError;

/// Tolerance against a closed form when the forward model is deterministic.
pub const DETERMINISTIC_TOLERANCE: f64 = 2e-3;
/// Standard errors allowed against a closed form for stochastic models.
pub const SE_MULTIPLIER: f64 = 3.0;
/// Floor on the Hamiltonian defect of the feedback strategy.
pub const H_MIN_FLOOR: f64 = -1e-6;

/// One pass/fail comparison recorded in the summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub reference: f64,
    pub tolerance: f64,
}

impl Check {
    /// `|value - reference| <= tolerance`.
    pub fn close(name: impl Into<String>, value: f64, reference: f64, tolerance: f64) -> Self {
        Self { name: name.into(), passed: (value - reference).abs() <= tolerance, value, reference, tolerance }
    }

    /// `value <= bound`.
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), passed: value <= bound, value, reference: bound, tolerance: 0.0 }
    }

    /// `value >= bound`.
    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), passed: value >= bound, value, reference: bound, tolerance: 0.0 }
    }
}

/// What a run produced, as written to `summary.json`.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: Value,
    pub checks: Vec<Check>,
    pub error: Option<String>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.checks.iter().all(|c| c.passed)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            1
        }
    }
}

struct TaskOutput {
    outputs: Value,
    checks: Vec<Check>,
}

type Rows = Vec<Vec<String>>;

fn f(v: f64) -> String {
    format!("{v}")
}

fn write_csv(path: &Path, header: &[&str], rows: &Rows) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the configured task and writes the bundle. IO failures are returned
/// as errors; solver failures end up in the summary.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome, HarnessError> {
    let dir = config.output.dir.clone();
    fs::create_dir_all(&dir)?;
    let result = config
        .model
        .description
        .build()
        .map_err(HarnessError::Solver)
        .and_then(|model| dispatch(config, &model, &dir));
    let (outputs, checks, error) = match result {
        Ok(t) => (t.outputs, t.checks, None),
        Err(HarnessError::Solver(e)) => (Value::Null, Vec::new(), Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let passed = error.is_none() && checks.iter().all(|c| c.passed);
    let summary = json!({
        "config": config,
        "task": config.task.kind.as_str(),
        "outputs": outputs,
        "checks": checks,
        "passed": passed,
        "error": error,
        "timestamp": SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        "version": env!("CARGO_PKG_VERSION"),
    });
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(dir.join("summary.json"), text)?;
    Ok(RunOutcome { dir, summary, checks, error })
}

fn dispatch(config: &ExperimentConfig, model: &Model, dir: &Path) -> Result<TaskOutput, HarnessError> {
    match config.task.kind {
        TaskKind::Forward => forward_task(config, model, dir),
        TaskKind::Bsde => bsde_task(config, model, dir),
        TaskKind::Variational => variational_task(config, model, dir),
        TaskKind::KolmogorovScan => scan_task(config, model, dir),
        TaskKind::MildResidual => mild_task(config, model, dir),
        TaskKind::HjbAudit => audit_task(config, model, dir),
        TaskKind::ConvergenceTable => convergence_task(config, model, dir),
    }
}

fn spec_of(config: &ExperimentConfig) -> McSpec {
    McSpec::new(config.mc.n_paths, config.mc.n_steps, config.mc.seed, config.mc.basis)
}

fn deterministic(config: &ExperimentConfig) -> bool {
    config.model.description.is_deterministic()
}

/// Tolerance for comparing an estimate with a closed form.
fn reference_tolerance(config: &ExperimentConfig, se: f64) -> f64 {
    if deterministic(config) {
        DETERMINISTIC_TOLERANCE
    } else {
        SE_MULTIPLIER * se
    }
}

fn closed_form_json(cf: &ClosedForm) -> Value {
    json!({ "formula_id": cf.formula_id(), "formula": cf.formula() })
}

fn estimate_json(e: McEstimate) -> Value {
    json!({ "mean": e.mean, "std_error": e.std_error })
}

fn forward_task(config: &ExperimentConfig, model: &Model, dir: &Path) -> Result<TaskOutput, HarnessError> {
    let p = model.problem();
    let task = &config.task;
    let grid = TimeGrid::new(task.t, p.horizon, config.mc.n_steps, p.horizon)?;
    let inc = generate_increments(config.mc.seed, config.mc.n_paths, &grid, p.spaces.dim_xi)?;
    let paths = simulate_forward(p, &task.x, &grid, &inc)?;
    let dim = p.spaces.dim_h;
    let n = grid.n_steps;

    let mut checks = Vec::new();
    let mut flow = Vec::new();
    let bound = 1e-10 * (1.0 + norm(&task.x));
    for &s in &task.restart_times {
        let d = flow_discrepancy(p, task.t, s, &task.x, &grid, &inc)?;
        checks.push(Check::at_most(format!("flow-identity@{s}"), d, bound));
        flow.push(json!({ "restart_time": s, "discrepancy": d }));
    }
    let moments = config
        .mc
        .p_list
        .iter()
        .map(|&q| Ok(json!({ "p": q, "sup_moment": estimate_json(sup_moment(&paths, q)?) })))
        .collect::<Result<Vec<_>, FbsdeError>>()?;

    let mut header: Vec<String> = vec!["path_id".into(), "step".into(), "t".into()];
    header.extend((0..dim).map(|c| format!("x{c}")));
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for k in 0..paths.n_paths.min(task.export_paths) {
        for i in 0..=n {
            let mut r = vec![k.to_string(), i.to_string(), f(grid.node(i))];
            r.extend(paths.state(k, i).iter().map(|v| f(*v)));
            rows.push(r);
        }
    }
    write_csv(&dir.join("paths.csv"), &header_ref, &rows)?;

    let mut means = Vec::new();
    let mut terminal_mean = vec![0.0; dim];
    for i in 0..=n {
        let mut r = vec![i.to_string(), f(grid.node(i))];
        for c in 0..dim {
            let col: Vec<f64> = (0..paths.n_paths).map(|k| paths.state(k, i)[c]).collect();
            let e = McEstimate::from_samples(&col);
            if i == n {
                terminal_mean[c] = e.mean;
            }
            r.push(f(e.mean));
            r.push(f(e.std_error));
        }
        means.push(r);
    }
    let mut mh: Vec<String> = vec!["step".into(), "t".into()];
    for c in 0..dim {
        mh.push(format!("mean_x{c}"));
        mh.push(format!("se_x{c}"));
    }
    write_csv(&dir.join("means.csv"), &mh.iter().map(String::as_str).collect::<Vec<_>>(), &means)?;

    Ok(TaskOutput {
        outputs: json!({
            "flow_discrepancy": flow,
            "sup_moments": moments,
            "terminal_mean": terminal_mean,
            "n_paths": paths.n_paths,
            "n_steps": n,
        }),
        checks,
    })
}

fn bsde_task(config: &ExperimentConfig, model: &Model, dir: &Path) -> Result<TaskOutput, HarnessError> {
    let p = model.problem();
    let task = &config.task;
    let e = solve_ensemble(p, task.t, &task.x, &spec_of(config))?;
    let sol = &e.solution;
    let k = sol.dim_k;
    let y0: Vec<McEstimate> = (0..k).map(|c| sol.y0_estimate(c)).collect();
    let norms = config
        .mc
        .p_list
        .iter()
        .map(|&q| Ok(json!({ "p": q, "kp_norm": kp_norm(sol, q)? })))
        .collect::<Result<Vec<_>, FbsdeError>>()?;

    let mut checks = Vec::new();
    let mut reference = Value::Null;
    if let (Some(cf), Some(r)) = (config.model.description.closed_form(), config.model.description.reference(task.t, &task.x)) {
        let tol = reference_tolerance(config, y0[0].std_error);
        checks.push(Check::close(format!("y0-vs-{}", cf.formula_id()), y0[0].mean, r, tol));
        reference = json!({ "value": r, "closed_form": closed_form_json(&cf) });
    }

    let zl = p.spaces.z_len();
    let mut header: Vec<String> = vec!["path_id".into(), "step".into(), "t".into()];
    header.extend((0..k).map(|c| format!("y{c}")));
    header.extend((0..zl).map(|c| format!("z{c}")));
    let n = e.grid.n_steps;
    let mut rows = Vec::new();
    for path in 0..sol.n_paths.min(task.export_paths) {
        for i in 0..=n {
            let mut r = vec![path.to_string(), i.to_string(), f(e.grid.node(i))];
            r.extend(sol.y(path, i).iter().map(|v| f(*v)));
            if i < n {
                r.extend(sol.z(path, i).iter().map(|v| f(*v)));
            } else {
                r.extend((0..zl).map(|_| String::new()));
            }
            rows.push(r);
        }
    }
    write_csv(&dir.join("solution.csv"), &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;

    Ok(TaskOutput {
        outputs: json!({
            "y0": y0.iter().map(|e| estimate_json(*e)).collect::<Vec<_>>(),
            "reference": reference,
            "kp_norms": norms,
            "max_newton_iterations": sol.max_newton_iterations(),
            "rank_deficient": sol.any_rank_deficient(),
            "n_paths": sol.n_paths,
            "n_steps": n,
        }),
        checks,
    })
}

fn variational_task(config: &ExperimentConfig, model: &Model, dir: &Path) -> Result<TaskOutput, HarnessError> {
    let p = model.problem();
    let task = &config.task;
    let spec = spec_of(config);
    let var = eval_grad_u(p, task.t, &task.x, &task.direction, GradientMethod::VariationalBsde, &spec)?;
    let fd = eval_grad_u(p, task.t, &task.x, &task.direction, GradientMethod::FiniteDifference { eps: task.fd_eps }, &spec)?;
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for c in 0..var.dir_derivative.len() {
        let (a, b) = (var.estimate(c), fd.estimate(c));
        let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        checks.push(Check::close(format!("variational-vs-fd[{c}]"), a.mean, b.mean, (SE_MULTIPLIER * se).max(1e-2)));
        rows.push(vec!["variational-bsde".into(), c.to_string(), f(a.mean), f(a.std_error)]);
        rows.push(vec!["finite-difference".into(), c.to_string(), f(b.mean), f(b.std_error)]);
    }
    write_csv(&dir.join("gradient.csv"), &["method", "component", "dir_derivative", "std_error"], &rows)?;

    let z_identity = if !deterministic(config) && p.spaces.dim_k == 1 && task.t < p.horizon {
        let r = z_gradient_identity(p, task.t, &task.x, &spec)?;
        json!({
            "max_abs_deviation": r.max_abs_deviation,
            "max_reference": r.max_reference,
            "relative_deviation": r.relative_deviation,
            "nodes": r.nodes,
            "n_points": r.n_points,
        })
    } else {
        Value::Null
    };
    Ok(TaskOutput {
        outputs: json!({
            "variational": var,
            "finite_difference": fd,
            "z_gradient_identity": z_identity,
        }),
        checks,
    })
}

fn scan_task(config: &ExperimentConfig, model: &Model, dir: &Path) -> Result<TaskOutput, HarnessError> {
    let p = model.problem();
    let task = &config.task;
    let dim = p.spaces.dim_h;
    let desc = &config.model.description;
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    let mut points = Vec::new();
    let mut j = 0u64;
    for &t in &task.scan_t {
        for &xv in &task.scan_x {
            let x = vec![xv; dim];
            // Each point gets its own stream so points are independent.
            let spec = spec_of(config).child(j);
            j += 1;
            let u = eval_u(p, t, &x, &spec)?.estimate(0);
            let g = eval_grad_u(p, t, &x, &task.direction, GradientMethod::VariationalBsde, &spec)?.estimate(0);
            let reference = desc.reference(t, &x);
            if let Some(r) = reference {
                checks.push(Check::close(format!("u({t},{xv})"), u.mean, r, reference_tolerance(config, u.std_error)));
            }
            rows.push(vec![
                f(t),
                f(xv),
                f(u.mean),
                f(u.std_error),
                f(g.mean),
                f(g.std_error),
                reference.map(f).unwrap_or_default(),
            ]);
            points.push(json!({ "t": t, "x": xv, "u": estimate_json(u), "grad_u": estimate_json(g), "reference": reference }));
        }
    }
    write_csv(&dir.join("scan.csv"), &["t", "x", "u", "u_se", "grad_u", "grad_u_se", "reference"], &rows)?;
    Ok(TaskOutput {
        outputs: json!({
            "points": points,
            "closed_form": desc.closed_form().map(|c| closed_form_json(&c)),
        }),
        checks,
    })
}

fn mild_task(config: &ExperimentConfig, model: &Model, dir: &Path) -> Result<TaskOutput, HarnessError> {
    let p = model.problem();
    let task = &config.task;
    let r = mild_residual(p, task.t, &task.x, task.quad_steps, &spec_of(config))?;
    let tol = if r.std_error > 0.0 { SE_MULTIPLIER * r.std_error } else { DETERMINISTIC_TOLERANCE };
    let checks = vec![Check::close("mild-residual", r.residual, 0.0, tol)];
    let rows = r
        .nodes
        .iter()
        .map(|n| vec![f(n.tau), f(n.weight), f(n.value.mean), f(n.value.std_error)])
        .collect();
    write_csv(&dir.join("mild_nodes.csv"), &["tau", "weight", "value", "std_error"], &rows)?;
    Ok(TaskOutput { outputs: serde_json::to_value(&r)?, checks })
}

fn hamiltonian_check(cp: &ControlProblem, t: f64, x: &[f64]) -> Result<Check, FbsdeError> {
    let p = &cp.base;
    let zl = p.spaces.z_len();
    let mut worst: f64 = 0.0;
    for iy in 0..=40 {
        let y = -2.0 + 0.1 * iy as f64;
        for z0 in [-1.5, -0.25, 0.0, 0.5, 2.0] {
            let z = vec![z0; zl];
            let (h, _) = hamiltonian(cp, t, x, y, &z)?;
            let psi = p.driver.eval(1, t, x, &[y], &z)[0];
            worst = worst.max((h - psi).abs());
        }
    }
    let tol = if cp.is_grid() { 1e-12 } else { 0.0 };
    Ok(Check::at_most("hamiltonian-matches-driver", worst, tol))
}

fn audit_task(config: &ExperimentConfig, model: &Model, dir: &Path) -> Result<TaskOutput, HarnessError> {
    let cp = model.control().expect("config guarantees a control model");
    let task = &config.task;
    let mut checks = vec![hamiltonian_check(cp, task.t, &task.x)?];
    let mut strategies = vec![Strategy::Feedback];
    strategies.extend(task.controls.iter().map(|&u| Strategy::Constant(vec![u])));
    let (_, reports) = audit_strategies(cp, &strategies, task.t, &task.x, &spec_of(config))?;

    let mut rows = Vec::new();
    for (s, r) in strategies.iter().zip(&reports) {
        let label = match s {
            Strategy::Constant(u) => format!("constant:{}", u[0]),
            other => other.label(),
        };
        if matches!(s, Strategy::Feedback) {
            let tol = (SE_MULTIPLIER * r.gap.std_error).max(5e-2 * (1.0 + r.v.mean.abs()));
            checks.push(Check::close("feedback-gap", r.gap.mean, 0.0, tol));
            checks.push(Check::at_least("feedback-h-min", r.h_min, H_MIN_FLOOR));
        } else {
            checks.push(Check::at_least(format!("{label}-gap"), r.gap.mean, -SE_MULTIPLIER * r.gap.std_error));
        }
        for st in &r.per_step {
            rows.push(vec![
                label.clone(),
                st.step.to_string(),
                f(st.t),
                f(st.mean_control),
                f(st.mean_discount),
                f(st.mean_defect),
            ]);
        }
    }
    write_csv(&dir.join("audit_steps.csv"), &["strategy", "step", "t", "mean_control", "mean_discount", "mean_defect"], &rows)?;
    let summaries: Vec<Value> = strategies
        .iter()
        .zip(&reports)
        .map(|(s, r)| {
            json!({
                "strategy": s.label(),
                "v": estimate_json(r.v),
                "j": estimate_json(r.j),
                "gap": estimate_json(r.gap),
                "predicted_gap": r.predicted_gap,
                "h_min": r.h_min,
            })
        })
        .collect();
    Ok(TaskOutput { outputs: json!({ "strategies": summaries, "n_paths": config.mc.n_paths, "n_steps": config.mc.n_steps }), checks })
}

fn convergence_task(config: &ExperimentConfig, model: &Model, dir: &Path) -> Result<TaskOutput, HarnessError> {
    let p = model.problem();
    let task = &config.task;
    let desc = &config.model.description;
    let cf = desc.closed_form().expect("config guarantees a closed form");
    let exact = desc.reference(task.t, &task.x).expect("closed form evaluates");
    let mut rows = Vec::new();
    let mut table = Vec::new();
    let mut errors: Vec<(f64, f64)> = Vec::new();
    for &n in &config.mc.schedule {
        let spec = McSpec { n_steps: n, ..spec_of(config) };
        let u = eval_u(p, task.t, &task.x, &spec)?.estimate(0);
        let err = (u.mean - exact).abs();
        rows.push(vec![n.to_string(), f(u.mean), f(u.std_error), f(err)]);
        table.push(json!({ "n_steps": n, "value": estimate_json(u), "abs_error": err }));
        errors.push((err, u.std_error));
    }
    // Decrease is required outright without noise and up to the combined
    // standard errors with it.
    let monotone = errors
        .windows(2)
        .all(|w| if deterministic(config) { w[1].0 < w[0].0 } else { w[1].0 <= w[0].0 + SE_MULTIPLIER * (w[0].1 + w[1].1) });
    write_csv(&dir.join("convergence.csv"), &["n_steps", "value", "std_error", "abs_error"], &rows)?;
    let (last_err, last_se) = *errors.last().expect("schedule is nonempty");
    let checks = vec![
        Check::at_most("finest-error", last_err, reference_tolerance(config, last_se)),
        Check { name: "monotone-decrease".into(), passed: monotone, value: monotone as u8 as f64, reference: 1.0, tolerance: 0.0 },
    ];
    Ok(TaskOutput {
        outputs: json!({
            "reference": exact,
            "closed_form": closed_form_json(&cf),
            "table": table,
            "monotone_decrease": monotone,
        }),
        checks,
    })
}
