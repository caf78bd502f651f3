//! Reference values computed independently of this crate.

use fbsde_core::bsde::solve_bsde;
use fbsde_core::forward::{generate_increments, simulate_forward, sup_moment};
use fbsde_core::grid::TimeGrid;
use fbsde_core::kolmogorov::{eval_u, McSpec};
use fbsde_core::registry::{lookup, registry};
use fbsde_core::regression::RegressionBasis;

/// `E[max_{i <= 64} W_{i/64}^2]` for a standard Brownian motion on `[0, 1]`,
/// from a brute-force simulation of 10^6 discrete paths (standard error
/// 1.54e-3). The continuous-time limit is larger (about 1.832); the grid
/// maximum converges slowly from below.
const SUP_SQUARE_64: f64 = 1.66036;
const SUP_SQUARE_64_SE: f64 = 0.00154;

#[test]
fn brownian_grid_maximum_second_moment() {
    let model = lookup("martingale").unwrap().build().unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 64, 1.0).unwrap();
    let inc = generate_increments(2024, 100_000, &grid, 1).unwrap();
    let paths = simulate_forward(model.problem(), &[0.0], &grid, &inc).unwrap();
    let m = sup_moment(&paths, 2.0).unwrap();
    let combined = (m.std_error.powi(2) + SUP_SQUARE_64_SE.powi(2)).sqrt();
    assert!((m.mean - SUP_SQUARE_64).abs() <= 3.0 * combined, "{m:?}");
}

fn cubic_error(a: f64, n_steps: usize) -> f64 {
    let model = lookup("ode-cubic").unwrap().build().unwrap();
    let spec = McSpec::new(1, n_steps, 1, RegressionBasis::pathwise_exact());
    let u = eval_u(model.problem(), 0.0, &[a], &spec).unwrap().u_value[0];
    (u - a / (1.0 + 2.0 * a * a * 0.5f64).sqrt()).abs()
}

#[test]
fn cubic_scheme_is_first_order_for_large_terminal_values() {
    for a in [1.0, 5.0, 10.0] {
        let errors: Vec<f64> = [128, 256, 512, 1024].iter().map(|&n| cubic_error(a, n)).collect();
        for w in errors.windows(2) {
            let ratio = w[1] / w[0];
            assert!((0.375..=0.625).contains(&ratio), "a = {a}: errors {errors:?}");
        }
    }
}

#[test]
fn deterministic_closed_forms_converge_monotonically() {
    for entry in registry() {
        let d = &entry.description;
        if d.closed_form().is_none() || !d.is_deterministic() {
            continue;
        }
        let model = entry.build().unwrap();
        let exact = d.reference(0.0, &entry.default_x).unwrap();
        let errors: Vec<f64> = [128, 256, 512, 1024]
            .iter()
            .map(|&n| {
                let spec = McSpec::new(1, n, 1, RegressionBasis::pathwise_exact());
                (eval_u(model.problem(), 0.0, &entry.default_x, &spec).unwrap().u_value[0] - exact).abs()
            })
            .collect();
        assert!(errors.windows(2).all(|w| w[1] < w[0]), "{}: {errors:?}", entry.name);
        assert!(errors[3] <= 2e-3, "{}: {errors:?}", entry.name);
    }
}

#[test]
fn stochastic_closed_forms_converge_within_noise() {
    for entry in registry() {
        let d = &entry.description;
        if d.closed_form().is_none() || d.is_deterministic() {
            continue;
        }
        let model = entry.build().unwrap();
        let exact = d.reference(0.0, &entry.default_x).unwrap();
        let basis = RegressionBasis::polynomial(2);
        let mut previous: Option<(f64, f64)> = None;
        for n in [128, 256, 512, 1024] {
            let spec = McSpec::new(5000, n, 77, basis);
            let e = eval_u(model.problem(), 0.0, &entry.default_x, &spec).unwrap().estimate(0);
            let err = (e.mean - exact).abs();
            assert!(err <= 3.0 * e.std_error + 1e-12, "{} at n = {n}: {e:?} vs {exact}", entry.name);
            if let Some((prev, prev_se)) = previous {
                assert!(err <= prev + 3.0 * (e.std_error + prev_se), "{} at n = {n}", entry.name);
            }
            previous = Some((err, e.std_error));
        }
    }
}

#[test]
fn pathwise_exact_solve_matches_full_solver_on_deterministic_models() {
    let entry = lookup("ode-linear").unwrap();
    let model = entry.build().unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 64, 1.0).unwrap();
    let inc = generate_increments(5, 3, &grid, 1).unwrap();
    let paths = simulate_forward(model.problem(), &[1.0], &grid, &inc).unwrap();
    let a = solve_bsde(model.problem(), &paths, &inc, &RegressionBasis::pathwise_exact()).unwrap();
    let b = solve_bsde(model.problem(), &paths, &inc, &RegressionBasis::polynomial(3)).unwrap();
    for k in 0..3 {
        for i in 0..=64 {
            assert_eq!(a.y(k, i), b.y(k, i));
        }
    }
}
