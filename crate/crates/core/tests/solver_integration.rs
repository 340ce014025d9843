//! Cross-cutting solver checks at small scale: the statistical semigroup
//! property, idempotence of the self-map at its fixed point, bitwise
//! reproducibility of the Picard trajectory, and the integral-form
//! residual of the Monte Carlo solution under the finite-difference
//! operator.

use std::sync::Arc;

use fkpde::catalog::{build, CatalogParams};
use fkpde::fd::residual_of;
use fkpde::fixed_point::{phi_map, picard_solve, rho_proxy_distance, PicardStatus, SolverConfig};
use fkpde::fk::semigroup_apply;
use fkpde::lattice::{SpaceGrid, TimeGrid};
use fkpde::problem::ProblemSpec;

const TWO_PI: f64 = std::f64::consts::TAU;

#[test]
fn semigroup_property_composes_statistically() {
    // P_{0,s} applied to an estimate of P_{s,r} f matches a direct
    // estimate of P_{0,r} f within the combined uncertainty.
    let spec = build("heat", &CatalogParams::default()).unwrap();
    let grid = TimeGrid::new(40, 0.1).unwrap();
    let space = SpaceGrid::uniform(1, 32).unwrap();
    let f = |x: &[f64], out: &mut [f64]| out[0] = (TWO_PI * x[0]).sin();
    let n = 4000;

    let (inner, inner_se) =
        semigroup_apply(&spec, None, grid, &space, 20, 40, &f, n, 7, 1).unwrap();
    let inner_field = inner.clone();
    let composed_f = move |x: &[f64], out: &mut [f64]| inner_field.interpolate(x, out);
    let (composed, comp_se) =
        semigroup_apply(&spec, None, grid, &space, 0, 20, &composed_f, n, 7, 2).unwrap();
    let (direct, direct_se) =
        semigroup_apply(&spec, None, grid, &space, 0, 40, &f, n, 7, 3).unwrap();

    let h: f64 = space.spacing(0);
    let interp_bias = TWO_PI * TWO_PI * h * h / 8.0; // linear-interp remainder
    let max_inner_se = inner_se.values.iter().cloned().fold(0.0f64, f64::max);
    for node in 0..space.total_nodes() {
        let tol = 3.0 * (comp_se.node(node)[0] + direct_se.node(node)[0] + max_inner_se)
            + interp_bias;
        let diff = (composed.node(node)[0] - direct.node(node)[0]).abs();
        assert!(diff <= tol, "node {node}: composition error {diff} > {tol}");
    }
}

fn small_nonlinear() -> (ProblemSpec, SolverConfig) {
    let mut p = CatalogParams::default();
    p.horizon = 0.1;
    p.f_amp = 0.5;
    p.v_amp = 0.2;
    p.g_amp = 0.3;
    let spec = build("factored-f", &p).unwrap();
    let space = SpaceGrid::uniform(1, 16).unwrap();
    let grid = TimeGrid::new(40, 0.1).unwrap();
    let mut cfg = SolverConfig::new(space, grid, 2000, 31);
    cfg.psi_stride = 8;
    cfg.tol = 2e-3;
    cfg.check_assumptions = false;
    (spec, cfg)
}

#[test]
fn self_map_is_idempotent_at_the_fixed_point() {
    let (spec, cfg) = small_nonlinear();
    let (psi, state) = picard_solve(&spec, &cfg).unwrap();
    assert_eq!(state.status, PicardStatus::Converged);
    let (once_more, _) = phi_map(&spec, &psi, &cfg).unwrap();
    let moved = rho_proxy_distance(&once_more, &psi, cfg.lambda).unwrap();
    assert!(
        moved < 2.0 * cfg.tol,
        "extra self-map application moved the field by {moved} >= {}",
        2.0 * cfg.tol
    );
}

#[test]
fn picard_history_reproduces_bitwise() {
    let (spec, cfg) = small_nonlinear();
    let (psi_a, state_a) = picard_solve(&spec, &cfg).unwrap();
    let (psi_b, state_b) = picard_solve(&spec, &cfg).unwrap();
    assert_eq!(psi_a.values, psi_b.values);
    assert_eq!(state_a.distance_history, state_b.distance_history);
    assert_eq!(state_a.contraction_ratios, state_b.contraction_ratios);
}

#[test]
fn converged_field_satisfies_the_discrete_equation() {
    // Read the converged psi back as u_t = psi_{T-t} and measure the
    // integral-form residual with the finite-difference operator on the
    // slice lattice. The threshold combines the quadrature consistency
    // term with the propagated Monte Carlo noise of the second
    // differences.
    let mut p = CatalogParams::default();
    p.horizon = 0.1;
    p.v_amp = 0.2;
    p.g_amp = 0.3;
    let spec = build("factored-f", &p).unwrap(); // f_amp = 0: linear problem
    let space = SpaceGrid::uniform(1, 32).unwrap();
    let grid = TimeGrid::new(80, 0.1).unwrap();
    let mut cfg = SolverConfig::new(space.clone(), grid, 20_000, 99);
    cfg.psi_stride = 8;
    cfg.check_assumptions = false;
    let (psi, state) = picard_solve(&spec, &cfg).unwrap();
    assert_eq!(state.status, PicardStatus::Converged);
    let u = psi.to_pde_time();

    let n_slices = u.n_slices();
    let slice_grid = TimeGrid::new(n_slices - 1, 0.1).unwrap();
    let res = residual_of(&u.values, &slice_grid, &space, 1, &spec).unwrap();

    let h: f64 = space.spacing(0);
    let ds = slice_grid.step_size();
    let sigma = u.max_stderr();
    let a_max = 0.5;
    // noise of tr(a d^2 u) per slice, integrated by the trapezoid rule
    let hess_noise = sigma * 6.0f64.sqrt() / (h * h) * a_max;
    let noise_bound = hess_noise * ds * (n_slices as f64).sqrt();
    let bound = 5.0 * (h * h + ds) + 4.0 * (noise_bound + sigma);
    assert!(res <= bound, "residual {res:.4} > bound {bound:.4} (noise part {noise_bound:.4})");

    // negative control: node-alternating corruption has a huge discrete
    // Laplacian, which the integral form cannot miss
    let mut corrupted = u.values.clone();
    for (i, v) in corrupted.iter_mut().enumerate() {
        if i % 2 == 0 {
            *v += 0.25;
        }
    }
    let res_bad = residual_of(&corrupted, &slice_grid, &space, 1, &spec).unwrap();
    assert!(
        res_bad > 10.0 * bound,
        "corrupted residual {res_bad:.4} not rejected ({bound:.4})"
    );
}

#[test]
fn assumption_gate_blocks_bad_problems() {
    // ellipticity violated: the probe refuses to run the solver
    let mut p = CatalogParams::default();
    let mut spec = build("heat", &p).unwrap();
    spec.diffusion_a = Arc::new(|_, x, out| out[0] = 0.5 * (x[0] - 0.5)); // sign change
    let space = SpaceGrid::uniform(1, 16).unwrap();
    let grid = TimeGrid::new(40, 0.1).unwrap();
    let cfg = SolverConfig::new(space.clone(), grid, 100, 3);
    assert!(picard_solve(&spec, &cfg).is_err());

    // explicit override is available
    p.horizon = 0.1;
    let spec = build("heat", &p).unwrap();
    let mut cfg = SolverConfig::new(space, grid, 100, 3);
    cfg.check_assumptions = false;
    assert!(picard_solve(&spec, &cfg).is_ok());
}

#[test]
fn two_dimensional_monte_carlo_matches_product_mode() {
    use fkpde::fk::estimate_psi_slice;
    use fkpde::problem::DomainMode;

    let spec = ProblemSpec {
        dim_d: 2,
        dim_m: 1,
        horizon: 0.02,
        domain: DomainMode::Torus,
        diffusion_a: Arc::new(|_, _, out| out.copy_from_slice(&[0.5, 0.0, 0.0, 0.5])),
        drift_b: Arc::new(|_, _, out| out.fill(0.0)),
        potential_v: Arc::new(|_, _| 0.0),
        nonlinearity_f: Arc::new(|_, _, _, _, out| out.fill(0.0)),
        source_g: Arc::new(|_, _, _, _, _, out| out.fill(0.0)),
        g_spatial_only: true,
        initial_u0: Arc::new(|x, out| {
            out[0] = (TWO_PI * x[0]).sin() * (TWO_PI * x[1]).sin()
        }),
    };
    let space = SpaceGrid::uniform(2, 12).unwrap();
    let grid = TimeGrid::new(40, 0.02).unwrap();
    let est = estimate_psi_slice(&spec, None, grid, &space, 0, 0, 4000, 11).unwrap();
    // product mode of the half-Laplacian: rate (2 pi)^2 = 4 pi^2
    let amp = (-4.0 * std::f64::consts::PI.powi(2) * 0.02f64).exp();
    let mut x = [0.0; 2];
    for node in 0..space.total_nodes() {
        space.coord(node, &mut x);
        let want = amp * (TWO_PI * x[0]).sin() * (TWO_PI * x[1]).sin();
        let tol = (3.5 * est.stderr[node]).max(0.02);
        assert!(
            (est.values[node] - want).abs() <= tol,
            "node {node}: {} vs {want}",
            est.values[node]
        );
    }
}

#[test]
fn two_component_monte_carlo_decays_per_component() {
    use fkpde::fk::estimate_psi_slice;
    use fkpde::problem::DomainMode;

    let spec = ProblemSpec {
        dim_d: 1,
        dim_m: 2,
        horizon: 0.05,
        domain: DomainMode::Torus,
        diffusion_a: Arc::new(|_, _, out| out[0] = 0.5),
        drift_b: Arc::new(|_, _, out| out.fill(0.0)),
        potential_v: Arc::new(|_, _| 0.0),
        nonlinearity_f: Arc::new(|_, _, _, _, out| out.fill(0.0)),
        source_g: Arc::new(|_, _, _, _, _, out| out.fill(0.0)),
        g_spatial_only: true,
        initial_u0: Arc::new(|x, out| {
            out[0] = (TWO_PI * x[0]).sin();
            out[1] = 0.5 * (TWO_PI * x[0]).cos();
        }),
    };
    let space = SpaceGrid::uniform(1, 16).unwrap();
    let grid = TimeGrid::new(50, 0.05).unwrap();
    let est = estimate_psi_slice(&spec, None, grid, &space, 0, 0, 8000, 13).unwrap();
    let amp = (-2.0 * std::f64::consts::PI.powi(2) * 0.05f64).exp();
    let mut x = [0.0];
    for node in 0..16 {
        space.coord(node, &mut x);
        let v = &est.values[node * 2..node * 2 + 2];
        let se = &est.stderr[node * 2..node * 2 + 2];
        assert!((v[0] - amp * (TWO_PI * x[0]).sin()).abs() <= (3.5 * se[0]).max(0.01));
        assert!((v[1] - 0.5 * amp * (TWO_PI * x[0]).cos()).abs() <= (3.5 * se[1]).max(0.01));
    }
}
