//! Browser demo: three interactive views of the solver on the unit torus,
//! compiled to WebAssembly behind `wasm-bindgen`. The plain-Rust entry
//! points below are thin JSON producers so they stay testable on native
//! targets; the `static/index.html` page owns all the plotting.

use fkpde::catalog::{self, CatalogParams};
use fkpde::fd::{fd_solve, Scheme};
use fkpde::fixed_point::{picard_solve, SolverConfig};
use fkpde::fk::estimate_psi_slice;
use fkpde::lattice::{SpaceGrid, TimeGrid};
use fkpde::transforms::invert_values;

use wasm_bindgen::prelude::*;

fn json_array(values: &[f64]) -> String {
    let mut out = String::from("[");
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        if v.is_finite() {
            out.push_str(&format!("{v:e}"));
        } else {
            out.push_str("null");
        }
    }
    out.push(']');
    out
}

fn params_for(
    horizon: f64,
    u0_amp: f64,
    v_amp: f64,
    f_amp: f64,
    g_amp: f64,
    beta: f64,
) -> CatalogParams {
    CatalogParams {
        horizon,
        diffusion: 0.5,
        u0_amp,
        v_amp,
        f_amp,
        g_amp,
        beta,
    }
}

/// Finite-difference solve of a catalog problem; returns the solution
/// curve at PDE time `t_frac * horizon` as JSON `{x: [...], u: [...]}`.
pub fn fd_curve_json(
    problem: &str,
    horizon: f64,
    u0_amp: f64,
    v_amp: f64,
    f_amp: f64,
    g_amp: f64,
    beta: f64,
    nodes: usize,
    t_frac: f64,
) -> Result<String, String> {
    let p = params_for(horizon, u0_amp, v_amp, f_amp, g_amp, beta);
    let spec = catalog::build(problem, &p).map_err(|e| e.to_string())?;
    let space = SpaceGrid::uniform(1, nodes).map_err(|e| e.to_string())?;
    let grid = TimeGrid::new(nodes.max(64) * 4, horizon).map_err(|e| e.to_string())?;
    let sol = fd_solve(&spec, &space, &grid, Scheme::ImexEuler).map_err(|e| e.to_string())?;
    let knot = ((t_frac.clamp(0.0, 1.0) * grid.n_steps as f64).round() as usize)
        .min(grid.n_steps);
    let xs: Vec<f64> = (0..nodes).map(|i| i as f64 / nodes as f64).collect();
    Ok(format!(
        "{{\"t\":{:e},\"x\":{},\"u\":{}}}",
        grid.knot(knot),
        json_array(&xs),
        json_array(sol.slice(knot))
    ))
}

/// One Feynman-Kac slice against the finite-difference curve at the same
/// PDE time, with the 3-sigma Monte Carlo band:
/// `{x, mc, band, fd, t}` as JSON.
#[allow(clippy::too_many_arguments)]
pub fn mc_vs_fd_json(
    problem: &str,
    horizon: f64,
    u0_amp: f64,
    v_amp: f64,
    f_amp: f64,
    g_amp: f64,
    particles: usize,
    seed: u64,
    t_frac: f64,
    nodes: usize,
) -> Result<String, String> {
    let p = params_for(horizon, u0_amp, v_amp, f_amp, g_amp, 0.0);
    let spec = catalog::build(problem, &p).map_err(|e| e.to_string())?;
    let space = SpaceGrid::uniform(1, nodes).map_err(|e| e.to_string())?;
    let n_steps = 80;
    let grid = TimeGrid::new(n_steps, horizon).map_err(|e| e.to_string())?;

    // PDE time t corresponds to the backward launch time s = T - t.
    let t_step = ((t_frac.clamp(0.0, 1.0) * n_steps as f64).round() as usize).min(n_steps);
    let launch = n_steps - t_step;

    let mc = if f_amp == 0.0 {
        estimate_psi_slice(&spec, None, grid, &space, 0, launch, particles, seed)
            .map_err(|e| e.to_string())?
    } else {
        // Nonlinear drift: run the Picard loop, then read the slice.
        let mut cfg = SolverConfig::new(space.clone(), grid, particles, seed);
        cfg.psi_stride = 8;
        cfg.check_assumptions = false;
        let (psi, _) = picard_solve(&spec, &cfg).map_err(|e| e.to_string())?;
        let steps = cfg.slice_steps().map_err(|e| e.to_string())?;
        let si = steps.iter().position(|&k| k >= launch).unwrap_or(0);
        let nodes_n = space.total_nodes();
        let values = psi.values[si * nodes_n..(si + 1) * nodes_n].to_vec();
        let stderr = psi.stderr[si * nodes_n..(si + 1) * nodes_n].to_vec();
        fkpde::fk::SliceEstimate { values, stderr, max_particle_abs: 0.0 }
    };

    let sol = fd_solve(&spec, &space, &grid, Scheme::ImexEuler).map_err(|e| e.to_string())?;
    let band: Vec<f64> = mc.stderr.iter().map(|s| 3.0 * s).collect();
    let xs: Vec<f64> = (0..nodes).map(|i| i as f64 / nodes as f64).collect();
    Ok(format!(
        "{{\"t\":{:e},\"x\":{},\"mc\":{},\"band\":{},\"fd\":{}}}",
        grid.knot(t_step),
        json_array(&xs),
        json_array(&mc.values),
        json_array(&band),
        json_array(sol.slice(t_step))
    ))
}

/// Cole-Hopf route versus the direct solve of the quadratic-gradient
/// equation: `{x, direct, via_transform, v_min, t}` as JSON.
pub fn cole_hopf_json(
    beta: f64,
    horizon: f64,
    u0_amp: f64,
    v_amp: f64,
    nodes: usize,
    t_frac: f64,
) -> Result<String, String> {
    if beta == 0.0 {
        return Err("beta must be nonzero; at beta = 0 the equation is already gradient-free"
            .into());
    }
    let p = params_for(horizon, u0_amp, v_amp, 0.0, 0.0, beta);
    let kpz = catalog::build_kpz("kpz", &p).map_err(|e| e.to_string())?;
    let space = SpaceGrid::uniform(1, nodes).map_err(|e| e.to_string())?;
    let grid = TimeGrid::new(nodes.max(64) * 4, horizon).map_err(|e| e.to_string())?;
    let knot = ((t_frac.clamp(0.0, 1.0) * grid.n_steps as f64).round() as usize)
        .min(grid.n_steps);

    let direct = fd_solve(&kpz.direct_problem(), &space, &grid, Scheme::ImexEuler)
        .map_err(|e| e.to_string())?;
    let transformed = kpz.build_transformed_problem().map_err(|e| e.to_string())?;
    let v_sol = fd_solve(&transformed, &space, &grid, Scheme::ImexEuler)
        .map_err(|e| e.to_string())?;
    let v_slice = v_sol.slice(knot);
    let v_min = v_slice.iter().cloned().fold(f64::INFINITY, f64::min);
    let via = invert_values(v_slice, nodes, 1, beta).map_err(|e| e.to_string())?;

    let xs: Vec<f64> = (0..nodes).map(|i| i as f64 / nodes as f64).collect();
    Ok(format!(
        "{{\"t\":{:e},\"x\":{},\"direct\":{},\"via_transform\":{},\"v_min\":{:e}}}",
        grid.knot(knot),
        json_array(&xs),
        json_array(direct.slice(knot)),
        json_array(&via),
        v_min
    ))
}

#[wasm_bindgen]
pub fn fd_curve(
    problem: String,
    horizon: f64,
    u0_amp: f64,
    v_amp: f64,
    f_amp: f64,
    g_amp: f64,
    beta: f64,
    nodes: usize,
    t_frac: f64,
) -> Result<String, JsValue> {
    fd_curve_json(&problem, horizon, u0_amp, v_amp, f_amp, g_amp, beta, nodes, t_frac)
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn mc_vs_fd(
    problem: String,
    horizon: f64,
    u0_amp: f64,
    v_amp: f64,
    f_amp: f64,
    g_amp: f64,
    particles: usize,
    seed: u64,
    t_frac: f64,
    nodes: usize,
) -> Result<String, JsValue> {
    mc_vs_fd_json(
        &problem, horizon, u0_amp, v_amp, f_amp, g_amp, particles, seed, t_frac, nodes,
    )
    .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn cole_hopf(
    beta: f64,
    horizon: f64,
    u0_amp: f64,
    v_amp: f64,
    nodes: usize,
    t_frac: f64,
) -> Result<String, JsValue> {
    cole_hopf_json(beta, horizon, u0_amp, v_amp, nodes, t_frac).map_err(|e| JsValue::from_str(&e))
}
