use fkpde::catalog::{build, CatalogParams};
use fkpde::fixed_point::{outer_psi_solve, SolverConfig};
use fkpde::lattice::{SpaceGrid, TimeGrid};
use std::sync::Arc;

fn main() {
    let g0 = 0.3;
    let alpha = 0.05;
    let mut p = CatalogParams::default();
    p.horizon = 0.1;
    p.g_amp = g0;
    let mut spec = build("heat", &p).unwrap();
    spec.source_g = Arc::new(move |_t, x, _r1, _r2, r3, out| {
        out[0] = g0 * (std::f64::consts::TAU * x[0]).cos() + alpha * r3[0];
    });
    spec.g_spatial_only = false;
    for (nodes, particles) in [(16usize, 1000usize), (32, 4000)] {
        let space = SpaceGrid::uniform(1, nodes).unwrap();
        let grid = TimeGrid::new(80, 0.1).unwrap();
        let mut cfg = SolverConfig::new(space, grid, particles, 2024);
        cfg.psi_stride = 8;
        cfg.check_assumptions = false;
        let t0 = std::time::Instant::now();
        let (_, outer, _) = outer_psi_solve(&spec, &cfg).unwrap();
        println!(
            "nodes {nodes} N {particles}: passes {}, status {:?}, distances {:?} ({:.1}s)",
            outer.passes,
            outer.status,
            outer.distance_history.iter().map(|d| format!("{d:.2e}")).collect::<Vec<_>>(),
            t0.elapsed().as_secs_f64()
        );
    }
}
