//! Run orchestration: build the problem, run the requested solver(s),
//! write CSV tables, snapshots and the manifest.
//!
//! All CSV output is slice-major and locale-independent; nothing
//! time-dependent goes into the CSVs, so a rerun from the same manifest
//! reproduces them byte for byte. Wall-clock timings live in the manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::catalog;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fd::{fd_solve, FdSolution};
use crate::fixed_point::{outer_psi_solve, picard_solve, OuterState, PicardState, PicardStatus};
use crate::fk::PsiField;
use crate::problem::{probe_assumptions, KatoPair, ProblemSpec};
use crate::snapshot::Snapshot;
use crate::transforms::invert_values;

/// Final disposition of a run, mapped to exit codes by the CLI.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RunOutcome {
    Pass,
    GateExceeded,
    Blowup(f64),
    NonConvergence,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub outcome: RunOutcome,
    pub sup_rel_diff: Option<f64>,
    pub output_dir: PathBuf,
}

/// Instantiate the configured problem.
pub fn build_problem(cfg: &RunConfig) -> Result<ProblemSpec> {
    let mut spec = catalog::build(&cfg.problem, &cfg.params)?;
    if let Some(csv_path) = &cfg.potential_csv {
        let text = std::fs::read_to_string(csv_path)?;
        let table = catalog::tabulated_from_csv(&text, cfg.dim, &cfg.space()?)?;
        spec.potential_v = catalog::tabulated_scalar(table);
    }
    spec.validate()?;
    Ok(spec)
}

/// Monte Carlo solve, routing through the outer iteration when the source
/// is state-dependent.
pub fn solve_mc(
    spec: &ProblemSpec,
    cfg: &RunConfig,
) -> Result<(PsiField, PicardState, Option<OuterState>)> {
    let solver = cfg.solver_config()?;
    if spec.g_spatial_only {
        let (psi, state) = picard_solve(spec, &solver)?;
        Ok((psi, state, None))
    } else {
        let (psi, outer, inner) = outer_psi_solve(spec, &solver)?;
        Ok((psi, inner, Some(outer)))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(std::fs::write(path, text)?)
}

fn diagnostics_csv(state: &PicardState) -> String {
    let mut out = String::from("iteration,distance,ratio\n");
    for (i, d) in state.distance_history.iter().enumerate() {
        let ratio = if i == 0 {
            String::new()
        } else {
            format!("{:e}", state.contraction_ratios[i - 1])
        };
        let _ = writeln!(out, "{},{:e},{}", i + 1, d, ratio);
    }
    out
}

/// gnuplot-ready blocks: one `x value` table per slice, blank-line
/// separated, with the slice time in a comment header.
fn dat_blocks(times: &[f64], grid: &crate::lattice::SpaceGrid, m: usize, values: &[f64]) -> String {
    let nodes = grid.total_nodes();
    let mut out = String::new();
    let mut x = vec![0.0; grid.dim];
    for (si, t) in times.iter().enumerate() {
        let _ = writeln!(out, "# t = {t:e}");
        for node in 0..nodes {
            grid.coord(node, &mut x);
            for c in &x {
                let _ = write!(out, "{c:e} ");
            }
            for comp in 0..m {
                let _ = write!(out, "{:e} ", values[(si * nodes + node) * m + comp]);
            }
            let _ = writeln!(out);
        }
        let _ = writeln!(out);
    }
    out
}

fn emit_dat_psi(dir: &Path, name: &str, f: &PsiField) -> Result<()> {
    write_text(
        &dir.join(name),
        &dat_blocks(&f.slice_times, &f.space, f.m, &f.values),
    )
}

fn emit_dat_fd(dir: &Path, name: &str, f: &FdSolution) -> Result<()> {
    write_text(
        &dir.join(name),
        &dat_blocks(&f.grid.slice_times(), &f.space, f.m, &f.values),
    )
}

fn outer_csv(outer: &OuterState) -> String {
    let mut out = String::from("pass,distance\n");
    for (i, d) in outer.distance_history.iter().enumerate() {
        let _ = writeln!(out, "{},{:e}", i + 2, d);
    }
    out
}

struct ErrorTable {
    csv: String,
    sup_diff: f64,
    fd_sup: f64,
}

/// Per-slice differences between the PDE-time Monte Carlo field and the
/// finite-difference solution on the shared lattice.
fn error_table(u_mc: &PsiField, fd: &FdSolution) -> Result<ErrorTable> {
    if u_mc.space != fd.space || u_mc.m != fd.m {
        return Err(Error::LatticeMismatch("compare needs matching lattices".into()));
    }
    let nodes = u_mc.space.total_nodes();
    let m = u_mc.m;
    let vol = u_mc.space.cell_volume();
    let mut csv = String::from("t,sup_diff,l2_diff,max_stderr,sup_fd\n");
    let mut sup_diff = 0.0f64;
    let mut fd_sup = 0.0f64;
    for (si, &step) in u_mc.slice_steps.iter().enumerate() {
        let t = u_mc.slice_times[si];
        let fd_slice = fd.slice(step);
        let mut worst = 0.0f64;
        let mut l2 = 0.0f64;
        let mut se = 0.0f64;
        let mut fsup = 0.0f64;
        for node in 0..nodes {
            let mc = u_mc.value(si, node);
            let fv = &fd_slice[node * m..][..m];
            let mut d2 = 0.0;
            let mut f2 = 0.0;
            for c in 0..m {
                let diff = mc[c] - fv[c];
                d2 += diff * diff;
                f2 += fv[c] * fv[c];
                se = se.max(u_mc.stderr[(si * nodes + node) * m + c]);
            }
            worst = worst.max(d2.sqrt());
            fsup = fsup.max(f2.sqrt());
            l2 += d2;
        }
        let _ = writeln!(
            csv,
            "{:e},{:e},{:e},{:e},{:e}",
            t,
            worst,
            (vol * l2).sqrt(),
            se,
            fsup
        );
        sup_diff = sup_diff.max(worst);
        fd_sup = fd_sup.max(fsup);
    }
    Ok(ErrorTable { csv, sup_diff, fd_sup })
}

fn manifest(
    cfg: &RunConfig,
    command: &str,
    status_lines: &[String],
    timings: &[(String, f64)],
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# fkpde run manifest");
    let _ = writeln!(out, "command = {command}");
    let _ = writeln!(out, "build = fkpde {}", env!("CARGO_PKG_VERSION"));
    for line in cfg.manifest_lines() {
        let _ = writeln!(out, "{line}");
    }
    for line in status_lines {
        let _ = writeln!(out, "{line}");
    }
    for (name, secs) in timings {
        let _ = writeln!(out, "timing.{name}_s = {secs:.3}");
    }
    out
}

fn picard_status_lines(state: &PicardState) -> Vec<String> {
    let mut lines = vec![
        format!("picard.iterations = {}", state.iterate_index),
        format!("picard.status = {:?}", state.status),
    ];
    if let PicardStatus::BlowUp(t) = state.status {
        lines.push(format!("picard.blowup_time = {t:e}"));
    }
    lines
}

fn outcome_of(state: &PicardState) -> Option<RunOutcome> {
    match state.status {
        PicardStatus::BlowUp(t) => Some(RunOutcome::Blowup(t)),
        PicardStatus::MaxIterations => Some(RunOutcome::NonConvergence),
        _ => None,
    }
}

/// `solve-mc`: Picard (or outer) solve, snapshot and diagnostics.
pub fn run_solve_mc(cfg: &RunConfig) -> Result<RunSummary> {
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let spec = build_problem(cfg)?;
    let t0 = Instant::now();
    let (psi, state, outer) = solve_mc(&spec, cfg)?;
    let secs = t0.elapsed().as_secs_f64();
    Snapshot::from_psi(&psi).write(&dir.join("psi_mc.psif"))?;
    let u_mc = psi.to_pde_time();
    Snapshot::from_psi(&u_mc).write(&dir.join("u_mc.psif"))?;
    if cfg.emit_dat {
        emit_dat_psi(dir, "u_mc.dat", &u_mc)?;
    }
    write_text(&dir.join("diagnostics.csv"), &diagnostics_csv(&state))?;
    if let Some(outer) = &outer {
        write_text(&dir.join("outer_diagnostics.csv"), &outer_csv(outer))?;
    }
    let status = picard_status_lines(&state);
    write_text(
        &dir.join("manifest.txt"),
        &manifest(cfg, "solve-mc", &status, &[("solve_mc".into(), secs)]),
    )?;
    let outcome = outcome_of(&state).unwrap_or(RunOutcome::Pass);
    Ok(RunSummary { outcome, sup_rel_diff: None, output_dir: dir.clone() })
}

/// `solve-fd`: oracle solve and snapshot.
pub fn run_solve_fd(cfg: &RunConfig) -> Result<RunSummary> {
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let spec = build_problem(cfg)?;
    let t0 = Instant::now();
    let sol = fd_solve(&spec, &cfg.space()?, &cfg.grid()?, cfg.fd_scheme)?;
    let secs = t0.elapsed().as_secs_f64();
    Snapshot::from_fd(&sol).write(&dir.join("u_fd.psif"))?;
    if cfg.emit_dat {
        emit_dat_fd(dir, "u_fd.dat", &sol)?;
    }
    let status = vec![
        format!("fd.cfl_max_stable = {:e}", sol.cfl_report.max_stable),
        format!("fd.cfl_used = {:e}", sol.cfl_report.used),
    ];
    write_text(
        &dir.join("manifest.txt"),
        &manifest(cfg, "solve-fd", &status, &[("solve_fd".into(), secs)]),
    )?;
    Ok(RunSummary { outcome: RunOutcome::Pass, sup_rel_diff: None, output_dir: dir.clone() })
}

/// `compare`: both backends on the same problem; exit 0 iff the relative
/// sup difference stays within the configured gate.
pub fn run_compare(cfg: &RunConfig) -> Result<RunSummary> {
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let spec = build_problem(cfg)?;

    let t0 = Instant::now();
    let mc = solve_mc(&spec, cfg);
    let mc_secs = t0.elapsed().as_secs_f64();
    let (psi, state, outer) = match mc {
        Ok(v) => v,
        Err(e) => {
            // Partial manifest so the failure is reproducible.
            let status = vec![format!("error = {e}")];
            write_text(
                &dir.join("manifest.txt"),
                &manifest(cfg, "compare", &status, &[("solve_mc".into(), mc_secs)]),
            )?;
            return Err(e);
        }
    };

    let t1 = Instant::now();
    let fd = fd_solve(&spec, &cfg.space()?, &cfg.grid()?, cfg.fd_scheme)?;
    let fd_secs = t1.elapsed().as_secs_f64();

    let u_mc = psi.to_pde_time();
    let table = error_table(&u_mc, &fd)?;
    let rel = table.sup_diff / table.fd_sup.max(f64::MIN_POSITIVE);

    Snapshot::from_psi(&psi).write(&dir.join("psi_mc.psif"))?;
    Snapshot::from_psi(&u_mc).write(&dir.join("u_mc.psif"))?;
    Snapshot::from_fd(&fd).write(&dir.join("u_fd.psif"))?;
    if cfg.emit_dat {
        emit_dat_psi(dir, "u_mc.dat", &u_mc)?;
        emit_dat_fd(dir, "u_fd.dat", &fd)?;
    }
    write_text(&dir.join("error_table.csv"), &table.csv)?;
    write_text(&dir.join("diagnostics.csv"), &diagnostics_csv(&state))?;
    if let Some(outer) = &outer {
        write_text(&dir.join("outer_diagnostics.csv"), &outer_csv(outer))?;
    }

    let mut status = picard_status_lines(&state);
    status.push(format!("compare.sup_diff = {:e}", table.sup_diff));
    status.push(format!("compare.fd_sup = {:e}", table.fd_sup));
    status.push(format!("compare.sup_rel_diff = {rel:e}"));
    status.push(format!("compare.gate = {:e}", cfg.gate));
    let outcome = outcome_of(&state).unwrap_or(if rel <= cfg.gate {
        RunOutcome::Pass
    } else {
        RunOutcome::GateExceeded
    });
    status.push(format!("compare.outcome = {outcome:?}"));
    write_text(
        &dir.join("manifest.txt"),
        &manifest(
            cfg,
            "compare",
            &status,
            &[("solve_mc".into(), mc_secs), ("solve_fd".into(), fd_secs)],
        ),
    )?;
    Ok(RunSummary { outcome, sup_rel_diff: Some(rel), output_dir: dir.clone() })
}

/// `diagnose`: hypothesis probes, written as a readable report.
pub fn run_diagnose(cfg: &RunConfig) -> Result<RunSummary> {
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let spec = build_problem(cfg)?;
    let pair = KatoPair { p: cfg.kato_p, q: cfg.kato_q };
    let report = probe_assumptions(&spec, pair, cfg.probe_budget.max(100), cfg.alpha_threshold)?;
    let mut text = String::new();
    let _ = writeln!(text, "kato_norm_v = {:e}", report.kato_norm_v);
    let _ = writeln!(text, "kato_norm_fbar = {:e}", report.kato_norm_fbar);
    let _ = writeln!(text, "kato_norm_gbar = {:e}", report.kato_norm_gbar);
    let _ = writeln!(text, "k_constant = {:e}", report.k_constant);
    let _ = writeln!(text, "lipschitz_f_probe = {:e}", report.lipschitz_f_probe);
    let _ = writeln!(text, "alpha_probe = {:e}", report.alpha_probe);
    let _ = writeln!(text, "log_growth_probe = {:e}", report.log_growth_probe);
    let _ = writeln!(text, "ellipticity_min = {:e}", report.ellipticity_min);
    let f = report.pass_flags;
    let _ = writeln!(text, "pass.h_v_u0 = {}", f.h_v_u0);
    let _ = writeln!(text, "pass.h_a_b = {}", f.h_a_b);
    let _ = writeln!(text, "pass.h0_f_g = {}", f.h0_f_g);
    let _ = writeln!(text, "pass.h_f_g = {}", f.h_f_g);
    let _ = writeln!(text, "pass.h_prime_f_g = {}", f.h_prime_f_g);
    if let Some(failure) = &report.failure {
        let _ = writeln!(text, "failure = {failure}");
    }
    write_text(&dir.join("assumptions.txt"), &text)?;
    write_text(&dir.join("manifest.txt"), &manifest(cfg, "diagnose", &[], &[]))?;
    let ok = f.h_v_u0 && f.h_a_b && f.h0_f_g;
    Ok(RunSummary {
        outcome: if ok { RunOutcome::Pass } else { RunOutcome::NonConvergence },
        sup_rel_diff: None,
        output_dir: dir.clone(),
    })
}

/// `kpz`: solve the transformed problem with the Monte Carlo backend,
/// invert the substitution, and compare against the direct
/// finite-difference solve of the untransformed equation.
pub fn run_kpz(cfg: &RunConfig) -> Result<RunSummary> {
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let kpz = catalog::build_kpz(&cfg.problem, &cfg.params)?;
    let solver = cfg.solver_config()?;

    let t0 = Instant::now();
    let (u_mc, state) = if kpz.beta == 0.0 {
        // Navier-Stokes type: the base problem is already in solvable form
        // (the source is spatial), solve it directly.
        let direct = kpz.direct_problem();
        let mut spatial = direct.clone();
        let vb = kpz.v_bar.clone();
        let m = kpz.dim_m;
        spatial.source_g = std::sync::Arc::new(move |t, x, _, _, _, out| {
            let v = vb(t, x);
            for o in out.iter_mut().take(m) {
                *o = v;
            }
        });
        spatial.g_spatial_only = true;
        let (psi, state) = picard_solve(&spatial, &solver)?;
        (psi.to_pde_time(), state)
    } else {
        let transformed = kpz.build_transformed_problem()?;
        let (psi, state) = picard_solve(&transformed, &solver)?;
        let v_pde = psi.to_pde_time();
        let mut u = v_pde.clone();
        u.values = invert_values(&v_pde.values, v_pde.space.total_nodes(), v_pde.m, kpz.beta)?;
        // Standard errors transported through the inverse map:
        // |du| = |dv| / (beta v).
        for (e, &v) in u.stderr.iter_mut().zip(v_pde.values.iter()) {
            *e /= (kpz.beta * v).abs();
        }
        u.gradients = None;
        (u, state)
    };
    let mc_secs = t0.elapsed().as_secs_f64();

    let direct = kpz.direct_problem();
    let t1 = Instant::now();
    let fd = fd_solve(&direct, &cfg.space()?, &cfg.grid()?, cfg.fd_scheme)?;
    let fd_secs = t1.elapsed().as_secs_f64();

    let table = error_table(&u_mc, &fd)?;
    let rel = table.sup_diff / table.fd_sup.max(f64::MIN_POSITIVE);
    Snapshot::from_psi(&u_mc).write(&dir.join("u_mc.psif"))?;
    Snapshot::from_fd(&fd).write(&dir.join("u_fd.psif"))?;
    if cfg.emit_dat {
        emit_dat_psi(dir, "u_mc.dat", &u_mc)?;
        emit_dat_fd(dir, "u_fd.dat", &fd)?;
    }
    write_text(&dir.join("error_table.csv"), &table.csv)?;
    write_text(&dir.join("diagnostics.csv"), &diagnostics_csv(&state))?;

    let mut status = picard_status_lines(&state);
    status.push(format!("kpz.beta = {}", kpz.beta));
    status.push(format!("compare.sup_diff = {:e}", table.sup_diff));
    status.push(format!("compare.sup_rel_diff = {rel:e}"));
    let outcome = outcome_of(&state).unwrap_or(if rel <= cfg.gate {
        RunOutcome::Pass
    } else {
        RunOutcome::GateExceeded
    });
    status.push(format!("compare.outcome = {outcome:?}"));
    write_text(
        &dir.join("manifest.txt"),
        &manifest(
            cfg,
            "kpz",
            &status,
            &[("solve_mc".into(), mc_secs), ("solve_fd".into(), fd_secs)],
        ),
    )?;
    Ok(RunSummary { outcome, sup_rel_diff: Some(rel), output_dir: dir.clone() })
}
