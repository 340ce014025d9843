//! Command line driver.
//!
//! ```text
//! fkpde <verb> --config PATH [--seed N] [--out-dir PATH] [--particles N] [--gate PCT]
//! ```
//!
//! Verbs: `solve-mc`, `solve-fd`, `compare`, `diagnose`, `kpz`.
//!
//! Exit codes: 0 pass, 1 comparison gate exceeded, 2 config error,
//! 3 blow-up, 4 non-convergence, 5 internal error.

use std::path::PathBuf;
use std::process::ExitCode;

use fkpde::config::{load_config, RunConfig};
use fkpde::report::{run_compare, run_diagnose, run_kpz, run_solve_fd, run_solve_mc, RunOutcome};
use fkpde::Error;

const USAGE: &str = "usage: fkpde <solve-mc|solve-fd|compare|diagnose|kpz> --config PATH \
[--seed N] [--out-dir PATH] [--particles N] [--gate PCT]";

struct Cli {
    verb: String,
    config: PathBuf,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    particles: Option<usize>,
    gate_pct: Option<f64>,
}

fn parse_args(args: &[String]) -> Result<Cli, String> {
    if args.is_empty() {
        return Err(USAGE.into());
    }
    let verb = args[0].clone();
    if !matches!(verb.as_str(), "solve-mc" | "solve-fd" | "compare" | "diagnose" | "kpz") {
        return Err(format!("unknown verb '{verb}'\n{USAGE}"));
    }
    let mut cli = Cli {
        verb,
        config: PathBuf::new(),
        seed: None,
        out_dir: None,
        particles: None,
        gate_pct: None,
    };
    let mut it = args[1..].iter();
    while let Some(flag) = it.next() {
        let mut value = |name: &str| -> Result<String, String> {
            it.next().cloned().ok_or_else(|| format!("{name} needs a value\n{USAGE}"))
        };
        match flag.as_str() {
            "--config" => cli.config = PathBuf::from(value("--config")?),
            "--seed" => {
                cli.seed =
                    Some(value("--seed")?.parse().map_err(|_| "bad --seed value".to_string())?)
            }
            "--out-dir" => cli.out_dir = Some(PathBuf::from(value("--out-dir")?)),
            "--particles" => {
                cli.particles = Some(
                    value("--particles")?.parse().map_err(|_| "bad --particles".to_string())?,
                )
            }
            "--gate" => {
                cli.gate_pct =
                    Some(value("--gate")?.parse().map_err(|_| "bad --gate".to_string())?)
            }
            other => return Err(format!("unknown flag '{other}'\n{USAGE}")),
        }
    }
    if cli.config.as_os_str().is_empty() {
        return Err(format!("--config is required\n{USAGE}"));
    }
    Ok(cli)
}

fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) {
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(n) = cli.particles {
        cfg.particles = n;
    }
    if let Some(pct) = cli.gate_pct {
        cfg.gate = pct / 100.0;
    }
}

fn exit_for_error(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::ConfigValue(_) => 2,
        Error::Blowup { .. } => 3,
        Error::NonConvergence { .. } | Error::AssumptionsFailed(_) => 4,
        _ => 5,
    }
}

fn exit_for_outcome(outcome: RunOutcome) -> u8 {
    match outcome {
        RunOutcome::Pass => 0,
        RunOutcome::GateExceeded => 1,
        RunOutcome::Blowup(_) => 3,
        RunOutcome::NonConvergence => 4,
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match parse_args(&args) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    let mut cfg = match load_config(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("fkpde: {e}");
            return ExitCode::from(2);
        }
    };
    apply_overrides(&mut cfg, &cli);

    let result = match cli.verb.as_str() {
        "solve-mc" => run_solve_mc(&cfg),
        "solve-fd" => run_solve_fd(&cfg),
        "compare" => run_compare(&cfg),
        "diagnose" => run_diagnose(&cfg),
        "kpz" => run_kpz(&cfg),
        _ => unreachable!("verb validated in parse_args"),
    };
    match result {
        Ok(summary) => {
            if let Some(rel) = summary.sup_rel_diff {
                println!(
                    "{}: sup relative difference {:.3e} (gate {:.3e})",
                    cli.verb, rel, cfg.gate
                );
            }
            println!(
                "{}: {:?}; outputs in {}",
                cli.verb,
                summary.outcome,
                summary.output_dir.display()
            );
            ExitCode::from(exit_for_outcome(summary.outcome))
        }
        Err(e) => {
            eprintln!("fkpde {}: {e}", cli.verb);
            ExitCode::from(exit_for_error(&e))
        }
    }
}
