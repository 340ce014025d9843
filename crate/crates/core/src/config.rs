//! Run configuration: a small key-value format with `#` comments and
//! dotted section prefixes. Unknown keys are errors, duplicate keys are
//! errors, and a seed is mandatory — runs must be reproducible from the
//! config alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::catalog::CatalogParams;
use crate::error::{Error, Result};
use crate::fd::Scheme;
use crate::fixed_point::{SolverConfig, TruncationLevel};
use crate::fk::GradientMode;
use crate::lattice::{SpaceGrid, TimeGrid};
use crate::problem::KatoPair;

/// Fully materialized run configuration; every field has its final value
/// after [`load_config`], and [`RunConfig::manifest_lines`] echoes all of
/// them.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub problem: String,
    pub params: CatalogParams,
    pub potential_csv: Option<PathBuf>,
    pub dim: usize,
    pub nodes: usize,
    pub n_steps: usize,
    pub psi_stride: usize,
    pub particles: usize,
    pub seed: u64,
    pub lambda: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub gradient_mode: GradientMode,
    pub kato_p: f64,
    pub kato_q: f64,
    pub check_assumptions: bool,
    pub probe_budget: usize,
    pub truncation_level: Option<u32>,
    pub alpha_threshold: f64,
    pub outer_tol: f64,
    pub outer_max_iter: usize,
    pub fd_scheme: Scheme,
    pub gate: f64,
    pub output_dir: PathBuf,
    /// Also emit gnuplot-ready `.dat` curves next to the snapshots.
    pub emit_dat: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problem: "heat".into(),
            params: CatalogParams::default(),
            potential_csv: None,
            dim: 1,
            nodes: 64,
            n_steps: 200,
            psi_stride: 8,
            particles: 10_000,
            seed: 0,
            lambda: None,
            tol: 1e-3,
            max_iter: 25,
            gradient_mode: GradientMode::GridDifference,
            kato_p: 4.0,
            kato_q: 4.0,
            check_assumptions: true,
            probe_budget: 400,
            truncation_level: None,
            alpha_threshold: 0.1,
            outer_tol: 1e-3,
            outer_max_iter: 25,
            fd_scheme: Scheme::ImexEuler,
            gate: 0.05,
            output_dir: PathBuf::from("out"),
            emit_dat: false,
        }
    }
}

impl RunConfig {
    pub fn space(&self) -> Result<SpaceGrid> {
        SpaceGrid::uniform(self.dim, self.nodes)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.n_steps, self.params.horizon)
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        let mut cfg = SolverConfig::new(self.space()?, self.grid()?, self.particles, self.seed);
        cfg.psi_stride = self.psi_stride;
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        cfg.tol = self.tol;
        cfg.max_iter = self.max_iter;
        cfg.gradient_mode = self.gradient_mode;
        cfg.check_assumptions = self.check_assumptions;
        cfg.kato_pair = KatoPair { p: self.kato_p, q: self.kato_q };
        cfg.alpha_threshold = self.alpha_threshold;
        cfg.probe_budget = self.probe_budget;
        cfg.truncation = match self.truncation_level {
            Some(n) => Some(TruncationLevel::new(n)?),
            None => None,
        };
        cfg.outer_tol = self.outer_tol;
        cfg.outer_max_iter = self.outer_max_iter;
        cfg.slice_steps()?; // validates the stride
        Ok(cfg)
    }

    /// All materialized settings, one `key = value` line each, sorted.
    pub fn manifest_lines(&self) -> Vec<String> {
        let mut lines = vec![
            format!("compare.gate = {}", self.gate),
            format!("fd.scheme = {}", scheme_name(self.fd_scheme)),
            format!("gradient.mode = {}", mode_name(self.gradient_mode)),
            format!("kato.p = {}", self.kato_p),
            format!("kato.q = {}", self.kato_q),
            format!("lattice.n_steps = {}", self.n_steps),
            format!("lattice.nodes = {}", self.nodes),
            format!("lattice.psi_stride = {}", self.psi_stride),
            format!("mc.particles = {}", self.particles),
            format!("mc.seed = {}", self.seed),
            format!("outer.alpha_threshold = {}", self.alpha_threshold),
            format!("outer.max_iter = {}", self.outer_max_iter),
            format!("outer.tol = {}", self.outer_tol),
            format!("output.dat = {}", self.emit_dat),
            format!("output.dir = {}", self.output_dir.display()),
            format!(
                "picard.lambda = {}",
                self.lambda
                    .unwrap_or(4.0 / self.params.horizon)
            ),
            format!("picard.check_assumptions = {}", self.check_assumptions),
            format!("picard.max_iter = {}", self.max_iter),
            format!("picard.probe_budget = {}", self.probe_budget),
            format!("picard.tol = {}", self.tol),
            format!("problem.beta = {}", self.params.beta),
            format!("problem.diffusion = {}", self.params.diffusion),
            format!("problem.dim = {}", self.dim),
            format!("problem.f_amp = {}", self.params.f_amp),
            format!("problem.g_amp = {}", self.params.g_amp),
            format!("problem.horizon = {}", self.params.horizon),
            format!("problem.name = {}", self.problem),
            format!("problem.u0_amp = {}", self.params.u0_amp),
            format!("problem.v_amp = {}", self.params.v_amp),
        ];
        if let Some(p) = &self.potential_csv {
            lines.push(format!("problem.potential_csv = {}", p.display()));
        }
        if let Some(n) = self.truncation_level {
            lines.push(format!("truncation.level = {n}"));
        }
        lines.sort();
        lines
    }
}

fn scheme_name(s: Scheme) -> &'static str {
    match s {
        Scheme::ImexEuler => "imex-euler",
        Scheme::ExplicitRk4 => "explicit-rk4",
    }
}

fn mode_name(m: GradientMode) -> &'static str {
    match m {
        GradientMode::GridDifference => "grid-difference",
        GradientMode::Bismut => "bismut",
    }
}

/// Parse a config file; see module docs for the format.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Parse config text. Every known key is listed here; anything else is an
/// error, as is any repeated key.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut seen: BTreeMap<String, (String, usize)> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
            line: line_no,
            msg: format!("expected 'key = value', got '{line}'"),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config { line: line_no, msg: "empty key or value".into() });
        }
        if let Some((_, first)) = seen.get(&key) {
            return Err(Error::Config {
                line: line_no,
                msg: format!("duplicate key '{key}' (first set at line {first})"),
            });
        }
        seen.insert(key, (value, line_no));
    }

    let mut cfg = RunConfig::default();
    let mut take = |key: &str| seen.remove(key);
    let parse_f64 = |key: &str, v: &(String, usize)| -> Result<f64> {
        v.0.parse().map_err(|_| Error::Config {
            line: v.1,
            msg: format!("bad number for {key}: '{}'", v.0),
        })
    };
    let parse_usize = |key: &str, v: &(String, usize)| -> Result<usize> {
        v.0.parse().map_err(|_| Error::Config {
            line: v.1,
            msg: format!("bad count for {key}: '{}'", v.0),
        })
    };

    if let Some(v) = take("problem.name") {
        cfg.problem = v.0;
    }
    if let Some(v) = take("problem.horizon") {
        cfg.params.horizon = parse_f64("problem.horizon", &v)?;
    }
    if let Some(v) = take("problem.diffusion") {
        cfg.params.diffusion = parse_f64("problem.diffusion", &v)?;
    }
    if let Some(v) = take("problem.u0_amp") {
        cfg.params.u0_amp = parse_f64("problem.u0_amp", &v)?;
    }
    if let Some(v) = take("problem.v_amp") {
        cfg.params.v_amp = parse_f64("problem.v_amp", &v)?;
    }
    if let Some(v) = take("problem.f_amp") {
        cfg.params.f_amp = parse_f64("problem.f_amp", &v)?;
    }
    if let Some(v) = take("problem.g_amp") {
        cfg.params.g_amp = parse_f64("problem.g_amp", &v)?;
    }
    if let Some(v) = take("problem.beta") {
        cfg.params.beta = parse_f64("problem.beta", &v)?;
    }
    if let Some(v) = take("problem.dim") {
        cfg.dim = parse_usize("problem.dim", &v)?;
    }
    if let Some(v) = take("problem.potential_csv") {
        cfg.potential_csv = Some(PathBuf::from(v.0));
    }
    if let Some(v) = take("lattice.nodes") {
        cfg.nodes = parse_usize("lattice.nodes", &v)?;
    }
    if let Some(v) = take("lattice.n_steps") {
        cfg.n_steps = parse_usize("lattice.n_steps", &v)?;
    }
    if let Some(v) = take("lattice.psi_stride") {
        cfg.psi_stride = parse_usize("lattice.psi_stride", &v)?;
    }
    if let Some(v) = take("mc.particles") {
        cfg.particles = parse_usize("mc.particles", &v)?;
    }
    let seed = take("mc.seed");
    if let Some(v) = take("picard.lambda") {
        cfg.lambda = Some(parse_f64("picard.lambda", &v)?);
    }
    if let Some(v) = take("picard.tol") {
        cfg.tol = parse_f64("picard.tol", &v)?;
    }
    if let Some(v) = take("picard.max_iter") {
        cfg.max_iter = parse_usize("picard.max_iter", &v)?;
    }
    if let Some(v) = take("picard.check_assumptions") {
        cfg.check_assumptions = parse_bool(&v)?;
    }
    if let Some(v) = take("picard.probe_budget") {
        cfg.probe_budget = parse_usize("picard.probe_budget", &v)?;
    }
    if let Some(v) = take("gradient.mode") {
        cfg.gradient_mode = match v.0.as_str() {
            "grid-difference" => GradientMode::GridDifference,
            "bismut" => GradientMode::Bismut,
            other => {
                return Err(Error::Config {
                    line: v.1,
                    msg: format!("gradient.mode must be grid-difference or bismut, got '{other}'"),
                })
            }
        };
    }
    if let Some(v) = take("kato.p") {
        cfg.kato_p = parse_f64("kato.p", &v)?;
    }
    if let Some(v) = take("kato.q") {
        cfg.kato_q = parse_f64("kato.q", &v)?;
    }
    if let Some(v) = take("truncation.level") {
        cfg.truncation_level = Some(parse_usize("truncation.level", &v)? as u32);
    }
    if let Some(v) = take("outer.alpha_threshold") {
        cfg.alpha_threshold = parse_f64("outer.alpha_threshold", &v)?;
    }
    if let Some(v) = take("outer.tol") {
        cfg.outer_tol = parse_f64("outer.tol", &v)?;
    }
    if let Some(v) = take("outer.max_iter") {
        cfg.outer_max_iter = parse_usize("outer.max_iter", &v)?;
    }
    if let Some(v) = take("fd.scheme") {
        cfg.fd_scheme = match v.0.as_str() {
            "imex-euler" => Scheme::ImexEuler,
            "explicit-rk4" => Scheme::ExplicitRk4,
            other => {
                return Err(Error::Config {
                    line: v.1,
                    msg: format!("fd.scheme must be imex-euler or explicit-rk4, got '{other}'"),
                })
            }
        };
    }
    if let Some(v) = take("compare.gate") {
        cfg.gate = parse_f64("compare.gate", &v)?;
    }
    if let Some(v) = take("output.dir") {
        cfg.output_dir = PathBuf::from(v.0);
    }
    if let Some(v) = take("output.dat") {
        cfg.emit_dat = parse_bool(&v)?;
    }

    if let Some((key, (_, line))) = seen.into_iter().next() {
        return Err(Error::Config { line, msg: format!("unknown key '{key}'") });
    }

    match seed {
        Some(v) => {
            cfg.seed = v.0.parse().map_err(|_| Error::Config {
                line: v.1,
                msg: format!("bad seed '{}'", v.0),
            })?;
        }
        None => return Err(Error::ConfigValue("seed required (set mc.seed)".into())),
    }

    validate(&cfg)?;
    Ok(cfg)
}

fn parse_bool(v: &(String, usize)) -> Result<bool> {
    match v.0.as_str() {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        other => Err(Error::Config { line: v.1, msg: format!("bad boolean '{other}'") }),
    }
}

fn validate(cfg: &RunConfig) -> Result<()> {
    if cfg.nodes == 0 || cfg.n_steps == 0 || cfg.particles == 0 || cfg.psi_stride == 0 {
        return Err(Error::ConfigValue("all counts must be >= 1".into()));
    }
    if !(cfg.tol > 0.0) || !(cfg.outer_tol > 0.0) {
        return Err(Error::ConfigValue("tolerances must be > 0".into()));
    }
    if !(cfg.params.horizon > 0.0) {
        return Err(Error::ConfigValue("problem.horizon must be > 0".into()));
    }
    if cfg.n_steps % cfg.psi_stride != 0 {
        return Err(Error::ConfigValue(format!(
            "lattice.psi_stride {} must divide lattice.n_steps {}",
            cfg.psi_stride, cfg.n_steps
        )));
    }
    if !(cfg.gate > 0.0) {
        return Err(Error::ConfigValue("compare.gate must be > 0".into()));
    }
    Ok(())
}
