use thiserror::Error;

/// Errors surfaced by the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("config error: {0}")]
    ConfigValue(String),

    #[error("particle state became non-finite at t={time} (step {step}); treating as blow-up")]
    Blowup { time: f64, step: usize },

    #[error("diffusion matrix not symmetric positive definite at t={time}: {msg}")]
    BadDiffusion { time: f64, msg: String },

    #[error("non-finite coefficient sample: {what} at t={t}, x={x:?}")]
    NonFinite { what: &'static str, t: f64, x: Vec<f64> },

    #[error("lattice mismatch: {0}")]
    LatticeMismatch(String),

    #[error("grid too small: {0}")]
    GridTooSmall(String),

    #[error("time window [{t}, {s}] outside [0, {horizon}]")]
    WindowOutOfRange { t: f64, s: f64, horizon: f64 },

    #[error("Picard iteration did not converge after {iterations} iterations (last distance {last_distance:e})")]
    NonConvergence { iterations: usize, last_distance: f64 },

    #[error("finite-difference scheme unstable: {0}")]
    Instability(String),

    #[error("operation requires a spatial-only source g")]
    SourceNotSpatialOnly,

    #[error("hypothesis probe failed: {0}")]
    AssumptionsFailed(String),

    #[error("derivative flow data missing; rebuild the ensemble with want_derivatives")]
    MissingDerivatives,

    #[error("degenerate time window: s must exceed t")]
    EmptyWindow,

    #[error("Cole-Hopf transform undefined for beta = 0; use the base problem directly")]
    BetaZero,

    #[error("positivity lost: v = {value} at slice {slice}, node {node}; Cole-Hopf inversion requires v > 0")]
    PositivityLost { value: f64, slice: usize, node: usize },

    #[error("snapshot format error: {0}")]
    Snapshot(String),

    #[error("snapshot CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { stored: u32, computed: u32 },

    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u16),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
