//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("grid mismatch: expected {expected_nx}x{expected_nz}, got {got_nx}x{got_nz}")]
    GridMismatch {
        expected_nx: usize,
        expected_nz: usize,
        got_nx: usize,
        got_nz: usize,
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("spectrum is not Hermitian-symmetric: relative imaginary residual {residual:.3e} exceeds {tolerance:.1e}")]
    NonHermitianInput { residual: f64, tolerance: f64 },

    #[error("grid index out of range: ({ix}, {iz}) on a {nx}x{nz} grid")]
    IndexOutOfRange {
        ix: usize,
        iz: usize,
        nx: usize,
        nz: usize,
    },

    #[error("dense materialization refused: N = {n} exceeds the {limit} guard")]
    TooLarge { n: usize, limit: usize },

    #[error("probe separation violated: points {a:?} and {b:?} are {dist} cells apart, need at least {required}")]
    SeparationViolated {
        a: (usize, usize),
        b: (usize, usize),
        dist: usize,
        required: usize,
    },

    #[error("frequency band too narrow: f_max/f_min = {f_ratio:.3} must exceed c_max/c_min = {c_ratio:.3}")]
    BandTooNarrow { f_ratio: f64, c_ratio: f64 },

    #[error("basis rank {rank} exceeds the number of sampled rows {rows}")]
    RankTooLarge { rank: usize, rows: usize },

    #[error("line search failed to find a strong-Wolfe point after {trials} trials")]
    LineSearchFailed { trials: usize },

    #[error("search direction is not a descent direction (g.d = {slope:.3e}) after memory reset")]
    NonDescentDirection { slope: f64 },

    #[error("conjugate gradient did not converge: residual {residual:.3e} after {iters} iterations (target {target:.1e})")]
    CgNoConvergence {
        residual: f64,
        iters: usize,
        target: f64,
    },

    #[error("trace too short: {len} values, need at least {min}")]
    TraceTooShort { len: usize, min: usize },

    #[error("preconditioner failed the SPD spot check: {0}")]
    PreconditionerNotSpd(String),

    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("file format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
