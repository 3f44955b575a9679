use thiserror::Error;

/// Errors surfaced by mixture algebra, schedules, solvers, and I/O.
#[derive(Debug, Error)]
pub enum GmError {
    /// A (powered) conflation produced a non-normalizable result. The solver
    /// layer guarantees positive combined precision analytically, so hitting
    /// this indicates a schedule or caller bug rather than a recoverable
    /// condition.
    #[error("combined precision {precision} is not positive; result would be improper")]
    NonPositivePrecision { precision: f64 },

    /// A schedule coefficient was requested at a time where it degenerates
    /// (sigma_t = 0 or alpha_{t-dt} = 0).
    #[error("degenerate time: {context} at t = {t}")]
    DegenerateTime { t: f64, context: &'static str },

    /// Guidance direction is numerically undefined (conditional and
    /// unconditional surrogate means coincide).
    #[error("guidance direction degenerate: |mu_c - mu_u| = {norm}")]
    DegenerateGuidance { norm: f64 },

    /// The training loop observed a non-finite loss.
    #[error("non-finite loss {value} at iteration {iteration} (batch seed {seed})")]
    NonFiniteLoss { value: f64, iteration: usize, seed: u64 },

    /// Shape/dimension mismatch between operands.
    #[error("shape mismatch: {0}")]
    BadShape(String),

    /// Histograms with different binning cannot be compared.
    #[error("histogram binning mismatch: {0}")]
    BinMismatch(String),

    /// A numeric oracle overflowed or produced a non-finite value.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Malformed or unsupported serialized data (checkpoints, sample files).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GmError>;
