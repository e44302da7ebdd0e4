//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by layout, energy, and sampler operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A bounding box rasterized to an empty mask on the requested grid.
    #[error("box {0:?} rasterizes to an empty mask on a {1}x{2} grid")]
    EmptyMask([f64; 4], usize, usize),

    /// A bounding box failed its geometric invariants.
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    /// Attention carried no mass where a normalization required it.
    #[error("degenerate attention normalization: {0}")]
    DegenerateAttention(String),

    /// The energy gradient vanished; the layout constraint is already satisfied.
    #[error("energy gradient is zero: layout satisfied")]
    LayoutSatisfied,

    /// The conditional score vanished; the chain reached a stationary point.
    #[error("conditional score is zero: stationary point")]
    StationaryPoint,

    /// The two-task Nash system has no positive solution.
    #[error("no positive Nash solution: |g1| + |g2| cos(theta) = {0} <= 0")]
    NoNashSolution(f64),

    /// A configuration value violated its documented invariant.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The brute-force posterior oracle only supports latent dimension <= 2.
    #[error("posterior oracle requires latent dimension <= 2, got {0}")]
    OracleDimension(usize),

    /// Scenario or layout files that fail to parse.
    #[error("parse error: {0}")]
    Parse(String),

    /// Wrapped I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
