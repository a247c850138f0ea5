//! Solver and verifier for one-dimensional vectorial variational problems in
//! L-infinity with radial integrands.
//!
//! The integrand has the form `L(x, eta, P) = H(x, eta, 1/2 |P - V(x, eta)|^2)`
//! for a scalar profile `H` and a vector field `V`. The crate minimises the
//! associated integral energies for a growing power `m` (continuation), extracts
//! the limiting map, and numerically certifies its properties: subinterval
//! minimality of the supremal energy, the generalised (difference-quotient)
//! solution property of the degenerate second-order system, strong convergence
//! of the continuation stages, and the structure of the degenerate set.
//!
//! A data-assimilation front end builds the misfit integrand
//! `1 + 1/2 |k(x) - K(eta)|^2 + 1/2 |P - V(x, eta)|^2` from a dynamics field,
//! an observation operator and a measurement series, and compares the classical
//! `m = 1` reconstruction against the limiting one.

pub mod analysis;
pub mod assimilation;
pub mod cli;
pub mod elsystem;
pub mod functionals;
pub mod grid;
pub mod lagrangian;
pub mod problem;
pub mod solver;

pub use grid::{
    affine_interpolant, build_grid, cell_gradient, second_difference, AffineData, Grid,
    GridFunction, Interval,
};
pub use lagrangian::{
    builtin_data_assimilation, builtin_power, builtin_yu, check_hypotheses, HypothesisBox,
    HypothesisReport, LagrangianModel, MeasurementSeries, ObservationModel, ObservationOperator,
    VectorField,
};

/// Errors produced by construction, evaluation and I/O paths.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid interval [{a}, {b}]: endpoints must be finite with a < b")]
    InvalidInterval { a: f64, b: f64 },
    #[error("grid needs at least 2 cells, got {0}")]
    TooFewCells(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("value count {got} does not match node count {expected}")]
    NodeCountMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("model evaluation returned a non-finite value at x={x}, eta={eta:?}, p={p}")]
    ModelEval { x: f64, eta: Vec<f64>, p: f64 },
    #[error("empty cell mask")]
    EmptyMask,
    #[error("difference stencil (node {node}, step {step}) leaves the grid ({n_cells} cells)")]
    StencilOutOfRange {
        node: usize,
        step: usize,
        n_cells: usize,
    },
    #[error("grid functions live on different grids")]
    GridMismatch,
    #[error("power m={got} is below the minimum {min} for this operation")]
    InvalidPower { min: u32, got: u32 },
    #[error("{path}:{line}: {msg}")]
    Schema {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    ProblemFile { path: String, msg: String },
    #[error("measurements cover [{lo}, {hi}] but the domain is [{a}, {b}]")]
    CoverageGap { lo: f64, hi: f64, a: f64, b: f64 },
    #[error("trajectory integration blew up at x={x}")]
    IntegrationBlowup { x: f64 },
    #[error("subinterval [{lo}, {hi}] is too short: need at least 3 interior nodes")]
    SubintervalTooShort { lo: usize, hi: usize },
    #[error("empty difference-quotient ladder")]
    EmptyLadder,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Fixed float formatting used by every emitted CSV: 17 fractional digits of
/// scientific notation (18 significant digits), enough to round-trip `f64`
/// exactly and keep re-runs byte-identical.
pub fn fmt_full(x: f64) -> String {
    format!("{x:.17e}")
}
