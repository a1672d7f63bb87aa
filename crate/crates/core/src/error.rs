use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("energy causality violated: power {power} exceeds battery {battery}")]
    EnergyCausality { power: f64, battery: f64 },

    #[error("bit budget violated: transmitted {rho} exceeds remaining {remaining}")]
    BitBudget { rho: f64, remaining: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("infeasible-start: {0}")]
    InfeasibleStart(String),

    #[error("max-iterations: solver stopped after {iterations} Newton steps (gap {gap:e})")]
    MaxIterations {
        iterations: usize,
        gap: f64,
        best: Vec<f64>,
    },

    #[error("solver failure on path seed {seed}: {source}")]
    PathSolve {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("grid closure violated: {0}")]
    GridClosure(String),

    #[error("off-grid state: {0}")]
    OffGrid(String),

    #[error("policy-infeasible-action at slot {slot}: {constraint}")]
    PolicyInfeasible { slot: usize, constraint: String },

    #[error(
        "offline dominance violated on path seed {seed}: offline {offline} > {policy} {online}"
    )]
    Dominance {
        seed: u64,
        policy: String,
        offline: f64,
        online: f64,
    },

    #[error("non-finite-loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("format: {0}")]
    Format(String),

    #[error("sweep {param}={value}: {source}")]
    SweepPoint {
        param: String,
        value: f64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::InvalidParams(_) => "invalid-params",
            Error::EnergyCausality { .. } => "energy-causality",
            Error::BitBudget { .. } => "bit-budget",
            Error::Dimension { .. } => "dimension",
            Error::InfeasibleStart(_) => "infeasible-start",
            Error::MaxIterations { .. } => "max-iterations",
            Error::PathSolve { .. } => "path-solve",
            Error::GridClosure(_) => "grid-closure",
            Error::OffGrid(_) => "off-grid",
            Error::PolicyInfeasible { .. } => "policy-infeasible-action",
            Error::Dominance { .. } => "dominance",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::EmptyDataset => "empty-dataset",
            Error::Format(_) => "format",
            Error::SweepPoint { .. } => "sweep-point",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}
