use thiserror::Error;

/// Everything that can go wrong while building, solving or certifying a model.
///
/// Variants name the module that raised them so the CLI can map them onto
/// exit codes without string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("model evaluation produced a non-finite value in {component}[{index}] at x={x:?}, p={p:?}")]
    ModelEvaluation {
        component: &'static str,
        index: usize,
        x: Vec<f64>,
        p: Vec<f64>,
    },

    #[error("invalid model: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{module}: no convergence after {iterations} iterations (last residual {residual:e})")]
    NonConvergence {
        module: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("{module}: CFL number {number:.4} exceeds limit {limit}")]
    Cfl {
        module: &'static str,
        number: f64,
        limit: f64,
    },

    #[error("{module}: non-finite values at t={time}")]
    BlowUp { module: &'static str, time: f64 },

    #[error("grid would have {nodes} nodes, above the cap of {cap}; use a larger spacing")]
    Capacity { nodes: u128, cap: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("trajectory left the orthant at t={time}: y[{index}] = {value:e}")]
    TrajectoryEscape { time: f64, index: usize, value: f64 },

    #[error("shooting did not converge: best residual {residual:e} at z={iterate:?}")]
    Shooting { residual: f64, iterate: Vec<f64> },

    #[error("post-exit state is ambiguous: {first:?} vs {second:?}")]
    Ambiguous { first: Vec<f64>, second: Vec<f64> },

    #[error("impulse solver chattering between active sets of sizes {first} and {second}")]
    Chattering { first: usize, second: usize },

    #[error("no strict minimizer found after {attempts} perturbations")]
    Degenerate { attempts: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{module} refused: {hypothesis} check failed (margin {margin:e}); pass force to override")]
    HypothesisRefused {
        module: &'static str,
        hypothesis: String,
        margin: f64,
    },

    #[error("internal invariant broken: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
