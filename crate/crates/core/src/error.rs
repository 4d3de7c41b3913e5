use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("reference {v} outside admissible window [{lo}, {hi}]")]
    OutOfWindow { v: f64, lo: f64, hi: f64 },

    #[error("singular steady-state parameterization at v = {v}")]
    SingularParameterization { v: f64 },

    #[error("gain synthesis failed at v = {v}: {reason}")]
    Synthesis { v: f64, reason: String },

    #[error("rollout failed at step {step}: {source}")]
    Rollout {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("reference v = {v} is infeasible: constraint row {row} has margin {margin}")]
    ReferenceInfeasible { v: f64, row: usize, margin: f64 },

    #[error("invariance violated: (x, v_prev = {v_prev}) is outside the safe set (level margin {margin})")]
    InvarianceViolation { v_prev: f64, margin: f64 },

    #[error("initialization infeasible: (x0, r0 = {r0}) is outside the safe set (level margin {margin})")]
    InitializationInfeasible { r0: f64, margin: f64 },

    #[error("governor infeasible: the reference cross-section of the safe set is empty")]
    GovernorInfeasible,

    #[error("stability estimation failed: fitted decay rate {lambda} >= 1")]
    StabilityEstimation { lambda: f64 },

    #[error("causality violation: cost index {requested} requested at time {now}")]
    Causality { requested: usize, now: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("run aborted at step {step}: {source}\n  state snapshot: {snapshot}")]
    Run {
        step: usize,
        snapshot: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::Rollout {
            step,
            source: Box::new(self),
        }
    }
}
