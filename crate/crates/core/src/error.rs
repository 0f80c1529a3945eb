use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("component {index} = {value} is not strictly inside ({lower}, {upper})")]
    OutOfBounds {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("observation time {time} is outside the integration span [0, {t_f}]")]
    TimeOutOfRange { time: f64, t_f: f64 },

    #[error("observation time {time} does not fall on the time grid (dt = {dt})")]
    NotOnGrid { time: f64, dt: f64 },

    #[error("trajectory has no state at step {step} needed by observation time {time}")]
    MissingSnapshot { step: usize, time: f64 },

    #[error("step {step} is not an observation time")]
    NotAnObservationTime { step: usize },

    #[error("observation series is empty")]
    EmptyObservations,

    #[error("state became non-finite at step {step}")]
    NonFiniteState { step: usize },

    #[error("adjoint became non-finite at step {step}")]
    NonFiniteAdjoint { step: usize },

    #[error("cost is not finite")]
    NonFiniteCost,

    #[error("adjoint trajectory is unavailable and recomputation is disabled")]
    MissingLambda,

    #[error("no Armijo step found after {backtracks} backtracks at iteration {iteration}")]
    LineSearchFailure { iteration: usize, backtracks: usize },

    #[error("conjugate residual breakdown at iteration {iteration}")]
    Breakdown { iteration: usize },

    #[error("bisection range [{lo}, {hi}] does not bracket the critical radius")]
    NoBracketing { lo: f64, hi: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
