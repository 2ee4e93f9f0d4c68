use thiserror::Error;

/// Which hypothesis of the time-varying construction failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hypothesis {
    /// The shift rate bound is not dominated by the barrier decay rate.
    Domination,
    /// `alpha_lambda` is neither linear, convex nor concave.
    RateShape,
    /// The shift trajectory violates its derivative bound or range.
    TrajectoryFeasibility,
    /// The shift trajectory's budget exceeds the barrier's budget.
    Budget,
    /// The supplied `beta` does not upper-bound the rate sum.
    EnvelopeSoundness,
}

impl std::fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Hypothesis::Domination => "alpha(-xi) <= -alpha_lambda(xi) on [0, Lambda]",
            Hypothesis::RateShape => "alpha_lambda linear, convex or concave",
            Hypothesis::TrajectoryFeasibility => "lambda_dot >= -alpha_lambda(lambda) with lambda in [0, Lambda]",
            Hypothesis::Budget => "lambda budget within barrier budget",
            Hypothesis::EnvelopeSoundness => "beta(x1 + x2) >= alpha(x1) + alpha_lambda(x2)",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("{name}: argument {x} outside domain [{lo}, {hi}]")]
    OutOfDomain { name: String, x: f64, lo: f64, hi: f64 },

    #[error("invalid class-K function: {0}")]
    InvalidFunction(String),

    #[error("invalid scalar field: {0}")]
    InvalidField(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("{what} = {value} outside [{lo}, {hi}]")]
    Range {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("domination check failed: margin {worst_margin} at xi = {worst_xi}")]
    Domination { worst_xi: f64, worst_margin: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("hypothesis `{condition}` failed: {detail}")]
    Hypothesis { condition: Hypothesis, detail: String },

    #[error("slope {slope} below feasibility bound {bound}")]
    InfeasibleSlope { slope: f64, bound: f64 },

    #[error("segment end {t_end} must be after current end {current}")]
    TimeOrder { t_end: f64, current: f64 },

    #[error("lambda cannot fall from {from} to {target} in finite time at the equality rate")]
    NoFiniteTime { from: f64, target: f64 },

    #[error("time {t} outside trajectory domain [{t0}, {t1}]")]
    TimeDomain { t: f64, t0: f64, t1: f64 },

    #[error("filter infeasible: deficit {deficit}")]
    Infeasible { deficit: f64, best_u: Vec<f64> },

    #[error("no samples left to certify ({skipped} skipped)")]
    EmptySamples { skipped: usize },

    #[error("level-set sampler: {0}")]
    LevelSet(String),

    #[error("degenerate domain: lambda_max = {0}")]
    DegenerateDomain(f64),

    #[error("V not positive definite: V({state:?}) = {value}")]
    NotPositiveDefinite { state: Vec<f64>, value: f64 },

    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
