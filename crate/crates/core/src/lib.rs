//! Shiftable control barrier functions: class-K machinery, shift trajectories, barrier
//! composition, sampled certificates, a minimum-norm safety filter, simulation, level-set
//! export and CLF conversion.
//!
//! Numeric code is generic over [`Real`]; the `*64` aliases fix it to `f64`.

// `!(x > 0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cbf;
pub mod classk;
pub mod clf;
pub mod dynamics;
pub mod error;
pub mod field;
pub mod filter;
pub mod lambda;
pub mod levelset;
pub mod scalar;
pub mod scenario;
pub mod sim;

pub use cbf::{
    certify_shiftable, certify_time_varying, certify_time_varying_pairs, compose_time_varying, CertReport,
    CertifyOptions, ComposeOptions, LambdaShiftableCbf, TimeVaryingCbf,
};
pub use classk::{
    beta_envelope, check_envelope, verify_domination, ExtendedKe, FunctionSpec, MonotoneFn, ScalarK, Shape,
};
pub use clf::{certify_clf, clf_to_cbf, lambda_max, Clf, Region};
pub use dynamics::{ControlAffineSystem, Dynamics, GeneralSystem, InputBox, PendulumParams};
pub use error::{Error, Hypothesis, Result};
pub use field::{FieldSpec, ScalarField};
pub use filter::{min_norm_box_halfspace, min_norm_filter, FilterOutput};
pub use lambda::{descent_time, latest_descent_start, LambdaTrajectory, TrajectorySpec};
pub use levelset::{
    check_containment, stl_targets, HalfSpaceConstraint, Offset, RaySampler, StlTarget, Window, SEED_ENV,
};
pub use scalar::Real;
pub use scenario::{Scenario, Stage, StageFailure};
pub use sim::{monitor_invariance, rk4_step, simulate, SimRecord};

pub type ScalarK64 = ScalarK<f64>;
pub type ExtendedKe64 = ExtendedKe<f64>;
pub type ScalarField64 = ScalarField<f64>;
pub type LambdaTrajectory64 = LambdaTrajectory<f64>;
pub type LambdaShiftableCbf64 = LambdaShiftableCbf<f64>;
pub type TimeVaryingCbf64 = TimeVaryingCbf<f64>;
pub type ControlAffineSystem64 = ControlAffineSystem<f64>;
