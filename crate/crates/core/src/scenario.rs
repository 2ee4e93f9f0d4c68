//! Declarative scenarios and the pipelines behind the command-line tool.
//!
//! A scenario names a system, a barrier (directly or through a CLF), the shift rate
//! bound, a shift plan, optional "always" constraints, and simulation and certification
//! settings. Every pipeline stage maps failures to its own exit code.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cbf::{
    certify_shiftable, certify_time_varying_pairs, compose_time_varying, CertReport, CertifyOptions, ComposeOptions,
    LambdaShiftableCbf, TimeVaryingCbf,
};
use crate::classk::{
    beta_envelope, check_envelope, verify_domination, DominationReport, EnvelopeReport, ExtendedKe, FunctionSpec,
    MonotoneFn, ScalarK,
};
use crate::clf::{certify_clf, clf_to_cbf, lambda_max, Clf, Region};
use crate::dynamics::{ControlAffineSystem, InputBox, PendulumParams};
use crate::error::{Error, Hypothesis};
use crate::field::{FieldSpec, ScalarField};
use crate::lambda::{latest_descent_start, LambdaTrajectory, SegmentSpec, TrajectoryReport, TrajectorySpec};
use crate::levelset::{
    check_containment, seed_from_env, stl_targets, ContainmentReport, HalfSpaceConstraint, Offset, RaySampler,
    StlTarget, Window, DEFAULT_SEED,
};
use crate::scalar::{box_grid, linspace};
use crate::sim::{filter_controller, monitor_invariance, simulate, InvarianceReport, SimRecord, INVARIANCE_TOL};

/// Pipeline stage, doubling as the process exit code on failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Parse,
    Clf,
    Hypotheses,
    LambdaPlan,
    Simulation,
    Invariance,
    Containment,
    Certify,
    Io,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Parse => 10,
            Stage::Clf => 11,
            Stage::Hypotheses => 12,
            Stage::LambdaPlan => 13,
            Stage::Simulation => 14,
            Stage::Invariance => 15,
            Stage::Containment => 16,
            Stage::Certify => 17,
            Stage::Io => 18,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub exit_code: i32,
    pub message: String,
}

impl StageFailure {
    pub fn new(stage: Stage, message: impl fmt::Display) -> Self {
        Self {
            stage,
            exit_code: stage.exit_code(),
            message: message.to_string(),
        }
    }
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} stage failed: {}", self.stage, self.message)
    }
}

impl std::error::Error for StageFailure {}

fn at(stage: Stage) -> impl Fn(Error) -> StageFailure {
    move |e| StageFailure::new(stage, e)
}

// ---------------------------------------------------------------------------
// schema

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub system: SystemSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clf: Option<ClfSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cbf: Option<CbfSpec>,
    pub alpha_lambda: FunctionSpec<f64>,
    #[serde(default)]
    pub beta: BetaSpec,
    pub lambda_plan: LambdaPlan,
    #[serde(default)]
    pub constraints: Vec<ConstraintSpec>,
    pub sim: SimSpec,
    pub certification: CertificationSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builtin", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    /// `x1' = x2`, `x2' = -(g/l) sin x1 + d x2 + u`
    Pendulum {
        #[serde(default = "gravity")]
        gravity: f64,
        #[serde(default = "one")]
        length: f64,
        /// Defaults to `5 l`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        momentum_slope: Option<f64>,
        u_box: InputBox<f64>,
    },
    /// `x' = A x + B u`
    Linear {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        #[serde(rename = "B")]
        b: Vec<Vec<f64>>,
        u_box: InputBox<f64>,
    },
    /// `x' = u`
    Integrator { dim: usize, u_box: InputBox<f64> },
}

fn gravity() -> f64 {
    9.81
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClfSpec {
    #[serde(rename = "V")]
    pub v: FieldSpec<f64>,
    pub gamma: FunctionSpec<f64>,
    pub region: Region<f64>,
    #[serde(default)]
    pub b_c: f64,
    /// Computed from the region when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_max: Option<f64>,
    /// Budget used when `lambda_max` is infinite.
    #[serde(default, rename = "Lambda", skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    #[serde(default = "boundary_samples")]
    pub n_boundary_samples: usize,
}

fn boundary_samples() -> usize {
    720
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbfSpec {
    pub b: FieldSpec<f64>,
    #[serde(rename = "Lambda")]
    pub budget: f64,
    pub alpha: FunctionSpec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaSpec {
    #[serde(default = "beta_grid")]
    pub n_grid: usize,
    #[serde(default = "slope_eps")]
    pub slope_eps: f64,
}

fn beta_grid() -> usize {
    401
}

fn slope_eps() -> f64 {
    1e-6
}

impl Default for BetaSpec {
    fn default() -> Self {
        Self {
            n_grid: beta_grid(),
            slope_eps: slope_eps(),
        }
    }
}

/// A shift level given directly or as the target derived from a constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Level {
    Value(f64),
    /// Index into `constraints`.
    Constraint(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaPlan {
    Explicit {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lam0: Option<f64>,
        segments: Vec<SegmentSpec<f64>>,
    },
    /// Built from deadlines; descent starts are the latest ones that still meet them.
    Staged {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lam0: Option<f64>,
        #[serde(default = "ode_dt")]
        dt_ode: f64,
        stages: Vec<PlanStage>,
    },
}

fn ode_dt() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlanStage {
    /// Hold, then follow `lambda' = -alpha_lambda(lambda)` to reach `target` at `deadline`.
    DescendOde {
        target: Level,
        deadline: f64,
    },
    /// Hold, then descend with slope `-alpha_lambda(target)` to reach `target` at `deadline`.
    DescendLinear {
        target: Level,
        deadline: f64,
    },
    Hold {
        until: f64,
    },
    Linear {
        t_end: f64,
        lam_end: Level,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    #[serde(default)]
    pub name: String,
    pub h: FieldSpec<f64>,
    /// Constant `lambda_h`: the constraint reads `h(x) >= -offset`.
    #[serde(default)]
    pub offset: f64,
    pub window: Window<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub x0: Vec<f64>,
    #[serde(default = "t_span")]
    pub t_span: [f64; 2],
    #[serde(default = "ode_dt")]
    pub dt: f64,
}

fn t_span() -> [f64; 2] {
    [0.0, 20.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificationSpec {
    pub grid: GridSpec,
    #[serde(default = "u_grid")]
    pub n_u_grid: usize,
    #[serde(default = "tolerance")]
    pub tolerance: f64,
    /// Random `(t, x)` pairs for the time-varying certificate.
    #[serde(default = "pairs")]
    pub n_pairs: usize,
    #[serde(default = "rays")]
    pub n_rays: usize,
    #[serde(default = "containment_times")]
    pub n_containment_times: usize,
    #[serde(default = "domination_grid")]
    pub n_domination: usize,
    #[serde(default = "envelope_grid")]
    pub n_envelope: usize,
    #[serde(default = "verify_samples")]
    pub n_verify: usize,
    /// Overridden by `BARRIER_SHIFT_SEED`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn u_grid() -> usize {
    11
}
fn tolerance() -> f64 {
    1e-9
}
fn pairs() -> usize {
    50
}
fn rays() -> usize {
    720
}
fn containment_times() -> usize {
    201
}
fn domination_grid() -> usize {
    2001
}
fn envelope_grid() -> usize {
    201
}
fn verify_samples() -> usize {
    100
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, StageFailure> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| StageFailure::new(Stage::Parse, e))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    fn validate(&self) -> Result<(), StageFailure> {
        let fail = |m: String| Err(StageFailure::new(Stage::Parse, m));
        match (&self.clf, &self.cbf) {
            (Some(_), Some(_)) | (None, None) => return fail("exactly one of `clf` and `cbf` is required".into()),
            _ => {}
        }
        let c = &self.certification;
        if !(c.tolerance > 0.0) || !(self.beta.slope_eps > 0.0) {
            return fail("tolerances must be positive".into());
        }
        if !(self.sim.dt > 0.0) || !(self.sim.t_span[1] > self.sim.t_span[0]) {
            return fail("sim needs dt > 0 and t_span[1] > t_span[0]".into());
        }
        let dim = self.state_dim();
        if self.sim.x0.len() != dim {
            return fail(format!("x0 has {} entries, system has {dim} states", self.sim.x0.len()));
        }
        if c.grid.lo.len() != dim || c.grid.hi.len() != dim || c.grid.n.len() != dim {
            return fail("certification grid dimension does not match the system".into());
        }
        if let LambdaPlan::Staged { stages, dt_ode, .. } = &self.lambda_plan {
            if !(*dt_ode > 0.0) {
                return fail("dt_ode must be positive".into());
            }
            for st in stages {
                let lv = match st {
                    PlanStage::DescendOde { target, .. } | PlanStage::DescendLinear { target, .. } => Some(target),
                    PlanStage::Linear { lam_end, .. } => Some(lam_end),
                    PlanStage::Hold { .. } => None,
                };
                if let Some(Level::Constraint(i)) = lv {
                    if *i >= self.constraints.len() {
                        return fail(format!("stage refers to missing constraint {i}"));
                    }
                }
            }
        }
        Ok(())
    }

    fn state_dim(&self) -> usize {
        match &self.system {
            SystemSpec::Pendulum { .. } => 2,
            SystemSpec::Linear { a, .. } => a.len(),
            SystemSpec::Integrator { dim, .. } => *dim,
        }
    }

    pub fn seed(&self) -> u64 {
        seed_from_env(self.certification.seed.unwrap_or(DEFAULT_SEED))
    }
}

/// Reads and validates a scenario file.
pub fn load(path: &Path) -> Result<Scenario, StageFailure> {
    let text =
        std::fs::read_to_string(path).map_err(|e| StageFailure::new(Stage::Io, format!("{}: {e}", path.display())))?;
    Scenario::from_json(&text)
}

// ---------------------------------------------------------------------------
// pipeline

pub fn build_system(spec: &SystemSpec) -> Result<ControlAffineSystem<f64>, StageFailure> {
    let parse = at(Stage::Parse);
    match spec {
        SystemSpec::Pendulum {
            gravity,
            length,
            momentum_slope,
            u_box,
        } => {
            let mut p = PendulumParams::new(*gravity, *length);
            if let Some(d) = momentum_slope {
                p.momentum_slope = *d;
            }
            let bx = InputBox::new(u_box.lo.clone(), u_box.hi.clone()).map_err(&parse)?;
            ControlAffineSystem::pendulum(p, bx).map_err(parse)
        }
        SystemSpec::Linear { a, b, u_box } => {
            let bx = InputBox::new(u_box.lo.clone(), u_box.hi.clone()).map_err(&parse)?;
            ControlAffineSystem::linear(a.clone(), b.clone(), bx).map_err(parse)
        }
        SystemSpec::Integrator { dim, u_box } => {
            let bx = InputBox::new(u_box.lo.clone(), u_box.hi.clone()).map_err(&parse)?;
            if bx.dim() != *dim || *dim == 0 {
                return Err(StageFailure::new(Stage::Parse, "integrator needs one input per state"));
            }
            let n = *dim;
            Ok(ControlAffineSystem::new(
                "integrator",
                n,
                move |_: &[f64]| vec![0.0; n],
                move |_: &[f64]| {
                    (0..n)
                        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                        .collect()
                },
                bx,
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClfSummary {
    pub certificate: CertReport<f64>,
    pub lambda_max: f64,
    pub b_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CbfSummary {
    #[serde(rename = "Lambda")]
    pub budget: f64,
    pub b: FieldSpec<f64>,
    pub alpha: FunctionSpec<f64>,
}

fn grid_samples(spec: &GridSpec) -> Vec<Vec<f64>> {
    box_grid(&spec.lo, &spec.hi, &spec.n)
}

fn cert_opts(s: &Scenario) -> CertifyOptions<f64> {
    CertifyOptions {
        n_u_grid: s.certification.n_u_grid,
        tolerance: s.certification.tolerance,
    }
}

type Barrier = (LambdaShiftableCbf<f64>, Option<(Clf<f64>, ClfSummary)>);

/// Barrier from the scenario: directly, or through the CLF (certified first).
fn barrier(s: &Scenario, sys: &ControlAffineSystem<f64>) -> Result<Barrier, StageFailure> {
    if let Some(c) = &s.cbf {
        let b = ScalarField::from_spec(&c.b).map_err(at(Stage::Parse))?.with_name("b");
        let alpha = ExtendedKe::from_spec(&c.alpha)
            .map_err(at(Stage::Parse))?
            .with_name("alpha");
        let cbf = LambdaShiftableCbf::new(b, c.budget, alpha).map_err(at(Stage::Hypotheses))?;
        return Ok((cbf, None));
    }
    let c = s.clf.as_ref().expect("validated");
    let clf_err = at(Stage::Clf);
    let v = ScalarField::from_spec(&c.v).map_err(at(Stage::Parse))?.with_name("V");
    let gamma = ScalarK::from_spec(&c.gamma)
        .map_err(at(Stage::Parse))?
        .with_name("gamma");
    let clf = Clf::new(v, gamma, c.region.clone(), s.seed()).map_err(&clf_err)?;
    let cert = certify_clf(&clf, sys, &grid_samples(&s.certification.grid), &cert_opts(s)).map_err(&clf_err)?;
    if !cert.ok {
        return Err(StageFailure::new(
            Stage::Clf,
            format!(
                "CLF certificate fails: margin {} at {:?}",
                cert.worst_margin, cert.worst_state
            ),
        ));
    }
    let lmax = match c.lambda_max {
        Some(l) => l,
        None => lambda_max(&clf, c.n_boundary_samples, s.seed()).map_err(&clf_err)?,
    };
    let cbf = clf_to_cbf(&clf, c.b_c, lmax, c.budget).map_err(&clf_err)?;
    let summary = ClfSummary {
        certificate: cert,
        lambda_max: lmax,
        b_c: c.b_c,
    };
    Ok((cbf, Some((clf, summary))))
}

fn constraints(s: &Scenario) -> Result<Vec<HalfSpaceConstraint<f64>>, StageFailure> {
    s.constraints
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut h = ScalarField::from_spec(&c.h).map_err(at(Stage::Parse))?;
            let name = if c.name.is_empty() {
                format!("constraint_{i}")
            } else {
                c.name.clone()
            };
            h = h.with_name(name);
            if h.dim() != s.state_dim() {
                return Err(StageFailure::new(
                    Stage::Parse,
                    format!("constraint {i} has wrong dimension"),
                ));
            }
            Ok(HalfSpaceConstraint::new(h, Offset::Constant(c.offset), c.window))
        })
        .collect()
}

fn level(l: Level, targets: &[StlTarget<f64>]) -> f64 {
    match l {
        Level::Value(v) => v,
        Level::Constraint(i) => targets[i].lam_target,
    }
}

/// Builds the shift trajectory over `[t0, horizon]`.
pub fn build_lambda(
    plan: &LambdaPlan,
    budget: f64,
    alpha_lambda: &ScalarK<f64>,
    t0: f64,
    horizon: f64,
    targets: &[StlTarget<f64>],
) -> Result<LambdaTrajectory<f64>, StageFailure> {
    let err = at(Stage::LambdaPlan);
    let mut traj = match plan {
        LambdaPlan::Explicit { lam0, segments } => {
            let spec = TrajectorySpec {
                budget,
                alpha_lambda: alpha_lambda.to_spec(),
                t0: Some(t0),
                lam0: Some(lam0.unwrap_or(budget)),
                segments: segments.clone(),
            };
            LambdaTrajectory::from_spec(&spec).map_err(&err)?
        }
        LambdaPlan::Staged { lam0, dt_ode, stages } => {
            let mut traj =
                LambdaTrajectory::new(budget, alpha_lambda.clone(), t0, lam0.unwrap_or(budget)).map_err(&err)?;
            for st in stages {
                traj = match *st {
                    PlanStage::Hold { until } => traj.append_constant(until).map_err(&err)?,
                    PlanStage::Linear { t_end, lam_end } => {
                        traj.append_linear(t_end, level(lam_end, targets)).map_err(&err)?
                    }
                    PlanStage::DescendOde { target, deadline } => {
                        let target = level(target, targets);
                        let cur = traj.current_value();
                        if target >= cur {
                            traj.append_constant(deadline).map_err(&err)?
                        } else {
                            let start = latest_descent_start(budget, alpha_lambda, cur, target, deadline, *dt_ode)
                                .map_err(&err)?;
                            traj = hold_until(traj, start, deadline)?;
                            traj.append_ode_equality(deadline, *dt_ode).map_err(&err)?
                        }
                    }
                    PlanStage::DescendLinear { target, deadline } => {
                        let target = level(target, targets);
                        let cur = traj.current_value();
                        if target >= cur {
                            traj.append_constant(deadline).map_err(&err)?
                        } else {
                            let rate = alpha_lambda.eval(target).map_err(&err)?;
                            if !(rate > 0.0) {
                                return Err(StageFailure::new(Stage::LambdaPlan, "cannot descend to 0 linearly"));
                            }
                            let start = deadline - (cur - target) / rate;
                            traj = hold_until(traj, start, deadline)?;
                            traj.append_linear(deadline, target).map_err(&err)?
                        }
                    }
                };
            }
            traj
        }
    };
    if traj.end_time() < horizon {
        traj = traj.append_constant(horizon).map_err(&err)?;
    }
    Ok(traj)
}

fn hold_until(traj: LambdaTrajectory<f64>, start: f64, deadline: f64) -> Result<LambdaTrajectory<f64>, StageFailure> {
    let now = traj.end_time();
    if start < now {
        return Err(StageFailure::new(
            Stage::LambdaPlan,
            format!(
                "descent must start at {start} but the plan is already at {now}; deadline {deadline} is unreachable"
            ),
        ));
    }
    if start > now {
        traj.append_constant(start).map_err(at(Stage::LambdaPlan))
    } else {
        Ok(traj)
    }
}

/// Everything up to and including composition of the time-varying barrier.
pub struct Prepared {
    pub scenario: Scenario,
    pub system: ControlAffineSystem<f64>,
    pub clf: Option<(Clf<f64>, ClfSummary)>,
    pub tv: TimeVaryingCbf<f64>,
    pub constraints: Vec<HalfSpaceConstraint<f64>>,
    pub targets: Vec<StlTarget<f64>>,
    pub sampler: RaySampler<f64>,
    pub domination: DominationReport<f64>,
    pub envelope: EnvelopeReport<f64>,
    pub warnings: Vec<String>,
}

/// Runs every stage up to composition. `horizon` overrides the simulation end time.
pub fn prepare(s: &Scenario) -> Result<Prepared, StageFailure> {
    let sys = build_system(&s.system)?;
    let (cbf, clf) = barrier(s, &sys)?;
    let hyp = |c: Hypothesis, m: String| {
        StageFailure::new(
            Stage::Hypotheses,
            Error::Hypothesis {
                condition: c,
                detail: m,
            },
        )
    };
    let alpha_lambda = ScalarK::from_spec(&s.alpha_lambda)
        .map_err(at(Stage::Parse))?
        .with_name("alpha_lambda");
    if !alpha_lambda.shape().is_regular() {
        return Err(hyp(Hypothesis::RateShape, "alpha_lambda is tagged `general`".into()));
    }
    let budget = cbf.budget();
    let cert = &s.certification;
    let domination = verify_domination(cbf.alpha(), &alpha_lambda, budget, cert.n_domination)
        .map_err(|e| hyp(Hypothesis::Domination, e.to_string()))?;
    if !domination.ok {
        return Err(hyp(
            Hypothesis::Domination,
            format!("margin {} at xi = {}", domination.worst_margin, domination.worst_xi),
        ));
    }
    let beta = beta_envelope(cbf.alpha(), &alpha_lambda, budget, s.beta.n_grid, s.beta.slope_eps)
        .map_err(|e| hyp(Hypothesis::EnvelopeSoundness, e.to_string()))?
        .with_name("beta");
    let envelope = check_envelope(
        &beta,
        cbf.alpha(),
        &alpha_lambda,
        budget,
        cert.n_envelope,
        cert.tolerance,
    )
    .map_err(at(Stage::Hypotheses))?;

    let cons = constraints(s)?;
    let dim = s.state_dim();
    let sampler = RaySampler::new(vec![0.0; dim], cert.n_rays, s.seed());
    let targets = stl_targets(&cons, &cbf, &sampler).map_err(at(Stage::Containment))?;

    let [t0, t1] = s.sim.t_span;
    let lam = build_lambda(&s.lambda_plan, budget, &alpha_lambda, t0, t1, &targets)?;
    let opts = ComposeOptions {
        n_domination: cert.n_domination,
        n_verify: cert.n_verify,
        n_envelope: cert.n_envelope,
        tolerance: cert.tolerance,
    };
    let tv = compose_time_varying(cbf, lam, beta, &opts).map_err(|e| match e {
        Error::Hypothesis {
            condition: Hypothesis::TrajectoryFeasibility,
            ..
        } => StageFailure::new(Stage::LambdaPlan, e),
        e => StageFailure::new(Stage::Hypotheses, e),
    })?;

    let mut warnings = Vec::new();
    let b0 = tv.eval_b(t0, &s.sim.x0).map_err(at(Stage::Parse))?;
    if b0 < 0.0 {
        warnings.push(format!("x0 is outside the safe set at t = {t0}: B = {b0}"));
    }
    Ok(Prepared {
        scenario: s.clone(),
        system: sys,
        clf,
        tv,
        constraints: cons,
        targets,
        sampler,
        domination,
        envelope,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// reports

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaSummary {
    pub spec: TrajectorySpec<f64>,
    pub knots: Vec<[f64; 2]>,
    pub segments: String,
    pub regularity: &'static str,
    pub verify: TrajectoryReport<f64>,
}

fn lambda_summary(tv: &TimeVaryingCbf<f64>, n_verify: usize) -> Result<LambdaSummary, StageFailure> {
    let lam = tv.lambda();
    Ok(LambdaSummary {
        spec: lam.to_spec(),
        knots: lam.knots().into_iter().map(|(t, v)| [t, v]).collect(),
        segments: lam.describe(),
        regularity: lam.regularity(),
        verify: lam.verify(n_verify).map_err(at(Stage::LambdaPlan))?,
    })
}

fn cbf_summary(cbf: &LambdaShiftableCbf<f64>) -> Result<CbfSummary, StageFailure> {
    Ok(CbfSummary {
        budget: cbf.budget(),
        b: cbf.field().to_spec().map_err(at(Stage::Io))?,
        alpha: cbf.alpha().to_spec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetSummary {
    pub constraint: String,
    pub window: Window<f64>,
    pub lam_target: f64,
}

fn target_summary(p: &Prepared) -> Vec<TargetSummary> {
    p.constraints
        .iter()
        .zip(&p.targets)
        .map(|(c, t)| TargetSummary {
            constraint: c.name().to_string(),
            window: t.window,
            lam_target: t.lam_target,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintOutcome {
    pub constraint: String,
    /// Level-set containment `C_lambda(t) within H(t)` over the window.
    pub containment: ContainmentReport<f64>,
    /// Smallest `h(x(t)) + offset` along the simulated trajectory inside the window.
    pub trajectory_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSummary {
    pub dt: f64,
    pub steps: usize,
    pub completed: bool,
    pub max_abs_u: f64,
    pub active_fraction: f64,
    pub final_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<StageFailure>,
    pub warnings: Vec<String>,
    pub cbf: CbfSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clf: Option<ClfSummary>,
    pub domination: DominationReport<f64>,
    pub envelope: EnvelopeReport<f64>,
    pub targets: Vec<TargetSummary>,
    pub lambda: LambdaSummary,
    pub simulation: SimSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invariance: Option<InvarianceReport<f64>>,
    pub constraints: Vec<ConstraintOutcome>,
}

pub struct RunOutput {
    pub report: RunReport,
    pub record: SimRecord<f64>,
}

impl RunOutput {
    pub fn exit_code(&self) -> i32 {
        self.report.failure.as_ref().map_or(0, |f| f.exit_code)
    }

    pub fn csv(&self) -> Result<Vec<u8>, StageFailure> {
        let mut buf = Vec::new();
        self.record.write_csv(&mut buf).map_err(at(Stage::Io))?;
        Ok(buf)
    }

    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(&self.report).expect("report serializes") + "\n"
    }

    /// Writes `trajectory.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), StageFailure> {
        let io = |e: std::io::Error| StageFailure::new(Stage::Io, format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        std::fs::write(dir.join("trajectory.csv"), self.csv()?).map_err(io)?;
        std::fs::write(dir.join("report.json"), self.report_json()).map_err(io)?;
        Ok(())
    }
}

/// Times at which containment is checked: a uniform grid over the window (clipped to
/// the horizon) plus every shift knot inside it.
fn window_times(w: &Window<f64>, t_end: f64, n: usize, knots: &[(f64, f64)]) -> Vec<f64> {
    let end = w.end.unwrap_or(t_end).min(t_end);
    let start = w.start;
    if end < start {
        return Vec::new();
    }
    let mut ts = linspace(start, end, n.max(2));
    ts.extend(knots.iter().map(|k| k.0).filter(|&t| t >= start && t <= end));
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    ts
}

/// Full pipeline: prepare, simulate with the min-norm filter, monitor.
pub fn run(s: &Scenario, dt_override: Option<f64>) -> Result<RunOutput, StageFailure> {
    let mut s = s.clone();
    if let Some(dt) = dt_override {
        if !(dt > 0.0) {
            return Err(StageFailure::new(Stage::Parse, "--dt must be positive"));
        }
        s.sim.dt = dt;
    }
    let p = prepare(&s)?;
    let tv = &p.tv;
    let [t0, t1] = s.sim.t_span;
    let dt = s.sim.dt;
    let controller = filter_controller(tv, &p.system);
    let (record, sim_failure) = match simulate(&p.system, controller, &s.sim.x0, (t0, t1), dt, Some(tv)) {
        Ok(rec) => (rec, None),
        Err(halt) => {
            let msg = format!("{halt}");
            (halt.record, Some(StageFailure::new(Stage::Simulation, msg)))
        }
    };
    let invariance = monitor_invariance(&record, INVARIANCE_TOL).ok();

    let knots = tv.lambda().knots();
    let mut outcomes = Vec::new();
    let mut containment_failure = None;
    for c in &p.constraints {
        let ts = window_times(&c.window, t1, s.certification.n_containment_times, &knots);
        let containment = if ts.is_empty() {
            ContainmentReport {
                ok: true,
                worst_margin: f64::INFINITY,
                worst_t: c.window.start,
                worst_state: Vec::new(),
                n_checked: 0,
            }
        } else {
            check_containment(tv, c, &ts, &p.sampler).map_err(at(Stage::Containment))?
        };
        if !containment.ok && containment_failure.is_none() {
            containment_failure = Some(StageFailure::new(
                Stage::Containment,
                format!(
                    "`{}` violated on the safe-set boundary at t = {}: margin {}",
                    c.name(),
                    containment.worst_t,
                    containment.worst_margin
                ),
            ));
        }
        let mut margin: Option<f64> = None;
        for (t, x) in record.times.iter().zip(&record.states) {
            if c.window.contains(*t) {
                let m = c.margin(*t, x).map_err(at(Stage::Containment))?;
                margin = Some(margin.map_or(m, |v| v.min(m)));
            }
        }
        outcomes.push(ConstraintOutcome {
            constraint: c.name().to_string(),
            containment,
            trajectory_margin: margin,
        });
    }

    let inv_failure = invariance.as_ref().filter(|r| r.violated).map(|r| {
        StageFailure::new(
            Stage::Invariance,
            format!("B reached {} at t = {}", r.min_b, r.argmin_t),
        )
    });
    let failure = sim_failure.or(inv_failure).or(containment_failure);

    let n = record.len();
    let max_abs_u = record
        .inputs
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let zero_u = record.inputs.iter().filter(|u| u.iter().all(|v| *v == 0.0)).count();
    let simulation = SimSummary {
        dt,
        steps: n.saturating_sub(1),
        completed: record.feasible.iter().all(|f| *f),
        max_abs_u,
        active_fraction: if n == 0 { 0.0 } else { (n - zero_u) as f64 / n as f64 },
        final_state: record.states.last().cloned().unwrap_or_default(),
    };
    let report = RunReport {
        scenario: s.name.clone(),
        ok: failure.is_none(),
        failure,
        warnings: p.warnings.clone(),
        cbf: cbf_summary(tv.cbf())?,
        clf: p.clf.as_ref().map(|c| c.1.clone()),
        domination: p.domination,
        envelope: p.envelope,
        targets: target_summary(&p),
        lambda: lambda_summary(tv, s.certification.n_verify)?,
        simulation,
        invariance,
        constraints: outcomes,
    };
    Ok(RunOutput { report, record })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertifyReport {
    pub scenario: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<StageFailure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clf: Option<ClfSummary>,
    pub shiftable: CertReport<f64>,
    pub domination: DominationReport<f64>,
    pub envelope: EnvelopeReport<f64>,
    pub lambda: LambdaSummary,
    pub time_varying: CertReport<f64>,
}

impl CertifyReport {
    pub fn exit_code(&self) -> i32 {
        self.failure.as_ref().map_or(0, |f| f.exit_code)
    }
}

/// Certificates only, no simulation. Hypothesis failures detected while preparing keep
/// their own stage; failing sampled certificates report [`Stage::Certify`].
pub fn certify(s: &Scenario) -> Result<CertifyReport, StageFailure> {
    let sys = build_system(&s.system)?;
    let p = match prepare(s) {
        Ok(p) => p,
        Err(f) if f.stage == Stage::Clf => {
            // report the failing CLF certificate itself rather than a bare error
            if let Some(c) = &s.clf {
                let v = ScalarField::from_spec(&c.v).map_err(at(Stage::Parse))?;
                let gamma = ScalarK::from_spec(&c.gamma).map_err(at(Stage::Parse))?;
                if let Ok(clf) = Clf::new(v, gamma, c.region.clone(), s.seed()) {
                    if let Ok(rep) = certify_clf(&clf, &sys, &grid_samples(&s.certification.grid), &cert_opts(s)) {
                        if !rep.ok {
                            return Err(StageFailure::new(
                                Stage::Certify,
                                format!(
                                    "CLF certificate fails: margin {} at {:?}",
                                    rep.worst_margin, rep.worst_state
                                ),
                            ));
                        }
                    }
                }
            }
            return Err(f);
        }
        Err(f) => return Err(f),
    };
    let tv = &p.tv;
    let samples = grid_samples(&s.certification.grid);
    let opts = cert_opts(s);
    let shiftable = certify_shiftable(tv.cbf(), &p.system, &samples, &opts).map_err(at(Stage::Certify))?;

    // random (t, x) pairs inside [t0, T] x C_Lambda
    let mut rng = crate::levelset::rng(s.seed());
    let [t0, t1] = s.sim.t_span;
    let g = &s.certification.grid;
    let mut pairs = Vec::with_capacity(s.certification.n_pairs);
    let mut tries = 0;
    while pairs.len() < s.certification.n_pairs && tries < 1000 * s.certification.n_pairs.max(1) {
        tries += 1;
        let t = t0 + (t1 - t0) * rng.random::<f64>();
        let x: Vec<f64> =
            g.lo.iter()
                .zip(&g.hi)
                .map(|(&l, &h)| l + (h - l) * rng.random::<f64>())
                .collect();
        if tv.cbf().in_domain(&x) {
            pairs.push((t, x));
        }
    }
    let time_varying = certify_time_varying_pairs(tv, &p.system, &pairs, &opts).map_err(at(Stage::Certify))?;

    let failure = if let Some((_, c)) = p.clf.as_ref().filter(|c| !c.1.certificate.ok) {
        Some(StageFailure::new(
            Stage::Certify,
            format!("CLF certificate margin {}", c.certificate.worst_margin),
        ))
    } else if !shiftable.ok {
        Some(StageFailure::new(
            Stage::Certify,
            format!(
                "shiftable certificate margin {} at {:?}",
                shiftable.worst_margin, shiftable.worst_state
            ),
        ))
    } else if !time_varying.ok {
        Some(StageFailure::new(
            Stage::Certify,
            format!(
                "time-varying certificate margin {} at t = {:?}, x = {:?}",
                time_varying.worst_margin, time_varying.worst_t, time_varying.worst_state
            ),
        ))
    } else if !p.envelope.ok {
        Some(StageFailure::new(
            Stage::Certify,
            format!("envelope margin {}", p.envelope.worst_margin),
        ))
    } else {
        None
    };
    Ok(CertifyReport {
        scenario: s.name.clone(),
        ok: failure.is_none(),
        failure,
        clf: p.clf.as_ref().map(|c| c.1.clone()),
        shiftable,
        domination: p.domination,
        envelope: p.envelope,
        lambda: lambda_summary(tv, s.certification.n_verify)?,
        time_varying,
    })
}

/// Polylines of `{b = -lambda}` as CSV `lambda,k,x1,..,xn`; curves for `lambda > Lambda`
/// are still written but produce a warning. An empty list gives an empty file.
pub fn export_levelsets(s: &Scenario, lambdas: &[f64], n_points: usize) -> Result<(String, Vec<String>), StageFailure> {
    let sys = build_system(&s.system)?;
    let (cbf, _) = barrier(s, &sys)?;
    let mut warnings = Vec::new();
    if lambdas.is_empty() {
        return Ok((String::new(), warnings));
    }
    let dim = s.state_dim();
    let sampler = RaySampler::new(vec![0.0; dim], n_points.max(3), s.seed());
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| StageFailure::new(Stage::Io, e);
    let mut header = vec!["lambda".to_string(), "k".to_string()];
    header.extend((1..=dim).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(io)?;
    for &lam in lambdas {
        if lam > cbf.budget() {
            warnings.push(format!("lambda = {lam} exceeds Lambda = {}", cbf.budget()));
        }
        if lam < 0.0 {
            warnings.push(format!("lambda = {lam} is negative; the curve may be empty"));
        }
        let pts = match sampler.boundary(cbf.field(), -lam) {
            Ok(p) => p,
            Err(e) => {
                warnings.push(format!("lambda = {lam}: {e}"));
                continue;
            }
        };
        for (k, x) in pts.iter().enumerate() {
            let mut row = vec![lam.to_string(), k.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(io)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| StageFailure::new(Stage::Io, e.to_string()))?;
    Ok((String::from_utf8(bytes).expect("csv is utf-8"), warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Clf2CbfOutput {
    #[serde(flatten)]
    pub cbf: CbfSummary,
    pub lambda_max: f64,
    pub b_c: f64,
    pub certificate: CertReport<f64>,
}

/// Certified CLF converted into a barrier descriptor.
pub fn clf2cbf(s: &Scenario) -> Result<Clf2CbfOutput, StageFailure> {
    if s.clf.is_none() {
        return Err(StageFailure::new(Stage::Parse, "scenario has no `clf` block"));
    }
    let sys = build_system(&s.system)?;
    let (cbf, clf) = barrier(s, &sys)?;
    let (_, summary) = clf.expect("clf block present");
    Ok(Clf2CbfOutput {
        cbf: cbf_summary(&cbf)?,
        lambda_max: summary.lambda_max,
        b_c: summary.b_c,
        certificate: summary.certificate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{
            "name": "decay",
            "system": {"builtin": "linear", "A": [[-1.0]], "B": [[1.0]], "u_box": {"lo": [-1.0], "hi": [1.0]}},
            "cbf": {"b": {"kind": "quadratic", "Q": [[-1.0]]}, "Lambda": 1.0, "alpha": {"kind": "linear", "slope": 2.0}},
            "alpha_lambda": {"kind": "linear", "slope": 1.0},
            "lambda_plan": {"mode": "explicit", "segments": [{"kind": "ode", "t_end": 1.0, "dt": 0.001}]},
            "sim": {"x0": [0.5], "t_span": [0.0, 2.0], "dt": 0.01},
            "certification": {"grid": {"lo": [-1.0], "hi": [1.0], "n": [41]}, "n_rays": 8}
        }"#
        .to_string()
    }

    #[test]
    fn parses_and_round_trips() {
        let s = Scenario::from_json(&minimal()).unwrap();
        let again = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(s, again);
        assert_eq!(s.certification.n_u_grid, 11);
    }

    #[test]
    fn rejects_both_or_neither_barrier_block() {
        let mut v: serde_json::Value = serde_json::from_str(&minimal()).unwrap();
        v.as_object_mut().unwrap().remove("cbf");
        let e = Scenario::from_json(&v.to_string()).unwrap_err();
        assert_eq!(e.exit_code, 10);
        assert!(Scenario::from_json("{").is_err());
    }

    #[test]
    fn simple_run_passes() {
        let s = Scenario::from_json(&minimal()).unwrap();
        let out = run(&s, None).unwrap();
        assert!(out.report.ok, "{:?}", out.report.failure);
        assert_eq!(out.record.len(), 201);
        let c = certify(&s).unwrap();
        assert!(c.ok, "{:?}", c.failure);
    }

    #[test]
    fn domination_failure_maps_to_hypotheses_stage() {
        let text = minimal().replace(
            r#""alpha_lambda": {"kind": "linear", "slope": 1.0}"#,
            r#""alpha_lambda": {"kind": "linear", "slope": 3.0}"#,
        );
        let s = Scenario::from_json(&text).unwrap();
        let e = run(&s, None).err().unwrap();
        assert_eq!(e.stage, Stage::Hypotheses);
        assert_eq!(e.exit_code, 12);
    }

    #[test]
    fn staged_plan_meets_deadlines() {
        let g = ScalarK::piecewise_affine(&[0.0, 0.03], &[1.0, 2.0], f64::INFINITY).unwrap();
        let plan = LambdaPlan::Staged {
            lam0: None,
            dt_ode: 1e-3,
            stages: vec![
                PlanStage::DescendOde {
                    target: Level::Value(0.2025),
                    deadline: 6.0,
                },
                PlanStage::Hold { until: 10.0 },
                PlanStage::Linear {
                    t_end: 11.0,
                    lam_end: Level::Value(0.3),
                },
                PlanStage::DescendLinear {
                    target: Level::Value(0.050625),
                    deadline: 15.0,
                },
            ],
        };
        let lam = build_lambda(&plan, 2.0, &g, 0.0, 20.0, &[]).unwrap();
        assert!((lam.eval(6.0).unwrap() - 0.2025).abs() < 1e-10);
        assert!((lam.eval(15.0).unwrap() - 0.050625).abs() < 1e-12);
        assert_eq!(lam.end_time(), 20.0);
        assert!(lam.verify(100).unwrap().ok);
        let k = lam.knots();
        // alpha_lambda(l) = 2 l - 0.03 above the break
        let analytic = 6.0 - 0.5 * (3.97f64 / 0.375).ln();
        assert!((k[1].0 - analytic).abs() < 1e-6, "{k:?}");

        let late = LambdaPlan::Staged {
            lam0: None,
            dt_ode: 1e-3,
            stages: vec![PlanStage::DescendOde {
                target: Level::Value(0.2025),
                deadline: 1.0,
            }],
        };
        let e = build_lambda(&late, 2.0, &g, 0.0, 20.0, &[]).unwrap_err();
        assert_eq!(e.stage, Stage::LambdaPlan);
    }
}
