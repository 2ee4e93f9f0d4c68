//! Shiftable control barrier functions and their time-varying shifts.

use serde::Serialize;

use crate::classk::{check_envelope, verify_domination, ExtendedKe, MonotoneFn};
use crate::dynamics::Dynamics;
use crate::error::{Error, Hypothesis, Result};
use crate::field::ScalarField;
use crate::lambda::LambdaTrajectory;
use crate::scalar::{dot, Real};

/// `b` with budget `Lambda`: the CBF condition holds with `alpha` on `{b >= -Lambda}`.
#[derive(Debug, Clone)]
pub struct LambdaShiftableCbf<T: Real> {
    b: ScalarField<T>,
    budget: T,
    alpha: ExtendedKe<T>,
    zero_budget: bool,
}

impl<T: Real> LambdaShiftableCbf<T> {
    pub fn new(b: ScalarField<T>, budget: T, alpha: ExtendedKe<T>) -> Result<Self> {
        if !(budget > T::zero()) || !budget.is_finite() {
            return Err(Error::Precondition("Lambda must be positive and finite".into()));
        }
        let (lo, _) = alpha.domain();
        if lo > -budget {
            return Err(Error::OutOfDomain {
                name: alpha.name().to_string(),
                x: (-budget).as_f64(),
                lo: lo.as_f64(),
                hi: alpha.domain().1.as_f64(),
            });
        }
        Ok(Self {
            b,
            budget,
            alpha,
            zero_budget: false,
        })
    }

    pub fn field(&self) -> &ScalarField<T> {
        &self.b
    }

    pub fn budget(&self) -> T {
        self.budget
    }

    pub fn alpha(&self) -> &ExtendedKe<T> {
        &self.alpha
    }

    /// True after shifting by the whole budget: a plain CBF with no room left to shift.
    pub fn is_zero_budget(&self) -> bool {
        self.zero_budget
    }

    pub fn value(&self, x: &[T]) -> T {
        self.b.value(x)
    }

    pub fn gradient(&self, x: &[T]) -> Vec<T> {
        self.b.gradient(x)
    }

    /// Membership in `C_Lambda = {b >= -Lambda}`.
    pub fn in_domain(&self, x: &[T]) -> bool {
        self.b.value(x) >= -self.budget
    }

    /// `x -> b(x) + lam`, a `(Lambda - lam)`-shiftable CBF with the same `alpha`.
    pub fn shift_const(&self, lam: T) -> Result<Self> {
        if !(lam >= T::zero() && lam <= self.budget) || self.zero_budget && lam > T::zero() {
            return Err(Error::Range {
                what: "lambda",
                value: lam.as_f64(),
                lo: 0.0,
                hi: if self.zero_budget { 0.0 } else { self.budget.as_f64() },
            });
        }
        let rest = self.budget - lam;
        Ok(Self {
            b: self.b.shifted(lam),
            budget: rest,
            alpha: self.alpha.clone(),
            zero_budget: self.zero_budget || rest == T::zero(),
        })
    }
}

/// `B(t, x) = b(x) + lambda(t)` with decay rate `beta`.
#[derive(Debug, Clone)]
pub struct TimeVaryingCbf<T: Real> {
    cbf: LambdaShiftableCbf<T>,
    lam: LambdaTrajectory<T>,
    beta: ExtendedKe<T>,
}

/// Grid sizes for the checks run by [`compose_time_varying`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComposeOptions<T> {
    pub n_domination: usize,
    pub n_verify: usize,
    pub n_envelope: usize,
    pub tolerance: T,
}

impl<T: Real> Default for ComposeOptions<T> {
    fn default() -> Self {
        Self {
            n_domination: 2001,
            n_verify: 100,
            n_envelope: 201,
            tolerance: T::lit(1e-9),
        }
    }
}

fn hypothesis(condition: Hypothesis, detail: impl Into<String>) -> Error {
    Error::Hypothesis {
        condition,
        detail: detail.into(),
    }
}

/// Checks every hypothesis of the time-varying construction and bundles the result.
pub fn compose_time_varying<T: Real>(
    cbf: LambdaShiftableCbf<T>,
    lam: LambdaTrajectory<T>,
    beta: ExtendedKe<T>,
    opts: &ComposeOptions<T>,
) -> Result<TimeVaryingCbf<T>> {
    let a = lam.budget();
    if a > cbf.budget() {
        return Err(hypothesis(
            Hypothesis::Budget,
            format!("trajectory Lambda {a} exceeds barrier Lambda {}", cbf.budget()),
        ));
    }
    let alpha_lambda = lam.alpha_lambda();
    if !alpha_lambda.shape().is_regular() {
        return Err(hypothesis(Hypothesis::RateShape, "shape tag is `general`"));
    }
    let dom = verify_domination(cbf.alpha(), alpha_lambda, a, opts.n_domination)
        .map_err(|e| hypothesis(Hypothesis::Domination, e.to_string()))?;
    if !dom.ok {
        return Err(hypothesis(
            Hypothesis::Domination,
            format!("margin {} at xi = {}", dom.worst_margin, dom.worst_xi),
        ));
    }
    let rep = lam.verify(opts.n_verify)?;
    if !rep.ok {
        return Err(hypothesis(
            Hypothesis::TrajectoryFeasibility,
            format!(
                "margin {} at t = {} (range ok: {}, continuous: {})",
                rep.worst_margin, rep.worst_t, rep.range_ok, rep.continuous
            ),
        ));
    }
    let envelope_err = |detail: String| hypothesis(Hypothesis::EnvelopeSoundness, detail);
    let b0 = beta.eval(T::zero()).map_err(|e| envelope_err(e.to_string()))?;
    if b0 != T::zero() {
        return Err(envelope_err(format!("beta(0) = {b0}")));
    }
    // Two grids with different spacing so that no knot set is aligned with both.
    for n in [opts.n_envelope, opts.n_envelope + opts.n_envelope / 3 + 1] {
        let env = check_envelope(&beta, cbf.alpha(), alpha_lambda, a, n, opts.tolerance)
            .map_err(|e| envelope_err(e.to_string()))?;
        if !env.ok {
            return Err(envelope_err(format!(
                "margin {} at (x1, x2) = ({}, {})",
                env.worst_margin, env.worst_x1, env.worst_x2
            )));
        }
    }
    Ok(TimeVaryingCbf { cbf, lam, beta })
}

impl<T: Real> TimeVaryingCbf<T> {
    /// Bundles the parts without checking anything. Certification still evaluates the
    /// real condition, so this is how counterexamples are examined.
    pub fn new_unchecked(cbf: LambdaShiftableCbf<T>, lam: LambdaTrajectory<T>, beta: ExtendedKe<T>) -> Self {
        Self { cbf, lam, beta }
    }

    pub fn cbf(&self) -> &LambdaShiftableCbf<T> {
        &self.cbf
    }

    pub fn lambda(&self) -> &LambdaTrajectory<T> {
        &self.lam
    }

    pub fn beta(&self) -> &ExtendedKe<T> {
        &self.beta
    }

    pub fn eval_b(&self, t: T, x: &[T]) -> Result<T> {
        self.cbf.b.check_dim(x)?;
        Ok(self.cbf.value(x) + self.lam.eval(t)?)
    }

    /// `(dB/dt, dB/dx) = (lambda'(t), grad b(x))`, right-hand in `t` at knots.
    pub fn gradient_tx(&self, t: T, x: &[T]) -> Result<(T, Vec<T>)> {
        self.cbf.b.check_dim(x)?;
        Ok((self.lam.eval_dot(t)?, self.cbf.gradient(x)))
    }

    /// Membership in `C_lambda(t) = {b(x) + lambda(t) >= 0}`.
    pub fn contains(&self, t: T, x: &[T]) -> Result<bool> {
        Ok(self.eval_b(t, x)? >= T::zero())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifyOptions<T> {
    /// Points per input axis for non control-affine dynamics.
    pub n_u_grid: usize,
    /// A sample passes when its margin is at least `-tolerance`.
    pub tolerance: T,
}

impl<T: Real> Default for CertifyOptions<T> {
    fn default() -> Self {
        Self {
            n_u_grid: 11,
            tolerance: T::lit(1e-9),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertReport<T> {
    pub ok: bool,
    pub worst_margin: T,
    pub worst_state: Vec<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_t: Option<T>,
    pub n_checked: usize,
    pub n_skipped: usize,
}

impl<T: Real> CertReport<T> {
    fn new() -> Self {
        Self {
            ok: true,
            worst_margin: T::infinity(),
            worst_state: Vec::new(),
            worst_t: None,
            n_checked: 0,
            n_skipped: 0,
        }
    }

    fn record(&mut self, margin: T, x: &[T], t: Option<T>) {
        self.n_checked += 1;
        if margin < self.worst_margin || self.worst_state.is_empty() {
            self.worst_margin = margin;
            self.worst_state = x.to_vec();
            self.worst_t = t;
        }
    }

    fn finish(mut self, tolerance: T, ok_if: impl Fn(T, T) -> bool) -> Result<Self> {
        if self.n_checked == 0 {
            return Err(Error::EmptySamples {
                skipped: self.n_skipped,
            });
        }
        self.ok = ok_if(self.worst_margin, tolerance);
        Ok(self)
    }
}

/// Minimum and maximum of `grad . f(x, u)` over the input candidates.
pub(crate) fn lie_range<T: Real>(sys: &dyn Dynamics<T>, grad: &[T], x: &[T], candidates: &[Vec<T>]) -> (T, T) {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for u in candidates {
        let v = dot(grad, &sys.f(x, u));
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn check_state_dim<T: Real>(sys: &dyn Dynamics<T>, field: &ScalarField<T>) -> Result<()> {
    if sys.dim_x() != field.dim() {
        return Err(Error::Dimension {
            expected: field.dim(),
            got: sys.dim_x(),
        });
    }
    Ok(())
}

/// Sampled check of `sup_u grad b . f(x, u) + alpha(b(x)) >= 0` on `C_Lambda`.
/// Samples outside `C_Lambda` are skipped and counted.
pub fn certify_shiftable<T: Real>(
    cbf: &LambdaShiftableCbf<T>,
    sys: &dyn Dynamics<T>,
    samples: &[Vec<T>],
    opts: &CertifyOptions<T>,
) -> Result<CertReport<T>> {
    check_state_dim(sys, &cbf.b)?;
    let candidates = sys.input_candidates(opts.n_u_grid);
    let mut rep = CertReport::new();
    for x in samples {
        cbf.b.check_dim(x)?;
        let b = cbf.value(x);
        if b < -cbf.budget {
            rep.n_skipped += 1;
            continue;
        }
        let (_, sup) = lie_range(sys, &cbf.gradient(x), x, &candidates);
        rep.record(sup + cbf.alpha.eval(b)?, x, None);
    }
    rep.finish(opts.tolerance, |m, tol| m >= -tol)
}

/// Sampled check of `sup_u grad b . f(x, u) + lambda'(t) + beta(b(x) + lambda(t)) >= 0`
/// over `t_samples x state_samples`, skipping states outside `C_Lambda`.
pub fn certify_time_varying<T: Real>(
    tv: &TimeVaryingCbf<T>,
    sys: &dyn Dynamics<T>,
    t_samples: &[T],
    state_samples: &[Vec<T>],
    opts: &CertifyOptions<T>,
) -> Result<CertReport<T>> {
    check_state_dim(sys, &tv.cbf.b)?;
    let candidates = sys.input_candidates(opts.n_u_grid);
    let mut rep = CertReport::new();
    let lam: Vec<(T, T, T)> = t_samples
        .iter()
        .map(|&t| Ok((t, tv.lam.eval(t)?, tv.lam.eval_dot(t)?)))
        .collect::<Result<_>>()?;
    for x in state_samples {
        tv.cbf.b.check_dim(x)?;
        let b = tv.cbf.value(x);
        if b < -tv.cbf.budget {
            rep.n_skipped += t_samples.len();
            continue;
        }
        let (_, sup) = lie_range(sys, &tv.cbf.gradient(x), x, &candidates);
        for &(t, l, l_dot) in &lam {
            rep.record(sup + l_dot + tv.beta.eval(b + l)?, x, Some(t));
        }
    }
    rep.finish(opts.tolerance, |m, tol| m >= -tol)
}

/// Certification over paired samples `(t_i, x_i)` rather than a product grid.
pub fn certify_time_varying_pairs<T: Real>(
    tv: &TimeVaryingCbf<T>,
    sys: &dyn Dynamics<T>,
    pairs: &[(T, Vec<T>)],
    opts: &CertifyOptions<T>,
) -> Result<CertReport<T>> {
    check_state_dim(sys, &tv.cbf.b)?;
    let candidates = sys.input_candidates(opts.n_u_grid);
    let mut rep = CertReport::new();
    for (t, x) in pairs {
        tv.cbf.b.check_dim(x)?;
        let b = tv.cbf.value(x);
        if b < -tv.cbf.budget {
            rep.n_skipped += 1;
            continue;
        }
        let (_, sup) = lie_range(sys, &tv.cbf.gradient(x), x, &candidates);
        let l = tv.lam.eval(*t)?;
        let margin = sup + tv.lam.eval_dot(*t)? + tv.beta.eval(b + l)?;
        rep.record(margin, x, Some(*t));
    }
    rep.finish(opts.tolerance, |m, tol| m >= -tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classk::{beta_envelope, ScalarK};
    use crate::dynamics::{ControlAffineSystem, InputBox, PendulumParams};
    use crate::scalar::{box_grid, linspace};

    fn pendulum_cbf() -> LambdaShiftableCbf<f64> {
        let v = ScalarField::quadratic(vec![vec![2.0, 1.0], vec![1.0, 1.0]], vec![], 0.0).unwrap();
        let gamma = ScalarK::piecewise_affine(&[0.0, 0.03], &[1.0, 2.0], f64::INFINITY).unwrap();
        LambdaShiftableCbf::new(v.negated(), 2.0, ExtendedKe::odd_reflect(&gamma)).unwrap()
    }

    fn integrator(bound: f64) -> ControlAffineSystem<f64> {
        ControlAffineSystem::new(
            "integrator",
            1,
            |_: &[f64]| vec![0.0],
            |_: &[f64]| vec![vec![1.0]],
            InputBox::new(vec![-bound], vec![bound]).unwrap(),
        )
    }

    fn neg_square() -> ScalarField<f64> {
        ScalarField::quadratic(vec![vec![-1.0]], vec![], 0.0).unwrap()
    }

    #[test]
    fn shift_by_zero_is_identity() {
        let c = pendulum_cbf();
        let s = c.shift_const(0.0).unwrap();
        for x in box_grid(&[-2.0, -2.0], &[2.0, 2.0], &[10, 10]) {
            assert_eq!(s.value(&x), c.value(&x));
        }
        assert_eq!(s.budget(), 2.0);
    }

    #[test]
    fn shift_budget_algebra() {
        let c = pendulum_cbf();
        assert_eq!(c.shift_const(2.0).unwrap().value(&[0.0, 0.0]), 2.0);
        assert!(c.shift_const(2.0).unwrap().is_zero_budget());
        assert_eq!(c.shift_const(0.5).unwrap().budget(), 1.5);
        assert!(matches!(c.shift_const(2.5), Err(Error::Range { .. })));
        assert!(c.shift_const(-0.1).is_err());
        let twice = c.shift_const(0.5).unwrap().shift_const(0.7).unwrap();
        let once = c.shift_const(1.2).unwrap();
        let x = [0.3, -0.9];
        assert!((twice.value(&x) - once.value(&x)).abs() < 1e-15);
        assert!((twice.budget() - once.budget()).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonpositive_budget() {
        let c = pendulum_cbf();
        assert!(LambdaShiftableCbf::new(c.field().clone(), 0.0, c.alpha().clone()).is_err());
    }

    #[test]
    fn integrator_certificate() {
        let alpha = ExtendedKe::linear(1.0).unwrap();
        let cbf = LambdaShiftableCbf::new(neg_square(), 1.0, alpha.clone()).unwrap();
        let samples: Vec<Vec<f64>> = linspace(-1.5, 1.5, 301).into_iter().map(|x| vec![x]).collect();
        let rep = certify_shiftable(&cbf, &integrator(1.0), &samples, &CertifyOptions::default()).unwrap();
        assert!(rep.ok);
        assert!(rep.n_skipped > 0);
        let rep = certify_shiftable(&cbf, &integrator(0.0), &samples, &CertifyOptions::default()).unwrap();
        assert!(!rep.ok);
        assert!((rep.worst_margin + 1.0).abs() < 1e-12);
        assert_eq!(rep.worst_state[0].abs(), 1.0);
    }

    #[test]
    fn empty_samples_are_an_error() {
        let cbf = LambdaShiftableCbf::new(neg_square(), 1.0, ExtendedKe::linear(1.0).unwrap()).unwrap();
        let r = certify_shiftable(&cbf, &integrator(1.0), &[vec![5.0]], &CertifyOptions::default());
        assert!(matches!(r, Err(Error::EmptySamples { skipped: 1 })));
    }

    fn pendulum_system() -> ControlAffineSystem<f64> {
        ControlAffineSystem::pendulum(PendulumParams::default(), InputBox::symmetric(20.0, 1).unwrap()).unwrap()
    }

    #[test]
    fn constant_shift_reduces_to_shiftable() {
        let cbf = pendulum_cbf();
        let lam = LambdaTrajectory::new(2.0, ScalarK::linear(1.0).unwrap(), 0.0, 2.0)
            .unwrap()
            .append_constant(10.0)
            .unwrap();
        let tv = TimeVaryingCbf::new_unchecked(cbf.clone(), lam, cbf.alpha().clone());
        assert_eq!(tv.eval_b(3.0, &[0.0, 0.0]).unwrap(), 2.0);
        let xs = box_grid(&[-1.5, -1.5], &[1.5, 1.5], &[31, 31]);
        let sys = pendulum_system();
        let a = certify_shiftable(&cbf, &sys, &xs, &CertifyOptions::default()).unwrap();
        let b = certify_time_varying(&tv, &sys, &[0.0], &xs, &CertifyOptions::default()).unwrap();
        // same samples, and beta(b + Lambda) >= alpha(b)
        assert!(a.ok && b.ok);
        assert!(b.worst_margin >= a.worst_margin);
    }

    #[test]
    fn composition_names_failed_hypothesis() {
        let cbf = pendulum_cbf();
        let gamma = cbf.alpha().odd_of().unwrap().clone();
        let lam = LambdaTrajectory::new(2.0, gamma.clone(), 0.0, 2.0)
            .unwrap()
            .append_constant(1.0)
            .unwrap();
        let beta = beta_envelope(cbf.alpha(), &gamma, 2.0, 201, 1e-6).unwrap();
        let tv = compose_time_varying(cbf.clone(), lam, beta.clone(), &ComposeOptions::default()).unwrap();
        let x0 = [1.3, -1.8];
        assert!((tv.eval_b(0.0, &x0).unwrap() - (2.0 - 1.94)).abs() < 1e-12);

        let fast = ScalarK::linear(3.0).unwrap();
        let lam = LambdaTrajectory::new(2.0, fast, 0.0, 2.0)
            .unwrap()
            .append_constant(1.0)
            .unwrap();
        let err = compose_time_varying(cbf.clone(), lam, beta.clone(), &ComposeOptions::default()).unwrap_err();
        assert!(matches!(
            err,
            Error::Hypothesis {
                condition: Hypothesis::Domination,
                ..
            }
        ));

        let lam = LambdaTrajectory::new(2.0, gamma.clone(), 0.0, 2.0)
            .unwrap()
            .append_linear_unchecked(0.1, 1.0)
            .unwrap();
        let err = compose_time_varying(cbf.clone(), lam, beta.clone(), &ComposeOptions::default()).unwrap_err();
        assert!(matches!(
            err,
            Error::Hypothesis {
                condition: Hypothesis::TrajectoryFeasibility,
                ..
            }
        ));

        let lam = LambdaTrajectory::new(2.0, gamma.clone(), 0.0, 2.0)
            .unwrap()
            .append_constant(1.0)
            .unwrap();
        let weak = ExtendedKe::linear(1.0).unwrap();
        let err = compose_time_varying(cbf.clone(), lam, weak, &ComposeOptions::default()).unwrap_err();
        assert!(matches!(
            err,
            Error::Hypothesis {
                condition: Hypothesis::EnvelopeSoundness,
                ..
            }
        ));

        let lam = LambdaTrajectory::new(3.0, gamma.clone(), 0.0, 3.0).unwrap();
        let err = compose_time_varying(cbf, lam, beta, &ComposeOptions::default()).unwrap_err();
        assert!(matches!(
            err,
            Error::Hypothesis {
                condition: Hypothesis::Budget,
                ..
            }
        ));
    }

    #[test]
    fn gradient_is_shift_independent() {
        let cbf = pendulum_cbf();
        let lam = LambdaTrajectory::new(2.0, ScalarK::linear(1.0).unwrap(), 0.0, 2.0)
            .unwrap()
            .append_linear(1.0, 1.5)
            .unwrap();
        let tv = TimeVaryingCbf::new_unchecked(cbf.clone(), lam, cbf.alpha().clone());
        let x = [0.4, -0.2];
        let (dt, dx) = tv.gradient_tx(0.0, &x).unwrap();
        assert_eq!(dt, -0.5);
        assert_eq!(dx, cbf.gradient(&x));
        assert!(tv.eval_b(0.0, &[1.0]).is_err());
    }

    #[test]
    fn violating_slope_fails_certification() {
        // x' = -x with U = {0}: b = -x^2 meets alpha(s) = 2s with equality, so any
        // faster shift breaks the condition on the boundary of C_lambda(t).
        let sys = ControlAffineSystem::new(
            "decay",
            1,
            |x: &[f64]| vec![-x[0]],
            |_: &[f64]| vec![vec![0.0]],
            InputBox::new(vec![0.0], vec![0.0]).unwrap(),
        );
        let alpha = ExtendedKe::linear(2.0).unwrap();
        let cbf = LambdaShiftableCbf::new(neg_square(), 1.0, alpha.clone()).unwrap();
        let lam = LambdaTrajectory::new(1.0, ScalarK::linear(2.0).unwrap(), 0.0, 1.0)
            .unwrap()
            .append_linear_unchecked(0.2, 0.2)
            .unwrap();
        let tv = TimeVaryingCbf::new_unchecked(cbf, lam, alpha);
        let xs: Vec<Vec<f64>> = linspace(-1.0, 1.0, 201).into_iter().map(|x| vec![x]).collect();
        let rep = certify_time_varying(&tv, &sys, &linspace(0.0, 0.2, 21), &xs, &CertifyOptions::default()).unwrap();
        assert!(!rep.ok);
        assert!(rep.worst_t.is_some());
    }
}
