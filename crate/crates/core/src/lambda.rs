//! Shift trajectories `lambda: [t0, T] -> [0, Lambda]` obeying
//! `lambda'(t) >= -alpha_lambda(lambda(t))`.
//!
//! Trajectories are continuous and piecewise C^1. They are built by appending
//! linear, constant and equality-rate segments; each append checks feasibility, so a
//! trajectory assembled through the builder always passes [`LambdaTrajectory::verify`].
//! At knots the derivative is the right-hand one.

use serde::{Deserialize, Serialize};

use crate::classk::{MonotoneFn, ScalarK};
use crate::error::{Error, Result};
use crate::scalar::Real;

const CLAMP_ZERO: f64 = 1e-12;
const SLOPE_TOL: f64 = 1e-12;
pub const VERIFY_TOL: f64 = 1e-9;
const CONTINUITY_TOL: f64 = 1e-10;

/// Sampled solution of `lambda' = -alpha_lambda(lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeTable<T> {
    pub step: T,
    pub times: Vec<T>,
    pub values: Vec<T>,
    pub rates: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SegmentKind<T> {
    Linear { slope: T },
    Constant,
    OdeEquality(OdeTable<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment<T> {
    pub kind: SegmentKind<T>,
    pub t_start: T,
    pub t_end: T,
    pub lam_start: T,
}

/// Monotone cubic Hermite interpolation on one interval.
fn hermite<T: Real>(t0: T, t1: T, y0: T, y1: T, m0: T, m1: T, t: T) -> T {
    let h = t1 - t0;
    let delta = (y1 - y0) / h;
    let (mut m0, mut m1) = (m0, m1);
    if delta == T::zero() {
        m0 = T::zero();
        m1 = T::zero();
    } else {
        let mut a = m0 / delta;
        let mut b = m1 / delta;
        if a < T::zero() {
            a = T::zero();
        }
        if b < T::zero() {
            b = T::zero();
        }
        let r = a * a + b * b;
        let nine = T::lit(9.0);
        if r > nine {
            let tau = T::lit(3.0) / r.sqrt();
            a = tau * a;
            b = tau * b;
        }
        m0 = a * delta;
        m1 = b * delta;
    }
    let s = (t - t0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    let h00 = two * s3 - three * s2 + T::one();
    let h10 = s3 - two * s2 + s;
    let h01 = -two * s3 + three * s2;
    let h11 = s3 - s2;
    h00 * y0 + h10 * h * m0 + h01 * y1 + h11 * h * m1
}

impl<T: Real> OdeTable<T> {
    fn value(&self, t: T) -> T {
        let n = self.times.len();
        let i = self.times.partition_point(|&v| v <= t).clamp(1, n - 1);
        if t == self.times[i] {
            return self.values[i];
        }
        hermite(
            self.times[i - 1],
            self.times[i],
            self.values[i - 1],
            self.values[i],
            self.rates[i - 1],
            self.rates[i],
            t,
        )
    }
}

impl<T: Real> Segment<T> {
    pub fn value(&self, t: T) -> T {
        match &self.kind {
            SegmentKind::Linear { slope } => self.lam_start + *slope * (t - self.t_start),
            SegmentKind::Constant => self.lam_start,
            SegmentKind::OdeEquality(table) => table.value(t),
        }
    }

    pub fn end_value(&self) -> T {
        match &self.kind {
            SegmentKind::OdeEquality(table) => *table.values.last().unwrap(),
            _ => self.value(self.t_end),
        }
    }

    fn rate(&self, t: T, alpha: &ScalarK<T>) -> Result<T> {
        Ok(match &self.kind {
            SegmentKind::Linear { slope } => *slope,
            SegmentKind::Constant => T::zero(),
            SegmentKind::OdeEquality(_) => -alpha.eval(self.value(t).max(T::zero()))?,
        })
    }

    fn kind_name(&self) -> &'static str {
        match self.kind {
            SegmentKind::Linear { .. } => "linear",
            SegmentKind::Constant => "constant",
            SegmentKind::OdeEquality(_) => "ode",
        }
    }
}

/// One RK4 step of `lambda' = -alpha(lambda)` clamped to `[0, budget]`.
fn descent_step<T: Real>(alpha: &ScalarK<T>, budget: T, lam: T, h: T) -> Result<T> {
    let rate = |l: T| -> Result<T> { Ok(-alpha.eval(l.max(T::zero()).min(budget))?) };
    let two = T::lit(2.0);
    let k1 = rate(lam)?;
    let k2 = rate(lam + h / two * k1)?;
    let k3 = rate(lam + h / two * k2)?;
    let k4 = rate(lam + h * k3)?;
    let next = lam + h / T::lit(6.0) * (k1 + two * k2 + two * k3 + k4);
    Ok(if next < T::lit(CLAMP_ZERO) { T::zero() } else { next })
}

/// Outcome of [`LambdaTrajectory::verify`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryReport<T> {
    pub ok: bool,
    /// Smallest `lambda'(t) + alpha_lambda(lambda(t))` over the samples.
    pub worst_margin: T,
    pub worst_t: T,
    pub range_ok: bool,
    pub continuous: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaTrajectory<T> {
    budget: T,
    alpha_lambda: ScalarK<T>,
    t0: T,
    lam0: T,
    segments: Vec<Segment<T>>,
}

impl<T: Real> LambdaTrajectory<T> {
    /// Empty trajectory at `(t0, lam0)`.
    pub fn new(budget: T, alpha_lambda: ScalarK<T>, t0: T, lam0: T) -> Result<Self> {
        if !(budget > T::zero()) || !budget.is_finite() {
            return Err(Error::Precondition("Lambda must be positive and finite".into()));
        }
        check_range("lambda", lam0, budget)?;
        let (_, hi) = alpha_lambda.domain();
        if hi < budget {
            return Err(Error::Precondition(format!(
                "alpha_lambda domain [0, {hi}] does not cover [0, {budget}]"
            )));
        }
        Ok(Self {
            budget,
            alpha_lambda,
            t0,
            lam0,
            segments: Vec::new(),
        })
    }

    pub fn budget(&self) -> T {
        self.budget
    }

    pub fn alpha_lambda(&self) -> &ScalarK<T> {
        &self.alpha_lambda
    }

    pub fn segments(&self) -> &[Segment<T>] {
        &self.segments
    }

    pub fn start_time(&self) -> T {
        self.t0
    }

    pub fn end_time(&self) -> T {
        self.segments.last().map_or(self.t0, |s| s.t_end)
    }

    pub fn current_value(&self) -> T {
        self.segments.last().map_or(self.lam0, |s| s.end_value())
    }

    fn check_order(&self, t_end: T) -> Result<()> {
        let cur = self.end_time();
        if !(t_end > cur) {
            return Err(Error::TimeOrder {
                t_end: t_end.as_f64(),
                current: cur.as_f64(),
            });
        }
        Ok(())
    }

    fn push(&mut self, kind: SegmentKind<T>, t_end: T) {
        let seg = Segment {
            kind,
            t_start: self.end_time(),
            t_end,
            lam_start: self.current_value(),
        };
        self.segments.push(seg);
    }

    /// Linear piece to `(t_end, lam_end)`. The slope must satisfy
    /// `s >= -alpha_lambda(min(lambda_now, lam_end))`, the binding case along the piece.
    pub fn append_linear(mut self, t_end: T, lam_end: T) -> Result<Self> {
        self.check_order(t_end)?;
        check_range("lam_end", lam_end, self.budget)?;
        let cur = self.current_value();
        let slope = (lam_end - cur) / (t_end - self.end_time());
        let bound = -self.alpha_lambda.eval(cur.min(lam_end))?;
        let tol = T::lit(SLOPE_TOL) * T::one().max(bound.abs());
        if slope < bound - tol {
            return Err(Error::InfeasibleSlope {
                slope: slope.as_f64(),
                bound: bound.as_f64(),
            });
        }
        if lam_end == cur {
            self.push(SegmentKind::Constant, t_end);
        } else {
            self.push(SegmentKind::Linear { slope }, t_end);
        }
        Ok(self)
    }

    /// Linear piece without the feasibility check. Used to inject violations in tests
    /// and to load externally produced trajectories that are verified afterwards.
    pub fn append_linear_unchecked(mut self, t_end: T, lam_end: T) -> Result<Self> {
        self.check_order(t_end)?;
        let slope = (lam_end - self.current_value()) / (t_end - self.end_time());
        self.push(SegmentKind::Linear { slope }, t_end);
        Ok(self)
    }

    pub fn append_constant(mut self, t_end: T) -> Result<Self> {
        self.check_order(t_end)?;
        self.push(SegmentKind::Constant, t_end);
        Ok(self)
    }

    /// Fastest admissible descent: RK4 solution of `lambda' = -alpha_lambda(lambda)`
    /// with step `dt` (the last step is shortened to land on `t_end`).
    pub fn append_ode_equality(mut self, t_end: T, dt: T) -> Result<Self> {
        self.check_order(t_end)?;
        if !(dt > T::zero()) {
            return Err(Error::Precondition("dt must be positive".into()));
        }
        let t_start = self.end_time();
        let mut lam = self.current_value();
        let mut t = t_start;
        let mut times = vec![t];
        let mut values = vec![lam];
        let mut rates = vec![-self.alpha_lambda.eval(lam)?];
        let slack = dt * T::lit(1e-9);
        while t < t_end {
            let h = if t_end - t <= dt + slack { t_end - t } else { dt };
            lam = descent_step(&self.alpha_lambda, self.budget, lam, h)?;
            t = if h == t_end - t { t_end } else { t + h };
            times.push(t);
            values.push(lam);
            rates.push(-self.alpha_lambda.eval(lam)?);
        }
        self.push(
            SegmentKind::OdeEquality(OdeTable {
                step: dt,
                times,
                values,
                rates,
            }),
            t_end,
        );
        Ok(self)
    }

    fn segment_at(&self, t: T) -> Result<Option<&Segment<T>>> {
        let (t0, t1) = (self.t0, self.end_time());
        if !(t >= t0 && t <= t1) {
            return Err(Error::TimeDomain {
                t: t.as_f64(),
                t0: t0.as_f64(),
                t1: t1.as_f64(),
            });
        }
        if self.segments.is_empty() {
            return Ok(None);
        }
        let i = self.segments.partition_point(|s| s.t_end <= t);
        Ok(Some(&self.segments[i.min(self.segments.len() - 1)]))
    }

    pub fn eval(&self, t: T) -> Result<T> {
        Ok(match self.segment_at(t)? {
            None => self.lam0,
            Some(seg) => seg.value(t),
        })
    }

    /// Right-hand derivative (left-hand at the final time).
    pub fn eval_dot(&self, t: T) -> Result<T> {
        match self.segment_at(t)? {
            None => Ok(T::zero()),
            Some(seg) => seg.rate(t, &self.alpha_lambda),
        }
    }

    /// Samples `lambda' + alpha_lambda(lambda)` at `n_per_segment + 1` points per segment,
    /// together with the range `[0, Lambda]` and continuity at the knots.
    pub fn verify(&self, n_per_segment: usize) -> Result<TrajectoryReport<T>> {
        let n = n_per_segment.max(1);
        let mut rep = TrajectoryReport {
            ok: true,
            worst_margin: T::infinity(),
            worst_t: self.t0,
            range_ok: true,
            continuous: true,
        };
        let range_tol = T::lit(CLAMP_ZERO);
        let check = |t: T, lam: T, rate: T, rep: &mut TrajectoryReport<T>| -> Result<()> {
            if lam < -range_tol || lam > self.budget + range_tol {
                rep.range_ok = false;
            }
            let m = rate + self.alpha_lambda.eval(lam.max(T::zero()).min(self.budget))?;
            if m < rep.worst_margin {
                rep.worst_margin = m;
                rep.worst_t = t;
            }
            Ok(())
        };
        if self.segments.is_empty() {
            check(self.t0, self.lam0, T::zero(), &mut rep)?;
        }
        let mut prev_end: Option<T> = None;
        for seg in &self.segments {
            if let Some(pe) = prev_end {
                if (pe - seg.lam_start).abs() > T::lit(CONTINUITY_TOL) {
                    rep.continuous = false;
                }
            } else if (self.lam0 - seg.lam_start).abs() > T::lit(CONTINUITY_TOL) {
                rep.continuous = false;
            }
            let ts: Vec<T> = match &seg.kind {
                SegmentKind::OdeEquality(table) if table.times.len() > n + 1 => {
                    let mut ts = crate::scalar::linspace(seg.t_start, seg.t_end, n + 1);
                    ts.extend(table.times.iter().copied());
                    ts
                }
                _ => crate::scalar::linspace(seg.t_start, seg.t_end, n + 1),
            };
            for t in ts {
                check(t, seg.value(t), seg.rate(t, &self.alpha_lambda)?, &mut rep)?;
            }
            prev_end = Some(seg.end_value());
        }
        rep.ok = rep.worst_margin >= -T::lit(VERIFY_TOL) && rep.range_ok && rep.continuous;
        Ok(rep)
    }

    /// `"c1"` if the derivative is continuous at every knot, `"piecewise_c1"` otherwise.
    pub fn regularity(&self) -> &'static str {
        for w in self.segments.windows(2) {
            let left = match w[0].rate(w[0].t_end, &self.alpha_lambda) {
                Ok(r) => r,
                Err(_) => return "piecewise_c1",
            };
            let right = match w[1].rate(w[1].t_start, &self.alpha_lambda) {
                Ok(r) => r,
                Err(_) => return "piecewise_c1",
            };
            if (left - right).abs() > T::lit(VERIFY_TOL) {
                return "piecewise_c1";
            }
        }
        "c1"
    }

    /// Knot times and values, starting at `t0`.
    pub fn knots(&self) -> Vec<(T, T)> {
        let mut k = vec![(self.t0, self.lam0)];
        k.extend(self.segments.iter().map(|s| (s.t_end, s.end_value())));
        k
    }

    pub fn to_spec(&self) -> TrajectorySpec<T> {
        TrajectorySpec {
            budget: self.budget,
            alpha_lambda: self.alpha_lambda.to_spec(),
            t0: Some(self.t0),
            lam0: Some(self.lam0),
            segments: self
                .segments
                .iter()
                .map(|s| match &s.kind {
                    SegmentKind::Linear { .. } => SegmentSpec::Linear {
                        t_end: s.t_end,
                        lam_end: s.end_value(),
                    },
                    SegmentKind::Constant => SegmentSpec::Constant { t_end: s.t_end },
                    SegmentKind::OdeEquality(table) => SegmentSpec::Ode {
                        t_end: s.t_end,
                        dt: table.step,
                    },
                })
                .collect(),
        }
    }

    /// Builds through the checked appenders; any infeasible segment is rejected.
    pub fn from_spec(spec: &TrajectorySpec<T>) -> Result<Self> {
        let alpha = ScalarK::from_spec(&spec.alpha_lambda)?.with_name("alpha_lambda");
        let mut traj = Self::new(
            spec.budget,
            alpha,
            spec.t0.unwrap_or(T::zero()),
            spec.lam0.unwrap_or(spec.budget),
        )?;
        for seg in &spec.segments {
            traj = match *seg {
                SegmentSpec::Linear { t_end, lam_end } => traj.append_linear(t_end, lam_end)?,
                SegmentSpec::Constant { t_end } => traj.append_constant(t_end)?,
                SegmentSpec::Ode { t_end, dt } => traj.append_ode_equality(t_end, dt)?,
            };
        }
        Ok(traj)
    }

    /// Human-readable segment summary, e.g. `"constant[0,4.8] ode[4.8,6]"`.
    pub fn describe(&self) -> String {
        self.segments
            .iter()
            .map(|s| format!("{}[{},{}]", s.kind_name(), s.t_start, s.t_end))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn check_range<T: Real>(what: &'static str, v: T, budget: T) -> Result<()> {
    if !(v >= T::zero() && v <= budget) {
        return Err(Error::Range {
            what,
            value: v.as_f64(),
            lo: 0.0,
            hi: budget.as_f64(),
        });
    }
    Ok(())
}

/// Latest start time for an equality-rate descent from `lam_from` that reaches
/// `lam_target` by `t_deadline`.
///
/// The descent time is found by stepping the equality ODE with RK4 until it crosses the
/// target and locating the crossing inside the last step on the Hermite interpolant.
pub fn latest_descent_start<T: Real>(
    budget: T,
    alpha_lambda: &ScalarK<T>,
    lam_from: T,
    lam_target: T,
    t_deadline: T,
    dt: T,
) -> Result<T> {
    Ok(t_deadline - descent_time(budget, alpha_lambda, lam_from, lam_target, dt)?)
}

/// Time for `lambda' = -alpha_lambda(lambda)` to fall from `lam_from` to `lam_target`.
pub fn descent_time<T: Real>(budget: T, alpha_lambda: &ScalarK<T>, lam_from: T, lam_target: T, dt: T) -> Result<T> {
    check_range("lam_from", lam_from, budget)?;
    check_range("lam_target", lam_target, budget)?;
    if lam_target > lam_from {
        return Err(Error::Precondition("target must not exceed the start value".into()));
    }
    if !(dt > T::zero()) {
        return Err(Error::Precondition("dt must be positive".into()));
    }
    if lam_target == lam_from {
        return Ok(T::zero());
    }
    let no_finite_time = || Error::NoFiniteTime {
        from: lam_from.as_f64(),
        target: lam_target.as_f64(),
    };
    // 0 is an equilibrium; the clamp only removes round-off, it is not a crossing.
    if lam_target <= T::lit(CLAMP_ZERO) {
        return Err(no_finite_time());
    }
    const MAX_STEPS: usize = 50_000_000;
    let mut lam = lam_from;
    let mut t = T::zero();
    for _ in 0..MAX_STEPS {
        let next = descent_step(alpha_lambda, budget, lam, dt)?;
        if !(next < lam) {
            return Err(no_finite_time());
        }
        if next <= lam_target {
            let m0 = -alpha_lambda.eval(lam)?;
            let m1 = -alpha_lambda.eval(next)?;
            let (mut lo, mut hi) = (T::zero(), dt);
            for _ in 0..200 {
                let mid = (lo + hi) / T::lit(2.0);
                if hermite(T::zero(), dt, lam, next, m0, m1, mid) > lam_target {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= T::epsilon() * dt {
                    break;
                }
            }
            return Ok(t + hi);
        }
        lam = next;
        t = t + dt;
    }
    Err(no_finite_time())
}

/// Serialized trajectory: initial value plus segment list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec<T> {
    #[serde(rename = "Lambda")]
    pub budget: T,
    pub alpha_lambda: crate::classk::FunctionSpec<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<T>,
    /// Defaults to `Lambda`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lam0: Option<T>,
    pub segments: Vec<SegmentSpec<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentSpec<T> {
    Linear { t_end: T, lam_end: T },
    Constant { t_end: T },
    Ode { t_end: T, dt: T },
}
