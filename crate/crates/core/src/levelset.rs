//! Boundary sampling of super-level sets by ray bisection, containment checks against
//! half-space constraints, and the largest shift whose safe set fits a constraint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cbf::{LambdaShiftableCbf, TimeVaryingCbf};
use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::lambda::LambdaTrajectory;
use crate::scalar::{dot, Real};

pub const SEED_ENV: &str = "BARRIER_SHIFT_SEED";
pub const DEFAULT_SEED: u64 = 0x5eed;

/// Seed from `BARRIER_SHIFT_SEED`, falling back to `default`.
pub fn seed_from_env(default: u64) -> u64 {
    std::env::var(SEED_ENV)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(default)
}

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Unit directions: evenly spaced angles in 2-D (the first along `+x1`), seeded
/// Gaussian directions otherwise.
pub fn ray_directions<T: Real>(dim: usize, n: usize, seed: u64) -> Vec<Vec<T>> {
    match dim {
        0 => Vec::new(),
        1 => vec![vec![T::one()], vec![-T::one()]],
        2 => (0..n)
            .map(|k| {
                let th = T::TAU() * T::from_usize(k).unwrap() / T::from_usize(n).unwrap();
                vec![th.cos(), th.sin()]
            })
            .collect(),
        _ => {
            let mut r = rng(seed);
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    out.push(v.into_iter().map(|x| T::lit(x / norm)).collect());
                }
            }
            out
        }
    }
}

/// Ray bisection from an interior point.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySampler<T> {
    pub interior: Vec<T>,
    pub directions: Vec<Vec<T>>,
    /// Rays that stay inside up to this radius are treated as unbounded.
    pub r_max: T,
}

impl<T: Real> RaySampler<T> {
    pub fn new(interior: Vec<T>, n_rays: usize, seed: u64) -> Self {
        let directions = ray_directions(interior.len(), n_rays, seed);
        Self {
            interior,
            directions,
            r_max: T::lit(1e6),
        }
    }

    /// Boundary points of `{field >= level}` along each ray, in ray order. Each point is
    /// the last bisection iterate still inside the set. Unbounded rays are omitted.
    pub fn boundary(&self, field: &ScalarField<T>, level: T) -> Result<Vec<Vec<T>>> {
        field.check_dim(&self.interior)?;
        let p = &self.interior;
        let f0 = field.value(p);
        if !(f0 >= level) {
            return Err(Error::LevelSet(format!(
                "interior point has value {f0} below level {level}"
            )));
        }
        let at = |d: &[T], r: T| -> Vec<T> { p.iter().zip(d).map(|(&pi, &di)| pi + r * di).collect() };
        let mut out = Vec::with_capacity(self.directions.len());
        for d in &self.directions {
            if f0 == level && field.value(&at(d, T::lit(1e-12))) < level {
                out.push(p.clone());
                continue;
            }
            let mut hi = T::one();
            while field.value(&at(d, hi)) >= level {
                hi = hi + hi;
                if hi > self.r_max {
                    break;
                }
            }
            if hi > self.r_max {
                continue;
            }
            let mut lo = T::zero();
            for _ in 0..200 {
                let mid = (lo + hi) / T::lit(2.0);
                if mid <= lo || mid >= hi {
                    break;
                }
                if field.value(&at(d, mid)) >= level {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            out.push(at(d, lo));
        }
        if out.is_empty() {
            return Err(Error::LevelSet(format!(
                "level {level} set is unbounded along every ray"
            )));
        }
        Ok(out)
    }
}

/// Time-dependent offset `lambda_h(t)` of a constraint `h(x) >= -lambda_h(t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Offset<T: Real> {
    Constant(T),
    /// Evaluated at the nearest time inside the trajectory's domain.
    Trajectory(LambdaTrajectory<T>),
}

impl<T: Real> Offset<T> {
    pub fn eval(&self, t: T) -> Result<T> {
        match self {
            Offset::Constant(v) => Ok(*v),
            Offset::Trajectory(tr) => tr.eval(t.max(tr.start_time()).min(tr.end_time())),
        }
    }
}

/// Activity window `[start, end]`; `end = None` means forever.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window<T> {
    pub start: T,
    pub end: Option<T>,
}

impl<T: Real> Window<T> {
    pub fn always() -> Self {
        Self {
            start: T::zero(),
            end: None,
        }
    }

    pub fn contains(&self, t: T) -> bool {
        t >= self.start && self.end.is_none_or(|e| t <= e)
    }
}

/// `x(t)` in `H(t) = {h(x) >= -lambda_h(t)}` while `t` is in the window.
#[derive(Debug, Clone)]
pub struct HalfSpaceConstraint<T: Real> {
    pub h: ScalarField<T>,
    pub offset: Offset<T>,
    pub window: Window<T>,
}

impl<T: Real> HalfSpaceConstraint<T> {
    pub fn new(h: ScalarField<T>, offset: Offset<T>, window: Window<T>) -> Self {
        Self { h, offset, window }
    }

    pub fn margin(&self, t: T, x: &[T]) -> Result<T> {
        Ok(self.h.value(x) + self.offset.eval(t)?)
    }

    pub fn name(&self) -> &str {
        self.h.name()
    }
}

pub const CONTAINMENT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContainmentReport<T> {
    pub ok: bool,
    /// Smallest `h(x) + lambda_h(t)` over the sampled boundary points.
    pub worst_margin: T,
    pub worst_t: T,
    pub worst_state: Vec<T>,
    pub n_checked: usize,
}

/// Checks `C_lambda(t) within H(t)` on the boundary of `C_lambda(t)` at every sampled
/// time inside the constraint window.
pub fn check_containment<T: Real>(
    tv: &TimeVaryingCbf<T>,
    cons: &HalfSpaceConstraint<T>,
    t_samples: &[T],
    sampler: &RaySampler<T>,
) -> Result<ContainmentReport<T>> {
    let mut rep = ContainmentReport {
        ok: true,
        worst_margin: T::infinity(),
        worst_t: T::zero(),
        worst_state: Vec::new(),
        n_checked: 0,
    };
    let mut cache: Option<(T, Vec<Vec<T>>)> = None;
    for &t in t_samples.iter().filter(|&&t| cons.window.contains(t)) {
        let lam = tv.lambda().eval(t)?;
        if cache.as_ref().is_none_or(|(l, _)| *l != lam) {
            cache = Some((lam, sampler.boundary(tv.cbf().field(), -lam)?));
        }
        for x in &cache.as_ref().unwrap().1 {
            let m = cons.margin(t, x)?;
            rep.n_checked += 1;
            if m < rep.worst_margin {
                rep.worst_margin = m;
                rep.worst_t = t;
                rep.worst_state = x.clone();
            }
        }
    }
    if rep.n_checked == 0 {
        return Err(Error::EmptySamples {
            skipped: t_samples.len(),
        });
    }
    rep.ok = rep.worst_margin >= -T::lit(CONTAINMENT_TOL);
    Ok(rep)
}

/// Whether `{b >= -lam}` lies inside `{h >= -offset}` on the sampled boundary, up to
/// `tol`.
pub fn contained_at<T: Real>(
    b: &ScalarField<T>,
    lam: T,
    h: &ScalarField<T>,
    offset: T,
    sampler: &RaySampler<T>,
    tol: T,
) -> Result<bool> {
    let pts = sampler.boundary(b, -lam)?;
    Ok(pts.iter().all(|x| h.value(x) + offset >= -tol))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StlTarget<T> {
    pub window: Window<T>,
    /// Largest shift whose safe set stays inside the constraint, capped at `Lambda`.
    pub lam_target: T,
}

/// Bisection tolerance on targets.
pub const TARGET_TOL: f64 = 1e-10;

/// Maps each "always" constraint to the largest `lambda` in `[0, Lambda]` whose safe set
/// `{b >= -lambda}` is contained in the constraint. Trajectory offsets use their
/// smallest value over the window.
pub fn stl_targets<T: Real>(
    constraints: &[HalfSpaceConstraint<T>],
    cbf: &LambdaShiftableCbf<T>,
    sampler: &RaySampler<T>,
) -> Result<Vec<StlTarget<T>>> {
    let mut out = Vec::with_capacity(constraints.len());
    for cons in constraints {
        let offset = worst_offset(cons)?;
        // no slack here, so that later checks at CONTAINMENT_TOL have headroom
        let fits = |lam: T| contained_at(cbf.field(), lam, &cons.h, offset, sampler, T::zero());
        let budget = cbf.budget();
        let lam_target = if fits(budget)? {
            budget
        } else {
            if !fits(T::zero())? {
                return Err(Error::LevelSet(format!(
                    "constraint `{}` excludes the zero level set",
                    cons.name()
                )));
            }
            let (mut lo, mut hi) = (T::zero(), budget);
            while hi - lo > T::lit(TARGET_TOL) * budget.max(T::one()) {
                let mid = (lo + hi) / T::lit(2.0);
                if mid <= lo || mid >= hi {
                    break;
                }
                if fits(mid)? {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        out.push(StlTarget {
            window: cons.window,
            lam_target,
        });
    }
    Ok(out)
}

fn worst_offset<T: Real>(cons: &HalfSpaceConstraint<T>) -> Result<T> {
    match &cons.offset {
        Offset::Constant(v) => Ok(*v),
        Offset::Trajectory(tr) => {
            let start = cons.window.start.max(tr.start_time());
            let end = cons.window.end.unwrap_or(tr.end_time()).min(tr.end_time());
            let mut worst = T::infinity();
            for t in crate::scalar::linspace(start, end.max(start), 201) {
                worst = worst.min(tr.eval(t)?);
            }
            for (t, v) in tr.knots() {
                if cons.window.contains(t) {
                    worst = worst.min(v);
                }
            }
            Ok(worst)
        }
    }
}

/// Largest value of `w . x` over sampled boundary points of `{field >= level}`.
pub fn max_along<T: Real>(field: &ScalarField<T>, level: T, w: &[T], sampler: &RaySampler<T>) -> Result<T> {
    let pts = sampler.boundary(field, level)?;
    Ok(pts.iter().map(|x| dot(w, x)).fold(T::neg_infinity(), T::max))
}
