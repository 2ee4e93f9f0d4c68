//! Control Lyapunov functions and their conversion into shiftable barrier functions
//! `b = -V + b_c`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cbf::{lie_range, CertReport, CertifyOptions, LambdaShiftableCbf};
use crate::classk::{ExtendedKe, MonotoneFn, ScalarK};
use crate::dynamics::Dynamics;
use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::levelset::{ray_directions, RaySampler};
use crate::scalar::{linspace, Real};

/// Domain `D` on which the CLF inequality is claimed. Must contain the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region<T> {
    Box {
        lo: Vec<T>,
        hi: Vec<T>,
    },
    Ball {
        radius: T,
    },
    /// `{V <= level}`
    Sublevel {
        level: T,
    },
    Whole,
}

impl<T: Real> Region<T> {
    fn contains(&self, v: &ScalarField<T>, x: &[T]) -> bool {
        match self {
            Region::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(&xi, (&l, &h))| xi >= l && xi <= h),
            Region::Ball { radius } => x.iter().fold(T::zero(), |s, &xi| s + xi * xi) <= *radius * *radius,
            Region::Sublevel { level } => v.value(x) <= *level,
            Region::Whole => true,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Region::Box { lo, hi } => {
                if lo.len() != dim || hi.len() != dim {
                    return Err(Error::Dimension {
                        expected: dim,
                        got: lo.len().max(hi.len()),
                    });
                }
                if lo.iter().zip(hi).any(|(&l, &h)| !(l < T::zero() && h > T::zero())) {
                    return Err(Error::DegenerateDomain(0.0));
                }
            }
            Region::Ball { radius } | Region::Sublevel { level: radius } => {
                if !(*radius > T::zero()) {
                    return Err(Error::DegenerateDomain(radius.as_f64()));
                }
            }
            Region::Whole => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Clf<T: Real> {
    v: ScalarField<T>,
    gamma: ScalarK<T>,
    region: Region<T>,
}

const PD_SAMPLES: usize = 100;

impl<T: Real> Clf<T> {
    /// Checks `V(0) = 0` and `V > 0` at 100 seeded nonzero samples of the domain.
    pub fn new(v: ScalarField<T>, gamma: ScalarK<T>, region: Region<T>, seed: u64) -> Result<Self> {
        let n = v.dim();
        region.validate(n)?;
        let origin = vec![T::zero(); n];
        let v0 = v.value(&origin);
        if v0.abs() > T::lit(1e-12) {
            return Err(Error::NotPositiveDefinite {
                state: vec![0.0; n],
                value: v0.as_f64(),
            });
        }
        let (lo, hi): (Vec<T>, Vec<T>) = match &region {
            Region::Box { lo, hi } => (lo.clone(), hi.clone()),
            Region::Ball { radius } => (vec![-*radius; n], vec![*radius; n]),
            Region::Sublevel { .. } | Region::Whole => (vec![-T::one(); n], vec![T::one(); n]),
        };
        let mut rng = crate::levelset::rng(seed);
        let mut taken = 0;
        let mut tries = 0;
        while taken < PD_SAMPLES && tries < 100 * PD_SAMPLES {
            tries += 1;
            let x: Vec<T> = lo
                .iter()
                .zip(&hi)
                .map(|(&l, &h)| l + (h - l) * T::lit(rng.random::<f64>()))
                .collect();
            if x.iter().all(|xi| *xi == T::zero()) || !region.contains(&v, &x) {
                continue;
            }
            taken += 1;
            let val = v.value(&x);
            if !(val > T::zero()) {
                return Err(Error::NotPositiveDefinite {
                    state: x.iter().map(|xi| xi.as_f64()).collect(),
                    value: val.as_f64(),
                });
            }
        }
        Ok(Self { v, gamma, region })
    }

    pub fn v(&self) -> &ScalarField<T> {
        &self.v
    }

    pub fn gamma(&self) -> &ScalarK<T> {
        &self.gamma
    }

    pub fn region(&self) -> &Region<T> {
        &self.region
    }
}

/// Sampled check of `inf_u grad V . f(x, u) + gamma(V(x)) <= 0`. The report's
/// `worst_margin` is the largest value found; samples outside the domain are skipped.
pub fn certify_clf<T: Real>(
    clf: &Clf<T>,
    sys: &dyn Dynamics<T>,
    samples: &[Vec<T>],
    opts: &CertifyOptions<T>,
) -> Result<CertReport<T>> {
    if sys.dim_x() != clf.v.dim() {
        return Err(Error::Dimension {
            expected: clf.v.dim(),
            got: sys.dim_x(),
        });
    }
    let candidates = sys.input_candidates(opts.n_u_grid);
    let mut rep = CertReport {
        ok: true,
        worst_margin: T::neg_infinity(),
        worst_state: Vec::new(),
        worst_t: None,
        n_checked: 0,
        n_skipped: 0,
    };
    for x in samples {
        clf.v.check_dim(x)?;
        if !clf.region.contains(&clf.v, x) {
            rep.n_skipped += 1;
            continue;
        }
        let (inf, _) = lie_range(sys, &clf.v.gradient(x), x, &candidates);
        let m = inf + clf.gamma.eval(clf.v.value(x))?;
        rep.n_checked += 1;
        if m > rep.worst_margin {
            rep.worst_margin = m;
            rep.worst_state = x.clone();
        }
    }
    if rep.n_checked == 0 {
        return Err(Error::EmptySamples { skipped: rep.n_skipped });
    }
    rep.ok = rep.worst_margin <= opts.tolerance;
    Ok(rep)
}

/// Golden-section minimization of a unimodal-ish function on `[a, b]`.
fn golden<T: Real>(f: impl Fn(T) -> T, mut a: T, mut b: T) -> (T, T) {
    let r = T::lit(0.618_033_988_749_894_9);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= T::epsilon() * (T::one() + a.abs() + b.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let x = (a + b) / T::lit(2.0);
    (x, f(x))
}

/// Largest `Lambda` with `{V <= Lambda}` inside the domain: the minimum of `V` over the
/// domain boundary, estimated from boundary samples, refined by golden-section search
/// around the best sample, then shrunk by bisection until a ray check of the sublevel set
/// stays inside the domain. Returns `+inf` for the whole space.
pub fn lambda_max<T: Real>(clf: &Clf<T>, n_boundary_samples: usize, seed: u64) -> Result<T> {
    let v = &clf.v;
    let n = v.dim();
    let n_samples = n_boundary_samples.max(8);
    let estimate = match &clf.region {
        Region::Whole => return Ok(T::infinity()),
        Region::Sublevel { level } => return Ok(*level),
        Region::Box { lo, hi } => {
            let faces = 2 * n;
            let per_axis = if n == 1 {
                1
            } else {
                ((n_samples as f64 / faces as f64).powf(1.0 / (n - 1) as f64).ceil() as usize).max(2)
            };
            let mut best = (T::infinity(), Vec::new());
            for axis in 0..n {
                for &fixed in &[lo[axis], hi[axis]] {
                    let free: Vec<usize> = (0..n).filter(|&i| i != axis).collect();
                    let axes: Vec<Vec<T>> = free.iter().map(|&i| linspace(lo[i], hi[i], per_axis)).collect();
                    let mut idx = vec![0usize; free.len()];
                    loop {
                        let mut x = vec![fixed; n];
                        for (k, &i) in free.iter().enumerate() {
                            x[i] = axes[k][idx[k]];
                        }
                        let val = v.value(&x);
                        if val < best.0 {
                            best = (val, x);
                        }
                        // odometer over the face grid
                        let mut k = 0;
                        while k < idx.len() {
                            idx[k] += 1;
                            if idx[k] < per_axis {
                                break;
                            }
                            idx[k] = 0;
                            k += 1;
                        }
                        if k == idx.len() {
                            break;
                        }
                    }
                }
            }
            // coordinate-wise refinement on the face of the best sample
            let mut x = best.1;
            let mut val = best.0;
            for _ in 0..8 {
                for i in 0..n {
                    if x[i] == lo[i] || x[i] == hi[i] {
                        continue;
                    }
                    let (xi, fi) = golden(
                        |s| {
                            let mut y = x.clone();
                            y[i] = s;
                            v.value(&y)
                        },
                        lo[i],
                        hi[i],
                    );
                    if fi < val {
                        val = fi;
                        x[i] = xi;
                    }
                }
            }
            val
        }
        Region::Ball { radius } => {
            let dirs: Vec<Vec<T>> = ray_directions(n, n_samples, seed);
            let on = |d: &[T]| -> Vec<T> { d.iter().map(|&di| di * *radius).collect() };
            let mut best = dirs.iter().map(|d| v.value(&on(d))).fold(T::infinity(), T::min);
            if n == 2 {
                let step = T::TAU() / T::from_usize(n_samples).unwrap();
                let i = dirs
                    .iter()
                    .enumerate()
                    .min_by(|a, b| v.value(&on(a.1)).partial_cmp(&v.value(&on(b.1))).unwrap())
                    .unwrap()
                    .0;
                let th = step * T::from_usize(i).unwrap();
                let (_, f) = golden(
                    |s| v.value(&[*radius * s.cos(), *radius * s.sin()]),
                    th - step,
                    th + step,
                );
                best = best.min(f);
            } else if n == 1 {
                best = v.value(&[*radius]).min(v.value(&[-*radius]));
            }
            best
        }
    };
    if !(estimate > T::zero()) {
        return Err(Error::DegenerateDomain(estimate.as_f64()));
    }
    // ray check: the sampled boundary of {V <= L} must stay inside the domain
    let sampler = RaySampler::new(vec![T::zero(); n], n_samples, seed);
    let neg = v.negated();
    let inside = |l: T| -> Result<bool> {
        let pts = sampler.boundary(&neg, -l)?;
        Ok(pts.iter().all(|x| clf.region.contains(v, x)))
    };
    let mut level = estimate;
    if !inside(level)? {
        let (mut lo, mut hi) = (T::zero(), level);
        while hi - lo > T::lit(1e-9) * level {
            let mid = (lo + hi) / T::lit(2.0);
            if inside(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        level = lo;
    }
    if !(level > T::zero()) {
        return Err(Error::DegenerateDomain(level.as_f64()));
    }
    Ok(level)
}

/// `b = -V + b_c` with `alpha = odd_reflect(gamma)` and `Lambda = Lambda_max - b_c`.
/// When `lambda_max` is infinite the budget must be chosen by the caller.
pub fn clf_to_cbf<T: Real>(
    clf: &Clf<T>,
    b_c: T,
    lambda_max: T,
    budget_if_unbounded: Option<T>,
) -> Result<LambdaShiftableCbf<T>> {
    if !(b_c >= T::zero() && b_c < lambda_max) {
        return Err(Error::Range {
            what: "b_c",
            value: b_c.as_f64(),
            lo: 0.0,
            hi: lambda_max.as_f64(),
        });
    }
    let budget = if lambda_max.is_finite() {
        lambda_max - b_c
    } else {
        budget_if_unbounded.ok_or_else(|| Error::Precondition("unbounded domain: choose a finite Lambda".into()))?
    };
    let b = clf.v.negated().shifted(b_c).with_name("b");
    let alpha = ExtendedKe::odd_reflect(&clf.gamma).with_name("alpha");
    let (_, hi) = alpha.domain();
    if hi < budget {
        return Err(Error::OutOfDomain {
            name: clf.gamma.name().to_string(),
            x: budget.as_f64(),
            lo: 0.0,
            hi: hi.as_f64(),
        });
    }
    LambdaShiftableCbf::new(b, budget, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbf::certify_shiftable;
    use crate::dynamics::{ControlAffineSystem, InputBox, PendulumParams};
    use crate::scalar::box_grid;

    fn pendulum_v() -> ScalarField<f64> {
        ScalarField::quadratic(vec![vec![2.0, 1.0], vec![1.0, 1.0]], vec![], 0.0).unwrap()
    }

    fn gamma_sim() -> ScalarK<f64> {
        ScalarK::piecewise_affine(&[0.0, 0.03], &[1.0, 2.0], f64::INFINITY).unwrap()
    }

    fn pendulum(bound: f64) -> ControlAffineSystem<f64> {
        ControlAffineSystem::pendulum(PendulumParams::default(), InputBox::symmetric(bound, 1).unwrap()).unwrap()
    }

    #[test]
    fn rejects_indefinite_v() {
        let v = ScalarField::quadratic(vec![vec![1.0, 0.0], vec![0.0, -1.0]], vec![], 0.0).unwrap();
        let r = Clf::new(v, gamma_sim(), Region::Whole, 1);
        assert!(matches!(r, Err(Error::NotPositiveDefinite { .. })));
        let shifted = pendulum_v().shifted(0.1);
        assert!(Clf::new(shifted, gamma_sim(), Region::Whole, 1).is_err());
    }

    #[test]
    fn pendulum_certificate_and_origin() {
        let clf = Clf::new(pendulum_v(), gamma_sim(), Region::Sublevel { level: 2.0 }, 1).unwrap();
        let xs = box_grid(&[-1.6, -1.6], &[1.6, 1.6], &[81, 81]);
        let rep = certify_clf(&clf, &pendulum(20.0), &xs, &CertifyOptions::default()).unwrap();
        assert!(rep.ok, "{rep:?}");
        let at0 = certify_clf(&clf, &pendulum(20.0), &[vec![0.0, 0.0]], &CertifyOptions::default()).unwrap();
        assert_eq!(at0.worst_margin, 0.0);
        let rep = certify_clf(&clf, &pendulum(0.0), &xs, &CertifyOptions::default()).unwrap();
        assert!(!rep.ok);
    }

    #[test]
    fn lambda_max_one_dimensional() {
        let v = ScalarField::<f64>::quadratic(vec![vec![1.0]], vec![], 0.0).unwrap();
        let g = ScalarK::linear(1.0).unwrap();
        let clf = Clf::new(
            v,
            g,
            Region::Box {
                lo: vec![-1.0],
                hi: vec![1.0],
            },
            1,
        )
        .unwrap();
        assert!((lambda_max(&clf, 16, 0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_max_pendulum_box() {
        let clf = Clf::new(
            pendulum_v(),
            gamma_sim(),
            Region::Box {
                lo: vec![-1.5; 2],
                hi: vec![1.5; 2],
            },
            1,
        )
        .unwrap();
        let l = lambda_max(&clf, 400, 0).unwrap();
        assert!((l - 1.125).abs() < 1e-6, "{l}");
    }

    #[test]
    fn lambda_max_ball_and_whole() {
        let v = ScalarField::quadratic(vec![vec![1.0, 0.0], vec![0.0, 4.0]], vec![], 0.0).unwrap();
        let clf = Clf::new(v.clone(), gamma_sim(), Region::Ball { radius: 2.0 }, 1).unwrap();
        assert!((lambda_max(&clf, 360, 0).unwrap() - 4.0).abs() < 1e-6);
        let whole = Clf::new(v, gamma_sim(), Region::Whole, 1).unwrap();
        assert_eq!(lambda_max(&whole, 10, 0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn conversion_and_round_trip() {
        let clf = Clf::new(pendulum_v(), gamma_sim(), Region::Sublevel { level: 2.0 }, 1).unwrap();
        let cbf = clf_to_cbf(&clf, 0.0, 2.0, None).unwrap();
        assert_eq!(cbf.budget(), 2.0);
        assert!((cbf.value(&[1.3, -1.8]) + 1.94).abs() < 1e-12);
        assert_eq!(cbf.value(&[0.0, 0.0]), 0.0);
        assert_eq!(cbf.alpha().eval(-1.0).unwrap(), -gamma_sim().eval(1.0).unwrap());
        for x in box_grid(&[-2.0, -2.0], &[2.0, 2.0], &[9, 9]) {
            assert_eq!(cbf.value(&x) + clf.v().value(&x), 0.0);
        }
        let xs = box_grid(&[-1.6, -1.6], &[1.6, 1.6], &[61, 61]);
        let sys = pendulum(20.0);
        assert!(certify_clf(&clf, &sys, &xs, &CertifyOptions::default()).unwrap().ok);
        assert!(
            certify_shiftable(&cbf, &sys, &xs, &CertifyOptions::default())
                .unwrap()
                .ok
        );
        assert!(matches!(clf_to_cbf(&clf, 2.0, 2.0, None), Err(Error::Range { .. })));
        let shifted = clf_to_cbf(&clf, 0.5, 2.0, None).unwrap();
        assert_eq!(shifted.budget(), 1.5);
        assert!(clf_to_cbf(&clf, 0.0, f64::INFINITY, None).is_err());
        assert_eq!(clf_to_cbf(&clf, 0.0, f64::INFINITY, Some(3.0)).unwrap().budget(), 3.0);
    }
}
