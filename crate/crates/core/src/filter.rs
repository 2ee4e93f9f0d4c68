//! Minimum-norm safety filter.

use serde::Serialize;

use crate::cbf::TimeVaryingCbf;
use crate::classk::MonotoneFn;
use crate::dynamics::{Dynamics, InputBox};
use crate::error::{Error, Result};
use crate::scalar::{dot, Real};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterOutput<T> {
    pub u: Vec<T>,
    /// False when the minimum-norm input of the box already satisfies the constraint.
    pub active: bool,
}

const DUAL_ITERS: usize = 200;

fn dual_point<T: Real>(a: &[T], mu: T, bx: &InputBox<T>) -> Vec<T> {
    let half = mu / T::lit(2.0);
    let raw: Vec<T> = a.iter().map(|&ai| half * ai).collect();
    bx.clamp(&raw)
}

/// `argmin ||u||` subject to `a . u >= c` and `u` in `bx`.
///
/// One input: closed form on the feasible interval. Several inputs: bisection on the
/// multiplier `mu` of `u(mu) = clamp(mu a / 2)`, along which `a . u(mu)` is non-decreasing.
pub fn min_norm_box_halfspace<T: Real>(a: &[T], c: T, bx: &InputBox<T>) -> Result<FilterOutput<T>> {
    if a.len() != bx.dim() {
        return Err(Error::Dimension {
            expected: bx.dim(),
            got: a.len(),
        });
    }
    let zeros = vec![T::zero(); a.len()];
    let u0 = bx.clamp(&zeros);
    if dot(a, &u0) >= c {
        return Ok(FilterOutput { u: u0, active: false });
    }
    let best: Vec<T> = a
        .iter()
        .zip(bx.lo.iter().zip(&bx.hi))
        .zip(&u0)
        .map(|((&ai, (&l, &h)), &z)| {
            if ai > T::zero() {
                h
            } else if ai < T::zero() {
                l
            } else {
                z
            }
        })
        .collect();
    let reach = dot(a, &best);
    if reach < c {
        return Err(Error::Infeasible {
            deficit: (c - reach).as_f64(),
            best_u: best.iter().map(|v| v.as_f64()).collect(),
        });
    }

    if a.len() == 1 {
        let (l, h) = if a[0] > T::zero() {
            ((c / a[0]).max(bx.lo[0]), bx.hi[0])
        } else {
            (bx.lo[0], (c / a[0]).min(bx.hi[0]))
        };
        let mut u = T::zero().max(l).min(h);
        if a[0] * u < c {
            // c / a rounded to the wrong side
            u = if a[0] > T::zero() {
                (u + u.abs() * T::epsilon()).min(bx.hi[0])
            } else {
                (u - u.abs() * T::epsilon()).max(bx.lo[0])
            };
            if a[0] * u < c {
                u = best[0];
            }
        }
        return Ok(FilterOutput {
            u: vec![u],
            active: true,
        });
    }

    let mut lo = T::zero();
    let mut hi = T::one();
    let mut grow = 0;
    while dot(a, &dual_point(a, hi, bx)) < c {
        lo = hi;
        hi = hi + hi;
        grow += 1;
        if grow > 2000 || !hi.is_finite() {
            return Ok(FilterOutput { u: best, active: true });
        }
    }
    let tol = T::lit(1e-10);
    for _ in 0..DUAL_ITERS {
        let mid = (lo + hi) / T::lit(2.0);
        if mid <= lo || mid >= hi {
            break;
        }
        let u = dual_point(a, mid, bx);
        let s = dot(a, &u);
        if s >= c {
            hi = mid;
            if s - c <= tol {
                break;
            }
        } else {
            lo = mid;
        }
    }
    Ok(FilterOutput {
        u: dual_point(a, hi, bx),
        active: true,
    })
}

/// The filter constraint `a . u >= c` at `(t, x)`:
/// `a = grad b(x)' g(x)`, `c = -beta(B(t, x)) - lambda'(t) - grad b(x) . f0(x)`.
pub fn filter_constraint<T: Real>(tv: &TimeVaryingCbf<T>, sys: &dyn Dynamics<T>, t: T, x: &[T]) -> Result<(Vec<T>, T)> {
    let parts = sys
        .affine_parts(x)
        .ok_or_else(|| Error::Precondition("the safety filter needs control-affine dynamics".into()))?;
    let (lam_dot, grad) = tv.gradient_tx(t, x)?;
    let b = tv.eval_b(t, x)?;
    let a: Vec<T> = (0..sys.dim_u())
        .map(|j| {
            grad.iter()
                .zip(&parts.input_matrix)
                .fold(T::zero(), |s, (&gi, row)| s + gi * row[j])
        })
        .collect();
    let c = -tv.beta().eval(b)? - lam_dot - dot(&grad, &parts.drift);
    Ok((a, c))
}

pub fn min_norm_filter<T: Real>(
    tv: &TimeVaryingCbf<T>,
    sys: &dyn Dynamics<T>,
    t: T,
    x: &[T],
) -> Result<FilterOutput<T>> {
    let (a, c) = filter_constraint(tv, sys, t, x)?;
    min_norm_box_halfspace(&a, c, sys.input_box())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(lo: &[f64], hi: &[f64]) -> InputBox<f64> {
        InputBox::new(lo.to_vec(), hi.to_vec()).unwrap()
    }

    #[test]
    fn inactive_when_zero_is_feasible() {
        let out = min_norm_box_halfspace(&[2.0], -1.0, &bx(&[-20.0], &[20.0])).unwrap();
        assert_eq!(
            out,
            FilterOutput {
                u: vec![0.0],
                active: false
            }
        );
    }

    #[test]
    fn scalar_closed_form() {
        let out = min_norm_box_halfspace(&[2.0], 3.0, &bx(&[-20.0], &[20.0])).unwrap();
        assert_eq!(out.u, vec![1.5]);
        assert!(out.active);
        let out = min_norm_box_halfspace(&[-4.0], 2.0, &bx(&[-20.0], &[20.0])).unwrap();
        assert_eq!(out.u, vec![-0.5]);
    }

    #[test]
    fn scalar_infeasible_reports_deficit() {
        match min_norm_box_halfspace(&[1.0], 30.0, &bx(&[-20.0], &[20.0])) {
            Err(Error::Infeasible { deficit, best_u }) => {
                assert!((deficit - 10.0).abs() < 1e-12);
                assert_eq!(best_u, vec![20.0]);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            min_norm_box_halfspace(&[0.0], 1e-3, &bx(&[-20.0], &[20.0])),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn box_without_origin() {
        let out = min_norm_box_halfspace(&[1.0], -10.0, &bx(&[1.0], &[2.0])).unwrap();
        assert_eq!(out.u, vec![1.0]);
        assert!(!out.active);
    }

    #[test]
    fn vector_projection_unsaturated() {
        let out = min_norm_box_halfspace(&[1.0, 1.0], 2.0, &bx(&[-5.0, -5.0], &[5.0, 5.0])).unwrap();
        assert!((out.u[0] - 1.0).abs() < 1e-9 && (out.u[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn vector_with_saturated_axis() {
        // unconstrained optimum (2, 2) clips the first axis at 0.5; the rest goes to axis 2
        let out = min_norm_box_halfspace(&[1.0, 1.0], 4.0, &bx(&[-0.5, -5.0], &[0.5, 5.0])).unwrap();
        assert_eq!(out.u[0], 0.5);
        assert!((out.u[1] - 3.5).abs() < 1e-9);
        assert!(out.u[0] + out.u[1] >= 4.0);
    }

    proptest! {
        #[test]
        fn output_feasible_and_in_box(
            a in proptest::collection::vec(-3.0f64..3.0, 3),
            c in -5.0f64..5.0,
        ) {
            let b = bx(&[-1.0, -2.0, -0.5], &[1.0, 2.0, 0.5]);
            if let Ok(out) = min_norm_box_halfspace(&a, c, &b) {
                prop_assert!(b.contains(&out.u));
                prop_assert!(dot(&a, &out.u) >= c - 1e-9);
                // no box point on the feasible side of the hyperplane is shorter
                for v in b.grid(9) {
                    if dot(&a, &v) >= c {
                        let nv: f64 = v.iter().map(|x| x * x).sum();
                        let nu: f64 = out.u.iter().map(|x| x * x).sum();
                        prop_assert!(nu <= nv + 1e-7);
                    }
                }
            } else {
                let best: f64 = a.iter().zip([1.0, 2.0, 0.5]).map(|(ai, h)| ai.abs() * h).sum();
                prop_assert!(best < c);
            }
        }
    }
}
