//! Dynamics `x' = f(x, u)` with box-constrained inputs.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{linspace, Real};

/// Axis-aligned input set `U = [lo_1, hi_1] x ... x [lo_m, hi_m]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox<T> {
    pub lo: Vec<T>,
    pub hi: Vec<T>,
}

impl<T: Real> InputBox<T> {
    /// Degenerate axes (`lo == hi`) are allowed; they pin that input.
    pub fn new(lo: Vec<T>, hi: Vec<T>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Dimension {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo
            .iter()
            .zip(&hi)
            .any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite())
        {
            return Err(Error::Precondition("input box needs finite lo <= hi per axis".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn symmetric(bound: T, dim: usize) -> Result<Self> {
        Self::new(vec![-bound; dim], vec![bound; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn clamp(&self, u: &[T]) -> Vec<T> {
        u.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&v, (&l, &h))| v.max(l).min(h))
            .collect()
    }

    pub fn contains(&self, u: &[T]) -> bool {
        u.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&l, &h))| v >= l && v <= h)
    }

    /// All `2^m` vertices (duplicates collapse on degenerate axes).
    pub fn vertices(&self) -> Vec<Vec<T>> {
        let axes: Vec<Vec<T>> = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| if l == h { vec![l] } else { vec![l, h] })
            .collect();
        cartesian(&axes)
    }

    /// Uniform grid with `n` points per axis including the bounds.
    pub fn grid(&self, n: usize) -> Vec<Vec<T>> {
        let n = n.max(2);
        let axes: Vec<Vec<T>> = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| if l == h { vec![l] } else { linspace(l, h, n) })
            .collect();
        cartesian(&axes)
    }
}

fn cartesian<T: Copy>(axes: &[Vec<T>]) -> Vec<Vec<T>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    out
}

/// Drift and input matrix of a control-affine system at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParts<T> {
    pub drift: Vec<T>,
    /// `dim_x` rows of `dim_u` entries.
    pub input_matrix: Vec<Vec<T>>,
}

pub trait Dynamics<T: Real>: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_u(&self) -> usize;
    fn input_box(&self) -> &InputBox<T>;
    fn f(&self, x: &[T], u: &[T]) -> Vec<T>;

    /// `Some` when the dynamics are `f0(x) + g(x) u`.
    fn affine_parts(&self, _x: &[T]) -> Option<AffineParts<T>> {
        None
    }

    fn is_control_affine(&self) -> bool {
        false
    }

    /// Inputs over which a supremum of a linear-in-`f` objective is evaluated:
    /// box vertices for control-affine dynamics (exact), a uniform grid otherwise.
    fn input_candidates(&self, n_u_grid: usize) -> Vec<Vec<T>> {
        if self.is_control_affine() {
            self.input_box().vertices()
        } else {
            self.input_box().grid(n_u_grid)
        }
    }
}

type DriftFn<T> = Arc<dyn Fn(&[T]) -> Vec<T> + Send + Sync>;
type InputFn<T> = Arc<dyn Fn(&[T]) -> Vec<Vec<T>> + Send + Sync>;
type GeneralFn<T> = Arc<dyn Fn(&[T], &[T]) -> Vec<T> + Send + Sync>;

/// `x' = f0(x) + g(x) u`, `u` in a box.
#[derive(Clone)]
pub struct ControlAffineSystem<T> {
    name: String,
    dim_x: usize,
    dim_u: usize,
    drift: DriftFn<T>,
    input: InputFn<T>,
    u_box: InputBox<T>,
}

impl<T: Real> fmt::Debug for ControlAffineSystem<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineSystem")
            .field("name", &self.name)
            .field("dim_x", &self.dim_x)
            .field("dim_u", &self.dim_u)
            .field("u_box", &self.u_box)
            .finish()
    }
}

impl<T: Real> ControlAffineSystem<T> {
    pub fn new(
        name: impl Into<String>,
        dim_x: usize,
        drift: impl Fn(&[T]) -> Vec<T> + Send + Sync + 'static,
        input: impl Fn(&[T]) -> Vec<Vec<T>> + Send + Sync + 'static,
        u_box: InputBox<T>,
    ) -> Self {
        Self {
            name: name.into(),
            dim_x,
            dim_u: u_box.dim(),
            drift: Arc::new(drift),
            input: Arc::new(input),
            u_box,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Pendulum with destabilizing momentum:
    /// `x1' = x2`, `x2' = -(g/l) sin(x1) + d_m x2 + u`.
    pub fn pendulum(params: PendulumParams<T>, u_box: InputBox<T>) -> Result<Self> {
        if !(params.length > T::zero()) {
            return Err(Error::Precondition("pendulum length must be positive".into()));
        }
        if u_box.dim() != 1 {
            return Err(Error::Dimension {
                expected: 1,
                got: u_box.dim(),
            });
        }
        let w = params.gravity / params.length;
        let d = params.momentum_slope;
        Ok(Self::new(
            "pendulum",
            2,
            move |x: &[T]| vec![x[1], -w * x[0].sin() + d * x[1]],
            |_: &[T]| vec![vec![T::zero()], vec![T::one()]],
            u_box,
        ))
    }

    /// `x' = A x + B u`.
    pub fn linear(a: Vec<Vec<T>>, b: Vec<Vec<T>>, u_box: InputBox<T>) -> Result<Self> {
        let n = a.len();
        if n == 0 || a.iter().any(|r| r.len() != n) {
            return Err(Error::Precondition("A must be square".into()));
        }
        if b.len() != n || b.iter().any(|r| r.len() != u_box.dim()) {
            return Err(Error::Dimension {
                expected: n,
                got: b.len(),
            });
        }
        Ok(Self::new(
            "linear",
            n,
            move |x: &[T]| {
                a.iter()
                    .map(|row| row.iter().zip(x).fold(T::zero(), |s, (&aij, &xj)| s + aij * xj))
                    .collect()
            },
            move |_: &[T]| b.clone(),
            u_box,
        ))
    }
}

impl<T: Real> Dynamics<T> for ControlAffineSystem<T> {
    fn dim_x(&self) -> usize {
        self.dim_x
    }

    fn dim_u(&self) -> usize {
        self.dim_u
    }

    fn input_box(&self) -> &InputBox<T> {
        &self.u_box
    }

    fn f(&self, x: &[T], u: &[T]) -> Vec<T> {
        let mut dx = (self.drift)(x);
        let g = (self.input)(x);
        for (dxi, row) in dx.iter_mut().zip(&g) {
            *dxi = row.iter().zip(u).fold(*dxi, |s, (&gij, &uj)| s + gij * uj);
        }
        dx
    }

    fn affine_parts(&self, x: &[T]) -> Option<AffineParts<T>> {
        Some(AffineParts {
            drift: (self.drift)(x),
            input_matrix: (self.input)(x),
        })
    }

    fn is_control_affine(&self) -> bool {
        true
    }
}

/// Dynamics without control-affine structure; supported for simulation and
/// grid-based certification.
#[derive(Clone)]
pub struct GeneralSystem<T> {
    dim_x: usize,
    f: GeneralFn<T>,
    u_box: InputBox<T>,
}

impl<T: Real> GeneralSystem<T> {
    pub fn new(dim_x: usize, f: impl Fn(&[T], &[T]) -> Vec<T> + Send + Sync + 'static, u_box: InputBox<T>) -> Self {
        Self {
            dim_x,
            f: Arc::new(f),
            u_box,
        }
    }
}

impl<T: Real> Dynamics<T> for GeneralSystem<T> {
    fn dim_x(&self) -> usize {
        self.dim_x
    }

    fn dim_u(&self) -> usize {
        self.u_box.dim()
    }

    fn input_box(&self) -> &InputBox<T> {
        &self.u_box
    }

    fn f(&self, x: &[T], u: &[T]) -> Vec<T> {
        (self.f)(x, u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams<T> {
    pub gravity: T,
    pub length: T,
    /// Slope of the destabilizing momentum `d_m(x2) = momentum_slope * x2`.
    pub momentum_slope: T,
}

impl<T: Real> PendulumParams<T> {
    /// Gravity and length with the default momentum slope `5 l`.
    pub fn new(gravity: T, length: T) -> Self {
        Self {
            gravity,
            length,
            momentum_slope: T::lit(5.0) * length,
        }
    }
}

impl<T: Real> Default for PendulumParams<T> {
    fn default() -> Self {
        Self::new(T::lit(9.81), T::one())
    }
}
