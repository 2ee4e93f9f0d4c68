//! Differentiable scalar fields `R^n -> R` used for barrier functions, Lyapunov
//! functions and constraint functions.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, Real};

/// User-supplied field with an analytic gradient.
pub trait FieldFn<T>: Send + Sync {
    fn value(&self, x: &[T]) -> T;
    fn gradient(&self, x: &[T]) -> Vec<T>;
}

#[derive(Clone)]
enum Expr<T> {
    /// `x' Q x + c' x`
    Quadratic {
        q: Vec<Vec<T>>,
        c: Vec<T>,
    },
    /// `w' x`
    Affine {
        w: Vec<T>,
    },
    /// `bound - |x[index]|`
    AbsBound {
        index: usize,
        bound: T,
    },
    Custom(Arc<dyn FieldFn<T>>),
}

/// `x -> scale * expr(x) + offset`.
#[derive(Clone)]
pub struct ScalarField<T> {
    dim: usize,
    expr: Expr<T>,
    scale: T,
    offset: T,
    name: String,
}

impl<T: Real> fmt::Debug for ScalarField<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.expr {
            Expr::Quadratic { .. } => "quadratic",
            Expr::Affine { .. } => "affine",
            Expr::AbsBound { .. } => "abs_bound",
            Expr::Custom(_) => "custom",
        };
        f.debug_struct("ScalarField")
            .field("name", &self.name)
            .field("kind", &kind)
            .field("dim", &self.dim)
            .field("scale", &self.scale)
            .field("offset", &self.offset)
            .finish()
    }
}

impl<T: Real> ScalarField<T> {
    pub fn quadratic(q: Vec<Vec<T>>, c: Vec<T>, offset: T) -> Result<Self> {
        let dim = q.len();
        if dim == 0 || q.iter().any(|row| row.len() != dim) {
            return Err(Error::InvalidField("Q must be a non-empty square matrix".into()));
        }
        let c = if c.is_empty() { vec![T::zero(); dim] } else { c };
        if c.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: c.len(),
            });
        }
        Ok(Self {
            dim,
            expr: Expr::Quadratic { q, c },
            scale: T::one(),
            offset,
            name: "quadratic".into(),
        })
    }

    pub fn affine(w: Vec<T>, offset: T) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidField("affine weights must be non-empty".into()));
        }
        Ok(Self {
            dim: w.len(),
            expr: Expr::Affine { w },
            scale: T::one(),
            offset,
            name: "affine".into(),
        })
    }

    /// `x -> bound - |x[index]|`, the two-sided bound `|x[index]| <= bound` as a single field.
    pub fn abs_bound(dim: usize, index: usize, bound: T) -> Result<Self> {
        if index >= dim {
            return Err(Error::InvalidField(format!("index {index} out of range for dim {dim}")));
        }
        Ok(Self {
            dim,
            expr: Expr::AbsBound { index, bound },
            scale: T::one(),
            offset: T::zero(),
            name: format!("|x{}| <= {}", index + 1, bound),
        })
    }

    pub fn custom(dim: usize, name: impl Into<String>, f: impl FieldFn<T> + 'static) -> Self {
        Self {
            dim,
            expr: Expr::Custom(Arc::new(f)),
            scale: T::one(),
            offset: T::zero(),
            name: name.into(),
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn check_dim(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn raw_value(&self, x: &[T]) -> T {
        match &self.expr {
            Expr::Quadratic { q, c } => {
                let quad = q
                    .iter()
                    .zip(x)
                    .fold(T::zero(), |acc, (row, &xi)| acc + xi * dot(row, x));
                quad + dot(c, x)
            }
            Expr::Affine { w } => dot(w, x),
            Expr::AbsBound { index, bound } => *bound - x[*index].abs(),
            Expr::Custom(f) => f.value(x),
        }
    }

    pub fn value(&self, x: &[T]) -> T {
        debug_assert_eq!(x.len(), self.dim);
        self.scale * self.raw_value(x) + self.offset
    }

    pub fn gradient(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.dim);
        let mut g = match &self.expr {
            Expr::Quadratic { q, c } => (0..self.dim)
                .map(|i| {
                    let mut gi = c[i];
                    for j in 0..self.dim {
                        gi = gi + (q[i][j] + q[j][i]) * x[j];
                    }
                    gi
                })
                .collect(),
            Expr::Affine { w } => w.clone(),
            Expr::AbsBound { index, .. } => {
                let mut g = vec![T::zero(); self.dim];
                let xi = x[*index];
                g[*index] = if xi > T::zero() {
                    -T::one()
                } else if xi < T::zero() {
                    T::one()
                } else {
                    T::zero()
                };
                g
            }
            Expr::Custom(f) => f.gradient(x),
        };
        for gi in g.iter_mut() {
            *gi = *gi * self.scale;
        }
        g
    }

    /// `x -> self(x) + delta`.
    pub fn shifted(&self, delta: T) -> Self {
        let mut out = self.clone();
        out.offset = out.offset + delta;
        out
    }

    /// `x -> -self(x)`.
    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        out.scale = -out.scale;
        out.offset = -out.offset;
        out
    }

    pub fn to_spec(&self) -> Result<FieldSpec<T>> {
        let s = self.scale;
        // adding zero turns -0.0 into 0.0 so negated fields print cleanly
        let scaled = |v: &[T]| -> Vec<T> { v.iter().map(|&v| v * s + T::zero()).collect() };
        match &self.expr {
            Expr::Quadratic { q, c } => Ok(FieldSpec::Quadratic {
                q: q.iter().map(|row| scaled(row)).collect(),
                c: scaled(c),
                offset: self.offset + T::zero(),
            }),
            Expr::Affine { w } => Ok(FieldSpec::Affine {
                w: scaled(w),
                offset: self.offset + T::zero(),
            }),
            Expr::AbsBound { index, bound } => Ok(FieldSpec::AbsBound {
                dim: self.dim,
                index: *index,
                bound: *bound,
                scale: (s != T::one()).then_some(s),
                offset: (self.offset != T::zero()).then_some(self.offset),
            }),
            Expr::Custom(_) => Err(Error::Serialization(format!(
                "custom field `{}` has no descriptor",
                self.name
            ))),
        }
    }

    pub fn from_spec(spec: &FieldSpec<T>) -> Result<Self> {
        match spec {
            FieldSpec::Quadratic { q, c, offset } => Self::quadratic(q.clone(), c.clone(), *offset),
            FieldSpec::Affine { w, offset } => Self::affine(w.clone(), *offset),
            FieldSpec::AbsBound {
                dim,
                index,
                bound,
                scale,
                offset,
            } => {
                let mut f = Self::abs_bound(*dim, *index, *bound)?;
                f.scale = scale.unwrap_or(T::one());
                f.offset = offset.unwrap_or(T::zero());
                Ok(f)
            }
        }
    }
}

/// Serialized field descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldSpec<T> {
    /// `x' Q x + c' x + offset`
    Quadratic {
        #[serde(rename = "Q")]
        q: Vec<Vec<T>>,
        #[serde(default)]
        c: Vec<T>,
        #[serde(default)]
        offset: T,
    },
    Affine {
        w: Vec<T>,
        #[serde(default)]
        offset: T,
    },
    /// `scale * (bound - |x[index]|) + offset`
    AbsBound {
        dim: usize,
        index: usize,
        bound: T,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<T>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        offset: Option<T>,
    },
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn pendulum_v() -> ScalarField<f64> {
        ScalarField::quadratic(vec![vec![2.0, 1.0], vec![1.0, 1.0]], vec![], 0.0).unwrap()
    }

    fn fd_gradient(f: &ScalarField<f64>, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f.value(&p) - f.value(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn pendulum_value_at_initial_state() {
        let v = pendulum_v();
        assert!((v.value(&[1.3, -1.8]) - 1.94).abs() < 1e-12);
        assert_eq!(v.value(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn negate_and_shift() {
        let b = pendulum_v().negated().shifted(2.0);
        assert_eq!(b.value(&[0.0, 0.0]), 2.0);
        assert!((b.value(&[1.3, -1.8]) - 0.06).abs() < 1e-12);
        let spec = b.to_spec().unwrap();
        let back = ScalarField::from_spec(&spec).unwrap();
        assert!((back.value(&[0.3, 0.1]) - b.value(&[0.3, 0.1])).abs() < 1e-15);
    }

    #[test]
    fn descriptor_json_shape() {
        let json = serde_json::to_value(pendulum_v().to_spec().unwrap()).unwrap();
        assert_eq!(json["kind"], "quadratic");
        assert_eq!(json["Q"][0][1], 1.0);
        assert_eq!(json["offset"], 0.0);
    }

    #[test]
    fn abs_bound_field() {
        let h = ScalarField::<f64>::abs_bound(2, 0, 0.45).unwrap();
        assert!((h.value(&[-0.4, 3.0]) - 0.05).abs() < 1e-15);
        assert_eq!(h.gradient(&[-0.4, 3.0]), vec![1.0, 0.0]);
        assert!(ScalarField::<f64>::abs_bound(2, 2, 1.0).is_err());
    }

    #[test]
    fn custom_field_refuses_serialization() {
        struct Sq;
        impl FieldFn<f64> for Sq {
            fn value(&self, x: &[f64]) -> f64 {
                x[0] * x[0]
            }
            fn gradient(&self, x: &[f64]) -> Vec<f64> {
                vec![2.0 * x[0]]
            }
        }
        let f = ScalarField::custom(1, "sq", Sq).negated();
        assert_eq!(f.value(&[3.0]), -9.0);
        assert_eq!(f.gradient(&[3.0]), vec![-6.0]);
        assert!(f.to_spec().is_err());
    }

    proptest! {
        #[test]
        fn quadratic_gradient_matches_finite_differences(
            q in proptest::collection::vec(-3.0f64..3.0, 9),
            c in proptest::collection::vec(-3.0f64..3.0, 3),
            x in proptest::collection::vec(-2.0f64..2.0, 3),
            neg in any::<bool>(),
        ) {
            let qm = vec![q[0..3].to_vec(), q[3..6].to_vec(), q[6..9].to_vec()];
            let mut f = ScalarField::quadratic(qm, c, 0.5).unwrap();
            if neg {
                f = f.negated();
            }
            let g = f.gradient(&x);
            let fd = fd_gradient(&f, &x);
            for (a, b) in g.iter().zip(&fd) {
                prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
            }
        }
    }
}
