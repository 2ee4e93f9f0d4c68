//! Class-K and extended class-K_e scalar functions.
//!
//! Functions are stored either as continuous piecewise-affine maps or as
//! linearly interpolated monotone tables. Both representations are closed
//! under the operations used by the time-varying construction: restriction,
//! odd reflection and the `beta` envelope.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{linspace, Real};

/// Curvature tag carried by a class-K function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Linear,
    Convex,
    Concave,
    General,
}

impl Shape {
    /// Whether the tag admits the envelope construction (linear, convex or concave).
    pub fn is_regular(self) -> bool {
        !matches!(self, Shape::General)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Repr<T> {
    /// Piece `i` is `slopes[i] * x + intercepts[i]` on `[starts[i], starts[i + 1])`.
    Affine {
        starts: Vec<T>,
        slopes: Vec<T>,
        intercepts: Vec<T>,
    },
    Table {
        xs: Vec<T>,
        ys: Vec<T>,
    },
}

/// Strictly increasing continuous function on `[lo, hi]` with `f(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
struct Monotone<T> {
    repr: Repr<T>,
    lo: T,
    hi: T,
    shape: Shape,
}

fn interp<T: Real>(xs: &[T], ys: &[T], x: T) -> T {
    let i = xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1);
    let (x0, x1, y0, y1) = (xs[i - 1], xs[i], ys[i - 1], ys[i]);
    if x == x1 {
        return y1;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

impl<T: Real> Monotone<T> {
    fn affine(breaks: &[T], slopes: &[T], hi: T) -> Result<Self> {
        if breaks.is_empty() || breaks.len() != slopes.len() {
            return Err(Error::InvalidFunction(format!(
                "need matching non-empty breaks/slopes, got {} and {}",
                breaks.len(),
                slopes.len()
            )));
        }
        if breaks.iter().skip(1).any(|b| !b.is_finite()) || breaks[0].is_nan() || breaks[0] == T::infinity() {
            return Err(Error::InvalidFunction("breakpoints must be finite".into()));
        }
        if breaks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidFunction("breakpoints must be strictly increasing".into()));
        }
        if slopes.iter().any(|&k| !(k > T::zero()) || !k.is_finite()) {
            return Err(Error::InvalidFunction("slopes must be positive and finite".into()));
        }
        let lo = breaks[0];
        let last = *breaks.last().unwrap();
        if hi.is_nan() || hi <= last {
            return Err(Error::InvalidFunction(
                "domain end must exceed the last breakpoint".into(),
            ));
        }
        if !(lo <= T::zero() && T::zero() <= hi) {
            return Err(Error::InvalidFunction("domain must contain 0".into()));
        }

        // Anchor the piece containing 0 at the origin and propagate continuity outward.
        let n = breaks.len();
        let j = breaks.partition_point(|&b| b <= T::zero()) - 1;
        let mut intercepts = vec![T::zero(); n];
        for i in j + 1..n {
            let y = slopes[i - 1] * breaks[i] + intercepts[i - 1];
            intercepts[i] = y - slopes[i] * breaks[i];
        }
        for i in (0..j).rev() {
            let y = slopes[i + 1] * breaks[i + 1] + intercepts[i + 1];
            intercepts[i] = y - slopes[i] * breaks[i + 1];
        }
        let mut m = Monotone {
            repr: Repr::Affine {
                starts: breaks.to_vec(),
                slopes: slopes.to_vec(),
                intercepts,
            },
            lo,
            hi,
            shape: Shape::General,
        };
        m.shape = m.infer_shape();
        Ok(m)
    }

    fn table(xs: &[T], ys: &[T]) -> Result<Self> {
        if xs.len() < 2 || xs.len() != ys.len() {
            return Err(Error::InvalidFunction(
                "table needs at least two matching points".into(),
            ));
        }
        if xs.iter().chain(ys).any(|v| !v.is_finite()) {
            return Err(Error::InvalidFunction("table entries must be finite".into()));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidFunction(
                "table abscissae must be strictly increasing".into(),
            ));
        }
        if ys.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidFunction(
                "table values must be strictly increasing".into(),
            ));
        }
        let (lo, hi) = (xs[0], *xs.last().unwrap());
        if !(lo <= T::zero() && T::zero() <= hi) {
            return Err(Error::InvalidFunction("table domain must contain 0".into()));
        }
        let scale = ys.iter().fold(T::one(), |m, y| m.max(y.abs()));
        if interp(xs, ys, T::zero()).abs() > T::lit(1e-12) * scale {
            return Err(Error::InvalidFunction("table must vanish at 0".into()));
        }
        let mut m = Monotone {
            repr: Repr::Table {
                xs: xs.to_vec(),
                ys: ys.to_vec(),
            },
            lo,
            hi,
            shape: Shape::General,
        };
        m.shape = m.infer_shape();
        Ok(m)
    }

    fn contains(&self, x: T) -> bool {
        x >= self.lo && x <= self.hi
    }

    fn eval_unchecked(&self, x: T) -> T {
        match &self.repr {
            Repr::Affine {
                starts,
                slopes,
                intercepts,
            } => {
                let i = starts.partition_point(|&s| s <= x).max(1) - 1;
                slopes[i] * x + intercepts[i]
            }
            Repr::Table { xs, ys } => interp(xs, ys, x),
        }
    }

    /// Finite knots (piece starts, table nodes and finite domain ends).
    fn knots(&self) -> Vec<T> {
        let mut k: Vec<T> = match &self.repr {
            Repr::Affine { starts, .. } => starts.iter().copied().filter(|s| s.is_finite()).collect(),
            Repr::Table { xs, .. } => xs.clone(),
        };
        if self.hi.is_finite() {
            k.push(self.hi);
        }
        k.dedup();
        k
    }

    fn infer_shape(&self) -> Shape {
        let mut pts = self.knots();
        if pts.is_empty() {
            pts.push(T::zero());
        }
        let (first, last) = (pts[0], *pts.last().unwrap());
        if !self.lo.is_finite() {
            pts.insert(0, first - T::one());
        }
        if !self.hi.is_finite() {
            pts.push(last + T::one().max(last.abs()));
        }
        while pts.len() < 3 {
            let mid = (pts[0] + pts[1]) / T::lit(2.0);
            pts.insert(1, mid);
        }
        let vals: Vec<T> = pts.iter().map(|&p| self.eval_unchecked(p)).collect();
        let chords: Vec<T> = pts
            .windows(2)
            .zip(vals.windows(2))
            .map(|(p, v)| (v[1] - v[0]) / (p[1] - p[0]))
            .collect();
        let tol = |a: T, b: T| T::lit(1e-9) * T::one().max(a.abs()).max(b.abs());
        let convex = chords.windows(2).all(|c| c[1] >= c[0] - tol(c[0], c[1]));
        let concave = chords.windows(2).all(|c| c[1] <= c[0] + tol(c[0], c[1]));
        match (convex, concave) {
            (true, true) => Shape::Linear,
            (true, false) => Shape::Convex,
            (false, true) => Shape::Concave,
            (false, false) => Shape::General,
        }
    }

    fn with_shape(mut self, shape: Shape) -> Result<Self> {
        let inferred = self.infer_shape();
        let consistent = match shape {
            Shape::General => true,
            Shape::Linear => inferred == Shape::Linear,
            Shape::Convex => matches!(inferred, Shape::Linear | Shape::Convex),
            Shape::Concave => matches!(inferred, Shape::Linear | Shape::Concave),
        };
        if !consistent {
            return Err(Error::InvalidFunction(format!(
                "shape tag {shape:?} inconsistent with second differences ({inferred:?})"
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    fn restricted(&self, lo: T, hi: T) -> Result<Self> {
        if !(lo >= self.lo && hi <= self.hi && lo <= T::zero() && hi >= T::zero() && lo < hi) {
            return Err(Error::InvalidFunction(format!(
                "cannot restrict [{}, {}] to [{}, {}]",
                self.lo, self.hi, lo, hi
            )));
        }
        let repr = match &self.repr {
            Repr::Affine {
                starts,
                slopes,
                intercepts,
            } => {
                let keep: Vec<usize> = (0..starts.len())
                    .filter(|&i| {
                        let end = starts.get(i + 1).copied().unwrap_or(T::infinity());
                        end > lo && starts[i] < hi
                    })
                    .collect();
                let mut st: Vec<T> = keep.iter().map(|&i| starts[i]).collect();
                st[0] = lo;
                Repr::Affine {
                    starts: st,
                    slopes: keep.iter().map(|&i| slopes[i]).collect(),
                    intercepts: keep.iter().map(|&i| intercepts[i]).collect(),
                }
            }
            Repr::Table { xs, ys } => {
                let mut nx = vec![lo];
                nx.extend(xs.iter().copied().filter(|&x| x > lo && x < hi));
                nx.push(hi);
                let ny = nx.iter().map(|&x| interp(xs, ys, x)).collect();
                Repr::Table { xs: nx, ys: ny }
            }
        };
        let mut m = Monotone {
            repr,
            lo,
            hi,
            shape: self.shape,
        };
        if !self.shape.is_regular() {
            m.shape = m.infer_shape();
        }
        Ok(m)
    }

    fn to_spec(&self) -> FunctionSpec<T> {
        let domain_hi = self.hi.is_finite().then_some(self.hi);
        match &self.repr {
            Repr::Affine { starts, slopes, .. } if starts.len() == 1 && starts[0] == T::zero() => {
                FunctionSpec::Linear {
                    slope: slopes[0],
                    domain_hi,
                }
            }
            Repr::Affine { starts, slopes, .. } => FunctionSpec::PiecewiseAffine {
                breaks: starts.clone(),
                slopes: slopes.clone(),
                domain_hi,
                shape: Some(self.shape),
            },
            Repr::Table { xs, ys } => FunctionSpec::Table {
                xs: xs.clone(),
                ys: ys.clone(),
                shape: Some(self.shape),
            },
        }
    }
}

/// Common evaluation interface of [`ScalarK`] and [`ExtendedKe`].
pub trait MonotoneFn<T: Real> {
    fn eval(&self, x: T) -> Result<T>;
    fn domain(&self) -> (T, T);
    fn name(&self) -> &str;
    /// Finite knots where the function may change slope, sorted.
    fn breakpoints(&self) -> Vec<T>;
}

fn out_of_domain<T: Real>(name: &str, x: T, lo: T, hi: T) -> Error {
    Error::OutOfDomain {
        name: name.to_string(),
        x: x.as_f64(),
        lo: lo.as_f64(),
        hi: hi.as_f64(),
    }
}

/// Class-K function on `[0, hi]` (`hi` may be infinite).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarK<T> {
    f: Monotone<T>,
    name: String,
}

impl<T: Real> ScalarK<T> {
    pub fn linear(slope: T) -> Result<Self> {
        Self::piecewise_affine(&[T::zero()], &[slope], T::infinity())
    }

    /// Continuous piecewise-affine function: piece `i` has slope `slopes[i]` from `breaks[i]`.
    /// `breaks[0]` must be 0.
    pub fn piecewise_affine(breaks: &[T], slopes: &[T], hi: T) -> Result<Self> {
        if breaks.first() != Some(&T::zero()) {
            return Err(Error::InvalidFunction("class-K breakpoints must start at 0".into()));
        }
        Ok(Self {
            f: Monotone::affine(breaks, slopes, hi)?,
            name: "class_k".into(),
        })
    }

    pub fn table(xs: &[T], ys: &[T]) -> Result<Self> {
        if xs.first() != Some(&T::zero()) || ys.first() != Some(&T::zero()) {
            return Err(Error::InvalidFunction("class-K table must start at (0, 0)".into()));
        }
        Ok(Self {
            f: Monotone::table(xs, ys)?,
            name: "class_k".into(),
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Tags the curvature; fails if the tag contradicts the sampled second differences.
    pub fn with_shape(mut self, shape: Shape) -> Result<Self> {
        self.f = self.f.with_shape(shape)?;
        Ok(self)
    }

    pub fn shape(&self) -> Shape {
        self.f.shape
    }

    /// Same function on the smaller domain `[0, hi]`.
    pub fn restricted(&self, hi: T) -> Result<Self> {
        Ok(Self {
            f: self.f.restricted(T::zero(), hi)?,
            name: self.name.clone(),
        })
    }

    pub fn to_spec(&self) -> FunctionSpec<T> {
        self.f.to_spec()
    }

    pub fn from_spec(spec: &FunctionSpec<T>) -> Result<Self> {
        let f = match spec {
            FunctionSpec::Linear { slope, domain_hi } => {
                Self::piecewise_affine(&[T::zero()], &[*slope], domain_hi.unwrap_or(T::infinity()))?
            }
            FunctionSpec::PiecewiseAffine {
                breaks,
                slopes,
                domain_hi,
                shape,
            } => {
                let f = Self::piecewise_affine(breaks, slopes, domain_hi.unwrap_or(T::infinity()))?;
                match shape {
                    Some(s) => f.with_shape(*s)?,
                    None => f,
                }
            }
            FunctionSpec::Table { xs, ys, shape } => {
                let f = Self::table(xs, ys)?;
                match shape {
                    Some(s) => f.with_shape(*s)?,
                    None => f,
                }
            }
            FunctionSpec::OddReflect { .. } => {
                return Err(Error::InvalidFunction(
                    "odd reflection yields an extended class-K_e function".into(),
                ))
            }
        };
        Ok(f)
    }
}

impl<T: Real> MonotoneFn<T> for ScalarK<T> {
    fn eval(&self, x: T) -> Result<T> {
        if !self.f.contains(x) {
            return Err(out_of_domain(&self.name, x, self.f.lo, self.f.hi));
        }
        Ok(self.f.eval_unchecked(x))
    }

    fn domain(&self) -> (T, T) {
        (self.f.lo, self.f.hi)
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn breakpoints(&self) -> Vec<T> {
        self.f.knots()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum KeRepr<T> {
    Direct(Monotone<T>),
    Odd(ScalarK<T>),
}

/// Extended class-K_e function on an interval around 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedKe<T> {
    repr: KeRepr<T>,
    name: String,
}

impl<T: Real> ExtendedKe<T> {
    pub fn linear(slope: T) -> Result<Self> {
        Self::piecewise_affine(&[T::neg_infinity()], &[slope], T::infinity())
    }

    /// Piecewise-affine function on `[breaks[0], hi]` normalized so that `f(0) = 0`.
    /// `breaks[0]` may be `-inf`.
    pub fn piecewise_affine(breaks: &[T], slopes: &[T], hi: T) -> Result<Self> {
        Ok(Self {
            repr: KeRepr::Direct(Monotone::affine(breaks, slopes, hi)?),
            name: "class_ke".into(),
        })
    }

    pub fn table(xs: &[T], ys: &[T]) -> Result<Self> {
        Ok(Self {
            repr: KeRepr::Direct(Monotone::table(xs, ys)?),
            name: "class_ke".into(),
        })
    }

    /// `x -> gamma(x)` for `x >= 0` and `-gamma(-x)` for `x < 0`; odd by construction.
    pub fn odd_reflect(gamma: &ScalarK<T>) -> Self {
        Self {
            repr: KeRepr::Odd(gamma.clone()),
            name: format!("odd({})", gamma.name()),
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// The class-K function this one reflects, if built by [`odd_reflect`](Self::odd_reflect).
    pub fn odd_of(&self) -> Option<&ScalarK<T>> {
        match &self.repr {
            KeRepr::Odd(g) => Some(g),
            KeRepr::Direct(_) => None,
        }
    }

    pub fn shape(&self) -> Shape {
        match &self.repr {
            KeRepr::Direct(m) => m.shape,
            KeRepr::Odd(g) if g.shape() == Shape::Linear => Shape::Linear,
            KeRepr::Odd(_) => Shape::General,
        }
    }

    pub fn to_spec(&self) -> FunctionSpec<T> {
        match &self.repr {
            KeRepr::Direct(m) => match &m.repr {
                Repr::Affine { starts, slopes, .. } if starts.len() == 1 && !starts[0].is_finite() => {
                    FunctionSpec::Linear {
                        slope: slopes[0],
                        domain_hi: m.hi.is_finite().then_some(m.hi),
                    }
                }
                _ => m.to_spec(),
            },
            KeRepr::Odd(g) => FunctionSpec::OddReflect {
                of: Box::new(g.to_spec()),
            },
        }
    }

    pub fn from_spec(spec: &FunctionSpec<T>) -> Result<Self> {
        match spec {
            FunctionSpec::Linear { slope, domain_hi } => {
                let hi = domain_hi.unwrap_or(T::infinity());
                Self::piecewise_affine(&[-hi], &[*slope], hi)
            }
            FunctionSpec::PiecewiseAffine {
                breaks,
                slopes,
                domain_hi,
                shape,
            } => {
                let m = Monotone::affine(breaks, slopes, domain_hi.unwrap_or(T::infinity()))?;
                let m = match shape {
                    Some(s) => m.with_shape(*s)?,
                    None => m,
                };
                Ok(Self {
                    repr: KeRepr::Direct(m),
                    name: "class_ke".into(),
                })
            }
            FunctionSpec::Table { xs, ys, shape } => {
                let m = Monotone::table(xs, ys)?;
                let m = match shape {
                    Some(s) => m.with_shape(*s)?,
                    None => m,
                };
                Ok(Self {
                    repr: KeRepr::Direct(m),
                    name: "class_ke".into(),
                })
            }
            FunctionSpec::OddReflect { of } => Ok(Self::odd_reflect(&ScalarK::from_spec(of)?)),
        }
    }
}

impl<T: Real> MonotoneFn<T> for ExtendedKe<T> {
    fn eval(&self, x: T) -> Result<T> {
        let (lo, hi) = self.domain();
        if !(x >= lo && x <= hi) {
            return Err(out_of_domain(&self.name, x, lo, hi));
        }
        Ok(match &self.repr {
            KeRepr::Direct(m) => m.eval_unchecked(x),
            KeRepr::Odd(g) => {
                if x >= T::zero() {
                    g.f.eval_unchecked(x)
                } else {
                    -g.f.eval_unchecked(-x)
                }
            }
        })
    }

    fn domain(&self) -> (T, T) {
        match &self.repr {
            KeRepr::Direct(m) => (m.lo, m.hi),
            KeRepr::Odd(g) => (-g.f.hi, g.f.hi),
        }
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn breakpoints(&self) -> Vec<T> {
        match &self.repr {
            KeRepr::Direct(m) => m.knots(),
            KeRepr::Odd(g) => {
                let k = g.breakpoints();
                let mut out: Vec<T> = k.iter().rev().map(|&v| -v).filter(|v| *v < T::zero()).collect();
                out.extend(k);
                out
            }
        }
    }
}

/// Serialized form of class-K / K_e functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionSpec<T> {
    Linear {
        slope: T,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        domain_hi: Option<T>,
    },
    PiecewiseAffine {
        breaks: Vec<T>,
        slopes: Vec<T>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        domain_hi: Option<T>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shape: Option<Shape>,
    },
    Table {
        xs: Vec<T>,
        ys: Vec<T>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shape: Option<Shape>,
    },
    OddReflect {
        of: Box<FunctionSpec<T>>,
    },
}

/// Outcome of [`verify_domination`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DominationReport<T> {
    pub ok: bool,
    /// Largest `alpha(-xi) + alpha_lambda(xi)` over the sampled `xi > 0`.
    pub worst_margin: T,
    pub worst_xi: T,
}

/// Sampled check of `alpha(-xi) <= -alpha_lambda(xi)` for `xi` in `[0, budget]`.
///
/// The uniform grid is augmented with the breakpoints of both functions so that the
/// check is exact for piecewise-affine inputs. `xi = 0` is excluded from the worst margin
/// because both sides vanish there by normalization.
pub fn verify_domination<T: Real>(
    alpha: &ExtendedKe<T>,
    alpha_lambda: &ScalarK<T>,
    budget: T,
    n_grid: usize,
) -> Result<DominationReport<T>> {
    if n_grid < 2 {
        return Err(Error::Precondition("domination grid needs at least 2 points".into()));
    }
    if !(budget > T::zero()) {
        return Err(Error::Precondition("budget must be positive".into()));
    }
    let (alo, _) = alpha.domain();
    let (_, lhi) = alpha_lambda.domain();
    if -budget < alo {
        return Err(out_of_domain(alpha.name(), -budget, alo, alpha.domain().1));
    }
    if budget > lhi {
        return Err(out_of_domain(alpha_lambda.name(), budget, T::zero(), lhi));
    }

    let mut xis = linspace(T::zero(), budget, n_grid);
    xis.extend(
        alpha_lambda
            .breakpoints()
            .into_iter()
            .filter(|&b| b > T::zero() && b < budget),
    );
    xis.extend(
        alpha
            .breakpoints()
            .into_iter()
            .filter(|&b| b < T::zero() && -b < budget)
            .map(|b| -b),
    );
    xis.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xis.dedup();

    let mut worst = DominationReport {
        ok: true,
        worst_margin: T::neg_infinity(),
        worst_xi: T::zero(),
    };
    for &xi in xis.iter().filter(|&&xi| xi > T::zero()) {
        let margin = alpha.eval(-xi)? + alpha_lambda.eval(xi)?;
        if margin > worst.worst_margin {
            worst.worst_margin = margin;
            worst.worst_xi = xi;
        }
    }
    worst.ok = worst.worst_margin <= T::zero();
    Ok(worst)
}

/// Outcome of [`check_envelope`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopeReport<T> {
    pub ok: bool,
    /// Smallest `beta(x1 + x2) - alpha1(x1) - alpha2(x2)` over the grid.
    pub worst_margin: T,
    pub worst_x1: T,
    pub worst_x2: T,
}

/// Grid check of `beta(x1 + x2) >= alpha1(x1) + alpha2(x2)` on `[-a, a] x [0, a]`.
pub fn check_envelope<T: Real>(
    beta: &ExtendedKe<T>,
    alpha1: &ExtendedKe<T>,
    alpha2: &ScalarK<T>,
    a: T,
    n: usize,
    tolerance: T,
) -> Result<EnvelopeReport<T>> {
    let x1s = linspace(-a, a, n);
    let x2s = linspace(T::zero(), a, n);
    let a1: Vec<T> = x1s.iter().map(|&x| alpha1.eval(x)).collect::<Result<_>>()?;
    let a2: Vec<T> = x2s.iter().map(|&x| alpha2.eval(x)).collect::<Result<_>>()?;
    let mut rep = EnvelopeReport {
        ok: true,
        worst_margin: T::infinity(),
        worst_x1: T::zero(),
        worst_x2: T::zero(),
    };
    for (i, &x1) in x1s.iter().enumerate() {
        for (j, &x2) in x2s.iter().enumerate() {
            let m = beta.eval(x1 + x2)? - a1[i] - a2[j];
            if m < rep.worst_margin {
                rep.worst_margin = m;
                rep.worst_x1 = x1;
                rep.worst_x2 = x2;
            }
        }
    }
    rep.ok = rep.worst_margin >= -tolerance;
    Ok(rep)
}

/// Merges nearly coincident sorted values, keeping flagged ones in preference.
fn merge_sorted<T: Real>(mut pts: Vec<(T, bool)>, tol: T) -> Vec<T> {
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut out: Vec<(T, bool)> = Vec::with_capacity(pts.len());
    for p in pts {
        match out.last_mut() {
            Some(last) if p.0 - last.0 <= tol => {
                if p.1 && !last.1 {
                    *last = p;
                }
            }
            _ => out.push(p),
        }
    }
    out.into_iter().map(|p| p.0).collect()
}

/// Builds an extended class-K_e `beta` with `beta(x1 + x2) >= alpha1(x1) + alpha2(x2)`
/// for `x1` in `[-a, a]`, `x2` in `[0, a]`, and `beta(0) = 0`.
///
/// `S(s) = sup { alpha1(x1) + alpha2(x2) : x1 + x2 = s }` is tabulated on `[-a, 2a]`.
/// The `s` grid contains every pairwise sum of breakpoints, and between such sums `S` is a
/// maximum of affine functions, so linear interpolation of the table never undercuts `S`
/// for piecewise-affine inputs. The running maximum is then tilted by `slope_eps * s` on
/// `s >= 0`; on `s < 0` the table already increases strictly because `alpha1` does.
pub fn beta_envelope<T: Real>(
    alpha1: &ExtendedKe<T>,
    alpha2: &ScalarK<T>,
    a: T,
    n_grid: usize,
    slope_eps: T,
) -> Result<ExtendedKe<T>> {
    if !(slope_eps > T::zero()) {
        return Err(Error::Precondition("slope_eps must be positive".into()));
    }
    if !alpha2.shape().is_regular() {
        return Err(Error::Precondition(format!(
            "{} must be linear, convex or concave",
            alpha2.name()
        )));
    }
    let dom = verify_domination(alpha1, alpha2, a, n_grid)?;
    if !dom.ok {
        return Err(Error::Domination {
            worst_xi: dom.worst_xi.as_f64(),
            worst_margin: dom.worst_margin.as_f64(),
        });
    }
    let (lo1, hi1) = alpha1.domain();
    if lo1 > -a || hi1 < a {
        return Err(out_of_domain(alpha1.name(), a, lo1, hi1));
    }

    let knots1: Vec<T> = {
        let mut k: Vec<T> = alpha1.breakpoints().into_iter().filter(|&b| b > -a && b < a).collect();
        k.push(-a);
        k.push(a);
        k
    };
    let knots2: Vec<T> = {
        let mut k: Vec<T> = alpha2
            .breakpoints()
            .into_iter()
            .filter(|&b| b > T::zero() && b < a)
            .collect();
        k.push(T::zero());
        k.push(a);
        k
    };

    let merge_tol = T::lit(1e-12) * a;
    let mut s_pts: Vec<(T, bool)> = linspace(-a, a + a, 3 * (n_grid - 1) + 1)
        .into_iter()
        .map(|s| (s, false))
        .collect();
    s_pts.push((T::zero(), true));
    for &b1 in &knots1 {
        for &b2 in &knots2 {
            let s = b1 + b2;
            if s >= -a && s <= a + a {
                s_pts.push((s, true));
            }
        }
    }
    let s_grid = merge_sorted(s_pts, merge_tol);
    let x2_grid = linspace(T::zero(), a, n_grid);

    let mut sup = Vec::with_capacity(s_grid.len());
    for &s in &s_grid {
        let lo2 = T::zero().max(s - a);
        let hi2 = a.min(s + a);
        let mut best = T::neg_infinity();
        let mut consider = |x2: T| -> Result<()> {
            if x2 >= lo2 && x2 <= hi2 {
                let x1 = (s - x2).max(-a).min(a);
                let v = alpha1.eval(x1)? + alpha2.eval(x2)?;
                if v > best {
                    best = v;
                }
            }
            Ok(())
        };
        consider(lo2)?;
        consider(hi2)?;
        for &x2 in &x2_grid {
            consider(x2)?;
        }
        for &b2 in &knots2 {
            consider(b2)?;
        }
        for &b1 in &knots1 {
            consider(s - b1)?;
        }
        sup.push(best);
    }

    let zero_idx = s_grid
        .iter()
        .position(|&s| s == T::zero())
        .expect("zero is always in the s grid");
    let tol = T::lit(1e-9);
    if sup[zero_idx] > tol {
        return Err(Error::Domination {
            worst_xi: 0.0,
            worst_margin: sup[zero_idx].as_f64(),
        });
    }

    let mut beta = Vec::with_capacity(sup.len());
    let mut running = T::neg_infinity();
    for (i, (&s, &v)) in s_grid.iter().zip(&sup).enumerate() {
        running = running.max(v);
        let b = if i < zero_idx {
            if running > tol {
                return Err(Error::Domination {
                    worst_xi: (-s).as_f64(),
                    worst_margin: running.as_f64(),
                });
            }
            running.min(T::zero())
        } else if i == zero_idx {
            T::zero()
        } else {
            running + slope_eps * s
        };
        beta.push(b);
    }
    // Round-off ties on the negative side are broken by the smallest upward nudge.
    for i in 1..zero_idx {
        if beta[i] <= beta[i - 1] {
            let step = (beta[i - 1].abs() * T::epsilon()).max(T::min_positive_value());
            beta[i] = beta[i - 1] + step;
        }
    }
    if zero_idx > 0 && beta[zero_idx - 1] >= T::zero() {
        return Err(Error::Precondition(
            "envelope is flat at 0 from the left; alpha1 must be strictly increasing".into(),
        ));
    }
    Ok(ExtendedKe::table(&s_grid, &beta)?.with_name("beta"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gamma_sim() -> ScalarK<f64> {
        ScalarK::piecewise_affine(&[0.0, 0.03], &[1.0, 2.0], f64::INFINITY)
            .unwrap()
            .with_shape(Shape::Convex)
            .unwrap()
            .with_name("gamma")
    }

    #[test]
    fn gamma_values() {
        let g = gamma_sim();
        assert_eq!(g.eval(0.03).unwrap(), 0.03);
        assert_eq!(g.eval(0.0).unwrap(), 0.0);
        assert!((g.eval(1.0).unwrap() - 1.97).abs() < 1e-15);
        assert_eq!(g.shape(), Shape::Convex);
    }

    #[test]
    fn out_of_domain_names_function() {
        let g = gamma_sim().restricted(2.0).unwrap();
        let err = g.eval(2.5).unwrap_err();
        assert!(matches!(err, Error::OutOfDomain { ref name, x, .. } if name == "gamma" && x == 2.5));
        assert!(g.eval(-0.1).is_err());
        assert!(g.eval(f64::NAN).is_err());
    }

    #[test]
    fn odd_reflection_values() {
        let a = ExtendedKe::odd_reflect(&gamma_sim());
        assert_eq!(a.eval(-0.03).unwrap(), -0.03);
        assert!((a.eval(-1.0).unwrap() + 1.97).abs() < 1e-15);
        let id = ExtendedKe::odd_reflect(&ScalarK::linear(1.0).unwrap());
        for x in [-1.0, 0.0, 1.0] {
            assert_eq!(id.eval(x).unwrap(), x);
        }
        assert!(a.odd_of().is_some());
    }

    #[test]
    fn shape_tag_must_match() {
        let concave = ScalarK::piecewise_affine(&[0.0, 1.0], &[2.0, 1.0], f64::INFINITY).unwrap();
        assert_eq!(concave.shape(), Shape::Concave);
        assert!(concave.clone().with_shape(Shape::Convex).is_err());
        assert!(concave.with_shape(Shape::General).is_ok());
        assert_eq!(ScalarK::linear(3.0).unwrap().shape(), Shape::Linear);
    }

    #[test]
    fn rejects_non_increasing_input() {
        assert!(ScalarK::piecewise_affine(&[0.0, 1.0], &[1.0, 0.0], 2.0).is_err());
        assert!(ScalarK::table(&[0.0, 1.0, 2.0], &[0.0, 1.0, 1.0]).is_err());
        assert!(ScalarK::table(&[0.5, 1.0], &[0.0, 1.0]).is_err());
        assert!(ExtendedKe::table(&[-1.0, 1.0], &[-0.5, 1.0]).is_err());
    }

    #[test]
    fn extended_piecewise_is_anchored_at_zero() {
        let f = ExtendedKe::piecewise_affine(&[-2.0, -1.0, 1.0], &[3.0, 1.0, 2.0], 4.0).unwrap();
        assert_eq!(f.eval(0.0).unwrap(), 0.0);
        assert_eq!(f.eval(-1.0).unwrap(), -1.0);
        assert_eq!(f.eval(-2.0).unwrap(), -4.0);
        assert_eq!(f.eval(3.0).unwrap(), 5.0);
    }

    #[test]
    fn domination_examples() {
        let alpha = ExtendedKe::odd_reflect(&gamma_sim());
        let al = gamma_sim().restricted(2.0).unwrap();
        let r = verify_domination(&alpha, &al, 2.0, 1001).unwrap();
        assert!(r.ok);
        assert_eq!(r.worst_margin, 0.0);

        let r = verify_domination(
            &ExtendedKe::linear(1.0).unwrap(),
            &ScalarK::linear(2.0).unwrap(),
            1.0,
            1001,
        )
        .unwrap();
        assert!(!r.ok);
        assert_eq!(r.worst_margin, 1.0);
        assert_eq!(r.worst_xi, 1.0);

        let r = verify_domination(
            &ExtendedKe::linear(2.0).unwrap(),
            &ScalarK::linear(1.0).unwrap(),
            1.0,
            2,
        )
        .unwrap();
        assert!(r.ok);
        assert_eq!(r.worst_margin, -1.0);
        assert_eq!(r.worst_xi, 1.0);
    }

    #[test]
    fn domination_domain_errors() {
        let narrow = ExtendedKe::piecewise_affine(&[-0.5], &[1.0], 0.5).unwrap();
        assert!(verify_domination(&narrow, &ScalarK::linear(1.0).unwrap(), 1.0, 10).is_err());
        assert!(verify_domination(&narrow, &ScalarK::linear(1.0).unwrap(), 0.1, 1).is_err());
    }

    #[test]
    fn beta_linear_case() {
        let eps = 1e-6;
        let beta = beta_envelope(
            &ExtendedKe::linear(2.0).unwrap(),
            &ScalarK::linear(1.0).unwrap(),
            1.0,
            101,
            eps,
        )
        .unwrap();
        assert_eq!(beta.eval(0.0).unwrap(), 0.0);
        for s in linspace(-1.0f64, 2.0, 61) {
            // x1 is capped at a = 1, so past s = 1 the sup is s + 1.
            let want = if s <= 1.0 { 2.0 * s } else { s + 1.0 } + eps * s.max(0.0);
            assert!((beta.eval(s).unwrap() - want).abs() < 1e-12, "s = {s}");
        }
    }

    #[test]
    fn beta_rejects_failed_domination() {
        let err = beta_envelope(
            &ExtendedKe::linear(1.0).unwrap(),
            &ScalarK::linear(2.0).unwrap(),
            1.0,
            11,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Domination { worst_xi, .. } if worst_xi == 1.0));
    }

    #[test]
    fn beta_rejects_general_shape() {
        let wiggly = ScalarK::piecewise_affine(&[0.0, 1.0, 2.0], &[1.0, 2.0, 1.0], 3.0).unwrap();
        assert_eq!(wiggly.shape(), Shape::General);
        assert!(beta_envelope(&ExtendedKe::linear(5.0).unwrap(), &wiggly, 1.0, 11, 1e-6).is_err());
    }

    #[test]
    fn beta_for_pendulum_rates_dominates_on_grid() {
        let g = gamma_sim();
        let a1 = ExtendedKe::odd_reflect(&g);
        let beta = beta_envelope(&a1, &g, 2.0, 1001, 1e-6).unwrap();
        // Independent sup oracle on a 101 x 101 grid.
        for x1 in linspace(-2.0, 2.0, 101) {
            for x2 in linspace(0.0, 2.0, 101) {
                let lhs = a1.eval(x1).unwrap() + g.eval(x2).unwrap();
                assert!(beta.eval(x1 + x2).unwrap() - lhs >= -1e-12);
            }
        }
    }

    #[test]
    fn concave_rate_envelope() {
        let al = ScalarK::piecewise_affine(&[0.0, 0.5], &[2.0, 0.5], f64::INFINITY).unwrap();
        assert_eq!(al.shape(), Shape::Concave);
        let a1 = ExtendedKe::linear(3.0).unwrap();
        let beta = beta_envelope(&a1, &al, 1.0, 201, 1e-6).unwrap();
        let rep = check_envelope(&beta, &a1, &al, 1.0, 333, 1e-9).unwrap();
        assert!(rep.ok, "{rep:?}");
    }

    #[test]
    fn spec_roundtrip() {
        let g = gamma_sim();
        let json = serde_json::to_string(&g.to_spec()).unwrap();
        assert!(json.contains("\"kind\":\"piecewise_affine\""));
        assert!(json.contains("\"shape\":\"convex\""));
        let back = ScalarK::from_spec(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.eval(1.0).unwrap(), g.eval(1.0).unwrap());
        let odd = ExtendedKe::odd_reflect(&g);
        let back = ExtendedKe::from_spec(&odd.to_spec()).unwrap();
        assert!(back.odd_of().is_some());
    }

    #[test]
    fn f32_evaluates() {
        let g = ScalarK::<f32>::piecewise_affine(&[0.0, 0.03], &[1.0, 2.0], f32::INFINITY).unwrap();
        assert!((g.eval(1.0).unwrap() - 1.97).abs() < 1e-6);
        let a = ExtendedKe::odd_reflect(&g);
        assert_eq!(a.eval(-0.5).unwrap(), -a.eval(0.5).unwrap());
    }

    proptest! {
        #[test]
        fn odd_reflection_is_exact(x in -50.0f64..50.0) {
            let a = ExtendedKe::odd_reflect(&gamma_sim());
            prop_assert_eq!(a.eval(-x).unwrap(), -a.eval(x).unwrap());
        }

        #[test]
        fn piecewise_is_strictly_increasing(
            slopes in proptest::collection::vec(0.01f64..10.0, 1..6),
            x in 0.0f64..10.0,
            dx in 1e-6f64..5.0,
        ) {
            let breaks: Vec<f64> = (0..slopes.len()).map(|i| i as f64 * 0.7).collect();
            let f = ScalarK::piecewise_affine(&breaks, &slopes, f64::INFINITY).unwrap();
            prop_assert!(f.eval(x).unwrap() < f.eval(x + dx).unwrap());
            // continuity at breakpoints
            for &b in &breaks[1..] {
                let l = f.eval(b - 1e-12).unwrap();
                let r = f.eval(b).unwrap();
                prop_assert!((l - r).abs() < 1e-9);
            }
        }
    }
}
