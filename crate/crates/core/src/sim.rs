//! Fixed-step closed-loop simulation with zero-order-hold inputs.

use std::io::Write;

use serde::Serialize;

use crate::cbf::TimeVaryingCbf;
use crate::dynamics::Dynamics;
use crate::error::{Error, Result};
use crate::filter::min_norm_filter;
use crate::scalar::Real;

/// One classical RK4 step of `x' = f(x, u)` with `u` held constant.
pub fn rk4_step<T: Real>(sys: &dyn Dynamics<T>, x: &[T], u: &[T], dt: T) -> Vec<T> {
    let two = T::lit(2.0);
    let axpy = |a: T, k: &[T]| -> Vec<T> { x.iter().zip(k).map(|(&xi, &ki)| xi + a * ki).collect() };
    let k1 = sys.f(x, u);
    let k2 = sys.f(&axpy(dt / two, &k1), u);
    let k3 = sys.f(&axpy(dt / two, &k2), u);
    let k4 = sys.f(&axpy(dt, &k3), u);
    let sixth = dt / T::lit(6.0);
    x.iter()
        .enumerate()
        .map(|(i, &xi)| xi + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimRecord<T> {
    pub times: Vec<T>,
    pub states: Vec<Vec<T>>,
    pub inputs: Vec<Vec<T>>,
    /// `B(t, x(t))`, NaN when no barrier was attached.
    pub b_values: Vec<T>,
    pub lambda_values: Vec<T>,
    pub feasible: Vec<bool>,
}

impl<T: Real> SimRecord<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// CSV with header `t,x1..xn,u1..um,B,lambda,feasible`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let io = |e: csv::Error| Error::Serialization(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        let nx = self.states.first().map_or(0, Vec::len);
        let nu = self.inputs.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=nx).map(|i| format!("x{i}")));
        header.extend((1..=nu).map(|i| format!("u{i}")));
        header.extend(["B".into(), "lambda".into(), "feasible".into()]);
        w.write_record(&header).map_err(io)?;
        for k in 0..self.len() {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.states[k].iter().map(|v| v.to_string()));
            row.extend(self.inputs[k].iter().map(|v| v.to_string()));
            row.push(self.b_values[k].to_string());
            row.push(self.lambda_values[k].to_string());
            row.push(self.feasible[k].to_string());
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(())
    }
}

/// Simulation stopped because the controller failed; `record` holds everything up to
/// and including the failing step.
#[derive(Debug, Clone, thiserror::Error)]
#[error("simulation halted at step {index} (t = {t}): {source}")]
pub struct SimHalt<T: Real> {
    pub record: SimRecord<T>,
    pub index: usize,
    pub t: f64,
    pub source: Error,
}

/// Integrates from `t_span.0` to `t_span.1` with step `dt`. The controller is queried
/// once at the start of every step and its output held over the step.
pub fn simulate<T, C>(
    sys: &dyn Dynamics<T>,
    mut controller: C,
    x0: &[T],
    t_span: (T, T),
    dt: T,
    tv: Option<&TimeVaryingCbf<T>>,
) -> std::result::Result<SimRecord<T>, Box<SimHalt<T>>>
where
    T: Real,
    C: FnMut(T, &[T]) -> Result<Vec<T>>,
{
    let halt = |record: SimRecord<T>, index: usize, t: T, source: Error| {
        Box::new(SimHalt {
            record,
            index,
            t: t.as_f64(),
            source,
        })
    };
    let (t0, t1) = t_span;
    let mut rec = SimRecord::default();
    if !(dt > T::zero()) || !(t1 >= t0) {
        return Err(halt(rec, 0, t0, Error::Precondition("need dt > 0 and t1 >= t0".into())));
    }
    if x0.len() != sys.dim_x() || x0.iter().any(|v| !v.is_finite()) {
        return Err(halt(
            rec,
            0,
            t0,
            Error::Precondition("x0 must be finite with dim_x entries".into()),
        ));
    }
    let steps = ((t1 - t0) / dt - T::lit(1e-9)).ceil().to_usize().unwrap_or(0);
    let mut x = x0.to_vec();
    for k in 0..=steps {
        let t = if k == steps {
            t1
        } else {
            t0 + dt * T::from_usize(k).unwrap()
        };
        let (b, lam) = match tv {
            Some(tv) => {
                let tq = t.min(tv.lambda().end_time());
                match (tv.eval_b(tq, &x), tv.lambda().eval(tq)) {
                    (Ok(b), Ok(l)) => (b, l),
                    (Err(e), _) | (_, Err(e)) => return Err(halt(rec, k, t, e)),
                }
            }
            None => (T::nan(), T::nan()),
        };
        rec.times.push(t);
        rec.states.push(x.clone());
        rec.b_values.push(b);
        rec.lambda_values.push(lam);
        match controller(t, &x) {
            Ok(u) => {
                rec.inputs.push(u.clone());
                rec.feasible.push(true);
                if k < steps {
                    let h = if k + 1 == steps { t1 - t } else { dt };
                    x = rk4_step(sys, &x, &u, h);
                    if x.iter().any(|v| !v.is_finite()) {
                        let err = Error::Precondition("state diverged".into());
                        return Err(halt(rec, k + 1, t + h, err));
                    }
                }
            }
            Err(e) => {
                rec.inputs.push(vec![T::nan(); sys.dim_u()]);
                rec.feasible.push(false);
                return Err(halt(rec, k, t, e));
            }
        }
    }
    Ok(rec)
}

/// Controller closure running [`min_norm_filter`]. Times past the end of the shift
/// trajectory use its final value.
pub fn filter_controller<'a, T: Real>(
    tv: &'a TimeVaryingCbf<T>,
    sys: &'a dyn Dynamics<T>,
) -> impl FnMut(T, &[T]) -> Result<Vec<T>> + 'a {
    move |t, x| Ok(min_norm_filter(tv, sys, t.min(tv.lambda().end_time()), x)?.u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InvarianceReport<T> {
    pub min_b: T,
    pub argmin_t: T,
    pub argmin_index: usize,
    pub violated: bool,
    pub initial_b: T,
    /// `B(t0, x0) < 0`: the run started outside the safe set.
    pub initially_outside: bool,
}

pub const INVARIANCE_TOL: f64 = 1e-6;

/// Minimum recorded `B`; violated iff it drops below `-tol`.
pub fn monitor_invariance<T: Real>(rec: &SimRecord<T>, tol: T) -> Result<InvarianceReport<T>> {
    if rec.is_empty() {
        return Err(Error::EmptySamples { skipped: 0 });
    }
    let (mut idx, mut min_b) = (0, rec.b_values[0]);
    for (i, &b) in rec.b_values.iter().enumerate() {
        if b < min_b {
            min_b = b;
            idx = i;
        }
    }
    Ok(InvarianceReport {
        min_b,
        argmin_t: rec.times[idx],
        argmin_index: idx,
        violated: min_b < -tol || min_b.is_nan(),
        initial_b: rec.b_values[0],
        initially_outside: rec.b_values[0] < T::zero(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ControlAffineSystem, InputBox};

    fn linear_osc() -> ControlAffineSystem<f64> {
        // x1' = x2, x2' = -9.81 x1: the pendulum with sin replaced by identity and no momentum
        ControlAffineSystem::linear(
            vec![vec![0.0, 1.0], vec![-9.81, 0.0]],
            vec![vec![0.0], vec![1.0]],
            InputBox::symmetric(20.0, 1).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_field_keeps_state() {
        let sys = ControlAffineSystem::new(
            "still",
            2,
            |_: &[f64]| vec![0.0, 0.0],
            |_: &[f64]| vec![vec![1.0], vec![0.0]],
            InputBox::symmetric(1.0, 1).unwrap(),
        );
        let rec = simulate(&sys, |_, _| Ok(vec![0.0]), &[0.3, -0.2], (0.0, 1.0), 0.1, None).unwrap();
        assert_eq!(rec.len(), 11);
        assert!(rec.states.iter().all(|x| x == &vec![0.3, -0.2]));
        assert_eq!(*rec.times.last().unwrap(), 1.0);
    }

    #[test]
    fn matches_matrix_exponential() {
        let w = 9.81f64.sqrt();
        let x0 = [0.4, -0.3];
        let rec = simulate(&linear_osc(), |_, _| Ok(vec![0.0]), &x0, (0.0, 1.0), 1e-3, None).unwrap();
        let t = 1.0;
        let exact = [
            x0[0] * (w * t).cos() + x0[1] / w * (w * t).sin(),
            -x0[0] * w * (w * t).sin() + x0[1] * (w * t).cos(),
        ];
        let last = rec.states.last().unwrap();
        assert!((last[0] - exact[0]).abs() < 1e-6 && (last[1] - exact[1]).abs() < 1e-6);
    }

    #[test]
    fn controller_failure_halts_with_partial_record() {
        let err = simulate(
            &linear_osc(),
            |t, _| {
                if t >= 0.5 {
                    Err(Error::Precondition("boom".into()))
                } else {
                    Ok(vec![0.0])
                }
            },
            &[0.1, 0.0],
            (0.0, 1.0),
            0.1,
            None,
        )
        .unwrap_err();
        assert_eq!(err.index, 5);
        assert_eq!(err.record.len(), 6);
        assert_eq!(err.record.feasible.iter().filter(|f| !**f).count(), 1);
    }

    #[test]
    fn monitor_flags_negative_sample() {
        let mut rec = SimRecord {
            times: vec![0.0, 1.0, 2.0],
            states: vec![vec![0.0]; 3],
            inputs: vec![vec![0.0]; 3],
            b_values: vec![0.5, 0.2, 0.1],
            lambda_values: vec![1.0; 3],
            feasible: vec![true; 3],
        };
        let r = monitor_invariance(&rec, 1e-6).unwrap();
        assert!(!r.violated && !r.initially_outside);
        rec.b_values[1] = -0.01;
        let r = monitor_invariance(&rec, 1e-6).unwrap();
        assert!(r.violated);
        assert_eq!(r.argmin_index, 1);
    }

    #[test]
    fn csv_layout() {
        let rec = SimRecord {
            times: vec![0.0, 0.5],
            states: vec![vec![1.0, 2.0]; 2],
            inputs: vec![vec![0.25]; 2],
            b_values: vec![0.1, 0.2],
            lambda_values: vec![2.0, 2.0],
            feasible: vec![true, true],
        };
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("t,x1,x2,u1,B,lambda,feasible"));
        assert_eq!(lines.next(), Some("0,1,2,0.25,0.1,2,true"));
    }
}
