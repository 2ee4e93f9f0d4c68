use barrier_shift::classk::{beta_envelope, check_envelope, verify_domination, ExtendedKe, MonotoneFn, ScalarK};
use barrier_shift::dynamics::InputBox;
use barrier_shift::field::ScalarField;
use barrier_shift::filter::min_norm_box_halfspace;
use barrier_shift::lambda::LambdaTrajectory;
use barrier_shift::LambdaShiftableCbf;
use proptest::prelude::*;

fn pwa(s1: f64, s2: f64, brk: f64) -> ScalarK<f64> {
    ScalarK::piecewise_affine(&[0.0, brk], &[s1, s2], f64::INFINITY).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_domination_iff_slopes_ordered(a in 0.1f64..5.0, c in 0.1f64..5.0) {
        let alpha = ExtendedKe::linear(a).unwrap();
        let rate = ScalarK::linear(c).unwrap();
        let rep = verify_domination(&alpha, &rate, 2.0, 101).unwrap();
        prop_assert_eq!(rep.ok, c <= a);
    }

    #[test]
    fn scalar_k_is_strictly_increasing(
        s1 in 0.1f64..3.0, s2 in 0.1f64..3.0, brk in 0.01f64..1.0,
        x in 0.0f64..5.0, dx in 1e-6f64..1.0,
    ) {
        let g = pwa(s1, s2, brk);
        prop_assert_eq!(g.eval(0.0).unwrap(), 0.0);
        prop_assert!(g.eval(x + dx).unwrap() > g.eval(x).unwrap());
    }

    #[test]
    fn beta_dominates_sum_of_pieces(
        s1 in 0.2f64..3.0, s2 in 0.2f64..3.0, brk in 0.01f64..0.5,
        k in 0.1f64..1.0, a in 0.5f64..3.0,
    ) {
        // alpha2 <= alpha1 on the positive axis keeps the domination hypothesis
        let a1 = ExtendedKe::odd_reflect(&pwa(s1, s2, brk));
        let a2 = pwa(k * s1, k * s2, brk);
        let beta = beta_envelope(&a1, &a2, a, 201, 1e-6).unwrap();
        prop_assert_eq!(beta.eval(0.0).unwrap(), 0.0);
        // grid not aligned with the construction grid
        let rep = check_envelope(&beta, &a1, &a2, a, 157, 1e-9).unwrap();
        prop_assert!(rep.ok, "{:?}", rep);
    }

    #[test]
    fn appended_trajectories_verify(
        steps in proptest::collection::vec((0u8..3, 0.05f64..1.5, 0.2f64..1.4), 1..6),
    ) {
        let g = pwa(1.0, 2.0, 0.03);
        let mut tr = LambdaTrajectory::new(2.0, g.clone(), 0.0, 2.0).unwrap();
        for (kind, dt, frac) in steps {
            let t_end = tr.end_time() + dt;
            tr = match kind {
                0 => tr.append_constant(t_end).unwrap(),
                1 => tr.append_ode_equality(t_end, 1e-3).unwrap(),
                _ => {
                    let cur = tr.current_value();
                    let target = (cur * frac).min(2.0);
                    let floor = (cur - g.eval(target).unwrap() * dt).max(target);
                    tr.append_linear(t_end, floor).unwrap()
                }
            };
        }
        let rep = tr.verify(50).unwrap();
        prop_assert!(rep.ok && rep.worst_margin >= -1e-9 && rep.continuous, "{:?}", rep);
    }

    #[test]
    fn ode_descent_is_fastest(dt in 0.1f64..2.0, frac in 0.05f64..1.0) {
        let g = pwa(1.0, 2.0, 0.03);
        let ode = LambdaTrajectory::new(2.0, g.clone(), 0.0, 1.5).unwrap().append_ode_equality(dt, 1e-3).unwrap();
        let end = ode.current_value();
        let lam_end = end + frac * (1.5 - end);
        if let Ok(lin) = LambdaTrajectory::new(2.0, g, 0.0, 1.5).unwrap().append_linear(dt, lam_end) {
            for k in 0..=20 {
                let t = (dt * k as f64 / 20.0).min(dt);
                prop_assert!(ode.eval(t).unwrap() <= lin.eval(t).unwrap() + 1e-9);
            }
        }
    }

    #[test]
    fn constant_shifts_compose(l1 in 0.0f64..1.0, l2 in 0.0f64..1.0, x1 in -2.0f64..2.0, x2 in -2.0f64..2.0) {
        let b = ScalarField::quadratic(vec![vec![-2.0, -1.0], vec![-1.0, -1.0]], vec![], 0.0).unwrap();
        let cbf = LambdaShiftableCbf::new(b, 2.0, ExtendedKe::linear(1.0).unwrap()).unwrap();
        let two = cbf.shift_const(l1).unwrap().shift_const(l2).unwrap();
        let one = cbf.shift_const(l1 + l2).unwrap();
        let x = [x1, x2];
        prop_assert!((two.value(&x) - one.value(&x)).abs() < 1e-12);
        prop_assert!((two.budget() - (2.0 - l1 - l2)).abs() < 1e-12);
    }

    #[test]
    fn scalar_filter_matches_grid(a in -5.0f64..5.0, c in -50.0f64..50.0) {
        let bx = InputBox::symmetric(20.0, 1).unwrap();
        let grid: Vec<f64> = (0..20_001).map(|k| -20.0 + 40.0 * k as f64 / 20_000.0).collect();
        let brute = grid.iter().filter(|&&u| a * u >= c).min_by(|p, q| p.abs().partial_cmp(&q.abs()).unwrap());
        match (min_norm_box_halfspace(&[a], c, &bx), brute) {
            (Ok(out), Some(b)) => prop_assert!((out.u[0] - b).abs() <= 2e-3 + 1e-12),
            (Err(_), None) => {}
            (Ok(out), None) => prop_assert!(a * out.u[0] >= c && (a * 20.0).abs() - c.abs() < 1e-2),
            (Err(e), Some(b)) => prop_assert!(false, "{e} but grid finds {b}"),
        }
    }
}
