use super::*;
use proptest::prelude::*;

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[test]
fn builtin_values() {
    let q = make_builtin_loss("quadratic").unwrap();
    assert_eq!(q.g(2.0), 2.0);
    let l = make_builtin_loss("linex1").unwrap();
    assert!((l.g(1.0) - 0.718282).abs() < 1e-6);
    let c = make_builtin_loss("shifted_cosh").unwrap();
    assert!((c.g(1.0) - 1.086161).abs() < 1e-6);
    assert!(matches!(make_builtin_loss("huber"), Err(LossError::UnknownLoss(_))));
}

#[test]
fn builtins_are_centered_and_convex() {
    for b in BuiltinLoss::ALL {
        let g = RegressionLoss::builtin(b);
        assert_eq!(g.g(0.0), 0.0);
        assert_eq!(g.g_prime(0.0), 0.0);
        assert!(g.is_convex());
        for t in [-2.0, -0.3, 0.4, 1.7] {
            let h = 1e-5;
            let fd = (g.g(t + h) - g.g(t - h)) / (2.0 * h);
            assert!((fd - g.g_prime(t)).abs() < 1e-7, "{b:?} g' at {t}");
            let fd2 = (g.g_prime(t + h) - g.g_prime(t - h)) / (2.0 * h);
            assert!((fd2 - g.g_double_prime(t)).abs() < 1e-6, "{b:?} g'' at {t}");
        }
    }
}

#[test]
fn closed_forms_are_normalized() {
    for b in BuiltinLoss::ALL {
        assert!(b.closed_form_f(1.0).abs() < 1e-15);
        assert!(b.closed_form_f_prime(1.0).abs() < 1e-15);
    }
}

#[test]
fn f_from_g_examples() {
    let q = RegressionLoss::builtin(BuiltinLoss::Quadratic);
    assert!((f_from_g(&q, 2.0).unwrap() - (1.0 - 2f64.ln())).abs() < 1e-9);
    let lh = RegressionLoss::builtin(BuiltinLoss::LinexHalf);
    assert!((f_from_g(&lh, 4.0).unwrap() - 2.0).abs() < 1e-9);
    for b in BuiltinLoss::ALL {
        assert_eq!(f_from_g(&RegressionLoss::builtin(b), 1.0).unwrap(), 0.0);
    }
    assert!(matches!(f_from_g(&q, 0.0), Err(LossError::InvalidArgument(_))));
}

#[test]
fn f_from_g_matches_closed_forms() {
    for b in BuiltinLoss::ALL {
        let g = RegressionLoss::builtin(b);
        for t in log_grid(1e-3, 1e3, 61) {
            let got = f_from_g(&g, t).unwrap();
            let want = b.closed_form_f(t);
            assert!((got - want).abs() < 1e-8, "{b:?} at {t}: {got} vs {want}");
        }
    }
}

#[test]
fn second_derivative_relation() {
    // f''(t) = g''(log t) / t^2
    let quad = Quadrature::with_tol(1e-14);
    for b in BuiltinLoss::ALL {
        let g = RegressionLoss::builtin(b);
        for t in log_grid(0.1, 10.0, 9) {
            let h = 1e-3 * t;
            let f = |x| f_from_g_with(&g, x, &quad).unwrap();
            let fd = (f(t + h) - 2.0 * f(t) + f(t - h)) / (h * h);
            let want = g.g_double_prime(t.ln()) / (t * t);
            assert!(((fd - want) / want).abs() < 1e-4, "{b:?} at {t}: {fd} vs {want}");
        }
    }
}

#[test]
fn induced_divergence_is_normalized() {
    for b in BuiltinLoss::ALL {
        let f = FDivergenceSpec::induced_by(&RegressionLoss::builtin(b)).unwrap();
        assert!(f.f(1.0).abs() < 1e-12);
        assert!(f.f_prime(1.0).abs() < 1e-12);
        let t = 2.5;
        assert!((f.f_prime(t) - b.closed_form_f_prime(t)).abs() < 1e-8);
        assert_eq!(f.classification(), b.known_classification());
    }
}

#[test]
fn g_from_f_examples() {
    let kl = FDivergenceSpec::closed_form(BuiltinLoss::Linex1);
    assert!((g_from_f(&kl, 1.0).unwrap() - (std::f64::consts::E - 2.0)).abs() < 1e-9);
    for b in BuiltinLoss::ALL {
        assert_eq!(g_from_f(&FDivergenceSpec::closed_form(b), 0.0).unwrap(), 0.0);
    }
}

#[test]
fn round_trip_g_to_f_to_g() {
    for b in BuiltinLoss::ALL {
        let f = FDivergenceSpec::induced_by(&RegressionLoss::builtin(b)).unwrap();
        for t in [-3.0, -1.0, 0.0, 1.0, 3.0] {
            let got = g_from_f(&f, t).unwrap();
            assert!((got - b.g(t)).abs() < 1e-6, "{b:?} at {t}: {got} vs {}", b.g(t));
        }
    }
}

#[test]
fn round_trip_f_to_g_to_f() {
    for b in BuiltinLoss::ALL {
        let g = loss_from_divergence(&FDivergenceSpec::closed_form(b)).unwrap();
        for t in [0.05, 0.5, 1.0, 2.0, 20.0] {
            let got = f_from_g(&g, t).unwrap();
            let want = b.closed_form_f(t);
            assert!((got - want).abs() < 1e-6, "{b:?} at {t}: {got} vs {want}");
        }
        for t in [-2.0, 0.5, 2.0] {
            assert!((g.g(t) - b.g(t)).abs() < 1e-6);
            assert!((g.g_prime(t) - b.g_prime(t)).abs() < 1e-9);
        }
    }
}

#[test]
fn classification_of_builtins() {
    for b in BuiltinLoss::ALL {
        let got = classify_loss(&RegressionLoss::builtin(b)).unwrap();
        assert_eq!(got, b.known_classification(), "{b:?}");
    }
    let q = classify_loss(&RegressionLoss::builtin(BuiltinLoss::Quadratic)).unwrap();
    assert!(q.zero_forcing && !q.zero_avoiding);
    let c = classify_loss(&RegressionLoss::builtin(BuiltinLoss::ShiftedCosh)).unwrap();
    assert!(c.zero_forcing && c.zero_avoiding);
}

#[test]
fn finite_limits_are_estimated() {
    let r = classify_loss_report(&RegressionLoss::builtin(BuiltinLoss::LinexHalf)).unwrap();
    assert!((r.f_at_zero.value() - 2.0).abs() < 1e-3);
    assert!((r.f_prime_at_infinity.value() - 2.0).abs() < 1e-3);
    assert!(!r.pseudo);
}

#[test]
fn expression_losses() {
    let g = RegressionLoss::from_expression("lx", "exp(t) - t - 1").unwrap();
    for t in [-1.5, 0.3, 2.0] {
        assert!((g.g(t) - BuiltinLoss::Linex1.g(t)).abs() < 1e-12);
        assert!((g.g_double_prime(t) - t.exp()).abs() < 1e-12);
    }
    assert_eq!(classify_loss(&g).unwrap(), BuiltinLoss::Linex1.known_classification());
    assert!(matches!(RegressionLoss::from_expression("bad", "t"), Err(LossError::NotCentered { .. })));
    assert!(matches!(RegressionLoss::from_expression("bad", "t +"), Err(LossError::Parse { .. })));
}

#[test]
fn non_convex_loss_is_flagged() {
    // Centered at zero but concave for |t| > 1.
    let g = RegressionLoss::from_expression("bump", "t^2 - t^4/12").unwrap();
    assert!(g.is_pseudo());
}

#[test]
fn expression_divergence() {
    let f = FDivergenceSpec::from_expression("rkl", "t - log(t) - 1").unwrap();
    assert!(f.f_at_zero().is_infinite());
    assert!((f.f_prime_at_infinity().value() - 1.0).abs() < 1e-3);
    assert!(matches!(FDivergenceSpec::from_expression("bad", "t"), Err(LossError::NotNormalized { .. })));
}

#[test]
fn divergence_examples() {
    let f = FDivergenceSpec::closed_form(BuiltinLoss::Quadratic);
    assert_eq!(f_divergence_slices(&[0.5, 0.5], &[0.5, 0.5], &f).unwrap(), 0.0);
    let d = f_divergence_slices(&[0.5, 0.5], &[0.25, 0.75], &f).unwrap();
    let kl_qp = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
    assert!((d - kl_qp).abs() < 1e-12);
    assert!((d - 0.130812).abs() < 1e-6);
    let kl = FDivergenceSpec::closed_form(BuiltinLoss::Linex1);
    assert_eq!(f_divergence_slices(&[1.0, 0.0], &[0.0, 1.0], &kl).unwrap(), f64::INFINITY);
    // linex1 has f(0) = 1 and the quadratic has f'(inf) = 1
    assert_eq!(f_divergence_slices(&[0.0], &[0.7], &kl).unwrap(), 0.7);
    assert_eq!(f_divergence_slices(&[0.4], &[0.0], &f).unwrap(), 0.4);
    assert_eq!(f_divergence_slices(&[0.0], &[0.7], &f).unwrap(), f64::INFINITY);
}

#[test]
fn divergence_key_mismatch() {
    let f = FDivergenceSpec::closed_form(BuiltinLoss::Quadratic);
    let p: BTreeMap<u32, f64> = [(1, 0.5), (2, 0.5)].into();
    let q: BTreeMap<u32, f64> = [(1, 0.5), (3, 0.5)].into();
    assert_eq!(f_divergence(&p, &q, &f), Err(LossError::KeyMismatch));
    assert_eq!(f_divergence_slices(&[1.0], &[0.5, 0.5], &f), Err(LossError::KeyMismatch));
    assert_eq!(f_divergence(&p, &p, &f), Ok(0.0));
}

fn prob_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        if s == 0.0 {
            vec![1.0 / v.len() as f64; v.len()]
        } else {
            v.into_iter().map(|x| x / s).collect()
        }
    })
}

proptest! {
    #[test]
    fn divergence_is_nonnegative(
        (p, q) in (1usize..=8).prop_flat_map(|n| (prob_vec(n), prob_vec(n)))
    ) {
        for b in BuiltinLoss::ALL {
            let f = FDivergenceSpec::closed_form(b);
            let d = f_divergence_slices(&p, &q, &f).unwrap();
            prop_assert!(d >= -1e-10, "{:?}: {}", b, d);
        }
    }

    #[test]
    fn divergence_vanishes_on_equal_inputs(p in (1usize..=8).prop_flat_map(prob_vec)) {
        for b in BuiltinLoss::ALL {
            let f = FDivergenceSpec::closed_form(b);
            prop_assert!(f_divergence_slices(&p, &p, &f).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn quadrature_f_tracks_closed_form(t in 1e-3f64..1e3) {
        for b in BuiltinLoss::ALL {
            let got = f_from_g(&RegressionLoss::builtin(b), t).unwrap();
            prop_assert!((got - b.closed_form_f(t)).abs() < 1e-8);
        }
    }
}
