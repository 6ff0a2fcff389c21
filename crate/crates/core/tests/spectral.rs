use approx::assert_relative_eq;
use blowuplab::angular::Problem;
use blowuplab::spectral::*;
use proptest::prelude::*;

fn system() -> (Problem, Eigensystem) {
    let p = Problem::new(16, 10.0).unwrap();
    let es = Eigensystem::build(&p, 400, None, 8).unwrap();
    (p, es)
}

#[test]
fn inventory_for_16_10() {
    let (p, es) = system();
    let gamma = es.gamma();
    assert_relative_eq!(gamma, 2.481_812_717_19, max_relative = 1e-9);
    let l11 = es.mode(1, 1).unwrap().lambda;
    assert!((l11 + 0.5 * (gamma - p.m)).abs() < 1e-12);
    // the first positive lambda_1j is j = 3
    assert!(es.mode(1, 2).unwrap().lambda < 0.0);
    assert_relative_eq!(es.mode(1, 3).unwrap().lambda, 0.814_649_196_9, max_relative = 1e-8);
    assert!(es.modes.windows(2).all(|w| w[0].lambda <= w[1].lambda));
    let cap = es.mode(1, 3).unwrap().lambda + 2.0;
    assert!(es.modes.iter().all(|m| m.lambda <= cap));
}

#[test]
fn gram_matrix_is_identity() {
    let (_, es) = system();
    let g = es.gram(8).unwrap();
    assert_eq!(g.len(), 8);
    assert!(gram_deviation(&g) < 1e-8);
}

#[test]
fn radial_modes_solve_their_equation() {
    let (p, es) = system();
    for m in es.modes.iter().take(6) {
        assert!(radial_residual(m, &p, 0.05, 20.0, 0.01) < 1e-6, "({}, {})", m.i, m.j);
    }
}

#[test]
fn small_and_large_r_asymptotics() {
    let (p, es) = system();
    for m in es.modes.iter().take(4) {
        let power = m.exponent.power();
        // a_ij ~ c_small r^{-exponent} near the origin
        let r = 1e-4;
        assert_relative_eq!(m.radial(r) / r.powf(power), m.c_small, max_relative = 1e-6);
        // and grows like r^{2 lambda - m} at large r
        let (lo, hi) = large_r_window(m, &p);
        let slope = log_slope(|r| m.radial(r), lo, hi, 40);
        assert!((slope - (2.0 * m.lambda - p.m)).abs() < 0.02 * (2.0 * m.lambda - p.m).abs().max(1.0));
    }
}

#[test]
fn weight_is_harmonic_with_robin_boundary() {
    let (_, es) = system();
    let w = es.weights();
    let (i1, b1) = w.residuals(16, es.k(), 2e-3);
    let (i2, b2) = w.residuals(16, es.k(), 1e-3);
    // the one-sided boundary difference converges at second order; the
    // interior stencil levels off where it resolves the sampled angular mode
    assert!(b1 / b2 > 3.5 && b2 < 2e-5, "{b1} {b2}");
    assert!(i1.max(i2) < 5e-5, "{i1} {i2}");
}

#[test]
fn subcritical_point_is_rejected() {
    let p = Problem::new(3, 2.5).unwrap();
    assert!(Eigensystem::build(&p, 400, None, 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ladder_has_unit_spacing(n in 12usize..22, q in 5.0f64..15.0) {
        let p = Problem::new(n, q).unwrap();
        let es = Eigensystem::build(&p, 200, None, 4).unwrap();
        let gamma = &es.exponents[0];
        for j in 1..6 {
            let gap = eigenvalue(j + 1, gamma, &p) - eigenvalue(j, gamma, &p);
            prop_assert!((gap - 1.0).abs() <= 8.0 * f64::EPSILON * j as f64);
        }
        let g = gamma.value;
        prop_assert!(p.m < g && g < (p.nf() - 2.0) / 2.0);
    }

    #[test]
    fn linear_fit_recovers_slope(a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let pts: Vec<(f64, f64)> = (0..20).map(|k| (k as f64 * 0.3, a * k as f64 * 0.3 + b)).collect();
        let (s, i, _) = linear_fit(&pts);
        prop_assert!((s - a).abs() < 1e-10 && (i - b).abs() < 1e-10);
    }
}
