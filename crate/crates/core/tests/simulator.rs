use std::sync::OnceLock;

use approx::assert_relative_eq;
use blowuplab::angular::Problem;
use blowuplab::fv::AxialField;
use blowuplab::simulator::*;
use proptest::prelude::*;

fn model() -> &'static Model {
    static M: OnceLock<Model> = OnceLock::new();
    M.get_or_init(|| Model::build(&Problem::new(16, 10.0).unwrap(), &ModelOptions::default()).unwrap())
}

fn short_grid() -> SimGridOptions {
    SimGridOptions { horizon: 1.0, ..Default::default() }
}

#[test]
fn frame_for_16_10() {
    let f = &model().frame;
    f.check().unwrap();
    assert_eq!(f.ell, 3);
    assert_eq!(f.pi, vec![(1, 1), (1, 2)]);
    assert_eq!(f.pi_bar, vec![(1, 1), (1, 2), (1, 3)]);
    assert_relative_eq!(f.lambda_star, 0.814_649_196_9, max_relative = 1e-8);
    assert_relative_eq!(f.omega, f.lambda_star / (f.gamma - f.m), max_relative = 1e-14);
    assert_relative_eq!(f.eps0, f.c_1ell / 4.0, max_relative = 1e-14);
    assert_relative_eq!(f.eps1, f.eps0 / (2.0 * f.c1), max_relative = 1e-14);
    assert!(f.big_h < f.big_k);
    assert!(f.sigma_exp < f.varrho && f.varrho < 0.5);
    assert!(f.sigma_exp > (f.lambda_star / (2.0 * f.lambda_star + 1.0)).max(0.5 / f.q));
    assert!(f.m0 > 1.0);
    assert!(f.beta0 > f.alpha);
    assert_relative_eq!(f.target_rate(), f.m * f.omega, max_relative = 1e-14);
    assert_relative_eq!(f.beta(f.s1 + 1.0), f.beta(f.s1) * (f.m * f.omega).exp(), max_relative = 1e-12);
}

#[test]
fn frame_rejects_bad_exponents() {
    let p = Problem::new(16, 10.0).unwrap();
    let m = model();
    let opts = FrameOptions { sigma_exp: Some(0.6), ..Default::default() };
    assert!(build_frame(&m.es, m.k1.value, &opts).is_err());
    let opts = FrameOptions { a_prime: 0.7, ..Default::default() };
    assert!(build_frame(&m.es, m.k1.value, &opts).is_err());
    assert_eq!(p.n, m.frame.n);
}

#[test]
fn initial_data_matches_the_piecewise_recipe() {
    let m = model();
    let f = &m.frame;
    let sim = Simulator::new(m, &short_grid(), EvolveOptions::default()).unwrap();
    let phi = sim.initial_data(&[0.0, 0.0]).unwrap();
    let g = &sim.grid;
    let nt = g.nt();
    let (scale, amp) = ((f.omega * f.s1).exp(), (f.m * f.omega * f.s1).exp());
    for i in 0..g.nr() {
        let r = g.r[i];
        for j in 0..nt {
            let v = phi.values[g.idx(i, j)];
            assert!(v >= 0.0, "negative initial data at r = {r}");
            if r > f.varrho_radius() + 1.0 {
                assert_eq!(v, 0.0);
            }
            if r < f.inner_radius() {
                let inner = amp * m.u_beta(f.alpha, scale * r, g.theta[j]).unwrap();
                assert_relative_eq!(v, inner, max_relative = 1e-14);
            }
        }
    }
    let st = sim.initial_state(&[0.0, 0.0]).unwrap();
    assert!(st.margins.in_a());
    assert!(st.margins.barrier > 0.0);
    let (lo, hi) = st.margins.band;
    assert!(lo > 0.5 && hi < 1.5, "band {lo} {hi}");
}

#[test]
fn initial_data_validates_d() {
    let m = model();
    let sim = Simulator::new(m, &short_grid(), EvolveOptions::default()).unwrap();
    assert!(sim.initial_data(&[0.0]).is_err());
    assert!(sim.initial_data(&[m.frame.d_ball(), 0.0]).is_err());
    let coarse = SimGridOptions { h_core: 0.05, core: 0.05, ..short_grid() };
    assert!(matches!(
        Simulator::new(m, &coarse, EvolveOptions::default()).and_then(|s| s.initial_data(&[0.0, 0.0])),
        Err(blowuplab::Error::Resolution(_))
    ));
}

#[test]
fn projection_at_s1_reproduces_d() {
    let m = model();
    let f = &m.frame;
    let sim = Simulator::new(m, &short_grid(), EvolveOptions::default()).unwrap();
    let p0 = sim.project(&sim.initial_data(&[0.0, 0.0]).unwrap());
    let d = [0.3 * f.d_ball(), -0.4 * f.d_ball()];
    let p = sim.project(&sim.initial_data(&d).unwrap());
    // P(d; s1) = d + P(0; s1) up to the grid error of the sampled modes, and
    // the offset is far below e^{-lambda* s1}
    for k in 0..2 {
        assert!((p[k] - p0[k] - d[k]).abs() < 1e-2 * f.d_ball(), "{k}: {} vs {}", p[k] - p0[k], d[k]);
        assert!(p0[k].abs() < 1e-2 * (-f.lambda_star * f.s1).exp());
    }
    // adding phi_1l leaves every component over Pi unchanged, up to the
    // discrete orthogonality error
    let mut phi = sim.initial_data(&[0.0, 0.0]).unwrap();
    let ell = sim.mode_field((1, f.ell)).unwrap();
    phi.values.iter_mut().zip(&ell.values).for_each(|(v, e)| *v += 1e-3 * e);
    let shifted = sim.project(&phi);
    for k in 0..2 {
        assert!((shifted[k] - p0[k]).abs() < 1e-3 * 1e-3, "{k}: {}", shifted[k] - p0[k]);
    }
}

#[test]
fn jacobian_at_s1_is_identity() {
    let m = model();
    let f = &m.frame;
    let sim = Simulator::new(m, &short_grid(), EvolveOptions::default()).unwrap();
    let h = 0.05 * f.d_ball();
    let (_, jac) = sim.projection_jacobian(&[0.0, 0.0], f.s1, h).unwrap();
    for (r, row) in jac.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let target = if r == c { 1.0 } else { 0.0 };
            assert!((v - target).abs() < 0.1, "J[{r}][{c}] = {v}");
        }
    }
}

#[test]
fn zero_data_stays_zero() {
    let m = model();
    let opts = EvolveOptions { well_balanced: false, ..Default::default() };
    let sim = Simulator::new(m, &short_grid(), opts).unwrap();
    let phi = AxialField::zeros(&sim.grid);
    let s = m.frame.s1;
    let state = SimState { s, margins: sim.margins(&phi, s).unwrap(), phi, d: vec![0.0, 0.0] };
    let traj = sim.evolve(&state, s + 0.1).unwrap();
    assert!(traj.final_state.phi.values.iter().all(|v| *v == 0.0));
}

#[test]
fn short_run_stays_in_the_region() {
    let m = model();
    let sim = Simulator::new(m, &short_grid(), EvolveOptions::default()).unwrap();
    let st = sim.initial_state(&[0.0, 0.0]).unwrap();
    let traj = sim.evolve(&st, m.frame.s1 + 0.2).unwrap();
    assert!(traj.exit_s.is_none());
    assert!(traj.points.iter().all(|p| p.margins.in_a() && p.sup > 0.0));
    let csv = traj.csv(&m.frame.pi);
    assert!(csv.starts_with("s,sup_phi,margins_inner,margins_mid,margins_outer,margin_barrier,P_1_1,P_1_2\n"));
    assert_eq!(csv.lines().count(), traj.points.len() + 1);
}

#[test]
fn unstable_mode_grows_at_its_eigenvalue() {
    let m = model();
    let sim = Simulator::new(m, &short_grid(), EvolveOptions::default()).unwrap();
    let d = sim.linear_decay((1, 1), 0.5).unwrap();
    assert!(d.rel_error < 0.02, "{d:?}");
    assert!((d.fitted_lambda - d.lambda).abs() < 0.02 * d.lambda.abs());
}

#[test]
fn rate_fit_on_exact_exponential() {
    let series: Vec<(f64, f64)> = (0..50).map(|k| (8.0 + 0.1 * k as f64, 2.0 * (0.0382 * (8.0 + 0.1 * k as f64)).exp())).collect();
    let fit = rate_fit(&series, 1.0).unwrap();
    assert_relative_eq!(fit.slope, 0.0382, max_relative = 1e-10);
    assert!(fit.reliable);
    assert!(!rate_fit(&series, 30.0).unwrap().reliable);
    assert!(rate_fit(&series[..2], 0.0).is_err());
    assert_eq!(type_classify(&series, &TypeThresholds::default()), BlowupType::TypeII);
}

#[test]
fn constant_norm_is_type_one() {
    let series: Vec<(f64, f64)> = (0..40).map(|k| (k as f64 * 0.25, 0.57 + 0.01 * (k as f64).sin())).collect();
    assert_eq!(type_classify(&series, &TypeThresholds::default()), BlowupType::TypeI);
    assert_eq!(type_classify(&[], &TypeThresholds::default()), BlowupType::Undetermined);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rate_fit_recovers_any_exponential(rate in -1.0f64..1.0, c in 0.1f64..10.0) {
        let series: Vec<(f64, f64)> = (0..30).map(|k| { let s = 0.2 * k as f64; (s, c * (rate * s).exp()) }).collect();
        let fit = rate_fit(&series, 0.0).unwrap();
        prop_assert!((fit.slope - rate).abs() < 1e-9);
        prop_assert!(fit.ci95.0 <= fit.slope && fit.slope <= fit.ci95.1);
    }
}
