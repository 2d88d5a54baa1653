mod common;

use common::*;
use nalgebra::DVector;
use supac::baselines::{catoni_gradient_estimate, run_gd, GdConfig};
use supac::expfam::{FamilySpec, NaturalParams};
use supac::quadrature::GaussHermite;
use supac::risk::{Risk, RiskSpec};
use supac::solver::{run_supac_ce, CatoniConfig};

#[test]
fn risk_gradient_estimate_is_unbiased() {
    let family = FamilySpec::full(1).unwrap();
    let risk = RiskSpec::custom(1, |x| (2.0 * x[0]).sin() + 0.5 * x[0] * x[0]);
    let gh = GaussHermite::new(80);
    let mut r = rng(40);
    for trial in 0..3 {
        let theta = random_theta(&family, &mut r);
        let expected = |x: &DVector<f64>| gh.expect(&family.gaussian(&NaturalParams::new(x.clone())).unwrap(), |p| risk.value(p));
        let exact = fd_gradient(&expected, theta.coords(), 1e-4);

        let reps = 10_000;
        let m = 10;
        let samples = family.sample(&theta, reps * m, trial).unwrap();
        let values = risk.eval_batch(&samples).unwrap();
        let mut mean = DVector::zeros(2);
        let mut sq = DVector::zeros(2);
        for j in 0..reps {
            let range = j * m..(j + 1) * m;
            // Prior equal to θ removes the exact KL term.
            let g = catoni_gradient_estimate(&family, &theta, &theta, &samples[range.clone()], &values[range], 1.0).unwrap();
            mean += &g;
            sq += g.component_mul(&g);
        }
        mean /= reps as f64;
        sq /= reps as f64;
        for i in 0..2 {
            let se = ((sq[i] - mean[i] * mean[i]) / reps as f64).sqrt();
            assert!((mean[i] - exact[i]).abs() < 4.0 * se, "trial {trial} coord {i}: {} vs {}", mean[i], exact[i]);
        }
    }
}

#[test]
fn query_grids_align_with_surrogate_solver() {
    let family = FamilySpec::full(2).unwrap();
    let prior = family.standard_normal();
    let risk = RiskSpec::custom(2, |x| (x[0] + 0.5 * x[1]).tanh());
    let catoni = CatoniConfig {
        lambda: 0.1,
        n_initial_queries: 32,
        n_queries_per_step: 32,
        n_mc_weights: 2_000,
        convergence_kl_tol: 0.0,
        max_queries: Some(320),
        ..CatoniConfig::default()
    };
    let gd = GdConfig {
        step_size: 0.05,
        momentum: 0.0,
        per_step: 32,
        max_queries: 320,
    };
    let (_, gd_trace) = run_gd(&risk, &family, &prior, &prior, &gd, &catoni, 1).unwrap();
    let sol = run_supac_ce(&risk, &family, &prior, &prior, &catoni, 1).unwrap();
    assert_eq!(gd_trace.query_grid(), sol.trace.query_grid());
    assert_eq!(gd_trace.query_grid().last(), Some(&320));
}

#[test]
fn iterates_stay_in_the_domain_under_large_steps() {
    let family = FamilySpec::full(2).unwrap();
    let prior = family.standard_normal();
    let risk = RiskSpec::custom(2, |x| -(x[0] * x[0] + x[1] * x[1]).min(50.0));
    let gd = GdConfig {
        step_size: 5.0,
        momentum: 0.9,
        per_step: 20,
        max_queries: 400,
    };
    let (theta, trace) = run_gd(&risk, &family, &prior, &prior, &gd, &CatoniConfig::default(), 3).unwrap();
    assert!(family.contains(&theta));
    assert!(trace.records.iter().all(|r| family.contains(&r.theta)));
}

#[test]
fn gradient_descent_lowers_a_quadratic_objective() {
    let family = FamilySpec::full(1).unwrap();
    let prior = family.standard_normal();
    let eta = DVector::from_vec(vec![-0.3, 0.05]);
    let risk = RiskSpec::quadratic(&family, &eta, 1.0).unwrap();
    let catoni = CatoniConfig {
        lambda: 0.1,
        ..CatoniConfig::default()
    };
    let gd = GdConfig {
        step_size: 0.5,
        momentum: 0.0,
        per_step: 200,
        max_queries: 20_000,
    };
    let (theta, _) = run_gd(&risk, &family, &prior, &prior, &gd, &catoni, 5).unwrap();
    let obj = |t: &NaturalParams| supac::solver::exact_objective_in_f(&family, t, &prior, &eta, 1.0, 0.1).unwrap();
    let best = obj(&supac::solver::surrogate_argmin(&prior, &eta, 0.1));
    assert!(obj(&theta) < obj(&prior));
    assert!(obj(&theta) - best < 0.1 * (obj(&prior) - best), "{} vs {best}", obj(&theta));
}
