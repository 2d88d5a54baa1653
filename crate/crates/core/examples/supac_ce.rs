// Minimizing Catoni's objective for a black-box risk in two dimensions and
// checking the solver against the closed form on a quadratic risk.

use nalgebra::dvector;
use supac::expfam::FamilySpec;
use supac::risk::RiskSpec;
use supac::solver::{evaluate_posterior, exact_objective_in_f, run_supac_ce, surrogate_argmin, CatoniConfig};

pub fn run_example() -> supac::Result<()> {
    let family = FamilySpec::full(2)?;
    let prior = family.standard_normal();

    let risk = RiskSpec::custom(2, |x| ((x[0] - 1.5).powi(2) + 0.5 * (x[1] + 1.0).powi(2)).tanh());
    let cfg = CatoniConfig {
        lambda: 0.05,
        max_steps: 40,
        n_mc_weights: 10_000,
        ..CatoniConfig::default()
    };
    let out = run_supac_ce(&risk, &family, &prior, &prior, &cfg, 1)?;
    let last = out.trace.last().expect("at least one step");
    println!("{} steps, {} queries, surrogate objective {:.4}", out.trace.len(), last.queries, last.obj_cat);
    let report = evaluate_posterior(&risk, &family, &out.posterior, &prior, &cfg, 20_000, 2)?;
    println!("fresh-sample objective {:.4}, bound {:.4}", report.obj_cat, report.pb_cat);
    println!("posterior mean {:.4?}", family.moments_from_natural(&out.posterior)?.mean.as_slice());

    // A risk inside the span of the statistics is optimized in one step.
    let eta = dvector![-0.1, 0.05, 0.02, 0.0, 0.03];
    let quad = RiskSpec::quadratic(&family, &eta, 0.5)?;
    let exact = CatoniConfig {
        lambda: 0.1,
        kl_max: f64::INFINITY,
        alpha_max: 1.0,
        n_mc_weights: 10_000,
        ..CatoniConfig::default()
    };
    let out = run_supac_ce(&quad, &family, &prior, &prior, &exact, 3)?;
    let gibbs = surrogate_argmin(&prior, &eta, exact.lambda);
    println!(
        "quadratic risk: solver objective {:.8}, Gibbs objective {:.8}, {} steps",
        exact_objective_in_f(&family, &out.posterior, &prior, &eta, 0.5, exact.lambda)?,
        exact_objective_in_f(&family, &gibbs, &prior, &eta, 0.5, exact.lambda)?,
        out.trace.len()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> supac::Result<()> {
    run_example()
}
