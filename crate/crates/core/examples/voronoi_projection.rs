// Projecting a risk onto the span of the sufficient statistics, with
// evaluations weighted by the probability of their Voronoi cells.

use supac::approx::{exact_voronoi_weights_1d, population_projection, project, voronoi_weights};
use supac::expfam::FamilySpec;
use supac::quadrature::GaussHermite;
use supac::risk::{EvalStack, RiskSpec};

pub fn run_example() -> supac::Result<()> {
    let family = FamilySpec::full(1)?;
    let theta = family.standard_normal();
    let risk = RiskSpec::custom(1, |x| x[0].powi(3));

    let mut stack = EvalStack::new();
    stack.query(&risk, vec![vec![-1.0], vec![0.0], vec![2.0]], 0)?;
    let exact = exact_voronoi_weights_1d(&stack, &family, &theta)?;
    let mc = voronoi_weights(&stack, &family, &theta, 100_000, 1)?;
    println!("cell probabilities {:.5?}", exact.as_slice());
    println!("Monte Carlo estimate {:.5?}", mc.as_slice());

    stack.query(&risk, family.sample(&theta, 400, 2)?, 1)?;
    let weights = voronoi_weights(&stack, &family, &theta, 40_000, 3)?;
    let fit = project(&stack, &weights, &family, None)?;
    let pop = population_projection(&family, &theta, &risk, &GaussHermite::new(40))?;
    println!("empirical projection eta {:.3?} c {:.3}", fit.eta.as_slice(), fit.c);
    println!("population projection eta {:.3?} c {:.3}", pop.eta.as_slice(), pop.c);
    Ok(())
}

#[allow(dead_code)]
fn main() -> supac::Result<()> {
    run_example()
}
