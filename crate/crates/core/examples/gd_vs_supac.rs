// Query-efficiency comparison on synthetic tanh tasks in eight dimensions:
// the surrogate solver against plain and Nesterov gradient descent at the
// same budget of risk queries. Prints the median final objective of each
// configuration, estimated from fresh posterior draws.

use std::time::Instant;

use supac::baselines::{run_gd, GdConfig};
use supac::expfam::{FamilySpec, NaturalParams};
use supac::meta::SyntheticTaskDistribution;
use supac::rng::derive_seed;
use supac::solver::{evaluate_posterior, run_supac_ce, CatoniConfig};

pub const BUDGET: usize = 2000;

pub struct Benchmark {
    pub supac: Vec<f64>,
    /// `(label, final objectives)` per gradient configuration.
    pub gd: Vec<(String, Vec<f64>)>,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    supac::experiment::quantile_sorted(&s, 0.5)
}

pub fn run_benchmark(repeats: usize, n_mc_weights: usize, eval_samples: usize) -> supac::Result<Benchmark> {
    let k = 8;
    let family = FamilySpec::full(k)?;
    let prior = family.standard_normal();
    let dist = SyntheticTaskDistribution::new(2024, k)?;
    let catoni = CatoniConfig {
        lambda: 0.01,
        kl_max: 1.0,
        alpha_max: 0.5,
        n_initial_queries: 160,
        n_queries_per_step: 32,
        n_mc_weights,
        max_queries: Some(BUDGET),
        ..CatoniConfig::default()
    };
    let mut grid: Vec<(String, GdConfig)> = Vec::new();
    for per_step in [80, 160] {
        for step_size in [0.025, 0.05] {
            for momentum in [0.0, 0.5] {
                let name = if momentum > 0.0 { "nesterov" } else { "gd" };
                grid.push((
                    format!("{name} per_step={per_step} step={step_size}"),
                    GdConfig {
                        step_size,
                        momentum,
                        per_step,
                        max_queries: BUDGET,
                    },
                ));
            }
        }
    }
    let evaluate = |risk: &supac::risk::RiskSpec, theta: &NaturalParams, seed: u64| {
        evaluate_posterior(risk, &family, theta, &prior, &catoni, eval_samples, seed).map(|r| r.obj_cat)
    };
    let mut out = Benchmark {
        supac: Vec::new(),
        gd: grid.iter().map(|(n, _)| (n.clone(), Vec::new())).collect(),
    };
    for run in 0..repeats as u64 {
        let risk = dist.sample_risk(derive_seed(2024, &[run]));
        let seed = derive_seed(7, &[run]);
        let sol = run_supac_ce(&risk, &family, &prior, &prior, &catoni, seed)?;
        out.supac.push(evaluate(&risk, &sol.posterior, seed)?);
        for (i, (_, gd)) in grid.iter().enumerate() {
            let (theta, _) = run_gd(&risk, &family, &prior, &prior, gd, &catoni, seed)?;
            out.gd[i].1.push(evaluate(&risk, &theta, seed)?);
        }
    }
    Ok(out)
}

pub fn run_example() -> supac::Result<()> {
    let start = Instant::now();
    let bench = run_benchmark(2, 10_000, 10_000)?;
    println!("supac_ce: median final objective {:.4}", median(&bench.supac));
    for (name, v) in &bench.gd {
        println!("{name}: median final objective {:.4}", median(v));
    }
    println!("elapsed {:.1?}", start.elapsed());
    Ok(())
}

#[allow(dead_code)]
fn main() -> supac::Result<()> {
    run_example()
}
