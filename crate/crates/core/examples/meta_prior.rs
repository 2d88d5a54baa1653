// Meta-learning a Gaussian prior over synthetic tanh tasks in eight
// dimensions. Trains on a set of tasks with warm-restarted inner solves,
// then recalibrates held-out tasks from scratch under successive priors.

use std::time::Instant;

use supac::expfam::{FamilySpec, NaturalParams};
use supac::meta::{evaluate_prior, meta_objective, run_meta_sgd, MetaConfig, MetaOutput, SyntheticTaskDistribution, TaskSpec};
use supac::solver::CatoniConfig;
use supac::rng::derive_seed;

pub struct MetaRun {
    pub output: MetaOutput,
    /// Mean objective of each epoch.
    pub epoch_objectives: Vec<f64>,
    /// Mean warm-restarted objective at the final prior.
    pub final_objective: f64,
    /// `(epochs done, mean test objective)`.
    pub test_curve: Vec<(usize, f64)>,
}

pub fn tasks(dist: &SyntheticTaskDistribution, range: std::ops::Range<u64>, lambda: f64) -> Vec<TaskSpec> {
    range.map(|i| dist.sample_task(derive_seed(11, &[i]), lambda)).collect()
}

pub fn run_meta(epochs: usize, n_train: u64, n_test: u64, test_every: usize, eval_samples: usize) -> supac::Result<MetaRun> {
    let k = 8;
    let lambda = 0.1;
    let family = FamilySpec::full(k)?;
    let prior = family.standard_normal();
    let dist = SyntheticTaskDistribution::new(11, k)?;
    let train = tasks(&dist, 0..n_train, lambda);
    let test = tasks(&dist, n_train..n_train + n_test, lambda);
    let cfg = MetaConfig {
        epochs,
        ..MetaConfig::default()
    };
    let output = run_meta_sgd(train, &family, &prior, &cfg, 3)?;
    let batch_size = |epoch: usize, batch: usize| {
        let size = if epoch == 0 { cfg.first_batch_size } else { cfg.batch_size };
        size.min(n_train as usize - batch * size)
    };
    let epoch_objectives = output.trace.epoch_objectives(batch_size);
    let final_objective = meta_objective(&family, &output.prior, &output.tasks, &cfg.warm, 3)? / n_train as f64;
    let priors = output.trace.epoch_priors();
    // Held-out tasks are calibrated from scratch with five more steps.
    let test_inner = CatoniConfig {
        max_steps: 20,
        ..cfg.first_pass.clone()
    };
    let mut test_curve = Vec::new();
    let mut checkpoints: Vec<usize> = (0..=epochs).step_by(test_every.max(1)).collect();
    if checkpoints.last() != Some(&epochs) {
        checkpoints.push(epochs);
    }
    for e in checkpoints {
        let p: &NaturalParams = if e == 0 { &prior } else { &priors[e - 1] };
        let objs = evaluate_prior(&test, &family, p, &test_inner, eval_samples, 5)?;
        test_curve.push((e, objs.iter().sum::<f64>() / objs.len() as f64));
    }
    Ok(MetaRun {
        output,
        epoch_objectives,
        final_objective,
        test_curve,
    })
}

pub fn run_example() -> supac::Result<()> {
    let start = Instant::now();
    let run = run_meta(6, 6, 3, 3, 5_000)?;
    for (e, obj) in run.epoch_objectives.iter().enumerate() {
        println!("epoch {e}: mean training objective {obj:.4}");
    }
    println!("objective at the final prior {:.4}", run.final_objective);
    for (e, obj) in &run.test_curve {
        println!("after {e} epochs: mean test objective {obj:.4}");
    }
    println!("elapsed {:.1?}", start.elapsed());
    Ok(())
}

#[allow(dead_code)]
fn main() -> supac::Result<()> {
    run_example()
}
