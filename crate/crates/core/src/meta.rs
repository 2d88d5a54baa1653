//! Meta-learning of the prior: stochastic descent on the sum of per-task
//! optimized Catoni objectives, with warm-restarted inner solves that keep
//! each task's evaluation stack across epochs.

use std::f64::consts::PI;
use std::io::Write;

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{FamilySpec, NaturalParams};
use crate::rng::{self, stream};
use crate::risk::{EvalStack, RiskSpec};
use crate::solver::{self, CatoniConfig};

/// Law of synthetic tasks: minimizers `x0 ~ N(center, Σ0)`, frequency
/// `ω ~ U(3π/2, 5π/2)`, distortion `A_ij ~ N(δ_ij, 0.05²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskDistribution {
    pub center: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    sigma0_chol: DMatrix<f64>,
}

pub const CENTER_RADIUS: f64 = 2.0;
pub const SMALL_SD: f64 = 0.05;
pub const A_SD: f64 = 0.05;

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
pub fn random_orthogonal(k: usize, rng: &mut rng::Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = m.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

impl SyntheticTaskDistribution {
    /// Requires `k ≥ 3`.
    pub fn new(seed: u64, k: usize) -> Result<Self> {
        if k < 3 {
            return Err(Error::config("tasks.k", "synthetic tasks need k >= 3"));
        }
        let mut rng = rng::rng_from(seed, &[stream::TASK, 0]);
        let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let center = &z * (CENTER_RADIUS / z.norm());
        let o = random_orthogonal(k, &mut rng);
        let mut sds = vec![SMALL_SD; k];
        for sd in &mut sds[k - 2..] {
            *sd = rng.random_range(-0.5..0.5f64).exp();
        }
        let diag = DMatrix::from_diagonal(&DVector::from_iterator(k, sds.iter().map(|s| s * s)));
        let mut sigma0 = &o * diag * o.transpose();
        for i in 0..k {
            for j in (i + 1)..k {
                let v = 0.5 * (sigma0[(i, j)] + sigma0[(j, i)]);
                sigma0[(i, j)] = v;
                sigma0[(j, i)] = v;
            }
        }
        let sigma0_chol = sigma0
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidMoments("task covariance not positive definite".into()))?
            .l();
        Ok(SyntheticTaskDistribution {
            center,
            sigma0,
            sigma0_chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn sample_risk(&self, task_seed: u64) -> RiskSpec {
        let k = self.dim();
        let mut rng = rng::rng_from(task_seed, &[stream::TASK, 1]);
        let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x0 = &self.center + &self.sigma0_chol * z;
        let omega = rng.random_range(1.5 * PI..2.5 * PI);
        let a = DMatrix::from_fn(k, k, |i, j| {
            let base = if i == j { 1.0 } else { 0.0 };
            base + A_SD * rng.sample::<f64, _>(StandardNormal)
        });
        RiskSpec::tanh_synthetic(omega, &a, &x0).expect("shapes agree by construction")
    }

    pub fn sample_task(&self, task_seed: u64, lambda: f64) -> TaskSpec {
        TaskSpec::new(task_seed, self.sample_risk(task_seed), lambda)
    }
}

/// Draw the task law from `seed` and one task from it.
pub fn sample_synthetic_task(seed: u64, k: usize, lambda: f64) -> Result<TaskSpec> {
    Ok(SyntheticTaskDistribution::new(seed, k)?.sample_task(seed, lambda))
}

/// One learning task together with the state carried across meta-epochs.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    /// Stable identifier; also keys the task's random streams.
    pub id: u64,
    pub risk: RiskSpec,
    pub lambda: f64,
    pub stack: EvalStack,
    /// Last inner solution, `None` before the first solve.
    pub posterior: Option<NaturalParams>,
    /// Number of inner solves performed so far.
    pub solves: u64,
    /// Objective estimate from the last inner solve.
    pub last_objective: Option<f64>,
}

/// Replayable description of a task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: u64,
    pub lambda: f64,
    pub risk: RiskSpec,
}

impl TaskSpec {
    pub fn new(id: u64, risk: RiskSpec, lambda: f64) -> Self {
        TaskSpec {
            id,
            risk,
            lambda,
            stack: EvalStack::new(),
            posterior: None,
            solves: 0,
            last_objective: None,
        }
    }

    pub fn record(&self) -> TaskRecord {
        TaskRecord {
            id: self.id,
            lambda: self.lambda,
            risk: self.risk.clone(),
        }
    }

    pub fn from_record(r: TaskRecord) -> Self {
        TaskSpec::new(r.id, r.risk, r.lambda)
    }

    /// Optimize the task's objective for `prior`, starting from the stored
    /// posterior (or the prior) and reusing the stored stack. Returns the
    /// optimized objective estimate.
    pub fn solve(&mut self, family: &FamilySpec, prior: &NaturalParams, inner: &CatoniConfig, seed: u64) -> Result<f64> {
        let cfg = CatoniConfig {
            lambda: self.lambda,
            ..inner.clone()
        };
        let init = self.posterior.clone().unwrap_or_else(|| prior.clone());
        let stack = std::mem::take(&mut self.stack);
        let task_seed = rng::derive_seed(seed, &[stream::TASK, self.id, self.solves]);
        let out = match solver::solve_with_stack(&self.risk, family, prior, &init, &cfg, stack.clone(), task_seed) {
            Ok(out) => out,
            Err(e) => {
                self.stack = stack;
                return Err(e);
            }
        };
        let obj = match out.trace.last() {
            Some(r) => r.obj_cat,
            None => solver::catoni_objective(
                out.last_fit
                    .as_ref()
                    .map(|f| f.expected_under(family, &family.gaussian(&out.posterior).unwrap()))
                    .unwrap_or(f64::NAN),
                family.kl(&out.posterior, prior)?,
                self.lambda,
            ),
        };
        self.stack = out.stack;
        self.posterior = Some(out.posterior);
        self.solves += 1;
        self.last_objective = Some(obj);
        Ok(obj)
    }
}

/// `Σ_i λ_i (∇g(θ_p) − ∇g(θ̂_i))`, the derivative of the summed optimized
/// objectives in the prior. No derivative of the posteriors is needed since
/// each one zeroes its own objective's gradient.
pub fn meta_gradient(
    family: &FamilySpec,
    prior: &NaturalParams,
    posteriors: &[NaturalParams],
    lambdas: &[f64],
) -> Result<DVector<f64>> {
    if posteriors.len() != lambdas.len() {
        return Err(Error::LengthMismatch {
            what: "lambdas",
            left: lambdas.len(),
            right: posteriors.len(),
        });
    }
    let grad_prior = family.mean_suff_stat(prior)?;
    let mut out = DVector::zeros(family.dim());
    for (post, lam) in posteriors.iter().zip(lambdas) {
        if post.len() != family.dim() {
            return Err(Error::DimensionMismatch {
                expected: family.dim(),
                got: post.len(),
            });
        }
        out += (&grad_prior - family.mean_suff_stat(post)?) * *lam;
    }
    Ok(out)
}

/// `M(θ_p) = Σ_i min_θ Obj_Cat,i(θ; θ_p)`, each minimum from an inner
/// solve warm-started from the task's stored state. Tasks are not mutated.
pub fn meta_objective(
    family: &FamilySpec,
    prior: &NaturalParams,
    tasks: &[TaskSpec],
    inner: &CatoniConfig,
    seed: u64,
) -> Result<f64> {
    family.gaussian(prior)?;
    let mut values = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut t = t.clone();
            t.solve(family, prior, inner, seed)
                .map(|v| (t.id, v))
                .map_err(|e| Error::Task { task: i, source: Box::new(e) })
        })
        .collect::<Result<Vec<_>>>()?;
    values.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(values.iter().map(|v| v.1).sum())
}

/// Step size and prior trust region from `from_epoch` onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaPhase {
    pub from_epoch: usize,
    /// In units of `1/λ`.
    pub step_size: f64,
    pub meta_kl_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Batch size during the first epoch, when every task is calibrated.
    pub first_batch_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub phases: Vec<MetaPhase>,
    /// Inner schedule for a task's first solve.
    pub first_pass: CatoniConfig,
    /// Inner schedule for warm restarts.
    pub warm: CatoniConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        let mut first_schedule = vec![100; 5];
        first_schedule.extend([50; 10]);
        MetaConfig {
            first_batch_size: 10,
            batch_size: 20,
            epochs: 30,
            phases: vec![
                MetaPhase {
                    from_epoch: 0,
                    step_size: 1.0,
                    meta_kl_max: 0.2,
                },
                MetaPhase {
                    from_epoch: 20,
                    step_size: 0.5,
                    meta_kl_max: 0.1,
                },
                MetaPhase {
                    from_epoch: 50,
                    step_size: 0.4,
                    meta_kl_max: 0.1,
                },
            ],
            first_pass: CatoniConfig {
                kl_max: 0.5,
                alpha_max: 0.3,
                n_mc_weights: 10_000,
                max_steps: 15,
                query_schedule: Some(first_schedule),
                convergence_kl_tol: 0.0,
                ..CatoniConfig::default()
            },
            warm: CatoniConfig {
                kl_max: 0.5,
                alpha_max: 0.7,
                n_mc_weights: 10_000,
                max_steps: 4,
                query_schedule: Some(vec![20, 0, 20, 0]),
                convergence_kl_tol: 0.0,
                ..CatoniConfig::default()
            },
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.first_batch_size == 0 || self.batch_size == 0 {
            return Err(Error::config("meta.batch_size", "must be at least 1"));
        }
        if self.phases.is_empty() || self.phases[0].from_epoch != 0 {
            return Err(Error::config("meta.phases", "must start at epoch 0"));
        }
        if self.phases.windows(2).any(|w| w[1].from_epoch <= w[0].from_epoch) {
            return Err(Error::config("meta.phases", "epochs must be increasing"));
        }
        if self.phases.iter().any(|p| !(p.step_size > 0.0) || !(p.meta_kl_max > 0.0)) {
            return Err(Error::config("meta.phases", "step_size and meta_kl_max must be positive"));
        }
        self.first_pass.validate()?;
        self.warm.validate()
    }

    pub fn phase(&self, epoch: usize) -> &MetaPhase {
        self.phases
            .iter()
            .rev()
            .find(|p| p.from_epoch <= epoch)
            .unwrap_or(&self.phases[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaRecord {
    pub epoch: usize,
    pub batch: usize,
    /// Mean optimized objective over the batch, at the prior before the update.
    pub meta_obj: f64,
    pub kl_step: f64,
    /// Prior after the update.
    pub theta_p: NaturalParams,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetaTrace {
    pub records: Vec<MetaRecord>,
}

impl MetaTrace {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["epoch", "batch", "meta_obj", "kl_step", "theta_p_json"])?;
        for r in &self.records {
            wr.write_record([
                r.epoch.to_string(),
                r.batch.to_string(),
                r.meta_obj.to_string(),
                r.kl_step.to_string(),
                r.theta_p.to_json(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Mean of the batch objectives of each epoch, weighted by batch size.
    pub fn epoch_objectives(&self, batch_sizes: impl Fn(usize, usize) -> usize) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.records {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            let n = batch_sizes(r.epoch, r.batch);
            out[r.epoch].0 += r.meta_obj * n as f64;
            out[r.epoch].1 += n;
        }
        out.into_iter().map(|(s, n)| s / n as f64).collect()
    }

    /// Prior in effect at the end of each epoch.
    pub fn epoch_priors(&self) -> Vec<NaturalParams> {
        let mut out: Vec<NaturalParams> = Vec::new();
        for r in &self.records {
            if out.len() <= r.epoch {
                out.push(r.theta_p.clone());
            } else {
                out[r.epoch] = r.theta_p.clone();
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct MetaOutput {
    pub prior: NaturalParams,
    pub trace: MetaTrace,
    pub tasks: Vec<TaskSpec>,
}

/// Mini-batch meta descent on the prior.
///
/// Every batch warm-restarts its tasks' inner solves, sums the meta
/// gradient over the batch and moves the prior by `step_size/λ̄` times that
/// sum, capped at `meta_kl_max` in KL.
pub fn run_meta_sgd(
    mut tasks: Vec<TaskSpec>,
    family: &FamilySpec,
    prior0: &NaturalParams,
    cfg: &MetaConfig,
    seed: u64,
) -> Result<MetaOutput> {
    cfg.validate()?;
    family.gaussian(prior0)?;
    if tasks.is_empty() {
        return Err(Error::config("tasks", "at least one training task is required"));
    }
    let mut prior = prior0.clone();
    let mut trace = MetaTrace::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..tasks.len()).collect();
        order.shuffle(&mut rng::rng_from(seed, &[stream::META, epoch as u64]));
        let bsize = if epoch == 0 { cfg.first_batch_size } else { cfg.batch_size };
        let phase = cfg.phase(epoch).clone();
        for (b, batch) in order.chunks(bsize).enumerate() {
            let mut objs = Vec::with_capacity(batch.len());
            for &i in batch {
                let task = &mut tasks[i];
                let inner = if task.posterior.is_some() { &cfg.warm } else { &cfg.first_pass };
                let obj = task
                    .solve(family, &prior, inner, seed)
                    .map_err(|e| Error::Task { task: i, source: Box::new(e) })?;
                objs.push(obj);
            }
            let posteriors: Vec<NaturalParams> = batch
                .iter()
                .map(|&i| tasks[i].posterior.clone().expect("solved above"))
                .collect();
            let lambdas: Vec<f64> = batch.iter().map(|&i| tasks[i].lambda).collect();
            let grad = meta_gradient(family, &prior, &posteriors, &lambdas)?;
            let mean_lambda = lambdas.iter().sum::<f64>() / lambdas.len() as f64;
            let scale = phase.step_size / mean_lambda;
            let candidate = NaturalParams::new(prior.coords() - grad * scale);
            let (next, _) = solver::damped_update(family, &prior, &candidate, phase.meta_kl_max, 1.0)?;
            let kl_step = family.kl(&next, &prior)?;
            let meta_obj = objs.iter().sum::<f64>() / objs.len() as f64;
            info!("meta epoch {epoch} batch {b}: objective {meta_obj:.5}, prior step KL {kl_step:.4}");
            trace.records.push(MetaRecord {
                epoch,
                batch: b,
                meta_obj,
                kl_step,
                theta_p: next.clone(),
            });
            prior = next;
        }
    }
    Ok(MetaOutput { prior, trace, tasks })
}

/// Calibrate fresh copies of `tasks` from scratch under `prior` and assess
/// each posterior on `eval_samples` fresh draws. Returns one objective per
/// task.
pub fn evaluate_prior(
    tasks: &[TaskSpec],
    family: &FamilySpec,
    prior: &NaturalParams,
    inner: &CatoniConfig,
    eval_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let cfg = CatoniConfig {
                lambda: t.lambda,
                ..inner.clone()
            };
            let task_seed = rng::derive_seed(seed, &[stream::TASK, t.id]);
            let run = || -> Result<f64> {
                let out = solver::run_supac_ce(&t.risk, family, prior, prior, &cfg, task_seed)?;
                let rep = solver::evaluate_posterior(&t.risk, family, &out.posterior, prior, &cfg, eval_samples, task_seed)?;
                Ok(rep.obj_cat)
            };
            run().map_err(|e| Error::Task { task: i, source: Box::new(e) })
        })
        .collect()
}
