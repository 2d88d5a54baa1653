//! Score-function gradient descent on Catoni's objective, with optional
//! Nesterov momentum, at the same query accounting as the surrogate solver.

use log::debug;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{FamilySpec, NaturalParams};
use crate::rng::{self, stream};
use crate::risk::Risk;
use crate::solver::{catoni_objective, CatoniConfig, SolverRecord, SolverTrace};

/// Halvings tried before a step is dropped entirely.
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdConfig {
    pub step_size: f64,
    /// 0 gives plain gradient descent.
    #[serde(default)]
    pub momentum: f64,
    /// Risk queries per gradient estimate.
    pub per_step: usize,
    pub max_queries: usize,
}

impl GdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("gd.step_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("gd.momentum", "must lie in [0, 1)"));
        }
        if self.per_step == 0 {
            return Err(Error::config("gd.per_step", "must be at least 1"));
        }
        Ok(())
    }
}

/// `(1/m) Σ R(x_j)(T(x_j) − ∇g(θ)) + λ I(θ)(θ − θ_p)`.
///
/// Only the risk term is stochastic; the KL gradient is exact.
pub fn catoni_gradient_estimate(
    family: &FamilySpec,
    theta: &NaturalParams,
    prior: &NaturalParams,
    samples: &[Vec<f64>],
    values: &[f64],
    lambda: f64,
) -> Result<DVector<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyStack);
    }
    if samples.len() != values.len() {
        return Err(Error::LengthMismatch {
            what: "values",
            left: values.len(),
            right: samples.len(),
        });
    }
    let g = family.gaussian(theta)?;
    let mean_t = family.mean_suff_stat_of(&g);
    let d = family.dim();
    let mut acc = DVector::zeros(d);
    let mut t = DVector::zeros(d);
    for (x, r) in samples.iter().zip(values) {
        family.suff_stat_into(x, t.as_mut_slice());
        t -= &mean_t;
        acc.axpy(*r, &t, 1.0);
    }
    acc /= samples.len() as f64;
    let kl_grad = family.fisher_info_of(&g) * (theta.coords() - prior.coords());
    Ok(acc + kl_grad * lambda)
}

/// Nesterov-accelerated descent on the natural parameters; the gradient is
/// taken at the lookahead point `θ + μ v`. Steps leaving the domain are
/// halved until they land inside it.
pub fn run_gd(
    risk: &dyn Risk,
    family: &FamilySpec,
    prior: &NaturalParams,
    init: &NaturalParams,
    gd: &GdConfig,
    catoni: &CatoniConfig,
    seed: u64,
) -> Result<(NaturalParams, SolverTrace)> {
    gd.validate()?;
    catoni.validate()?;
    family.gaussian(init)?;
    family.gaussian(prior)?;
    let d = family.dim();
    let mut theta = init.clone();
    let mut velocity = DVector::zeros(d);
    let mut used = 0usize;
    let mut trace = SolverTrace::default();
    let mut step = 0usize;

    while used + gd.per_step <= gd.max_queries {
        let look = shrink_into_domain(family, &theta, &(&velocity * gd.momentum)).0;
        let samples = family.sample(&look, gd.per_step, rng::derive_seed(seed, &[stream::GRADIENT, step as u64]))?;
        let values = risk.eval_batch(&samples)?;
        used += gd.per_step;
        let grad = catoni_gradient_estimate(family, &look, prior, &samples, &values, catoni.lambda)?;

        let proposed = &velocity * gd.momentum - grad * gd.step_size;
        let (next, scale) = shrink_into_domain(family, &theta, &proposed);
        velocity = proposed * scale;
        let kl_step = family.kl(&next, &theta)?;
        theta = next;

        let kl_to_prior = family.kl(&theta, prior)?;
        let mean_risk = values.iter().sum::<f64>() / values.len() as f64;
        let obj = catoni_objective(mean_risk, kl_to_prior, catoni.lambda);
        debug!("gd step {step}: queries {used} obj {obj:.6} scale {scale}");
        trace.records.push(SolverRecord {
            step,
            queries: used,
            obj_cat: obj,
            pb_cat: obj + catoni.bound_offset(),
            kl_to_prior,
            alpha: scale,
            kl_step,
            theta: theta.clone(),
        });
        step += 1;
    }
    Ok((theta, trace))
}

/// Largest `2^-j` with `theta + 2^-j·dir` in the domain; `(theta, 0)` if none.
fn shrink_into_domain(family: &FamilySpec, theta: &NaturalParams, dir: &DVector<f64>) -> (NaturalParams, f64) {
    let mut scale = 1.0;
    for _ in 0..MAX_HALVINGS {
        let cand = theta.step(dir, scale);
        if family.contains(&cand) {
            return (cand, scale);
        }
        scale *= 0.5;
    }
    (theta.clone(), 0.0)
}
