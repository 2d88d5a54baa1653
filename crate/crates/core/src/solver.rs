//! Surrogate Catoni solver: sample, evaluate, weight, project, jump to the
//! closed-form minimizer of the surrogate bound, dampened by a KL trust
//! region.

use std::io::{Read, Write};

use log::debug;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::approx::{self, SurrogateFit, WeightVector, WeightingStrategy};
use crate::error::{Error, Result};
use crate::expfam::{FamilySpec, NaturalParams};
use crate::rng::{self, stream};
use crate::risk::{EvalStack, Risk};

/// Lower bisection bracket width on the dampening factor.
pub const ALPHA_TOL: f64 = 1e-9;
pub const ALPHA_MAX_ITER: usize = 200;

/// Bound constants and solver hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatoniConfig {
    /// PAC-Bayes temperature.
    pub lambda: f64,
    pub delta: f64,
    pub n_data: usize,
    /// Range of the risk, `0 ≤ R ≤ c_range` up to a shift.
    pub c_range: f64,
    /// Maximum KL between successive posteriors; `"inf"` disables it.
    #[serde(with = "serde_inf")]
    pub kl_max: f64,
    pub alpha_max: f64,
    pub n_initial_queries: usize,
    pub n_queries_per_step: usize,
    /// Explicit per-step query counts, overriding the two fields above.
    /// Steps past the end reuse the last entry.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_schedule: Option<Vec<usize>>,
    pub n_mc_weights: usize,
    pub max_steps: usize,
    pub convergence_kl_tol: f64,
    /// Hard cap on risk queries for this solve.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_queries: Option<usize>,
    pub weighting: WeightingStrategy,
}

impl Default for CatoniConfig {
    fn default() -> Self {
        CatoniConfig {
            lambda: 0.002,
            delta: 0.05,
            n_data: 100,
            c_range: 2.0,
            kl_max: 1.0,
            alpha_max: 0.5,
            n_initial_queries: 160,
            n_queries_per_step: 32,
            query_schedule: None,
            n_mc_weights: 40_000,
            max_steps: 296,
            convergence_kl_tol: 1e-8,
            max_queries: None,
            weighting: WeightingStrategy::Voronoi,
        }
    }
}

impl CatoniConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("catoni.{field}"), reason))
            }
        };
        check(self.lambda > 0.0 && self.lambda.is_finite(), "lambda", "must be positive")?;
        check(self.delta > 0.0 && self.delta < 1.0, "delta", "must lie in (0, 1)")?;
        check(self.n_data >= 1, "n_data", "must be at least 1")?;
        check(self.c_range > 0.0, "c_range", "must be positive")?;
        check(self.kl_max > 0.0, "kl_max", "must be positive or inf")?;
        check(self.alpha_max > 0.0 && self.alpha_max <= 1.0, "alpha_max", "must lie in (0, 1]")?;
        check(self.n_mc_weights >= 1, "n_mc_weights", "must be at least 1")?;
        check(self.convergence_kl_tol >= 0.0, "convergence_kl_tol", "must be nonnegative")?;
        if let Some(s) = &self.query_schedule {
            check(!s.is_empty(), "query_schedule", "must not be empty")?;
        }
        Ok(())
    }

    /// Fresh risk queries drawn at `step`.
    pub fn queries_at(&self, step: usize) -> usize {
        match &self.query_schedule {
            Some(s) => *s.get(step).or(s.last()).unwrap_or(&0),
            None if step == 0 => self.n_initial_queries,
            None => self.n_queries_per_step,
        }
    }

    /// `C²/(8λn) − λ log δ`, the part of the bound that does not depend on
    /// the posterior.
    pub fn bound_offset(&self) -> f64 {
        self.c_range.powi(2) / (8.0 * self.lambda * self.n_data as f64) - self.lambda * self.delta.ln()
    }
}

/// Serde helper: `f64` fields that may be infinite, written as `"inf"`.
pub mod serde_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum NumOrStr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Option::<NumOrStr>::deserialize(d)? {
            None => Ok(f64::INFINITY),
            Some(NumOrStr::Num(v)) => Ok(v),
            Some(NumOrStr::Str(s)) => match s.to_ascii_lowercase().as_str() {
                "inf" | "infinity" | "+inf" => Ok(f64::INFINITY),
                other => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got `{other}`"))),
            },
        }
    }
}

/// `Obj_Cat = π[R] + λ KL(π, π_p)`.
pub fn catoni_objective(mean_risk: f64, kl_to_prior: f64, lambda: f64) -> f64 {
    mean_risk + lambda * kl_to_prior
}

/// `PB_Cat = π[R] + λ KL + C²/(8λn) − λ log δ`.
pub fn catoni_bound(mean_risk: f64, kl_to_prior: f64, cfg: &CatoniConfig) -> f64 {
    catoni_objective(mean_risk, kl_to_prior, cfg.lambda) + cfg.bound_offset()
}

/// Closed-form minimizer `θ_p − η/λ` of the bound when the risk is
/// `η·T + C`. Not checked against the domain.
pub fn surrogate_argmin(prior: &NaturalParams, eta: &DVector<f64>, lambda: f64) -> NaturalParams {
    NaturalParams::new(prior.coords() - eta / lambda)
}

/// Move from `theta` toward `candidate` by the largest `α ≤ alpha_max` with
/// the new point in the domain and `KL(new, theta) ≤ kl_max`.
///
/// The feasible set of `α` is an interval starting at 0 (the domain is
/// convex and the KL is nondecreasing along the ray), so bisection returns
/// its lower, feasible endpoint.
pub fn damped_update(
    family: &FamilySpec,
    theta: &NaturalParams,
    candidate: &NaturalParams,
    kl_max: f64,
    alpha_max: f64,
) -> Result<(NaturalParams, f64)> {
    if candidate.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            expected: theta.len(),
            got: candidate.len(),
        });
    }
    let g_theta = family.gaussian(theta)?;
    let dir = candidate.coords() - theta.coords();
    if dir.iter().all(|v| *v == 0.0) {
        return Ok((theta.clone(), alpha_max));
    }
    let feasible = |alpha: f64| -> bool {
        match family.gaussian(&theta.step(&dir, alpha)) {
            Ok(g) => crate::expfam::kl_gaussian(&g, &g_theta) <= kl_max,
            Err(_) => false,
        }
    };
    if feasible(alpha_max) {
        return Ok((theta.step(&dir, alpha_max), alpha_max));
    }
    let (mut lo, mut hi) = (0.0, alpha_max);
    for _ in 0..ALPHA_MAX_ITER {
        if hi - lo <= ALPHA_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((theta.step(&dir, lo), lo))
}

/// `Σ w_i R(x_i)`.
pub fn estimate_mean_risk(stack: &EvalStack, weights: &WeightVector) -> Result<f64> {
    if weights.len() != stack.len() {
        return Err(Error::LengthMismatch {
            what: "weights",
            left: weights.len(),
            right: stack.len(),
        });
    }
    Ok(stack.values().iter().zip(weights.as_slice()).map(|(r, w)| r * w).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverRecord {
    pub step: usize,
    /// Cumulative risk queries made by this run.
    pub queries: usize,
    pub obj_cat: f64,
    pub pb_cat: f64,
    pub kl_to_prior: f64,
    /// Dampening factor used for this step.
    pub alpha: f64,
    /// KL between the new and previous iterate.
    pub kl_step: f64,
    /// Iterate after the step.
    pub theta: NaturalParams,
}

/// Per-step records for a solver or baseline run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverTrace {
    pub records: Vec<SolverRecord>,
}

pub const TRACE_HEADER: [&str; 7] = ["step", "queries", "obj_cat", "pb_cat", "kl_to_prior", "alpha", "theta_json"];

impl SolverTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&SolverRecord> {
        self.records.last()
    }

    pub fn query_grid(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.queries).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(TRACE_HEADER)?;
        for r in &self.records {
            wr.write_record([
                r.step.to_string(),
                r.queries.to_string(),
                r.obj_cat.to_string(),
                r.pb_cat.to_string(),
                r.kl_to_prior.to_string(),
                r.alpha.to_string(),
                r.theta.to_json(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads traces written by [`SolverTrace::write_csv`]. `kl_step` is not
    /// part of the file and is recomputed as NaN.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        if headers.iter().ne(TRACE_HEADER.iter().copied()) {
            return Err(Error::config("trace", "unexpected trace header"));
        }
        let bad = |s: &str| Error::config("trace", format!("bad value `{s}`"));
        let mut records = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(&rec[i]));
            let u = |i: usize| rec[i].parse::<usize>().map_err(|_| bad(&rec[i]));
            records.push(SolverRecord {
                step: u(0)?,
                queries: u(1)?,
                obj_cat: f(2)?,
                pb_cat: f(3)?,
                kl_to_prior: f(4)?,
                alpha: f(5)?,
                kl_step: f64::NAN,
                theta: serde_json::from_str(&rec[6])?,
            });
        }
        Ok(SolverTrace { records })
    }
}

#[derive(Debug, Clone)]
pub struct SolverOutput {
    pub posterior: NaturalParams,
    pub trace: SolverTrace,
    pub stack: EvalStack,
    /// Projection computed at the last step.
    pub last_fit: Option<SurrogateFit>,
}

/// Run the surrogate solver from scratch.
pub fn run_supac_ce(
    risk: &dyn Risk,
    family: &FamilySpec,
    prior: &NaturalParams,
    init: &NaturalParams,
    cfg: &CatoniConfig,
    seed: u64,
) -> Result<SolverOutput> {
    solve_with_stack(risk, family, prior, init, cfg, EvalStack::new(), seed)
}

/// Run the surrogate solver on top of an existing evaluation stack, whose
/// entries are weighted alongside the new ones.
pub fn solve_with_stack(
    risk: &dyn Risk,
    family: &FamilySpec,
    prior: &NaturalParams,
    init: &NaturalParams,
    cfg: &CatoniConfig,
    mut stack: EvalStack,
    seed: u64,
) -> Result<SolverOutput> {
    cfg.validate()?;
    if risk.predictor_dim() != family.predictor_dim() {
        return Err(Error::DimensionMismatch {
            expected: family.predictor_dim(),
            got: risk.predictor_dim(),
        });
    }
    let g_prior = family.gaussian(prior)?;
    family.gaussian(init)?;
    if cfg.weighting == WeightingStrategy::Importance && !stack.is_empty() {
        return Err(Error::config(
            "catoni.weighting",
            "importance weighting needs the generating law of every point; start from an empty stack",
        ));
    }

    let tag_offset = stack.step_of().last().map_or(0, |s| s + 1);
    let start_queries = stack.query_count();
    let mut theta = init.clone();
    let mut generators: Vec<NaturalParams> = Vec::new();
    let mut trace = SolverTrace::default();
    let mut last_fit = None;

    for step in 0..cfg.max_steps {
        let used = stack.query_count() - start_queries;
        let nq = cfg.queries_at(step);
        if let Some(cap) = cfg.max_queries {
            if nq > 0 && used + nq > cap {
                break;
            }
        }
        let points = family.sample(&theta, nq, rng::derive_seed(seed, &[stream::SAMPLE, step as u64]))?;
        stack.query(risk, points, tag_offset + step)?;
        generators.push(theta.clone());
        if stack.is_empty() {
            return Err(Error::SingularInitialDesign { points: 0, dim: family.dim() });
        }

        let weight_seed = rng::derive_seed(seed, &[stream::WEIGHTS, step as u64]);
        let weights = match cfg.weighting {
            WeightingStrategy::Voronoi => approx::voronoi_weights(&stack, family, &theta, cfg.n_mc_weights, weight_seed)?,
            WeightingStrategy::ExactVoronoi1d => approx::exact_voronoi_weights_1d(&stack, family, &theta)?,
            WeightingStrategy::UniformFresh => approx::uniform_fresh_weights(&stack, tag_offset + step)?,
            WeightingStrategy::Importance => approx::importance_weights(&stack, family, &theta, &generators)?,
        };
        let fit = approx::project(&stack, &weights, family, None)?;
        if step == 0 && fit.ridged {
            return Err(Error::SingularInitialDesign {
                points: stack.len(),
                dim: family.dim(),
            });
        }

        let candidate = surrogate_argmin(prior, &fit.eta, cfg.lambda);
        let (next, alpha) = damped_update(family, &theta, &candidate, cfg.kl_max, cfg.alpha_max)?;
        let g_next = family.gaussian(&next)?;
        let kl_step = crate::expfam::kl_gaussian(&g_next, &family.gaussian(&theta)?);
        let kl_to_prior = crate::expfam::kl_gaussian(&g_next, &g_prior);
        let mean_risk = fit.expected_under(family, &g_next);
        let obj = catoni_objective(mean_risk, kl_to_prior, cfg.lambda);
        debug!("step {step}: queries {} obj {obj:.6} alpha {alpha:.4} kl_step {kl_step:.3e}", stack.query_count() - start_queries);
        trace.records.push(SolverRecord {
            step,
            queries: stack.query_count() - start_queries,
            obj_cat: obj,
            pb_cat: obj + cfg.bound_offset(),
            kl_to_prior,
            alpha,
            kl_step,
            theta: next.clone(),
        });
        theta = next;
        last_fit = Some(fit);
        if kl_step < cfg.convergence_kl_tol {
            break;
        }
    }

    Ok(SolverOutput {
        posterior: theta,
        trace,
        stack,
        last_fit,
    })
}

/// Test-time assessment of a posterior from fresh draws that never enter a
/// training ledger.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorReport {
    pub mean_risk: f64,
    pub kl_to_prior: f64,
    pub obj_cat: f64,
    pub pb_cat: f64,
}

pub fn evaluate_posterior(
    risk: &dyn Risk,
    family: &FamilySpec,
    posterior: &NaturalParams,
    prior: &NaturalParams,
    cfg: &CatoniConfig,
    n_samples: usize,
    seed: u64,
) -> Result<PosteriorReport> {
    if n_samples == 0 {
        return Err(Error::config("eval_samples", "must be at least 1"));
    }
    let points = family.sample(posterior, n_samples, rng::derive_seed(seed, &[stream::EVAL]))?;
    let values = risk.eval_batch(&points)?;
    let mean_risk = values.iter().sum::<f64>() / n_samples as f64;
    let kl_to_prior = family.kl(posterior, prior)?;
    let obj_cat = catoni_objective(mean_risk, kl_to_prior, cfg.lambda);
    Ok(PosteriorReport {
        mean_risk,
        kl_to_prior,
        obj_cat,
        pb_cat: obj_cat + cfg.bound_offset(),
    })
}

/// Exact objective for a risk `η·T + C`.
pub fn exact_objective_in_f(
    family: &FamilySpec,
    theta: &NaturalParams,
    prior: &NaturalParams,
    eta: &DVector<f64>,
    c: f64,
    lambda: f64,
) -> Result<f64> {
    let mean = family.mean_suff_stat(theta)?.dot(eta) + c;
    Ok(catoni_objective(mean, family.kl(theta, prior)?, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::MomentParams;
    use crate::risk::RiskSpec;
    use nalgebra::DMatrix;

    fn mp1(mean: f64, var: f64) -> MomentParams {
        MomentParams::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    #[test]
    fn bound_examples() {
        let cfg = CatoniConfig {
            lambda: 1.0,
            delta: 1.0,
            c_range: 0.0,
            ..Default::default()
        };
        assert_eq!(catoni_bound(0.0, 0.0, &cfg), 0.0);
        assert!((catoni_objective(0.102, 9.5, 0.002) - 0.121).abs() < 1e-12);
        let cfg = CatoniConfig {
            lambda: 0.002,
            delta: 0.05,
            n_data: 100,
            c_range: 1.0,
            ..Default::default()
        };
        let offset = 0.625 + 0.002 * 20f64.ln();
        assert!((cfg.bound_offset() - offset).abs() < 1e-12);
        assert!((offset - 0.63099).abs() < 1e-5);
    }

    #[test]
    fn surrogate_argmin_examples() {
        let prior = NaturalParams::from_slice(&[0.0, -0.5]);
        assert_eq!(surrogate_argmin(&prior, &DVector::zeros(2), 0.3), prior);
        // R = x²/2 with λ = 1: Gibbs posterior ∝ exp(−x²/2)·exp(−x²/2) = N(0, 1/2).
        let post = surrogate_argmin(&prior, &DVector::from_vec(vec![0.0, 0.5]), 1.0);
        assert_eq!(post.as_slice(), &[0.0, -1.0]);
        let f = FamilySpec::full(1).unwrap();
        let m = f.moments_from_natural(&post).unwrap();
        assert!((m.cov[(0, 0)] - 0.5).abs() < 1e-15);
        let p = surrogate_argmin(&prior, &DVector::from_vec(vec![1.0, 0.0]), 0.002);
        assert!((p.as_slice()[0] + 500.0).abs() < 1e-9);
    }

    #[test]
    fn damped_update_inactive_constraint() {
        let f = FamilySpec::full(1).unwrap();
        let th = f.natural_from_moments(&mp1(0.0, 1.0)).unwrap();
        let cand = f.natural_from_moments(&mp1(0.1, 1.0)).unwrap();
        let (_, a) = damped_update(&f, &th, &cand, 1.0, 0.8).unwrap();
        assert_eq!(a, 0.8);
        let (same, a) = damped_update(&f, &th, &th, 1.0, 0.8).unwrap();
        assert_eq!((same, a), (th.clone(), 0.8));
    }

    #[test]
    fn damped_update_hits_kl_radius() {
        // Unit variance, mean shift 2: KL(α) = 2α², so KL = 1 at α = 1/√2.
        let f = FamilySpec::full(1).unwrap();
        let th = f.natural_from_moments(&mp1(0.0, 1.0)).unwrap();
        let cand = f.natural_from_moments(&mp1(2.0, 1.0)).unwrap();
        let (next, a) = damped_update(&f, &th, &cand, 1.0, 1.0).unwrap();
        assert!((a - 0.5f64.sqrt()).abs() < 2e-9);
        assert!(a <= 0.5f64.sqrt());
        assert!(f.kl(&next, &th).unwrap() <= 1.0);
    }

    #[test]
    fn damped_update_stays_in_domain() {
        let f = FamilySpec::full(1).unwrap();
        let th = NaturalParams::from_slice(&[0.0, -0.5]);
        let cand = NaturalParams::from_slice(&[0.0, 0.5]);
        let (next, a) = damped_update(&f, &th, &cand, f64::INFINITY, 1.0).unwrap();
        assert!(a < 0.5 && a > 0.5 - 1e-8);
        assert!(f.contains(&next));
    }

    #[test]
    fn mean_risk_examples() {
        let mut s = EvalStack::new();
        s.record_evals(vec![vec![0.0], vec![1.0]], vec![0.0, 1.0], 0).unwrap();
        assert_eq!(estimate_mean_risk(&s, &WeightVector::uniform(2).unwrap()).unwrap(), 0.5);
        let w = WeightVector::from_raw(vec![1.0, 0.0]).unwrap();
        assert_eq!(estimate_mean_risk(&s, &w).unwrap(), 0.0);
    }

    #[test]
    fn schedule_resolution() {
        let cfg = CatoniConfig::default();
        assert_eq!((cfg.queries_at(0), cfg.queries_at(7)), (160, 32));
        let cfg = CatoniConfig {
            query_schedule: Some(vec![20, 0, 20, 0]),
            ..Default::default()
        };
        assert_eq!((0..6).map(|s| cfg.queries_at(s)).collect::<Vec<_>>(), vec![20, 0, 20, 0, 0, 0]);
    }

    #[test]
    fn config_json_infinite_kl() {
        let cfg = CatoniConfig {
            kl_max: f64::INFINITY,
            ..Default::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains(r#""kl_max":"inf""#));
        assert_eq!(serde_json::from_str::<CatoniConfig>(&s).unwrap(), cfg);
        let partial: CatoniConfig = serde_json::from_str(r#"{"lambda": 0.1, "kl_max": null}"#).unwrap();
        assert!(partial.kl_max.is_infinite() && partial.lambda == 0.1);
        assert!(serde_json::from_str::<CatoniConfig>(r#"{"lamda": 0.1}"#).is_err());
    }

    #[test]
    fn too_few_initial_queries_is_a_hard_error() {
        let f = FamilySpec::full(2).unwrap();
        let risk = RiskSpec::custom(2, |x| x[0].sin());
        let cfg = CatoniConfig {
            n_initial_queries: 3,
            n_mc_weights: 1000,
            ..Default::default()
        };
        let th = f.standard_normal();
        let err = run_supac_ce(&risk, &f, &th, &th, &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::SingularInitialDesign { points: 3, dim: 5 }));
        assert!(err.to_string().contains("n_initial_queries"));
    }

    #[test]
    fn trace_csv_roundtrip() {
        let trace = SolverTrace {
            records: vec![SolverRecord {
                step: 0,
                queries: 10,
                obj_cat: 0.5,
                pb_cat: 0.75,
                kl_to_prior: 0.1,
                alpha: 0.5,
                kl_step: 0.1,
                theta: NaturalParams::from_slice(&[0.0, -0.5]),
            }],
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "step,queries,obj_cat,pb_cat,kl_to_prior,alpha,theta_json\n0,10,0.5,0.75,0.1,0.5,\"[0.0,-0.5]\"\n"
        );
        let back = SolverTrace::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.records[0].theta, trace.records[0].theta);
        assert_eq!(back.query_grid(), vec![10]);
    }
}
