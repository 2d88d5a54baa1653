//! Weighting of the evaluation stack and weighted least-squares projection of
//! the risk onto `span(1, T)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};
use crate::expfam::{FamilySpec, Gaussian, NaturalParams};
use crate::quadrature::GaussHermite;
use crate::rng::{self, stream};
use crate::risk::{EvalStack, Risk};

/// Condition number above which the centered Gram matrix gets a ridge.
pub const MAX_GRAM_CONDITION: f64 = 1e12;
const RIDGE_SCALE: f64 = 1e-10;
const MC_CHUNK: usize = 4096;

/// Nonnegative weights aligned with stack entries, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Normalizes `raw`. Fails if all entries are zero.
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        if raw.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::ZeroWeights);
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroWeights);
        }
        Ok(WeightVector(raw.into_iter().map(|w| w / total).collect()))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_raw(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// How stack entries are weighted before projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightingStrategy {
    /// Monte Carlo Voronoi cell probabilities, every generation alike.
    #[default]
    Voronoi,
    /// Exact cell probabilities from the normal CDF (one-dimensional only).
    ExactVoronoi1d,
    /// Uniform over the points drawn at the current step only.
    UniformFresh,
    /// Self-normalized density ratios against each point's generating law.
    Importance,
}

/// `f(x) = η·T(x) + C`, fitted against weighted risk values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurrogateFit {
    #[serde(serialize_with = "dvec_as_seq")]
    pub eta: DVector<f64>,
    pub c: f64,
    #[serde(rename = "rss")]
    pub weighted_rss: f64,
    #[serde(skip)]
    pub gram_condition: f64,
    #[serde(skip)]
    pub ridged: bool,
    /// Weighted mean of `T` over the design.
    #[serde(skip)]
    pub design_mean: DVector<f64>,
}

fn dvec_as_seq<S: serde::Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

impl SurrogateFit {
    pub fn predict(&self, family: &FamilySpec, x: &[f64]) -> f64 {
        let mut t = vec![0.0; family.dim()];
        family.suff_stat_into(x, &mut t);
        self.eta.iter().zip(&t).map(|(e, ti)| e * ti).sum::<f64>() + self.c
    }

    /// `π_θ[f] = η·∇g(θ) + C`.
    pub fn expected_under(&self, family: &FamilySpec, g: &Gaussian) -> f64 {
        self.eta.dot(&family.mean_suff_stat_of(g)) + self.c
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("fit serializes")
    }
}

/// Monte Carlo estimate of the `π_θ`-probability of each point's Voronoi
/// cell under the Mahalanobis metric of `Σ(θ)`.
///
/// Samples are drawn directly in whitened coordinates, where the metric is
/// Euclidean and `π_θ` is standard normal. Nearest neighbours are found by
/// exhaustive search; ties go to the lowest index.
pub fn voronoi_weights(
    stack: &EvalStack,
    family: &FamilySpec,
    theta: &NaturalParams,
    n_mc: usize,
    seed: u64,
) -> Result<WeightVector> {
    if stack.is_empty() {
        return Err(Error::EmptyStack);
    }
    if n_mc == 0 {
        return Err(Error::config("n_mc_weights", "must be at least 1"));
    }
    let g = family.gaussian(theta)?;
    let k = family.predictor_dim();
    let n = stack.len();
    let mut white = vec![0.0; n * k];
    let mut half_norms = vec![0.0; n];
    for (i, p) in stack.points().iter().enumerate() {
        if p.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: p.len() });
        }
        let w = &mut white[i * k..(i + 1) * k];
        g.whiten(p, w);
        half_norms[i] = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    }
    let mut counts = vec![0u64; n];
    let mut z = vec![0.0; k];
    let chunks = n_mc.div_ceil(MC_CHUNK);
    for c in 0..chunks {
        let mut rng = rng::rng_from(seed, &[stream::CHUNK, c as u64]);
        let m = MC_CHUNK.min(n_mc - c * MC_CHUNK);
        for _ in 0..m {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            // argmin ‖z − p‖² = argmin (‖p‖²/2 − z·p)
            let mut best = 0;
            let mut best_score = f64::INFINITY;
            for (i, p) in white.chunks_exact(k).enumerate() {
                let dot: f64 = p.iter().zip(&z).map(|(a, b)| a * b).sum();
                let score = half_norms[i] - dot;
                if score < best_score {
                    best_score = score;
                    best = i;
                }
            }
            counts[best] += 1;
        }
    }
    WeightVector::from_raw(counts.into_iter().map(|c| c as f64).collect())
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Exact Voronoi cell probabilities for one-dimensional families.
/// Duplicate points share a cell, credited to the first occurrence.
pub fn exact_voronoi_weights_1d(stack: &EvalStack, family: &FamilySpec, theta: &NaturalParams) -> Result<WeightVector> {
    if stack.is_empty() {
        return Err(Error::EmptyStack);
    }
    if family.predictor_dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: family.predictor_dim(),
        });
    }
    let g = family.gaussian(theta)?;
    let (mu, sd) = (g.mean[0], g.cov[(0, 0)].sqrt());
    let mut order: Vec<usize> = (0..stack.len()).collect();
    let x = |i: usize| stack.points()[i][0];
    order.sort_by(|&a, &b| x(a).total_cmp(&x(b)).then(a.cmp(&b)));
    order.dedup_by(|b, a| x(*a) == x(*b));
    let mut raw = vec![0.0; stack.len()];
    let mut lower = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        let upper = match order.get(pos + 1) {
            Some(&j) => std_normal_cdf((0.5 * (x(i) + x(j)) - mu) / sd),
            None => 1.0,
        };
        raw[i] = (upper - lower).max(0.0);
        lower = upper;
    }
    WeightVector::from_raw(raw)
}

/// Uniform weights over the entries produced at `step`.
pub fn uniform_fresh_weights(stack: &EvalStack, step: usize) -> Result<WeightVector> {
    if stack.is_empty() {
        return Err(Error::EmptyStack);
    }
    WeightVector::from_raw(
        stack
            .step_of()
            .iter()
            .map(|&s| if s == step { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Self-normalized importance weights `dπ_θ / dπ_{θ_gen}`, where
/// `generators[s]` is the law that produced the points of step `s`.
pub fn importance_weights(
    stack: &EvalStack,
    family: &FamilySpec,
    theta: &NaturalParams,
    generators: &[NaturalParams],
) -> Result<WeightVector> {
    if stack.is_empty() {
        return Err(Error::EmptyStack);
    }
    let log_density = |th: &NaturalParams, g_th: f64, t: &[f64]| -> f64 {
        th.as_slice().iter().zip(t).map(|(a, b)| a * b).sum::<f64>() - g_th
    };
    let g_theta = family.log_partition(theta)?;
    let gens = generators
        .iter()
        .map(|th| family.log_partition(th).map(|g| (th, g)))
        .collect::<Result<Vec<_>>>()?;
    let mut t = vec![0.0; family.dim()];
    let mut logw = Vec::with_capacity(stack.len());
    for (p, &s) in stack.points().iter().zip(stack.step_of()) {
        let (th_gen, g_gen) = gens.get(s).ok_or(Error::LengthMismatch {
            what: "generators",
            left: generators.len(),
            right: s + 1,
        })?;
        family.suff_stat_into(p, &mut t);
        logw.push(log_density(theta, g_theta, &t) - log_density(th_gen, *g_gen, &t));
    }
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    WeightVector::from_raw(logw.into_iter().map(|l| (l - max).exp()).collect())
}

/// Minimize `Σ w_i (η·T(x_i) + C + offset(x_i) − R(x_i))²` over `(η, C)`.
pub fn project(
    stack: &EvalStack,
    weights: &WeightVector,
    family: &FamilySpec,
    offset: Option<&dyn Fn(&[f64]) -> f64>,
) -> Result<SurrogateFit> {
    if weights.len() != stack.len() {
        return Err(Error::LengthMismatch {
            what: "weights",
            left: weights.len(),
            right: stack.len(),
        });
    }
    let targets: Vec<f64> = match offset {
        Some(h) => stack.points().iter().zip(stack.values()).map(|(x, r)| r - h(x)).collect(),
        None => stack.values().to_vec(),
    };
    weighted_fit(family, stack.points(), &targets, weights.as_slice())
}

/// Projection under the exact law `π_θ`, by tensor Gauss–Hermite
/// quadrature. Intended for `k ≤ 3`.
pub fn population_projection(
    family: &FamilySpec,
    theta: &NaturalParams,
    risk: &dyn Risk,
    rule: &GaussHermite,
) -> Result<SurrogateFit> {
    let g = family.gaussian(theta)?;
    let (points, weights) = rule.gaussian_rule(&g);
    let values = risk.eval_batch(&points)?;
    weighted_fit(family, &points, &values, &weights)
}

/// Centered, scaled normal equations with a ridge fallback.
pub fn weighted_fit(family: &FamilySpec, points: &[Vec<f64>], targets: &[f64], weights: &[f64]) -> Result<SurrogateFit> {
    let d = family.dim();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroWeights);
    }
    let active: Vec<usize> = (0..points.len()).filter(|&i| weights[i] > 0.0).collect();
    let mut feats = DMatrix::zeros(d, active.len());
    for (col, &i) in active.iter().enumerate() {
        family.suff_stat_into(&points[i], feats.column_mut(col).as_mut_slice());
    }
    let w: Vec<f64> = active.iter().map(|&i| weights[i] / total).collect();
    let y: Vec<f64> = active.iter().map(|&i| targets[i]).collect();

    let mut t_bar = DVector::zeros(d);
    for (col, wi) in w.iter().enumerate() {
        t_bar.axpy(*wi, &feats.column(col), 1.0);
    }
    let y_bar: f64 = w.iter().zip(&y).map(|(a, b)| a * b).sum();

    // Scaled centered design: column i holds sqrt(w_i)(T_i − T̄).
    let mut centered = feats.clone();
    let mut resid_y = DVector::zeros(active.len());
    for col in 0..active.len() {
        let sw = w[col].sqrt();
        let mut c = centered.column_mut(col);
        c -= &t_bar;
        c *= sw;
        resid_y[col] = sw * (y[col] - y_bar);
    }
    let gram = &centered * centered.transpose();
    let cross = &centered * &resid_y;
    let scale: DVector<f64> = gram.diagonal().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
    let mut scaled = gram.clone();
    for a in 0..d {
        for b in 0..d {
            scaled[(a, b)] /= scale[a] * scale[b];
        }
    }
    let rhs = cross.component_div(&scale);

    let condition = |m: &DMatrix<f64>| -> f64 {
        let ev = SymmetricEigen::new(m.clone()).eigenvalues;
        let max = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
        if min > 0.0 {
            max / min
        } else {
            f64::INFINITY
        }
    };
    let mut gram_condition = condition(&scaled);
    let mut ridged = false;
    if !(gram_condition <= MAX_GRAM_CONDITION) {
        let ridge = RIDGE_SCALE * scaled.trace() / d as f64;
        for a in 0..d {
            scaled[(a, a)] += ridge;
        }
        ridged = true;
        gram_condition = condition(&scaled);
    }
    let u = match scaled.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => scaled
            .clone()
            .svd(true, true)
            .solve(&rhs, 0.0)
            .map_err(|_| Error::ZeroWeights)?,
    };
    let eta = u.component_div(&scale);
    let c = y_bar - eta.dot(&t_bar);
    let fitted = feats.transpose() * &eta;
    let weighted_rss = w
        .iter()
        .zip(&y)
        .zip(fitted.iter())
        .map(|((wi, yi), fi)| wi * (fi + c - yi).powi(2))
        .sum();
    Ok(SurrogateFit {
        eta,
        c,
        weighted_rss,
        gram_condition,
        ridged,
        design_mean: t_bar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::risk::RiskSpec;

    fn stack_1d(xs: &[f64], f: impl Fn(f64) -> f64) -> EvalStack {
        let mut s = EvalStack::new();
        s.record_evals(xs.iter().map(|&x| vec![x]).collect(), xs.iter().map(|&x| f(x)).collect(), 0)
            .unwrap();
        s
    }

    #[test]
    fn single_point_takes_all_mass() {
        let f = FamilySpec::full(2).unwrap();
        let mut s = EvalStack::new();
        s.record_evals(vec![vec![0.3, 0.1]], vec![1.0], 0).unwrap();
        assert_eq!(voronoi_weights(&s, &f, &f.standard_normal(), 100, 1).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn symmetric_pair_splits_evenly() {
        let f = FamilySpec::full(1).unwrap();
        let s = stack_1d(&[-0.7, 0.7], |x| x);
        let w = voronoi_weights(&s, &f, &f.standard_normal(), 100_000, 3).unwrap();
        assert!((w.as_slice()[0] - 0.5).abs() < 0.01);
    }

    #[test]
    fn three_point_cells_match_normal_cdf() {
        let f = FamilySpec::full(1).unwrap();
        let s = stack_1d(&[-1.0, 0.0, 2.0], |x| x);
        let expected = [0.308_537_538_725_986_9, 0.532_807_207_342_556, 0.158_655_253_931_457_05];
        let exact = exact_voronoi_weights_1d(&s, &f, &f.standard_normal()).unwrap();
        for (a, b) in exact.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let n = 100_000;
        let mc = voronoi_weights(&s, &f, &f.standard_normal(), n, 5).unwrap();
        for (a, b) in mc.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 3.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn voronoi_is_deterministic() {
        let f = FamilySpec::full(2).unwrap();
        let th = f.standard_normal();
        let mut s = EvalStack::new();
        s.record_evals(f.sample(&th, 30, 2).unwrap(), vec![0.0; 30], 0).unwrap();
        assert_eq!(
            voronoi_weights(&s, &f, &th, 10_000, 9).unwrap(),
            voronoi_weights(&s, &f, &th, 10_000, 9).unwrap()
        );
    }

    #[test]
    fn voronoi_errors() {
        let f = FamilySpec::full(1).unwrap();
        let th = f.standard_normal();
        assert!(matches!(voronoi_weights(&EvalStack::new(), &f, &th, 10, 0), Err(Error::EmptyStack)));
        let s = stack_1d(&[0.0], |x| x);
        assert!(matches!(
            voronoi_weights(&s, &f, &NaturalParams::from_slice(&[0.0, 1.0]), 10, 0),
            Err(Error::OutsideDomain)
        ));
    }

    #[test]
    fn exact_member_is_recovered() {
        let f = FamilySpec::full(2).unwrap();
        let eta = DVector::from_vec(vec![0.3, -1.0, 0.5, 0.2, 0.7]);
        let risk = RiskSpec::quadratic(&f, &eta, 1.25).unwrap();
        let th = f.standard_normal();
        let mut s = EvalStack::new();
        s.query(&risk, f.sample(&th, 40, 4).unwrap(), 0).unwrap();
        let w = voronoi_weights(&s, &f, &th, 20_000, 1).unwrap();
        let fit = project(&s, &w, &f, None).unwrap();
        assert!((&fit.eta - &eta).amax() < 1e-8);
        assert!((fit.c - 1.25).abs() < 1e-8);
        assert!(fit.weighted_rss <= 1e-12);
        assert!(!fit.ridged);
    }

    #[test]
    fn cubic_projects_onto_three_x() {
        // Population projection of x³ on span(1, x, x²) under N(0,1) is 3x.
        let f = FamilySpec::full(1).unwrap();
        let cube = RiskSpec::custom(1, |x| x[0].powi(3));
        let fit = population_projection(&f, &f.standard_normal(), &cube, &GaussHermite::new(12)).unwrap();
        assert!((fit.eta[0] - 3.0).abs() < 1e-10);
        assert!(fit.eta[1].abs() < 1e-10 && fit.c.abs() < 1e-10);
        // Empirical version from a weighted stack.
        let xs: Vec<f64> = (0..400).map(|i| -4.0 + 8.0 * (i as f64 + 0.5) / 400.0).collect();
        let s = stack_1d(&xs, |x| x.powi(3));
        let w = exact_voronoi_weights_1d(&s, &f, &f.standard_normal()).unwrap();
        let emp = project(&s, &w, &f, None).unwrap();
        assert!((emp.eta[0] - 3.0).abs() < 0.05, "{}", emp.eta);
        assert!(emp.eta[1].abs() < 0.05 && emp.c.abs() < 0.05);
    }

    #[test]
    fn offset_equal_to_risk_leaves_nothing() {
        let f = FamilySpec::full(1).unwrap();
        let s = stack_1d(&[-1.0, 0.2, 0.9, 2.0], |x| x.sin() + x.powi(4));
        let w = WeightVector::uniform(4).unwrap();
        let h = |x: &[f64]| x[0].sin() + x[0].powi(4);
        let fit = project(&s, &w, &f, Some(&h)).unwrap();
        assert!(fit.eta.amax() < 1e-12 && fit.c.abs() < 1e-12 && fit.weighted_rss < 1e-24);
    }

    #[test]
    fn zero_weights_rejected() {
        assert!(matches!(WeightVector::from_raw(vec![0.0, 0.0]), Err(Error::ZeroWeights)));
        let f = FamilySpec::full(1).unwrap();
        let s = stack_1d(&[0.0, 1.0], |x| x);
        let w = WeightVector::uniform(3).unwrap();
        assert!(matches!(project(&s, &w, &f, None), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn too_few_points_trigger_ridge() {
        let f = FamilySpec::full(2).unwrap();
        let mut s = EvalStack::new();
        s.record_evals(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 2.0, 3.0], 0)
            .unwrap();
        let fit = project(&s, &WeightVector::uniform(3).unwrap(), &f, None).unwrap();
        assert!(fit.ridged);
        assert!(fit.gram_condition.is_finite());
        assert!(fit.eta.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn uniform_fresh_and_importance() {
        let f = FamilySpec::full(1).unwrap();
        let mut s = stack_1d(&[0.0, 1.0], |x| x);
        s.record_evals(vec![vec![2.0]], vec![2.0], 1).unwrap();
        assert_eq!(uniform_fresh_weights(&s, 1).unwrap().as_slice(), &[0.0, 0.0, 1.0]);
        let th = f.standard_normal();
        let w = importance_weights(&s, &f, &th, &[th.clone(), th.clone()]).unwrap();
        for v in w.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-14);
        }
        assert!(importance_weights(&s, &f, &th, std::slice::from_ref(&th)).is_err());
    }

    #[test]
    fn fit_json_dump() {
        let f = FamilySpec::full(1).unwrap();
        let s = stack_1d(&[-1.0, 0.0, 1.0], |x| x * x);
        let fit = project(&s, &WeightVector::uniform(3).unwrap(), &f, None).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fit.to_json()).unwrap();
        assert!(v["eta"].is_array() && v["c"].is_number() && v["rss"].is_number());
    }
}
