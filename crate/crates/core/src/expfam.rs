//! Gaussian exponential families in natural coordinates.
//!
//! A member is written `exp(θ·T(x) − g(θ))` against Lebesgue measure. The
//! coordinate vector `θ` starts with the `k` linear coefficients `b` and is
//! followed by one quadratic coefficient per pair `(i, j)`, `i ≤ j`, allowed
//! by the covariance structure (row-major upper triangle, block by block).
//! With `Λ` the precision matrix, diagonal coefficients are `−Λ_ii / 2` and
//! off-diagonal ones `−Λ_ij`, so that `θ·T(x) = bᵀx − ½ xᵀΛx`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Covariance sparsity pattern of a Gaussian family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Structure {
    Full,
    Diagonal,
    /// Index sets partitioning `0..k`; covariance is zero across blocks.
    Block(Vec<Vec<usize>>),
}

/// Family descriptor: predictor dimension, structure and the resulting
/// natural-coordinate layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FamilySpecRepr", into = "FamilySpecRepr")]
pub struct FamilySpec {
    predictor_dim: usize,
    structure: Structure,
    pairs: Vec<(usize, usize)>,
    block_of: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct FamilySpecRepr {
    structure: String,
    predictor_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    blocks: Option<Vec<Vec<usize>>>,
}

impl TryFrom<FamilySpecRepr> for FamilySpec {
    type Error = Error;

    fn try_from(r: FamilySpecRepr) -> Result<Self> {
        match r.structure.as_str() {
            "full" => FamilySpec::full(r.predictor_dim),
            "diag" => FamilySpec::diagonal(r.predictor_dim),
            "block" => FamilySpec::block(
                r.predictor_dim,
                r.blocks
                    .ok_or_else(|| Error::InvalidFamily("block structure requires `blocks`".into()))?,
            ),
            other => Err(Error::InvalidFamily(format!("unknown structure `{other}`"))),
        }
    }
}

impl From<FamilySpec> for FamilySpecRepr {
    fn from(f: FamilySpec) -> Self {
        let (structure, blocks) = match f.structure {
            Structure::Full => ("full", None),
            Structure::Diagonal => ("diag", None),
            Structure::Block(b) => ("block", Some(b)),
        };
        FamilySpecRepr {
            structure: structure.to_string(),
            predictor_dim: f.predictor_dim,
            blocks,
        }
    }
}

/// Natural coordinates of a family member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct NaturalParams(DVector<f64>);

impl NaturalParams {
    pub fn new(coords: DVector<f64>) -> Self {
        NaturalParams(coords)
    }

    pub fn from_slice(coords: &[f64]) -> Self {
        NaturalParams(DVector::from_column_slice(coords))
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self + alpha * dir`.
    pub fn step(&self, dir: &DVector<f64>, alpha: f64) -> NaturalParams {
        NaturalParams(&self.0 + dir * alpha)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self.as_slice()).expect("f64 slices always serialize")
    }
}

impl From<Vec<f64>> for NaturalParams {
    fn from(v: Vec<f64>) -> Self {
        NaturalParams(DVector::from_vec(v))
    }
}

impl From<NaturalParams> for Vec<f64> {
    fn from(p: NaturalParams) -> Self {
        p.0.as_slice().to_vec()
    }
}

/// Mean and covariance parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MomentRepr", into = "MomentRepr")]
pub struct MomentParams {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct MomentRepr {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl TryFrom<MomentRepr> for MomentParams {
    type Error = Error;

    fn try_from(r: MomentRepr) -> Result<Self> {
        let k = r.mean.len();
        if r.cov.len() != k || r.cov.iter().any(|row| row.len() != k) {
            return Err(Error::InvalidMoments(format!("covariance must be {k}x{k}")));
        }
        Ok(MomentParams {
            mean: DVector::from_vec(r.mean),
            cov: DMatrix::from_fn(k, k, |i, j| r.cov[i][j]),
        })
    }
}

impl From<MomentParams> for MomentRepr {
    fn from(m: MomentParams) -> Self {
        let k = m.mean.len();
        MomentRepr {
            mean: m.mean.as_slice().to_vec(),
            cov: (0..k).map(|i| (0..k).map(|j| m.cov[(i, j)]).collect()).collect(),
        }
    }
}

impl MomentParams {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        MomentParams { mean, cov }
    }

    pub fn standard(k: usize) -> Self {
        MomentParams {
            mean: DVector::zeros(k),
            cov: DMatrix::identity(k, k),
        }
    }
}

/// A family member decoded into moment form, with the factorizations
/// every downstream computation needs.
#[derive(Debug, Clone)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    /// Lower Cholesky factor of the precision, `Λ = L Lᵀ`.
    pub precision_chol: DMatrix<f64>,
    /// Lower Cholesky factor of the covariance.
    pub cov_chol: DMatrix<f64>,
    pub log_det_precision: f64,
}

impl Gaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Mahalanobis whitening `Lᵀ(x − μ)`; Euclidean distances between
    /// whitened points equal Mahalanobis distances under `Σ`.
    pub fn whiten(&self, x: &[f64], out: &mut [f64]) {
        let k = self.dim();
        for j in 0..k {
            let mut acc = 0.0;
            for i in j..k {
                acc += self.precision_chol[(i, j)] * (x[i] - self.mean[i]);
            }
            out[j] = acc;
        }
    }

    /// Draw one point into `out` from the given standard-normal vector.
    pub fn transform_standard(&self, z: &[f64], out: &mut [f64]) {
        let k = self.dim();
        for i in 0..k {
            let mut acc = self.mean[i];
            for j in 0..=i {
                acc += self.cov_chol[(i, j)] * z[j];
            }
            out[i] = acc;
        }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let k = m.nrows();
    for i in 0..k {
        for j in (i + 1)..k {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

impl FamilySpec {
    pub fn full(k: usize) -> Result<Self> {
        Self::build(k, Structure::Full, vec![(0..k).collect()])
    }

    pub fn diagonal(k: usize) -> Result<Self> {
        Self::build(k, Structure::Diagonal, (0..k).map(|i| vec![i]).collect())
    }

    pub fn block(k: usize, blocks: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; k];
        for b in &blocks {
            if b.is_empty() {
                return Err(Error::InvalidFamily("empty block".into()));
            }
            for &i in b {
                if i >= k {
                    return Err(Error::InvalidFamily(format!("block index {i} out of range 0..{k}")));
                }
                if seen[i] {
                    return Err(Error::InvalidFamily(format!("index {i} appears in two blocks")));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidFamily(format!("index {i} is not covered by any block")));
        }
        let blocks: Vec<Vec<usize>> = blocks
            .into_iter()
            .map(|mut b| {
                b.sort_unstable();
                b
            })
            .collect();
        Self::build(k, Structure::Block(blocks.clone()), blocks)
    }

    fn build(k: usize, structure: Structure, blocks: Vec<Vec<usize>>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidFamily("predictor dimension must be positive".into()));
        }
        let mut pairs = Vec::new();
        let mut block_of = vec![0; k];
        for (bi, b) in blocks.iter().enumerate() {
            for (p, &i) in b.iter().enumerate() {
                block_of[i] = bi;
                for &j in &b[p..] {
                    pairs.push((i, j));
                }
            }
        }
        Ok(FamilySpec {
            predictor_dim: k,
            structure,
            pairs,
            block_of,
        })
    }

    pub fn predictor_dim(&self) -> usize {
        self.predictor_dim
    }

    /// Number of natural coordinates `d`.
    pub fn dim(&self) -> usize {
        self.predictor_dim + self.pairs.len()
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    /// Quadratic coordinate layout, in order.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    fn same_block(&self, i: usize, j: usize) -> bool {
        self.block_of[i] == self.block_of[j]
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.predictor_dim {
            return Err(Error::DimensionMismatch {
                expected: self.predictor_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_params(&self, theta: &NaturalParams) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// Sufficient statistic `T(x)`.
    pub fn suff_stat(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_point(x)?;
        let mut out = DVector::zeros(self.dim());
        self.suff_stat_into(x, out.as_mut_slice());
        Ok(out)
    }

    /// Unchecked variant writing into a preallocated buffer of length `dim()`.
    pub fn suff_stat_into(&self, x: &[f64], out: &mut [f64]) {
        let k = self.predictor_dim;
        out[..k].copy_from_slice(&x[..k]);
        for (slot, &(i, j)) in out[k..].iter_mut().zip(&self.pairs) {
            *slot = x[i] * x[j];
        }
    }

    pub fn natural_from_moments(&self, m: &MomentParams) -> Result<NaturalParams> {
        let k = self.predictor_dim;
        if m.mean.len() != k || m.cov.nrows() != k || m.cov.ncols() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: m.mean.len(),
            });
        }
        for i in 0..k {
            for j in 0..k {
                let c = m.cov[(i, j)];
                if !c.is_finite() {
                    return Err(Error::InvalidMoments("non-finite covariance entry".into()));
                }
                if (c - m.cov[(j, i)]).abs() > 1e-12 * (1.0 + c.abs()) {
                    return Err(Error::InvalidMoments("covariance is not symmetric".into()));
                }
                if !self.same_block(i, j) && c != 0.0 {
                    return Err(Error::InvalidMoments(format!(
                        "covariance entry ({i}, {j}) crosses blocks"
                    )));
                }
            }
        }
        let mut cov = m.cov.clone();
        symmetrize(&mut cov);
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::InvalidMoments("covariance is not positive definite".into()))?;
        let mut precision = chol.inverse();
        symmetrize(&mut precision);
        let b = &precision * &m.mean;
        let mut coords = DVector::zeros(self.dim());
        coords.rows_mut(0, k).copy_from(&b);
        for (slot, &(i, j)) in self.pairs.iter().enumerate() {
            coords[k + slot] = if i == j {
                -0.5 * precision[(i, i)]
            } else {
                -precision[(i, j)]
            };
        }
        Ok(NaturalParams(coords))
    }

    pub fn moments_from_natural(&self, theta: &NaturalParams) -> Result<MomentParams> {
        let g = self.gaussian(theta)?;
        Ok(MomentParams {
            mean: g.mean,
            cov: g.cov,
        })
    }

    /// Precision matrix and linear coefficient encoded by `θ`.
    pub fn precision_and_linear(&self, theta: &NaturalParams) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.check_params(theta)?;
        let k = self.predictor_dim;
        let c = theta.coords();
        let mut precision = DMatrix::zeros(k, k);
        for (slot, &(i, j)) in self.pairs.iter().enumerate() {
            let v = c[k + slot];
            if i == j {
                precision[(i, i)] = -2.0 * v;
            } else {
                precision[(i, j)] = -v;
                precision[(j, i)] = -v;
            }
        }
        Ok((precision, c.rows(0, k).into_owned()))
    }

    /// Membership test for the natural domain.
    pub fn contains(&self, theta: &NaturalParams) -> bool {
        self.gaussian(theta).is_ok()
    }

    /// Decode `θ` into moment form. Fails with [`Error::OutsideDomain`] when
    /// the implied precision is not positive definite.
    pub fn gaussian(&self, theta: &NaturalParams) -> Result<Gaussian> {
        let (precision, b) = self.precision_and_linear(theta)?;
        if theta.coords().iter().any(|v| !v.is_finite()) {
            return Err(Error::OutsideDomain);
        }
        let chol = precision.clone().cholesky().ok_or(Error::OutsideDomain)?;
        let precision_chol = chol.l();
        let log_det_precision = 2.0 * precision_chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let mean = chol.solve(&b);
        let mut cov = chol.inverse();
        symmetrize(&mut cov);
        let cov_chol = cov.clone().cholesky().ok_or(Error::OutsideDomain)?.l();
        if !log_det_precision.is_finite() || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::OutsideDomain);
        }
        Ok(Gaussian {
            mean,
            cov,
            precision,
            precision_chol,
            cov_chol,
            log_det_precision,
        })
    }

    /// Log-partition `g(θ) = ½ bᵀΛ⁻¹b − ½ log det Λ + (k/2) log 2π`.
    pub fn log_partition(&self, theta: &NaturalParams) -> Result<f64> {
        let g = self.gaussian(theta)?;
        Ok(self.log_partition_of(theta, &g))
    }

    fn log_partition_of(&self, theta: &NaturalParams, g: &Gaussian) -> f64 {
        let k = self.predictor_dim;
        let b = theta.coords().rows(0, k);
        0.5 * b.dot(&g.mean) - 0.5 * g.log_det_precision + 0.5 * k as f64 * (2.0 * PI).ln()
    }

    /// `E[T] = ∇g(θ)`.
    pub fn mean_suff_stat(&self, theta: &NaturalParams) -> Result<DVector<f64>> {
        let g = self.gaussian(theta)?;
        Ok(self.mean_suff_stat_of(&g))
    }

    pub fn mean_suff_stat_of(&self, g: &Gaussian) -> DVector<f64> {
        let k = self.predictor_dim;
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, k).copy_from(&g.mean);
        for (slot, &(i, j)) in self.pairs.iter().enumerate() {
            out[k + slot] = g.mean[i] * g.mean[j] + g.cov[(i, j)];
        }
        out
    }

    /// Fisher information `Cov[T] = ∇²g(θ)` from Gaussian moment identities.
    pub fn fisher_info(&self, theta: &NaturalParams) -> Result<DMatrix<f64>> {
        let g = self.gaussian(theta)?;
        Ok(self.fisher_info_of(&g))
    }

    pub fn fisher_info_of(&self, g: &Gaussian) -> DMatrix<f64> {
        let k = self.predictor_dim;
        let d = self.dim();
        let mu = &g.mean;
        let s = &g.cov;
        let cov_lin_quad = |a: usize, (j, l): (usize, usize)| mu[j] * s[(a, l)] + mu[l] * s[(a, j)];
        let cov_quad_quad = |(i, j): (usize, usize), (a, l): (usize, usize)| {
            s[(i, a)] * s[(j, l)]
                + s[(i, l)] * s[(j, a)]
                + mu[i] * mu[a] * s[(j, l)]
                + mu[i] * mu[l] * s[(j, a)]
                + mu[j] * mu[a] * s[(i, l)]
                + mu[j] * mu[l] * s[(i, a)]
        };
        let mut out = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in a..d {
                let v = match (a < k, b < k) {
                    (true, true) => s[(a, b)],
                    (true, false) => cov_lin_quad(a, self.pairs[b - k]),
                    (false, true) => cov_lin_quad(b, self.pairs[a - k]),
                    (false, false) => cov_quad_quad(self.pairs[a - k], self.pairs[b - k]),
                };
                out[(a, b)] = v;
                out[(b, a)] = v;
            }
        }
        out
    }

    /// `KL(π_θ1 ‖ π_θ2)`.
    ///
    /// Evaluated as `½[Σ (λ − 1 − ln λ) + Δμᵀ Λ₂ Δμ]` over the eigenvalues of
    /// `L₂ᵀ Σ₁ L₂`, which stays accurate when the two members nearly coincide.
    pub fn kl(&self, theta1: &NaturalParams, theta2: &NaturalParams) -> Result<f64> {
        let g1 = self.gaussian(theta1)?;
        let g2 = self.gaussian(theta2)?;
        Ok(kl_gaussian(&g1, &g2))
    }

    /// Draw `n` i.i.d. points. Deterministic in `seed`.
    pub fn sample(&self, theta: &NaturalParams, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let g = self.gaussian(theta)?;
        let mut rng = rng::rng_from(seed, &[rng::stream::SAMPLE]);
        Ok(sample_gaussian(&g, n, &mut rng))
    }

    /// Natural parameters of `N(0, I_k)`.
    pub fn standard_normal(&self) -> NaturalParams {
        self.natural_from_moments(&MomentParams::standard(self.predictor_dim))
            .expect("identity covariance is valid for every structure")
    }
}

pub fn kl_gaussian(g1: &Gaussian, g2: &Gaussian) -> f64 {
    let l2 = &g2.precision_chol;
    let m = l2.transpose() * &g1.cov * l2;
    let eig = SymmetricEigen::new(m);
    let spectral: f64 = eig
        .eigenvalues
        .iter()
        .map(|&lam| {
            let e = lam - 1.0;
            e - e.ln_1p()
        })
        .sum();
    let dmu = &g1.mean - &g2.mean;
    let w = l2.transpose() * &dmu;
    0.5 * (spectral + w.norm_squared()).max(0.0)
}

pub fn sample_gaussian(g: &Gaussian, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let k = g.dim();
    let mut z = vec![0.0; k];
    (0..n)
        .map(|_| {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let mut x = vec![0.0; k];
            g.transform_standard(&z, &mut x);
            x
        })
        .collect()
}
