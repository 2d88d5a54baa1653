//! Risk functions and the append-only evaluation ledger.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::FamilySpec;

/// A pure map from predictors to real values.
pub trait Risk: Send + Sync {
    fn predictor_dim(&self) -> usize;

    /// Unchecked evaluation; `x.len() == predictor_dim()`.
    fn value(&self, x: &[f64]) -> f64;

    fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.predictor_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.predictor_dim(),
                got: x.len(),
            });
        }
        Ok(self.value(x))
    }

    fn eval_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        xs.iter().map(|x| self.eval(x)).collect()
    }
}

/// `h(u) = cos(u) + u`, the radial profile of the synthetic risk.
pub fn radial_profile(u: f64) -> f64 {
    u.cos() + u
}

type RiskFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Serializable risk descriptions.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiskSpec {
    /// `η·T(x) + C`, exactly representable by the surrogate space.
    QuadraticInF {
        family: FamilySpec,
        eta: Vec<f64>,
        c: f64,
    },
    /// `tanh(h(ω‖A(x − x0)‖²) / 10)`.
    TanhSynthetic {
        omega: f64,
        a: Vec<Vec<f64>>,
        x0: Vec<f64>,
    },
    /// User callable; must be pure. Not serializable.
    #[serde(skip)]
    Custom { dim: usize, f: Arc<RiskFn> },
}

impl fmt::Debug for RiskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RiskSpec::QuadraticInF { eta, c, .. } => {
                f.debug_struct("QuadraticInF").field("eta", eta).field("c", c).finish()
            }
            RiskSpec::TanhSynthetic { omega, a, x0 } => f
                .debug_struct("TanhSynthetic")
                .field("omega", omega)
                .field("a", a)
                .field("x0", x0)
                .finish(),
            RiskSpec::Custom { dim, .. } => f.debug_struct("Custom").field("dim", dim).finish(),
        }
    }
}

impl RiskSpec {
    pub fn quadratic(family: &FamilySpec, eta: &DVector<f64>, c: f64) -> Result<Self> {
        if eta.len() != family.dim() {
            return Err(Error::DimensionMismatch {
                expected: family.dim(),
                got: eta.len(),
            });
        }
        Ok(RiskSpec::QuadraticInF {
            family: family.clone(),
            eta: eta.as_slice().to_vec(),
            c,
        })
    }

    pub fn tanh_synthetic(omega: f64, a: &DMatrix<f64>, x0: &DVector<f64>) -> Result<Self> {
        let k = x0.len();
        if a.nrows() != k || a.ncols() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: a.nrows(),
            });
        }
        Ok(RiskSpec::TanhSynthetic {
            omega,
            a: (0..k).map(|i| (0..k).map(|j| a[(i, j)]).collect()).collect(),
            x0: x0.as_slice().to_vec(),
        })
    }

    pub fn custom(dim: usize, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        RiskSpec::Custom { dim, f: Arc::new(f) }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RiskSpec::QuadraticInF { .. } => "quadratic_in_f",
            RiskSpec::TanhSynthetic { .. } => "tanh_synthetic",
            RiskSpec::Custom { .. } => "custom",
        }
    }

    /// Structural validation of deserialized specs.
    pub fn validate(&self) -> Result<()> {
        match self {
            RiskSpec::QuadraticInF { family, eta, c } => {
                if eta.len() != family.dim() {
                    return Err(Error::config(
                        "risk.eta",
                        format!("expected {} coefficients, got {}", family.dim(), eta.len()),
                    ));
                }
                if !c.is_finite() || eta.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config("risk.eta", "coefficients must be finite"));
                }
            }
            RiskSpec::TanhSynthetic { omega, a, x0 } => {
                let k = x0.len();
                if k == 0 {
                    return Err(Error::config("risk.x0", "must be non-empty"));
                }
                if a.len() != k || a.iter().any(|r| r.len() != k) {
                    return Err(Error::config("risk.a", format!("must be a {k}x{k} matrix")));
                }
                if !omega.is_finite() {
                    return Err(Error::config("risk.omega", "must be finite"));
                }
            }
            RiskSpec::Custom { .. } => {}
        }
        Ok(())
    }
}

impl Risk for RiskSpec {
    fn predictor_dim(&self) -> usize {
        match self {
            RiskSpec::QuadraticInF { family, .. } => family.predictor_dim(),
            RiskSpec::TanhSynthetic { x0, .. } => x0.len(),
            RiskSpec::Custom { dim, .. } => *dim,
        }
    }

    fn value(&self, x: &[f64]) -> f64 {
        match self {
            RiskSpec::QuadraticInF { family, eta, c } => {
                let k = family.predictor_dim();
                let lin: f64 = eta[..k].iter().zip(x).map(|(e, xi)| e * xi).sum();
                let quad: f64 = eta[k..]
                    .iter()
                    .zip(family.pairs())
                    .map(|(e, &(i, j))| e * x[i] * x[j])
                    .sum();
                lin + quad + c
            }
            RiskSpec::TanhSynthetic { omega, a, x0 } => {
                let mut sq = 0.0;
                for row in a {
                    let v: f64 = row.iter().zip(x.iter().zip(x0)).map(|(aij, (xj, x0j))| aij * (xj - x0j)).sum();
                    sq += v * v;
                }
                (radial_profile(omega * sq) / 10.0).tanh()
            }
            RiskSpec::Custom { f, .. } => f(x),
        }
    }
}

/// Every risk query made during training, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalStack {
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
    step_of: Vec<usize>,
}

impl EvalStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of recorded queries.
    pub fn query_count(&self) -> usize {
        self.values.len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn step_of(&self) -> &[usize] {
        &self.step_of
    }

    pub fn predictor_dim(&self) -> Option<usize> {
        self.points.first().map(Vec::len)
    }

    /// Append a batch tagged with the producing step.
    pub fn record_evals(&mut self, points: Vec<Vec<f64>>, values: Vec<f64>, step: usize) -> Result<()> {
        if points.len() != values.len() {
            return Err(Error::LengthMismatch {
                what: "values",
                left: values.len(),
                right: points.len(),
            });
        }
        if let Some(k) = self.predictor_dim().or_else(|| points.first().map(Vec::len)) {
            if let Some(bad) = points.iter().find(|p| p.len() != k) {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    got: bad.len(),
                });
            }
        }
        self.step_of.extend(std::iter::repeat_n(step, points.len()));
        self.points.extend(points);
        self.values.extend(values);
        Ok(())
    }

    /// Evaluate `risk` at `points` and append them.
    pub fn query(&mut self, risk: &dyn Risk, points: Vec<Vec<f64>>, step: usize) -> Result<()> {
        let values = risk.eval_batch(&points)?;
        self.record_evals(points, values, step)
    }

    /// CSV with header `step,x_1,..,x_k,risk`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let k = self.predictor_dim().unwrap_or(0);
        let mut header = vec!["step".to_string()];
        header.extend((1..=k).map(|i| format!("x_{i}")));
        header.push("risk".into());
        wr.write_record(&header)?;
        for ((p, v), s) in self.points.iter().zip(&self.values).zip(&self.step_of) {
            let mut row = vec![s.to_string()];
            row.extend(p.iter().map(|x| x.to_string()));
            row.push(v.to_string());
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let ncols = rd.headers()?.len();
        if ncols < 2 {
            return Err(Error::config("stack", "CSV needs at least step and risk columns"));
        }
        let mut stack = EvalStack::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::config("stack", format!("bad number `{s}`: {e}")))
            };
            let step: usize = rec[0]
                .parse()
                .map_err(|e| Error::config("stack", format!("bad step `{}`: {e}", &rec[0])))?;
            let point = (1..ncols - 1).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?;
            let value = parse(&rec[ncols - 1])?;
            stack.record_evals(vec![point], vec![value], step)?;
        }
        Ok(stack)
    }
}
