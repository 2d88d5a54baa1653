//! Batch experiments driven by a JSON config, and quantile aggregation of
//! repeated runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{self, GdConfig};
use crate::error::{Error, Result};
use crate::expfam::{FamilySpec, MomentParams, NaturalParams};
use crate::meta::{self, MetaConfig, SyntheticTaskDistribution, TaskRecord, TaskSpec};
use crate::risk::{Risk, RiskSpec};
use crate::rng;
use crate::solver::{self, CatoniConfig, SolverTrace};

pub const QUANTILE_CONVENTION: &str = "linear interpolation between order statistics";
pub const DEFAULT_QUANTILES: [f64; 3] = [0.2, 0.5, 0.8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SupacCe,
    Gd,
    Nesterov,
    Meta,
}

impl Method {
    pub const NAMES: [&'static str; 4] = ["supac_ce", "gd", "nesterov", "meta"];
}

/// Synthetic tasks. Solver and baseline runs draw one task per run index;
/// meta runs draw `n_train` training and `n_test` held-out tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksConfig {
    pub distribution_seed: u64,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default)]
    pub n_test: usize,
    /// Evaluate the prior on the test tasks every this many epochs; 0 only
    /// evaluates the initial and final priors.
    #[serde(default)]
    pub test_every: usize,
    /// Inner schedule for test-task calibration; defaults to the meta
    /// first-pass schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_inner: Option<CatoniConfig>,
}

fn default_n_train() -> usize {
    20
}

fn default_repeats() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub family: FamilySpec,
    /// Defaults to the standard normal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<MomentParams>,
    /// Defaults to the prior.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<MomentParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk: Option<RiskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<TasksConfig>,
    #[serde(default)]
    pub catoni: CatoniConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gd: Option<GdConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<MetaConfig>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Fresh draws used to re-estimate each trace record's objective.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_samples: Option<usize>,
}

impl ExperimentConfig {
    /// Parse a config, or the `config` entry of a manifest.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        if let Some(inner) = value.get_mut("config").filter(|_| value_is_manifest(text)) {
            value = inner.take();
        }
        match value.get("method") {
            None => return Err(Error::config("method", "missing")),
            Some(serde_json::Value::String(m)) if Method::NAMES.contains(&m.as_str()) => {}
            Some(other) => {
                return Err(Error::config(
                    "method",
                    format!("unknown method {other}, expected one of {}", Method::NAMES.join(", ")),
                ))
            }
        }
        let cfg: ExperimentConfig =
            serde_path_to_error::deserialize(value).map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::config("repeats", "must be at least 1"));
        }
        if self.eval_samples == Some(0) {
            return Err(Error::config("eval_samples", "must be at least 1"));
        }
        let (needs_gd, needs_meta) = match self.method {
            Method::SupacCe => (false, false),
            Method::Gd | Method::Nesterov => (true, false),
            Method::Meta => (false, true),
        };
        match (&self.gd, needs_gd) {
            (None, true) => return Err(Error::config("gd", "required for this method")),
            (Some(_), false) => return Err(Error::config("gd", "only allowed for methods gd and nesterov")),
            (Some(gd), true) => {
                gd.validate()?;
                if self.method == Method::Nesterov && gd.momentum == 0.0 {
                    return Err(Error::config("gd.momentum", "nesterov needs a positive momentum"));
                }
                if self.method == Method::Gd && gd.momentum != 0.0 {
                    return Err(Error::config("gd.momentum", "must be 0 for method gd; use nesterov"));
                }
            }
            (None, false) => {}
        }
        match (&self.meta, needs_meta) {
            (None, true) => return Err(Error::config("meta", "required for method meta")),
            (Some(_), false) => return Err(Error::config("meta", "only allowed for method meta")),
            (Some(m), true) => m.validate()?,
            (None, false) => {}
        }
        self.catoni.validate()?;
        match (&self.risk, &self.tasks) {
            (Some(_), Some(_)) => return Err(Error::config("risk", "give either risk or tasks, not both")),
            (None, None) => return Err(Error::config("risk", "one of risk or tasks is required")),
            (Some(_), None) if needs_meta => return Err(Error::config("tasks", "required for method meta")),
            (Some(r), None) => {
                r.validate()?;
                if r.predictor_dim() != self.family.predictor_dim() {
                    return Err(Error::config(
                        "risk",
                        format!(
                            "predictor dimension {} differs from the family's {}",
                            r.predictor_dim(),
                            self.family.predictor_dim()
                        ),
                    ));
                }
            }
            (None, Some(t)) => {
                if self.family.predictor_dim() < 3 {
                    return Err(Error::config("tasks", "synthetic tasks need a predictor dimension of at least 3"));
                }
                if needs_meta && t.n_train == 0 {
                    return Err(Error::config("tasks.n_train", "must be at least 1"));
                }
                if let Some(inner) = &t.test_inner {
                    inner.validate()?;
                }
            }
        }
        self.prior_params()?;
        self.init_params()?;
        Ok(())
    }

    pub fn prior_params(&self) -> Result<NaturalParams> {
        match &self.prior {
            None => Ok(self.family.standard_normal()),
            Some(m) => self
                .family
                .natural_from_moments(m)
                .map_err(|e| Error::config("prior", e.to_string())),
        }
    }

    pub fn init_params(&self) -> Result<NaturalParams> {
        match &self.init {
            None => self.prior_params(),
            Some(m) => self
                .family
                .natural_from_moments(m)
                .map_err(|e| Error::config("init", e.to_string())),
        }
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.master_seed.wrapping_add(run as u64)
    }

    fn task_distribution(&self) -> Result<Option<(SyntheticTaskDistribution, &TasksConfig)>> {
        match &self.tasks {
            None => Ok(None),
            Some(t) => Ok(Some((
                SyntheticTaskDistribution::new(t.distribution_seed, self.family.predictor_dim())?,
                t,
            ))),
        }
    }

    /// Risk for a solver or baseline run.
    pub fn risk_for_run(&self, run: usize) -> Result<RiskSpec> {
        if let Some(r) = &self.risk {
            return Ok(r.clone());
        }
        let (dist, t) = self.task_distribution()?.expect("validated");
        Ok(dist.sample_risk(rng::derive_seed(t.distribution_seed, &[run as u64])))
    }

    /// Training and test tasks of a meta run, shared by all repeats.
    pub fn meta_tasks(&self) -> Result<(Vec<TaskSpec>, Vec<TaskSpec>)> {
        let (dist, t) = self.task_distribution()?.ok_or_else(|| Error::config("tasks", "required"))?;
        let task = |i: usize| dist.sample_task(rng::derive_seed(t.distribution_seed, &[i as u64]), self.catoni.lambda);
        let train = (0..t.n_train).map(task).collect();
        let test = (t.n_train..t.n_train + t.n_test).map(task).collect();
        Ok((train, test))
    }
}

fn value_is_manifest(text: &str) -> bool {
    serde_json::from_str::<serde_json::Value>(text)
        .map(|v| v.get("files").is_some() && v.get("config").is_some())
        .unwrap_or(false)
}

#[derive(Debug, Serialize)]
struct PosteriorFile<'a> {
    theta: &'a NaturalParams,
    moments: MomentParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<ReportJson>,
}

#[derive(Debug, Serialize)]
struct ReportJson {
    mean_risk: f64,
    kl_to_prior: f64,
    obj_cat: f64,
    pb_cat: f64,
}

/// Files produced by one run, as `(name, contents)`.
pub type Artifacts = Vec<(String, Vec<u8>)>;

/// Execute run `run` of the experiment without touching the disk.
pub fn run_single(cfg: &ExperimentConfig, run: usize) -> Result<Artifacts> {
    let seed = cfg.run_seed(run);
    let family = &cfg.family;
    let prior = cfg.prior_params()?;
    let init = cfg.init_params()?;
    let mut files = Artifacts::new();

    if cfg.method == Method::Meta {
        let meta_cfg = cfg.meta.as_ref().expect("validated");
        let (train, test) = cfg.meta_tasks()?;
        let out = meta::run_meta_sgd(train, family, &prior, meta_cfg, seed)?;
        let mut trace = Vec::new();
        out.trace.write_csv(&mut trace)?;
        files.push((format!("trace_run{run:03}.csv"), trace));
        files.push((format!("posterior_run{run:03}.json"), posterior_json(family, &out.prior, None)?));
        let t = cfg.tasks.as_ref().expect("validated");
        if !test.is_empty() {
            let inner = t.test_inner.clone().unwrap_or_else(|| meta_cfg.first_pass.clone());
            let n_eval = cfg.eval_samples.unwrap_or(10_000);
            let priors = out.trace.epoch_priors();
            let mut rows = String::from("epochs_done,test_obj\n");
            let mut checkpoints: Vec<usize> = vec![0];
            if t.test_every > 0 {
                checkpoints.extend((1..=priors.len()).filter(|e| e % t.test_every == 0));
            }
            if checkpoints.last() != Some(&priors.len()) {
                checkpoints.push(priors.len());
            }
            for e in checkpoints {
                let p = if e == 0 { &prior } else { &priors[e - 1] };
                let objs = meta::evaluate_prior(&test, family, p, &inner, n_eval, seed)?;
                let mean = objs.iter().sum::<f64>() / objs.len() as f64;
                info!("run {run}: test objective after {e} epochs {mean:.5}");
                writeln!(rows, "{e},{mean}").unwrap();
            }
            files.push((format!("test_objective_run{run:03}.csv"), rows.into_bytes()));
        }
        return Ok(files);
    }

    let risk = cfg.risk_for_run(run)?;
    let (posterior, mut trace) = match cfg.method {
        Method::SupacCe => {
            let out = solver::run_supac_ce(&risk, family, &prior, &init, &cfg.catoni, seed)?;
            (out.posterior, out.trace)
        }
        _ => baselines::run_gd(&risk, family, &prior, &init, cfg.gd.as_ref().expect("validated"), &cfg.catoni, seed)?,
    };
    let report = match cfg.eval_samples {
        Some(n) => Some(reevaluate_trace(&mut trace, &risk, family, &prior, &cfg.catoni, n, seed)?),
        None => None,
    };
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    files.push((format!("trace_run{run:03}.csv"), buf));
    files.push((format!("posterior_run{run:03}.json"), posterior_json(family, &posterior, report)?));
    Ok(files)
}

/// Replace each record's objective by a fresh-sample estimate at its
/// posterior. Returns the final record's report.
fn reevaluate_trace(
    trace: &mut SolverTrace,
    risk: &dyn Risk,
    family: &FamilySpec,
    prior: &NaturalParams,
    catoni: &CatoniConfig,
    n: usize,
    seed: u64,
) -> Result<ReportJson> {
    let mut last = None;
    for (i, rec) in trace.records.iter_mut().enumerate() {
        let rep = solver::evaluate_posterior(risk, family, &rec.theta, prior, catoni, n, rng::derive_seed(seed, &[i as u64]))?;
        rec.obj_cat = rep.obj_cat;
        rec.pb_cat = rep.pb_cat;
        last = Some(rep);
    }
    let rep = match last {
        Some(r) => r,
        None => solver::evaluate_posterior(risk, family, prior, prior, catoni, n, seed)?,
    };
    Ok(ReportJson {
        mean_risk: rep.mean_risk,
        kl_to_prior: rep.kl_to_prior,
        obj_cat: rep.obj_cat,
        pb_cat: rep.pb_cat,
    })
}

fn posterior_json(family: &FamilySpec, theta: &NaturalParams, report: Option<ReportJson>) -> Result<Vec<u8>> {
    let file = PosteriorFile {
        theta,
        moments: family.moments_from_natural(theta)?,
        report,
    };
    Ok(serde_json::to_vec_pretty(&file)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

#[derive(Debug, Serialize)]
struct ManifestFile {
    name: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    crate_version: &'static str,
    seed_rule: &'static str,
    quantile_convention: &'static str,
    config: &'a ExperimentConfig,
    files: Vec<ManifestFile>,
}

/// Run every repeat, write the artifacts and a manifest into `out_dir`.
/// Returns the written file names.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<String>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    if cfg.method == Method::Meta {
        let (train, test) = cfg.meta_tasks()?;
        #[derive(Serialize)]
        struct TaskSet {
            train: Vec<TaskRecord>,
            test: Vec<TaskRecord>,
        }
        let set = TaskSet {
            train: train.iter().map(TaskSpec::record).collect(),
            test: test.iter().map(TaskSpec::record).collect(),
        };
        let bytes = serde_json::to_vec_pretty(&set)?;
        fs::write(out_dir.join("tasks.json"), &bytes)?;
        entries.push(("tasks.json".to_string(), bytes));
    }
    for run in 0..cfg.repeats {
        info!("run {run} with seed {}", cfg.run_seed(run));
        let files = run_single(cfg, run).map_err(|e| Error::Run { run, source: Box::new(e) })?;
        for (name, bytes) in files {
            fs::write(out_dir.join(&name), &bytes)?;
            entries.push((name, bytes));
        }
    }
    let manifest = Manifest {
        crate_version: env!("CARGO_PKG_VERSION"),
        seed_rule: "run seed = master_seed + run index",
        quantile_convention: QUANTILE_CONVENTION,
        config: &ExperimentConfig {
            output_dir: out_dir.to_path_buf(),
            ..cfg.clone()
        },
        files: entries
            .iter()
            .map(|(name, bytes)| ManifestFile {
                name: name.clone(),
                sha256: sha256_hex(bytes),
            })
            .collect(),
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(entries.into_iter().map(|(n, _)| n).collect())
}

/// Quantile `p` of ascending `sorted` by linear interpolation between order
/// statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

const GRID_COLUMNS: [&str; 3] = ["queries", "epochs_done", "epoch"];
const VALUE_COLUMNS: [&str; 3] = ["obj_cat", "test_obj", "meta_obj"];

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub grid_name: String,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

/// Grid and objective columns of a trace CSV.
pub fn read_curve(path: &Path) -> Result<Curve> {
    let mut rd = csv::Reader::from_path(path)?;
    let headers = rd.headers()?.clone();
    let find = |names: &[&str]| {
        names
            .iter()
            .find_map(|n| headers.iter().position(|h| h == *n).map(|i| (i, n.to_string())))
    };
    let bad = |what: &str| Error::config("input", format!("{}: no {what} column", path.display()));
    let (gi, grid_name) = find(&GRID_COLUMNS).ok_or_else(|| bad("grid"))?;
    let (vi, _) = find(&VALUE_COLUMNS).ok_or_else(|| bad("objective"))?;
    let mut curve = Curve {
        grid_name,
        grid: Vec::new(),
        values: Vec::new(),
    };
    for rec in rd.records() {
        let rec = rec?;
        let parse = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|e| Error::config("input", format!("{}: {e}", path.display())))
        };
        curve.grid.push(parse(gi)?);
        curve.values.push(parse(vi)?);
    }
    Ok(curve)
}

/// Summarize curves sharing one grid: per grid point, the median and the
/// requested quantiles across curves.
pub fn aggregate_curves(curves: &[(String, Curve)], quantiles: &[f64]) -> Result<String> {
    let (first_name, first) = curves.first().ok_or_else(|| Error::config("input", "no trace files found"))?;
    for (name, c) in &curves[1..] {
        if c.grid != first.grid || c.grid_name != first.grid_name {
            return Err(Error::MismatchedGrids {
                first: first_name.clone(),
                other: name.clone(),
            });
        }
    }
    if let Some(p) = quantiles.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::config("quantiles", format!("{p} is outside [0, 1]")));
    }
    let mut out = first.grid_name.clone();
    out.push_str(",median");
    for p in quantiles {
        write!(out, ",q{p}").unwrap();
    }
    out.push('\n');
    let mut column = Vec::with_capacity(curves.len());
    for (i, g) in first.grid.iter().enumerate() {
        column.clear();
        column.extend(curves.iter().map(|(_, c)| c.values[i]));
        column.sort_by(f64::total_cmp);
        write!(out, "{g},{}", quantile_sorted(&column, 0.5)).unwrap();
        for p in quantiles {
            write!(out, ",{}", quantile_sorted(&column, *p)).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Aggregate the `trace_*.csv` files of `input` (or, if none, the
/// `test_objective_*.csv` files) into `output`.
pub fn aggregate(input: &Path, quantiles: &[f64], output: &Path) -> Result<()> {
    let mut files: Vec<PathBuf> = Vec::new();
    for prefix in ["trace_", "test_objective_"] {
        files = fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|x| x == "csv")
                    && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(prefix))
            })
            .collect();
        if !files.is_empty() {
            break;
        }
    }
    files.sort();
    let curves = files
        .iter()
        .map(|p| Ok((p.display().to_string(), read_curve(p)?)))
        .collect::<Result<Vec<_>>>()?;
    fs::write(output, aggregate_curves(&curves, quantiles)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(grid: &[f64], values: &[f64]) -> Curve {
        Curve {
            grid_name: "queries".into(),
            grid: grid.to_vec(),
            values: values.to_vec(),
        }
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile_sorted(&[1.0, 2.0, 3.0], 0.5), 2.0);
        assert_eq!(quantile_sorted(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert!((quantile_sorted(&[0.0, 10.0], 0.2) - 2.0).abs() < 1e-12);
        assert_eq!(quantile_sorted(&[7.0], 0.8), 7.0);
    }

    #[test]
    fn aggregate_median_and_identity() {
        let one = vec![("a".to_string(), curve(&[10.0, 20.0], &[0.5, 0.25]))];
        assert_eq!(
            aggregate_curves(&one, &[0.2, 0.8]).unwrap(),
            "queries,median,q0.2,q0.8\n10,0.5,0.5,0.5\n20,0.25,0.25,0.25\n"
        );
        let three: Vec<_> = [3.0, 1.0, 2.0]
            .iter()
            .enumerate()
            .map(|(i, v)| (i.to_string(), curve(&[5.0], &[*v])))
            .collect();
        assert!(aggregate_curves(&three, &[]).unwrap().ends_with("5,2\n"));
    }

    #[test]
    fn mismatched_grids_rejected() {
        let c = vec![("a".to_string(), curve(&[1.0], &[0.0])), ("b".to_string(), curve(&[2.0], &[0.0]))];
        assert!(matches!(aggregate_curves(&c, &[0.5]), Err(Error::MismatchedGrids { .. })));
        assert!(aggregate_curves(&[], &[0.5]).is_err());
    }

    #[test]
    fn unknown_method_names_field() {
        let err = ExperimentConfig::from_json(r#"{"method": "sgld", "family": {"structure": "full", "predictor_dim": 1}}"#)
            .unwrap_err();
        assert!(err.is_config_error());
        assert!(err.to_string().contains("`method`"), "{err}");
    }

    #[test]
    fn bad_field_reports_path() {
        let err = ExperimentConfig::from_json(
            r#"{"method": "supac_ce", "family": {"structure": "full", "predictor_dim": 1},
                "risk": {"kind": "quadratic_in_f", "family": {"structure": "full", "predictor_dim": 1}, "eta": [0, 1], "c": 0},
                "catoni": {"lambda": "big"}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("catoni.lambda"), "{err}");
    }

    #[test]
    fn method_blocks_are_exclusive() {
        let base = r#""family": {"structure": "full", "predictor_dim": 1},
            "risk": {"kind": "quadratic_in_f", "family": {"structure": "full", "predictor_dim": 1}, "eta": [0, 1], "c": 0}"#;
        assert!(ExperimentConfig::from_json(&format!(r#"{{"method": "supac_ce", {base}}}"#)).is_ok());
        let gd = r#""gd": {"step_size": 0.1, "per_step": 10, "max_queries": 100}"#;
        assert!(ExperimentConfig::from_json(&format!(r#"{{"method": "supac_ce", {base}, {gd}}}"#)).is_err());
        assert!(ExperimentConfig::from_json(&format!(r#"{{"method": "gd", {base}, {gd}}}"#)).is_ok());
        assert!(ExperimentConfig::from_json(&format!(r#"{{"method": "nesterov", {base}, {gd}}}"#)).is_err());
        assert!(ExperimentConfig::from_json(&format!(r#"{{"method": "gd", {base}}}"#)).is_err());
        assert!(ExperimentConfig::from_json(&format!(r#"{{"method": "supac_ce", {base}, "repeats": 0}}"#)).is_err());
    }

    #[test]
    fn digest_is_hex() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
