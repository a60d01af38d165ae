//! Experiment configuration, sweeps, and persistence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{certify_case, CaseOptions, CertificationReport, CertifyConfig, CertifyError};
use crate::flow::{init_state_dims, integrate, FlowError, FlowTrace, Horizon, IntegrateOptions, NetworkState};
use crate::model::{
    build_problem, h_spectrum, population_moments, BuildOptions, Environment, ModelError, ProblemSpec, RawProblem,
    SampleMoments, SpecRecipe,
};
use crate::noise::{make_dominoes, BlobSampler, GroupedDataset, NoiseError};
use crate::probe::{empirical_probe, optimal_probe, EvalSet, Pca, ProbeError, ProbeProtocol};
use crate::rng;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Certify(#[from] CertifyError),
}

pub type Result<T> = std::result::Result<T, RunnerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Init,
    Erm,
    Pca,
    Ftt,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Init => "init",
            Method::Erm => "erm",
            Method::Pca => "pca",
            Method::Ftt => "ftt",
        }
    }
}

/// Finite grouped benchmark: Dominoes-style blocks, flow on sample moments,
/// balanced-resampling probe on a held-out test-environment split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkRecipe {
    pub core: BlobSampler,
    pub spurious: BlobSampler,
    pub n_train: usize,
    pub n_probe: usize,
    pub n_eval: usize,
    pub m: usize,
}

impl Default for BenchmarkRecipe {
    fn default() -> Self {
        BenchmarkRecipe {
            core: BlobSampler { dim: 4, separation: 3.0, std: 1.0 },
            spurious: BlobSampler { dim: 4, separation: 6.0, std: 1.0 },
            n_train: 2000,
            n_probe: 1000,
            n_eval: 2000,
            m: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSource {
    /// Random instance; noise levels come from the grid.
    Recipe(SpecRecipe),
    /// Explicit instance; its noise levels are replaced by the grid's.
    Spec(RawProblem),
    Benchmark(BenchmarkRecipe),
}

impl ProblemSource {
    /// Population instance at the given noise levels.
    pub fn build(&self, eta_core: f64, eta_spu: f64) -> Result<ProblemSpec> {
        match self {
            ProblemSource::Recipe(r) => Ok(r.build(eta_core, eta_spu)?),
            ProblemSource::Spec(raw) => {
                let raw = RawProblem { eta_core, eta_spu, ..raw.clone() };
                Ok(build_problem(raw, BuildOptions::default())?)
            }
            ProblemSource::Benchmark(_) => Err(RunnerError::Config("a benchmark has no population instance".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseGrid {
    pub eta_core: Vec<f64>,
    pub eta_spu: Vec<f64>,
}

impl NoiseGrid {
    /// Cells in row-major order over `(eta_core, eta_spu)`.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.eta_core.iter().flat_map(|&a| self.eta_spu.iter().map(move |&b| (a, b))).collect()
    }
}

/// One certified instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertCase {
    pub name: String,
    pub problem: ProblemSource,
    pub eta_core: f64,
    pub eta_spu: f64,
    #[serde(default)]
    pub init_seed: u64,
    /// Frozen fraction of the paired FTT run.
    #[serde(default)]
    pub ftt_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertificationPlan {
    pub horizon: Horizon,
    pub thresholds: CertifyConfig,
    pub cases: Vec<CertCase>,
}

/// Instance used by the default grid.
pub const GRID_RECIPE: SpecRecipe = SpecRecipe { d1: 8, d2: 2, m: 7, k: 3, lambda_max: 2.0, decay: 0.7, seed: 3 };

/// Instance family used by the default certification cases.
pub fn cert_recipe(d1: usize, m: usize, seed: u64) -> SpecRecipe {
    SpecRecipe { d1, d2: 2, m, k: 3, lambda_max: 1.0, decay: 0.9, seed }
}

/// Converged-run horizon: also requires `||v - v*|| <= 1e-9`.
pub const CONVERGED: Horizon = Horizon::Auto { rel_excess: 1e-3, v_tol: 1e-9, t_min: 100.0, t_max: 1e7 };

impl Default for CertificationPlan {
    fn default() -> Self {
        let mut cases = Vec::new();
        for (seed, eta_spu) in [0.1, 0.05, 0.1, 0.05, 0.1].into_iter().enumerate() {
            cases.push(CertCase {
                name: format!("large-core-{seed}"),
                problem: ProblemSource::Recipe(cert_recipe(12, 8, seed as u64)),
                eta_core: 0.3,
                eta_spu,
                init_seed: 0,
                ftt_p: Some(0.5),
            });
        }
        for (seed, eta_core) in [0.02, 0.05, 0.1, 0.02, 0.05].into_iter().enumerate() {
            cases.push(CertCase {
                name: format!("small-core-{seed}"),
                problem: ProblemSource::Recipe(cert_recipe(10, 6, seed as u64)),
                eta_core,
                eta_spu: 0.2,
                init_seed: 0,
                ftt_p: None,
            });
        }
        CertificationPlan { horizon: CONVERGED, thresholds: CertifyConfig::default(), cases }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub problem: ProblemSource,
    pub methods: Vec<Method>,
    /// Frozen fractions of the `ftt` method.
    pub p_values: Vec<f64>,
    pub noise_grid: NoiseGrid,
    /// Per-record seeds; each is combined with `master_seed`.
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub horizon: Horizon,
    /// Conserved-drift tolerance of the integrator.
    pub tolerance: f64,
    pub probe: ProbeProtocol,
    pub certification: CertificationPlan,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let etas = vec![0.05, 0.1, 0.15, 0.2, 0.25];
        ExperimentConfig {
            problem: ProblemSource::Recipe(GRID_RECIPE),
            methods: vec![Method::Init, Method::Erm, Method::Pca, Method::Ftt],
            p_values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            noise_grid: NoiseGrid { eta_core: etas.clone(), eta_spu: etas },
            seeds: vec![0, 1, 2],
            master_seed: 0,
            horizon: Horizon::default(),
            tolerance: 1e-8,
            probe: ProbeProtocol::default(),
            certification: CertificationPlan::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RunnerError::Config(msg));
        if self.methods.is_empty() {
            return bad("methods must be nonempty".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        if let Some(p) = self.p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return bad(format!("p = {p} outside [0, 1]"));
        }
        if self.methods.contains(&Method::Ftt) && self.p_values.is_empty() {
            return bad("ftt needs at least one p value".into());
        }
        let etas = self.noise_grid.eta_core.iter().chain(&self.noise_grid.eta_spu);
        if let Some(e) = etas.clone().find(|e| !(0.0..0.5).contains(*e)) {
            return bad(format!("noise level {e} outside [0, 0.5)"));
        }
        if self.noise_grid.eta_core.is_empty() || self.noise_grid.eta_spu.is_empty() {
            return bad("noise grid must be nonempty".into());
        }
        if !(self.tolerance > 0.0) {
            return bad(format!("tolerance {} must be positive", self.tolerance));
        }
        for c in &self.certification.cases {
            if matches!(c.problem, ProblemSource::Benchmark(_)) {
                return bad(format!("certification case {} needs a population instance", c.name));
            }
        }
        Ok(())
    }

    fn integrate_options(&self, horizon: Horizon) -> IntegrateOptions {
        IntegrateOptions { horizon, tolerance: self.tolerance, h0: None }
    }
}

/// Seed of a record: `seed` mixed with the master seed.
pub fn derive_seed(master: u64, seed: u64) -> u64 {
    rng::stream_id(&[master, seed])
}

/// One `(cell, method, p, seed)` measurement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRecord {
    pub eta_core: f64,
    pub eta_spu: f64,
    pub method: Method,
    pub p: Option<f64>,
    pub seed: u64,
    pub loss_te: Option<f64>,
    pub ratio: Option<f64>,
    pub worst_group_acc: Option<f64>,
    pub avg_acc: Option<f64>,
    pub t_end: Option<f64>,
    pub drift_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub const CSV_HEADER: [&str; 11] = [
    "eta_core",
    "eta_spu",
    "method",
    "p",
    "seed",
    "loss_te",
    "ratio",
    "worst_group_acc",
    "avg_acc",
    "t_end",
    "drift_max",
];

impl GridRecord {
    fn empty(eta_core: f64, eta_spu: f64, method: Method, p: Option<f64>, seed: u64) -> Self {
        GridRecord {
            eta_core,
            eta_spu,
            method,
            p,
            seed,
            loss_te: None,
            ratio: None,
            worst_group_acc: None,
            avg_acc: None,
            t_end: None,
            drift_max: None,
            error: None,
        }
    }

    fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.eta_core.to_string(),
            self.eta_spu.to_string(),
            self.method.name().to_string(),
            opt(self.p),
            self.seed.to_string(),
            opt(self.loss_te),
            opt(self.ratio),
            opt(self.worst_group_acc),
            opt(self.avg_acc),
            opt(self.t_end),
            opt(self.drift_max),
        ]
    }

    /// Loss reduction (population) or worst-group gain (benchmark) over `base`.
    pub fn improvement_over(&self, base: &GridRecord) -> Option<f64> {
        match (self.loss_te, base.loss_te, self.worst_group_acc, base.worst_group_acc) {
            (Some(l), Some(b), _, _) => Some(b - l),
            (_, _, Some(a), Some(b)) => Some(a - b),
            _ => None,
        }
    }
}

/// Mean improvement of a method over `init` in one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Improvement {
    pub eta_core: f64,
    pub eta_spu: f64,
    pub method: Method,
    pub p: Option<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    /// Ordered by cell index, then method and `p`, then seed.
    pub records: Vec<GridRecord>,
    pub improvements: Vec<Improvement>,
}

impl GridResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.records {
            w.write_record(r.csv_row())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn write_improvements_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["eta_core", "eta_spu", "method", "p", "improvement"])?;
        for i in &self.improvements {
            w.write_record([
                i.eta_core.to_string(),
                i.eta_spu.to_string(),
                i.method.name().to_string(),
                i.p.map(|p| p.to_string()).unwrap_or_default(),
                i.mean.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Records of one method, in order.
    pub fn method(&self, m: Method) -> impl Iterator<Item = &GridRecord> {
        self.records.iter().filter(move |r| r.method == m)
    }
}

/// `(method, p)` columns of a run, in output order. `p = 0` and `p = 1` of
/// `ftt` stay labeled `ftt` but are computed as `erm` and `pca`.
fn columns(methods: &[Method], p_values: &[f64]) -> Vec<(Method, Option<f64>)> {
    let mut ms = methods.to_vec();
    ms.sort();
    ms.dedup();
    let mut out = Vec::new();
    for m in ms {
        match m {
            Method::Ftt => out.extend(p_values.iter().map(|&p| (m, Some(p)))),
            Method::Erm => out.push((m, Some(0.0))),
            Method::Pca => out.push((m, Some(1.0))),
            Method::Init => out.push((m, None)),
        }
    }
    out
}

/// Frozen width for a method column: `None` means no training.
enum Plan {
    Init,
    Train { frozen: usize },
    Pca,
}

fn plan(method: Method, p: Option<f64>, m: usize) -> Plan {
    match method {
        Method::Init => Plan::Init,
        Method::Erm => Plan::Train { frozen: 0 },
        Method::Pca => Plan::Pca,
        Method::Ftt => {
            let pm = (p.unwrap_or(0.0) * m as f64).round() as usize;
            if pm >= m {
                Plan::Pca
            } else {
                Plan::Train { frozen: pm }
            }
        }
    }
}

struct Measured {
    loss_te: Option<f64>,
    ratio: Option<f64>,
    worst: Option<f64>,
    avg: Option<f64>,
    trace: Option<FlowTrace>,
}

fn population_job(
    cfg: &ExperimentConfig,
    cols: &[(Method, Option<f64>)],
    eta_core: f64,
    eta_spu: f64,
    seed: u64,
) -> Vec<GridRecord> {
    let spec = match cfg.problem.build(eta_core, eta_spu) {
        Ok(s) => s,
        Err(e) => return failed_records(cols, eta_core, eta_spu, seed, &e),
    };
    let moments = population_moments(&spec);
    let spectrum = h_spectrum(&spec, &moments);
    let init_seed = derive_seed(cfg.master_seed, seed);
    let opts = cfg.integrate_options(cfg.horizon);
    let measure = |w: &DMatrix<f64>, trace: Option<FlowTrace>| {
        let loss = optimal_probe(w, &spec).test_loss;
        let ratio = (moments.err_star_te > 0.0).then(|| loss / moments.err_star_te);
        Measured { loss_te: Some(loss), ratio, worst: None, avg: None, trace }
    };
    let run = |method: Method, p: Option<f64>| -> Result<Measured> {
        match plan(method, p, spec.m()) {
            Plan::Init => Ok(measure(&crate::flow::init_state(&spec, init_seed, None)?.w, None)),
            Plan::Pca => {
                let top = spectrum.as_ref().map_err(|e| e.clone())?.top(spec.m());
                Ok(measure(&top, None))
            }
            Plan::Train { frozen } => {
                let fixed = if frozen > 0 { Some(spectrum.as_ref().map_err(|e| e.clone())?.top(frozen)) } else { None };
                let s0 = crate::flow::init_state(&spec, init_seed, fixed.as_ref())?;
                let (s, tr) = integrate(&s0, &moments, &opts, None)?;
                Ok(measure(&s.w, Some(tr)))
            }
        }
    };
    collect(cols, eta_core, eta_spu, seed, run)
}

/// Data splits of one benchmark record.
pub struct BenchmarkData {
    pub train: GroupedDataset,
    pub probe: GroupedDataset,
    pub eval: GroupedDataset,
}

pub fn benchmark_data(recipe: &BenchmarkRecipe, eta_core: f64, eta_spu: f64, seed: u64) -> Result<BenchmarkData> {
    let (c, s) = (&recipe.core, &recipe.spurious);
    Ok(BenchmarkData {
        train: make_dominoes(c, s, recipe.n_train, eta_core, eta_spu, Environment::Train, seed)?,
        probe: make_dominoes(c, s, recipe.n_probe, 0.0, 0.0, Environment::Test, rng::stream_id(&[seed, 1]))?,
        eval: make_dominoes(c, s, recipe.n_eval, 0.0, 0.0, Environment::Test, rng::stream_id(&[seed, 2]))?,
    })
}

fn signed_labels(y: &[u8]) -> DVector<f64> {
    DVector::from_iterator(y.len(), y.iter().map(|&v| 2.0 * v as f64 - 1.0))
}

fn benchmark_job(
    cfg: &ExperimentConfig,
    recipe: &BenchmarkRecipe,
    cols: &[(Method, Option<f64>)],
    eta_core: f64,
    eta_spu: f64,
    seed: u64,
) -> Vec<GridRecord> {
    let derived = derive_seed(cfg.master_seed, seed);
    let data = match benchmark_data(recipe, eta_core, eta_spu, derived) {
        Ok(d) => d,
        Err(e) => return failed_records(cols, eta_core, eta_spu, seed, &e),
    };
    let x = &data.train.x;
    let d = x.ncols();
    let m = recipe.m;
    let objective = SampleMoments::from_data(x, &signed_labels(&data.train.y_obs));
    let opts = cfg.integrate_options(cfg.horizon);
    let pca = Pca::fit(x, m.min(d));

    let measure = |w: &DMatrix<f64>, trace: Option<FlowTrace>| -> Result<Measured> {
        let feats = &data.probe.x * w;
        let eval_feats = &data.eval.x * w;
        let eval = EvalSet { features: &eval_feats, labels: &data.eval.y_obs, spurious: &data.eval.spurious_attr };
        let report =
            empirical_probe(&feats, &data.probe.y_obs, &data.probe.spurious_attr, &cfg.probe, derived, Some(eval))?;
        Ok(Measured {
            loss_te: None,
            ratio: None,
            worst: Some(report.worst_group_accuracy),
            avg: Some(report.average_accuracy),
            trace,
        })
    };
    let run = |method: Method, p: Option<f64>| -> Result<Measured> {
        match plan(method, p, m) {
            Plan::Init => measure(&init_state_dims(d, m, derived, None)?.w, None),
            Plan::Pca => measure(&pca.as_ref().map_err(|e| e.clone())?.components, None),
            Plan::Train { frozen } => {
                let fixed = (frozen > 0)
                    .then(|| pca.as_ref().map(|p| p.components.columns(0, frozen).into_owned()).map_err(|e| e.clone()))
                    .transpose()?;
                let s0: NetworkState = init_state_dims(d, m, derived, fixed.as_ref())?;
                let (s, tr) = integrate(&s0, &objective, &opts, None)?;
                measure(&s.w, Some(tr))
            }
        }
    };
    collect(cols, eta_core, eta_spu, seed, run)
}

fn collect<F>(cols: &[(Method, Option<f64>)], eta_core: f64, eta_spu: f64, seed: u64, run: F) -> Vec<GridRecord>
where
    F: Fn(Method, Option<f64>) -> Result<Measured>,
{
    cols.iter()
        .map(|&(method, p)| {
            let mut rec = GridRecord::empty(eta_core, eta_spu, method, p, seed);
            match run(method, p) {
                Ok(m) => {
                    rec.loss_te = m.loss_te;
                    rec.ratio = m.ratio;
                    rec.worst_group_acc = m.worst;
                    rec.avg_acc = m.avg;
                    rec.t_end = Some(m.trace.as_ref().map_or(0.0, |t| t.last().t));
                    rec.drift_max = Some(m.trace.as_ref().map_or(0.0, |t| t.drift_max));
                }
                Err(e) => rec.error = Some(e.to_string()),
            }
            rec
        })
        .collect()
}

fn failed_records(
    cols: &[(Method, Option<f64>)],
    eta_core: f64,
    eta_spu: f64,
    seed: u64,
    err: &dyn std::fmt::Display,
) -> Vec<GridRecord> {
    cols.iter()
        .map(|&(method, p)| GridRecord {
            error: Some(err.to_string()),
            ..GridRecord::empty(eta_core, eta_spu, method, p, seed)
        })
        .collect()
}

fn improvements(
    records: &[GridRecord],
    cells: &[(f64, f64)],
    cols: &[(Method, Option<f64>)],
    n_seeds: usize,
) -> Vec<Improvement> {
    let per_cell = cols.len() * n_seeds;
    let mut out = Vec::new();
    let Some(init_col) = cols.iter().position(|c| c.0 == Method::Init) else { return out };
    for (ci, &(eta_core, eta_spu)) in cells.iter().enumerate() {
        let block = &records[ci * per_cell..(ci + 1) * per_cell];
        for (k, &(method, p)) in cols.iter().enumerate() {
            if method == Method::Init {
                continue;
            }
            let diffs: Vec<f64> = (0..n_seeds)
                .filter_map(|s| block[s * cols.len() + k].improvement_over(&block[s * cols.len() + init_col]))
                .collect();
            if diffs.len() == n_seeds {
                out.push(Improvement {
                    eta_core,
                    eta_spu,
                    method,
                    p,
                    mean: diffs.iter().sum::<f64>() / n_seeds as f64,
                });
            }
        }
    }
    out
}

/// Every `(cell, method, p, seed)` record of the configured grid. Cells run
/// in parallel on the current rayon pool; output order does not depend on it.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridResult> {
    cfg.validate()?;
    let cols = columns(&cfg.methods, &cfg.p_values);
    sweep(cfg, &cols)
}

fn sweep(cfg: &ExperimentConfig, cols: &[(Method, Option<f64>)]) -> Result<GridResult> {
    let cells = cfg.noise_grid.cells();
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s))).collect();
    let blocks: Vec<Vec<GridRecord>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let (eta_core, eta_spu) = cells[c];
            match &cfg.problem {
                ProblemSource::Benchmark(b) => benchmark_job(cfg, b, cols, eta_core, eta_spu, seed),
                _ => population_job(cfg, cols, eta_core, eta_spu, seed),
            }
        })
        .collect();
    // reorder each cell from (seed, column) to (column, seed)
    let n_seeds = cfg.seeds.len();
    let mut records = Vec::with_capacity(blocks.len() * cols.len());
    let mut seed_major = Vec::with_capacity(blocks.len() * cols.len());
    for cell in blocks.chunks(n_seeds) {
        for k in 0..cols.len() {
            records.extend(cell.iter().map(|b| b[k].clone()));
        }
        for b in cell {
            seed_major.extend(b.iter().cloned());
        }
    }
    let improvements = improvements(&seed_major, &cells, cols, n_seeds);
    Ok(GridResult { records, improvements })
}

/// Sweeps the `ftt` method over `p_values` (`p = 0` is plain ERM, `p = 1` the
/// PCA features) on the configured grid.
pub fn run_pablation(cfg: &ExperimentConfig) -> Result<GridResult> {
    cfg.validate()?;
    if cfg.p_values.is_empty() {
        return Err(RunnerError::Config("p_values must be nonempty".into()));
    }
    let cols: Vec<(Method, Option<f64>)> = cfg.p_values.iter().map(|&p| (Method::Ftt, Some(p))).collect();
    sweep(cfg, &cols)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub reports: Vec<CertificationReport>,
    pub passed: bool,
}

impl SuiteReport {
    /// 0 when no claim with met assumptions failed, else 1.
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

/// Certifies every configured case; cases run in parallel.
pub fn run_certification(cfg: &ExperimentConfig) -> Result<SuiteReport> {
    cfg.validate()?;
    let plan = &cfg.certification;
    let reports: Vec<CertificationReport> = plan
        .cases
        .par_iter()
        .map(|case| -> Result<CertificationReport> {
            let spec = case.problem.build(case.eta_core, case.eta_spu)?;
            let opts = CaseOptions {
                init_seed: derive_seed(cfg.master_seed, case.init_seed),
                ftt_p: case.ftt_p,
                integrate: cfg.integrate_options(plan.horizon),
                certify: plan.thresholds,
            };
            Ok(certify_case(&case.name, &spec, &opts)?.report)
        })
        .collect::<Result<_>>()?;
    let passed = reports.iter().all(|r| r.passed());
    Ok(SuiteReport { reports, passed })
}

/// Runs `f` on a pool of `threads` workers, or on the global pool when `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| RunnerError::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Writes `value` as pretty JSON to `dir/name`, creating `dir`.
pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

/// Writes `records.csv`, `improvements.csv` and `records.json` for a sweep.
pub fn write_grid(dir: &Path, stem: &str, result: &GridResult) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{stem}.csv"));
    result.write_csv(fs::File::create(&path)?)?;
    if !result.improvements.is_empty() {
        result.write_improvements_csv(fs::File::create(dir.join(format!("{stem}_improvements.csv")))?)?;
    }
    write_json(dir, &format!("{stem}.json"), result)?;
    Ok(path)
}
