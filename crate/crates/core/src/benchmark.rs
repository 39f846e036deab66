//! Replicated simulation experiments: generate, initialize, optionally tune,
//! fit, score.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::init::{initialize, InitConfig, InitStrategy};
use crate::metrics::{estimation_errors, tpr_fpr};
use crate::model::{CpModel, RegressionDataset};
use crate::rng::derive_seed;
use crate::sim::{generate, GroundTruth, SimSpec};
use crate::solver::{fit, FitReport, SolverConfig};
use crate::tuning::{sequential_tune, TuningGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Sparsity and fusion constraints.
    Poster,
    /// Sparsity only.
    NoFusion,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Poster => "poster",
            Method::NoFusion => "no-fusion",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioKind {
    /// Both methods fitted on each replication of one design.
    Table(SimSpec),
    /// Spectral initialization error over a range of sample sizes.
    InitTrend {
        spec: SimSpec,
        sample_sizes: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkScenario {
    pub id: String,
    pub kind: ScenarioKind,
}

fn parse_num(id: &str, token: &str, prefix: &str) -> Result<f64> {
    token
        .strip_prefix(prefix)
        .and_then(|v| v.parse::<f64>().ok())
        .filter(|v| v.is_finite())
        .ok_or_else(|| {
            Error::InvalidParameter(format!(
                "scenario {id:?}: cannot read {prefix:?} from {token:?}"
            ))
        })
}

/// Scenario ids:
///
/// * `table1-mn<m_n>-mt<m_t>-w<w>-f<f_0>` (block missing),
/// * `table2-p<p>-w<w>-f<f_0>` (random missing),
/// * `figure1-r<r>` (initialization error trend),
///
/// where the table ids accept optional `-d<d>` (cube side) and `-n<n>` suffixes.
pub fn parse_scenario(id: &str) -> Result<BenchmarkScenario> {
    let tokens: Vec<&str> = id.split('-').collect();
    let bad = || Error::InvalidParameter(format!("unknown scenario {id:?}"));
    let (head, rest) = tokens.split_first().ok_or_else(bad)?;
    let kind = match *head {
        "table1" | "table2" => {
            let fixed = if *head == "table1" { 4 } else { 3 };
            if rest.len() < fixed {
                return Err(bad());
            }
            let (mut d, mut n) = (32usize, 100usize);
            for t in &rest[fixed..] {
                if t.starts_with('d') {
                    d = parse_num(id, t, "d")? as usize;
                } else if t.starts_with('n') {
                    n = parse_num(id, t, "n")? as usize;
                } else {
                    return Err(bad());
                }
            }
            let dims = vec![d, d, d, 5];
            let spec = if *head == "table1" {
                SimSpec::block_missing(
                    dims,
                    n,
                    parse_num(id, rest[2], "w")?,
                    parse_num(id, rest[3], "f")?,
                    parse_num(id, rest[0], "mn")?,
                    parse_num(id, rest[1], "mt")?,
                )
            } else {
                SimSpec::random_missing(
                    dims,
                    n,
                    parse_num(id, rest[1], "w")?,
                    parse_num(id, rest[2], "f")?,
                    parse_num(id, rest[0], "p")?,
                )
            };
            spec.validate()?;
            ScenarioKind::Table(spec)
        }
        "figure1" => {
            if rest.len() != 1 {
                return Err(bad());
            }
            let rank = parse_num(id, rest[0], "r")? as usize;
            if rank == 0 {
                return Err(bad());
            }
            let mut spec = SimSpec::random_missing(vec![30, 20, 10], 20, 20.0, 1.0, 0.5);
            spec.sparsity_fraction = 1.0;
            spec.rank = rank;
            ScenarioKind::InitTrend {
                spec,
                sample_sizes: vec![20, 40, 60, 80, 100],
            }
        }
        _ => return Err(bad()),
    };
    Ok(BenchmarkScenario {
        id: id.to_string(),
        kind,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOptions {
    pub reps: usize,
    pub seed: u64,
    pub jobs: usize,
    pub init: InitStrategy,
    /// BIC tuning of the sparsity and fusion fractions instead of the true
    /// levels.
    pub tuning: Option<TuningGrid>,
    pub max_iterations: usize,
    /// Random starts per fit (random initialization only). Each start runs
    /// `pilot_sweeps` sweeps; the one with the lowest loss is continued.
    pub starts: usize,
    pub pilot_sweeps: usize,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            reps: 10,
            seed: 0,
            jobs: 1,
            init: InitStrategy::Spectral,
            tuning: None,
            max_iterations: 200,
            starts: 3,
            pilot_sweeps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub replication: usize,
    pub method: String,
    pub coef_err_abs: f64,
    pub coef_err_rel: f64,
    pub comp_err: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub seconds: f64,
    pub error: Option<String>,
}

impl MetricsRow {
    fn failed(replication: usize, method: String, seconds: f64, e: &Error) -> Self {
        Self {
            replication,
            method,
            coef_err_abs: f64::NAN,
            coef_err_rel: f64::NAN,
            comp_err: f64::NAN,
            tpr: f64::NAN,
            fpr: f64::NAN,
            seconds,
            error: Some(e.to_string()),
        }
    }

    fn scored(
        replication: usize,
        method: String,
        est: &CpModel,
        truth: &GroundTruth,
        seconds: f64,
    ) -> Result<Self> {
        let e = estimation_errors(est, truth)?;
        let s = tpr_fpr(est, truth)?;
        Ok(Self {
            replication,
            method,
            coef_err_abs: e.coef_abs,
            coef_err_rel: e.coef_rel,
            comp_err: e.component.unwrap_or(f64::NAN),
            tpr: s.tpr,
            fpr: s.fpr,
            seconds,
            error: None,
        })
    }
}

pub const METRICS_CSV_HEADER: &str =
    "replication,method,coef_err_abs,coef_err_rel,comp_err,tpr,fpr,seconds";

/// Metrics table as CSV; failed rows hold NaN. With `timings = false` the
/// seconds column is zero.
pub fn metrics_csv(rows: &[MetricsRow], timings: bool) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let secs = if timings { r.seconds } else { 0.0 };
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.3}",
            r.replication, r.method, r.coef_err_abs, r.coef_err_rel, r.comp_err, r.tpr, r.fpr, secs
        )
        .expect("writing to a String");
    }
    out
}

/// Sparsity and fusion levels realized by the generated truth, with fusion
/// switched off for the ablation. Falls back to the nominal levels of the
/// design when the truth has no CP form.
pub fn oracle_config(
    spec: &SimSpec,
    truth: &GroundTruth,
    method: Method,
    max_iterations: usize,
) -> SolverConfig {
    let (nominal_s, nominal_f) = spec.true_levels();
    let s = truth.sparsity_levels().unwrap_or(nominal_s);
    let f = match method {
        Method::Poster => truth.fusion_levels().unwrap_or(nominal_f),
        Method::NoFusion => spec.dims.clone(),
    };
    let mut cfg = SolverConfig::new(spec.rank, s, f);
    cfg.max_iterations = max_iterations;
    cfg
}

/// Fits `method` on one dataset with the oracle levels (or BIC tuning).
pub fn fit_method(
    data: &RegressionDataset,
    spec: &SimSpec,
    truth: &GroundTruth,
    method: Method,
    opts: &BenchmarkOptions,
    seed: u64,
) -> Result<CpModel> {
    if let Some(grid) = &opts.tuning {
        let mut grid = grid.clone();
        grid.ranks = vec![spec.rank];
        grid.init.strategy = opts.init;
        grid.max_iterations = opts.max_iterations;
        if method == Method::NoFusion {
            grid.fusion_fractions = vec![1.0];
        }
        return Ok(sequential_tune(data, &grid, seed)?.report.model);
    }
    let cfg = oracle_config(spec, truth, method, opts.max_iterations);
    let random = opts.init == InitStrategy::Random || !matches!(spec.dims.len(), 3 | 4);
    let starts = if random { opts.starts.max(1) } else { 1 };
    let mut best: Option<FitReport> = None;
    for start in 0..starts {
        let init_cfg = InitConfig {
            strategy: opts.init,
            sparsity: Some(cfg.sparsity.clone()),
            seed: derive_seed(seed, &[1, start as u64]),
            ..InitConfig::default()
        };
        let init = initialize(data, spec.rank, &init_cfg)?;
        let mut pilot = cfg.clone();
        pilot.seed = derive_seed(seed, &[2, start as u64]);
        if starts > 1 {
            pilot.max_iterations = opts.pilot_sweeps.clamp(1, cfg.max_iterations);
        }
        let report = fit(data, &pilot, &init)?;
        if best
            .as_ref()
            .is_none_or(|b| report.final_loss() < b.final_loss())
        {
            best = Some(report);
        }
    }
    let best = best.expect("at least one start");
    if best.converged || best.iterations >= cfg.max_iterations {
        return Ok(best.model);
    }
    let mut rest = cfg.clone();
    rest.max_iterations = cfg.max_iterations - best.iterations;
    rest.seed = derive_seed(seed, &[3]);
    Ok(fit(data, &rest, &best.model)?.model)
}

fn table_replication(spec: &SimSpec, rep: usize, opts: &BenchmarkOptions) -> Vec<MetricsRow> {
    let rep_seed = derive_seed(opts.seed, &[rep as u64]);
    let spec = spec.clone().with_seed(derive_seed(rep_seed, &[0]));
    let (data, truth) = match generate(&spec) {
        Ok(v) => v,
        Err(e) => {
            return [Method::Poster, Method::NoFusion]
                .iter()
                .map(|m| MetricsRow::failed(rep, m.name().into(), 0.0, &e))
                .collect()
        }
    };
    [Method::Poster, Method::NoFusion]
        .iter()
        .map(|&method| {
            let started = Instant::now();
            let outcome = fit_method(
                &data,
                &spec,
                &truth,
                method,
                opts,
                derive_seed(rep_seed, &[1]),
            );
            let secs = started.elapsed().as_secs_f64();
            outcome
                .and_then(|m| MetricsRow::scored(rep, method.name().into(), &m, &truth, secs))
                .unwrap_or_else(|e| MetricsRow::failed(rep, method.name().into(), secs, &e))
        })
        .collect()
}

/// Initial estimate used by the initialization-trend scenario: spectral
/// initialization with truncation switched off.
pub fn init_estimate(data: &RegressionDataset, rank: usize, seed: u64) -> Result<CpModel> {
    let cfg = InitConfig {
        seed,
        ..InitConfig::default()
    };
    initialize(data, rank, &cfg)
}

fn trend_replication(
    spec: &SimSpec,
    sizes: &[usize],
    rep: usize,
    opts: &BenchmarkOptions,
) -> Vec<MetricsRow> {
    let rep_seed = derive_seed(opts.seed, &[rep as u64]);
    let mut full = spec.clone().with_seed(derive_seed(rep_seed, &[0]));
    full.n = sizes.iter().copied().max().unwrap_or(0);
    let generated = generate(&full);
    sizes
        .iter()
        .map(|&n| {
            let method = format!("init-n{n}");
            let started = Instant::now();
            let (data, truth) = match &generated {
                Ok(pair) => pair,
                Err(e) => return MetricsRow::failed(rep, method, 0.0, e),
            };
            let outcome = data
                .head(n)
                .and_then(|sub| init_estimate(&sub, spec.rank, derive_seed(rep_seed, &[1])));
            let secs = started.elapsed().as_secs_f64();
            outcome
                .and_then(|m| MetricsRow::scored(rep, method.clone(), &m, truth, secs))
                .unwrap_or_else(|e| MetricsRow::failed(rep, method, secs, &e))
        })
        .collect()
}

/// Runs `f(rep)` for every replication on up to `jobs` threads and returns
/// the results in replication order.
fn run_parallel<T: Send>(reps: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, T)>> = Mutex::new(Vec::with_capacity(reps));
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, reps.max(1)) {
            scope.spawn(|| loop {
                let rep = next.fetch_add(1, Ordering::SeqCst);
                if rep >= reps {
                    break;
                }
                let out = f(rep);
                results
                    .lock()
                    .expect("no panics while holding the lock")
                    .push((rep, out));
            });
        }
    });
    let mut results = results.into_inner().expect("threads joined");
    results.sort_by_key(|(rep, _)| *rep);
    results.into_iter().map(|(_, t)| t).collect()
}

#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub scenario: BenchmarkScenario,
    pub reps: usize,
    pub rows: Vec<MetricsRow>,
}

pub fn run_benchmark(
    scenario: &BenchmarkScenario,
    opts: &BenchmarkOptions,
) -> Result<BenchmarkResult> {
    if opts.reps == 0 {
        return Err(Error::InvalidParameter("reps must be at least 1".into()));
    }
    let rows: Vec<MetricsRow> = match &scenario.kind {
        ScenarioKind::Table(spec) => run_parallel(opts.reps, opts.jobs, |rep| {
            table_replication(spec, rep, opts)
        }),
        ScenarioKind::InitTrend { spec, sample_sizes } => {
            run_parallel(opts.reps, opts.jobs, |rep| {
                trend_replication(spec, sample_sizes, rep, opts)
            })
        }
    }
    .into_iter()
    .flatten()
    .collect();
    Ok(BenchmarkResult {
        scenario: scenario.clone(),
        reps: opts.reps,
        rows,
    })
}

/// Sample mean and standard error `sd / sqrt(k)`; the error is `None` for
/// fewer than two values.
pub fn mean_se(values: &[f64]) -> (f64, Option<f64>) {
    let k = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    (mean, Some(var.sqrt() / k.sqrt()))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let h = v.len() / 2;
    if v.len() % 2 == 1 {
        v[h]
    } else {
        0.5 * (v[h - 1] + v[h])
    }
}

fn num(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::String("NA".into()), Value::Number)
}

/// Summary document: per method the number of successful replications and
/// the mean and standard error of every metric (`"NA"` when undefined).
pub fn summary_json(result: &BenchmarkResult) -> Value {
    let mut methods: Vec<String> = Vec::new();
    for r in &result.rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let failures: Vec<Value> = result
        .rows
        .iter()
        .filter_map(|r| {
            r.error
                .as_ref()
                .map(|e| json!({"replication": r.replication, "method": r.method, "error": e}))
        })
        .collect();
    let per_method: Vec<Value> = methods
        .iter()
        .map(|m| {
            let ok: Vec<&MetricsRow> = result.rows.iter().filter(|r| &r.method == m && r.error.is_none()).collect();
            let stat = |get: fn(&MetricsRow) -> f64| {
                let vals: Vec<f64> = ok.iter().map(|r| get(r)).filter(|v| !v.is_nan()).collect();
                let (mean, se) = mean_se(&vals);
                json!({"mean": num(mean), "se": se.map_or(Value::String("NA".into()), num), "median": num(median(&vals))})
            };
            json!({
                "method": m,
                "replications": ok.len(),
                "coef_err_abs": stat(|r| r.coef_err_abs),
                "coef_err_rel": stat(|r| r.coef_err_rel),
                "comp_err": stat(|r| r.comp_err),
                "tpr": stat(|r| r.tpr),
                "fpr": stat(|r| r.fpr),
                "seconds": stat(|r| r.seconds),
            })
        })
        .collect();
    json!({
        "scenario": result.scenario.id,
        "reps": result.reps,
        "complete": failures.is_empty(),
        "failures": failures,
        "methods": per_method,
    })
}
