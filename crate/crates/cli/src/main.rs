use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use ptreg::benchmark::{
    metrics_csv, parse_scenario, run_benchmark, summary_json, BenchmarkOptions,
};
use ptreg::init::{initialize, InitConfig, InitStrategy};
use ptreg::io::{atomic_write, load_dataset, model_to_cpm, save_dataset};
use ptreg::metrics::{estimation_errors, tpr_fpr};
use ptreg::sim::generate;
use ptreg::solver::{fit, FitReport, SolverConfig};
use ptreg::tuning::{bic_table_csv, sequential_tune, TuningGrid};
use ptreg::{Error, SimSpec};

const SIMULATE_SCHEMA: &str = "ptreg-simulate/1";
const FIT_SCHEMA: &str = "ptreg-fit/1";
const TUNE_SCHEMA: &str = "ptreg-tune/1";
const BENCHMARK_SCHEMA: &str = "ptreg-benchmark/1";

#[derive(Parser)]
#[command(
    name = "ptreg",
    version,
    about = "Sparse fused CP regression for partially observed tensor responses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Initialize and fit a model with fixed levels.
    Fit {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long, value_parser = parse_init)]
        init: Option<InitStrategy>,
    },
    /// Choose rank, sparsity and fusion levels by BIC, then fit.
    Tune {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long)]
        no_timing: bool,
    },
    /// Replicated simulation study for one scenario.
    Benchmark {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, value_parser = parse_init, default_value = "spectral")]
        init: InitStrategy,
        /// Optional JSON with solver and tuning options.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        no_timing: bool,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset manifest written by `simulate` (or by hand).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_init(s: &str) -> Result<InitStrategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    schema: String,
    spec: SimSpec,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    schema: String,
    solver: SolverConfig,
    #[serde(default)]
    init: InitConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TuneConfig {
    schema: String,
    grid: TuningGrid,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchmarkConfig {
    schema: String,
    #[serde(default)]
    tuning: Option<TuningGrid>,
    #[serde(default)]
    max_iterations: Option<usize>,
    #[serde(default)]
    starts: Option<usize>,
    #[serde(default)]
    pilot_sweeps: Option<usize>,
}

trait Schema {
    fn schema(&self) -> &str;
}

macro_rules! schema {
    ($($t:ty),*) => {$(impl Schema for $t { fn schema(&self) -> &str { &self.schema } })*};
}
schema!(SimulateConfig, FitConfig, TuneConfig, BenchmarkConfig);

fn read_config<T: DeserializeOwned + Schema>(path: &Path, expected: &str) -> Result<T, Error> {
    let text = fs::read_to_string(path)?;
    let cfg: T = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if cfg.schema() != expected {
        return Err(Error::Format(format!(
            "{}: schema {:?}, expected {expected:?}",
            path.display(),
            cfg.schema()
        )));
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &Value) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("sweep,loss\n");
    for (i, v) in trace.iter().enumerate() {
        writeln!(out, "{i},{v:.16e}").expect("writing to a String");
    }
    out
}

fn fit_report_json(report: &FitReport, truth: Option<&ptreg::GroundTruth>) -> Result<Value, Error> {
    let mut doc = json!({
        "iterations": report.iterations,
        "converged": report.converged,
        "final_loss": report.final_loss(),
        "reinitializations": report.reinitializations,
        "config": report.config,
    });
    if let Some(t) = truth {
        let e = estimation_errors(&report.model, t)?;
        doc["coef_err_abs"] = json!(e.coef_abs);
        doc["coef_err_rel"] = json!(e.coef_rel);
        doc["comp_err"] = json!(e.component);
        if t.model.is_some() {
            let s = tpr_fpr(&report.model, t)?;
            doc["tpr"] = json!(s.tpr);
            doc["fpr"] = json!(s.fpr);
        }
    }
    Ok(doc)
}

fn write_fit_outputs(
    out: &Path,
    report: &FitReport,
    doc: &Value,
    trace: bool,
) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    atomic_write(
        &out.join("model.json"),
        model_to_cpm(&report.model).as_bytes(),
    )?;
    if trace {
        atomic_write(&out.join("trace.csv"), trace_csv(&report.trace).as_bytes())?;
    }
    write_json(&out.join("report.json"), doc)
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), Error> {
    let cfg: SimulateConfig = read_config(config, SIMULATE_SCHEMA)?;
    let spec = match seed {
        Some(s) => cfg.spec.with_seed(s),
        None => cfg.spec,
    };
    let (data, truth) = generate(&spec)?;
    save_dataset(out, &data, Some(&spec), Some(&truth))?;
    Ok(())
}

fn fit_cmd(io: &DataArgs, init: Option<InitStrategy>) -> Result<(), Error> {
    let mut cfg: FitConfig = read_config(&io.config, FIT_SCHEMA)?;
    let loaded = load_dataset(&io.data)?;
    if let Some(s) = init {
        cfg.init.strategy = s;
    }
    if let Some(seed) = io.seed {
        cfg.init.seed = seed;
        cfg.solver.seed = seed;
    }
    cfg.solver.validate(loaded.data.response_dims())?;
    let start = initialize(&loaded.data, cfg.solver.rank, &cfg.init)?;
    let report = fit(&loaded.data, &cfg.solver, &start)?;
    let mut doc = fit_report_json(&report, loaded.truth.as_ref())?;
    doc["init"] = json!(cfg.init);
    write_fit_outputs(&io.out, &report, &doc, true)
}

fn tune_cmd(io: &DataArgs, no_timing: bool) -> Result<(), Error> {
    let cfg: TuneConfig = read_config(&io.config, TUNE_SCHEMA)?;
    cfg.grid.validate()?;
    let loaded = load_dataset(&io.data)?;
    let outcome = sequential_tune(&loaded.data, &cfg.grid, io.seed.unwrap_or(0))?;
    let mut doc = fit_report_json(&outcome.report, loaded.truth.as_ref())?;
    doc["selected"] =
        json!({"rank": outcome.rank, "s_frac": outcome.s_frac, "f_frac": outcome.f_frac});
    write_fit_outputs(&io.out, &outcome.report, &doc, true)?;
    atomic_write(
        &io.out.join("bic.csv"),
        bic_table_csv(&outcome.table, !no_timing).as_bytes(),
    )
}

#[allow(clippy::too_many_arguments)]
fn benchmark_cmd(
    scenario: &str,
    reps: usize,
    out: &Path,
    seed: u64,
    jobs: usize,
    init: InitStrategy,
    config: Option<&Path>,
    no_timing: bool,
) -> Result<(), Error> {
    let scenario = parse_scenario(scenario)?;
    let mut opts = BenchmarkOptions {
        reps,
        seed,
        jobs,
        init,
        ..BenchmarkOptions::default()
    };
    if let Some(path) = config {
        let cfg: BenchmarkConfig = read_config(path, BENCHMARK_SCHEMA)?;
        if let Some(g) = &cfg.tuning {
            g.validate()?;
        }
        opts.tuning = cfg.tuning;
        opts.max_iterations = cfg.max_iterations.unwrap_or(opts.max_iterations);
        opts.starts = cfg.starts.unwrap_or(opts.starts);
        opts.pilot_sweeps = cfg.pilot_sweeps.unwrap_or(opts.pilot_sweeps);
    }
    if reps == 0 || opts.max_iterations == 0 {
        return Err(Error::InvalidParameter(
            "reps and max_iterations must be at least 1".into(),
        ));
    }
    let mut result = run_benchmark(&scenario, &opts)?;
    if no_timing {
        result.rows.iter_mut().for_each(|r| r.seconds = 0.0);
    }
    fs::create_dir_all(out)?;
    atomic_write(
        &out.join("metrics.csv"),
        metrics_csv(&result.rows, !no_timing).as_bytes(),
    )?;
    write_json(&out.join("summary.json"), &summary_json(&result))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { config, out, seed } => simulate(&config, &out, seed),
        Command::Fit { io, init } => fit_cmd(&io, init),
        Command::Tune { io, no_timing } => tune_cmd(&io, no_timing),
        Command::Benchmark {
            scenario,
            reps,
            out,
            seed,
            jobs,
            init,
            config,
            no_timing,
        } => benchmark_cmd(
            &scenario,
            reps,
            &out,
            seed,
            jobs,
            init,
            config.as_deref(),
            no_timing,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.is_input_error() { 2 } else { 3 };
            eprintln!(
                "{}",
                json!({"error": e.kind(), "message": e.to_string(), "exit_code": code})
            );
            ExitCode::from(code)
        }
    }
}
