//! BIC-type model selection and the three-stage sequential tuning protocol
//! (rank, then a shared sparsity fraction, then a shared fusion fraction).

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::constraints::count_nonzero_runs;
use crate::error::{Error, Result};
use crate::init::{initialize, InitConfig};
use crate::model::{masked_loss, CpModel, RegressionDataset};
use crate::rng::derive_seed;
use crate::solver::{fit, FitReport, SolverConfig};

/// `ceil(frac * d)` clamped to `1..=d`, with a small guard so that fractions
/// such as `0.7 * 10` are not pushed up by representation error.
pub fn level_from_fraction(frac: f64, d: usize) -> usize {
    ((frac * d as f64 - 1e-9).ceil() as usize).clamp(1, d)
}

/// Degrees of freedom: distinct nonzero runs of every response factor, plus
/// one weight and `q` covariate loadings per component.
pub fn degrees_of_freedom(model: &CpModel) -> usize {
    let m1 = model.response_order();
    let runs: usize = model
        .factors()
        .iter()
        .flat_map(|c| c[..m1].iter())
        .map(|f| count_nonzero_runs(f))
        .sum();
    runs + model.rank() * (1 + model.q())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BicScore {
    pub loss: f64,
    pub df: usize,
    /// `-inf` for a perfect fit.
    pub bic: f64,
}

impl BicScore {
    pub fn is_perfect_fit(&self) -> bool {
        self.bic == f64::NEG_INFINITY
    }
}

/// `2 log(loss) + log(N) / N * df` with `N = n * prod(d_j)`.
pub fn bic(model: &CpModel, data: &RegressionDataset) -> Result<BicScore> {
    let loss = masked_loss(model, data)?;
    let df = degrees_of_freedom(model);
    Ok(BicScore {
        loss,
        df,
        bic: bic_value(loss, df, data.n() * data.response_len()),
    })
}

pub fn bic_value(loss: f64, df: usize, total_entries: usize) -> f64 {
    if loss == 0.0 {
        return f64::NEG_INFINITY;
    }
    let nn = total_entries as f64;
    2.0 * loss.ln() + nn.ln() / nn * df as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningGrid {
    pub ranks: Vec<usize>,
    pub sparsity_fractions: Vec<f64>,
    pub fusion_fractions: Vec<f64>,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_convergence_tol")]
    pub convergence_tol: f64,
}

fn default_max_iterations() -> usize {
    200
}
fn default_convergence_tol() -> f64 {
    1e-4
}

impl TuningGrid {
    pub fn new(
        ranks: Vec<usize>,
        sparsity_fractions: Vec<f64>,
        fusion_fractions: Vec<f64>,
    ) -> Self {
        Self {
            ranks,
            sparsity_fractions,
            fusion_fractions,
            init: InitConfig::default(),
            max_iterations: default_max_iterations(),
            convergence_tol: default_convergence_tol(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty()
            || self.sparsity_fractions.is_empty()
            || self.fusion_fractions.is_empty()
        {
            return Err(Error::InvalidParameter(
                "tuning grids must be nonempty".into(),
            ));
        }
        if self.ranks.contains(&0) {
            return Err(Error::InvalidParameter("ranks must be positive".into()));
        }
        for &f in self.sparsity_fractions.iter().chain(&self.fusion_fractions) {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "fraction {f} outside (0, 1]"
                )));
            }
        }
        self.init.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuningRow {
    pub stage: usize,
    pub rank: usize,
    pub s_frac: f64,
    pub f_frac: f64,
    pub loss: f64,
    pub df: usize,
    pub bic: f64,
    pub converged: bool,
    pub seconds: f64,
    pub error: Option<String>,
}

pub const BIC_CSV_HEADER: &str = "stage,r,s_frac,f_frac,loss,df,bic,converged,seconds";

/// BIC table as CSV. With `timings = false` the seconds column is written as
/// zero so the output depends only on the inputs.
pub fn bic_table_csv(rows: &[TuningRow], timings: bool) -> String {
    let mut out = String::from(BIC_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let secs = if timings { r.seconds } else { 0.0 };
        writeln!(
            out,
            "{},{},{},{},{:.16e},{},{:.16e},{},{:.3}",
            r.stage, r.rank, r.s_frac, r.f_frac, r.loss, r.df, r.bic, r.converged, secs
        )
        .expect("writing to a String");
    }
    out
}

#[derive(Debug, Clone)]
pub struct TuningOutcome {
    pub rank: usize,
    pub s_frac: f64,
    pub f_frac: f64,
    pub config: SolverConfig,
    pub report: FitReport,
    pub table: Vec<TuningRow>,
}

/// Fits one cell: fresh initialization and solve with a cell-specific seed.
pub fn fit_cell(
    data: &RegressionDataset,
    grid: &TuningGrid,
    rank: usize,
    s_frac: f64,
    f_frac: f64,
    seed: u64,
) -> Result<(SolverConfig, FitReport)> {
    let dims = data.response_dims();
    let sparsity: Vec<usize> = dims
        .iter()
        .map(|&d| level_from_fraction(s_frac, d))
        .collect();
    let fusion: Vec<usize> = dims
        .iter()
        .map(|&d| level_from_fraction(f_frac, d))
        .collect();
    let mut init_cfg = grid.init.clone();
    init_cfg.sparsity = Some(sparsity.clone());
    init_cfg.seed = derive_seed(seed, &[1]);
    let start = initialize(data, rank, &init_cfg)?;
    let mut cfg = SolverConfig::new(rank, sparsity, fusion);
    cfg.max_iterations = grid.max_iterations;
    cfg.convergence_tol = grid.convergence_tol;
    cfg.seed = derive_seed(seed, &[2]);
    let report = fit(data, &cfg, &start)?;
    Ok((cfg, report))
}

type Cell = (usize, f64, f64);

type CellOutcome = std::result::Result<(SolverConfig, FitReport, BicScore), String>;

/// Every cell fitted so far; a cell shared by two stages is fitted once.
type FitCache = Vec<(Cell, CellOutcome)>;

fn run_stage(
    data: &RegressionDataset,
    grid: &TuningGrid,
    stage: usize,
    cells: &[Cell],
    seed: u64,
    table: &mut Vec<TuningRow>,
    cache: &mut FitCache,
) -> Result<(Cell, SolverConfig, FitReport)> {
    let mut best: Option<(f64, Cell, SolverConfig, FitReport)> = None;
    let mut errors = Vec::new();
    for (c, &cell) in cells.iter().enumerate() {
        let (rank, s_frac, f_frac) = cell;
        if let Some((_, done)) = cache.iter().find(|(k, _)| *k == cell) {
            match done {
                Ok((cfg, rep, score)) => {
                    if best.as_ref().is_none_or(|b| score.bic < b.0) {
                        best = Some((score.bic, cell, cfg.clone(), rep.clone()));
                    }
                }
                Err(e) => errors.push(format!("stage {stage} r={rank} s={s_frac} f={f_frac}: {e}")),
            }
            continue;
        }
        let started = Instant::now();
        let cell_seed = derive_seed(seed, &[stage as u64, c as u64]);
        let outcome = fit_cell(data, grid, rank, s_frac, f_frac, cell_seed)
            .and_then(|(cfg, rep)| bic(&rep.model, data).map(|b| (cfg, rep, b)));
        let seconds = started.elapsed().as_secs_f64();
        cache.push((cell, outcome.as_ref().cloned().map_err(|e| e.to_string())));
        match outcome {
            Ok((cfg, rep, score)) => {
                table.push(TuningRow {
                    stage,
                    rank,
                    s_frac,
                    f_frac,
                    loss: score.loss,
                    df: score.df,
                    bic: score.bic,
                    converged: rep.converged,
                    seconds,
                    error: None,
                });
                if best.as_ref().is_none_or(|b| score.bic < b.0) {
                    best = Some((score.bic, (rank, s_frac, f_frac), cfg, rep));
                }
            }
            Err(e) => {
                errors.push(format!("stage {stage} r={rank} s={s_frac} f={f_frac}: {e}"));
                table.push(TuningRow {
                    stage,
                    rank,
                    s_frac,
                    f_frac,
                    loss: f64::NAN,
                    df: 0,
                    bic: f64::NAN,
                    converged: false,
                    seconds,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    best.map(|(_, cell, cfg, rep)| (cell, cfg, rep))
        .ok_or(Error::TuningFailed(errors))
}

/// Stage 1 picks the rank with both fractions at 1, stage 2 the sparsity
/// fraction at that rank, stage 3 the fusion fraction. Ties keep the earliest
/// grid entry. A cell already fitted in an earlier stage is reused, so the
/// table lists each distinct fit once.
pub fn sequential_tune(
    data: &RegressionDataset,
    grid: &TuningGrid,
    seed: u64,
) -> Result<TuningOutcome> {
    grid.validate()?;
    let mut table = Vec::new();
    let mut cache = FitCache::new();
    let stage1: Vec<Cell> = grid.ranks.iter().map(|&r| (r, 1.0, 1.0)).collect();
    let ((rank, _, _), _, _) = run_stage(data, grid, 1, &stage1, seed, &mut table, &mut cache)?;
    let stage2: Vec<Cell> = grid
        .sparsity_fractions
        .iter()
        .map(|&s| (rank, s, 1.0))
        .collect();
    let ((_, s_frac, _), _, _) = run_stage(data, grid, 2, &stage2, seed, &mut table, &mut cache)?;
    let stage3: Vec<Cell> = grid
        .fusion_fractions
        .iter()
        .map(|&f| (rank, s_frac, f))
        .collect();
    let ((_, _, f_frac), config, report) =
        run_stage(data, grid, 3, &stage3, seed, &mut table, &mut cache)?;
    Ok(TuningOutcome {
        rank,
        s_frac,
        f_frac,
        config,
        report,
        table,
    })
}
