//! Alternating block updates for the masked, constrained CP regression
//! objective.
//!
//! All updates are evaluated in a division-free form. The workspace keeps the
//! full residual `E_i = P_{Omega_i}(Y_i - sum_k w_k alpha_{i,k} b_{k,1} o ... )`
//! for every sample; while component `k` is being updated its fitted term is
//! added back so the buffer holds the deflated residual
//! `S_{i,k} = P_{Omega_i}(Y_i - sum_{k' != k} ...)`. Factor updates then use
//! numerators carrying `alpha_{i,k}` and denominators carrying `alpha_{i,k}^2`,
//! which is the weighted problem with `R_{i,k} = S_{i,k} / alpha_{i,k}`
//! multiplied through.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{normalize, truncatefuse};
use crate::error::{Error, Result};
use crate::init::random_unit_vector;
use crate::model::{dot, CpModel, RegressionDataset};
use crate::rng::derive_seed;
use crate::tensor::outer_product;

/// Maximum reinitializations of a single component before a degenerate
/// update is reported.
pub const MAX_COMPONENT_RETRIES: usize = 3;

/// Absolute change in loss between sweeps below which iteration stops.
pub const LOSS_STALL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub rank: usize,
    /// Sparsity level per response mode.
    pub sparsity: Vec<usize>,
    /// Fusion level per response mode.
    pub fusion: Vec<usize>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_convergence_tol")]
    pub convergence_tol: f64,
    #[serde(default = "default_alpha_floor")]
    pub alpha_floor: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_iterations() -> usize {
    200
}
fn default_convergence_tol() -> f64 {
    1e-4
}
fn default_alpha_floor() -> f64 {
    1e-8
}

impl SolverConfig {
    /// Constraints switched off: every sparsity and fusion level equals the
    /// mode size.
    pub fn unconstrained(rank: usize, response_dims: &[usize]) -> Self {
        Self {
            rank,
            sparsity: response_dims.to_vec(),
            fusion: response_dims.to_vec(),
            max_iterations: default_max_iterations(),
            convergence_tol: default_convergence_tol(),
            alpha_floor: default_alpha_floor(),
            seed: 0,
        }
    }

    pub fn new(rank: usize, sparsity: Vec<usize>, fusion: Vec<usize>) -> Self {
        Self {
            rank,
            sparsity,
            fusion,
            max_iterations: default_max_iterations(),
            convergence_tol: default_convergence_tol(),
            alpha_floor: default_alpha_floor(),
            seed: 0,
        }
    }

    pub fn validate(&self, response_dims: &[usize]) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidParameter("rank must be at least 1".into()));
        }
        let m = response_dims.len();
        if self.sparsity.len() != m || self.fusion.len() != m {
            return Err(Error::InvalidParameter(format!(
                "need {m} sparsity and fusion levels, got {} and {}",
                self.sparsity.len(),
                self.fusion.len()
            )));
        }
        for (j, &d) in response_dims.iter().enumerate() {
            for (name, v) in [("sparsity", self.sparsity[j]), ("fusion", self.fusion[j])] {
                if v == 0 || v > d {
                    return Err(Error::InvalidParameter(format!(
                        "{name} level {v} for mode {j} outside 1..={d}"
                    )));
                }
            }
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidParameter(
                "convergence_tol must be positive".into(),
            ));
        }
        if !(self.alpha_floor > 0.0) {
            return Err(Error::InvalidParameter(
                "alpha_floor must be positive".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    /// Final model in canonical sign/order form.
    pub model: CpModel,
    pub iterations: usize,
    pub converged: bool,
    /// Masked loss before the first sweep and after every sweep.
    pub trace: Vec<f64>,
    pub config: SolverConfig,
    /// Component reinitializations performed after degenerate updates.
    pub reinitializations: usize,
}

impl FitReport {
    pub fn final_loss(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

/// Per-sample sufficient statistics of the current rank-one term of a
/// component: `h_i = <P(S_i), b_1 o ... o b_{m+1}>` and
/// `g_i = ||P(b_1 o ... o b_{m+1})||^2`.
#[derive(Debug, Clone)]
pub struct ComponentStats {
    pub h: Vec<f64>,
    pub g: Vec<f64>,
}

/// Mutable iterate plus cached residuals for one dataset.
pub struct SolverWorkspace<'a> {
    data: &'a RegressionDataset,
    dims: Vec<usize>,
    len: usize,
    weights: Vec<f64>,
    /// `factors[k][j]`, `j = 0..=m` response modes then the covariate factor.
    factors: Vec<Vec<Vec<f64>>>,
    /// `alpha[k][i] = <b_{k,m+2}, x_i>`.
    alpha: Vec<Vec<f64>>,
    /// Row-major `n x len` residual buffer; zero at unobserved entries.
    residual: Vec<f64>,
    /// Component whose fitted term is currently added back into `residual`.
    open: Option<usize>,
    alpha_floor: f64,
}

impl<'a> SolverWorkspace<'a> {
    pub fn new(data: &'a RegressionDataset, init: &CpModel, alpha_floor: f64) -> Result<Self> {
        data.check_model(init)?;
        let (dims, _q, weights, factors) = init.clone().into_parts();
        let len = data.response_len();
        let mut residual = vec![0.0; data.n() * len];
        for (i, (y, mask)) in data.responses().iter().zip(data.masks()).enumerate() {
            let row = &mut residual[i * len..(i + 1) * len];
            for ((r, &v), &o) in row.iter_mut().zip(y.data()).zip(mask.observed()) {
                if o {
                    *r = v;
                }
            }
        }
        let mut ws = Self {
            data,
            dims,
            len,
            weights,
            alpha: vec![Vec::new(); factors.len()],
            factors,
            residual,
            open: None,
            alpha_floor,
        };
        for k in 0..ws.rank() {
            ws.refresh_alpha(k);
            ws.apply_component(k, -1.0);
        }
        Ok(ws)
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    fn m1(&self) -> usize {
        self.dims.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn factor(&self, k: usize, j: usize) -> &[f64] {
        &self.factors[k][j]
    }

    pub fn alpha(&self, k: usize) -> &[f64] {
        &self.alpha[k]
    }

    fn refresh_alpha(&mut self, k: usize) {
        let c = &self.factors[k][self.m1()];
        self.alpha[k] = self.data.covariates().iter().map(|x| dot(c, x)).collect();
    }

    /// `residual_i -= sign * w_k alpha_{i,k} P_{Omega_i}(b_{k,1} o ... o b_{k,m+1})`
    /// with `sign = -1` removing the term and `+1` adding it back. Returns the
    /// observed sum of squares after the change.
    fn apply_component(&mut self, k: usize, sign: f64) -> f64 {
        let refs: Vec<&[f64]> = self.factors[k][..self.m1()]
            .iter()
            .map(|f| f.as_slice())
            .collect();
        let term = outer_product(&refs).expect("valid factors").into_data();
        let len = self.len;
        let mut sse = 0.0;
        for (i, mask) in self.data.masks().iter().enumerate() {
            let c = sign * self.weights[k] * self.alpha[k][i];
            let row = &mut self.residual[i * len..(i + 1) * len];
            for ((r, &t), &o) in row.iter_mut().zip(&term).zip(mask.observed()) {
                if o {
                    *r += c * t;
                    sse += *r * *r;
                }
            }
        }
        sse
    }

    /// Makes `k` the open component, adding its fitted term back.
    fn open_component(&mut self, k: usize) {
        if self.open == Some(k) {
            return;
        }
        if let Some(prev) = self.open.take() {
            self.apply_component(prev, -1.0);
        }
        self.apply_component(k, 1.0);
        self.open = Some(k);
    }

    /// Closes the open component and returns the current masked loss.
    pub fn close(&mut self) -> f64 {
        let sse = match self.open.take() {
            Some(k) => self.apply_component(k, -1.0),
            None => self.observed_sse(),
        };
        sse / self.data.n() as f64
    }

    fn observed_sse(&self) -> f64 {
        let len = self.len;
        self.data
            .masks()
            .iter()
            .enumerate()
            .map(|(i, mask)| {
                self.residual[i * len..(i + 1) * len]
                    .iter()
                    .zip(mask.observed())
                    .filter(|(_, &o)| o)
                    .map(|(r, _)| r * r)
                    .sum::<f64>()
            })
            .sum()
    }

    /// Current masked loss of the iterate.
    pub fn loss(&mut self) -> f64 {
        if let Some(k) = self.open.take() {
            self.apply_component(k, -1.0);
        }
        self.observed_sse() / self.data.n() as f64
    }

    /// Per-sample sums over the mode-`j` fibres of component `k`:
    /// `num[i][l] = sum S_i[.., l, ..] * prod_{j' != j} b_{j'}` and
    /// `den[i][l] = sum delta_i[.., l, ..] * prod_{j' != j} b_{j'}^2`.
    fn mode_sums(&mut self, k: usize, j: usize, mut visit: impl FnMut(usize, &[f64], &[f64])) {
        self.open_component(k);
        let d = self.dims[j];
        let before: Vec<&[f64]> = self.factors[k][..j].iter().map(|f| f.as_slice()).collect();
        let after: Vec<&[f64]> = self.factors[k][j + 1..self.m1()]
            .iter()
            .map(|f| f.as_slice())
            .collect();
        let left = if before.is_empty() {
            vec![1.0]
        } else {
            outer_product(&before).unwrap().into_data()
        };
        let right = if after.is_empty() {
            vec![1.0]
        } else {
            outer_product(&after).unwrap().into_data()
        };
        let right_sq: Vec<f64> = right.iter().map(|v| v * v).collect();
        let inner = right.len();
        let len = self.len;
        let mut num = vec![0.0; d];
        let mut den = vec![0.0; d];
        for (i, mask) in self.data.masks().iter().enumerate() {
            num.iter_mut().for_each(|v| *v = 0.0);
            den.iter_mut().for_each(|v| *v = 0.0);
            let row = &self.residual[i * len..(i + 1) * len];
            let obs = mask.observed();
            for (a, &la) in left.iter().enumerate() {
                if la == 0.0 {
                    continue;
                }
                let la2 = la * la;
                for l in 0..d {
                    let base = (a * d + l) * inner;
                    let r = &row[base..base + inner];
                    let o = &obs[base..base + inner];
                    let mut s_num = 0.0;
                    let mut s_den = 0.0;
                    for b in 0..inner {
                        s_num += r[b] * right[b];
                        s_den += if o[b] { right_sq[b] } else { 0.0 };
                    }
                    num[l] += la * s_num;
                    den[l] += la2 * s_den;
                }
            }
            visit(i, &num, &den);
        }
    }

    /// Unnormalized minimizer of the masked objective over `b_{k,j}` with every
    /// other block fixed, solved entry by entry. Entries whose denominator
    /// vanishes are set to zero.
    pub fn update_factor_elementwise(&mut self, k: usize, j: usize) -> Result<Vec<f64>> {
        if j >= self.m1() {
            return Err(Error::ModeOutOfRange {
                mode: j,
                order: self.m1(),
            });
        }
        let d = self.dims[j];
        let mut num = vec![0.0; d];
        let mut den = vec![0.0; d];
        let alpha = self.alpha[k].clone();
        let floor = self.alpha_floor;
        self.mode_sums(k, j, |i, n_i, d_i| {
            let a = alpha[i];
            if a.abs() < floor {
                return;
            }
            for l in 0..d {
                num[l] += a * n_i[l];
                den[l] += a * a * d_i[l];
            }
        });
        let w = self.weights[k];
        if den.iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateUpdate {
                component: k,
                reason: format!("no observations inform mode {j}"),
            });
        }
        Ok(num
            .iter()
            .zip(&den)
            .map(|(&nu, &de)| if de > 0.0 { nu / (w * de) } else { 0.0 })
            .collect())
    }

    pub fn set_factor(&mut self, k: usize, j: usize, value: Vec<f64>) {
        assert_eq!(value.len(), self.factors[k][j].len());
        if j == self.m1() {
            self.open_component(k);
            self.factors[k][j] = value;
            self.refresh_alpha(k);
        } else {
            self.open_component(k);
            self.factors[k][j] = value;
        }
    }

    pub fn set_weight(&mut self, k: usize, w: f64) {
        self.open_component(k);
        self.weights[k] = w;
    }

    /// Per-sample `h_i` and `g_i` for component `k` at its current response
    /// factors.
    pub fn component_stats(&mut self, k: usize) -> ComponentStats {
        let j = self.m1() - 1;
        let b = self.factors[k][j].clone();
        let n = self.data.n();
        let mut h = vec![0.0; n];
        let mut g = vec![0.0; n];
        self.mode_sums(k, j, |i, n_i, d_i| {
            h[i] = dot(&b, n_i);
            g[i] = b.iter().zip(d_i).map(|(x, y)| x * x * y).sum();
        });
        ComponentStats { h, g }
    }

    /// Closed-form weight given the response factors and the current
    /// covariate factor. A negative solution flips the sign of the first
    /// response factor and returns the magnitude.
    pub fn update_weight(&mut self, k: usize) -> Result<f64> {
        let stats = self.component_stats(k);
        Ok(self.weight_from_stats(k, &stats)?.0)
    }

    /// Returns the new weight and whether `b_{k,1}` was flipped.
    fn weight_from_stats(&mut self, k: usize, stats: &ComponentStats) -> Result<(f64, bool)> {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &a) in self.alpha[k].iter().enumerate() {
            if a.abs() < self.alpha_floor {
                continue;
            }
            num += a * stats.h[i];
            den += a * a * stats.g[i];
        }
        if !(den > 0.0) {
            return Err(Error::DegenerateUpdate {
                component: k,
                reason: "weight denominator is zero".into(),
            });
        }
        let w = num / den;
        if w == 0.0 || !w.is_finite() {
            return Err(Error::DegenerateUpdate {
                component: k,
                reason: format!("weight solution {w}"),
            });
        }
        if w < 0.0 {
            self.open_component(k);
            self.factors[k][0].iter_mut().for_each(|v| *v = -*v);
        }
        self.set_weight(k, w.abs());
        Ok((w.abs(), w < 0.0))
    }

    /// Closed-form covariate factor given weight and response factors. The
    /// solution's norm is absorbed into the weight, so the returned direction
    /// has unit length and predictions equal those of the raw solution.
    pub fn update_covariate_factor(&mut self, k: usize) -> Result<Vec<f64>> {
        let stats = self.component_stats(k);
        self.covariate_from_stats(k, &stats)
    }

    fn covariate_from_stats(&mut self, k: usize, stats: &ComponentStats) -> Result<Vec<f64>> {
        let v = solve_covariate_system(self.data.covariates(), &stats.g, &stats.h)?;
        let norm = crate::constraints::norm2(v.as_slice());
        let c = normalize(v.as_slice())?;
        self.set_factor(k, self.m1(), c.clone());
        self.set_weight(k, norm);
        Ok(c)
    }

    /// Runs steps 1-4 for component `k`. Returns the largest sign-resolved
    /// change of any of its factors.
    pub fn update_component(&mut self, k: usize, config: &SolverConfig) -> Result<f64> {
        let mut change = 0.0f64;
        for j in 0..self.m1() {
            let raw = self.update_factor_elementwise(k, j)?;
            let unit = normalize(&raw)?;
            let constrained = apply_constraints(&unit, config.sparsity[j], config.fusion[j])?;
            change = change.max(sign_resolved_distance(&self.factors[k][j], &constrained));
            self.set_factor(k, j, constrained);
        }
        let mut stats = self.component_stats(k);
        let (_, flipped) = self.weight_from_stats(k, &stats)?;
        if flipped {
            // b_{k,1} flipped sign, which negates every h_i exactly.
            stats.h.iter_mut().for_each(|v| *v = -*v);
        }
        let old_c = self.factors[k][self.m1()].clone();
        let c = self.covariate_from_stats(k, &stats)?;
        change = change.max(sign_resolved_distance(&old_c, &c));
        Ok(change)
    }

    fn reinitialize_component(&mut self, k: usize, rng: &mut ChaCha8Rng) {
        self.open_component(k);
        for j in 0..self.factors[k].len() {
            let d = self.factors[k][j].len();
            self.factors[k][j] = random_unit_vector(rng, d);
        }
        self.weights[k] = 1.0;
        self.refresh_alpha(k);
    }

    /// Snapshot of the iterate as a model (not canonicalized).
    pub fn model(&self) -> Result<CpModel> {
        CpModel::new(
            self.dims.clone(),
            self.data.q(),
            self.weights.clone(),
            self.factors.clone(),
        )
    }
}

/// `normalize(truncatefuse(beta, tau_s, tau_f))`.
pub fn apply_constraints(beta: &[f64], tau_s: usize, tau_f: usize) -> Result<Vec<f64>> {
    normalize(&truncatefuse(beta, tau_s, tau_f)?)
}

/// `min(||a - b||, ||a + b||)`.
pub fn sign_resolved_distance(a: &[f64], b: &[f64]) -> f64 {
    let (mut minus, mut plus) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        minus += (x - y) * (x - y);
        plus += (x + y) * (x + y);
    }
    minus.min(plus).sqrt()
}

/// Solves `(sum_i g_i x_i x_i^T) v = sum_i h_i x_i`.
pub(crate) fn solve_covariate_system(
    xs: &[Vec<f64>],
    g: &[f64],
    h: &[f64],
) -> Result<DVector<f64>> {
    let q = xs[0].len();
    let mut gram = DMatrix::<f64>::zeros(q, q);
    let mut rhs = DVector::<f64>::zeros(q);
    for ((x, &gi), &hi) in xs.iter().zip(g).zip(h) {
        for a in 0..q {
            rhs[a] += hi * x[a];
            for b in 0..q {
                gram[(a, b)] += gi * x[a] * x[b];
            }
        }
    }
    let scale = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(scale > 0.0) {
        return Err(Error::SingularSystem { dim: q });
    }
    if let Some(chol) = gram.clone().cholesky() {
        let v = chol.solve(&rhs);
        if v.iter().all(|x| x.is_finite()) {
            return Ok(v);
        }
    }
    // Semi-definite but numerically singular systems have no unique solution.
    let lu = gram.lu();
    let min_pivot = (0..q)
        .map(|i| lu.u()[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    if min_pivot <= scale * 1e-13 {
        return Err(Error::SingularSystem { dim: q });
    }
    lu.solve(&rhs).ok_or(Error::SingularSystem { dim: q })
}

/// Alternating block updates from `init` until consecutive iterates agree to
/// `config.convergence_tol` (sign-resolved, over every factor) or the loss
/// stalls, or `config.max_iterations` sweeps have run.
pub fn fit(data: &RegressionDataset, config: &SolverConfig, init: &CpModel) -> Result<FitReport> {
    config.validate(data.response_dims())?;
    data.check_model(init)?;
    if init.rank() != config.rank {
        return Err(Error::InvalidParameter(format!(
            "initial model has rank {}, config asks for {}",
            init.rank(),
            config.rank
        )));
    }
    if data.total_observed() == 0 {
        return Err(Error::DegenerateUpdate {
            component: 0,
            reason: "dataset has no observed entries".into(),
        });
    }
    let mut ws = SolverWorkspace::new(data, init, config.alpha_floor)?;
    let mut trace = vec![ws.loss()];
    let mut retries = vec![0usize; config.rank];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        let mut change = 0.0f64;
        for k in 0..config.rank {
            loop {
                match ws.update_component(k, config) {
                    Ok(c) => {
                        change = change.max(c);
                        break;
                    }
                    Err(e @ (Error::Normalization(_) | Error::DegenerateUpdate { .. })) => {
                        if retries[k] >= MAX_COMPONENT_RETRIES {
                            return Err(e);
                        }
                        retries[k] += 1;
                        let seed = derive_seed(
                            config.seed,
                            &[0x72_6574_7279, k as u64, retries[k] as u64],
                        );
                        ws.reinitialize_component(k, &mut ChaCha8Rng::seed_from_u64(seed));
                        change = f64::INFINITY;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        let loss = ws.close();
        iterations += 1;
        let stalled = (trace.last().unwrap() - loss).abs() < LOSS_STALL_TOL;
        trace.push(loss);
        if change <= config.convergence_tol || stalled {
            converged = true;
            break;
        }
    }
    Ok(FitReport {
        model: ws.model()?.canonicalized(),
        iterations,
        converged,
        trace,
        config: config.clone(),
        reinitializations: retries.iter().sum(),
    })
}
