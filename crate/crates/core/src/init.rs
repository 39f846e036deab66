//! Starting values for the alternating solver: seeded random unit factors,
//! and spectral initialization for third-order responses.
//!
//! The spectral procedure estimates the mode-3 and mode-1 factor subspaces
//! from the diagonal-deleted Gram matrices of the inverse-probability
//! weighted average response, then recovers factor triplets from leading
//! singular pairs of random projections onto those subspaces.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{normalize, truncate};
use crate::error::{Error, Result};
use crate::model::{dot, CpModel, RegressionDataset};
use crate::rng::{derive_seed, standard_normal_vec};
use crate::solver::{fit, solve_covariate_system, SolverConfig, SolverWorkspace};
use crate::tensor::{outer_product, DenseTensor, ObservationMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    #[default]
    Spectral,
    Random,
}

impl std::str::FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral" => Ok(Self::Spectral),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidParameter(format!(
                "unknown init strategy {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    #[serde(default)]
    pub strategy: InitStrategy,
    /// Number of random projections per subspace.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// Candidates whose factors overlap a selected triplet by more than
    /// `tolerance` in every mode are discarded.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Sparsity level per response mode; `None` means no truncation.
    #[serde(default)]
    pub sparsity: Option<Vec<usize>>,
    #[serde(default = "default_refinement_sweeps")]
    pub refinement_sweeps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_restarts() -> usize {
    30
}
fn default_tolerance() -> f64 {
    0.8
}
fn default_refinement_sweeps() -> usize {
    1
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            strategy: InitStrategy::Spectral,
            restarts: default_restarts(),
            tolerance: default_tolerance(),
            sparsity: None,
            refinement_sweeps: default_refinement_sweeps(),
            seed: 0,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::InvalidParameter(
                "restarts must be at least 1".into(),
            ));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "tolerance {} outside (0, 1)",
                self.tolerance
            )));
        }
        Ok(())
    }

    fn sparsity_for(&self, dims: &[usize]) -> Result<Vec<usize>> {
        match &self.sparsity {
            None => Ok(dims.to_vec()),
            Some(s)
                if s.len() == dims.len() && s.iter().zip(dims).all(|(&t, &d)| t >= 1 && t <= d) =>
            {
                Ok(s.clone())
            }
            Some(s) => Err(Error::InvalidParameter(format!(
                "initial sparsity {s:?} incompatible with dims {dims:?}"
            ))),
        }
    }
}

pub fn random_unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        if let Ok(v) = normalize(&standard_normal_vec(rng, d)) {
            return v;
        }
    }
}

/// Unit weights and independent standard-normal directions for every factor.
pub fn random_init(response_dims: &[usize], q: usize, rank: usize, seed: u64) -> Result<CpModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = (0..rank)
        .map(|_| {
            response_dims
                .iter()
                .chain(std::iter::once(&q))
                .map(|&d| random_unit_vector(&mut rng, d))
                .collect()
        })
        .collect();
    CpModel::new(response_dims.to_vec(), q, vec![1.0; rank], factors)
}

/// Fraction of observed response entries across the dataset.
pub fn estimate_observation_probability(data: &RegressionDataset) -> Result<f64> {
    let observed = data.total_observed();
    if observed == 0 {
        return Err(Error::EmptyInput("no observed response entries"));
    }
    Ok(observed as f64 / (data.n() * data.response_len()) as f64)
}

/// Leading subspaces of the mode-3 and mode-1 unfoldings of the scaled
/// average response.
#[derive(Debug, Clone)]
pub struct SubspacePair {
    /// `d3 x r`, orthonormal columns.
    pub u1: DMatrix<f64>,
    /// `d1 x r`, orthonormal columns.
    pub u2: DMatrix<f64>,
    /// `n^{-1} sum_i P_{Omega_i}(Y_i)`.
    pub averaged: DenseTensor,
    pub p_hat: f64,
}

impl SubspacePair {
    /// `p_hat^{-1} * averaged`.
    pub fn scaled_average(&self) -> DenseTensor {
        let mut t = self.averaged.clone();
        t.scale(1.0 / self.p_hat);
        t
    }
}

fn require_third_order(data: &RegressionDataset) -> Result<()> {
    if data.response_dims().len() != 3 {
        return Err(Error::InvalidParameter(format!(
            "spectral initialization needs third-order responses, got dims {:?}",
            data.response_dims()
        )));
    }
    Ok(())
}

pub fn averaged_response(data: &RegressionDataset) -> Result<DenseTensor> {
    let mut avg = DenseTensor::zeros(data.response_dims().to_vec())?;
    for (y, mask) in data.responses().iter().zip(data.masks()) {
        for ((a, &v), &o) in avg.data_mut().iter_mut().zip(y.data()).zip(mask.observed()) {
            if o {
                *a += v;
            }
        }
    }
    avg.scale(1.0 / data.n() as f64);
    Ok(avg)
}

/// `A A^T` with its diagonal set to zero.
pub fn offdiag_gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut b = a * a.transpose();
    b.fill_diagonal(0.0);
    b
}

/// Eigenvectors of the symmetric matrix `b` for its `r` eigenvalues of largest
/// magnitude.
fn top_eigenvectors(b: DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .abs()
            .total_cmp(&eig.eigenvalues[i].abs())
            .then(i.cmp(&j))
    });
    let cols: Vec<DVector<f64>> = order[..r]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();
    DMatrix::from_columns(&cols)
}

pub fn build_subspaces(data: &RegressionDataset, r: usize) -> Result<SubspacePair> {
    require_third_order(data)?;
    let dims = data.response_dims();
    if r == 0 || r > dims[0] || r > dims[2] {
        return Err(Error::InvalidParameter(format!(
            "rank {r} incompatible with dims {dims:?}"
        )));
    }
    let p_hat = estimate_observation_probability(data)?;
    let averaged = averaged_response(data)?;
    if averaged.data().iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateUpdate {
            component: 0,
            reason: "average observed response is identically zero".into(),
        });
    }
    let mut scaled = averaged.clone();
    scaled.scale(1.0 / p_hat);
    let u1 = top_eigenvectors(offdiag_gram(&scaled.unfold(2)?), r);
    let u2 = top_eigenvectors(offdiag_gram(&scaled.unfold(0)?), r);
    Ok(SubspacePair {
        u1,
        u2,
        averaged,
        p_hat,
    })
}

/// Leading singular triple `(u, v, sigma)` of a dense matrix, from the
/// eigendecomposition of the smaller Gram matrix.
fn leading_singular_pair(m: DMatrix<f64>) -> (Vec<f64>, Vec<f64>, f64) {
    let wide = m.ncols() > m.nrows();
    let (a, gram) = if wide {
        let t = m.transpose();
        let g = &m * &t;
        (t, g)
    } else {
        let g = m.transpose() * &m;
        (m, g)
    };
    let top = top_eigenvectors(gram, 1).column(0).into_owned();
    let image = &a * &top;
    let sigma = image.norm();
    let other: Vec<f64> = if sigma > 0.0 {
        (image / sigma).iter().copied().collect()
    } else {
        let mut e = vec![0.0; a.nrows()];
        e[0] = 1.0;
        e
    };
    let top: Vec<f64> = top.iter().copied().collect();
    if wide {
        (top, other, sigma)
    } else {
        (other, top, sigma)
    }
}

/// Singular pairs from `L` random projections of each subspace.
#[derive(Debug, Clone)]
pub struct Candidates {
    /// `(v1, v2, |lambda1|)` from contractions along mode 3: `v1` in mode 1, `v2` in mode 2.
    pub first: Vec<(Vec<f64>, Vec<f64>, f64)>,
    /// `(v3, v4, |lambda2|)` from contractions along mode 1: `v3` in mode 2, `v4` in mode 3.
    pub second: Vec<(Vec<f64>, Vec<f64>, f64)>,
}

pub fn generate_candidates(sub: &SubspacePair, restarts: usize, seed: u64) -> Result<Candidates> {
    let scaled = sub.scaled_average();
    let dims = scaled.dims().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj1 = &sub.u1 * sub.u1.transpose();
    let proj2 = &sub.u2 * sub.u2.transpose();
    let mut first = Vec::with_capacity(restarts);
    for _ in 0..restarts {
        let g = DVector::from_vec(standard_normal_vec(&mut rng, dims[2]));
        let g = &proj1 * g;
        let m = scaled.mode_vec_product(2, g.as_slice())?;
        first.push(leading_singular_pair(DMatrix::from_row_slice(
            dims[0],
            dims[1],
            m.data(),
        )));
    }
    let mut second = Vec::with_capacity(restarts);
    for _ in 0..restarts {
        let g = DVector::from_vec(standard_normal_vec(&mut rng, dims[0]));
        let g = &proj2 * g;
        // Contraction along mode 1 leaves a d2 x d3 matrix.
        let m = scaled.mode_vec_product(0, g.as_slice())?;
        second.push(leading_singular_pair(DMatrix::from_row_slice(
            dims[1],
            dims[2],
            m.data(),
        )));
    }
    Ok(Candidates { first, second })
}

fn abs_overlap(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        dot(a, b).abs()
    } else {
        0.0
    }
}

/// Assembles a mode-(1, 2, 3) triplet from the pairs `(v1, v2)` and `(v3, v4)`.
///
/// The member of `(v3, v4)` with the largest absolute overlap with either of
/// `v1, v2` becomes the mode-2 vector and the other the mode-3 vector; the
/// member of `(v1, v2)` overlapping it least becomes the mode-1 vector.
/// Overlaps are only compared between vectors of equal length, and a vector
/// is only eligible for a mode whose size matches its length.
pub fn match_triplet(
    v1: &[f64],
    v2: &[f64],
    v3: &[f64],
    v4: &[f64],
    dims: &[usize],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let pair = [v3, v4];
    let mut best: Option<(usize, f64)> = None;
    for (idx, v) in pair.iter().enumerate() {
        let other = pair[1 - idx];
        if v.len() != dims[1] || other.len() != dims[2] {
            continue;
        }
        let score = abs_overlap(v, v1).max(abs_overlap(v, v2));
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((idx, score));
        }
    }
    let l = best.map_or(0, |(idx, _)| idx);
    let mid = pair[l].to_vec();
    let last = pair[1 - l].to_vec();
    let mut firsts: Vec<&[f64]> = [v1, v2]
        .into_iter()
        .filter(|v| v.len() == dims[0])
        .collect();
    if firsts.is_empty() {
        firsts.push(v1);
    }
    let mut pick = firsts[0];
    for &v in &firsts[1..] {
        if abs_overlap(v, &mid) < abs_overlap(pick, &mid) {
            pick = v;
        }
    }
    (pick.to_vec(), mid, last)
}

/// Closed-form covariate factor and weight for a rank-one model with fixed
/// response factors, fitted to the raw observed responses. A negative weight
/// flips `factors[0]`.
fn fit_weight_and_covariate(
    data: &RegressionDataset,
    factors: &mut [Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    let refs: Vec<&[f64]> = factors.iter().map(|f| f.as_slice()).collect();
    let a = outer_product(&refs)?;
    let n = data.n();
    let mut h = vec![0.0; n];
    let mut g = vec![0.0; n];
    for (i, (y, mask)) in data.responses().iter().zip(data.masks()).enumerate() {
        for ((&yv, &av), &o) in y.data().iter().zip(a.data()).zip(mask.observed()) {
            if o {
                h[i] += yv * av;
                g[i] += av * av;
            }
        }
    }
    let v = solve_covariate_system(data.covariates(), &g, &h)?;
    let beta = normalize(v.as_slice())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, x) in data.covariates().iter().enumerate() {
        let alpha = dot(&beta, x);
        num += alpha * h[i];
        den += alpha * alpha * g[i];
    }
    if !(den > 0.0) {
        return Err(Error::DegenerateUpdate {
            component: 0,
            reason: "initial weight denominator is zero".into(),
        });
    }
    let w = num / den;
    if w == 0.0 || !w.is_finite() {
        return Err(Error::DegenerateUpdate {
            component: 0,
            reason: format!("initial weight {w}"),
        });
    }
    if w < 0.0 {
        factors[0].iter_mut().for_each(|v| *v = -*v);
    }
    Ok((w.abs(), beta))
}

/// Spectral initialization for a rank-one model with third-order responses.
pub fn spectral_init_rank1(data: &RegressionDataset, config: &InitConfig) -> Result<CpModel> {
    config.validate()?;
    require_third_order(data)?;
    let dims = data.response_dims().to_vec();
    let sparsity = config.sparsity_for(&dims)?;
    let sub = build_subspaces(data, 1)?;
    let cands = generate_candidates(&sub, config.restarts, derive_seed(config.seed, &[1]))?;
    let strongest = |set: &[(Vec<f64>, Vec<f64>, f64)]| {
        let mut best = 0;
        for (l, c) in set.iter().enumerate() {
            if c.2 > set[best].2 {
                best = l;
            }
        }
        best
    };
    let (v1, v2, _) = &cands.first[strongest(&cands.first)];
    let (v3, v4, _) = &cands.second[strongest(&cands.second)];
    let (t1, t2, t3) = match_triplet(v1, v2, v3, v4, &dims);
    let mut factors = Vec::with_capacity(4);
    for (j, v) in [t1, t2, t3].into_iter().enumerate() {
        factors.push(normalize(&truncate(&v, sparsity[j])?)?);
    }
    let (w, beta) = fit_weight_and_covariate(data, &mut factors)?;
    factors.push(beta);
    CpModel::new(dims, data.q(), vec![w], vec![factors])
}

/// Candidate triplet with its selection score.
fn candidate_triplets(
    sub: &SubspacePair,
    cands: &Candidates,
    dims: &[usize],
) -> Result<Vec<([Vec<f64>; 3], f64)>> {
    let scaled = sub.scaled_average();
    cands
        .second
        .iter()
        .map(|(v3, v4, _)| {
            let (v1, v2) = partner(&cands.first, v3, v4);
            let (a, b, c) = match_triplet(v1, v2, v3, v4, dims);
            let score = scaled.multilinear_combination(&[&a, &b, &c])?.abs();
            Ok(([a, b, c], score))
        })
        .collect()
}

/// The first-stage pair sharing the most aligned equal-length vector with
/// `(v3, v4)`; ties go to the lowest index.
fn partner<'a>(
    first: &'a [(Vec<f64>, Vec<f64>, f64)],
    v3: &[f64],
    v4: &[f64],
) -> (&'a [f64], &'a [f64]) {
    let agreement = |v1: &[f64], v2: &[f64]| {
        [v3, v4]
            .iter()
            .flat_map(|a| [v1, v2].map(|b| abs_overlap(a, b)))
            .fold(0.0, f64::max)
    };
    let mut best = 0;
    for (l, (v1, v2, _)) in first.iter().enumerate() {
        if agreement(v1, v2) > agreement(&first[best].0, &first[best].1) {
            best = l;
        }
    }
    (&first[best].0, &first[best].1)
}

/// Greedy selection of `r` well-separated triplets by score.
pub fn select_triplets(
    mut pool: Vec<([Vec<f64>; 3], f64)>,
    r: usize,
    tolerance: f64,
) -> Result<Vec<[Vec<f64>; 3]>> {
    let mut picked = Vec::with_capacity(r);
    while picked.len() < r {
        if pool.is_empty() {
            return Err(Error::InsufficientCandidates {
                found: picked.len(),
                needed: r,
            });
        }
        let mut best = 0;
        for (l, c) in pool.iter().enumerate() {
            if c.1 > pool[best].1 {
                best = l;
            }
        }
        let chosen = pool[best].0.clone();
        pool.retain(|(t, _)| {
            let overlap = (0..3)
                .map(|j| abs_overlap(&chosen[j], &t[j]))
                .fold(f64::INFINITY, f64::min);
            overlap <= tolerance
        });
        picked.push(chosen);
    }
    Ok(picked)
}

/// Spectral initialization for rank `r >= 2`, followed by refinement sweeps
/// of the solver with truncation only.
pub fn spectral_init_rankr(
    data: &RegressionDataset,
    r: usize,
    config: &InitConfig,
) -> Result<CpModel> {
    config.validate()?;
    require_third_order(data)?;
    if r < 2 {
        return Err(Error::InvalidParameter(
            "rank-r spectral initialization needs r >= 2".into(),
        ));
    }
    let dims = data.response_dims().to_vec();
    let sparsity = config.sparsity_for(&dims)?;
    let sub = build_subspaces(data, r)?;
    let cands = generate_candidates(&sub, config.restarts, derive_seed(config.seed, &[1]))?;
    let triplets = select_triplets(
        candidate_triplets(&sub, &cands, &dims)?,
        r,
        config.tolerance,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[2]));
    let factors: Vec<Vec<Vec<f64>>> = triplets
        .into_iter()
        .map(|[a, b, c]| vec![a, b, c, random_unit_vector(&mut rng, data.q())])
        .collect();
    let start = CpModel::new(dims.clone(), data.q(), vec![1.0; r], factors)?;
    if config.refinement_sweeps == 0 {
        return Ok(start);
    }
    let mut solver = SolverConfig::new(r, sparsity, dims);
    let start = {
        let mut ws = SolverWorkspace::new(data, &start, solver.alpha_floor)?;
        for k in 0..r {
            ws.update_covariate_factor(k)?;
        }
        ws.close();
        ws.model()?
    };
    solver.max_iterations = config.refinement_sweeps;
    solver.seed = derive_seed(config.seed, &[3]);
    Ok(fit(data, &solver, &start)?.model)
}

/// The same samples with the last two response modes merged into one. In
/// row-major layout this is a pure reshape.
pub fn merge_last_modes(data: &RegressionDataset) -> Result<RegressionDataset> {
    let dims = data.response_dims();
    if dims.len() < 2 {
        return Err(Error::InvalidParameter(
            "need at least two response modes to merge".into(),
        ));
    }
    let mut merged = dims[..dims.len() - 2].to_vec();
    merged.push(dims[dims.len() - 2] * dims[dims.len() - 1]);
    let responses = data
        .responses()
        .iter()
        .map(|y| DenseTensor::new(merged.clone(), y.data().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let masks = data
        .masks()
        .iter()
        .map(|m| ObservationMask::new(merged.clone(), m.observed().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    RegressionDataset::new(data.covariates().to_vec(), responses, masks)
}

/// Spectral initialization for fourth-order responses: run the third-order
/// procedure on the data with modes 3 and 4 merged, then split every merged
/// factor by its best rank-one approximation.
pub fn spectral_init_merged(
    data: &RegressionDataset,
    rank: usize,
    config: &InitConfig,
) -> Result<CpModel> {
    let dims = data.response_dims().to_vec();
    if dims.len() != 4 {
        return Err(Error::InvalidParameter(format!(
            "merged spectral initialization needs 4 response modes, got {}",
            dims.len()
        )));
    }
    let sparsity = config.sparsity_for(&dims)?;
    let merged = merge_last_modes(data)?;
    let inner = InitConfig {
        sparsity: Some(vec![sparsity[0], sparsity[1], dims[2] * dims[3]]),
        ..config.clone()
    };
    let start = if rank == 1 {
        spectral_init_rank1(&merged, &inner)?
    } else {
        spectral_init_rankr(&merged, rank, &inner)?
    };
    let mut weights = Vec::with_capacity(rank);
    let mut factors = Vec::with_capacity(rank);
    for k in 0..rank {
        let block = DMatrix::from_row_slice(dims[2], dims[3], start.factor(k, 2));
        let (u, v, sigma) = leading_singular_pair(block);
        let u = normalize(&truncate(&u, sparsity[2])?)?;
        let v = normalize(&truncate(&v, sparsity[3])?)?;
        weights.push(start.weights()[k] * sigma);
        factors.push(vec![
            start.factor(k, 0).to_vec(),
            start.factor(k, 1).to_vec(),
            u,
            v,
            start.covariate_factor(k).to_vec(),
        ]);
    }
    CpModel::new(dims, data.q(), weights, factors)
}

/// Chooses the initializer: spectral for third- and fourth-order responses,
/// otherwise (or when requested) seeded random unit factors.
pub fn initialize(data: &RegressionDataset, rank: usize, config: &InitConfig) -> Result<CpModel> {
    let order = data.response_dims().len();
    match config.strategy {
        InitStrategy::Spectral if order == 3 && rank == 1 => spectral_init_rank1(data, config),
        InitStrategy::Spectral if order == 3 => spectral_init_rankr(data, rank, config),
        InitStrategy::Spectral if order == 4 => spectral_init_merged(data, rank, config),
        _ => random_init(data.response_dims(), data.q(), rank, config.seed),
    }
}
