//! Independent reference implementations shared by the integration tests.
//!
//! Everything here works on raw factor vectors and explicit design matrices
//! so that it shares no arithmetic with the library's closed-form updates.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ptreg::tensor::ObservationMask;
use ptreg::{CpModel, DenseTensor, RegressionDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Weights and factors of a CP iterate without the unit-norm requirement.
#[derive(Debug, Clone)]
pub struct RawModel {
    pub weights: Vec<f64>,
    /// `factors[k][j]`, response modes then the covariate factor.
    pub factors: Vec<Vec<Vec<f64>>>,
}

impl RawModel {
    pub fn from_model(m: &CpModel) -> Self {
        Self {
            weights: m.weights().to_vec(),
            factors: m.factors().to_vec(),
        }
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn order(&self) -> usize {
        self.factors[0].len() - 1
    }
}

pub fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    unit(&gaussian(rng, d))
}

/// Row-major linear index of `idx` in a tensor of shape `dims`.
fn linear(dims: &[usize], idx: &[usize]) -> usize {
    idx.iter().zip(dims).fold(0, |acc, (&i, &d)| acc * d + i)
}

/// Every multi-index of `dims` in row-major order.
pub fn indices(dims: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &d in dims {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..d).map(move |i| {
                    let mut q = p.clone();
                    q.push(i);
                    q
                })
            })
            .collect();
    }
    out
}

/// Contribution of component `k` to sample `x` at response index `idx`.
pub fn component_entry(m: &RawModel, k: usize, x: &[f64], idx: &[usize]) -> f64 {
    let order = m.order();
    let alpha: f64 = m.factors[k][order].iter().zip(x).map(|(a, b)| a * b).sum();
    let prod: f64 = idx
        .iter()
        .enumerate()
        .map(|(j, &i)| m.factors[k][j][i])
        .product();
    m.weights[k] * alpha * prod
}

pub fn prediction_entry(m: &RawModel, x: &[f64], idx: &[usize]) -> f64 {
    (0..m.rank()).map(|k| component_entry(m, k, x, idx)).sum()
}

/// `(1/n) sum_i sum_{observed} (y - prediction)^2` by direct enumeration.
pub fn loss(data: &RegressionDataset, m: &RawModel) -> f64 {
    let dims = data.response_dims().to_vec();
    let mut total = 0.0;
    for i in 0..data.n() {
        let (x, y, mask) = (
            &data.covariates()[i],
            &data.responses()[i],
            &data.masks()[i],
        );
        for idx in indices(&dims) {
            if mask.is_observed(&idx) {
                let r = y.data()[linear(&dims, &idx)] - prediction_entry(m, x, &idx);
                total += r * r;
            }
        }
    }
    total / data.n() as f64
}

/// Rows of an explicit least-squares problem: one per observed entry of
/// every sample.
struct Design {
    rows: Vec<Vec<f64>>,
    target: Vec<f64>,
}

impl Design {
    /// Builds the problem for a block the prediction is linear in: `column`
    /// returns that block's design entries for one observed cell, `offset`
    /// the part of the prediction that does not involve the block.
    fn build(
        data: &RegressionDataset,
        column: impl Fn(usize, &[usize]) -> Vec<f64>,
        offset: impl Fn(usize, &[usize]) -> f64,
    ) -> Self {
        let dims = data.response_dims().to_vec();
        let mut rows = Vec::new();
        let mut target = Vec::new();
        for i in 0..data.n() {
            for idx in indices(&dims) {
                if data.masks()[i].is_observed(&idx) {
                    rows.push(column(i, &idx));
                    target.push(data.responses()[i].data()[linear(&dims, &idx)] - offset(i, &idx));
                }
            }
        }
        Self { rows, target }
    }

    /// Minimum-norm-on-unidentified-coordinates least squares: columns that
    /// are identically zero are fixed at zero, the rest solved through the
    /// normal equations with a general LU factorization.
    fn solve(&self, p: usize) -> Vec<f64> {
        let active: Vec<usize> = (0..p)
            .filter(|&c| self.rows.iter().any(|r| r[c] != 0.0))
            .collect();
        let mut out = vec![0.0; p];
        if active.is_empty() {
            return out;
        }
        let x = DMatrix::from_fn(self.rows.len(), active.len(), |r, c| {
            self.rows[r][active[c]]
        });
        let y = DVector::from_vec(self.target.clone());
        let sol = (x.transpose() * &x)
            .lu()
            .solve(&(x.transpose() * y))
            .expect("identified problem");
        for (c, &a) in active.iter().enumerate() {
            out[a] = sol[c];
        }
        out
    }
}

/// Unnormalized minimizer over `factors[k][j]` (a response mode) with all
/// else fixed.
pub fn oracle_factor(data: &RegressionDataset, m: &RawModel, k: usize, j: usize) -> Vec<f64> {
    let d = m.factors[k][j].len();
    let design = Design::build(
        data,
        |i, idx| {
            let mut col = vec![0.0; d];
            let mut basis = m.clone();
            basis.factors[k][j] = vec![0.0; d];
            basis.factors[k][j][idx[j]] = 1.0;
            col[idx[j]] = component_entry(&basis, k, &data.covariates()[i], idx);
            col
        },
        |i, idx| {
            (0..m.rank())
                .filter(|&kk| kk != k)
                .map(|kk| component_entry(m, kk, &data.covariates()[i], idx))
                .sum()
        },
    );
    design.solve(d)
}

/// Minimizer over the scalar weight of component `k`.
pub fn oracle_weight(data: &RegressionDataset, m: &RawModel, k: usize) -> f64 {
    let mut unit_w = m.clone();
    unit_w.weights[k] = 1.0;
    let design = Design::build(
        data,
        |i, idx| vec![component_entry(&unit_w, k, &data.covariates()[i], idx)],
        |i, idx| {
            (0..m.rank())
                .filter(|&kk| kk != k)
                .map(|kk| component_entry(m, kk, &data.covariates()[i], idx))
                .sum()
        },
    );
    design.solve(1)[0]
}

/// Minimizer over `v = w_k * b_{k,covariate}` (unconstrained in R^q).
pub fn oracle_covariate(data: &RegressionDataset, m: &RawModel, k: usize) -> Vec<f64> {
    let q = data.q();
    let design = Design::build(
        data,
        |i, idx| {
            let prod: f64 = idx
                .iter()
                .enumerate()
                .map(|(j, &t)| m.factors[k][j][t])
                .product();
            data.covariates()[i].iter().map(|x| x * prod).collect()
        },
        |i, idx| {
            (0..m.rank())
                .filter(|&kk| kk != k)
                .map(|kk| component_entry(m, kk, &data.covariates()[i], idx))
                .sum()
        },
    );
    design.solve(q)
}

/// One sweep of the unconstrained alternating scheme built from the oracles.
pub fn oracle_sweep(data: &RegressionDataset, start: &RawModel) -> RawModel {
    let mut m = start.clone();
    let order = m.order();
    for k in 0..m.rank() {
        for j in 0..order {
            m.factors[k][j] = unit(&oracle_factor(data, &m, k, j));
        }
        let w = oracle_weight(data, &m, k);
        if w < 0.0 {
            m.factors[k][0].iter_mut().for_each(|v| *v = -*v);
        }
        m.weights[k] = w.abs();
        let v = oracle_covariate(data, &m, k);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        m.factors[k][order] = unit(&v);
        m.weights[k] = norm;
    }
    m
}

pub struct Instance {
    pub data: RegressionDataset,
    pub model: CpModel,
}

/// Random small problem: the responses are the model's prediction plus
/// noise, masks are Bernoulli(`p`). Every sample keeps at least one observed
/// entry.
pub fn random_instance(
    seed: u64,
    dims: &[usize],
    q: usize,
    n: usize,
    rank: usize,
    p: f64,
    sigma: f64,
) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors: Vec<Vec<Vec<f64>>> = (0..rank)
        .map(|_| {
            dims.iter()
                .chain([&q])
                .map(|&d| unit_gaussian(&mut rng, d))
                .collect()
        })
        .collect();
    let weights: Vec<f64> = (0..rank).map(|_| rng.random_range(0.5..3.0)).collect();
    let model = CpModel::new(dims.to_vec(), q, weights, factors).unwrap();
    let raw = RawModel::from_model(&model);
    let len: usize = dims.iter().product();
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut ms = Vec::with_capacity(n);
    for _ in 0..n {
        let x = gaussian(&mut rng, q);
        let mut observed: Vec<bool> = (0..len).map(|_| rng.random_bool(p)).collect();
        if !observed.iter().any(|&o| o) {
            observed[rng.random_range(0..len)] = true;
        }
        let data: Vec<f64> = indices(dims)
            .iter()
            .map(|idx| {
                prediction_entry(&raw, &x, idx) + sigma * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        ys.push(DenseTensor::new(dims.to_vec(), data).unwrap());
        ms.push(ObservationMask::new(dims.to_vec(), observed).unwrap());
        xs.push(x);
    }
    Instance {
        data: RegressionDataset::new(xs, ys, ms).unwrap(),
        model,
    }
}

/// Random unit-norm starting point unrelated to the data.
pub fn random_start(seed: u64, dims: &[usize], q: usize, rank: usize) -> CpModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = (0..rank)
        .map(|_| {
            dims.iter()
                .chain([&q])
                .map(|&d| unit_gaussian(&mut rng, d))
                .collect()
        })
        .collect();
    let weights = (0..rank).map(|_| rng.random_range(0.5..2.0)).collect();
    CpModel::new(dims.to_vec(), q, weights, factors).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest entrywise difference between the coefficient tensors of two
/// models, relative to the larger tensor's largest entry.
pub fn coefficient_gap(a: &CpModel, b: &CpModel) -> f64 {
    let (ta, tb) = (a.coefficient_tensor(), b.coefficient_tensor());
    let scale = ta
        .data()
        .iter()
        .chain(tb.data())
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    max_abs_diff(ta.data(), tb.data()) / scale
}
