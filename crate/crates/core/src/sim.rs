//! Seeded generators for the block-missing, random-missing and misspecified
//! simulation designs.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constraints::{
    count_nonzero, count_nonzero_runs, count_runs, fuse, normalize, truncatefuse,
};
use crate::error::{Error, Result};
use crate::model::{CpModel, RegressionDataset};
use crate::rng::{derive_seed, standard_normal_vec};
use crate::tensor::{DenseTensor, ObservationMask};
use crate::tuning::level_from_fraction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    BlockMissing,
    RandomMissing,
    Misspecified,
}

/// Parameters of one simulated dataset. `dims` lists the response modes with
/// the temporal mode last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub scenario: Scenario,
    pub dims: Vec<usize>,
    pub q: usize,
    pub n: usize,
    pub rank: usize,
    /// True weight shared by every component.
    pub weight: f64,
    /// `s_0`: nonzero fraction of each non-temporal factor.
    pub sparsity_fraction: f64,
    /// `f_0`: run fraction of every response factor.
    pub fusion_fraction: f64,
    /// `m_n`: fraction of subjects with missing time slices.
    #[serde(default)]
    pub missing_subjects: f64,
    /// `m_t`: fraction of time slices missing for an affected subject.
    #[serde(default)]
    pub missing_times: f64,
    /// `p`: per-entry observation probability.
    #[serde(default = "one")]
    pub observe_prob: f64,
    #[serde(default = "one")]
    pub sigma: f64,
    /// Covariate design of the misspecified scenario (1 or 2).
    #[serde(default = "one_u8")]
    pub covariate_setting: u8,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}
fn one_u8() -> u8 {
    1
}

fn unit_interval(name: &str, v: f64, allow_zero: bool) -> Result<()> {
    let ok = if allow_zero {
        (0.0..=1.0).contains(&v)
    } else {
        v > 0.0 && v <= 1.0
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} = {v} outside its allowed range"
        )))
    }
}

impl SimSpec {
    /// Block-missing design with the standard defaults for everything but the
    /// listed knobs.
    pub fn block_missing(
        dims: Vec<usize>,
        n: usize,
        weight: f64,
        fusion_fraction: f64,
        m_n: f64,
        m_t: f64,
    ) -> Self {
        Self {
            scenario: Scenario::BlockMissing,
            dims,
            q: 5,
            n,
            rank: 2,
            weight,
            sparsity_fraction: 0.7,
            fusion_fraction,
            missing_subjects: m_n,
            missing_times: m_t,
            observe_prob: 1.0,
            sigma: 1.0,
            covariate_setting: 1,
            seed: 0,
        }
    }

    pub fn random_missing(
        dims: Vec<usize>,
        n: usize,
        weight: f64,
        fusion_fraction: f64,
        p: f64,
    ) -> Self {
        Self {
            scenario: Scenario::RandomMissing,
            missing_subjects: 0.0,
            missing_times: 0.0,
            observe_prob: p,
            ..Self::block_missing(dims, n, weight, fusion_fraction, 0.0, 0.0)
        }
    }

    pub fn misspecified(setting: u8) -> Self {
        Self {
            scenario: Scenario::Misspecified,
            dims: vec![88, 88, 3],
            q: if setting == 1 { 9 } else { 3 },
            n: 80,
            rank: 1,
            weight: 1.0,
            sparsity_fraction: 1.0,
            fusion_fraction: 1.0,
            missing_subjects: 0.5,
            missing_times: 1.0 / 3.0,
            observe_prob: 1.0,
            sigma: 1.0,
            covariate_setting: setting,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "dims {:?} need two or more positive modes",
                self.dims
            )));
        }
        if self.n == 0 || self.q == 0 || self.rank == 0 {
            return Err(Error::InvalidParameter(
                "n, q and rank must be positive".into(),
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma = {}", self.sigma)));
        }
        match self.scenario {
            Scenario::BlockMissing | Scenario::RandomMissing => {
                if !(self.weight > 0.0 && self.weight.is_finite()) {
                    return Err(Error::InvalidParameter(format!("weight = {}", self.weight)));
                }
                unit_interval("sparsity_fraction", self.sparsity_fraction, false)?;
                unit_interval("fusion_fraction", self.fusion_fraction, false)?;
                unit_interval("missing_subjects", self.missing_subjects, true)?;
                unit_interval("missing_times", self.missing_times, true)?;
                unit_interval("observe_prob", self.observe_prob, false)?;
                if self.scenario == Scenario::BlockMissing && self.observe_prob != 1.0 {
                    return Err(Error::InvalidParameter(
                        "block_missing uses observe_prob = 1".into(),
                    ));
                }
                if self.scenario == Scenario::RandomMissing
                    && (self.missing_subjects != 0.0 || self.missing_times != 0.0)
                {
                    return Err(Error::InvalidParameter(
                        "random_missing has no block missingness".into(),
                    ));
                }
            }
            Scenario::Misspecified => {
                if self.dims.len() != 3 || self.dims[2] != 3 {
                    return Err(Error::InvalidParameter(
                        "misspecified design needs d1 x d2 x 3 responses".into(),
                    ));
                }
                let q = match self.covariate_setting {
                    1 => 9,
                    2 => 3,
                    s => {
                        return Err(Error::InvalidParameter(format!(
                            "covariate setting {s} is not 1 or 2"
                        )))
                    }
                };
                if self.q != q {
                    return Err(Error::InvalidParameter(format!(
                        "covariate setting {} needs q = {q}",
                        self.covariate_setting
                    )));
                }
            }
        }
        Ok(())
    }

    /// `(tau_s, tau_f)` of the generating model for each response mode.
    pub fn true_levels(&self) -> (Vec<usize>, Vec<usize>) {
        let last = self.dims.len() - 1;
        let s = self
            .dims
            .iter()
            .enumerate()
            .map(|(j, &d)| {
                if j == last {
                    d
                } else {
                    level_from_fraction(self.sparsity_fraction, d)
                }
            })
            .collect();
        let f = self
            .dims
            .iter()
            .map(|&d| level_from_fraction(self.fusion_fraction, d))
            .collect();
        (s, f)
    }
}

/// What generated a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// CP form of the coefficient tensor; `None` for the misspecified design.
    pub model: Option<CpModel>,
    /// Materialized coefficient tensor, shape `dims x q`.
    pub coefficient: DenseTensor,
    /// `supports[k][j][l]`: whether entry `l` of response factor `(k, j)` is nonzero.
    pub supports: Vec<Vec<Vec<bool>>>,
    /// Nonzero constant runs of each response factor.
    pub runs: Vec<Vec<usize>>,
    /// Coefficient images `(beta_2, beta_3)` of the misspecified design.
    pub images: Option<[DenseTensor; 2]>,
}

impl GroundTruth {
    pub fn from_model(model: CpModel) -> Self {
        let m1 = model.response_order();
        let supports = model
            .factors()
            .iter()
            .map(|c| {
                c[..m1]
                    .iter()
                    .map(|f| f.iter().map(|&v| v != 0.0).collect())
                    .collect()
            })
            .collect();
        let runs = model
            .factors()
            .iter()
            .map(|c| c[..m1].iter().map(|f| count_nonzero_runs(f)).collect())
            .collect();
        Self {
            coefficient: model.coefficient_tensor(),
            model: Some(model),
            supports,
            runs,
            images: None,
        }
    }

    /// Largest nonzero count over components, per response mode.
    pub fn sparsity_levels(&self) -> Option<Vec<usize>> {
        self.levels(count_nonzero)
    }

    /// Largest number of constant runs (zero runs included) over components,
    /// per response mode.
    pub fn fusion_levels(&self) -> Option<Vec<usize>> {
        self.levels(count_runs)
    }

    fn levels(&self, count: fn(&[f64]) -> usize) -> Option<Vec<usize>> {
        let m = self.model.as_ref()?;
        Some(
            (0..m.response_order())
                .map(|j| {
                    (0..m.rank())
                        .map(|k| count(m.factor(k, j)))
                        .max()
                        .unwrap_or(1)
                        .max(1)
                })
                .collect(),
        )
    }

    pub fn response_dims(&self) -> &[usize] {
        let d = self.coefficient.dims();
        &d[..d.len() - 1]
    }

    pub fn q(&self) -> usize {
        *self
            .coefficient
            .dims()
            .last()
            .expect("coefficient has at least two modes")
    }
}

/// Random CP coefficient with sparse, fused non-temporal factors, a fused
/// temporal factor and a constant covariate factor.
fn generate_coefficient(spec: &SimSpec, rng: &mut ChaCha8Rng) -> Result<CpModel> {
    let (s, f) = spec.true_levels();
    let last = spec.dims.len() - 1;
    let mut factors = Vec::with_capacity(spec.rank);
    for _ in 0..spec.rank {
        let mut comp = Vec::with_capacity(spec.dims.len() + 1);
        for (j, &d) in spec.dims.iter().enumerate() {
            let z = standard_normal_vec(rng, d);
            let shaped = if j == last {
                fuse(&z, f[j])?
            } else {
                truncatefuse(&z, s[j], f[j])?
            };
            comp.push(normalize(&shaped)?);
        }
        comp.push(normalize(&vec![1.0; spec.q])?);
        factors.push(comp);
    }
    CpModel::new(
        spec.dims.clone(),
        spec.q,
        vec![spec.weight; spec.rank],
        factors,
    )
}

fn bernoulli_half(rng: &mut ChaCha8Rng) -> f64 {
    if Bernoulli::new(0.5).expect("valid").sample(rng) {
        1.0
    } else {
        0.0
    }
}

/// Sets unobserved entries to NaN.
fn mark_missing(y: &mut DenseTensor, mask: &ObservationMask) {
    for (v, &o) in y.data_mut().iter_mut().zip(mask.observed()) {
        if !o {
            *v = f64::NAN;
        }
    }
}

/// Mask with the listed slices of the last mode unobserved.
fn slice_mask(dims: &[usize], missing: &[usize]) -> Result<ObservationMask> {
    let t = *dims.last().expect("nonempty");
    let mut mask = ObservationMask::full(dims.to_vec())?;
    for (e, o) in mask.observed_mut().iter_mut().enumerate() {
        if missing.contains(&(e % t)) {
            *o = false;
        }
    }
    Ok(mask)
}

fn cp_responses(
    spec: &SimSpec,
    model: &CpModel,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f64>>, Vec<DenseTensor>)> {
    let mut xs = Vec::with_capacity(spec.n);
    let mut ys = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let x: Vec<f64> = (0..spec.q).map(|_| bernoulli_half(rng)).collect();
        let mut y = model.predict(&x)?;
        for v in y.data_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += spec.sigma * e;
        }
        xs.push(x);
        ys.push(y);
    }
    Ok((xs, ys))
}

fn check_scenario(spec: &SimSpec, want: Scenario) -> Result<()> {
    spec.validate()?;
    if spec.scenario != want {
        return Err(Error::InvalidParameter(format!(
            "expected scenario {want:?}, got {:?}",
            spec.scenario
        )));
    }
    Ok(())
}

/// Number of items selected by a fraction, `ceil(frac * n)` with a guard
/// against representation error.
fn count_from_fraction(frac: f64, n: usize) -> usize {
    ((frac * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

pub fn gen_block_missing(spec: &SimSpec) -> Result<(RegressionDataset, GroundTruth)> {
    check_scenario(spec, Scenario::BlockMissing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0]));
    let model = generate_coefficient(spec, &mut rng)?;
    let (xs, mut ys) = cp_responses(spec, &model, &mut rng)?;
    let t = *spec.dims.last().expect("validated");
    let affected = count_from_fraction(spec.missing_subjects, spec.n);
    let slices = count_from_fraction(spec.missing_times, t);
    let mut chosen = sample(&mut rng, spec.n, affected).into_vec();
    chosen.sort_unstable();
    let mut masks = Vec::with_capacity(spec.n);
    for (i, y) in ys.iter_mut().enumerate() {
        let missing: Vec<usize> = if chosen.binary_search(&i).is_ok() {
            sample(&mut rng, t, slices).into_vec()
        } else {
            Vec::new()
        };
        let mask = slice_mask(&spec.dims, &missing)?;
        mark_missing(y, &mask);
        masks.push(mask);
    }
    Ok((
        RegressionDataset::new(xs, ys, masks)?,
        GroundTruth::from_model(model),
    ))
}

pub fn gen_random_missing(spec: &SimSpec) -> Result<(RegressionDataset, GroundTruth)> {
    check_scenario(spec, Scenario::RandomMissing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0]));
    let model = generate_coefficient(spec, &mut rng)?;
    let (xs, mut ys) = cp_responses(spec, &model, &mut rng)?;
    let mut masks = Vec::with_capacity(spec.n);
    for y in ys.iter_mut() {
        let mut mask = ObservationMask::full(spec.dims.clone())?;
        if spec.observe_prob < 1.0 {
            let coin = Bernoulli::new(spec.observe_prob).expect("validated");
            mask.observed_mut()
                .iter_mut()
                .for_each(|o| *o = coin.sample(&mut rng));
        }
        mark_missing(y, &mask);
        masks.push(mask);
    }
    Ok((
        RegressionDataset::new(xs, ys, masks)?,
        GroundTruth::from_model(model),
    ))
}

/// Region value pairs `(beta_2, beta_3)`.
pub const REGION_VALUES: [(f64, f64); 6] = [
    (0.0, 0.0),
    (0.05, 0.9),
    (0.1, 0.8),
    (0.2, 0.6),
    (0.3, 0.4),
    (0.4, 0.2),
];

/// Region index of pixel `(a, b)`: discs on the upper row of a 2 x 3 grid and
/// squares on the lower row, each of radius (half-width) 8.
pub fn region_of(a: usize, b: usize, d1: usize, d2: usize) -> Option<usize> {
    const R: f64 = 8.0;
    let rows = [d1 as f64 / 4.0, 3.0 * d1 as f64 / 4.0];
    let cols = [d2 as f64 / 6.0, d2 as f64 / 2.0, 5.0 * d2 as f64 / 6.0];
    let (x, y) = (a as f64, b as f64);
    for (c, &cy) in cols.iter().enumerate() {
        let (dx, dy) = (x - rows[0], y - cy);
        if dx * dx + dy * dy <= R * R {
            return Some(c);
        }
        if (x - rows[1]).abs() <= R && (y - cy).abs() <= R {
            return Some(3 + c);
        }
    }
    None
}

/// AR(1) draws with unit marginal variance and lag-`h` correlation `rho^h`.
pub fn ar1_noise(rng: &mut ChaCha8Rng, len: usize, rho: f64) -> Vec<f64> {
    let innov = (1.0 - rho * rho).sqrt();
    let mut out = Vec::with_capacity(len);
    let mut prev: f64 = rng.sample(StandardNormal);
    out.push(prev);
    for _ in 1..len {
        let z: f64 = rng.sample(StandardNormal);
        prev = rho * prev + innov * z;
        out.push(prev);
    }
    out
}

/// Voxelwise regression `Y_{i,a,b,l} = x_{i,l}^T beta_{a,b} + e` with
/// `x_{i,l} = (1, x_{i,l,2}, x_{i,l,3})`. Setting 1 draws `x_{i,l,2}` uniform
/// on `[l-1, l]` and stacks the three time points into `q = 9` covariates
/// (block `l` only acts on time `l`); setting 2 draws two time-invariant
/// Bernoulli covariates (`q = 3`).
pub fn gen_misspecified(spec: &SimSpec) -> Result<(RegressionDataset, GroundTruth)> {
    check_scenario(spec, Scenario::Misspecified)?;
    let (d1, d2, t) = (spec.dims[0], spec.dims[1], spec.dims[2]);
    let q = spec.q;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0]));
    let mut img2 = DenseTensor::zeros(vec![d1, d2])?;
    let mut img3 = DenseTensor::zeros(vec![d1, d2])?;
    for a in 0..d1 {
        for b in 0..d2 {
            if let Some(r) = region_of(a, b, d1, d2) {
                img2.set(&[a, b], REGION_VALUES[r].0);
                img3.set(&[a, b], REGION_VALUES[r].1);
            }
        }
    }
    let per_time = |l: usize, c: usize| if q == 9 { 3 * l + c } else { c };
    let coefficient = DenseTensor::from_fn(vec![d1, d2, t, q], |idx| {
        let (a, b, l, c) = (idx[0], idx[1], idx[2], idx[3]);
        match c.checked_sub(per_time(l, 0)) {
            Some(1) => img2.get(&[a, b]),
            Some(2) => img3.get(&[a, b]),
            _ => 0.0,
        }
    })?;
    let affected = count_from_fraction(spec.missing_subjects, spec.n);
    let mut xs = Vec::with_capacity(spec.n);
    let mut ys = Vec::with_capacity(spec.n);
    let mut masks = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let b3 = bernoulli_half(&mut rng);
        let x: Vec<f64> = if spec.covariate_setting == 1 {
            (0..t)
                .flat_map(|l| {
                    let u: f64 = rng.random_range(l as f64..(l + 1) as f64);
                    [1.0, u, b3]
                })
                .collect()
        } else {
            vec![1.0, bernoulli_half(&mut rng), b3]
        };
        let mut y = DenseTensor::zeros(spec.dims.clone())?;
        for a in 0..d1 {
            for b in 0..d2 {
                let noise = ar1_noise(&mut rng, t, 0.7);
                let (c2, c3) = (img2.get(&[a, b]), img3.get(&[a, b]));
                for l in 0..t {
                    let base = per_time(l, 0);
                    let mean = c2 * x[base + 1] + c3 * x[base + 2];
                    y.set(&[a, b, l], mean + spec.sigma * noise[l]);
                }
            }
        }
        let missing: Vec<usize> = if i < affected {
            ((t - count_from_fraction(spec.missing_times, t))..t).collect()
        } else {
            Vec::new()
        };
        let mask = slice_mask(&spec.dims, &missing)?;
        mark_missing(&mut y, &mask);
        xs.push(x);
        ys.push(y);
        masks.push(mask);
    }
    let truth = GroundTruth {
        model: None,
        coefficient,
        supports: Vec::new(),
        runs: Vec::new(),
        images: Some([img2, img3]),
    };
    Ok((RegressionDataset::new(xs, ys, masks)?, truth))
}

/// Dispatches on `spec.scenario`.
pub fn generate(spec: &SimSpec) -> Result<(RegressionDataset, GroundTruth)> {
    match spec.scenario {
        Scenario::BlockMissing => gen_block_missing(spec),
        Scenario::RandomMissing => gen_random_missing(spec),
        Scenario::Misspecified => gen_misspecified(spec),
    }
}
