//! CP-structured coefficient tensors, regression datasets and the masked
//! least-squares objective.

use crate::constraints::norm2;
use crate::error::{Error, Result};
use crate::tensor::{outer_product, DenseTensor, ObservationMask};

const UNIT_NORM_TOL: f64 = 1e-10;

/// Rank-`r` CP coefficient tensor `sum_k w_k b_{k,1} o ... o b_{k,m+2}`.
///
/// The first `m + 1` factors of each component index the response modes; the
/// last one has length `q` and multiplies the covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct CpModel {
    response_dims: Vec<usize>,
    q: usize,
    weights: Vec<f64>,
    factors: Vec<Vec<Vec<f64>>>,
}

impl CpModel {
    pub fn new(
        response_dims: Vec<usize>,
        q: usize,
        weights: Vec<f64>,
        factors: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParameter("rank must be at least 1".into()));
        }
        if response_dims.is_empty() || response_dims.contains(&0) || q == 0 {
            return Err(Error::InvalidParameter(format!(
                "invalid model shape {response_dims:?} with q = {q}"
            )));
        }
        if factors.len() != weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights but {} components",
                weights.len(),
                factors.len()
            )));
        }
        for (k, (w, comp)) in weights.iter().zip(&factors).enumerate() {
            if !(*w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "weight {k} is {w}, must be positive"
                )));
            }
            if comp.len() != response_dims.len() + 1 {
                return Err(Error::ShapeMismatch(format!(
                    "component {k} has {} factors, expected {}",
                    comp.len(),
                    response_dims.len() + 1
                )));
            }
            for (j, f) in comp.iter().enumerate() {
                let want = response_dims.get(j).copied().unwrap_or(q);
                if f.len() != want {
                    return Err(Error::ShapeMismatch(format!(
                        "factor ({k},{j}) has length {}, expected {want}",
                        f.len()
                    )));
                }
                let n = norm2(f);
                if (n - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::InvalidParameter(format!(
                        "factor ({k},{j}) has norm {n}, expected 1"
                    )));
                }
            }
        }
        Ok(Self {
            response_dims,
            q,
            weights,
            factors,
        })
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn response_dims(&self) -> &[usize] {
        &self.response_dims
    }

    /// Number of response modes (`m + 1`).
    pub fn response_order(&self) -> usize {
        self.response_dims.len()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn factors(&self) -> &[Vec<Vec<f64>>] {
        &self.factors
    }

    pub fn factor(&self, k: usize, j: usize) -> &[f64] {
        &self.factors[k][j]
    }

    pub fn covariate_factor(&self, k: usize) -> &[f64] {
        &self.factors[k][self.response_order()]
    }

    /// Materializes the full order-`m + 2` coefficient tensor.
    pub fn coefficient_tensor(&self) -> DenseTensor {
        let mut dims = self.response_dims.clone();
        dims.push(self.q);
        let mut out = DenseTensor::zeros(dims).expect("validated dims");
        for (w, comp) in self.weights.iter().zip(&self.factors) {
            let refs: Vec<&[f64]> = comp.iter().map(|f| f.as_slice()).collect();
            let term = outer_product(&refs).expect("validated factors");
            out.axpy(*w, &term).expect("same shape");
        }
        out
    }

    /// `B x_{m+2} x`, computed component-wise without forming `B`.
    pub fn predict(&self, x: &[f64]) -> Result<DenseTensor> {
        if x.len() != self.q {
            return Err(Error::ShapeMismatch(format!(
                "covariate has length {}, model expects {}",
                x.len(),
                self.q
            )));
        }
        let mut out = DenseTensor::zeros(self.response_dims.clone())?;
        for k in 0..self.rank() {
            let alpha = dot(self.covariate_factor(k), x);
            let scale = self.weights[k] * alpha;
            if scale == 0.0 {
                continue;
            }
            let refs: Vec<&[f64]> = self.factors[k][..self.response_order()]
                .iter()
                .map(|f| f.as_slice())
                .collect();
            out.axpy(scale, &outer_product(&refs)?)?;
        }
        Ok(out)
    }

    /// Puts the model in canonical form: components in nonincreasing weight
    /// order (stable), and within each component every factor except the last
    /// response mode has a nonnegative largest-magnitude entry. Sign flips are
    /// compensated on the last response mode.
    pub fn canonicalize(&mut self) {
        let absorb = self.response_order() - 1;
        for comp in &mut self.factors {
            for j in 0..comp.len() {
                if j == absorb {
                    continue;
                }
                if leading_entry(&comp[j]) < 0.0 {
                    comp[j].iter_mut().for_each(|v| *v = -*v);
                    comp[absorb].iter_mut().for_each(|v| *v = -*v);
                }
            }
        }
        let mut order: Vec<usize> = (0..self.rank()).collect();
        order.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]));
        self.weights = order.iter().map(|&k| self.weights[k]).collect();
        self.factors = order.iter().map(|&k| self.factors[k].clone()).collect();
    }

    pub fn canonicalized(mut self) -> Self {
        self.canonicalize();
        self
    }

    pub(crate) fn into_parts(self) -> (Vec<usize>, usize, Vec<f64>, Vec<Vec<Vec<f64>>>) {
        (self.response_dims, self.q, self.weights, self.factors)
    }
}

/// Entry of largest magnitude (lowest index on ties).
fn leading_entry(v: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for &x in v {
        if x.abs() > best.abs() {
            best = x;
        }
    }
    best
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `n` samples `(x_i, Y_i, Omega_i)` sharing one response shape and covariate
/// length. Unobserved response entries conventionally hold NaN; the mask is
/// authoritative.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDataset {
    covariates: Vec<Vec<f64>>,
    responses: Vec<DenseTensor>,
    masks: Vec<ObservationMask>,
}

impl RegressionDataset {
    pub fn new(
        covariates: Vec<Vec<f64>>,
        responses: Vec<DenseTensor>,
        masks: Vec<ObservationMask>,
    ) -> Result<Self> {
        if responses.is_empty() {
            return Err(Error::EmptyInput("dataset needs at least one sample"));
        }
        if covariates.len() != responses.len() || masks.len() != responses.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} covariates, {} responses, {} masks",
                covariates.len(),
                responses.len(),
                masks.len()
            )));
        }
        let dims = responses[0].dims();
        let q = covariates[0].len();
        if q == 0 {
            return Err(Error::InvalidParameter(
                "covariate dimension must be positive".into(),
            ));
        }
        for (i, ((x, y), m)) in covariates.iter().zip(&responses).zip(&masks).enumerate() {
            if x.len() != q {
                return Err(Error::ShapeMismatch(format!(
                    "covariate {i} has length {}, expected {q}",
                    x.len()
                )));
            }
            if y.dims() != dims {
                return Err(Error::ShapeMismatch(format!(
                    "response {i} has dims {:?}, expected {dims:?}",
                    y.dims()
                )));
            }
            if m.dims() != dims {
                return Err(Error::ShapeMismatch(format!(
                    "mask {i} has dims {:?}, expected {dims:?}",
                    m.dims()
                )));
            }
        }
        Ok(Self {
            covariates,
            responses,
            masks,
        })
    }

    pub fn n(&self) -> usize {
        self.responses.len()
    }

    pub fn q(&self) -> usize {
        self.covariates[0].len()
    }

    pub fn response_dims(&self) -> &[usize] {
        self.responses[0].dims()
    }

    /// Entries per response tensor.
    pub fn response_len(&self) -> usize {
        self.responses[0].len()
    }

    pub fn covariates(&self) -> &[Vec<f64>] {
        &self.covariates
    }

    pub fn responses(&self) -> &[DenseTensor] {
        &self.responses
    }

    pub fn masks(&self) -> &[ObservationMask] {
        &self.masks
    }

    pub fn total_observed(&self) -> usize {
        self.masks.iter().map(|m| m.count_observed()).sum()
    }

    /// Copy with samples reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        Self::new(
            order.iter().map(|&i| self.covariates[i].clone()).collect(),
            order.iter().map(|&i| self.responses[i].clone()).collect(),
            order.iter().map(|&i| self.masks[i].clone()).collect(),
        )
    }

    /// Copy keeping only the first `n` samples.
    pub fn head(&self, n: usize) -> Result<Self> {
        if n > self.n() {
            return Err(Error::InvalidParameter(format!(
                "asked for {n} of {} samples",
                self.n()
            )));
        }
        self.permuted(&(0..n).collect::<Vec<_>>())
    }

    /// Copy with every response scaled by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.responses.iter_mut().for_each(|y| y.scale(c));
        out
    }

    pub(crate) fn check_model(&self, model: &CpModel) -> Result<()> {
        if model.response_dims() != self.response_dims() || model.q() != self.q() {
            return Err(Error::ShapeMismatch(format!(
                "model shape {:?} (q = {}) vs data {:?} (q = {})",
                model.response_dims(),
                model.q(),
                self.response_dims(),
                self.q()
            )));
        }
        Ok(())
    }
}

/// Sum of squared observed residuals of sample `i`.
pub(crate) fn observed_sse(y: &DenseTensor, mask: &ObservationMask, fit: &DenseTensor) -> f64 {
    y.data()
        .iter()
        .zip(fit.data())
        .zip(mask.observed())
        .filter(|(_, &o)| o)
        .map(|((a, b), _)| (a - b) * (a - b))
        .sum()
}

/// `(1/n) sum_i || P_{Omega_i}(Y_i - B x_{m+2} x_i) ||_F^2`.
pub fn masked_loss(model: &CpModel, data: &RegressionDataset) -> Result<f64> {
    data.check_model(model)?;
    let mut total = 0.0;
    for ((x, y), mask) in data.covariates.iter().zip(&data.responses).zip(&data.masks) {
        total += observed_sse(y, mask, &model.predict(x)?);
    }
    Ok(total / data.n() as f64)
}
