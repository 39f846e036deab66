//! Dense row-major tensors, observation masks and the multilinear primitives
//! used by the estimator.
//!
//! Storage is row-major (last index varies fastest). Mode unfoldings use the
//! column order in which the remaining indices cycle with the earliest mode
//! fastest, so `unfold(A, 0) = [A[:,0,0], A[:,1,0], ..., A[:,d2-1,d3-1]]` for a
//! third-order `A`. Modes are zero-based throughout the crate.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Row-major strides for `dims`.
pub fn strides(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for j in (0..dims.len().saturating_sub(1)).rev() {
        strides[j] = strides[j + 1] * dims[j + 1];
    }
    strides
}

/// Flat offset of a multi-index. Every module indexes tensors through this.
#[inline]
pub fn offset(dims: &[usize], idx: &[usize]) -> usize {
    debug_assert_eq!(dims.len(), idx.len());
    idx.iter().zip(dims).fold(0, |acc, (&i, &d)| {
        debug_assert!(i < d);
        acc * d + i
    })
}

/// Advances `idx` to the next multi-index in row-major order. Returns `false`
/// after the last index has been visited.
#[inline]
pub fn next_index(dims: &[usize], idx: &mut [usize]) -> bool {
    for j in (0..dims.len()).rev() {
        idx[j] += 1;
        if idx[j] < dims[j] {
            return true;
        }
        idx[j] = 0;
    }
    false
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.contains(&0) {
        return Err(Error::InvalidParameter(format!(
            "all dimensions must be positive, got {dims:?}"
        )));
    }
    Ok(dims.iter().product())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len = check_dims(&dims)?;
        if data.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {len} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len = check_dims(&dims)?;
        Ok(Self {
            dims,
            data: vec![0.0; len],
        })
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len = check_dims(&dims)?;
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0; dims.len()];
        loop {
            data.push(f(&idx));
            if !next_index(&dims, &mut idx) {
                break;
            }
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[offset(&self.dims, idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = offset(&self.dims, idx);
        self.data[o] = value;
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.order() {
            return Err(Error::ModeOutOfRange {
                mode,
                order: self.order(),
            });
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &[usize]) -> Result<()> {
        if self.dims != other {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.dims, other
            )));
        }
        Ok(())
    }

    /// Column index of `idx` in the mode-`mode` unfolding.
    fn unfold_column(dims: &[usize], mode: usize, idx: &[usize]) -> usize {
        let mut col = 0;
        let mut stride = 1;
        for (j, (&i, &d)) in idx.iter().zip(dims).enumerate() {
            if j != mode {
                col += i * stride;
                stride *= d;
            }
        }
        col
    }

    /// Mode-`mode` matricization: `d_mode` rows, `prod_{j != mode} d_j` columns.
    pub fn unfold(&self, mode: usize) -> Result<DMatrix<f64>> {
        self.check_mode(mode)?;
        let rows = self.dims[mode];
        let cols = self.len() / rows;
        let mut m = DMatrix::zeros(rows, cols);
        let mut idx = vec![0; self.order()];
        for &v in &self.data {
            let col = Self::unfold_column(&self.dims, mode, &idx);
            m[(idx[mode], col)] = v;
            next_index(&self.dims, &mut idx);
        }
        Ok(m)
    }

    /// Inverse of [`DenseTensor::unfold`].
    pub fn fold(matrix: &DMatrix<f64>, mode: usize, dims: Vec<usize>) -> Result<Self> {
        let len = check_dims(&dims)?;
        if mode >= dims.len() {
            return Err(Error::ModeOutOfRange {
                mode,
                order: dims.len(),
            });
        }
        if matrix.nrows() != dims[mode] || matrix.nrows() * matrix.ncols() != len {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} matrix cannot be folded into {dims:?} along mode {mode}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Self::from_fn(dims.clone(), |idx| {
            matrix[(idx[mode], Self::unfold_column(&dims, mode, idx))]
        })
    }

    /// Contracts mode `mode` with `v`; the result has that mode removed.
    pub fn mode_vec_product(&self, mode: usize, v: &[f64]) -> Result<DenseTensor> {
        self.check_mode(mode)?;
        let d = self.dims[mode];
        if v.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "vector of length {} against mode {mode} of size {d}",
                v.len()
            )));
        }
        let outer: usize = self.dims[..mode].iter().product();
        let inner: usize = self.dims[mode + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for a in 0..outer {
            let dst = &mut out[a * inner..(a + 1) * inner];
            for (l, &vl) in v.iter().enumerate() {
                let src = &self.data[(a * d + l) * inner..(a * d + l + 1) * inner];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += s * vl;
                }
            }
        }
        let mut dims = self.dims.clone();
        dims.remove(mode);
        Ok(DenseTensor { dims, data: out })
    }

    /// `sum over all indices of t[i_1..i_m] * v_1[i_1] * ... * v_m[i_m]`.
    pub fn multilinear_combination(&self, vectors: &[&[f64]]) -> Result<f64> {
        if vectors.len() != self.order() {
            return Err(Error::ShapeMismatch(format!(
                "{} vectors for an order-{} tensor",
                vectors.len(),
                self.order()
            )));
        }
        for (j, v) in vectors.iter().enumerate() {
            if v.len() != self.dims[j] {
                return Err(Error::ShapeMismatch(format!(
                    "vector {j} has length {}, mode size is {}",
                    v.len(),
                    self.dims[j]
                )));
            }
        }
        // Contract from the last mode so each step walks contiguous memory.
        let mut cur = self.data.clone();
        for j in (0..self.order()).rev() {
            let d = self.dims[j];
            let v = vectors[j];
            cur = cur
                .chunks_exact(d)
                .map(|chunk| chunk.iter().zip(v).map(|(a, b)| a * b).sum())
                .collect();
        }
        Ok(cur[0])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn inner_product(&self, other: &DenseTensor) -> Result<f64> {
        self.check_same_shape(&other.dims)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Keeps observed entries and zeroes the rest.
    pub fn project_observed(&self, mask: &ObservationMask) -> Result<DenseTensor> {
        self.check_same_shape(&mask.dims)?;
        let data = self
            .data
            .iter()
            .zip(&mask.observed)
            .map(|(&v, &o)| if o { v } else { 0.0 })
            .collect();
        Ok(DenseTensor {
            dims: self.dims.clone(),
            data,
        })
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &DenseTensor) -> Result<()> {
        self.check_same_shape(&other.dims)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }
}

/// Entry `(i_1..i_m)` equals `prod_j v_j[i_j]`.
pub fn outer_product(vectors: &[&[f64]]) -> Result<DenseTensor> {
    if vectors.is_empty() {
        return Err(Error::EmptyInput("outer product needs at least one vector"));
    }
    let dims: Vec<usize> = vectors.iter().map(|v| v.len()).collect();
    check_dims(&dims)?;
    let mut data = vec![1.0];
    for v in vectors {
        let mut next = Vec::with_capacity(data.len() * v.len());
        for &a in &data {
            next.extend(v.iter().map(|&b| a * b));
        }
        data = next;
    }
    Ok(DenseTensor { dims, data })
}

/// Boolean tensor of observed positions, stored in the same order as
/// [`DenseTensor`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationMask {
    dims: Vec<usize>,
    observed: Vec<bool>,
}

impl ObservationMask {
    pub fn new(dims: Vec<usize>, observed: Vec<bool>) -> Result<Self> {
        let len = check_dims(&dims)?;
        if observed.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "mask dims {dims:?} need {len} entries, got {}",
                observed.len()
            )));
        }
        Ok(Self { dims, observed })
    }

    pub fn full(dims: Vec<usize>) -> Result<Self> {
        let len = check_dims(&dims)?;
        Ok(Self {
            dims,
            observed: vec![true; len],
        })
    }

    pub fn empty(dims: Vec<usize>) -> Result<Self> {
        let len = check_dims(&dims)?;
        Ok(Self {
            dims,
            observed: vec![false; len],
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn observed_mut(&mut self) -> &mut [bool] {
        &mut self.observed
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn count_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn is_observed(&self, idx: &[usize]) -> bool {
        self.observed[offset(&self.dims, idx)]
    }
}
