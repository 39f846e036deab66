//! Non-convex projections enforcing sparsity and temporal fusion on factor
//! vectors.
//!
//! Ties between entries of equal magnitude are resolved in favour of the
//! lowest index, both in [`truncate`] and in the gap selection inside
//! [`fuse`].

use crate::error::{Error, Result};

/// Indices of the `keep` largest-magnitude entries, lowest index first on ties.
fn top_magnitude_indices(a: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[j].abs().total_cmp(&a[i].abs()).then(i.cmp(&j)));
    order.truncate(keep);
    order
}

/// Zeroes all but the `tau_s` entries of largest absolute value.
pub fn truncate(a: &[f64], tau_s: usize) -> Result<Vec<f64>> {
    if tau_s == 0 || tau_s > a.len() {
        return Err(Error::InvalidParameter(format!(
            "sparsity level {tau_s} outside 1..={}",
            a.len()
        )));
    }
    let mut out = vec![0.0; a.len()];
    for i in top_magnitude_indices(a, tau_s) {
        out[i] = a[i];
    }
    Ok(out)
}

/// First differences: `out[i] = a[i + 1] - a[i]`.
pub fn diff(a: &[f64]) -> Result<Vec<f64>> {
    if a.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "difference operator needs at least 2 entries, got {}",
            a.len()
        )));
    }
    Ok(a.windows(2).map(|w| w[1] - w[0]).collect())
}

/// Half-open ranges of the fusion groups of `a` at level `tau_f`.
///
/// Adjacent entries share a group unless their gap survives truncation of the
/// difference vector to `tau_f - 1` entries.
pub fn fusion_groups(a: &[f64], tau_f: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if tau_f == 0 || tau_f > a.len() {
        return Err(Error::InvalidParameter(format!(
            "fusion level {tau_f} outside 1..={}",
            a.len()
        )));
    }
    if a.len() == 1 {
        return Ok(std::iter::once(0..1).collect());
    }
    let gaps = diff(a)?;
    let mut breaks = vec![false; gaps.len()];
    for i in top_magnitude_indices(&gaps, tau_f - 1) {
        breaks[i] = gaps[i] != 0.0;
    }
    let mut groups = Vec::with_capacity(tau_f);
    let mut start = 0;
    for (i, &b) in breaks.iter().enumerate() {
        if b {
            groups.push(start..i + 1);
            start = i + 1;
        }
    }
    groups.push(start..a.len());
    Ok(groups)
}

/// Replaces every entry by the mean of its fusion group, leaving at most
/// `tau_f` constant runs.
pub fn fuse(a: &[f64], tau_f: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; a.len()];
    for g in fusion_groups(a, tau_f)? {
        let mean = a[g.clone()].iter().sum::<f64>() / g.len() as f64;
        out[g].iter_mut().for_each(|v| *v = mean);
    }
    Ok(out)
}

/// `truncate(fuse(a, tau_f), tau_s)`.
pub fn truncatefuse(a: &[f64], tau_s: usize, tau_f: usize) -> Result<Vec<f64>> {
    if tau_s == 0 || tau_s > a.len() {
        return Err(Error::InvalidParameter(format!(
            "sparsity level {tau_s} outside 1..={}",
            a.len()
        )));
    }
    truncate(&fuse(a, tau_f)?, tau_s)
}

pub fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales `a` to unit Euclidean norm.
pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm2(a);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Normalization(n));
    }
    Ok(a.iter().map(|v| v / n).collect())
}

/// Number of maximal constant runs in `a`.
pub fn count_runs(a: &[f64]) -> usize {
    if a.is_empty() {
        return 0;
    }
    1 + a.windows(2).filter(|w| w[0] != w[1]).count()
}

/// Number of distinct nonzero run values, counting each constant run once.
pub fn count_nonzero_runs(a: &[f64]) -> usize {
    let mut count = 0;
    for (i, &v) in a.iter().enumerate() {
        if v != 0.0 && (i == 0 || a[i - 1] != v) {
            count += 1;
        }
    }
    count
}

pub fn count_nonzero(a: &[f64]) -> usize {
    a.iter().filter(|&&v| v != 0.0).count()
}
