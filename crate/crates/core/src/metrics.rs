//! Estimation accuracy and support recovery against a known ground truth.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{dot, CpModel};
use crate::sim::GroundTruth;
use crate::solver::sign_resolved_distance;

/// Largest rank for which component matching enumerates every assignment;
/// larger ranks use a greedy assignment.
pub const EXHAUSTIVE_MATCH_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimationErrors {
    /// `||B_hat - B*||_F`.
    pub coef_abs: f64,
    /// `||B_hat - B*||_F / ||B*||_F`.
    pub coef_rel: f64,
    /// Largest sign-resolved factor distance over matched components and all
    /// modes; `None` when the truth has no CP form.
    pub component: Option<f64>,
    /// `(estimated, true)` component pairs.
    pub matching: Vec<(usize, usize)>,
    pub unmatched_estimated: Vec<usize>,
    pub unmatched_true: Vec<usize>,
}

/// Injective assignment of the smaller component set into the larger one
/// maximizing `sum_k sum_j |<a_{k,j}, b_{pi(k),j}>|`. Returns
/// `(estimated, true)` pairs sorted by estimated index.
pub fn match_components(est: &CpModel, truth: &CpModel) -> Vec<(usize, usize)> {
    let (re, rt) = (est.rank(), truth.rank());
    let score = |a: usize, b: usize| -> f64 {
        est.factors()[a]
            .iter()
            .zip(&truth.factors()[b])
            .map(|(x, y)| dot(x, y).abs())
            .sum()
    };
    let scores: Vec<Vec<f64>> = (0..re)
        .map(|a| (0..rt).map(|b| score(a, b)).collect())
        .collect();
    let transpose = re > rt;
    let (small, large) = if transpose { (rt, re) } else { (re, rt) };
    let s = |a: usize, b: usize| {
        if transpose {
            scores[b][a]
        } else {
            scores[a][b]
        }
    };

    let assignment: Vec<usize> = if large <= EXHAUSTIVE_MATCH_LIMIT {
        let mut best: (f64, Vec<usize>) = (f64::NEG_INFINITY, Vec::new());
        let mut current = Vec::with_capacity(small);
        let mut used = vec![false; large];
        fn search(
            depth: usize,
            small: usize,
            large: usize,
            acc: f64,
            current: &mut Vec<usize>,
            used: &mut [bool],
            best: &mut (f64, Vec<usize>),
            s: &dyn Fn(usize, usize) -> f64,
        ) {
            if depth == small {
                if acc > best.0 {
                    *best = (acc, current.clone());
                }
                return;
            }
            for b in 0..large {
                if !used[b] {
                    used[b] = true;
                    current.push(b);
                    search(
                        depth + 1,
                        small,
                        large,
                        acc + s(depth, b),
                        current,
                        used,
                        best,
                        s,
                    );
                    current.pop();
                    used[b] = false;
                }
            }
        }
        search(0, small, large, 0.0, &mut current, &mut used, &mut best, &s);
        best.1
    } else {
        let mut used = vec![false; large];
        (0..small)
            .map(|a| {
                let b = (0..large)
                    .filter(|&b| !used[b])
                    .max_by(|&x, &y| s(a, x).total_cmp(&s(a, y)).then(y.cmp(&x)))
                    .expect("large >= small");
                used[b] = true;
                b
            })
            .collect()
    };
    let mut pairs: Vec<(usize, usize)> = assignment
        .into_iter()
        .enumerate()
        .map(|(a, b)| if transpose { (b, a) } else { (a, b) })
        .collect();
    pairs.sort_unstable();
    pairs
}

pub fn estimation_errors(est: &CpModel, truth: &GroundTruth) -> Result<EstimationErrors> {
    if est.response_dims() != truth.response_dims() || est.q() != truth.q() {
        return Err(Error::ShapeMismatch(format!(
            "estimate {:?} (q = {}) vs truth {:?} (q = {})",
            est.response_dims(),
            est.q(),
            truth.response_dims(),
            truth.q()
        )));
    }
    let b_hat = est.coefficient_tensor();
    let b_star = &truth.coefficient;
    let coef_abs = b_hat
        .data()
        .iter()
        .zip(b_star.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm = b_star.frobenius_norm();
    let coef_rel = if norm > 0.0 {
        coef_abs / norm
    } else {
        f64::NAN
    };

    let (component, matching, unmatched_estimated, unmatched_true) = match &truth.model {
        None => (None, Vec::new(), (0..est.rank()).collect(), Vec::new()),
        Some(tm) => {
            let matching = match_components(est, tm);
            let err = matching
                .iter()
                .flat_map(|&(a, b)| {
                    est.factors()[a]
                        .iter()
                        .zip(&tm.factors()[b])
                        .map(|(x, y)| sign_resolved_distance(x, y))
                })
                .fold(0.0, f64::max);
            let ue = (0..est.rank())
                .filter(|a| !matching.iter().any(|p| p.0 == *a))
                .collect();
            let ut = (0..tm.rank())
                .filter(|b| !matching.iter().any(|p| p.1 == *b))
                .collect();
            (Some(err), matching, ue, ut)
        }
    };
    Ok(EstimationErrors {
        coef_abs,
        coef_rel,
        component,
        matching,
        unmatched_estimated,
        unmatched_true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportRecovery {
    /// Mean of the per-mode rates over modes where they are defined.
    pub tpr: f64,
    pub fpr: f64,
    /// Per response mode; `None` when no matched true factor in that mode has
    /// a nonzero (TPR) or zero (FPR) entry.
    pub tpr_by_mode: Vec<Option<f64>>,
    pub fpr_by_mode: Vec<Option<f64>>,
}

/// Per-mode true and false positive rates over matched components, averaged
/// over components then over response modes.
pub fn tpr_fpr(est: &CpModel, truth: &GroundTruth) -> Result<SupportRecovery> {
    let tm = truth.model.as_ref().ok_or_else(|| {
        Error::InvalidParameter("support recovery needs a CP ground truth".into())
    })?;
    if est.response_dims() != tm.response_dims() {
        return Err(Error::ShapeMismatch(format!(
            "estimate {:?} vs truth {:?}",
            est.response_dims(),
            tm.response_dims()
        )));
    }
    let matching = match_components(est, tm);
    let modes = tm.response_order();
    let mut tpr_by_mode = Vec::with_capacity(modes);
    let mut fpr_by_mode = Vec::with_capacity(modes);
    for j in 0..modes {
        let mut tprs = Vec::new();
        let mut fprs = Vec::new();
        for &(a, b) in &matching {
            let (e, t) = (est.factor(a, j), tm.factor(b, j));
            let (mut tp, mut pos, mut fp, mut neg) = (0usize, 0usize, 0usize, 0usize);
            for (&ev, &tv) in e.iter().zip(t) {
                if tv != 0.0 {
                    pos += 1;
                    tp += usize::from(ev != 0.0);
                } else {
                    neg += 1;
                    fp += usize::from(ev != 0.0);
                }
            }
            if pos > 0 {
                tprs.push(tp as f64 / pos as f64);
            }
            if neg > 0 {
                fprs.push(fp as f64 / neg as f64);
            }
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        tpr_by_mode.push(mean(&tprs));
        fpr_by_mode.push(mean(&fprs));
    }
    let avg = |v: &[Option<f64>]| {
        let defined: Vec<f64> = v.iter().flatten().copied().collect();
        if defined.is_empty() {
            f64::NAN
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        }
    };
    Ok(SupportRecovery {
        tpr: avg(&tpr_by_mode),
        fpr: avg(&fpr_by_mode),
        tpr_by_mode,
        fpr_by_mode,
    })
}
