//! Pseudobulk expression-accuracy metrics.

use alloc::vec;
use alloc::vec::Vec;

use super::stats::pearson;
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;

/// `mean(pert) − mean(ctrl)` over cells.
pub fn pseudobulk_delta(pert: &Matrix, ctrl: &Matrix) -> Result<Vec<f64>> {
    if pert.rows() == 0 || ctrl.rows() == 0 {
        return Err(Error::Empty("pseudobulk of an empty cell set".into()));
    }
    if pert.cols() != ctrl.cols() {
        return Err(Error::ShapeMismatch {
            op: "pseudobulk_delta",
            lhs: vec![pert.rows(), pert.cols()],
            rhs: vec![ctrl.rows(), ctrl.cols()],
        });
    }
    Ok(pert.column_means().iter().zip(ctrl.column_means()).map(|(a, b)| a - b).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Distance {
    L1,
    L2,
    Cosine,
}

impl Distance {
    pub const ALL: [Distance; 3] = [Distance::L1, Distance::L2, Distance::Cosine];

    /// Cosine distance against a zero vector is taken as 1.
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Distance::L2 => libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()),
            Distance::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = libm::sqrt(a.iter().map(|x| x * x).sum());
                let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

fn check_matched(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(invalid(alloc::format!("{} predictions for {} truths", pred.len(), truth.len())));
    }
    if let Some(g) = pred.first().map(Vec::len) {
        if pred.iter().chain(truth).any(|v| v.len() != g) {
            return Err(invalid("deltas differ in gene count"));
        }
    }
    Ok(())
}

/// `r_λ`: truths strictly closer to prediction `λ` than its own truth.
pub fn pds_ranks(pred: &[Vec<f64>], truth: &[Vec<f64>], d: Distance) -> Result<Vec<usize>> {
    check_matched(pred, truth)?;
    Ok(pred
        .iter()
        .enumerate()
        .map(|(l, p)| {
            let own = d.eval(p, &truth[l]);
            (0..truth.len()).filter(|&q| q != l && d.eval(p, &truth[q]) < own).count()
        })
        .collect())
}

/// `1 − (1/M) Σ r_λ / M`. Needs `M ≥ 2`.
pub fn pds(pred: &[Vec<f64>], truth: &[Vec<f64>], d: Distance) -> Result<f64> {
    if pred.len() < 2 {
        return Err(invalid("PDS needs at least two perturbations"));
    }
    let m = pred.len() as f64;
    let ranks = pds_ranks(pred, truth, d)?;
    Ok(1.0 - ranks.iter().map(|&r| r as f64 / m).sum::<f64>() / m)
}

/// Pearson of one predicted and one true delta; `None` if either is constant.
pub fn delta_correlation(pred: &[f64], truth: &[f64]) -> Option<f64> {
    pearson(pred, truth)
}

/// L1 norm of the delta error.
pub fn absolute_error(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum()
}

/// Squared L2 norm of the delta error.
pub fn squared_error(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Coefficient of determination of a predicted pseudobulk profile across genes.
pub fn r2(pred: &[f64], truth: &[f64]) -> Option<f64> {
    if truth.len() < 2 || pred.len() != truth.len() {
        return None;
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return None;
    }
    Some(1.0 - squared_error(pred, truth) / ss_tot)
}

/// Mean of the defined values and the count of undefined ones.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), skipped)
}
