//! Mean and ridge-linear reference predictors fitted on the training split.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::data::{CellFilter, CellMeta, Dataset, Split};
use crate::denoiser::Condition;
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MeanLevel {
    Perturbation,
    Context,
    Batch,
    Overall,
}

impl MeanLevel {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "perturbation" => MeanLevel::Perturbation,
            "context" | "cell-type" => MeanLevel::Context,
            "batch" => MeanLevel::Batch,
            "overall" => MeanLevel::Overall,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum GroupKey {
    Perturbation(usize, Option<usize>),
    Context(usize),
    Batch(usize),
}

/// Predicts every cell as the mean of perturbed training cells in its group.
/// Groups not seen in training fall back to the overall mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanBaseline {
    level: MeanLevel,
    overall: Vec<f64>,
    groups: BTreeMap<GroupKey, Vec<f64>>,
}

impl MeanBaseline {
    pub fn fit(ds: &Dataset, level: MeanLevel) -> Result<Self> {
        let ctrl = ds.control_id();
        let cells: Vec<usize> = (0..ds.len())
            .filter(|&i| {
                let m = &ds.meta()[i];
                m.split == Split::Train && Some(m.perturbation) != ctrl
            })
            .collect();
        if cells.is_empty() {
            return Err(Error::NoMatchingCells("perturbed training cells".into()));
        }
        let g = ds.genes.len();
        let mut sums: BTreeMap<GroupKey, (Vec<f64>, usize)> = BTreeMap::new();
        let mut overall = vec![0.0; g];
        for &i in &cells {
            let row = ds.expression().row(i);
            overall.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            if let Some(key) = Self::key(level, &ds.meta()[i]) {
                let e = sums.entry(key).or_insert_with(|| (vec![0.0; g], 0));
                e.0.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                e.1 += 1;
            }
        }
        overall.iter_mut().for_each(|v| *v /= cells.len() as f64);
        let groups = sums
            .into_iter()
            .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        Ok(Self { level, overall, groups })
    }

    fn key(level: MeanLevel, m: &CellMeta) -> Option<GroupKey> {
        match level {
            MeanLevel::Perturbation => Some(GroupKey::Perturbation(m.perturbation, m.dose)),
            MeanLevel::Context => Some(GroupKey::Context(m.context)),
            MeanLevel::Batch => Some(GroupKey::Batch(m.replicate)),
            MeanLevel::Overall => None,
        }
    }

    pub fn level(&self) -> MeanLevel {
        self.level
    }

    pub fn overall(&self) -> &[f64] {
        &self.overall
    }

    /// Profile predicted for a cell with metadata `m`.
    pub fn predict_cell(&self, m: &CellMeta) -> &[f64] {
        Self::key(self.level, m).and_then(|k| self.groups.get(&k)).unwrap_or(&self.overall)
    }

    /// One predicted row per target cell.
    pub fn predict_cells(&self, targets: &[CellMeta]) -> Matrix {
        let rows: Vec<&[f64]> = targets.iter().map(|m| self.predict_cell(m)).collect();
        Matrix::from_rows(&rows).unwrap_or_else(|_| Matrix::zeros(0, self.overall.len()))
    }
}

/// Ridge regression from `[context one-hot, perturbation one-hot, control pseudobulk]`
/// to the perturbed pseudobulk, with an unpenalized intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBaseline {
    contexts: usize,
    perturbations: usize,
    ridge: f64,
    /// Feature means used for centering.
    x_mean: Vec<f64>,
    intercept: Vec<f64>,
    /// `features × G`.
    weights: Matrix,
    controls: BTreeMap<usize, Vec<f64>>,
}

impl LinearBaseline {
    /// Fits on every non-control (context, perturbation) pair with training cells.
    pub fn fit(ds: &Dataset, ridge: f64) -> Result<Self> {
        if !(ridge > 0.0) || !ridge.is_finite() {
            return Err(invalid("ridge penalty must be positive and finite"));
        }
        let controls = Self::control_profiles(ds)?;
        let mut pairs = BTreeSet::new();
        let ctrl = ds.control_id();
        for m in ds.meta() {
            if m.split == Split::Train && Some(m.perturbation) != ctrl {
                pairs.insert((m.context, m.perturbation));
            }
        }
        if pairs.is_empty() {
            return Err(Error::NoMatchingCells("perturbed training cells".into()));
        }
        let (nc, np, g) = (ds.contexts.len(), ds.perturbations.len(), ds.genes.len());
        let f = nc + np + g;
        let n = pairs.len();
        let mut x = DMatrix::<f64>::zeros(n, f);
        let mut y = DMatrix::<f64>::zeros(n, g);
        for (row, &(c, p)) in pairs.iter().enumerate() {
            let ctrl_profile =
                controls.get(&c).ok_or_else(|| Error::NoMatchingCells(alloc::format!("controls of context {c}")))?;
            let features = Self::features_for(nc, np, c, Some(p), ctrl_profile);
            for (j, v) in features.iter().enumerate() {
                x[(row, j)] = *v;
            }
            let filter = CellFilter { context: Some(c), perturbation: Some(p), split: Some(Split::Train), dose: None };
            let target = ds.cells(&filter).column_means();
            for (j, v) in target.iter().enumerate() {
                y[(row, j)] = *v;
            }
        }
        let x_mean: Vec<f64> = (0..f).map(|j| x.column(j).mean()).collect();
        let y_mean: Vec<f64> = (0..g).map(|j| y.column(j).mean()).collect();
        for r in 0..n {
            for j in 0..f {
                x[(r, j)] -= x_mean[j];
            }
            for j in 0..g {
                y[(r, j)] -= y_mean[j];
            }
        }
        let mut gram = x.transpose() * &x;
        for j in 0..f {
            gram[(j, j)] += ridge;
        }
        let chol = gram.cholesky().ok_or(Error::NotPositiveDefinite)?;
        let w = chol.solve(&(x.transpose() * &y));
        let weights = Matrix::new(f, g, (0..f).flat_map(|r| (0..g).map(move |c| (r, c))).map(|(r, c)| w[(r, c)]).collect())?;
        Ok(Self { contexts: nc, perturbations: np, ridge, x_mean, intercept: y_mean, weights, controls })
    }

    fn control_profiles(ds: &Dataset) -> Result<BTreeMap<usize, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for c in 0..ds.contexts.len() {
            let cells = ds.cells(&ds.control_filter(c)?);
            if cells.rows() > 0 {
                out.insert(c, cells.column_means());
            }
        }
        Ok(out)
    }

    fn features_for(nc: usize, np: usize, c: usize, p: Option<usize>, ctrl: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; nc + np];
        v[c] = 1.0;
        if let Some(p) = p {
            v[nc + p] = 1.0;
        }
        v.extend_from_slice(ctrl);
        v
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Predicted pseudobulk for `cond`.
    pub fn predict(&self, cond: &Condition) -> Result<Vec<f64>> {
        if cond.context >= self.contexts {
            return Err(Error::OutOfVocabulary { kind: "context", id: cond.context, size: self.contexts });
        }
        if let Some(p) = cond.perturbation.filter(|&p| p >= self.perturbations) {
            return Err(Error::OutOfVocabulary { kind: "perturbation", id: p, size: self.perturbations });
        }
        let ctrl = self
            .controls
            .get(&cond.context)
            .ok_or_else(|| Error::NoMatchingCells(alloc::format!("controls of context {}", cond.context)))?;
        let x = Self::features_for(self.contexts, self.perturbations, cond.context, cond.perturbation, ctrl);
        let centered: Vec<f64> = x.iter().zip(&self.x_mean).map(|(a, b)| a - b).collect();
        let mut out = self.intercept.clone();
        for (j, xv) in centered.iter().enumerate() {
            if *xv != 0.0 {
                for (o, w) in out.iter_mut().zip(self.weights.row(j)) {
                    *o += xv * w;
                }
            }
        }
        Ok(out)
    }

    /// The predicted pseudobulk repeated `m` times.
    pub fn predict_cells(&self, cond: &Condition, m: usize) -> Result<Matrix> {
        let p = self.predict(cond)?;
        Matrix::from_rows(&vec![p; m])
    }

    /// The intercept alone: the mean training pseudobulk.
    pub fn intercept(&self) -> &[f64] {
        &self.intercept
    }
}
