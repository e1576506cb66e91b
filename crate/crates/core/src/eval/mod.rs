//! Evaluation of predicted cell populations against held-out truth:
//! pseudobulk accuracy, discrimination, differential-expression agreement,
//! and the mean / linear reference predictors.

pub mod baseline;
pub mod de;
pub mod metrics;
pub mod stats;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use crate::denoiser::Condition;
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, seeded};

pub use baseline::{LinearBaseline, MeanBaseline, MeanLevel};
pub use de::{de_analysis, DeResult};
pub use metrics::{pds, pseudobulk_delta, Distance};

/// Per-perturbation metrics, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    R2,
    PdsL1,
    PdsL2,
    PdsCos,
    PdCorr,
    Mae,
    Mse,
    DeOver,
    DePrec,
    DirAgr,
    LfcSpear,
    Auroc,
    Auprc,
}

pub const NUM_METRICS: usize = 13;

impl Metric {
    pub const ALL: [Metric; NUM_METRICS] = [
        Metric::R2,
        Metric::PdsL1,
        Metric::PdsL2,
        Metric::PdsCos,
        Metric::PdCorr,
        Metric::Mae,
        Metric::Mse,
        Metric::DeOver,
        Metric::DePrec,
        Metric::DirAgr,
        Metric::LfcSpear,
        Metric::Auroc,
        Metric::Auprc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::R2 => "r2",
            Metric::PdsL1 => "pds_l1",
            Metric::PdsL2 => "pds_l2",
            Metric::PdsCos => "pds_cos",
            Metric::PdCorr => "pdcorr",
            Metric::Mae => "mae",
            Metric::Mse => "mse",
            Metric::DeOver => "de_over",
            Metric::DePrec => "de_prec",
            Metric::DirAgr => "dir_agr",
            Metric::LfcSpear => "lfc_spear",
            Metric::Auroc => "auroc",
            Metric::Auprc => "auprc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Lower values are better.
    pub fn is_error(self) -> bool {
        matches!(self, Metric::Mae | Metric::Mse)
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Cells for one evaluated condition.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalInput {
    pub condition: Condition,
    pub truth: Matrix,
    pub pred: Matrix,
    /// Control cells of the condition's context; shared by truth and prediction.
    pub ctrl: Matrix,
}

/// Pairs truth and prediction sets by condition. The condition sets must match exactly.
pub fn pair_inputs(
    truth: Vec<(Condition, Matrix)>,
    pred: Vec<(Condition, Matrix)>,
    mut ctrl: impl FnMut(&Condition) -> Result<Matrix>,
) -> Result<Vec<EvalInput>> {
    let t_keys: BTreeSet<Condition> = truth.iter().map(|(c, _)| *c).collect();
    let p_keys: BTreeSet<Condition> = pred.iter().map(|(c, _)| *c).collect();
    if t_keys.len() != truth.len() || p_keys.len() != pred.len() {
        return Err(invalid("duplicate conditions in evaluation input"));
    }
    if t_keys != p_keys {
        let missing: Vec<_> = t_keys.symmetric_difference(&p_keys).collect();
        return Err(invalid(format!("truth and prediction conditions differ: {missing:?}")));
    }
    let mut pred: BTreeMap<Condition, Matrix> = pred.into_iter().collect();
    truth
        .into_iter()
        .map(|(condition, truth)| {
            let pred = pred.remove(&condition).expect("key sets match");
            Ok(EvalInput { condition, ctrl: ctrl(&condition)?, truth, pred })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    /// Subsample so control and true perturbed cell counts match.
    pub balance_controls: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { balance_controls: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationMetrics {
    pub condition: Condition,
    values: [Option<f64>; NUM_METRICS],
    pub n_de_true: usize,
    pub n_de_pred: usize,
    /// `-log10(p_adj)` per gene for the true and predicted cells.
    pub scores_true: Vec<f64>,
    pub scores_pred: Vec<f64>,
}

impl PerturbationMetrics {
    pub fn get(&self, m: Metric) -> Option<f64> {
        self.values[m.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_perturbation: Vec<PerturbationMetrics>,
    means: [Option<f64>; NUM_METRICS],
    skipped: [usize; NUM_METRICS],
    /// Spearman of DE-gene counts across perturbations; `None` when undefined.
    pub effect_size: Option<f64>,
}

impl MetricReport {
    /// Mean over perturbations where the metric is defined.
    pub fn mean(&self, m: Metric) -> Option<f64> {
        self.means[m.index()]
    }

    /// Perturbations where the metric was undefined.
    pub fn skipped(&self, m: Metric) -> usize {
        self.skipped[m.index()]
    }
}

fn subsample(x: &Matrix, n: usize, seed: u64) -> Matrix {
    if x.rows() <= n {
        return x.clone();
    }
    let mut idx = rand::seq::index::sample(&mut seeded(seed), x.rows(), n).into_vec();
    idx.sort_unstable();
    x.select_rows(&idx)
}

/// Computes every metric. PDS ranks each prediction against the truths that
/// share its context.
pub fn evaluate(inputs: &[EvalInput], cfg: &EvalConfig) -> Result<MetricReport> {
    if inputs.is_empty() {
        return Err(Error::Empty("no conditions to evaluate".into()));
    }
    let keys: BTreeSet<Condition> = inputs.iter().map(|i| i.condition).collect();
    if keys.len() != inputs.len() {
        return Err(invalid("duplicate conditions in evaluation input"));
    }

    struct Prepared {
        delta_true: Vec<f64>,
        delta_pred: Vec<f64>,
        de_true: DeResult,
        de_pred: DeResult,
        r2: Option<f64>,
    }
    let mut prepared = Vec::with_capacity(inputs.len());
    for (l, input) in inputs.iter().enumerate() {
        let (truth, ctrl) = if cfg.balance_controls {
            let seed = derive_seed(cfg.seed, l as u64);
            let n = input.truth.rows().min(input.ctrl.rows());
            (subsample(&input.truth, n, derive_seed(seed, 0)), subsample(&input.ctrl, n, derive_seed(seed, 1)))
        } else {
            (input.truth.clone(), input.ctrl.clone())
        };
        if !input.pred.is_finite() {
            return Err(Error::NonFinite(format!("predicted cells for {:?}", input.condition)));
        }
        let delta_true = pseudobulk_delta(&truth, &ctrl)?;
        let delta_pred = pseudobulk_delta(&input.pred, &ctrl)?;
        let r2 = metrics::r2(&input.pred.column_means(), &truth.column_means());
        prepared.push(Prepared {
            delta_true,
            delta_pred,
            de_true: de_analysis(&truth, &ctrl)?,
            de_pred: de_analysis(&input.pred, &ctrl)?,
            r2,
        });
    }

    let mut by_context: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (l, input) in inputs.iter().enumerate() {
        by_context.entry(input.condition.context).or_default().push(l);
    }
    let mut pds_values: Vec<[Option<f64>; 3]> = alloc::vec![[None; 3]; inputs.len()];
    for members in by_context.values().filter(|m| m.len() >= 2) {
        let pred: Vec<Vec<f64>> = members.iter().map(|&l| prepared[l].delta_pred.clone()).collect();
        let truth: Vec<Vec<f64>> = members.iter().map(|&l| prepared[l].delta_true.clone()).collect();
        let m = members.len() as f64;
        for (k, d) in Distance::ALL.into_iter().enumerate() {
            let ranks = metrics::pds_ranks(&pred, &truth, d)?;
            for (&l, r) in members.iter().zip(ranks) {
                pds_values[l][k] = Some(1.0 - r as f64 / m);
            }
        }
    }

    let mut rows = Vec::with_capacity(inputs.len());
    for (l, (input, p)) in inputs.iter().zip(&prepared).enumerate() {
        let (de_over, de_prec) = de::de_overlap_precision(&p.de_true, &p.de_pred);
        let labels = &p.de_true.significant;
        let scores_pred = p.de_pred.scores();
        let mut values = [None; NUM_METRICS];
        values[Metric::R2.index()] = p.r2;
        values[Metric::PdsL1.index()] = pds_values[l][0];
        values[Metric::PdsL2.index()] = pds_values[l][1];
        values[Metric::PdsCos.index()] = pds_values[l][2];
        values[Metric::PdCorr.index()] = metrics::delta_correlation(&p.delta_pred, &p.delta_true);
        values[Metric::Mae.index()] = Some(metrics::absolute_error(&p.delta_pred, &p.delta_true));
        values[Metric::Mse.index()] = Some(metrics::squared_error(&p.delta_pred, &p.delta_true));
        values[Metric::DeOver.index()] = de_over;
        values[Metric::DePrec.index()] = de_prec;
        values[Metric::DirAgr.index()] = de::direction_agreement(&p.de_true, &p.de_pred);
        values[Metric::LfcSpear.index()] = de::lfc_spearman(&p.de_true, &p.de_pred);
        values[Metric::Auroc.index()] = de::auroc(labels, &scores_pred);
        values[Metric::Auprc.index()] = de::auprc(labels, &scores_pred);
        rows.push(PerturbationMetrics {
            condition: input.condition,
            values,
            n_de_true: p.de_true.n_significant(),
            n_de_pred: p.de_pred.n_significant(),
            scores_true: p.de_true.scores(),
            scores_pred,
        });
    }

    let mut means = [None; NUM_METRICS];
    let mut skipped = [0; NUM_METRICS];
    for m in Metric::ALL {
        let (mean, skip) = metrics::mean_defined(rows.iter().map(|r| r.get(m)));
        means[m.index()] = mean;
        skipped[m.index()] = skip;
    }
    let n_true: Vec<usize> = rows.iter().map(|r| r.n_de_true).collect();
    let n_pred: Vec<usize> = rows.iter().map(|r| r.n_de_pred).collect();
    let effect_size = de::effect_size_corr(&n_true, &n_pred);
    Ok(MetricReport { per_perturbation: rows, means, skipped, effect_size })
}
