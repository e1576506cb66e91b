//! Glue between datasets and the model: batch sources for training, per-condition
//! sampling, and the truth sets used for evaluation.

use celldiff_core::data::{sample_batch, CellFilter, Dataset, Split};
use celldiff_core::denoiser::{Condition, Denoiser, ModelConfig};
use celldiff_core::diffusion::{sample, NoiseSchedule, SamplerConfig, X0Predictor};
use celldiff_core::eval::{evaluate, metrics, EvalConfig, EvalInput, MetricReport};
use celldiff_core::rng::{derive_seed, seeded, SimRng};
use celldiff_core::train::{loss_value, LossWeights, StepPlan, TrainBatch};
use celldiff_core::{Error, Matrix, Result};
use rand::Rng;
use rayon::prelude::*;

/// Draws training batches of `m` perturbed cells plus `m` controls of the same context.
#[derive(Debug, Clone)]
pub struct BatchSource<'a> {
    ds: &'a Dataset,
    conditions: Vec<Condition>,
    m: usize,
    marginal: bool,
}

impl<'a> BatchSource<'a> {
    /// Uniform over the training conditions of `ds`.
    pub fn conditional(ds: &'a Dataset, m: usize) -> Result<Self> {
        let conditions = ds.conditions(Split::Train);
        if conditions.is_empty() {
            return Err(Error::NoMatchingCells("no training conditions".into()));
        }
        Ok(Self { ds, conditions, m, marginal: false })
    }

    /// Uniform over contexts; cells are drawn from every training cell of the context.
    pub fn marginal(ds: &'a Dataset, m: usize) -> Result<Self> {
        let mut contexts: Vec<usize> =
            ds.meta().iter().filter(|c| c.split == Split::Train).map(|c| c.context).collect();
        contexts.sort_unstable();
        contexts.dedup();
        if contexts.is_empty() {
            return Err(Error::NoMatchingCells("no training cells".into()));
        }
        let conditions = contexts.into_iter().map(Condition::context_only).collect();
        Ok(Self { ds, conditions, m, marginal: true })
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn draw(&self, rng: &mut SimRng) -> Result<TrainBatch> {
        let cond = self.conditions[rng.random_range(0..self.conditions.len())];
        let filter = if self.marginal {
            CellFilter { context: Some(cond.context), split: Some(Split::Train), ..Default::default() }
        } else {
            CellFilter::condition(&cond, Split::Train)
        };
        let b_pert = sample_batch(self.ds, &filter, self.m, rng)?;
        let b_ctrl = if self.marginal {
            Matrix::zeros(self.m, self.ds.genes.len())
        } else {
            sample_batch(self.ds, &self.ds.control_filter(cond.context)?, self.m, rng)?
        };
        Ok(TrainBatch { b_pert, b_ctrl, cond })
    }
}

/// Model shape matching a dataset's vocabularies.
pub fn model_config_for(ds: &Dataset, width: usize, blocks: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        genes: ds.genes.len(),
        width,
        blocks,
        heads,
        self_condition: true,
        contexts: ds.contexts.len(),
        perturbations: ds.perturbations.len(),
        doses: ds.doses.len(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictConfig {
    /// Cells per generated batch.
    pub batch: usize,
    pub sampler: SamplerConfig,
    /// Replace the perturbation (and dose) by the null token.
    pub zero_shot: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { batch: 64, sampler: SamplerConfig::default(), zero_shot: false }
    }
}

/// `n` generated cells for `cond`, built from `ceil(n / batch)` batches.
/// `stream` keeps different conditions on independent random streams.
pub fn predict_condition<M: X0Predictor + ?Sized>(
    model: &M,
    ds: &Dataset,
    cond: &Condition,
    n: usize,
    cfg: &PredictConfig,
    schedule: &NoiseSchedule,
    stream: u64,
) -> Result<Matrix> {
    if cfg.batch == 0 || n == 0 {
        return Err(celldiff_core::Error::InvalidArgument("cell counts must be positive".into()));
    }
    let base = derive_seed(cfg.sampler.seed, stream);
    let used = if cfg.zero_shot { Condition { perturbation: None, dose: None, ..*cond } } else { *cond };
    let ctrl_filter = ds.control_filter(cond.context)?;
    let mut out: Option<Matrix> = None;
    for rep in 0..n.div_ceil(cfg.batch) {
        let seed = derive_seed(base, rep as u64);
        let b_ctrl = sample_batch(ds, &ctrl_filter, cfg.batch, &mut seeded(derive_seed(seed, 0)))?;
        let sampler = SamplerConfig { seed: derive_seed(seed, 1), ..cfg.sampler.clone() };
        let cells = sample(model, &used, &b_ctrl, &sampler, schedule)?;
        out = Some(match out {
            None => cells,
            Some(acc) => acc.vstack(&cells)?,
        });
    }
    let all = out.expect("at least one batch");
    Ok(all.select_rows(&(0..n).collect::<Vec<_>>()))
}

/// Predictions for many conditions in parallel; each gets `count(cond)` cells.
pub fn predict_conditions(
    model: &Denoiser,
    ds: &Dataset,
    conditions: &[Condition],
    count: impl Fn(&Condition) -> usize + Sync,
    cfg: &PredictConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<(Condition, Matrix)>> {
    conditions
        .par_iter()
        .enumerate()
        .map(|(i, c)| Ok((*c, predict_condition(model, ds, c, count(c), cfg, schedule, i as u64)?)))
        .collect()
}

/// True perturbed cells for every condition in `split`.
pub fn truth_sets(ds: &Dataset, split: Split) -> Vec<(Condition, Matrix)> {
    ds.conditions(split).into_iter().map(|c| (c, ds.cells(&CellFilter::condition(&c, split)))).collect()
}

/// Builds evaluation inputs with each condition's context controls.
pub fn eval_inputs(ds: &Dataset, truth: Vec<(Condition, Matrix)>, pred: Vec<(Condition, Matrix)>) -> Result<Vec<EvalInput>> {
    celldiff_core::eval::pair_inputs(truth, pred, |c| Ok(ds.cells(&ds.control_filter(c.context)?)))
}

/// Mean Pearson delta correlation of the model's predictions on `split`,
/// one generated batch per condition. Used as the checkpoint-selection score.
pub fn pdcorr_score(
    model: &Denoiser,
    ds: &Dataset,
    split: Split,
    cfg: &PredictConfig,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let truth = truth_sets(ds, split);
    if truth.is_empty() {
        return Err(Error::NoMatchingCells(format!("no {} conditions to score", split.as_str())));
    }
    let conds: Vec<Condition> = truth.iter().map(|(c, _)| *c).collect();
    let pred = predict_conditions(model, ds, &conds, |_| cfg.batch, cfg, schedule)?;
    let mut values = Vec::with_capacity(truth.len());
    for ((cond, t), (_, p)) in truth.iter().zip(&pred) {
        let ctrl = ds.cells(&ds.control_filter(cond.context)?);
        let dt = metrics::pseudobulk_delta(t, &ctrl)?;
        let dp = metrics::pseudobulk_delta(p, &ctrl)?;
        values.push(metrics::delta_correlation(&dp, &dt));
    }
    Ok(metrics::mean_defined(values).0.unwrap_or(f64::NAN))
}

/// Full metric report for the model on `split`, one generated batch per condition.
pub fn validation_report(
    model: &Denoiser,
    ds: &Dataset,
    split: Split,
    cfg: &PredictConfig,
    schedule: &NoiseSchedule,
    eval: &EvalConfig,
) -> Result<MetricReport> {
    let truth = truth_sets(ds, split);
    if truth.is_empty() {
        return Err(Error::NoMatchingCells(format!("no {} conditions to score", split.as_str())));
    }
    let conds: Vec<Condition> = truth.iter().map(|(c, _)| *c).collect();
    let pred = predict_conditions(model, ds, &conds, |_| cfg.batch, cfg, schedule)?;
    evaluate(&eval_inputs(ds, truth, pred)?, eval)
}

/// Keeps a `fraction` of each training condition's perturbed cells (at least one);
/// controls and other splits are untouched.
pub fn downsample_training(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument("fraction must lie in (0, 1]".into()));
    }
    let ctrl = ds.control_id();
    let mut keep: Vec<usize> = (0..ds.len())
        .filter(|&i| {
            let m = &ds.meta()[i];
            m.split != Split::Train || Some(m.perturbation) == ctrl
        })
        .collect();
    for (i, cond) in ds.conditions(Split::Train).iter().enumerate() {
        let idx = ds.indices(&CellFilter::condition(cond, Split::Train));
        let n = ((idx.len() as f64 * fraction).ceil() as usize).clamp(1, idx.len());
        let mut rng = seeded(derive_seed(seed, i as u64));
        keep.extend(rand::seq::index::sample(&mut rng, idx.len(), n).into_iter().map(|k| idx[k]));
    }
    keep.sort_unstable();
    Ok(ds.select_cells(&keep))
}

/// Fixed batches and noise draws for a reproducible held-out loss.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    items: Vec<(TrainBatch, StepPlan)>,
}

impl ValidationSet {
    /// `count` batches from `split` (training cells when the split is empty).
    pub fn new(
        ds: &Dataset,
        split: Split,
        m: usize,
        count: usize,
        marginal: bool,
        seed: u64,
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        let mut rng = seeded(seed);
        let conditions = if ds.conditions(split).is_empty() { ds.conditions(Split::Train) } else { ds.conditions(split) };
        let split = if ds.conditions(split).is_empty() { Split::Train } else { split };
        if conditions.is_empty() {
            return Err(Error::NoMatchingCells("no conditions for validation".into()));
        }
        let mut items = Vec::with_capacity(count);
        for i in 0..count {
            let cond = conditions[i % conditions.len()];
            let b_pert = if marginal {
                sample_batch(ds, &CellFilter { context: Some(cond.context), ..Default::default() }, m, &mut rng)?
            } else {
                sample_batch(ds, &CellFilter::condition(&cond, split), m, &mut rng)?
            };
            let b_ctrl = sample_batch(ds, &ds.control_filter(cond.context)?, m, &mut rng)?;
            let mut batch = TrainBatch { b_pert, b_ctrl, cond };
            if marginal {
                batch = batch.marginal();
            }
            let t = rng.random_range(1..=schedule.steps());
            let eps = celldiff_core::rng::normal_matrix(&mut rng, m, ds.genes.len());
            items.push((batch, StepPlan { t, eps, drop_condition: false, self_condition: false }));
        }
        Ok(Self { items })
    }

    /// Mean total loss of `model` over the fixed batches.
    pub fn loss(&self, model: &Denoiser, weights: LossWeights, schedule: &NoiseSchedule) -> Result<f64> {
        let mut total = 0.0;
        for (batch, plan) in &self.items {
            total += loss_value(&model.config, &model.params, batch, plan, weights, schedule, None)?.total;
        }
        Ok(total / self.items.len() as f64)
    }
}
