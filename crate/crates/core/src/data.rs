//! Cell-level datasets, the synthetic perturbation generator, preprocessing,
//! highly-variable-gene selection and batch sampling.
//!
//! Expression values are stored at single precision (as `f64` holding an
//! `f32`-representable value) so text round-trips are exact.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::denoiser::Condition;
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::rng::{normal_matrix, seeded, standard_normal, SimRng};

/// Perturbation label of unperturbed control cells.
pub const CONTROL_LABEL: &str = "ctrl";

/// Library size every cell is scaled to before `log1p`.
pub const TARGET_SUM: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
    /// Generated cells.
    Pred,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
            Split::Pred => "pred",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "train" => Split::Train,
            "valid" => Split::Valid,
            "test" => Split::Test,
            "pred" => Split::Pred,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMeta {
    pub cell_id: String,
    pub context: usize,
    pub perturbation: usize,
    pub dose: Option<usize>,
    /// Replicate / experimental batch.
    pub replicate: usize,
    pub split: Split,
    /// Free-form origin tag for generated cells.
    pub provenance: Option<String>,
}

/// Cells plus vocabularies. Ids in [`CellMeta`] index the vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub genes: Vec<String>,
    pub contexts: Vec<String>,
    pub perturbations: Vec<String>,
    pub doses: Vec<String>,
    expression: Matrix,
    meta: Vec<CellMeta>,
}

/// Selects cells by any combination of fields; `None` matches everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CellFilter {
    pub context: Option<usize>,
    pub perturbation: Option<usize>,
    pub dose: Option<Option<usize>>,
    pub split: Option<Split>,
}

impl CellFilter {
    pub fn matches(&self, m: &CellMeta) -> bool {
        self.context.is_none_or(|c| c == m.context)
            && self.perturbation.is_none_or(|p| p == m.perturbation)
            && self.dose.is_none_or(|d| d == m.dose)
            && self.split.is_none_or(|s| s == m.split)
    }

    /// Cells of one condition (perturbation and dose) in one split.
    pub fn condition(cond: &Condition, split: Split) -> Self {
        Self { context: Some(cond.context), perturbation: cond.perturbation, dose: Some(cond.dose), split: Some(split) }
    }
}

fn quantize(m: Matrix) -> Matrix {
    m.map(|v| v as f32 as f64)
}

impl Dataset {
    /// Validates ids and shapes; expression is rounded to single precision.
    pub fn new(
        genes: Vec<String>,
        contexts: Vec<String>,
        perturbations: Vec<String>,
        doses: Vec<String>,
        expression: Matrix,
        meta: Vec<CellMeta>,
    ) -> Result<Self> {
        if expression.rows() != meta.len() {
            return Err(invalid(format!(
                "expression has {} rows but metadata has {}",
                expression.rows(),
                meta.len()
            )));
        }
        if expression.cols() != genes.len() {
            return Err(invalid(format!(
                "expression has {} columns but {} gene names",
                expression.cols(),
                genes.len()
            )));
        }
        if !expression.is_finite() {
            return Err(Error::NonFinite("expression values".into()));
        }
        for m in &meta {
            if m.context >= contexts.len() {
                return Err(Error::OutOfVocabulary { kind: "context", id: m.context, size: contexts.len() });
            }
            if m.perturbation >= perturbations.len() {
                return Err(Error::OutOfVocabulary {
                    kind: "perturbation",
                    id: m.perturbation,
                    size: perturbations.len(),
                });
            }
            if let Some(d) = m.dose {
                if d >= doses.len() {
                    return Err(Error::OutOfVocabulary { kind: "dose", id: d, size: doses.len() });
                }
            }
        }
        let ds = Self { genes, contexts, perturbations, doses, expression: quantize(expression), meta };
        ds.check_split_integrity()?;
        Ok(ds)
    }

    fn check_split_integrity(&self) -> Result<()> {
        let mut train = BTreeSet::new();
        let mut test = BTreeSet::new();
        for m in &self.meta {
            match m.split {
                Split::Train => train.insert((m.context, m.perturbation)),
                Split::Test => test.insert((m.context, m.perturbation)),
                _ => false,
            };
        }
        if let Some(&(c, p)) = train.intersection(&test).next() {
            return Err(Error::InfeasibleSplit(format!(
                "condition ({}, {}) has cells in both train and test",
                self.contexts[c], self.perturbations[p]
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn expression(&self) -> &Matrix {
        &self.expression
    }

    pub fn meta(&self) -> &[CellMeta] {
        &self.meta
    }

    pub fn control_id(&self) -> Option<usize> {
        self.perturbations.iter().position(|p| p == CONTROL_LABEL)
    }

    pub fn context_id(&self, name: &str) -> Option<usize> {
        self.contexts.iter().position(|c| c == name)
    }

    pub fn perturbation_id(&self, name: &str) -> Option<usize> {
        self.perturbations.iter().position(|c| c == name)
    }

    pub fn indices(&self, filter: &CellFilter) -> Vec<usize> {
        self.meta.iter().enumerate().filter(|(_, m)| filter.matches(m)).map(|(i, _)| i).collect()
    }

    pub fn cells(&self, filter: &CellFilter) -> Matrix {
        self.expression.select_rows(&self.indices(filter))
    }

    /// Distinct non-control conditions with cells in `split`, in sorted order.
    pub fn conditions(&self, split: Split) -> Vec<Condition> {
        let ctrl = self.control_id();
        let set: BTreeSet<(usize, usize, Option<usize>)> = self
            .meta
            .iter()
            .filter(|m| m.split == split && Some(m.perturbation) != ctrl)
            .map(|m| (m.context, m.perturbation, m.dose))
            .collect();
        set.into_iter().map(|(c, p, d)| Condition::new(c, p, d)).collect()
    }

    /// Control cells of `context` (any split).
    pub fn control_filter(&self, context: usize) -> Result<CellFilter> {
        let ctrl = self.control_id().ok_or_else(|| invalid("dataset has no control perturbation"))?;
        Ok(CellFilter { context: Some(context), perturbation: Some(ctrl), ..Default::default() })
    }

    /// Keeps genes `idx`, in that order.
    pub fn select_genes(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.genes.len()) {
            return Err(Error::OutOfVocabulary { kind: "gene", id: bad, size: self.genes.len() });
        }
        Ok(Self {
            genes: idx.iter().map(|&i| self.genes[i].clone()).collect(),
            expression: self.expression.select_cols(idx),
            ..self.clone()
        })
    }

    /// Keeps cells `idx`, in that order.
    pub fn select_cells(&self, idx: &[usize]) -> Self {
        Self {
            expression: self.expression.select_rows(idx),
            meta: idx.iter().map(|&i| self.meta[i].clone()).collect(),
            ..self.clone()
        }
    }

    /// Number of cells per split, in `Split` order.
    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut out = BTreeMap::new();
        for m in &self.meta {
            *out.entry(m.split).or_insert(0) += 1;
        }
        out
    }
}

/// `m` cells matching `filter`: without replacement when enough exist, with replacement otherwise.
pub fn sample_batch(ds: &Dataset, filter: &CellFilter, m: usize, rng: &mut SimRng) -> Result<Matrix> {
    let idx = ds.indices(filter);
    if idx.is_empty() {
        return Err(Error::NoMatchingCells(format!("{filter:?}")));
    }
    let chosen: Vec<usize> = if idx.len() >= m {
        rand::seq::index::sample(rng, idx.len(), m).into_iter().map(|k| idx[k]).collect()
    } else {
        (0..m).map(|_| idx[rng.random_range(0..idx.len())]).collect()
    };
    Ok(ds.expression.select_rows(&chosen))
}

/// Library-size normalization to [`TARGET_SUM`], `log1p`, then `/10`. All-zero cells stay zero.
pub fn preprocess(raw: &Matrix) -> Result<Matrix> {
    if raw.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(invalid("raw counts must be finite and nonnegative"));
    }
    let mut out = raw.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let total: f64 = row.iter().sum();
        if total == 0.0 {
            continue;
        }
        for v in row.iter_mut() {
            *v = libm::log1p(*v * TARGET_SUM / total) / 10.0;
        }
    }
    Ok(out)
}

/// Indices (ascending) of the `k` genes with the largest variance; ties go to the lower index.
pub fn select_hvg(x: &Matrix, k: usize) -> Result<Vec<usize>> {
    if k > x.cols() {
        return Err(invalid(format!("cannot select {k} of {} genes", x.cols())));
    }
    let means = x.column_means();
    let n = x.rows().max(1) as f64;
    let mut var = vec![0.0; x.cols()];
    for row in x.iter_rows() {
        for (g, v) in row.iter().enumerate() {
            var[g] += (v - means[g]) * (v - means[g]);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    let mut order: Vec<usize> = (0..x.cols()).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    Ok(top)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub genes: usize,
    pub contexts: usize,
    /// Non-control perturbations.
    pub perturbations: usize,
    pub replicates: usize,
    pub cells_per_replicate: usize,
    pub control_cells_per_replicate: usize,
    /// Standard deviation of the per-replicate mean shift.
    pub sigma_latent: f64,
    pub effect_rank: usize,
    pub effect_scale: f64,
    /// Per-cell noise standard deviation.
    pub noise_scale: f64,
    pub zero_inflation: f64,
    /// Fraction of perturbations held out of the test contexts.
    pub holdout_fraction: f64,
    /// Number of dose bins; 0 disables doses.
    pub dose_bins: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            genes: 64,
            contexts: 8,
            perturbations: 20,
            replicates: 3,
            cells_per_replicate: 24,
            control_cells_per_replicate: 48,
            sigma_latent: 0.05,
            effect_rank: 4,
            effect_scale: 0.5,
            noise_scale: 0.15,
            zero_inflation: 0.0,
            holdout_fraction: 0.3,
            dose_bins: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.genes == 0 || self.contexts == 0 || self.perturbations == 0 || self.replicates == 0 {
            return Err(invalid("genes, contexts, perturbations and replicates must be positive"));
        }
        if self.cells_per_replicate == 0 || self.control_cells_per_replicate == 0 || self.effect_rank == 0 {
            return Err(invalid("cell counts and effect rank must be positive"));
        }
        if !(0.0..1.0).contains(&self.zero_inflation) {
            return Err(invalid("zero-inflation rate must lie in [0, 1)"));
        }
        if self.sigma_latent < 0.0 || self.noise_scale < 0.0 || self.effect_scale < 0.0 {
            return Err(invalid("scales must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.holdout_fraction) {
            return Err(invalid("holdout fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Number of perturbations held out of the test contexts.
    pub fn holdout_count(&self) -> Result<usize> {
        let n = libm::round(self.holdout_fraction * self.perturbations as f64) as usize;
        let n = n.max(1);
        if n >= self.perturbations {
            return Err(Error::InfeasibleSplit(format!(
                "holding out {n} of {} perturbations leaves none for training",
                self.perturbations
            )));
        }
        Ok(n)
    }
}

/// Split layout of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub test_contexts: Vec<usize>,
    pub held_out: Vec<usize>,
    /// Validation context for each held-out perturbation, if any context is spare.
    pub valid_context: BTreeMap<usize, usize>,
}

impl SplitPlan {
    pub fn split_of(&self, context: usize, perturbation: usize) -> Split {
        if !self.held_out.contains(&perturbation) {
            return Split::Train;
        }
        if self.test_contexts.contains(&context) {
            Split::Test
        } else if self.valid_context.get(&perturbation) == Some(&context) {
            Split::Valid
        } else {
            Split::Train
        }
    }
}

fn plan_splits(cfg: &SynthConfig, rng: &mut SimRng) -> Result<SplitPlan> {
    let n_hold = cfg.holdout_count()?;
    let mut perts: Vec<usize> = (0..cfg.perturbations).collect();
    perts.shuffle(rng);
    let mut held_out = perts[..n_hold].to_vec();
    held_out.sort_unstable();
    let mut ctxs: Vec<usize> = (0..cfg.contexts).collect();
    ctxs.shuffle(rng);
    let n_test = cfg.contexts.div_ceil(2);
    let mut test_contexts = ctxs[..n_test].to_vec();
    test_contexts.sort_unstable();
    let spare: Vec<usize> = ctxs[n_test..].to_vec();
    let mut valid_context = BTreeMap::new();
    if spare.len() >= 2 {
        for (k, &p) in held_out.iter().enumerate() {
            valid_context.insert(p, spare[k % spare.len()]);
        }
    }
    Ok(SplitPlan { test_contexts, held_out, valid_context })
}

/// Ground-truth parameters behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    /// `contexts × G` baseline means.
    pub base: Matrix,
    /// `perturbations × G` context-free effects.
    pub effects: Matrix,
    /// Per-context effect multiplier.
    pub sensitivity: Vec<f64>,
    pub plan: SplitPlan,
}

/// Generates a dataset and returns the generating parameters alongside it.
///
/// Condition mean: `base_c + κ_c·s_d·e_τ` with `e_τ = V a_τ` low rank and
/// sparse in genes, `s_d` a dose scale. Every replicate adds its own
/// `z ~ N(0, σ_latent² I)`. Cells are `relu(mean + z + noise)` followed by
/// independent zero-masking.
pub fn generate_synthetic_with_truth(cfg: &SynthConfig) -> Result<(Dataset, SynthTruth)> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let plan = plan_splits(cfg, &mut rng)?;
    let g = cfg.genes;

    let gene_level: Vec<f64> = (0..g).map(|_| rng.random_range(0.2..0.8)).collect();
    let mut base = normal_matrix(&mut rng, cfg.contexts, g).scale(0.15);
    for c in 0..cfg.contexts {
        for (j, lvl) in gene_level.iter().enumerate() {
            base.set(c, j, (base.get(c, j) + lvl).max(0.0));
        }
    }
    let mut programs = normal_matrix(&mut rng, g, cfg.effect_rank);
    for v in programs.data_mut() {
        if rng.random::<f64>() >= 0.3 {
            *v = 0.0;
        }
    }
    let loadings = normal_matrix(&mut rng, cfg.perturbations, cfg.effect_rank);
    let norm = 1.0 / libm::sqrt(0.3 * cfg.effect_rank as f64);
    let effects = loadings.matmul(&programs.transpose())?.scale(cfg.effect_scale * norm);
    let sensitivity: Vec<f64> = (0..cfg.contexts).map(|_| rng.random_range(0.6..1.4)).collect();

    let ctrl_name = CONTROL_LABEL.to_string();
    let mut pert_names: Vec<String> = (0..cfg.perturbations).map(|p| format!("P{p:02}")).collect();
    pert_names.push(ctrl_name);
    pert_names.sort();
    let pert_id = |name: &str| pert_names.iter().position(|n| n == name).expect("known name");
    let ctrl_id = pert_id(CONTROL_LABEL);
    let contexts: Vec<String> = (0..cfg.contexts).map(|c| format!("C{c}")).collect();
    let genes: Vec<String> = (0..g).map(|j| format!("G{j:03}")).collect();
    let doses: Vec<String> = (0..cfg.dose_bins).map(|d| format!("D{d}")).collect();

    let mut rows: Vec<f64> = Vec::new();
    let mut meta = Vec::new();
    let mut emit = |rng: &mut SimRng, mean: &[f64], n: usize, mut cell: CellMeta, rows: &mut Vec<f64>| {
        let shift: Vec<f64> = (0..g).map(|_| cfg.sigma_latent * standard_normal(rng)).collect();
        for _ in 0..n {
            for j in 0..g {
                let v = (mean[j] + shift[j] + cfg.noise_scale * standard_normal(rng)).max(0.0);
                let masked = cfg.zero_inflation > 0.0 && rng.random::<f64>() < cfg.zero_inflation;
                rows.push(if masked { 0.0 } else { v });
            }
            cell.cell_id = format!("cell{:06}", meta.len());
            meta.push(cell.clone());
        }
    };

    for c in 0..cfg.contexts {
        for r in 0..cfg.replicates {
            let cell = CellMeta {
                cell_id: String::new(),
                context: c,
                perturbation: ctrl_id,
                dose: None,
                replicate: r,
                split: Split::Train,
                provenance: None,
            };
            emit(&mut rng, base.row(c), cfg.control_cells_per_replicate, cell, &mut rows);
        }
        for p in 0..cfg.perturbations {
            let id = pert_id(&format!("P{p:02}"));
            let split = plan.split_of(c, p);
            for r in 0..cfg.replicates {
                let (dose, dose_scale) = if cfg.dose_bins > 0 {
                    let bin = r % cfg.dose_bins;
                    (Some(bin), (bin + 1) as f64 / cfg.dose_bins as f64)
                } else {
                    (None, 1.0)
                };
                let k = sensitivity[c] * dose_scale;
                let mean: Vec<f64> = (0..g).map(|j| base.get(c, j) + k * effects.get(p, j)).collect();
                let cell = CellMeta {
                    cell_id: String::new(),
                    context: c,
                    perturbation: id,
                    dose,
                    replicate: r,
                    split,
                    provenance: None,
                };
                emit(&mut rng, &mean, cfg.cells_per_replicate, cell, &mut rows);
            }
        }
    }
    let n = meta.len();
    let expression = Matrix::new(n, g, rows)?;
    let ds = Dataset::new(genes, contexts, pert_names, doses, expression, meta)?;
    Ok((ds, SynthTruth { base, effects, sensitivity, plan }))
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    Ok(generate_synthetic_with_truth(cfg)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::energy_distance;

    fn small() -> SynthConfig {
        SynthConfig {
            genes: 8,
            contexts: 4,
            perturbations: 5,
            replicates: 2,
            cells_per_replicate: 6,
            control_cells_per_replicate: 8,
            ..Default::default()
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_consistent() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4 * (2 * 8 + 5 * 2 * 6));
        assert_eq!(a.expression().rows(), a.meta().len());
        assert!(a.expression().data().iter().all(|&v| v >= 0.0 && v as f32 as f64 == v));
        let c = generate_synthetic(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_layout() {
        let cfg = SynthConfig::default();
        let (ds, truth) = generate_synthetic_with_truth(&cfg).unwrap();
        assert_eq!(truth.plan.held_out.len(), 6);
        assert_eq!(truth.plan.test_contexts.len(), 4);
        assert_eq!(ds.conditions(Split::Test).len(), 24);
        assert_eq!(ds.conditions(Split::Valid).len(), 6);
        let ctrl = ds.control_id().unwrap();
        for m in ds.meta() {
            if m.perturbation == ctrl {
                assert_eq!(m.split, Split::Train);
            }
        }
        // every held-out perturbation is still seen in training somewhere
        let train = ds.conditions(Split::Train);
        for cond in ds.conditions(Split::Test) {
            assert!(train.iter().any(|t| t.perturbation == cond.perturbation));
            assert!(!train.iter().any(|t| t.perturbation == cond.perturbation && t.context == cond.context));
        }
    }

    #[test]
    fn infeasible_holdout_rejected() {
        let cfg = SynthConfig { holdout_fraction: 1.0, ..small() };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::InfeasibleSplit(_))));
        let one = SynthConfig { perturbations: 1, ..small() };
        assert!(generate_synthetic(&one).is_err());
        assert!(generate_synthetic(&SynthConfig { zero_inflation: 1.0, ..small() }).is_err());
    }

    #[test]
    fn mixed_split_condition_rejected() {
        let ds = generate_synthetic(&small()).unwrap();
        let mut meta = ds.meta().to_vec();
        let test_idx = meta.iter().position(|m| m.split == Split::Test).unwrap();
        meta[test_idx + 1].split = Split::Train;
        let err = Dataset::new(
            ds.genes.clone(),
            ds.contexts.clone(),
            ds.perturbations.clone(),
            ds.doses.clone(),
            ds.expression().clone(),
            meta,
        );
        assert!(matches!(err, Err(Error::InfeasibleSplit(_))));
    }

    #[test]
    fn zero_inflation_rate() {
        let cfg = SynthConfig {
            zero_inflation: 0.9,
            genes: 50,
            contexts: 2,
            perturbations: 4,
            replicates: 5,
            cells_per_replicate: 100,
            control_cells_per_replicate: 100,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let data = ds.expression().data();
        assert!(data.len() >= 100_000);
        let zeros = data.iter().filter(|&&v| v == 0.0).count();
        assert!(zeros as f64 >= 0.85 * data.len() as f64);
    }

    #[test]
    fn no_latent_shift_means_shared_distribution() {
        let cfg = SynthConfig { sigma_latent: 0.0, noise_scale: 0.0, ..small() };
        let ds = generate_synthetic(&cfg).unwrap();
        let cond = ds.conditions(Split::Train)[0];
        let rep = |r: usize| {
            let idx: Vec<usize> = ds
                .indices(&CellFilter::condition(&cond, Split::Train))
                .into_iter()
                .filter(|&i| ds.meta()[i].replicate == r)
                .collect();
            ds.expression().select_rows(&idx)
        };
        assert_eq!(rep(0), rep(1));
    }

    #[test]
    fn replicate_variability_is_between_condition_variability() {
        let cfg = SynthConfig { sigma_latent: 0.1, cells_per_replicate: 60, seed: 4, ..SynthConfig::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let cells = |p: usize, r: usize| {
            let idx: Vec<usize> = (0..ds.len())
                .filter(|&i| {
                    let m = &ds.meta()[i];
                    m.context == 0 && m.perturbation == p && m.replicate == r
                })
                .collect();
            ds.expression().select_rows(&idx)
        };
        let mut within = 0.0;
        let mut between = 0.0;
        for p in 0..5 {
            within += energy_distance(&cells(p, 0), &cells(p, 1)).unwrap();
            between += energy_distance(&cells(p, 0), &cells(p + 5, 0)).unwrap();
        }
        assert!(within > 0.0);
        assert!(within < 0.5 * between, "{within} vs {between}");
    }

    #[test]
    fn preprocess_examples() {
        let mut raw = Matrix::zeros(3, 3);
        raw.set(0, 0, 100.0);
        raw.set(0, 1, 9900.0);
        raw.set(2, 0, 3.0);
        raw.set(2, 2, 5.0);
        let out = preprocess(&raw).unwrap();
        assert!((out.get(0, 0) - 0.461512).abs() < 1e-5);
        assert!((out.get(0, 0) - libm::log1p(100.0) / 10.0).abs() < 1e-15);
        assert_eq!(out.row(1), &[0.0, 0.0, 0.0]);
        let doubled = preprocess(&raw.scale(2.0)).unwrap();
        assert!(out.max_abs_diff(&doubled) < 1e-15);
        let max = libm::log1p(1e4) / 10.0;
        assert!(out.data().iter().all(|&v| (0.0..=max).contains(&v)));
        assert!(preprocess(&Matrix::filled(1, 2, -1.0)).is_err());
    }

    #[test]
    fn hvg_examples() {
        let mut rng = seeded(2);
        let mut x = normal_matrix(&mut rng, 50, 6);
        for r in 0..50 {
            x.set(r, 2, 1.0);
            let v = x.get(r, 4);
            x.set(r, 4, v * 10.0);
        }
        assert_eq!(select_hvg(&x, 6).unwrap(), (0..6).collect::<Vec<_>>());
        assert!(!select_hvg(&x, 5).unwrap().contains(&2));
        assert_eq!(select_hvg(&x, 1).unwrap(), vec![4]);
        assert!(select_hvg(&x, 7).is_err());
        let flat = Matrix::filled(4, 3, 1.0);
        assert_eq!(select_hvg(&flat, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn batch_sampling() {
        let ds = generate_synthetic(&small()).unwrap();
        let cond = ds.conditions(Split::Train)[0];
        let filter = CellFilter::condition(&cond, Split::Train);
        let n = ds.indices(&filter).len();
        let a = sample_batch(&ds, &filter, n, &mut seeded(1)).unwrap();
        let b = sample_batch(&ds, &filter, n, &mut seeded(1)).unwrap();
        assert_eq!(a, b);
        let mut rows: Vec<Vec<u64>> = a.iter_rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), n);

        let single = ds.indices(&filter)[0];
        let one = ds.select_cells(&[single]);
        let all = CellFilter::default();
        let rep = sample_batch(&one, &all, 4, &mut seeded(3)).unwrap();
        for r in rep.iter_rows() {
            assert_eq!(r, one.expression().row(0));
        }
        let none = CellFilter { context: Some(99), ..Default::default() };
        assert!(matches!(sample_batch(&ds, &none, 2, &mut seeded(0)), Err(Error::NoMatchingCells(_))));
    }

    #[test]
    fn dose_bins_are_recorded() {
        let cfg = SynthConfig { dose_bins: 2, ..small() };
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.doses, vec!["D0".to_string(), "D1".to_string()]);
        let ctrl = ds.control_id().unwrap();
        assert!(ds.meta().iter().all(|m| (m.perturbation == ctrl) == m.dose.is_none()));
    }

    #[test]
    fn gene_selection_keeps_metadata() {
        let ds = generate_synthetic(&small()).unwrap();
        let sub = ds.select_genes(&[3, 1]).unwrap();
        assert_eq!(sub.genes, vec!["G003".to_string(), "G001".to_string()]);
        assert_eq!(sub.expression().column(0), ds.expression().column(3));
        assert_eq!(sub.meta(), ds.meta());
        assert!(ds.select_genes(&[8]).is_err());
    }
}
