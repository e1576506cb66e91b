//! Per-gene differential expression and the metrics that compare two DE tables.

use alloc::vec::Vec;

use super::stats::{bh_adjust, spearman, wilcoxon_rank_sum};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Pseudocount in the log fold change.
pub const LFC_EPS: f64 = 1e-8;
/// Adjusted p-value below which a gene counts as differentially expressed.
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct DeResult {
    pub p_values: Vec<f64>,
    pub p_adj: Vec<f64>,
    pub log_fc: Vec<f64>,
    pub significant: Vec<bool>,
}

pub fn log_fold_change(pert_mean: f64, ctrl_mean: f64) -> f64 {
    libm::log2((pert_mean + LFC_EPS) / (ctrl_mean + LFC_EPS))
}

/// Wilcoxon rank-sum per gene, BH-adjusted across genes.
pub fn de_analysis(pert: &Matrix, ctrl: &Matrix) -> Result<DeResult> {
    if pert.cols() != ctrl.cols() {
        return Err(Error::ShapeMismatch {
            op: "de_analysis",
            lhs: alloc::vec![pert.rows(), pert.cols()],
            rhs: alloc::vec![ctrl.rows(), ctrl.cols()],
        });
    }
    if pert.rows() == 0 || ctrl.rows() == 0 {
        return Err(Error::Empty("de_analysis needs cells on both sides".into()));
    }
    let pm = pert.column_means();
    let cm = ctrl.column_means();
    let mut p_values = Vec::with_capacity(pert.cols());
    for g in 0..pert.cols() {
        p_values.push(wilcoxon_rank_sum(&pert.column(g), &ctrl.column(g)));
    }
    let p_adj = bh_adjust(&p_values);
    let log_fc = pm.iter().zip(&cm).map(|(&a, &b)| log_fold_change(a, b)).collect();
    let significant = p_adj.iter().map(|&q| q < SIGNIFICANCE).collect();
    Ok(DeResult { p_values, p_adj, log_fc, significant })
}

impl DeResult {
    pub fn genes(&self) -> usize {
        self.p_values.len()
    }

    pub fn n_significant(&self) -> usize {
        self.significant.iter().filter(|&&s| s).count()
    }

    /// `-log10(p_adj)`, with zero p-values floored at the smallest normal float.
    pub fn scores(&self) -> Vec<f64> {
        self.p_adj.iter().map(|&q| -libm::log10(q.max(f64::MIN_POSITIVE))).collect()
    }

    pub fn significant_genes(&self) -> Vec<usize> {
        (0..self.genes()).filter(|&g| self.significant[g]).collect()
    }

    /// The `k` significant genes with largest `|logFC|` (ties to the lower index).
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut sig = self.significant_genes();
        sig.sort_by(|&a, &b| self.log_fc[b].abs().total_cmp(&self.log_fc[a].abs()).then(a.cmp(&b)));
        sig.truncate(k);
        sig
    }
}

fn overlap(a: &[usize], b: &[usize]) -> usize {
    a.iter().filter(|g| b.contains(g)).count()
}

/// `(DEOver, DEPrec)`. Each is `None` when its `k` is zero.
pub fn de_overlap_precision(truth: &DeResult, pred: &DeResult) -> (Option<f64>, Option<f64>) {
    let k_true = truth.n_significant();
    let k_pred = pred.n_significant();
    let over = (k_true > 0).then(|| overlap(&truth.top_k(k_true), &pred.top_k(k_true)) as f64 / k_true as f64);
    let prec = (k_pred > 0).then(|| overlap(&truth.top_k(k_pred), &pred.top_k(k_pred)) as f64 / k_pred as f64);
    (over, prec)
}

/// Fraction of jointly significant genes whose fold changes share a sign.
pub fn direction_agreement(truth: &DeResult, pred: &DeResult) -> Option<f64> {
    let shared: Vec<usize> = (0..truth.genes()).filter(|&g| truth.significant[g] && pred.significant[g]).collect();
    if shared.is_empty() {
        return None;
    }
    let agree = shared.iter().filter(|&&g| sign(truth.log_fc[g]) == sign(pred.log_fc[g])).count();
    Some(agree as f64 / shared.len() as f64)
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Spearman of fold changes over the genes significant in the truth.
pub fn lfc_spearman(truth: &DeResult, pred: &DeResult) -> Option<f64> {
    let genes = truth.significant_genes();
    let a: Vec<f64> = genes.iter().map(|&g| truth.log_fc[g]).collect();
    let b: Vec<f64> = genes.iter().map(|&g| pred.log_fc[g]).collect();
    spearman(&a, &b)
}

/// Probability a positive outscores a negative, ties counting one half.
/// `None` unless both classes are present.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 || labels.len() != scores.len() {
        return None;
    }
    let ranks = super::stats::average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// Average precision: `Σ (R_n − R_{n−1}) P_n` over distinct score thresholds, descending.
pub fn auprc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() || labels.len() != scores.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            seen += 1;
            tp += labels[k] as usize;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Some(ap)
}

/// Spearman between true and predicted DE-gene counts across perturbations.
pub fn effect_size_corr(true_counts: &[usize], pred_counts: &[usize]) -> Option<f64> {
    if true_counts.len() < 2 {
        return None;
    }
    let a: Vec<f64> = true_counts.iter().map(|&c| c as f64).collect();
    let b: Vec<f64> = pred_counts.iter().map(|&c| c as f64).collect();
    spearman(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, seeded, SimRng};
    use alloc::vec;
    use proptest::prelude::*;
    use rand::Rng;

    fn table(log_fc: Vec<f64>, significant: Vec<bool>) -> DeResult {
        let n = log_fc.len();
        DeResult { p_values: vec![0.5; n], p_adj: vec![0.5; n], log_fc, significant }
    }

    #[test]
    fn identical_samples_have_no_de() {
        let x = normal_matrix(&mut seeded(1), 4, 6).map(f64::abs);
        let de = de_analysis(&x, &x).unwrap();
        assert_eq!(de.n_significant(), 0);
        assert!(de.p_values.iter().all(|&p| p == 1.0));
        assert!(de.log_fc.iter().all(|&l| l == 0.0));
        let zeros = Matrix::zeros(3, 2);
        let de = de_analysis(&zeros, &zeros).unwrap();
        assert_eq!(de.log_fc, vec![0.0, 0.0]);
    }

    #[test]
    fn planted_shift_is_found() {
        let mut rng = seeded(5);
        let ctrl = normal_matrix(&mut rng, 50, 20);
        let mut pert = normal_matrix(&mut rng, 50, 20);
        for r in 0..50 {
            let v = pert.get(r, 7);
            pert.set(r, 7, v + 10.0);
        }
        let de = de_analysis(&pert, &ctrl).unwrap();
        assert!(de.significant[7]);
        assert!(de.p_adj.iter().zip(&de.p_values).all(|(q, p)| q >= p));
    }

    #[test]
    fn overlap_examples() {
        let t = table(vec![4.0, -3.0, 2.0, 1.0, 0.1, 0.0], vec![true, true, true, true, false, false]);
        assert_eq!(de_overlap_precision(&t, &t), (Some(1.0), Some(1.0)));
        // prediction's top-4 shares genes 0 and 2 with the truth's top-4
        let p = table(vec![5.0, 0.0, 3.0, 0.0, 2.0, 1.0], vec![true, false, true, false, true, true]);
        let (over, prec) = de_overlap_precision(&t, &p);
        assert_eq!(over, Some(0.5));
        assert_eq!(prec, Some(0.5));
        let d = table(vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0], vec![false, false, false, false, true, true]);
        assert_eq!(de_overlap_precision(&t, &d), (Some(0.0), Some(0.0)));
        let none = table(vec![0.0; 6], vec![false; 6]);
        assert_eq!(de_overlap_precision(&none, &t), (None, Some(0.0)));
    }

    #[test]
    fn precision_uses_predicted_k() {
        let t = table(vec![4.0, 3.0, 2.0, 1.0], vec![true; 4]);
        let p = table(vec![9.0, 0.0, 0.0, 0.0], vec![true, false, false, false]);
        // k = 1: truth top-1 = {0}, pred top-1 = {0}
        assert_eq!(de_overlap_precision(&t, &p), (Some(0.25), Some(1.0)));
    }

    #[test]
    fn direction_and_spearman() {
        let t = table(vec![1.0, -2.0, 3.0, 0.5], vec![true, true, true, false]);
        assert_eq!(direction_agreement(&t, &t), Some(1.0));
        assert!((lfc_spearman(&t, &t).unwrap() - 1.0).abs() < 1e-15);
        let neg = table(t.log_fc.iter().map(|v| -v).collect(), t.significant.clone());
        assert_eq!(direction_agreement(&t, &neg), Some(0.0));
        assert!((lfc_spearman(&t, &neg).unwrap() + 1.0).abs() < 1e-15);
        let flat = table(vec![2.0; 4], vec![true; 4]);
        assert_eq!(lfc_spearman(&t, &flat), None);
        let none = table(vec![0.0; 4], vec![false; 4]);
        assert_eq!(direction_agreement(&t, &none), None);
    }

    fn pair_oracle(labels: &[bool], scores: &[f64]) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }

    #[test]
    fn auroc_examples() {
        let labels = [true, true, false, false, true, false];
        let scores = [3.0, 0.5, 1.0, 0.2, 2.0, 1.0];
        assert_eq!(auroc(&labels, &scores), pair_oracle(&labels, &scores));
        assert_eq!(auroc(&labels, &scores), Some(7.0 / 9.0));
        assert_eq!(auroc(&labels, &[1.0; 6]), Some(0.5));
        assert_eq!(auroc(&[true, false], &[1.0, 0.0]), Some(1.0));
        assert_eq!(auroc(&[true, true], &[1.0, 0.0]), None);
    }

    #[test]
    fn auroc_matches_pair_enumeration_exhaustively() {
        let mut rng = seeded(8);
        for n in 2..=12usize {
            for mask in 1u32..(1 << n) - 1 {
                let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
                let a = auroc(&labels, &scores).unwrap();
                let b = pair_oracle(&labels, &scores).unwrap();
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[true, false, true, false], &[4.0, 1.0, 3.0, 2.0]), Some(1.0));
        // ranking: pos, neg, pos -> AP = 0.5*1 + 0.5*(2/3)
        let ap = auprc(&[true, false, true], &[3.0, 2.0, 1.0]).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
        // a single threshold: precision equals prevalence
        assert!((auprc(&[true, false, false, false], &[1.0; 4]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(auprc(&[false, false], &[1.0, 2.0]), None);
    }

    #[test]
    fn effect_size_examples() {
        assert_eq!(effect_size_corr(&[1, 5, 3], &[1, 5, 3]), Some(1.0));
        assert!((effect_size_corr(&[1, 2, 3], &[9, 4, 0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(effect_size_corr(&[1, 2, 3], &[4, 4, 4]), None);
        assert_eq!(effect_size_corr(&[1], &[1]), None);
    }

    #[test]
    fn bounded_metrics_fuzz() {
        let mut rng: SimRng = seeded(21);
        for _ in 0..10_000 {
            let n = rng.random_range(2..16);
            let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
            for v in [auroc(&labels, &scores), auprc(&labels, &scores)].into_iter().flatten() {
                assert!((0.0..=1.0).contains(&v));
            }
            let lfc = |rng: &mut SimRng| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
            let t = table(lfc(&mut rng), labels.clone());
            let p = table(lfc(&mut rng), (0..n).map(|_| rng.random_bool(0.4)).collect());
            let (o, pr) = de_overlap_precision(&t, &p);
            for v in [o, pr, direction_agreement(&t, &p)].into_iter().flatten() {
                assert!((0.0..=1.0).contains(&v));
            }
            if let Some(s) = lfc_spearman(&t, &p) {
                assert!((-1.0..=1.0).contains(&s));
            }
        }
    }

    proptest! {
        #[test]
        fn scores_follow_adjusted_p(seed in 0u64..200) {
            let mut rng = seeded(seed);
            let a = normal_matrix(&mut rng, 12, 5);
            let b = normal_matrix(&mut rng, 9, 5);
            let de = de_analysis(&a, &b).unwrap();
            for (s, q) in de.scores().iter().zip(&de.p_adj) {
                prop_assert!(*s >= 0.0);
                prop_assert!((libm::pow(10.0, -s) - q).abs() < 1e-12);
            }
        }
    }
}
