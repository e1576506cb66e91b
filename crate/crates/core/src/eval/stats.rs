//! Rank statistics: average ranks, Pearson/Spearman, the Wilcoxon rank-sum
//! test and Benjamini-Hochberg adjustment.

use alloc::vec;
use alloc::vec::Vec;

/// Pooled sample size at or below which [`wilcoxon_rank_sum`] enumerates exactly.
pub const EXACT_LIMIT: usize = 10;

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` for fewer than two points or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Spearman correlation with average-rank ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Standard normal upper tail.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / core::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WilcoxonMode {
    /// Exact when the pooled size is at most [`EXACT_LIMIT`], normal otherwise.
    #[default]
    Auto,
    Exact,
    Normal,
}

/// Two-sided rank-sum p-value, choosing the mode automatically.
pub fn wilcoxon_rank_sum(x: &[f64], y: &[f64]) -> f64 {
    wilcoxon_rank_sum_with(x, y, WilcoxonMode::Auto)
}

pub fn wilcoxon_rank_sum_with(x: &[f64], y: &[f64], mode: WilcoxonMode) -> f64 {
    if x.is_empty() || y.is_empty() {
        return 1.0;
    }
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = average_ranks(&pooled);
    let exact = match mode {
        WilcoxonMode::Auto => pooled.len() <= EXACT_LIMIT,
        WilcoxonMode::Exact => true,
        WilcoxonMode::Normal => false,
    };
    if exact {
        exact_p(&ranks, x.len())
    } else {
        normal_p(&ranks, x.len())
    }
}

/// Enumerates every assignment of `n1` of the pooled ranks to the first sample.
fn exact_p(ranks: &[f64], n1: usize) -> f64 {
    let n = ranks.len();
    assert!(n < 31, "exact rank-sum enumeration is limited to small samples");
    let observed: f64 = ranks[..n1].iter().sum();
    let tol = 1e-9;
    let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        total += 1;
        if w <= observed + tol {
            le += 1;
        }
        if w >= observed - tol {
            ge += 1;
        }
    }
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}

/// Normal approximation with tie and continuity corrections.
fn normal_p(ranks: &[f64], n1: usize) -> f64 {
    let n = ranks.len() as f64;
    let (a, b) = (n1 as f64, n - n1 as f64);
    let w: f64 = ranks[..n1].iter().sum();
    let u = w - a * (a + 1.0) / 2.0;
    let mean = a * b / 2.0;

    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = a * b / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / libm::sqrt(var);
    (2.0 * normal_sf(z)).min(1.0)
}

/// Benjamini-Hochberg step-up adjustment, returned in input order.
pub fn bh_adjust(p: &[f64]) -> Vec<f64> {
    let n = p.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; n];
    let mut running = 1.0f64;
    for (pos, &i) in order.iter().enumerate().rev() {
        let q = p[i] * (n as f64 / (pos + 1) as f64);
        running = running.min(q);
        out[i] = running.min(1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, standard_normal};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
        assert_eq!(average_ranks(&[]), Vec::<f64>::new());
    }

    #[test]
    fn correlation_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert!((spearman(&[1.0, 5.0, 9.0], &[0.1, 0.2, 100.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]), None);
    }

    #[test]
    fn exact_examples() {
        let p = wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]);
        assert!((p - 0.1).abs() < 1e-15);
        assert_eq!(wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]), 1.0);
        assert_eq!(wilcoxon_rank_sum(&[2.0, 2.0], &[2.0, 2.0, 2.0]), 1.0);
    }

    /// Exact rank-sum distribution by brute-force subset enumeration, written
    /// independently of the bitmask loop.
    fn brute_exact(x: &[f64], y: &[f64]) -> f64 {
        let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
        let ranks = average_ranks(&pooled);
        let obs: f64 = ranks[..x.len()].iter().sum();
        fn rec(ranks: &[f64], k: usize, start: usize, acc: f64, out: &mut Vec<f64>) {
            if k == 0 {
                out.push(acc);
                return;
            }
            for i in start..ranks.len() {
                rec(ranks, k - 1, i + 1, acc + ranks[i], out);
            }
        }
        let mut sums = Vec::new();
        rec(&ranks, x.len(), 0, 0.0, &mut sums);
        let le = sums.iter().filter(|&&s| s <= obs + 1e-9).count() as f64;
        let ge = sums.iter().filter(|&&s| s >= obs - 1e-9).count() as f64;
        (2.0 * le.min(ge) / sums.len() as f64).min(1.0)
    }

    #[test]
    fn exact_matches_recursive_oracle() {
        let mut rng = seeded(11);
        for _ in 0..200 {
            let n1 = rng.random_range(1..6);
            let n2 = rng.random_range(1..6);
            let draw = |rng: &mut crate::rng::SimRng| (rng.random_range(0..6) as f64) * 0.5;
            let x: Vec<f64> = (0..n1).map(|_| draw(&mut rng)).collect();
            let y: Vec<f64> = (0..n2).map(|_| draw(&mut rng)).collect();
            let a = wilcoxon_rank_sum_with(&x, &y, WilcoxonMode::Exact);
            assert!((a - brute_exact(&x, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn normal_close_to_exact_on_balanced_eight() {
        let values: Vec<f64> = (1..=8).map(|v| v as f64 * 1.7).collect();
        let mut worst = 0.0f64;
        let mut splits = 0;
        for mask in 0u32..256 {
            if mask.count_ones() != 4 {
                continue;
            }
            let x: Vec<f64> = (0..8).filter(|i| mask >> i & 1 == 1).map(|i| values[i]).collect();
            let y: Vec<f64> = (0..8).filter(|i| mask >> i & 1 == 0).map(|i| values[i]).collect();
            let exact = brute_exact(&x, &y);
            let approx = wilcoxon_rank_sum_with(&x, &y, WilcoxonMode::Normal);
            worst = worst.max((exact - approx).abs());
            splits += 1;
        }
        assert_eq!(splits, 70);
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn normal_mode_detects_large_shift() {
        let mut rng = seeded(3);
        let x: Vec<f64> = (0..50).map(|_| standard_normal(&mut rng)).collect();
        let y: Vec<f64> = (0..50).map(|_| standard_normal(&mut rng) + 3.0).collect();
        assert!(wilcoxon_rank_sum(&x, &y) < 1e-10);
        assert!(wilcoxon_rank_sum(&x, &x) > 0.99);
    }

    #[test]
    fn bh_examples() {
        assert_eq!(bh_adjust(&[0.3]), vec![0.3]);
        for q in bh_adjust(&[0.01, 0.02, 0.03, 0.04]) {
            assert!((q - 0.04).abs() < 1e-15);
        }
        assert_eq!(bh_adjust(&[0.2, 0.2, 0.2]), vec![0.2, 0.2, 0.2]);
        let q = bh_adjust(&[0.04, 0.001, 0.5]);
        assert!((q[1] - 0.003).abs() < 1e-15);
        assert!((q[0] - 0.06).abs() < 1e-15);
        assert!((q[2] - 0.5).abs() < 1e-15);
        assert_eq!(bh_adjust(&[0.9, 0.8]), vec![0.9, 0.9]);
    }

    proptest! {
        #[test]
        fn bh_is_bounded_and_monotone(
            p in proptest::collection::vec(0.0f64..=1.0, 1..30),
            idx in 0usize..30,
            bump in 0.0f64..1.0,
        ) {
            let q = bh_adjust(&p);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!(*b >= *a && *b <= 1.0);
            }
            let i = idx % p.len();
            let mut raised = p.clone();
            raised[i] = (raised[i] + bump).min(1.0);
            let q2 = bh_adjust(&raised);
            for (a, b) in q.iter().zip(&q2) {
                prop_assert!(*b >= *a - 1e-15);
            }
        }

        #[test]
        fn rank_sum_p_in_unit_interval(
            x in proptest::collection::vec(-5.0f64..5.0, 1..20),
            y in proptest::collection::vec(-5.0f64..5.0, 1..20),
        ) {
            let p = wilcoxon_rank_sum(&x, &y);
            prop_assert!((0.0..=1.0).contains(&p));
            let q = wilcoxon_rank_sum(&y, &x);
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}
