//! Variance-preserving forward process and the x0-parameterized DDIM sampler.
//!
//! Timesteps are 1-based; `alpha_bar(0)` is defined as 1 so the final DDIM
//! jump lands exactly on the predicted clean batch.

use alloc::vec::Vec;

use crate::denoiser::Condition;
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::rng::{normal_matrix, seeded, SimRng};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Arbitrary schedule. Betas may be 0 (a degenerate no-noise step) but must be below 1.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Empty("noise schedule".into()));
        }
        if betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(invalid("betas must lie in [0, 1)"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(alloc::format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_linear_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// Betas linearly spaced from `beta_start` to `beta_end` inclusive.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid("need 0 < beta_start <= beta_end < 1"));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: alloc::vec![a.rows(), a.cols()],
            rhs: alloc::vec![b.rows(), b.cols()],
        });
    }
    Ok(())
}

/// `√ᾱ_t B0 + √(1−ᾱ_t) ε`.
pub fn q_sample(b0: &Matrix, t: usize, eps: &Matrix, s: &NoiseSchedule) -> Result<Matrix> {
    s.check_step(t)?;
    same_shape("q_sample", b0, eps)?;
    let ab = s.alpha_bar(t);
    let (ca, cb) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    b0.zip_with(eps, "q_sample", |x, e| ca * x + cb * e)
}

/// Noise implied by an x0 prediction: `(B_t − √ᾱ_t x0) / √(1−ᾱ_t)`.
pub fn eps_from_x0(b_t: &Matrix, x0: &Matrix, t: usize, s: &NoiseSchedule) -> Result<Matrix> {
    s.check_step(t)?;
    let ab = s.alpha_bar(t);
    if ab >= 1.0 {
        return Err(invalid("noise is undefined where alpha_bar is 1"));
    }
    let (ca, cb) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    b_t.zip_with(x0, "eps_from_x0", |b, x| (b - ca * x) / cb)
}

/// Coefficients `(c_x0, c_bt, β̃_t)` of the Gaussian posterior `q(B_{t−1} | B_t, B0)`.
pub fn posterior_coefficients(t: usize, s: &NoiseSchedule) -> Result<(f64, f64, f64)> {
    s.check_step(t)?;
    if t < 2 {
        return Err(invalid("posterior needs t >= 2"));
    }
    let (beta, ab, ab_prev) = (s.beta(t), s.alpha_bar(t), s.alpha_bar(t - 1));
    let denom = 1.0 - ab;
    Ok((
        libm::sqrt(ab_prev) * beta / denom,
        libm::sqrt(1.0 - beta) * (1.0 - ab_prev) / denom,
        (1.0 - ab_prev) / denom * beta,
    ))
}

/// Posterior mean and variance `β̃_t`.
pub fn posterior_mean(x0: &Matrix, b_t: &Matrix, t: usize, s: &NoiseSchedule) -> Result<(Matrix, f64)> {
    let (cx, cb, var) = posterior_coefficients(t, s)?;
    let mean = x0.zip_with(b_t, "posterior_mean", |x, b| cx * x + cb * b)?;
    Ok((mean, var))
}

/// One DDIM jump `t → t_next` given an x0 prediction. With `eta == 0` no random
/// numbers are drawn.
pub fn ddim_step(
    b_t: &Matrix,
    x0: &Matrix,
    t: usize,
    t_next: usize,
    eta: f64,
    rng: &mut SimRng,
    s: &NoiseSchedule,
) -> Result<Matrix> {
    if t_next >= t {
        return Err(invalid(alloc::format!("DDIM step must decrease time, got {t} -> {t_next}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(invalid("eta must lie in [0, 1]"));
    }
    let eps = eps_from_x0(b_t, x0, t, s)?;
    let (ab, ab_next) = (s.alpha_bar(t), s.alpha_bar(t_next));
    let sigma = eta * libm::sqrt((1.0 - ab_next) / (1.0 - ab)) * libm::sqrt(1.0 - ab / ab_next);
    let (cx, ce) = (libm::sqrt(ab_next), libm::sqrt((1.0 - ab_next - sigma * sigma).max(0.0)));
    let mut next = x0.zip_with(&eps, "ddim_step", |x, e| cx * x + ce * e)?;
    if sigma > 0.0 {
        let z = normal_matrix(rng, next.rows(), next.cols());
        next = next.zip_with(&z, "ddim_step", |v, n| v + sigma * n)?;
    }
    Ok(next)
}

/// `(1+w)·cond − w·uncond`.
pub fn apply_cfg(cond: &Matrix, uncond: &Matrix, w: f64) -> Result<Matrix> {
    if w == 0.0 {
        same_shape("apply_cfg", cond, uncond)?;
        return Ok(cond.clone());
    }
    cond.zip_with(uncond, "apply_cfg", |c, u| (1.0 + w) * c - w * u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub guidance: f64,
    pub self_condition: bool,
    pub seed: u64,
    /// Explicit decreasing timesteps; overrides `steps` when set.
    pub timesteps: Option<Vec<usize>>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 100, eta: 0.0, guidance: 0.0, self_condition: true, seed: 0, timesteps: None }
    }
}

impl SamplerConfig {
    /// `t_1 > … > t_K`, evenly spaced with `t_1 = T`.
    pub fn timesteps(&self, total: usize) -> Result<Vec<usize>> {
        let ts = match &self.timesteps {
            Some(ts) => ts.clone(),
            None => {
                let k = self.steps;
                if k == 0 || k > total {
                    return Err(invalid(alloc::format!("sampler steps must lie in [1, {total}]")));
                }
                (0..k).map(|i| ((k - i) * total).div_ceil(k)).collect()
            }
        };
        if ts.is_empty() || ts.iter().any(|&t| t == 0 || t > total) || ts.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("timesteps must be strictly decreasing within [1, T]"));
        }
        Ok(ts)
    }
}

/// Anything that maps a noisy batch to a clean-batch estimate.
pub trait X0Predictor {
    fn genes(&self) -> usize;

    /// `b_sc` is the self-conditioning slot; `None` means zeros.
    fn predict_x0(
        &self,
        b_t: &Matrix,
        b_sc: Option<&Matrix>,
        b_ctrl: &Matrix,
        t: usize,
        cond: &Condition,
    ) -> Result<Matrix>;
}

/// Full reverse trajectory from `B_T ~ N(0, I)` for one condition.
pub fn sample<M: X0Predictor + ?Sized>(
    model: &M,
    cond: &Condition,
    b_ctrl: &Matrix,
    cfg: &SamplerConfig,
    s: &NoiseSchedule,
) -> Result<Matrix> {
    if cfg.guidance < 0.0 {
        return Err(invalid("guidance weight must be nonnegative"));
    }
    if b_ctrl.cols() != model.genes() {
        return Err(Error::ShapeMismatch {
            op: "sample",
            lhs: alloc::vec![b_ctrl.rows(), b_ctrl.cols()],
            rhs: alloc::vec![model.genes()],
        });
    }
    let ts = cfg.timesteps(s.steps())?;
    let mut rng = seeded(cfg.seed);
    let mut b = normal_matrix(&mut rng, b_ctrl.rows(), b_ctrl.cols());
    let uncond = cond.masked();
    let mut prev: Option<Matrix> = None;
    for (i, &t) in ts.iter().enumerate() {
        let sc = if cfg.self_condition { prev.as_ref() } else { None };
        let x0_c = model.predict_x0(&b, sc, b_ctrl, t, cond)?;
        // guidance on x0 equals guidance on ε: eps_from_x0 is affine in x0 for fixed B_t
        let x0 = if cfg.guidance > 0.0 {
            let x0_u = model.predict_x0(&b, sc, b_ctrl, t, &uncond)?;
            apply_cfg(&x0_c, &x0_u, cfg.guidance)?
        } else {
            x0_c
        };
        let t_next = ts.get(i + 1).copied().unwrap_or(0);
        b = ddim_step(&b, &x0, t, t_next, cfg.eta, &mut rng, s)?;
        prev = Some(x0);
    }
    if !b.is_finite() {
        return Err(Error::NonFinite("sampled batch".into()));
    }
    Ok(b.map(|v| v.max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use core::cell::Cell;

    struct Perfect {
        x0: Matrix,
        calls: Cell<usize>,
    }

    impl X0Predictor for Perfect {
        fn genes(&self) -> usize {
            self.x0.cols()
        }

        fn predict_x0(&self, _: &Matrix, _: Option<&Matrix>, _: &Matrix, _: usize, _: &Condition) -> Result<Matrix> {
            self.calls.set(self.calls.get() + 1);
            Ok(self.x0.clone())
        }
    }

    fn perfect(x0: Matrix) -> Perfect {
        Perfect { x0, calls: Cell::new(0) }
    }

    fn cond() -> Condition {
        Condition::new(0, 1, None)
    }

    fn clean(seed: u64) -> Matrix {
        normal_matrix(&mut seeded(seed), 6, 4).map(|v| v.abs())
    }

    #[test]
    fn linear_schedule_examples() {
        let one = make_linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(one.betas(), &[0.5]);
        assert_eq!(one.alpha_bars(), &[0.5]);
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        let direct: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
        assert!((s.alpha_bar(1000) - direct).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 1e-4);
        for t in 2..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert_eq!(s.alpha_bar(t), (1.0 - s.beta(t)) * s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(1) < 1.0);
        assert!(make_linear_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.1).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn q_sample_examples() {
        let s = NoiseSchedule::default();
        let b0 = clean(1);
        let zero = Matrix::zeros(6, 4);
        let bt = q_sample(&b0, 300, &zero, &s).unwrap();
        assert_eq!(bt, b0.scale(libm::sqrt(s.alpha_bar(300))));
        let flat = NoiseSchedule::from_betas(vec![0.0, 0.0]).unwrap();
        let eps = normal_matrix(&mut seeded(2), 6, 4);
        assert_eq!(q_sample(&b0, 2, &eps, &flat).unwrap(), b0);
        assert!(q_sample(&b0, 0, &eps, &s).is_err());
        assert!(q_sample(&b0, 1, &Matrix::zeros(5, 4), &s).is_err());
    }

    #[test]
    fn q_sample_marginal_variance() {
        let s = NoiseSchedule::default();
        let t = 400;
        let eps = normal_matrix(&mut seeded(3), 10_000, 1);
        let bt = q_sample(&Matrix::zeros(10_000, 1), t, &eps, &s).unwrap();
        let var = bt.data().iter().map(|v| v * v).sum::<f64>() / 10_000.0;
        let want = 1.0 - s.alpha_bar(t);
        assert!((var / want - 1.0).abs() < 0.05);
    }

    #[test]
    fn markov_composition_matches_marginal() {
        let s = NoiseSchedule::default();
        let (t1, t2) = (50, 200);
        let n = 10_000;
        let x0 = 10.0;
        let mut rng = seeded(4);
        let e1 = normal_matrix(&mut rng, n, 1);
        let b1 = q_sample(&Matrix::filled(n, 1, x0), t1, &e1, &s).unwrap();
        let ratio = s.alpha_bar(t2) / s.alpha_bar(t1);
        let e2 = normal_matrix(&mut rng, n, 1);
        let b2 = b1.zip_with(&e2, "renoise", |b, e| libm::sqrt(ratio) * b + libm::sqrt(1.0 - ratio) * e).unwrap();
        let mean = b2.data().iter().sum::<f64>() / n as f64;
        let var = b2.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want_mean = libm::sqrt(s.alpha_bar(t2)) * x0;
        assert!((mean - want_mean).abs() < 0.01 * want_mean.abs());
        assert!((var / (1.0 - s.alpha_bar(t2)) - 1.0).abs() < 0.05);
    }

    #[test]
    fn eps_from_x0_inverts_q_sample() {
        let s = NoiseSchedule::default();
        let b0 = clean(5);
        let eps = normal_matrix(&mut seeded(6), 6, 4);
        for t in [1, 17, 500, 1000] {
            let bt = q_sample(&b0, t, &eps, &s).unwrap();
            assert!(eps_from_x0(&bt, &b0, t, &s).unwrap().max_abs_diff(&eps) < 1e-12);
            let scaled = bt.scale(1.0 / libm::sqrt(s.alpha_bar(t)));
            assert!(eps_from_x0(&bt, &scaled, t, &s).unwrap().data().iter().all(|e| e.abs() < 1e-12));
        }
    }

    #[test]
    fn posterior_examples() {
        let s = NoiseSchedule::default();
        let x = Matrix::filled(1, 1, 1.0);
        let (cx, cb, _) = posterior_coefficients(500, &s).unwrap();
        let (beta, ab, abp) = (s.beta(500), s.alpha_bar(500), s.alpha_bar(499));
        let direct = (abp.sqrt() * beta + (1.0 - beta).sqrt() * (1.0 - abp)) / (1.0 - ab);
        let (m, var) = posterior_mean(&x, &x, 500, &s).unwrap();
        assert!((m.get(0, 0) - direct).abs() < 1e-14);
        assert!((cx + cb - direct).abs() < 1e-14);
        assert!((var - (1.0 - abp) / (1.0 - ab) * beta).abs() < 1e-18);
        let (a, b) = ((1.0 - beta).sqrt(), abp.sqrt());
        let v = 2.5;
        let (mv, _) = posterior_mean(&x.scale(v), &x.scale(v), 500, &s).unwrap();
        assert!((mv.get(0, 0) - v * (a + b) / (1.0 + a * b)).abs() < 1e-12);

        let sched = NoiseSchedule::from_betas(vec![0.1, 0.0, 0.2]).unwrap();
        let x0 = clean(7);
        let bt = clean(8);
        let (m, var) = posterior_mean(&x0, &bt, 2, &sched).unwrap();
        assert_eq!(m, bt);
        assert_eq!(var, 0.0);
        assert!(posterior_mean(&x0, &bt, 1, &sched).is_err());
    }

    #[test]
    fn ddim_examples() {
        let s = NoiseSchedule::default();
        let b0 = clean(9);
        let eps = normal_matrix(&mut seeded(10), 6, 4);
        let bt = q_sample(&b0, 700, &eps, &s).unwrap();
        let mut rng = seeded(0);
        let out = ddim_step(&bt, &b0, 700, 0, 0.0, &mut rng, &s).unwrap();
        assert!(out.max_abs_diff(&b0) < 1e-12);
        let a = ddim_step(&bt, &b0, 700, 350, 0.0, &mut seeded(1), &s).unwrap();
        let b = ddim_step(&bt, &b0, 700, 350, 0.0, &mut seeded(2), &s).unwrap();
        assert_eq!(a, b);
        assert!(ddim_step(&bt, &b0, 700, 700, 0.0, &mut rng, &s).is_err());
        assert!(ddim_step(&bt, &b0, 700, 800, 0.0, &mut rng, &s).is_err());
    }

    #[test]
    fn deterministic_step_draws_no_randomness() {
        use rand::RngCore;
        let s = NoiseSchedule::default();
        let b0 = clean(11);
        let bt = clean(12);
        let mut used = seeded(3);
        ddim_step(&bt, &b0, 900, 800, 0.0, &mut used, &s).unwrap();
        let mut fresh = seeded(3);
        assert_eq!(used.next_u64(), fresh.next_u64());
        let mut noisy = seeded(3);
        ddim_step(&bt, &b0, 900, 800, 1.0, &mut noisy, &s).unwrap();
        let mut fresh = seeded(3);
        assert_ne!(noisy.next_u64(), fresh.next_u64());
    }

    #[test]
    fn stochastic_step_keeps_marginal_variance() {
        let s = NoiseSchedule::default();
        let (t, t_next) = (800, 400);
        let n = 10_000;
        let x0 = Matrix::zeros(n, 1);
        let bt = q_sample(&x0, t, &normal_matrix(&mut seeded(13), n, 1), &s).unwrap();
        let next = ddim_step(&bt, &x0, t, t_next, 1.0, &mut seeded(14), &s).unwrap();
        let var = next.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var / (1.0 - s.alpha_bar(t_next)) - 1.0).abs() < 0.05);
    }

    #[test]
    fn cfg_examples() {
        let c = clean(15);
        let u = clean(16);
        assert_eq!(apply_cfg(&c, &u, 0.0).unwrap(), c);
        assert!(apply_cfg(&c, &c, 3.5).unwrap().max_abs_diff(&c) < 1e-14);
        let want = c.scale(2.0).sub(&u).unwrap();
        assert!(apply_cfg(&c, &u, 1.0).unwrap().max_abs_diff(&want) < 1e-15);
        assert!(apply_cfg(&c, &Matrix::zeros(2, 2), 1.0).is_err());
    }

    #[test]
    fn timestep_grid() {
        let cfg = SamplerConfig { steps: 4, ..Default::default() };
        assert_eq!(cfg.timesteps(1000).unwrap(), vec![1000, 750, 500, 250]);
        let cfg = SamplerConfig { steps: 3, ..Default::default() };
        assert_eq!(cfg.timesteps(10).unwrap(), vec![10, 7, 4]);
        let full = SamplerConfig { steps: 1000, ..Default::default() }.timesteps(1000).unwrap();
        assert_eq!(full, (1..=1000).rev().collect::<Vec<_>>());
        assert!(SamplerConfig { steps: 0, ..Default::default() }.timesteps(10).is_err());
        assert!(SamplerConfig { steps: 11, ..Default::default() }.timesteps(10).is_err());
        let bad = SamplerConfig { timesteps: Some(vec![5, 5]), ..Default::default() };
        assert!(bad.timesteps(10).is_err());
    }

    #[test]
    fn perfect_predictor_reconstructs_for_any_grid() {
        let s = NoiseSchedule::default();
        let b0 = clean(17);
        let ctrl = clean(18);
        for grid in [vec![1000], vec![1000, 10, 3], vec![640, 639, 2, 1], vec![37]] {
            let model = perfect(b0.clone());
            let cfg = SamplerConfig { timesteps: Some(grid), seed: 5, ..Default::default() };
            let out = sample(&model, &cond(), &ctrl, &cfg, &s).unwrap();
            assert!(out.max_abs_diff(&b0) < 1e-9);
        }
        let model = perfect(b0.clone());
        let one = SamplerConfig { steps: 1, ..Default::default() };
        assert_eq!(sample(&model, &cond(), &ctrl, &one, &s).unwrap(), b0);
    }

    #[test]
    fn full_trajectory_reconstructs() {
        let s = NoiseSchedule::default();
        let b0 = clean(19);
        let model = perfect(b0.clone());
        let cfg = SamplerConfig { steps: 1000, seed: 8, ..Default::default() };
        let out = sample(&model, &cond(), &clean(20), &cfg, &s).unwrap();
        assert!(out.max_abs_diff(&b0) < 1e-9);
        assert_eq!(model.calls.get(), 1000);
    }

    #[test]
    fn zero_model_samples_zeros_and_is_deterministic() {
        let s = NoiseSchedule::default();
        let model = perfect(Matrix::zeros(6, 4));
        let cfg = SamplerConfig { steps: 20, seed: 2, ..Default::default() };
        let out = sample(&model, &cond(), &clean(21), &cfg, &s).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let model = perfect(clean(22));
        let cfg = SamplerConfig { steps: 20, eta: 0.5, seed: 2, ..Default::default() };
        let a = sample(&model, &cond(), &clean(21), &cfg, &s).unwrap();
        let b = sample(&model, &cond(), &clean(21), &cfg, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn guidance_doubles_model_calls() {
        let s = NoiseSchedule::default();
        let model = perfect(clean(23));
        let cfg = SamplerConfig { steps: 5, guidance: 2.0, ..Default::default() };
        sample(&model, &cond(), &clean(24), &cfg, &s).unwrap();
        assert_eq!(model.calls.get(), 10);
    }
}
