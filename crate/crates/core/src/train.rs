//! Hybrid energy-distance + MSE training.
//!
//! One step: draw `t ~ U{1..T}` and fresh noise, null-mask the condition with
//! probability `p_drop`, optionally run a stop-gradient self-conditioning pass
//! (probability `p_sc`), then backpropagate
//! `ED(B0, B_θ) + λ·(1/m) Σ_j ‖x_j − x̂_j‖²`, clip to a global norm, apply
//! AdamW at the scheduled learning rate and refresh the EMA shadow.
//!
//! Parameters, moments and the shadow are kept flat in checkpoint layout order.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::denoiser::{denoise, Condition, Denoiser, DenoiserParams, ModelConfig};
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::kernel::{energy_distance, energy_distance_on_tape};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, normal_matrix, seeded, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Perturbation,
    MarginalPretrain,
}

/// What to do with the gene-facing projections when finetuning from a pretrained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transfer {
    Keep,
    ReinitProjections,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub energy: f64,
    pub mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { energy: 1.0, mse: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub p_drop: f64,
    pub p_sc: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub ema_interval: usize,
    pub eval_interval: usize,
    pub mode: TrainMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            p_drop: 0.1,
            p_sc: 0.5,
            peak_lr: 2e-3,
            warmup_steps: 200,
            total_steps: 5000,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 1e-2,
            ema_decay: 0.99,
            ema_interval: 10,
            eval_interval: 200,
            mode: TrainMode::Perturbation,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_drop", self.p_drop), ("p_sc", self.p_sc)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(alloc::format!("{name} must lie in [0, 1]")));
            }
        }
        if self.clip_norm <= 0.0 || self.clip_norm.is_nan() {
            return Err(invalid("clip norm must be positive"));
        }
        if self.peak_lr < 0.0 || self.weights.energy < 0.0 || self.weights.mse < 0.0 {
            return Err(invalid("learning rate and loss weights must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || self.ema_interval == 0 || self.eval_interval == 0 {
            return Err(invalid("EMA decay must lie in [0, 1]; intervals must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub energy: f64,
    pub mse: f64,
}

/// Loss on plain matrices.
pub fn total_loss(b0: &Matrix, pred: &Matrix, weights: LossWeights) -> Result<LossParts> {
    let diff = b0.sub(pred)?;
    let mse = diff.data().iter().map(|v| v * v).sum::<f64>() / b0.rows() as f64;
    let energy = energy_distance(b0, pred)?;
    Ok(LossParts { total: weights.energy * energy + weights.mse * mse, energy, mse })
}

/// Loss recorded on a tape: `(total, energy, mse)`.
pub fn total_loss_on_tape(tape: &mut Tape, b0: Var, pred: Var, weights: LossWeights) -> Result<(Var, Var, Var)> {
    let m = tape.value(b0).shape()[0] as f64;
    let energy = energy_distance_on_tape(tape, b0, pred)?;
    let diff = tape.sub(b0, pred)?;
    let sq = tape.mul(diff, diff)?;
    let sum = tape.sum(sq)?;
    let mse = tape.scale(sum, 1.0 / m)?;
    let we = tape.scale(energy, weights.energy)?;
    let wm = tape.scale(mse, weights.mse)?;
    let total = tape.add(we, wm)?;
    Ok((total, energy, mse))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(c: &TrainConfig) -> Self {
        Self { beta1: c.beta1, beta2: c.beta2, eps: c.adam_eps, weight_decay: c.weight_decay }
    }
}

/// Bias-corrected Adam update with decoupled weight decay.
pub fn optimizer_step(params: &mut [f64], grads: &[f64], opt: &mut OptimizerState, hp: &AdamW, lr: f64) -> Result<()> {
    if grads.len() != params.len() || opt.m.len() != params.len() || opt.v.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "optimizer_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), opt.m.len()],
        });
    }
    opt.step += 1;
    let c1 = 1.0 - libm::pow(hp.beta1, opt.step as f64);
    let c2 = 1.0 - libm::pow(hp.beta2, opt.step as f64);
    let decay = 1.0 - lr * hp.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        opt.m[i] = hp.beta1 * opt.m[i] + (1.0 - hp.beta1) * g;
        opt.v[i] = hp.beta2 * opt.v[i] + (1.0 - hp.beta2) * g * g;
        let mh = opt.m[i] / c1;
        let vh = opt.v[i] / c2;
        params[i] = params[i] * decay - lr * mh / (libm::sqrt(vh) + hp.eps);
    }
    Ok(())
}

/// Linear warmup, cosine decay to `0.1 × peak` at `total_steps`, flat afterwards.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr;
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return 0.1 * peak;
    }
    let frac = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    peak * (0.55 + 0.45 * libm::cos(core::f64::consts::PI * frac))
}

/// `shadow ← decay·shadow + (1−decay)·params` when `step` is a multiple of
/// `interval`. Returns whether an update happened.
pub fn ema_update(params: &[f64], shadow: &mut [f64], decay: f64, step: usize, interval: usize) -> Result<bool> {
    if params.len() != shadow.len() {
        return Err(Error::ShapeMismatch { op: "ema_update", lhs: vec![params.len()], rhs: vec![shadow.len()] });
    }
    if interval == 0 || step % interval != 0 {
        return Ok(false);
    }
    for (s, p) in shadow.iter_mut().zip(params) {
        *s = decay * *s + (1.0 - decay) * p;
    }
    Ok(true)
}

/// Step with the highest score; earliest wins ties, NaN scores never win.
pub fn select_checkpoint(history: &[(usize, f64)]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(step, score) in history {
        if score.is_nan() {
            continue;
        }
        match best {
            Some((bs, b)) if score < b || (score == b && step >= bs) => {}
            _ => best = Some((step, score)),
        }
    }
    match (best, history.first()) {
        (Some((step, _)), _) => Ok(step),
        (None, Some(&(step, _))) => Ok(step),
        (None, None) => Err(Error::Empty("checkpoint history".into())),
    }
}

/// Scales `grads` in place so their joint norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().map(|g| g * g).sum());
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub b_pert: Matrix,
    pub b_ctrl: Matrix,
    pub cond: Condition,
}

impl TrainBatch {
    /// The marginal-pretraining view: zero control stream, context-only condition.
    pub fn marginal(&self) -> Self {
        Self {
            b_pert: self.b_pert.clone(),
            b_ctrl: Matrix::zeros(self.b_pert.rows(), self.b_pert.cols()),
            cond: Condition::context_only(self.cond.context),
        }
    }
}

/// The random choices of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub t: usize,
    pub eps: Matrix,
    pub drop_condition: bool,
    pub self_condition: bool,
}

impl StepPlan {
    pub fn draw(rng: &mut SimRng, rows: usize, cols: usize, cfg: &TrainConfig, s: &NoiseSchedule) -> Self {
        let t = rng.random_range(1..=s.steps());
        let drop_condition = rng.random::<f64>() < cfg.p_drop;
        let self_condition = rng.random::<f64>() < cfg.p_sc;
        let eps = normal_matrix(rng, rows, cols);
        Self { t, eps, drop_condition, self_condition }
    }

    pub fn condition(&self, batch: &TrainBatch) -> Condition {
        if self.drop_condition {
            batch.cond.masked()
        } else {
            batch.cond
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn record_loss(
    tape: &mut Tape,
    config: &ModelConfig,
    p: &DenoiserParams<Var>,
    batch: &TrainBatch,
    plan: &StepPlan,
    weights: LossWeights,
    s: &NoiseSchedule,
    frozen_sc: Option<&Matrix>,
) -> Result<(Var, Var, Var)> {
    let b_t = q_sample(&batch.b_pert, plan.t, &plan.eps, s)?;
    let bt = tape.constant(b_t.into())?;
    let ctrl = tape.constant((&batch.b_ctrl).into())?;
    let target = tape.constant((&batch.b_pert).into())?;
    let cond = plan.condition(batch);
    let sc = match frozen_sc {
        _ if !(plan.self_condition && config.self_condition) => None,
        Some(m) => Some(tape.constant(m.into())?),
        None => {
            let first = denoise(tape, p, config, bt, None, ctrl, plan.t, &cond)?;
            Some(tape.stop_gradient(first)?)
        }
    };
    let pred = denoise(tape, p, config, bt, sc, ctrl, plan.t, &cond)?;
    total_loss_on_tape(tape, target, pred, weights)
}

fn parts(tape: &Tape, (total, energy, mse): (Var, Var, Var)) -> LossParts {
    LossParts { total: tape.value(total).item(), energy: tape.value(energy).item(), mse: tape.value(mse).item() }
}

/// Loss and flat parameter gradient for one fixed plan.
pub fn loss_and_grads(
    config: &ModelConfig,
    params: &DenoiserParams<crate::autodiff::Tensor>,
    batch: &TrainBatch,
    plan: &StepPlan,
    weights: LossWeights,
    s: &NoiseSchedule,
) -> Result<(LossParts, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = params.record(&mut tape, true)?;
    let vars = record_loss(&mut tape, config, &p, batch, plan, weights, s, None)?;
    let loss = parts(&tape, vars);
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = tape.grad(vars.0)?;
    let mut flat = Vec::with_capacity(params.num_parameters());
    for v in p.to_vec() {
        match grads.get(*v) {
            Some(g) => flat.extend_from_slice(g.data()),
            None => flat.extend(core::iter::repeat_n(0.0, tape.value(*v).len())),
        }
    }
    Ok((loss, flat))
}

/// Loss only. `frozen_sc` replaces the self-conditioning first pass with a
/// fixed input, which is what the stop-gradient makes the gradient see.
#[allow(clippy::too_many_arguments)]
pub fn loss_value(
    config: &ModelConfig,
    params: &DenoiserParams<crate::autodiff::Tensor>,
    batch: &TrainBatch,
    plan: &StepPlan,
    weights: LossWeights,
    s: &NoiseSchedule,
    frozen_sc: Option<&Matrix>,
) -> Result<LossParts> {
    let mut tape = Tape::new();
    let p = params.record(&mut tape, false)?;
    let vars = record_loss(&mut tape, config, &p, batch, plan, weights, s, frozen_sc)?;
    Ok(parts(&tape, vars))
}

/// The self-conditioning first pass (slot filled with zeros) for `plan`.
pub fn first_pass(
    config: &ModelConfig,
    params: &DenoiserParams<crate::autodiff::Tensor>,
    batch: &TrainBatch,
    plan: &StepPlan,
    s: &NoiseSchedule,
) -> Result<Matrix> {
    let b_t = q_sample(&batch.b_pert, plan.t, &plan.eps, s)?;
    let model = Denoiser { config: *config, params: params.clone() };
    crate::diffusion::X0Predictor::predict_x0(&model, &b_t, None, &batch.b_ctrl, plan.t, &plan.condition(batch))
}

/// Pretrained weights adapted for finetuning.
pub fn transfer(
    pretrained: &DenoiserParams<crate::autodiff::Tensor>,
    config: &ModelConfig,
    strategy: Transfer,
    seed: u64,
) -> Result<DenoiserParams<crate::autodiff::Tensor>> {
    let mut params = pretrained.clone();
    if pretrained.num_parameters() != DenoiserParams::zeros(config)?.num_parameters() {
        return Err(invalid("pretrained parameters do not match the model configuration"));
    }
    if strategy == Transfer::ReinitProjections {
        let fresh = DenoiserParams::init(config, &mut seeded(seed))?;
        params.pert_in = fresh.pert_in;
        params.ctrl_in = fresh.ctrl_in;
        params.out = fresh.out;
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: LossParts,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    /// `(step, validation score)` pairs.
    pub history: Vec<(usize, f64)>,
    pub best_step: usize,
    /// EMA shadow at `best_step`.
    pub best_params: DenoiserParams<crate::autodiff::Tensor>,
    pub logs: Vec<StepLog>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    params: Vec<f64>,
    ema: Vec<f64>,
    opt: OptimizerState,
    step: usize,
    rng: SimRng,
}

impl Trainer {
    /// Fresh parameters drawn from the run seed.
    pub fn new(model: ModelConfig, config: TrainConfig, schedule: NoiseSchedule) -> Result<Self> {
        let params = DenoiserParams::init(&model, &mut seeded(derive_seed(config.seed, 0)))?;
        Self::from_params(model, config, schedule, &params)
    }

    pub fn from_params(
        model: ModelConfig,
        config: TrainConfig,
        schedule: NoiseSchedule,
        params: &DenoiserParams<crate::autodiff::Tensor>,
    ) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let flat = params.flatten();
        DenoiserParams::unflatten(&model, &flat)?;
        let rng = seeded(derive_seed(config.seed, 1));
        Ok(Self {
            model,
            config,
            schedule,
            ema: flat.clone(),
            opt: OptimizerState::new(flat.len()),
            params: flat,
            step: 0,
            rng,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn rng(&mut self) -> &mut SimRng {
        &mut self.rng
    }

    pub fn params(&self) -> DenoiserParams<crate::autodiff::Tensor> {
        DenoiserParams::unflatten(&self.model, &self.params).expect("layout fixed at construction")
    }

    pub fn ema_params(&self) -> DenoiserParams<crate::autodiff::Tensor> {
        DenoiserParams::unflatten(&self.model, &self.ema).expect("layout fixed at construction")
    }

    pub fn flat_params(&self) -> &[f64] {
        &self.params
    }

    pub fn flat_ema(&self) -> &[f64] {
        &self.ema
    }

    /// The model used for evaluation and sampling (the EMA shadow).
    pub fn ema_model(&self) -> Denoiser {
        Denoiser { config: self.model, params: self.ema_params() }
    }

    /// One update on `batch` as given.
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<StepLog> {
        let plan = StepPlan::draw(
            &mut self.rng,
            batch.b_pert.rows(),
            batch.b_pert.cols(),
            &self.config,
            &self.schedule,
        );
        let params = self.params();
        let (loss, mut grads) =
            loss_and_grads(&self.model, &params, batch, &plan, self.config.weights, &self.schedule)?;
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        self.step += 1;
        let lr = lr_at(self.step, &self.config);
        optimizer_step(&mut self.params, &grads, &mut self.opt, &AdamW::from(&self.config), lr)?;
        ema_update(&self.params, &mut self.ema, self.config.ema_decay, self.step, self.config.ema_interval)?;
        Ok(StepLog { step: self.step, lr, loss, grad_norm })
    }

    /// One marginal-pretraining update: control stream zeroed, perturbation and dose nulled.
    pub fn pretrain_step(&mut self, batch: &TrainBatch) -> Result<StepLog> {
        self.train_step(&batch.marginal())
    }

    /// Runs `steps` updates. `sample` draws each batch from the trainer's
    /// generator; `validate` scores the EMA model every `eval_interval` steps
    /// and after the last one.
    pub fn fit(
        &mut self,
        steps: usize,
        mut sample: impl FnMut(&mut SimRng) -> Result<TrainBatch>,
        mut validate: impl FnMut(usize, &Denoiser) -> Result<f64>,
    ) -> Result<FitSummary> {
        let mut history = Vec::new();
        let mut logs = Vec::with_capacity(steps);
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for i in 0..steps {
            let batch = sample(&mut self.rng)?;
            let log = match self.config.mode {
                TrainMode::Perturbation => self.train_step(&batch)?,
                TrainMode::MarginalPretrain => self.pretrain_step(&batch)?,
            };
            logs.push(log);
            if self.step % self.config.eval_interval == 0 || i + 1 == steps {
                let score = validate(self.step, &self.ema_model())?;
                history.push((self.step, score));
                let better = match &best {
                    None => true,
                    Some((_, b, _)) => score > *b || (b.is_nan() && !score.is_nan()),
                };
                if better {
                    best = Some((self.step, score, self.ema.clone()));
                }
            }
        }
        let (best_step, _, flat) = best.ok_or_else(|| Error::Empty("no training steps".into()))?;
        debug_assert_eq!(select_checkpoint(&history)?, best_step);
        Ok(FitSummary {
            history,
            best_step,
            best_params: DenoiserParams::unflatten(&self.model, &flat)?,
            logs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::rng::standard_normal;

    fn small_model() -> ModelConfig {
        ModelConfig {
            genes: 4,
            width: 8,
            blocks: 1,
            heads: 2,
            self_condition: true,
            contexts: 2,
            perturbations: 3,
            doses: 0,
        }
    }

    fn random_params(config: &ModelConfig, seed: u64) -> DenoiserParams<Tensor> {
        let mut rng = seeded(seed);
        DenoiserParams::build(config, |_, shape| Ok(normal_matrix(&mut rng, shape[0], shape[1]).scale(0.3).into()))
            .unwrap()
    }

    fn batch(seed: u64, m: usize, g: usize) -> TrainBatch {
        let mut rng = seeded(seed);
        TrainBatch {
            b_pert: normal_matrix(&mut rng, m, g).map(|v| v.abs()),
            b_ctrl: normal_matrix(&mut rng, m, g).map(|v| v.abs()),
            cond: Condition::new(1, 2, None),
        }
    }

    #[test]
    fn loss_examples() {
        let b = batch(1, 5, 4).b_pert;
        let w = LossWeights::default();
        assert_eq!(total_loss(&b, &b, w).unwrap(), LossParts::default());
        let v = [0.5, -1.0, 2.0, 0.0];
        let shifted = Matrix::from_rows(&(0..5).map(|i| {
            let r = b.row(i);
            [r[0] + v[0], r[1] + v[1], r[2] + v[2], r[3] + v[3]]
        }).collect::<Vec<_>>()).unwrap();
        let parts = total_loss(&b, &shifted, w).unwrap();
        let norm2: f64 = v.iter().map(|x| x * x).sum();
        assert!((parts.mse - norm2).abs() < 1e-12);
        assert!((parts.total - parts.energy - parts.mse).abs() < 1e-12);
        let one = Matrix::from_rows(&[b.row(0)]).unwrap();
        let one_shift = Matrix::from_rows(&[shifted.row(0)]).unwrap();
        let single = total_loss(&one, &one_shift, w).unwrap();
        assert!((single.energy - 2.0 * norm2.sqrt()).abs() < 1e-12);
        assert!(total_loss(&b, &Matrix::zeros(5, 3), w).is_err());
    }

    #[test]
    fn tape_loss_matches_plain_and_weights() {
        let b = batch(2, 6, 4);
        let mut t = Tape::new();
        let x = t.constant((&b.b_pert).into()).unwrap();
        let y = t.input((&b.b_ctrl).into()).unwrap();
        let w = LossWeights { energy: 1.0, mse: 0.7 };
        let vars = total_loss_on_tape(&mut t, x, y, w).unwrap();
        let got = parts(&t, vars);
        let want = total_loss(&b.b_pert, &b.b_ctrl, w).unwrap();
        assert!((got.total - want.total).abs() < 1e-12);
        assert!((got.total - (got.energy + 0.7 * got.mse)).abs() < 1e-12);
        assert!(got.energy >= 0.0 && got.mse >= 0.0);

        let ed_only = LossWeights { energy: 1.0, mse: 0.0 };
        let mut t2 = Tape::new();
        let x2 = t2.constant((&b.b_pert).into()).unwrap();
        let y2 = t2.input((&b.b_ctrl).into()).unwrap();
        let (total, _, _) = total_loss_on_tape(&mut t2, x2, y2, ed_only).unwrap();
        let g_total = t2.grad(total).unwrap().wrt(y2);
        let mut t3 = Tape::new();
        let x3 = t3.constant((&b.b_pert).into()).unwrap();
        let y3 = t3.input((&b.b_ctrl).into()).unwrap();
        let ed = energy_distance_on_tape(&mut t3, x3, y3).unwrap();
        let g_ed = t3.grad(ed).unwrap().wrt(y3);
        for (a, b) in g_total.data().iter().zip(g_ed.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_examples() {
        let hp = AdamW { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.0 };
        let mut p = [1.0];
        let mut opt = OptimizerState::new(1);
        optimizer_step(&mut p, &[0.0], &mut opt, &hp, 0.1).unwrap();
        assert_eq!(p, [1.0]);
        let mut p = [1.0];
        let mut opt = OptimizerState::new(1);
        optimizer_step(&mut p, &[1.0], &mut opt, &hp, 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-8);
        let decayed = AdamW { weight_decay: 0.01, ..hp };
        let mut p = [2.0, -3.0];
        let mut opt = OptimizerState::new(2);
        optimizer_step(&mut p, &[0.0, 0.0], &mut opt, &decayed, 0.1).unwrap();
        assert_eq!(p, [2.0 * (1.0 - 0.1 * 0.01), -3.0 * (1.0 - 0.1 * 0.01)]);
        assert!(optimizer_step(&mut p, &[0.0], &mut opt, &decayed, 0.1).is_err());
    }

    #[test]
    fn adamw_matches_hand_rolled_two_steps() {
        let hp = AdamW { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.01 };
        let mut p = [0.5];
        let mut opt = OptimizerState::new(1);
        optimizer_step(&mut p, &[0.2], &mut opt, &hp, 0.01).unwrap();
        optimizer_step(&mut p, &[-0.4], &mut opt, &hp, 0.02).unwrap();
        let mut q: f64 = 0.5;
        let (mut m, mut v) = (0.0, 0.0);
        for (k, (g, lr)) in [(0.2, 0.01), (-0.4, 0.02)].iter().enumerate() {
            m = 0.9 * m + 0.1 * g;
            v = 0.98 * v + 0.02 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(k as i32 + 1));
            let vh = v / (1.0 - 0.98f64.powi(k as i32 + 1));
            q = q - lr * 0.01 * q - lr * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0] - q).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig { peak_lr: 1e-3, warmup_steps: 200, total_steps: 2000, ..Default::default() };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(100, &cfg), 5e-4);
        assert_eq!(lr_at(200, &cfg), 1e-3);
        assert!((lr_at(2000, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_at(10_000, &cfg) - 1e-4).abs() < 1e-18);
        let mid = (200 + 2000) / 2;
        let frac = (mid - 200) as f64 / 1800.0;
        let want = 1e-3 * (0.55 + 0.45 * (core::f64::consts::PI * frac).cos());
        assert!((lr_at(mid, &cfg) - want).abs() < 1e-18);
        for s in 200..2000 {
            assert!(lr_at(s + 1, &cfg) <= lr_at(s, &cfg));
        }
    }

    #[test]
    fn ema_examples() {
        let mut shadow = [0.0];
        assert!(ema_update(&[1.0], &mut shadow, 0.99, 10, 10).unwrap());
        assert!((shadow[0] - 0.01).abs() < 1e-15);
        assert!(!ema_update(&[1.0], &mut shadow, 0.99, 11, 10).unwrap());
        assert!((shadow[0] - 0.01).abs() < 1e-15);
        let mut constant = [3.0, -2.0];
        for step in 1..200 {
            ema_update(&[3.0, -2.0], &mut constant, 0.99, step, 10).unwrap();
        }
        assert_eq!(constant, [3.0, -2.0]);
    }

    #[test]
    fn checkpoint_selection() {
        assert_eq!(select_checkpoint(&[(7, 0.1)]).unwrap(), 7);
        assert_eq!(select_checkpoint(&[(1, 0.1), (2, 0.3), (3, 0.5), (4, 0.2)]).unwrap(), 3);
        assert_eq!(select_checkpoint(&[(2000, 0.4), (4000, 0.4)]).unwrap(), 2000);
        assert_eq!(select_checkpoint(&[(1, f64::NAN), (2, 0.0)]).unwrap(), 2);
        assert!(select_checkpoint(&[]).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let n: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(n <= 1.0 + 1e-9);
        let mut small = vec![0.1, 0.1];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.1]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = small_model();
        let s = NoiseSchedule::default();
        let params = random_params(&model, 3);
        let b = batch(4, 5, 4);
        let mut rng = seeded(5);
        for sc in [false, true] {
            let plan = StepPlan { t: 250, eps: normal_matrix(&mut rng, 5, 4), drop_condition: false, self_condition: sc };
            let (_, grads) = loss_and_grads(&model, &params, &b, &plan, LossWeights::default(), &s).unwrap();
            let frozen = first_pass(&model, &params, &b, &plan, &s).unwrap();
            let flat = params.flatten();
            let h = 1e-6;
            let mut worst: f64 = 0.0;
            for _ in 0..48 {
                let i = (rng.random::<u64>() as usize) % flat.len();
                let eval = |delta: f64| {
                    let mut f = flat.clone();
                    f[i] += delta;
                    let p = DenoiserParams::unflatten(&model, &f).unwrap();
                    loss_value(&model, &p, &b, &plan, LossWeights::default(), &s, Some(&frozen)).unwrap().total
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                worst = worst.max((grads[i] - fd).abs() / fd.abs().max(1.0));
            }
            assert!(worst < 1e-4, "self-conditioning {sc}: {worst}");
        }
    }

    #[test]
    fn self_conditioning_pass_contributes_no_gradient() {
        let model = small_model();
        let s = NoiseSchedule::default();
        let params = random_params(&model, 6);
        let b = batch(7, 5, 4);
        let plan = StepPlan {
            t: 600,
            eps: normal_matrix(&mut seeded(8), 5, 4),
            drop_condition: false,
            self_condition: true,
        };
        let (_, with_stop) = loss_and_grads(&model, &params, &b, &plan, LossWeights::default(), &s).unwrap();

        // same second pass with the first-pass output injected as a constant
        let mut tape = Tape::new();
        let p = params.record(&mut tape, true).unwrap();
        let b_t = q_sample(&b.b_pert, plan.t, &plan.eps, &s).unwrap();
        let first = first_pass(&model, &params, &b, &plan, &s).unwrap();
        let bt = tape.constant(b_t.into()).unwrap();
        let ctrl = tape.constant((&b.b_ctrl).into()).unwrap();
        let target = tape.constant((&b.b_pert).into()).unwrap();
        let sc = tape.constant(first.into()).unwrap();
        let pred = denoise(&mut tape, &p, &model, bt, Some(sc), ctrl, plan.t, &b.cond).unwrap();
        let (total, _, _) = total_loss_on_tape(&mut tape, target, pred, LossWeights::default()).unwrap();
        let g = tape.grad(total).unwrap();
        let mut frozen = Vec::new();
        for v in p.to_vec() {
            frozen.extend_from_slice(g.wrt(*v).data());
        }
        assert_eq!(with_stop, frozen);
    }

    #[test]
    fn zero_sc_probability_keeps_slot_empty() {
        let cfg = TrainConfig { p_sc: 0.0, p_drop: 1.0, ..Default::default() };
        let s = NoiseSchedule::default();
        let mut rng = seeded(9);
        for _ in 0..100 {
            let plan = StepPlan::draw(&mut rng, 2, 2, &cfg, &s);
            assert!(!plan.self_condition && plan.drop_condition);
            assert!((1..=1000).contains(&plan.t));
        }
    }

    #[test]
    fn training_is_deterministic_and_clipped() {
        let model = small_model();
        let cfg = TrainConfig { seed: 11, warmup_steps: 2, total_steps: 20, ..Default::default() };
        let run = || {
            let mut tr = Trainer::new(model, cfg.clone(), NoiseSchedule::default()).unwrap();
            let b = batch(12, 6, 4);
            let mut norms = Vec::new();
            for _ in 0..12 {
                norms.push(tr.train_step(&b).unwrap().grad_norm);
            }
            (tr.flat_params().to_vec(), tr.flat_ema().to_vec(), norms)
        };
        let (a, ea, na) = run();
        let (b, eb, _) = run();
        assert_eq!(a, b);
        assert_eq!(ea, eb);
        assert!(na.iter().all(|n| n.is_finite()));
    }

    #[test]
    fn clipped_update_norm_respects_bound() {
        let model = small_model();
        let s = NoiseSchedule::default();
        let params = random_params(&model, 13);
        let b = batch(14, 5, 4);
        let plan = StepPlan { t: 900, eps: normal_matrix(&mut seeded(15), 5, 4), drop_condition: true, self_condition: false };
        let (_, mut g) = loss_and_grads(&model, &params, &b, &plan, LossWeights::default(), &s).unwrap();
        clip_global_norm(&mut g, 1.0);
        assert!(g.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1.0 + 1e-9);
    }

    #[test]
    fn pretraining_view_has_no_perturbation() {
        let b = batch(16, 3, 4);
        let m = b.marginal();
        assert_eq!(m.cond.perturbation, None);
        assert_eq!(m.cond.dose, None);
        assert_eq!(m.cond.context, 1);
        assert!(m.b_ctrl.data().iter().all(|&v| v == 0.0));
        assert_eq!(m.b_pert, b.b_pert);
    }

    #[test]
    fn transfer_strategies() {
        let model = small_model();
        let pre = random_params(&model, 17);
        assert_eq!(transfer(&pre, &model, Transfer::Keep, 1).unwrap(), pre);
        let re = transfer(&pre, &model, Transfer::ReinitProjections, 1).unwrap();
        assert_eq!(re.blocks, pre.blocks);
        assert_ne!(re.pert_in, pre.pert_in);
        assert!(re.out.w.data().iter().all(|&v| v == 0.0));
        let other = ModelConfig { width: 16, ..model };
        assert!(transfer(&pre, &other, Transfer::Keep, 1).is_err());
    }

    #[test]
    fn toy_problem_loss_halves() {
        let model = ModelConfig {
            genes: 4,
            width: 16,
            blocks: 1,
            heads: 2,
            self_condition: true,
            contexts: 1,
            perturbations: 1,
            doses: 0,
        };
        let s = NoiseSchedule::default();
        let cfg = TrainConfig { seed: 3, warmup_steps: 20, total_steps: 500, peak_lr: 3e-3, ..Default::default() };
        let mean = [1.0, 2.0, 0.5, 1.5];
        let draw = |rng: &mut SimRng, m: usize| {
            let mut b = Matrix::zeros(m, 4);
            for i in 0..m {
                for (g, mu) in mean.iter().enumerate() {
                    b.set(i, g, mu + 0.3 * standard_normal(rng));
                }
            }
            b
        };
        let cond = Condition::new(0, 0, None);
        let mut vrng = seeded(99);
        let val: Vec<(TrainBatch, StepPlan)> = (0..8)
            .map(|k| {
                let b = TrainBatch { b_pert: draw(&mut vrng, 16), b_ctrl: draw(&mut vrng, 16), cond };
                let plan = StepPlan { t: 50 + 120 * k, eps: normal_matrix(&mut vrng, 16, 4), drop_condition: false, self_condition: false };
                (b, plan)
            })
            .collect();
        let val_loss = |p: &DenoiserParams<Tensor>| {
            val.iter()
                .map(|(b, plan)| loss_value(&model, p, b, plan, LossWeights::default(), &s, None).unwrap().total)
                .sum::<f64>()
        };
        let mut tr = Trainer::new(model, cfg, s.clone()).unwrap();
        let before = val_loss(&tr.params());
        for _ in 0..500 {
            let b = TrainBatch { b_pert: draw(tr.rng(), 16), b_ctrl: draw(tr.rng(), 16), cond };
            tr.train_step(&b).unwrap();
        }
        let after = val_loss(&tr.params());
        assert!(after <= 0.5 * before, "{before} -> {after}");
    }
}
