//! Dual-stream MM-DiT x0-predictor.
//!
//! Every cell is a token. The perturbed stream sees `[B_t, B_sc]` (or just
//! `B_t` without self-conditioning), the control stream sees `B_ctrl`. Both are
//! projected to width `d`, concatenated along features for a shared multi-head
//! attention and split back, each with its own AdaLN-Zero modulation and MLP.
//! Only the perturbed stream has an output head. No positional information is
//! used anywhere, so the network is equivariant to permutations of the cells.
//!
//! Parameter layout (the checkpoint order) is the declaration order of
//! [`DenoiserParams`], with blocks in sequence and `w` before `b` in every
//! [`Linear`].

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Tensor, Var};
use crate::diffusion::X0Predictor;
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::rng::{standard_normal, SimRng};

/// Metadata for one condition. `null` swaps every lookup for the null token;
/// a missing perturbation or dose selects that table's null row only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Condition {
    pub context: usize,
    pub perturbation: Option<usize>,
    pub dose: Option<usize>,
    pub null: bool,
}

impl Condition {
    pub fn new(context: usize, perturbation: usize, dose: Option<usize>) -> Self {
        Self { context, perturbation: Some(perturbation), dose, null: false }
    }

    /// Context-only conditioning, as used for marginal pretraining.
    pub fn context_only(context: usize) -> Self {
        Self { context, perturbation: None, dose: None, null: false }
    }

    /// The same condition with metadata dropped.
    pub fn masked(self) -> Self {
        Self { null: true, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub genes: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub self_condition: bool,
    pub contexts: usize,
    pub perturbations: usize,
    pub doses: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            genes: 64,
            width: 64,
            blocks: 2,
            heads: 4,
            self_condition: true,
            contexts: 1,
            perturbations: 1,
            doses: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.genes == 0 || self.width == 0 || self.heads == 0 {
            return Err(invalid("genes, width and heads must be positive"));
        }
        if self.width % 2 != 0 {
            return Err(invalid("width must be even for the sinusoidal timestep code"));
        }
        if self.width % self.heads != 0 {
            return Err(invalid("width must be divisible by heads"));
        }
        if self.blocks == 0 {
            return Err(invalid("need at least one block"));
        }
        Ok(())
    }

    fn input_channels(&self) -> usize {
        if self.self_condition {
            2 * self.genes
        } else {
            self.genes
        }
    }

    pub fn check_condition(&self, cond: &Condition) -> Result<()> {
        if cond.context >= self.contexts {
            return Err(Error::OutOfVocabulary { kind: "context", id: cond.context, size: self.contexts });
        }
        if let Some(p) = cond.perturbation {
            if p >= self.perturbations {
                return Err(Error::OutOfVocabulary { kind: "perturbation", id: p, size: self.perturbations });
            }
        }
        if let Some(d) = cond.dose {
            if d >= self.doses {
                return Err(Error::OutOfVocabulary { kind: "dose", id: d, size: self.doses });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[in, out]`
    pub w: T,
    /// `[1, out]`
    pub b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamParams<T> {
    /// `d → 6d`: (β, γ, g) for attention then for the MLP.
    pub modulation: Linear<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub qkv: Linear<T>,
    pub attn_out: Linear<T>,
    pub pert: StreamParams<T>,
    pub ctrl: StreamParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<T> {
    pub pert_in: Linear<T>,
    pub ctrl_in: Linear<T>,
    /// The single shared gene-identity embedding, `[1, d]`.
    pub gene_token: T,
    pub time_fc1: Linear<T>,
    pub time_fc2: Linear<T>,
    /// `[contexts + 1, d]`, null row last.
    pub context_table: T,
    /// `[perturbations + 1, d]`, null row last.
    pub perturbation_table: T,
    /// `[doses + 1, d]`, null row last.
    pub dose_table: T,
    /// `[e_t, e_ctx, e_pert + e_dose]` (3d) → d.
    pub cond_fc1: Linear<T>,
    pub cond_fc2: Linear<T>,
    pub blocks: Vec<BlockParams<T>>,
    /// `d → 2d`: (β, γ) for the final normalization.
    pub final_modulation: Linear<T>,
    pub out: Linear<T>,
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Gaussian with variance `1 / fan_in`.
    Weight { fan_in: usize },
    Embedding,
    Zero,
}

impl<T> Linear<T> {
    fn try_map<'a, U>(&'a self, f: &mut impl FnMut(&'a T) -> Result<U>) -> Result<Linear<U>> {
        Ok(Linear { w: f(&self.w)?, b: f(&self.b)? })
    }
}

impl<T> StreamParams<T> {
    fn try_map<'a, U>(&'a self, f: &mut impl FnMut(&'a T) -> Result<U>) -> Result<StreamParams<U>> {
        Ok(StreamParams {
            modulation: self.modulation.try_map(f)?,
            fc1: self.fc1.try_map(f)?,
            fc2: self.fc2.try_map(f)?,
        })
    }
}

impl<T> BlockParams<T> {
    fn try_map<'a, U>(&'a self, f: &mut impl FnMut(&'a T) -> Result<U>) -> Result<BlockParams<U>> {
        Ok(BlockParams {
            qkv: self.qkv.try_map(f)?,
            attn_out: self.attn_out.try_map(f)?,
            pert: self.pert.try_map(f)?,
            ctrl: self.ctrl.try_map(f)?,
        })
    }
}

impl<T> DenoiserParams<T> {
    /// Applies `f` to every parameter in layout order.
    pub fn try_map<'a, U>(&'a self, mut f: impl FnMut(&'a T) -> Result<U>) -> Result<DenoiserParams<U>> {
        let f = &mut f;
        Ok(DenoiserParams {
            pert_in: self.pert_in.try_map(f)?,
            ctrl_in: self.ctrl_in.try_map(f)?,
            gene_token: f(&self.gene_token)?,
            time_fc1: self.time_fc1.try_map(f)?,
            time_fc2: self.time_fc2.try_map(f)?,
            context_table: f(&self.context_table)?,
            perturbation_table: f(&self.perturbation_table)?,
            dose_table: f(&self.dose_table)?,
            cond_fc1: self.cond_fc1.try_map(f)?,
            cond_fc2: self.cond_fc2.try_map(f)?,
            blocks: self.blocks.iter().map(|b| b.try_map(f)).collect::<Result<_>>()?,
            final_modulation: self.final_modulation.try_map(f)?,
            out: self.out.try_map(f)?,
        })
    }

    /// Parameters in layout order.
    pub fn to_vec(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.try_map(|t| {
            out.push(t);
            Ok(())
        })
        .expect("collection cannot fail");
        out
    }

    /// Builds a parameter set, calling `make(init, [rows, cols])` in layout order.
    pub fn build(config: &ModelConfig, mut make: impl FnMut(Init, [usize; 2]) -> Result<T>) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let make = &mut make;
        let pert_in = lin(make, config.input_channels(), d, false)?;
        let ctrl_in = lin(make, config.genes, d, false)?;
        let gene_token = make(Init::Zero, [1, d])?;
        let time_fc1 = lin(make, d, d, false)?;
        let time_fc2 = lin(make, d, d, false)?;
        let context_table = make(Init::Embedding, [config.contexts + 1, d])?;
        let perturbation_table = make(Init::Embedding, [config.perturbations + 1, d])?;
        let dose_table = make(Init::Embedding, [config.doses + 1, d])?;
        let cond_fc1 = lin(make, 3 * d, d, false)?;
        let cond_fc2 = lin(make, d, d, false)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let qkv = lin(make, 2 * d, 6 * d, false)?;
            let attn_out = lin(make, 2 * d, 2 * d, false)?;
            let pert = stream(make, d)?;
            let ctrl = stream(make, d)?;
            blocks.push(BlockParams { qkv, attn_out, pert, ctrl });
        }
        let final_modulation = lin(make, d, 2 * d, true)?;
        let out = lin(make, d, config.genes, true)?;
        Ok(DenoiserParams {
            pert_in,
            ctrl_in,
            gene_token,
            time_fc1,
            time_fc2,
            context_table,
            perturbation_table,
            dose_table,
            cond_fc1,
            cond_fc2,
            blocks,
            final_modulation,
            out,
        })
    }
}

fn lin<T>(
    make: &mut impl FnMut(Init, [usize; 2]) -> Result<T>,
    fan_in: usize,
    out: usize,
    zero: bool,
) -> Result<Linear<T>> {
    let init = if zero { Init::Zero } else { Init::Weight { fan_in } };
    Ok(Linear { w: make(init, [fan_in, out])?, b: make(Init::Zero, [1, out])? })
}

fn stream<T>(make: &mut impl FnMut(Init, [usize; 2]) -> Result<T>, d: usize) -> Result<StreamParams<T>> {
    Ok(StreamParams {
        modulation: lin(make, d, 6 * d, true)?,
        fc1: lin(make, d, 4 * d, false)?,
        fc2: lin(make, 4 * d, d, false)?,
    })
}

fn init_tensor(init: Init, shape: [usize; 2], rng: &mut SimRng) -> Tensor {
    let n = shape[0] * shape[1];
    let data = match init {
        Init::Zero => vec![0.0; n],
        Init::Embedding => (0..n).map(|_| standard_normal(rng)).collect(),
        Init::Weight { fan_in } => {
            let sd = 1.0 / libm::sqrt(fan_in as f64);
            (0..n).map(|_| sd * standard_normal(rng)).collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("shape by construction")
}

impl DenoiserParams<Tensor> {
    pub fn init(config: &ModelConfig, rng: &mut SimRng) -> Result<Self> {
        Self::build(config, |init, shape| Ok(init_tensor(init, shape, rng)))
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::build(config, |_, shape| Ok(Tensor::zeros(&shape)))
    }

    pub fn num_parameters(&self) -> usize {
        self.to_vec().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for t in self.to_vec() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(config: &ModelConfig, flat: &[f64]) -> Result<Self> {
        let mut offset = 0;
        let params = Self::build(config, |_, shape| {
            let n = shape[0] * shape[1];
            let chunk = flat
                .get(offset..offset + n)
                .ok_or_else(|| invalid("flat parameter vector too short"))?;
            offset += n;
            Tensor::new(shape.to_vec(), chunk.to_vec())
        })?;
        if offset != flat.len() {
            return Err(invalid("flat parameter vector too long"));
        }
        Ok(params)
    }

    /// Records every parameter on `tape`, as differentiable inputs or constants.
    pub fn record(&self, tape: &mut Tape, differentiable: bool) -> Result<DenoiserParams<Var>> {
        self.try_map(|t| if differentiable { tape.input(t.clone()) } else { tape.constant(t.clone()) })
    }
}

/// `[sin(t·f_0) … sin(t·f_{h−1}), cos(t·f_0) … cos(t·f_{h−1})]`, `f_i = 10000^(−i/h)`, `h = d/2`.
pub fn sinusoidal_code(t: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| libm::pow(10_000.0, -(i as f64) / half as f64))
        .collect();
    let mut code = Vec::with_capacity(d);
    code.extend(freqs.iter().map(|f| libm::sin(t as f64 * f)));
    code.extend(freqs.iter().map(|f| libm::cos(t as f64 * f)));
    code
}

fn linear(tape: &mut Tape, x: Var, l: &Linear<Var>) -> Result<Var> {
    let xw = tape.matmul(x, l.w)?;
    tape.add(xw, l.b)
}

fn lookup(tape: &mut Tape, table: Var, index: usize) -> Result<Var> {
    let rows = tape.value(table).shape()[0];
    let mut onehot = vec![0.0; rows];
    onehot[index] = 1.0;
    let sel = tape.constant(Tensor::row(onehot))?;
    tape.matmul(sel, table)
}

/// Timestep embedding `e_t = MLP(sinusoid(t))`, shape `[1, d]`.
pub fn embed_timestep(tape: &mut Tape, p: &DenoiserParams<Var>, t: usize, d: usize) -> Result<Var> {
    let code = tape.constant(Tensor::row(sinusoidal_code(t, d)))?;
    let h = linear(tape, code, &p.time_fc1)?;
    let h = tape.silu(h)?;
    linear(tape, h, &p.time_fc2)
}

/// Conditioning vector `s = MLP([e_t, e_y])`, shape `[1, d]`.
pub fn encode_covariates(
    tape: &mut Tape,
    p: &DenoiserParams<Var>,
    config: &ModelConfig,
    cond: &Condition,
    e_t: Var,
) -> Result<Var> {
    config.check_condition(cond)?;
    let (ctx, pert, dose) = if cond.null {
        (config.contexts, config.perturbations, config.doses)
    } else {
        (
            cond.context,
            cond.perturbation.unwrap_or(config.perturbations),
            cond.dose.unwrap_or(config.doses),
        )
    };
    let e_ctx = lookup(tape, p.context_table, ctx)?;
    let e_pert = lookup(tape, p.perturbation_table, pert)?;
    let e_dose = lookup(tape, p.dose_table, dose)?;
    let e_drug = tape.add(e_pert, e_dose)?;
    let joint = tape.concat(&[e_t, e_ctx, e_drug])?;
    let h = linear(tape, joint, &p.cond_fc1)?;
    let h = tape.silu(h)?;
    linear(tape, h, &p.cond_fc2)
}

/// `LN(h) ⊙ (1 + γ) + β`.
fn modulate(tape: &mut Tape, h: Var, beta: Var, gamma: Var) -> Result<Var> {
    let n = tape.layer_norm(h)?;
    let scaled = tape.mul(n, gamma)?;
    let n = tape.add(n, scaled)?;
    tape.add(n, beta)
}

fn gated(tape: &mut Tape, h: Var, delta: Var, gate: Var) -> Result<Var> {
    let d = tape.mul(delta, gate)?;
    tape.add(h, d)
}

fn mlp(tape: &mut Tape, x: Var, s: &StreamParams<Var>) -> Result<Var> {
    let h = linear(tape, x, &s.fc1)?;
    let h = tape.silu(h)?;
    linear(tape, h, &s.fc2)
}

/// One joint-attention block over `m` tokens per stream.
pub fn mmdit_block(
    tape: &mut Tape,
    block: &BlockParams<Var>,
    config: &ModelConfig,
    h_pert: Var,
    h_ctrl: Var,
    s_act: Var,
) -> Result<(Var, Var)> {
    let (mp, mc) = (tape.value(h_pert).shape()[0], tape.value(h_ctrl).shape()[0]);
    if mp != mc {
        return Err(Error::ShapeMismatch {
            op: "mmdit_block streams",
            lhs: tape.value(h_pert).shape().to_vec(),
            rhs: tape.value(h_ctrl).shape().to_vec(),
        });
    }
    let d = config.width;
    let mod_p = linear(tape, s_act, &block.pert.modulation)?;
    let mod_p = tape.split(mod_p, &[d; 6])?;
    let mod_c = linear(tape, s_act, &block.ctrl.modulation)?;
    let mod_c = tape.split(mod_c, &[d; 6])?;

    let xp = modulate(tape, h_pert, mod_p[0], mod_p[1])?;
    let xc = modulate(tape, h_ctrl, mod_c[0], mod_c[1])?;
    let x = tape.concat(&[xp, xc])?;
    let qkv = linear(tape, x, &block.qkv)?;
    let qkv = tape.split(qkv, &[2 * d; 3])?;
    let dh = 2 * d / config.heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let q = tape.slice(qkv[0], h * dh, dh)?;
        let k = tape.slice(qkv[1], h * dh, dh)?;
        let v = tape.slice(qkv[2], h * dh, dh)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax(scores)?;
        heads.push(tape.matmul(attn, v)?);
    }
    let joined = tape.concat(&heads)?;
    let out = linear(tape, joined, &block.attn_out)?;
    let parts = tape.split(out, &[d, d])?;
    let h_pert = gated(tape, h_pert, parts[0], mod_p[2])?;
    let h_ctrl = gated(tape, h_ctrl, parts[1], mod_c[2])?;

    let xp = modulate(tape, h_pert, mod_p[3], mod_p[4])?;
    let dp = mlp(tape, xp, &block.pert)?;
    let h_pert = gated(tape, h_pert, dp, mod_p[5])?;
    let xc = modulate(tape, h_ctrl, mod_c[3], mod_c[4])?;
    let dc = mlp(tape, xc, &block.ctrl)?;
    let h_ctrl = gated(tape, h_ctrl, dc, mod_c[5])?;
    Ok((h_pert, h_ctrl))
}

/// Full forward pass. `b_sc` is ignored unless self-conditioning is configured;
/// `None` fills the slot with zeros.
#[allow(clippy::too_many_arguments)]
pub fn denoise(
    tape: &mut Tape,
    p: &DenoiserParams<Var>,
    config: &ModelConfig,
    b_t: Var,
    b_sc: Option<Var>,
    b_ctrl: Var,
    t: usize,
    cond: &Condition,
) -> Result<Var> {
    let shape = tape.value(b_t).shape().to_vec();
    let g = config.genes;
    if shape.len() != 2 || shape[1] != g || tape.value(b_ctrl).shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "denoise",
            lhs: shape,
            rhs: tape.value(b_ctrl).shape().to_vec(),
        });
    }
    let x = if config.self_condition {
        let sc = match b_sc {
            Some(v) => {
                if tape.value(v).shape() != shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        op: "denoise self-conditioning",
                        lhs: shape,
                        rhs: tape.value(v).shape().to_vec(),
                    });
                }
                v
            }
            None => tape.constant(Tensor::zeros(&shape))?,
        };
        tape.concat(&[b_t, sc])?
    } else {
        b_t
    };
    let hp = linear(tape, x, &p.pert_in)?;
    let mut h_pert = tape.add(hp, p.gene_token)?;
    let hc = linear(tape, b_ctrl, &p.ctrl_in)?;
    let mut h_ctrl = tape.add(hc, p.gene_token)?;

    let e_t = embed_timestep(tape, p, t, config.width)?;
    let s = encode_covariates(tape, p, config, cond, e_t)?;
    let s_act = tape.silu(s)?;
    for block in &p.blocks {
        (h_pert, h_ctrl) = mmdit_block(tape, block, config, h_pert, h_ctrl, s_act)?;
    }
    let fm = linear(tape, s_act, &p.final_modulation)?;
    let fm = tape.split(fm, &[config.width; 2])?;
    let h = modulate(tape, h_pert, fm[0], fm[1])?;
    let out = linear(tape, h, &p.out)?;
    tape.nonneg(out)
}

/// Parameters plus configuration; the inference-side model.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: ModelConfig,
    pub params: DenoiserParams<Tensor>,
}

impl Denoiser {
    pub fn new(config: ModelConfig, rng: &mut SimRng) -> Result<Self> {
        let params = DenoiserParams::init(&config, rng)?;
        Ok(Self { config, params })
    }
}

impl X0Predictor for Denoiser {
    fn genes(&self) -> usize {
        self.config.genes
    }

    fn predict_x0(
        &self,
        b_t: &Matrix,
        b_sc: Option<&Matrix>,
        b_ctrl: &Matrix,
        t: usize,
        cond: &Condition,
    ) -> Result<Matrix> {
        let mut tape = Tape::new();
        let p = self.params.record(&mut tape, false)?;
        let bt = tape.constant(b_t.into())?;
        let sc = match b_sc {
            Some(m) => Some(tape.constant(m.into())?),
            None => None,
        };
        let ctrl = tape.constant(b_ctrl.into())?;
        let out = denoise(&mut tape, &p, &self.config, bt, sc, ctrl, t, cond)?;
        tape.value(out).to_matrix()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, seeded};

    fn config() -> ModelConfig {
        ModelConfig {
            genes: 5,
            width: 8,
            blocks: 2,
            heads: 2,
            self_condition: true,
            contexts: 3,
            perturbations: 4,
            doses: 2,
        }
    }

    /// Fresh parameters with every zero-initialized tensor filled with noise too.
    fn random_params(config: &ModelConfig, seed: u64) -> DenoiserParams<Tensor> {
        let mut rng = seeded(seed);
        DenoiserParams::build(config, |_, shape| {
            let m = normal_matrix(&mut rng, shape[0], shape[1]).scale(0.3);
            Ok(m.into())
        })
        .unwrap()
    }

    fn batch(seed: u64, m: usize, g: usize) -> Matrix {
        normal_matrix(&mut seeded(seed), m, g)
    }

    fn run_block(params: &DenoiserParams<Tensor>, cfg: &ModelConfig, hp: &Matrix, hc: &Matrix) -> (Matrix, Matrix) {
        let mut tape = Tape::new();
        let p = params.record(&mut tape, false).unwrap();
        let hpv = tape.constant(hp.into()).unwrap();
        let hcv = tape.constant(hc.into()).unwrap();
        let e_t = embed_timestep(&mut tape, &p, 17, cfg.width).unwrap();
        let s = encode_covariates(&mut tape, &p, cfg, &Condition::new(1, 2, Some(0)), e_t).unwrap();
        let s = tape.silu(s).unwrap();
        let (a, b) = mmdit_block(&mut tape, &p.blocks[0], cfg, hpv, hcv, s).unwrap();
        (tape.value(a).to_matrix().unwrap(), tape.value(b).to_matrix().unwrap())
    }

    #[test]
    fn sinusoidal_code_examples() {
        let zero = sinusoidal_code(0, 8);
        assert_eq!(zero, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(sinusoidal_code(5, 8), sinusoidal_code(5, 8));
        let (a, b) = (sinusoidal_code(1, 16), sinusoidal_code(2, 16));
        for i in 0..8 {
            assert!(a[i] != b[i] || a[i + 8] != b[i + 8]);
        }
        let codes: Vec<_> = (0..=1000).map(|t| sinusoidal_code(t, 64)).collect();
        for i in 1..codes.len() {
            assert_ne!(codes[i], codes[i - 1]);
        }
    }

    #[test]
    fn fresh_blocks_are_exact_identities() {
        let cfg = config();
        let params = DenoiserParams::init(&cfg, &mut seeded(1)).unwrap();
        let hp = batch(2, 6, cfg.width);
        let hc = batch(3, 6, cfg.width);
        let (a, b) = run_block(&params, &cfg, &hp, &hc);
        assert_eq!(a, hp);
        assert_eq!(b, hc);
    }

    #[test]
    fn fresh_model_outputs_zeros() {
        let cfg = config();
        let model = Denoiser::new(cfg, &mut seeded(4)).unwrap();
        let out = model
            .predict_x0(&batch(5, 7, 5), Some(&batch(6, 7, 5)), &batch(7, 7, 5), 300, &Condition::new(0, 1, None))
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_nonnegative() {
        let cfg = config();
        let model = Denoiser { config: cfg, params: random_params(&cfg, 8) };
        let out = model.predict_x0(&batch(9, 6, 5), None, &batch(10, 6, 5), 50, &Condition::new(2, 3, Some(1))).unwrap();
        assert!(out.data().iter().all(|&v| v >= 0.0));
        assert!(out.data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn single_token_attention_is_trivial() {
        let cfg = config();
        let params = random_params(&cfg, 11);
        let hp = batch(12, 1, cfg.width);
        let hc = batch(13, 1, cfg.width);
        let (a, _) = run_block(&params, &cfg, &hp, &hc);
        assert!(a.is_finite());
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 1], vec![3.2]).unwrap()).unwrap();
        let s = tape.softmax(x).unwrap();
        assert_eq!(tape.value(s).item(), 1.0);
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let cfg = config();
        let params = random_params(&cfg, 14);
        let hp = batch(15, 6, cfg.width);
        let hc = batch(16, 6, cfg.width);
        let perm = [3, 0, 5, 1, 4, 2];
        let (a, b) = run_block(&params, &cfg, &hp, &hc);
        let (pa, pb) = run_block(&params, &cfg, &hp.select_rows(&perm), &hc.select_rows(&perm));
        assert!(pa.max_abs_diff(&a.select_rows(&perm)) < 1e-12);
        assert!(pb.max_abs_diff(&b.select_rows(&perm)) < 1e-12);
    }

    #[test]
    fn denoiser_permutation_behaviour() {
        let cfg = config();
        let model = Denoiser { config: cfg, params: random_params(&cfg, 17) };
        let (bt, sc, ctrl) = (batch(18, 6, 5), batch(19, 6, 5), batch(20, 6, 5));
        let cond = Condition::new(1, 1, None);
        let base = model.predict_x0(&bt, Some(&sc), &ctrl, 400, &cond).unwrap();
        let perm = [5, 4, 0, 2, 1, 3];
        let joint = model
            .predict_x0(
                &bt.select_rows(&perm),
                Some(&sc.select_rows(&perm)),
                &ctrl.select_rows(&perm),
                400,
                &cond,
            )
            .unwrap();
        assert!(joint.max_abs_diff(&base.select_rows(&perm)) < 1e-12);
    }

    #[test]
    fn control_stream_influences_prediction() {
        let cfg = config();
        let params = random_params(&cfg, 21);
        let (bt, ctrl) = (batch(22, 4, 5), batch(23, 4, 5));
        let mut tape = Tape::new();
        let p = params.record(&mut tape, false).unwrap();
        let btv = tape.constant(bt.into()).unwrap();
        let cv = tape.input(ctrl.into()).unwrap();
        let out = denoise(&mut tape, &p, &cfg, btv, None, cv, 10, &Condition::new(0, 0, None)).unwrap();
        let total = tape.sum(out).unwrap();
        let g = tape.grad(total).unwrap().wrt(cv);
        assert!(g.squared_norm() > 0.0);
    }

    #[test]
    fn covariate_encoding() {
        let cfg = config();
        let params = random_params(&cfg, 24);
        let encode = |cond: Condition| {
            let mut tape = Tape::new();
            let p = params.record(&mut tape, false).unwrap();
            let e_t = embed_timestep(&mut tape, &p, 3, cfg.width).unwrap();
            let s = encode_covariates(&mut tape, &p, &cfg, &cond, e_t).unwrap();
            tape.value(s).data().to_vec()
        };
        let a = encode(Condition::new(0, 1, None));
        let b = encode(Condition::new(0, 2, None));
        assert_ne!(a, b);
        let masked = encode(Condition::new(0, 1, None).masked());
        assert_eq!(masked, encode(Condition::new(2, 3, Some(1)).masked()));
        assert_ne!(masked, a);
        let marginal = encode(Condition::context_only(0));
        assert_ne!(marginal, masked);
        assert_ne!(marginal, a);

        let mut tape = Tape::new();
        let p = params.record(&mut tape, false).unwrap();
        let e_t = embed_timestep(&mut tape, &p, 3, cfg.width).unwrap();
        assert!(matches!(
            encode_covariates(&mut tape, &p, &cfg, &Condition::new(3, 0, None), e_t),
            Err(Error::OutOfVocabulary { kind: "context", .. })
        ));
        assert!(encode_covariates(&mut tape, &p, &cfg, &Condition::new(0, 4, None), e_t).is_err());
        assert!(encode_covariates(&mut tape, &p, &cfg, &Condition::new(0, 0, Some(2)), e_t).is_err());
    }

    #[test]
    fn dose_is_summed_into_perturbation_slot() {
        let cfg = config();
        let mut params = random_params(&cfg, 25);
        let d = cfg.width;
        let encode = |params: &DenoiserParams<Tensor>, cond: Condition| {
            let mut tape = Tape::new();
            let p = params.record(&mut tape, false).unwrap();
            let e_t = embed_timestep(&mut tape, &p, 3, d).unwrap();
            let s = encode_covariates(&mut tape, &p, &cfg, &cond, e_t).unwrap();
            tape.value(s).data().to_vec()
        };
        let with_dose = encode(&params, Condition::new(1, 1, Some(0)));
        // move dose 0's embedding into perturbation 1's row and zero the dose row
        let pt = params.perturbation_table.data().to_vec();
        let dt = params.dose_table.data().to_vec();
        let null_dose = &dt[2 * d..3 * d];
        for j in 0..d {
            params.perturbation_table.data_mut()[d + j] = pt[d + j] + dt[j] - null_dose[j];
        }
        let moved = encode(&params, Condition::new(1, 1, None));
        for (a, b) in with_dose.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let cfg = config();
        let model = Denoiser::new(cfg, &mut seeded(26)).unwrap();
        let cond = Condition::new(0, 0, None);
        assert!(model.predict_x0(&batch(1, 4, 5), None, &batch(2, 3, 5), 5, &cond).is_err());
        assert!(model.predict_x0(&batch(1, 4, 4), None, &batch(2, 4, 4), 5, &cond).is_err());
        assert!(model.predict_x0(&batch(1, 4, 5), Some(&batch(3, 4, 4)), &batch(2, 4, 5), 5, &cond).is_err());
        let params = random_params(&cfg, 27);
        let mut tape = Tape::new();
        let p = params.record(&mut tape, false).unwrap();
        let a = tape.constant(batch(1, 4, cfg.width).into()).unwrap();
        let b = tape.constant(batch(2, 3, cfg.width).into()).unwrap();
        let s = tape.constant(Tensor::zeros(&[1, cfg.width])).unwrap();
        assert!(mmdit_block(&mut tape, &p.blocks[0], &cfg, a, b, s).is_err());
        let bad = ModelConfig { width: 6, heads: 4, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let cfg = config();
        let params = random_params(&cfg, 28);
        let flat = params.flatten();
        assert_eq!(flat.len(), params.num_parameters());
        assert_eq!(DenoiserParams::unflatten(&cfg, &flat).unwrap(), params);
        assert!(DenoiserParams::unflatten(&cfg, &flat[1..]).is_err());
        let mut long = flat.clone();
        long.push(0.0);
        assert!(DenoiserParams::unflatten(&cfg, &long).is_err());
    }

    #[test]
    fn modulation_and_output_heads_start_at_zero() {
        let cfg = config();
        let p = DenoiserParams::init(&cfg, &mut seeded(29)).unwrap();
        let zero = |l: &Linear<Tensor>| l.w.data().iter().chain(l.b.data()).all(|&v| v == 0.0);
        for b in &p.blocks {
            assert!(zero(&b.pert.modulation) && zero(&b.ctrl.modulation));
            assert!(!zero(&b.qkv));
        }
        assert!(zero(&p.final_modulation) && zero(&p.out));
        assert_eq!(p.out.w.shape(), &[cfg.width, cfg.genes]);
        assert_eq!(p.pert_in.w.shape(), &[2 * cfg.genes, cfg.width]);
    }
}
