//! TOML run configuration. Every field has a default; command-line flags
//! override whatever the file sets.

use std::path::Path;

use celldiff_core::data::SynthConfig;
use celldiff_core::diffusion::SamplerConfig;
use celldiff_core::train::{LossWeights, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::pipeline::PredictConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            sampler: SamplerSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub genes: usize,
    pub contexts: usize,
    pub perturbations: usize,
    pub replicates: usize,
    pub cells_per_replicate: usize,
    pub control_cells_per_replicate: usize,
    pub sigma_latent: f64,
    pub effect_rank: usize,
    pub effect_scale: f64,
    pub noise_scale: f64,
    pub zero_inflation: f64,
    pub holdout_fraction: f64,
    pub dose_bins: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            genes: d.genes,
            contexts: d.contexts,
            perturbations: d.perturbations,
            replicates: d.replicates,
            cells_per_replicate: d.cells_per_replicate,
            control_cells_per_replicate: d.control_cells_per_replicate,
            sigma_latent: d.sigma_latent,
            effect_rank: d.effect_rank,
            effect_scale: d.effect_scale,
            noise_scale: d.noise_scale,
            zero_inflation: d.zero_inflation,
            holdout_fraction: d.holdout_fraction,
            dose_bins: d.dose_bins,
        }
    }
}

impl SynthSection {
    pub fn to_core(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            genes: self.genes,
            contexts: self.contexts,
            perturbations: self.perturbations,
            replicates: self.replicates,
            cells_per_replicate: self.cells_per_replicate,
            control_cells_per_replicate: self.control_cells_per_replicate,
            sigma_latent: self.sigma_latent,
            effect_rank: self.effect_rank,
            effect_scale: self.effect_scale,
            noise_scale: self.noise_scale,
            zero_inflation: self.zero_inflation,
            holdout_fraction: self.holdout_fraction,
            dose_bins: self.dose_bins,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub self_condition: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { width: 64, blocks: 2, heads: 4, self_condition: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    /// Cells per batch.
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub p_drop: f64,
    pub p_sc: f64,
    pub energy_weight: f64,
    pub mse_weight: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub ema_interval: usize,
    pub eval_interval: usize,
    /// DDIM steps used when scoring validation conditions.
    pub validation_sampler_steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            steps: d.total_steps,
            batch: 32,
            peak_lr: d.peak_lr,
            warmup_steps: d.warmup_steps,
            p_drop: d.p_drop,
            p_sc: d.p_sc,
            energy_weight: d.weights.energy,
            mse_weight: d.weights.mse,
            weight_decay: d.weight_decay,
            clip_norm: d.clip_norm,
            ema_decay: d.ema_decay,
            ema_interval: d.ema_interval,
            eval_interval: d.eval_interval,
            validation_sampler_steps: 20,
        }
    }
}

impl TrainSection {
    pub fn to_core(&self, mode: TrainMode, seed: u64) -> TrainConfig {
        TrainConfig {
            weights: LossWeights { energy: self.energy_weight, mse: self.mse_weight },
            p_drop: self.p_drop,
            p_sc: self.p_sc,
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps.min(self.steps.saturating_sub(1)),
            total_steps: self.steps.max(1),
            clip_norm: self.clip_norm,
            weight_decay: self.weight_decay,
            ema_decay: self.ema_decay,
            ema_interval: self.ema_interval,
            eval_interval: self.eval_interval,
            mode,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    pub eta: f64,
    pub guidance: f64,
    pub self_condition: bool,
    /// Cells per generated batch.
    pub batch: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self { steps: d.steps, eta: d.eta, guidance: d.guidance, self_condition: d.self_condition, batch: 64 }
    }
}

impl SamplerSection {
    pub fn to_predict(&self, seed: u64, zero_shot: bool) -> PredictConfig {
        PredictConfig {
            batch: self.batch,
            sampler: SamplerConfig {
                steps: self.steps,
                eta: self.eta,
                guidance: self.guidance,
                self_condition: self.self_condition,
                seed,
                timesteps: None,
            },
            zero_shot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub balance_controls: bool,
    pub ridge: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { balance_controls: true, ridge: 1.0 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map(Self::load).unwrap_or_else(|| Ok(Self::default()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 3\n[train]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.batch, TrainSection::default().batch);
        assert_eq!(cfg.synth, SynthSection::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nstepz = 1\n").is_err());
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(toml::from_str::<RunConfig>(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn converts_to_core() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.synth.to_core(4), SynthConfig { seed: 4, ..SynthConfig::default() });
        let t = cfg.train.to_core(TrainMode::Perturbation, 1);
        assert!(t.validate().is_ok());
        let tiny = TrainSection { steps: 0, ..TrainSection::default() }.to_core(TrainMode::Perturbation, 0);
        assert!(tiny.validate().is_ok());
    }
}
