//! # celldiff-core
//!
//! Conditional diffusion over *empirical cell distributions*. A batch of cells
//! is treated as one sample of a distribution, its kernel mean embedding is the
//! object being noised and denoised, and the training signal is the squared
//! RKHS distance between embeddings, which for batches is exactly a V-statistic
//! MMD (here: the energy distance).
//!
//! The crate is `no_std` + `alloc`. All file formats, the CLI and reports live
//! in the companion `celldiff` crate.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`autodiff`] | dense tensors, reverse-mode tape, finite-difference checker |
//! | [`kernel`] | energy distance, V-statistic MMD, finite feature maps, embedding oracles |
//! | [`diffusion`] | VP schedule, forward noising, DDIM, classifier-free guidance, sampler loop |
//! | [`denoiser`] | MM-DiT x0-predictor with AdaLN-Zero conditioning |
//! | [`train`] | hybrid ED+MSE objective, AdamW, LR schedule, EMA, training loop |
//! | [`data`] | synthetic perturbation datasets, preprocessing, HVG, batch sampling |
//! | [`eval`] | pseudobulk metrics, DE analysis, baselines, metric reports |

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod eval;
pub mod kernel;
mod matrix;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use matrix::{CellBatch, Matrix};
