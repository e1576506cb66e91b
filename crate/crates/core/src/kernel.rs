//! Energy distance, V-statistic MMD and explicit finite-dimensional kernels.
//!
//! For a kernel with an explicit feature map φ the empirical kernel mean
//! embedding of a batch is just `(1/m) Σ φ(x_j)`, so the RKHS identities used
//! by the training objective can be checked exactly:
//! `‖embed(X) − embed(Y)‖² == mmd_sq(X, Y)` for the V-statistic estimator.
//! These kernels are verification oracles; training uses [`energy_distance`]
//! (the MMD of the negative-distance kernel) directly.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::rng::{seeded, standard_normal};

fn check_genes(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.cols() != y.cols() {
        return Err(Error::ShapeMismatch {
            op: "gene dimension",
            lhs: vec![x.rows(), x.cols()],
            rhs: vec![y.rows(), y.cols()],
        });
    }
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::Empty("cell batch".into()));
    }
    Ok(())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum())
}

fn mean_pairwise(x: &Matrix, y: &Matrix, f: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    // fixed summation order: row-major over (i, j)
    let mut total = 0.0;
    for a in x.iter_rows() {
        for b in y.iter_rows() {
            total += f(a, b);
        }
    }
    total / (x.rows() * y.rows()) as f64
}

/// V-statistic energy distance `2E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖`, pairs include `i == j`.
pub fn energy_distance(x: &Matrix, y: &Matrix) -> Result<f64> {
    check_genes(x, y)?;
    let xy = mean_pairwise(x, y, euclid);
    let xx = mean_pairwise(x, x, euclid);
    let yy = mean_pairwise(y, y, euclid);
    Ok((2.0 * xy - xx - yy).max(0.0))
}

/// Differentiable energy distance between two `[m, G]` tape values.
pub fn energy_distance_on_tape(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let dxy = tape.pairwise_distance(x, y)?;
    let dxx = tape.pairwise_distance(x, x)?;
    let dyy = tape.pairwise_distance(y, y)?;
    let mxy = tape.mean(dxy)?;
    let mxx = tape.mean(dxx)?;
    let myy = tape.mean(dyy)?;
    let cross = tape.scale(mxy, 2.0)?;
    let within = tape.add(mxx, myy)?;
    tape.sub(cross, within)
}

/// Kernel with an explicit feature map, `k(x, y) = ⟨φ(x), φ(y)⟩`.
#[derive(Debug, Clone, PartialEq)]
pub enum FiniteKernel {
    /// φ = identity.
    Linear { genes: usize },
    /// `φ_i(x) = √(2/D) cos(ω_i·x + b_i)`, ω_i standard normal, b_i uniform on [0, 2π).
    RandomFeatures {
        /// D×G frequency matrix.
        freqs: Matrix,
        phases: Vec<f64>,
        seed: u64,
    },
}

/// A point in the (finite-dimensional) feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn squared_distance(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// `alpha·self + (1 − alpha)·other`.
    pub fn mix(&self, alpha: f64, other: &Self) -> Self {
        Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
                .collect(),
        )
    }
}

impl FiniteKernel {
    pub fn linear(genes: usize) -> Self {
        FiniteKernel::Linear { genes }
    }

    pub fn random_features(genes: usize, features: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let freqs = crate::rng::normal_matrix(&mut rng, features, genes);
        let phases = (0..features)
            .map(|_| rng.random_range(0.0..2.0 * core::f64::consts::PI))
            .collect();
        FiniteKernel::RandomFeatures { freqs, phases, seed }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FiniteKernel::Linear { genes } => *genes,
            FiniteKernel::RandomFeatures { freqs, .. } => freqs.cols(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            FiniteKernel::Linear { genes } => *genes,
            FiniteKernel::RandomFeatures { freqs, .. } => freqs.rows(),
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "kernel input",
                lhs: vec![self.input_dim()],
                rhs: vec![x.len()],
            });
        }
        Ok(())
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(match self {
            FiniteKernel::Linear { .. } => x.to_vec(),
            FiniteKernel::RandomFeatures { freqs, phases, .. } => {
                let scale = libm::sqrt(2.0 / freqs.rows() as f64);
                freqs
                    .iter_rows()
                    .zip(phases)
                    .map(|(w, b)| {
                        let z: f64 = w.iter().zip(x).map(|(p, q)| p * q).sum();
                        scale * libm::cos(z + b)
                    })
                    .collect()
            }
        })
    }

    /// D×G Jacobian of φ at `x`.
    pub fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        self.check_input(x)?;
        Ok(match self {
            FiniteKernel::Linear { genes } => Matrix::identity(*genes),
            FiniteKernel::RandomFeatures { freqs, phases, .. } => {
                let scale = libm::sqrt(2.0 / freqs.rows() as f64);
                let mut jac = Matrix::zeros(freqs.rows(), freqs.cols());
                for (i, (w, b)) in freqs.iter_rows().zip(phases).enumerate() {
                    let z: f64 = w.iter().zip(x).map(|(p, q)| p * q).sum();
                    let s = -scale * libm::sin(z + b);
                    for (c, wc) in w.iter().enumerate() {
                        jac.set(i, c, s * wc);
                    }
                }
                jac
            }
        })
    }

    /// Kernel value `k(x, y)`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_input(y)?;
        Ok(match self {
            FiniteKernel::Linear { .. } => {
                self.check_input(x)?;
                x.iter().zip(y).map(|(a, b)| a * b).sum()
            }
            FiniteKernel::RandomFeatures { .. } => {
                let fx = self.features(x)?;
                let fy = self.features(y)?;
                fx.iter().zip(&fy).map(|(a, b)| a * b).sum()
            }
        })
    }
}

/// Empirical kernel mean embedding `(1/m) Σ φ(x_j)`.
pub fn embed(x: &Matrix, k: &FiniteKernel) -> Result<EmbeddingVector> {
    if x.rows() == 0 {
        return Err(Error::Empty("cell batch".into()));
    }
    let mut acc = vec![0.0; k.feature_dim()];
    for row in x.iter_rows() {
        for (a, f) in acc.iter_mut().zip(k.features(row)?) {
            *a += f;
        }
    }
    let inv = 1.0 / x.rows() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(EmbeddingVector(acc))
}

/// V-statistic `mean k(x,x′) + mean k(y,y′) − 2·mean k(x,y)`, from kernel evaluations.
pub fn mmd_sq(x: &Matrix, y: &Matrix, k: &FiniteKernel) -> Result<f64> {
    check_genes(x, y)?;
    if x.cols() != k.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "mmd kernel",
            lhs: vec![x.cols()],
            rhs: vec![k.input_dim()],
        });
    }
    let kv = |a: &[f64], b: &[f64]| k.eval(a, b).expect("dimensions checked");
    let xx = mean_pairwise(x, x, kv);
    let yy = mean_pairwise(y, y, kv);
    let xy = mean_pairwise(x, y, kv);
    Ok((xx + yy - 2.0 * xy).max(0.0))
}

/// `(1/m²) Σ_j J_j J_jᵀ`: covariance of the first-order embedding perturbation
/// when unit Gaussian noise is added independently to every cell.
pub fn noise_covariance_oracle(x: &Matrix, k: &FiniteKernel) -> Result<Matrix> {
    if x.rows() == 0 {
        return Err(Error::Empty("cell batch".into()));
    }
    let d = k.feature_dim();
    let mut cov = Matrix::zeros(d, d);
    for row in x.iter_rows() {
        let j = k.jacobian(row)?;
        let jjt = j.matmul(&j.transpose())?;
        cov = cov.add(&jjt)?;
    }
    let m = x.rows() as f64;
    Ok(cov.scale(1.0 / (m * m)))
}

fn sample_covariance(samples: &[Vec<f64>]) -> Matrix {
    let n = samples.len();
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(d, d);
    for s in samples {
        for a in 0..d {
            let da = s[a] - mean[a];
            for b in 0..d {
                let v = cov.get(a, b) + da * (s[b] - mean[b]);
                cov.set(a, b, v);
            }
        }
    }
    cov.scale(1.0 / (n - 1) as f64)
}

fn noise_trials(
    x: &Matrix,
    sigma: f64,
    trials: usize,
    seed: u64,
    mut per_trial: impl FnMut(&Matrix) -> Result<Vec<f64>>,
) -> Result<Matrix> {
    if sigma <= 0.0 {
        return Err(invalid("noise scale must be positive"));
    }
    if trials < 2 {
        return Err(invalid("need at least two trials"));
    }
    let mut rng = seeded(seed);
    let mut samples = Vec::with_capacity(trials);
    let mut eps = Matrix::zeros(x.rows(), x.cols());
    for _ in 0..trials {
        eps.data_mut().iter_mut().for_each(|e| *e = sigma * standard_normal(&mut rng));
        samples.push(per_trial(&eps)?);
    }
    Ok(sample_covariance(&samples))
}

/// Sample covariance over `trials` of `embed(X + σε) − embed(X)`.
pub fn simulate_embedding_noise(
    x: &Matrix,
    k: &FiniteKernel,
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<Matrix> {
    let base = embed(x, k)?;
    noise_trials(x, sigma, trials, seed, |eps| {
        let noisy = embed(&x.add(eps)?, k)?;
        Ok(noisy.0.iter().zip(&base.0).map(|(a, b)| a - b).collect())
    })
}

/// Same noise draws as [`simulate_embedding_noise`], pushed through the
/// linearization `(1/m) Σ J_j ε_j` instead of the feature map.
pub fn simulate_linearized_noise(
    x: &Matrix,
    k: &FiniteKernel,
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<Matrix> {
    let jacobians = x
        .iter_rows()
        .map(|row| k.jacobian(row))
        .collect::<Result<Vec<_>>>()?;
    let m = x.rows() as f64;
    noise_trials(x, sigma, trials, seed, |eps| {
        let mut delta = vec![0.0; k.feature_dim()];
        for (j, e) in jacobians.iter().zip(eps.iter_rows()) {
            for (i, d) in delta.iter_mut().enumerate() {
                *d += j.row(i).iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / m;
            }
        }
        Ok(delta)
    })
}

/// `½⟨m1 − m2, C⁻¹(m1 − m2)⟩` for a symmetric positive-definite `C`.
pub fn gaussian_kl_shared_cov(m1: &[f64], m2: &[f64], cov: &Matrix) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d || cov.shape() != (d, d) {
        return Err(Error::ShapeMismatch {
            op: "gaussian_kl_shared_cov",
            lhs: vec![m1.len(), m2.len()],
            rhs: vec![cov.rows(), cov.cols()],
        });
    }
    for a in 0..d {
        for b in 0..a {
            let (p, q) = (cov.get(a, b), cov.get(b, a));
            if libm::fabs(p - q) > 1e-12 * (1.0 + libm::fabs(p).max(libm::fabs(q))) {
                return Err(Error::NotPositiveDefinite);
            }
        }
    }
    let c = DMatrix::from_row_slice(d, d, cov.data());
    let chol = c.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let diff = DVector::from_iterator(d, m1.iter().zip(m2).map(|(a, b)| a - b));
    let solved = chol.solve(&diff);
    Ok(0.5 * diff.dot(&solved))
}
