use alloc::vec::Vec;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Result};

fn eval_scalar<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.input(point.clone())?;
    let out = f(&mut tape, x)?;
    Ok(tape.value(out).item())
}

/// Analytic gradient of a scalar-valued tape function at `point`.
pub fn analytic_gradient<F>(f: &F, point: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.input(point.clone())?;
    let out = f(&mut tape, x)?;
    if tape.value(out).len() != 1 {
        return Err(invalid("gradient check needs a scalar-valued function"));
    }
    Ok(tape.grad(out)?.wrt(x))
}

/// Max over `coords` (all coordinates when `None`) of
/// `|analytic - central| / max(1, |central|)` with central differences of
/// half-width `step`.
pub fn check_gradients<F>(f: F, point: &Tensor, step: f64, coords: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(invalid("finite-difference step must be positive"));
    }
    let analytic = analytic_gradient(&f, point)?;
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval_scalar(&f, &plus)? - eval_scalar(&f, &minus)?) / (2.0 * step);
        let err = libm::fabs(analytic.data()[i] - fd) / libm::fabs(fd).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
