use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::matrix::gemm;

/// Variance epsilon of [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive applications. Inputs always precede their consumer on the tape.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Differentiable leaf.
    Input,
    /// Leaf excluded from differentiation.
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var, Vec<usize>),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize, len: usize },
    Sum(Var),
    Mean(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Silu(Var),
    /// ReLU whose derivative at exactly 0 is 1 (used as the output head).
    NonNeg(Var),
    LayerNorm(Var),
    Softmax(Var),
    PairwiseDistance(Var, Var),
    StopGradient(Var),
}

impl Op {
    pub fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Input | Constant => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | PairwiseDistance(a, b) => vec![*a, *b],
            Scale(a, _) | Transpose(a) | Reshape(a, _) | Sum(a) | Mean(a) | Sqrt(a) | Exp(a)
            | Log(a) | Relu(a) | Silu(a) | NonNeg(a) | LayerNorm(a) | Softmax(a)
            | StopGradient(a) => vec![*a],
            Slice { src, .. } => vec![*src],
            Concat(vs) => vs.clone(),
        }
    }

    pub fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Input => "input",
            Constant => "constant",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "scale",
            MatMul(..) => "matmul",
            Transpose(..) => "transpose",
            Reshape(..) => "reshape",
            Concat(..) => "concat",
            Slice { .. } => "slice",
            Sum(..) => "sum",
            Mean(..) => "mean",
            Sqrt(..) => "sqrt",
            Exp(..) => "exp",
            Log(..) => "log",
            Relu(..) => "relu",
            Silu(..) => "silu",
            NonNeg(..) => "nonneg",
            LayerNorm(..) => "layer_norm",
            Softmax(..) => "softmax",
            PairwiseDistance(..) => "pairwise_distance",
            StopGradient(..) => "stop_gradient",
        }
    }
}

/// Reverse-mode computation record.
///
/// Operations evaluate eagerly as they are recorded; the record can later be
/// replayed on fresh leaf values with [`Tape::forward_eval`] and differentiated
/// with [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no path from the output reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zeros when unreachable.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `rhs` equals `lhs` in shape, or is a `[1, n]` row broadcast over a `[r, n]` lhs.
fn broadcast_kind(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<bool> {
    if lhs.shape() == rhs.shape() {
        return Ok(false);
    }
    match (lhs.shape(), rhs.shape()) {
        ([_, n], [1, k]) if n == k => Ok(true),
        _ => Err(mismatch(op, lhs, rhs)),
    }
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let bcast = broadcast_kind(op, a, b)?;
    let data = if bcast {
        let n = b.len();
        a.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % n]))
            .collect()
    } else {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    };
    Tensor::new(a.shape().to_vec(), data)
}

fn unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

fn as_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn layer_norm_rows(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut out = x.clone();
    if n == 0 {
        return out;
    }
    for row in out.data_mut().chunks_exact_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let r = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
        row.iter_mut().for_each(|v| *v = (*v - mean) * r);
    }
    out
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut out = x.clone();
    if n == 0 {
        return out;
    }
    for row in out.data_mut().chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn compute(op: &Op, values: &[Tensor]) -> Result<Tensor> {
    use Op::*;
    let v = |x: &Var| &values[x.0];
    Ok(match op {
        Input | Constant => unreachable!("leaves carry their own values"),
        Add(a, b) => binary("add", v(a), v(b), |x, y| x + y)?,
        Sub(a, b) => binary("sub", v(a), v(b), |x, y| x - y)?,
        Mul(a, b) => binary("mul", v(a), v(b), |x, y| x * y)?,
        Scale(a, s) => unary(v(a), |x| x * s),
        MatMul(a, b) => {
            let (m, k) = as_2d("matmul", v(a))?;
            let (k2, n) = as_2d("matmul", v(b))?;
            if k != k2 {
                return Err(mismatch("matmul", v(a), v(b)));
            }
            let mut out = Tensor::zeros(&[m, n]);
            gemm(m, k, n, v(a).data(), (k, 1), v(b).data(), (n, 1), out.data_mut(), 0.0);
            out
        }
        Transpose(a) => {
            let (r, c) = as_2d("transpose", v(a))?;
            let src = v(a).data();
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = src[i * c + j];
                }
            }
            Tensor::new(vec![c, r], data)?
        }
        Reshape(a, shape) => {
            let n: usize = shape.iter().product();
            if n != v(a).len() {
                return Err(Error::ShapeMismatch {
                    op: "reshape",
                    lhs: v(a).shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            Tensor::new(shape.clone(), v(a).data().to_vec())?
        }
        Concat(vs) => {
            let first = v(vs.first().ok_or_else(|| Error::Empty("concat".into()))?);
            let lead = &first.shape()[..first.shape().len().saturating_sub(1)];
            let outer = first.outer();
            let mut total = 0;
            for x in vs {
                let t = v(x);
                if t.shape().len() != first.shape().len() || &t.shape()[..lead.len()] != lead {
                    return Err(mismatch("concat", first, t));
                }
                total += t.last_dim();
            }
            let mut data = Vec::with_capacity(outer * total);
            for r in 0..outer {
                for x in vs {
                    let t = v(x);
                    let w = t.last_dim();
                    data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::new(shape, data)?
        }
        Slice { src, start, len } => {
            let t = v(src);
            let w = t.last_dim();
            if start + len > w || t.shape().is_empty() {
                return Err(Error::ShapeMismatch {
                    op: "slice",
                    lhs: t.shape().to_vec(),
                    rhs: vec![*start, *len],
                });
            }
            let mut data = Vec::with_capacity(t.outer() * len);
            for r in 0..t.outer() {
                data.extend_from_slice(&t.data()[r * w + start..r * w + start + len]);
            }
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = *len;
            Tensor::new(shape, data)?
        }
        Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
        Mean(a) => {
            let t = v(a);
            if t.is_empty() {
                return Err(Error::Empty("mean".into()));
            }
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        }
        Sqrt(a) => unary(v(a), libm::sqrt),
        Exp(a) => unary(v(a), libm::exp),
        Log(a) => unary(v(a), libm::log),
        Relu(a) | NonNeg(a) => unary(v(a), |x| if x > 0.0 { x } else { 0.0 }),
        Silu(a) => unary(v(a), |x| x * sigmoid(x)),
        LayerNorm(a) => layer_norm_rows(v(a)),
        Softmax(a) => softmax_rows(v(a)),
        PairwiseDistance(a, b) => {
            let (m, g) = as_2d("pairwise_distance", v(a))?;
            let (n, g2) = as_2d("pairwise_distance", v(b))?;
            if g != g2 {
                return Err(mismatch("pairwise_distance", v(a), v(b)));
            }
            let (xa, xb) = (v(a).data(), v(b).data());
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                let xi = &xa[i * g..(i + 1) * g];
                for j in 0..n {
                    let yj = &xb[j * g..(j + 1) * g];
                    let sq: f64 = xi.iter().zip(yj).map(|(p, q)| (p - q) * (p - q)).sum();
                    data.push(libm::sqrt(sq));
                }
            }
            Tensor::new(vec![m, n], data)?
        }
        StopGradient(a) => v(a).clone(),
    })
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Recorded value of every node, in recording order.
    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    fn leaf(&mut self, op: Op, t: Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("{} leaf", op.name())));
        }
        self.ops.push(op);
        self.values.push(t);
        Ok(Var(self.ops.len() - 1))
    }

    /// Records a differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(Op::Input, t)
    }

    /// Records a leaf that gradients never flow into.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(Op::Constant, t)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let out = compute(&op, &self.values)?;
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        self.ops.push(op);
        self.values.push(out);
        Ok(Var(self.ops.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }
    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::Concat(parts.to_vec()))
    }
    /// Columns `start..start + len` of the last axis.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::Slice { src, start, len })
    }
    /// Splits the last axis into consecutive pieces of the given widths.
    pub fn split(&mut self, src: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice(src, start, w)?);
            start += w;
        }
        Ok(out)
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sqrt(a))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Silu(a))
    }
    pub fn nonneg(&mut self, a: Var) -> Result<Var> {
        self.push(Op::NonNeg(a))
    }
    /// Normalizes each row over the last axis (no affine parameters).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LayerNorm(a))
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a))
    }
    /// `[m, G] × [n, G] -> [m, n]` Euclidean distances between rows.
    pub fn pairwise_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::PairwiseDistance(a, b))
    }
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        self.push(Op::StopGradient(a))
    }

    /// Replays the record on new leaf values, given in recording order.
    ///
    /// Returns the value of every node. Replaying with the original leaves
    /// reproduces the recorded values bit-exactly.
    pub fn forward_eval(&self, leaves: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.ops.len());
        let mut next_leaf = leaves.iter();
        for (i, op) in self.ops.iter().enumerate() {
            let t = match op {
                Op::Input | Op::Constant => {
                    let t = next_leaf
                        .next()
                        .ok_or_else(|| Error::InvalidArgument("too few leaf values".into()))?;
                    if t.shape() != self.values[i].shape() {
                        return Err(mismatch("forward_eval", &self.values[i], t));
                    }
                    t.clone()
                }
                _ => compute(op, &values)?,
            };
            values.push(t);
        }
        if next_leaf.next().is_some() {
            return Err(Error::InvalidArgument("too many leaf values".into()));
        }
        Ok(values)
    }

    /// Leaf values in recording order (the argument layout of [`Tape::forward_eval`]).
    pub fn leaf_values(&self) -> Vec<Tensor> {
        self.ops
            .iter()
            .zip(&self.values)
            .filter(|(op, _)| matches!(op, Op::Input | Op::Constant))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Reverse pass from `output` seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        let out_val = &self.values[output.0];
        if seed.shape() != out_val.shape() {
            return Err(mismatch("backward seed", out_val, seed));
        }
        let shapes: Vec<Vec<usize>> = self.values.iter().map(|t| t.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        grads[output.0] = Some(seed.clone());

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads, &shapes);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    /// Convenience: backward from a scalar output with seed 1.
    pub fn grad(&self, output: Var) -> Result<Gradients> {
        let seed = Tensor::new(self.values[output.0].shape().to_vec(), vec![1.0])?;
        self.backward(output, &seed)
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], shapes: &[Vec<usize>]) {
        use Op::*;
        let val = |v: &Var| &self.values[v.0];
        let y = &self.values[i];
        let gd = g.data();
        match &self.ops[i] {
            Input | Constant | StopGradient(_) => {}
            Add(a, b) | Sub(a, b) => {
                let sign = if matches!(self.ops[i], Sub(..)) { -1.0 } else { 1.0 };
                accumulate(&mut grads[a.0], &shapes[a.0], |ga| {
                    ga.iter_mut().zip(gd).for_each(|(x, gv)| *x += gv)
                });
                let n = val(b).len();
                accumulate(&mut grads[b.0], &shapes[b.0], |gb| {
                    for (k, gv) in gd.iter().enumerate() {
                        gb[k % n] += sign * gv;
                    }
                });
            }
            Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                let n = bv.len();
                accumulate(&mut grads[a.0], &shapes[a.0], |ga| {
                    for (k, gv) in gd.iter().enumerate() {
                        ga[k] += gv * bv[k % n];
                    }
                });
                accumulate(&mut grads[b.0], &shapes[b.0], |gb| {
                    for (k, gv) in gd.iter().enumerate() {
                        gb[k % n] += gv * av[k];
                    }
                });
            }
            Scale(a, s) => accumulate(&mut grads[a.0], &shapes[a.0], |ga| {
                ga.iter_mut().zip(gd).for_each(|(x, gv)| *x += s * gv)
            }),
            MatMul(a, b) => {
                let (m, k) = (shapes[a.0][0], shapes[a.0][1]);
                let n = shapes[b.0][1];
                let (av, bv) = (val(a).data(), val(b).data());
                accumulate(&mut grads[a.0], &shapes[a.0], |ga| {
                    gemm(m, n, k, gd, (n, 1), bv, (1, n), ga, 1.0)
                });
                accumulate(&mut grads[b.0], &shapes[b.0], |gb| {
                    gemm(k, m, n, av, (1, k), gd, (n, 1), gb, 1.0)
                });
            }
            Transpose(a) => {
                let (r, c) = (shapes[a.0][0], shapes[a.0][1]);
                accumulate(&mut grads[a.0], &shapes[a.0], |ga| {
                    for p in 0..r {
                        for q in 0..c {
                            ga[p * c + q] += gd[q * r + p];
                        }
                    }
                });
            }
            Reshape(a, _) => accumulate(&mut grads[a.0], &shapes[a.0], |ga| {
                ga.iter_mut().zip(gd).for_each(|(x, gv)| *x += gv)
            }),
            Concat(vs) => {
                let total = y.last_dim();
                let outer = y.outer();
                let mut offset = 0;
                for x in vs {
                    let w = val(x).last_dim();
                    accumulate(&mut grads[x.0], &shapes[x.0], |gx| {
                        for r in 0..outer {
                            for c in 0..w {
                                gx[r * w + c] += gd[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Slice { src, start, len } => {
                let w = val(src).last_dim();
                let outer = y.outer();
                accumulate(&mut grads[src.0], &shapes[src.0], |gs| {
                    for r in 0..outer {
                        for c in 0..*len {
                            gs[r * w + start + c] += gd[r * len + c];
                        }
                    }
                });
            }
            Sum(a) => {
                let gv = gd[0];
                accumulate(&mut grads[a.0], &shapes[a.0], |ga| ga.iter_mut().for_each(|x| *x += gv));
            }
            Mean(a) => {
                let gv = gd[0] / val(a).len() as f64;
                accumulate(&mut grads[a.0], &shapes[a.0], |ga| ga.iter_mut().for_each(|x| *x += gv));
            }
            Sqrt(a) => accumulate(&mut grads[a.0], &shapes[a.0], |ga| {
                for (k, gv) in gd.iter().enumerate() {
                    let yk = y.data()[k];
                    if yk > 0.0 {
                        ga[k] += gv / (2.0 * yk);
                    }
                }
            }),
            Exp(a) => accumulate(&mut grads[a.0], &shapes[a.0], |ga| {
                for (k, gv) in gd.iter().enumerate() {
                    ga[k] += gv * y.data()[k];
                }
            }),
            Log(a) => {
                let xv = val(a).data();
                accumulate(&mut grads[a.0], &shapes[a.0], |ga| {
                    for (k, gv) in gd.iter().enumerate() {
                        ga[k] += gv / xv[k];
                    }
                });
            }
            Relu(a) | NonNeg(a) => {
                let pass_zero = matches!(self.ops[i], NonNeg(_));
                let xv = val(a).data();
                accumulate(&mut grads[a.0], &shapes[a.0], |ga| {
                    for (k, gv) in gd.iter().enumerate() {
                        if xv[k] > 0.0 || (pass_zero && xv[k] == 0.0) {
                            ga[k] += gv;
                        }
                    }
                });
            }
            Silu(a) => {
                let xv = val(a).data();
                accumulate(&mut grads[a.0], &shapes[a.0], |ga| {
                    for (k, gv) in gd.iter().enumerate() {
                        let s = sigmoid(xv[k]);
                        ga[k] += gv * s * (1.0 + xv[k] * (1.0 - s));
                    }
                });
            }
            LayerNorm(a) => {
                let n = y.last_dim();
                let xv = val(a).data();
                accumulate(&mut grads[a.0], &shapes[a.0], |ga| {
                    for r in 0..y.outer() {
                        let xs = &xv[r * n..(r + 1) * n];
                        let mean = xs.iter().sum::<f64>() / n as f64;
                        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
                        let ys = &y.data()[r * n..(r + 1) * n];
                        let gs = &gd[r * n..(r + 1) * n];
                        let g_mean = gs.iter().sum::<f64>() / n as f64;
                        let gy_mean = gs.iter().zip(ys).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                        for c in 0..n {
                            ga[r * n + c] += inv * (gs[c] - g_mean - ys[c] * gy_mean);
                        }
                    }
                });
            }
            Softmax(a) => {
                let n = y.last_dim();
                accumulate(&mut grads[a.0], &shapes[a.0], |ga| {
                    for r in 0..y.outer() {
                        let ys = &y.data()[r * n..(r + 1) * n];
                        let gs = &gd[r * n..(r + 1) * n];
                        let dot: f64 = gs.iter().zip(ys).map(|(p, q)| p * q).sum();
                        for c in 0..n {
                            ga[r * n + c] += ys[c] * (gs[c] - dot);
                        }
                    }
                });
            }
            PairwiseDistance(a, b) => {
                let (m, gdim) = (shapes[a.0][0], shapes[a.0][1]);
                let n = shapes[b.0][0];
                let (xa, xb) = (val(a).data(), val(b).data());
                let mut da = vec![0.0; m * gdim];
                let mut db = vec![0.0; n * gdim];
                for p in 0..m {
                    for q in 0..n {
                        let dist = y.data()[p * n + q];
                        // coincident points: subgradient 0
                        if dist == 0.0 {
                            continue;
                        }
                        let coef = gd[p * n + q] / dist;
                        for c in 0..gdim {
                            let diff = coef * (xa[p * gdim + c] - xb[q * gdim + c]);
                            da[p * gdim + c] += diff;
                            db[q * gdim + c] -= diff;
                        }
                    }
                }
                accumulate(&mut grads[a.0], &shapes[a.0], |ga| {
                    ga.iter_mut().zip(&da).for_each(|(x, d)| *x += d)
                });
                accumulate(&mut grads[b.0], &shapes[b.0], |gb| {
                    gb.iter_mut().zip(&db).for_each(|(x, d)| *x += d)
                });
            }
        }
    }
}
