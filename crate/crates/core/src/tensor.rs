//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its output value, its gradient buffer and the rule for pushing gradients
//! back to its inputs. [`Tape::backward`] replays the nodes in reverse
//! recorded order. The graph is rebuilt for every training step, so there is
//! no persistent graph object per tensor: a [`Var`] is just an index into
//! the tape that created it.
//!
//! After a backward pass the tape is frozen. [`Tape::resume`] zeroes all
//! gradients and opens a new recording segment on top of the existing
//! nodes, which is what the adversarial step needs (one backward for the
//! input gradient, then more forward work, then the final backward).

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels;

/// Norm floor used by row normalization.
pub const NORM_FLOOR: f64 = 1e-12;

/// Dense row-major array of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds an `n×m` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * m);
        for row in rows {
            if row.len() != m {
                return Err(Error::shape("from_rows", &[m], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), m], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// `(rows, cols)` for a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape.last().copied().unwrap_or(1);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn require_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        self.dims2()
            .ok_or_else(|| Error::shape(op, &self.shape, &[0, 0]))
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Keep/drop decisions of one dropout application.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    rate: f64,
    keep: Vec<bool>,
}

impl DropoutMask {
    pub fn all_keep(len: usize) -> Self {
        DropoutMask {
            rate: 0.0,
            keep: vec![true; len],
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    fn scales(&self) -> Vec<f64> {
        let survivor = 1.0 / (1.0 - self.rate);
        self.keep
            .iter()
            .map(|&k| if k { survivor } else { 0.0 })
            .collect()
    }
}

/// Vector-Jacobian product of a custom operation: given the upstream
/// gradient and the input values, returns one gradient buffer per input.
pub type VjpFn = Box<dyn Fn(&[f64], &[&Tensor]) -> Vec<Vec<f64>> + Send>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Mask(Var, Vec<f64>),
    Concat(Var, Var),
    L2Normalize(Var),
    LogSoftmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Custom(Vec<Var>, VjpFn),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Relu(x)
            | Op::Mask(x, _)
            | Op::L2Normalize(x)
            | Op::LogSoftmax(x)
            | Op::Scale(x, _)
            | Op::Sum(x) => vec![*x],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Concat(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::Custom(inputs, _) => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations for one training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    /// Trainable leaf: gradients are accumulated into it.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Leaf that never receives gradient; also serves as a detached copy.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Zeroes every gradient buffer and reopens the tape for recording.
    pub fn resume(&mut self) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.frozen = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        if self.frozen {
            return Err(Error::TapeFrozen);
        }
        if !value.is_finite() {
            return Err(Error::non_finite(format!("output of {name}")));
        }
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_op(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad, name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.require_2d("matmul")?;
        let (k2, m) = tb.require_2d("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let data = kernels::matmul(ta.data(), n, k, tb.data(), m);
        self.push_op(Tensor { shape: vec![n, m], data }, Op::MatMul(a, b), "matmul")
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (_, m) = tx.require_2d("add_bias")?;
        if tb.shape() != [m] {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(m.max(1)) {
            for (v, bias) in row.iter_mut().zip(tb.data()) {
                *v += bias;
            }
        }
        let shape = tx.shape().to_vec();
        self.push_op(Tensor { shape, data }, Op::AddBias(x, b), "add_bias")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = tx.shape().to_vec();
        self.push_op(Tensor { shape, data }, Op::Relu(x), "relu")
    }

    /// Inverted dropout. Eval mode is the identity and returns `x` itself.
    /// A supplied mask is reused verbatim instead of sampling a new one.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        mask: Option<&DropoutMask>,
        rng: &mut R,
    ) -> Result<(Var, DropoutMask)> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidParam(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let len = self.value(x).len();
        if mode == Mode::Eval {
            return Ok((x, DropoutMask::all_keep(len)));
        }
        let mask = match mask {
            Some(m) if m.len() != len => {
                return Err(Error::shape("dropout", self.value(x).shape(), &[m.len()]))
            }
            Some(m) => m.clone(),
            None => DropoutMask {
                rate,
                keep: (0..len).map(|_| rng.random::<f64>() >= rate).collect(),
            },
        };
        let scales = mask.scales();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&scales).map(|(v, s)| v * s).collect();
        let shape = tx.shape().to_vec();
        let out = self.push_op(Tensor { shape, data }, Op::Mask(x, scales), "dropout")?;
        Ok((out, mask))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, p) = ta.require_2d("concat")?;
        let (n2, q) = tb.require_2d("concat")?;
        if n != n2 {
            return Err(Error::shape("concat", ta.shape(), tb.shape()));
        }
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * p..(i + 1) * p]);
            data.extend_from_slice(&tb.data()[i * q..(i + 1) * q]);
        }
        self.push_op(
            Tensor {
                shape: vec![n, p + q],
                data,
            },
            Op::Concat(a, b),
            "concat",
        )
    }

    /// Divides each row by its Euclidean norm. Rows with norm below
    /// [`NORM_FLOOR`] map to zero and pass no gradient.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, d) = tx.require_2d("l2_normalize")?;
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_FLOOR {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let shape = tx.shape().to_vec();
        self.push_op(Tensor { shape, data }, Op::L2Normalize(x), "l2_normalize")
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, c) = tx.require_2d("log_softmax")?;
        if c < 2 {
            return Err(Error::InvalidParam(format!(
                "log_softmax needs at least 2 columns, got {c}"
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = tx.shape().to_vec();
        self.push_op(Tensor { shape, data }, Op::LogSoftmax(x), "log_softmax")
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        self.push_op(Tensor { shape, data }, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let shape = tx.shape().to_vec();
        self.push_op(Tensor { shape, data }, Op::Scale(x, factor), "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push_op(Tensor::scalar(total), Op::Sum(x), "sum")
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, name: &str, inputs: &[Var], value: Tensor, vjp: VjpFn) -> Result<Var> {
        self.push_op(value, Op::Custom(inputs.to_vec(), vjp), name)
    }

    /// Accumulates d`loss`/d(node) into every trainable leaf and freezes
    /// the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_impl(loss, None)
    }

    /// Like [`Tape::backward`] but only propagates along paths that end in
    /// one of `targets`; other leaves keep zero gradient.
    pub fn backward_wrt(&mut self, loss: Var, targets: &[Var]) -> Result<()> {
        self.backward_impl(loss, Some(targets))
    }

    fn backward_impl(&mut self, loss: Var, targets: Option<&[Var]>) -> Result<()> {
        if self.frozen {
            return Err(Error::TapeFrozen);
        }
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let end = loss.0 + 1;
        let mut needed = vec![false; end];
        for i in 0..end {
            needed[i] = match targets {
                None => self.nodes[i].requires_grad,
                Some(t) => {
                    t.iter().any(|v| v.0 == i)
                        || self.nodes[i].op.inputs().iter().any(|v| needed[v.0])
                }
            };
        }
        for node in &mut self.nodes[..end] {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.frozen = true;
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..end).rev() {
            if !needed[i] {
                continue;
            }
            let grad = std::mem::take(&mut self.nodes[i].grad);
            let contributions = self.vjp(i, &grad, &needed);
            self.nodes[i].grad = grad;
            for (input, g) in contributions {
                let slot = &mut self.nodes[input.0].grad;
                for (acc, v) in slot.iter_mut().zip(&g) {
                    *acc += v;
                }
            }
        }
        for (i, node) in self.nodes[..end].iter().enumerate() {
            if needed[i] && node.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::non_finite(format!("gradient of node {i}")));
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &[f64], needed: &[bool]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let want = |v: &Var| needed[v.0];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = ta.dims2().unwrap();
                let m = tb.dims2().unwrap().1;
                if want(a) {
                    out.push((*a, kernels::matmul_bt(g, n, m, tb.data(), k)));
                }
                if want(b) {
                    out.push((*b, kernels::matmul_at(ta.data(), n, k, g, m)));
                }
            }
            Op::AddBias(x, b) => {
                if want(x) {
                    out.push((*x, g.to_vec()));
                }
                if want(b) {
                    let m = self.value(*b).len();
                    let mut gb = vec![0.0; m];
                    for row in g.chunks(m.max(1)) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::Relu(x) => {
                if want(x) {
                    let tx = self.value(*x);
                    let gx = g
                        .iter()
                        .zip(tx.data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    out.push((*x, gx));
                }
            }
            Op::Mask(x, scales) => {
                if want(x) {
                    out.push((*x, g.iter().zip(scales).map(|(g, s)| g * s).collect()));
                }
            }
            Op::Concat(a, b) => {
                let p = self.value(*a).dims2().unwrap().1;
                let q = self.value(*b).dims2().unwrap().1;
                let rows = g.chunks(p + q);
                if want(a) {
                    out.push((*a, rows.clone().flat_map(|r| r[..p].to_vec()).collect()));
                }
                if want(b) {
                    out.push((*b, rows.flat_map(|r| r[p..].to_vec()).collect()));
                }
            }
            Op::L2Normalize(x) => {
                if want(x) {
                    let tx = self.value(*x);
                    let y = &node.value;
                    let d = tx.dims2().unwrap().1.max(1);
                    let mut gx = vec![0.0; g.len()];
                    for (r, out_row) in gx.chunks_mut(d).enumerate() {
                        let xr = &tx.data()[r * d..(r + 1) * d];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm < NORM_FLOOR {
                            continue;
                        }
                        let yr = &y.data()[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            out_row[j] = (gr[j] - yr[j] * proj) / norm;
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::LogSoftmax(x) => {
                if want(x) {
                    let c = node.value.dims2().unwrap().1;
                    let mut gx = vec![0.0; g.len()];
                    for ((out_row, yr), gr) in gx
                        .chunks_mut(c)
                        .zip(node.value.data().chunks(c))
                        .zip(g.chunks(c))
                    {
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            out_row[j] = gr[j] - yr[j].exp() * total;
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    out.push((*a, g.to_vec()));
                }
                if want(b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((*a, g.to_vec()));
                }
                if want(b) {
                    out.push((*b, g.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if want(a) {
                    out.push((*a, g.iter().zip(tb.data()).map(|(g, v)| g * v).collect()));
                }
                if want(b) {
                    out.push((*b, g.iter().zip(ta.data()).map(|(g, v)| g * v).collect()));
                }
            }
            Op::Scale(x, factor) => {
                if want(x) {
                    out.push((*x, g.iter().map(|v| v * factor).collect()));
                }
            }
            Op::Sum(x) => {
                if want(x) {
                    out.push((*x, vec![g[0]; self.value(*x).len()]));
                }
            }
            Op::Custom(inputs, vjp) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                for (v, gx) in inputs.iter().zip(vjp(g, &values)) {
                    if want(v) {
                        out.push((*v, gx));
                    }
                }
            }
        }
        out
    }
}

/// `log Σ exp(x)` with the maximum subtracted first.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Compares tape gradients of a scalar function against central finite
/// differences and returns the worst relative error, using the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidParam(format!("step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone())?;
    let out = f(&mut tape, xv)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::NotScalar(tape.value(out).shape().to_vec()));
    }
    tape.backward(out)?;
    let analytic = tape.grad(xv).to_vec();

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(probe)?;
        let out = f(&mut tape, v)?;
        Ok(tape.scalar(out))
    };
    let mut worst = 0.0_f64;
    for k in 0..x.len() {
        let mut plus = x.clone();
        plus.data[k] += step;
        let mut minus = x.clone();
        minus.data[k] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let denom = analytic[k].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[k] - numeric).abs() / denom);
    }
    Ok(worst)
}
