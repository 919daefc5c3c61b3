//! Record-and-replay reverse-mode differentiation.
//!
//! Every primitive pushes one node holding its forward value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! record order, so the order of floating point accumulation is fixed by the
//! order of the forward calls and repeated runs are bit-identical.
//!
//! Values on the tape are `f64`; parameters enter through
//! [`Tape::leaf_f32`] and gradients are cast back by the caller.

use crate::error::{Error, Result};
use crate::tensor::{self, check_norm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MulScalar(usize, usize),
    Recip(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Sum(usize),
    MeanAxis(usize, usize),
    SumCols(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SelectRows(usize, Vec<usize>),
    SliceCols(usize, usize),
    L2NormalizeRows(usize, Vec<f64>),
    LayerNormRows(usize, Vec<f64>),
    Gelu(usize),
    Rotary(usize, usize),
    Diag(usize),
    Reshape(usize),
}

struct Node {
    value: Tensor<f64>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to the tape's leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros if the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

const LN_EPS: f64 = 1e-5;
const ROPE_BASE: f64 = 10000.0;

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

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes must not be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn val(&self, i: usize) -> &Tensor<f64> {
        &self.nodes[i].value
    }

    pub fn leaf(&mut self, value: Tensor<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<f64>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf_f32(&mut self, value: &Tensor<f32>, requires_grad: bool) -> Var {
        self.leaf(value.cast(), requires_grad)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a.0).matmul(self.val(b.0))?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(v, Op::MatMul(a.0, b.0), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a.0).transpose()?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(v, Op::Transpose(a.0), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a.0).add(self.val(b.0))?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(v, Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a.0).sub(self.val(b.0))?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(v, Op::Sub(a.0, b.0), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a.0).mul(self.val(b.0))?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(v, Op::Mul(a.0, b.0), ng))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.val(x.0), self.val(bias.0));
        let (m, n) = xv.dims2()?;
        if xv.rank() != 2 || bv.len() != n {
            return Err(Error::shape(format!(
                "add_row: {:?} + {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for r in data.chunks_mut(n) {
            for (o, &b) in r.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let v = Tensor::new(vec![m, n], data)?;
        let ng = self.ng(&[x.0, bias.0]);
        Ok(self.push(v, Op::AddRow(x.0, bias.0), ng))
    }

    /// `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a.0).scale(c);
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Scale(a.0, c), ng)
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.val(s.0);
        if sv.len() != 1 {
            return Err(Error::shape(format!("mul_scalar by {:?}", sv.shape())));
        }
        let c = sv.data()[0];
        let v = self.val(x.0).scale(c);
        let ng = self.ng(&[x.0, s.0]);
        Ok(self.push(v, Op::MulScalar(x.0, s.0), ng))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a.0);
        if av.data().iter().any(|&x| x == 0.0) {
            return Err(Error::numeric("reciprocal of zero"));
        }
        let v = av.map(|x| 1.0 / x);
        let ng = self.ng(&[a.0]);
        Ok(self.push(v, Op::Recip(a.0), ng))
    }

    /// Softmax along the last axis (unit temperature; scale the input for others).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a.0).softmax(1.0)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(v, Op::SoftmaxRows(a.0), ng))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a.0);
        let n = av.cols();
        let mut data = av.data().to_vec();
        for r in data.chunks_mut(n) {
            let max = r.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + r.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for x in r.iter_mut() {
                *x -= lse;
            }
        }
        let v = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(v, Op::LogSoftmaxRows(a.0), ng))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.val(a.0).sum());
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.val(a.0).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean along `axis` of a matrix, keeping the reduced axis.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.val(a.0).mean_axis(axis)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(v, Op::MeanAxis(a.0, axis), ng))
    }

    /// Row sums of an `m×n` matrix as `m×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a.0);
        let (m, n) = av.dims2()?;
        let data = av.data().chunks(n).map(|r| r.iter().sum()).collect();
        let v = Tensor::new(vec![m, 1], data)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(v, Op::SumCols(a.0), ng))
    }

    /// Row-wise dot products of two `m×n` matrices, as `m×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum_cols(p)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor<f64>> = parts.iter().map(|p| self.val(p.0)).collect();
        let v = Tensor::concat_rows(&ts)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&idx);
        Ok(self.push(v, Op::ConcatRows(idx), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor<f64>> = parts.iter().map(|p| self.val(p.0)).collect();
        let v = Tensor::concat_cols(&ts)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&idx);
        Ok(self.push(v, Op::ConcatCols(idx), ng))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let v = self.val(a.0).select_rows(rows)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(v, Op::SelectRows(a.0, rows.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.val(a.0).slice_cols(start, len)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(v, Op::SliceCols(a.0, start), ng))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a.0);
        let n = av.cols();
        let mut data = av.data().to_vec();
        let mut norms = Vec::with_capacity(av.rows());
        for r in data.chunks_mut(n) {
            let nr = tensor::dot(r, r).sqrt();
            check_norm(nr)?;
            for x in r.iter_mut() {
                *x /= nr;
            }
            norms.push(nr);
        }
        let v = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(v, Op::L2NormalizeRows(a.0, norms), ng))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a.0);
        let n = av.cols();
        let mut data = av.data().to_vec();
        let mut inv_std = Vec::with_capacity(av.rows());
        for r in data.chunks_mut(n) {
            let mu = r.iter().sum::<f64>() / n as f64;
            let var = r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for x in r.iter_mut() {
                *x = (*x - mu) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(v, Op::LayerNormRows(a.0, inv_std), ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.val(a.0).map(|x| 0.5 * x * (1.0 + gelu_inner(x).tanh()));
        let ng = self.ng(&[a.0]);
        self.push(v, Op::Gelu(a.0), ng)
    }

    /// Rotary position encoding: row `p` is position `p`; within each of the
    /// `heads` column blocks, feature pairs `(2i, 2i+1)` rotate by
    /// `p · base^(-2i/head_dim)`.
    pub fn rotary(&mut self, a: Var, heads: usize) -> Result<Var> {
        let av = self.val(a.0);
        let (_, d) = av.dims2()?;
        if heads == 0 || d % heads != 0 || (d / heads) % 2 != 0 {
            return Err(Error::shape(format!(
                "rotary: width {d} with {heads} heads needs an even head dimension"
            )));
        }
        let v = rotate(av, heads, 1.0)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(v, Op::Rotary(a.0, heads), ng))
    }

    /// Diagonal of a square matrix as a vector.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a.0);
        let (m, n) = av.dims2()?;
        if m != n {
            return Err(Error::shape(format!("diag of {m}×{n}")));
        }
        let data = (0..n).map(|i| av.data()[i * n + i]).collect();
        let v = Tensor::new(vec![n], data)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(v, Op::Diag(a.0), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.val(a.0).reshape(shape)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(v, Op::Reshape(a.0), ng))
    }

    /// Gradients of the one-element `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.val(loss.0);
        if lv.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                lv.shape()
            )));
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::filled(lv.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &Tensor<f64>, grads: &mut [Option<Tensor<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = av.dims2()?;
                let n = bv.cols();
                if self.nodes[*a].needs_grad {
                    let mut ga = vec![0.0; m * k];
                    tensor::matmul_nt_acc(g.data(), bv.data(), &mut ga, m, n, k);
                    self.acc(grads, *a, ga);
                }
                if self.nodes[*b].needs_grad {
                    let mut gb = vec![0.0; k * n];
                    tensor::matmul_tn_acc(av.data(), g.data(), &mut gb, m, k, n);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose()?;
                self.acc(grads, *a, gt.into_data());
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.data().to_vec());
                self.acc(grads, *b, g.data().to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.data().to_vec());
                self.acc(grads, *b, g.data().iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.nodes[*a].needs_grad {
                    self.acc(grads, *a, g.mul(bv)?.into_data());
                }
                if self.nodes[*b].needs_grad {
                    self.acc(grads, *b, g.mul(av)?.into_data());
                }
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g.data().to_vec());
                if self.nodes[*b].needs_grad {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for r in g.data().chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, g.data().iter().map(|x| x * c).collect());
            }
            Op::MulScalar(x, s) => {
                let c = self.val(*s).data()[0];
                if self.nodes[*x].needs_grad {
                    self.acc(grads, *x, g.data().iter().map(|v| v * c).collect());
                }
                if self.nodes[*s].needs_grad {
                    let gs = tensor::dot(g.data(), self.val(*x).data());
                    self.acc(grads, *s, vec![gs]);
                }
            }
            Op::Recip(a) => {
                let d = g.data().iter().zip(out.data()).map(|(g, y)| -g * y * y).collect();
                self.acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut d = Vec::with_capacity(out.len());
                for (yr, gr) in out.data().chunks(n).zip(g.data().chunks(n)) {
                    let s = tensor::dot(yr, gr);
                    d.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - s)));
                }
                self.acc(grads, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let n = out.cols();
                let mut d = Vec::with_capacity(out.len());
                for (yr, gr) in out.data().chunks(n).zip(g.data().chunks(n)) {
                    let s: f64 = gr.iter().sum();
                    d.extend(yr.iter().zip(gr).map(|(y, g)| g - y.exp() * s));
                }
                self.acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.val(*a).len();
                self.acc(grads, *a, vec![g.data()[0]; n]);
            }
            Op::MeanAxis(a, axis) => {
                let (m, n) = self.val(*a).dims2()?;
                let mut d = vec![0.0; m * n];
                if *axis == 0 {
                    for r in d.chunks_mut(n) {
                        for (o, &v) in r.iter_mut().zip(g.data()) {
                            *o = v / m as f64;
                        }
                    }
                } else {
                    for (r, &v) in d.chunks_mut(n).zip(g.data()) {
                        r.fill(v / n as f64);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::SumCols(a) => {
                let n = self.val(*a).cols();
                let mut d = Vec::with_capacity(g.len() * n);
                for &v in g.data() {
                    d.extend(std::iter::repeat_n(v, n));
                }
                self.acc(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.val(p).len();
                    if self.nodes[p].needs_grad {
                        self.acc(grads, p, g.data()[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = g.cols();
                let mut start = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if self.nodes[p].needs_grad {
                        let mut d = Vec::with_capacity(self.val(p).len());
                        for r in g.data().chunks(n) {
                            d.extend_from_slice(&r[start..start + w]);
                        }
                        self.acc(grads, p, d);
                    }
                    start += w;
                }
            }
            Op::SelectRows(a, rows) => {
                let (m, n) = self.val(*a).dims2()?;
                let mut d = vec![0.0; m * n];
                for (k, &r) in rows.iter().enumerate() {
                    for (o, &v) in d[r * n..(r + 1) * n].iter_mut().zip(&g.data()[k * n..(k + 1) * n]) {
                        *o += v;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.val(*a).dims2()?;
                let w = g.cols();
                let mut d = vec![0.0; m * n];
                for (r, gr) in d.chunks_mut(n).zip(g.data().chunks(w)) {
                    r[*start..*start + w].copy_from_slice(gr);
                }
                self.acc(grads, *a, d);
            }
            Op::L2NormalizeRows(a, norms) => {
                let n = out.cols();
                let mut d = Vec::with_capacity(out.len());
                for ((yr, gr), nr) in out.data().chunks(n).zip(g.data().chunks(n)).zip(norms) {
                    let s = tensor::dot(yr, gr);
                    d.extend(yr.iter().zip(gr).map(|(y, g)| (g - y * s) / nr));
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNormRows(a, inv_std) => {
                let n = out.cols();
                let nf = n as f64;
                let mut d = Vec::with_capacity(out.len());
                for ((yr, gr), is) in out.data().chunks(n).zip(g.data().chunks(n)).zip(inv_std) {
                    let mg = gr.iter().sum::<f64>() / nf;
                    let mgy = tensor::dot(gr, yr) / nf;
                    d.extend(yr.iter().zip(gr).map(|(y, g)| is * (g - mg - y * mgy)));
                }
                self.acc(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = self
                    .val(*a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| g * gelu_grad(x))
                    .collect();
                self.acc(grads, *a, d);
            }
            Op::Rotary(a, heads) => {
                let d = rotate(g, *heads, -1.0)?;
                self.acc(grads, *a, d.into_data());
            }
            Op::Diag(a) => {
                let n = g.len();
                let mut d = vec![0.0; n * n];
                for (k, &v) in g.data().iter().enumerate() {
                    d[k * n + k] = v;
                }
                self.acc(grads, *a, d);
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, g.data().to_vec());
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<f64>>], idx: usize, d: Vec<f64>) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut grads[idx] {
            Some(t) => {
                for (o, v) in t.data_mut().iter_mut().zip(d) {
                    *o += v;
                }
            }
            slot @ None => {
                let shape = self.nodes[idx].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, d).expect("gradient shape"));
            }
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044715;

fn gelu_inner(x: f64) -> f64 {
    SQRT_2_OVER_PI * (x + GELU_C * x * x * x)
}

fn gelu_grad(x: f64) -> f64 {
    let t = gelu_inner(x).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// Applies the rotary rotation (`sign = 1`) or its inverse (`sign = -1`).
fn rotate(x: &Tensor<f64>, heads: usize, sign: f64) -> Result<Tensor<f64>> {
    let (m, d) = x.dims2()?;
    let hd = d / heads;
    let mut data = x.data().to_vec();
    for p in 0..m {
        if p == 0 {
            continue;
        }
        let row = &mut data[p * d..(p + 1) * d];
        for h in 0..heads {
            for i in 0..hd / 2 {
                let theta = ROPE_BASE.powf(-2.0 * i as f64 / hd as f64);
                let (s, c) = (sign * p as f64 * theta).sin_cos();
                let j = h * hd + 2 * i;
                let (x0, x1) = (row[j], row[j + 1]);
                row[j] = x0 * c - x1 * s;
                row[j + 1] = x0 * s + x1 * c;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_simple_product() {
        let mut t = Tape::new();
        let a = t.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = t.param(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        let l = t.sum(c);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient_and_unused_params_get_zeros() {
        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(2.0));
        let k = t.constant(Tensor::scalar(5.0));
        let unused = t.param(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        let p = t.mul(a, k).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[5.0]);
        assert!(g.get(k).is_none());
        assert_eq!(g.get_or_zeros(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn reused_leaf_accumulates() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn rotary_is_identity_at_position_zero_and_norm_preserving() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 - 5.0).collect()).unwrap());
        let r = t.rotary(x, 2).unwrap();
        let (xv, rv) = (t.value(x), t.value(r));
        assert_eq!(xv.row(0), rv.row(0));
        for p in 0..3 {
            let n0: f64 = xv.row(p).iter().map(|v| v * v).sum();
            let n1: f64 = rv.row(p).iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-9);
        }
        assert!(t.rotary(x, 4).is_err());
    }

    #[test]
    fn truncate_discards_later_nodes() {
        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(1.0));
        let mark = t.len();
        let _ = t.scale(a, 2.0);
        t.truncate(mark);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let a = t.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(t.backward(a), Err(Error::Shape(_))));
    }
}
