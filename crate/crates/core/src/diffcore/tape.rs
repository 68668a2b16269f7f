use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Broadcast(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { input: Var, axis: usize },
    Softmax(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sqrt(Var),
    Slice { input: Var, axis: usize, start: usize, end: usize },
    Gather { input: Var, index: Arc<[usize]> },
    ScatterAdd { input: Var, index: Arc<[usize]> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations in evaluation order. Every primitive
/// computes its forward value eagerly; [`Tape::backward`] walks the record in
/// reverse.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(c.max(1)).take(r) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Tape(format!("variable {v:?} is not on this tape")));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.index()].value.shape()
    }

    /// Records a value that gradients never flow into.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a named trainable tensor. Names must be unique per tape.
    pub fn param(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::Tape(format!("parameter {name:?} registered twice")));
        }
        let v = self.push(t, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if self.value(a).rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(a))));
        }
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Broadcasts a scalar, a vector (as one row), a 1×c row or an r×1
    /// column up to an `rows`×`cols` matrix.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let (ri, ci) = t.dims2();
        if t.rank() > 2 || (ri != 1 && ri != rows) || (ci != 1 && ci != cols) {
            return Err(Error::shape(
                "broadcast",
                format!("{:?} -> [{rows}, {cols}]", t.shape()),
            ));
        }
        let src = t.data();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let si = if ri == 1 { 0 } else { i };
            for j in 0..cols {
                let sj = if ci == 1 { 0 } else { j };
                out.push(src[si * ci + sj]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::Broadcast(a),
            rg,
        ))
    }

    /// Concatenates along axis 0 (rows; vectors allowed) or axis 1 (columns
    /// of matrices with equal row counts).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = match axis {
            0 => {
                let rank = shapes[0].len();
                let tail = &shapes[0][1.min(rank)..];
                if rank == 0 || rank > 2 || shapes.iter().any(|s| s.len() != rank || &s[1..] != tail) {
                    return Err(Error::shape("concat", format!("axis 0 of {shapes:?}")));
                }
                let mut data = Vec::new();
                let mut lead = 0;
                for &p in parts {
                    let t = self.value(p);
                    lead += t.shape()[0];
                    data.extend_from_slice(t.data());
                }
                let mut shape = vec![lead];
                shape.extend_from_slice(tail);
                Tensor::from_parts(shape, data)
            }
            1 => {
                let rows = shapes[0].first().copied().unwrap_or(0);
                if shapes.iter().any(|s| s.len() != 2 || s[0] != rows) {
                    return Err(Error::shape("concat", format!("axis 1 of {shapes:?}")));
                }
                let total: usize = shapes.iter().map(|s| s[1]).sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::from_parts(vec![rows, total], data)
            }
            _ => return Err(Error::shape("concat", format!("axis {axis} unsupported"))),
        };
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = t.sum() / t.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Sums a matrix over one axis: axis 0 yields a length-`cols` vector,
    /// axis 1 a length-`rows` vector.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if t.rank() != 2 || axis > 1 {
            return Err(Error::shape("sum_axis", format!("{:?} axis {axis}", t.shape())));
        }
        let (r, c) = t.dims2();
        let out = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, x) in out.iter_mut().zip(t.row(i)) {
                    *o += x;
                }
            }
            out
        } else {
            (0..r).map(|i| t.row(i).iter().sum()).collect()
        };
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::SumAxis { input: a, axis }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if self.value(a).rank() > 2 || self.value(a).is_empty() {
            return Err(Error::shape("softmax", format!("{:?}", self.shape(a))));
        }
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.unary(a, Op::Exp(a), f64::exp)?;
        if !self.value(v).is_finite() {
            return Err(Error::Numeric(format!(
                "exp overflow (max input {:.3e})",
                self.value(a).data().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            )));
        }
        Ok(v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if self.value(a).data().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::Numeric("sqrt of a negative value".into()));
        }
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// Half-open slice `start..end` along axis 0 (rows) or axis 1 (columns).
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let bad = || Error::shape("slice", format!("{:?} axis {axis} {start}..{end}", t.shape()));
        let value = match (t.rank(), axis) {
            (1, 0) | (2, 0) => {
                let lead = t.shape()[0];
                if start > end || end > lead {
                    return Err(bad());
                }
                let width = row_width(t);
                let mut shape = t.shape().to_vec();
                shape[0] = end - start;
                Tensor::from_parts(shape, t.data()[start * width..end * width].to_vec())
            }
            (2, 1) => {
                let (r, c) = t.dims2();
                if start > end || end > c {
                    return Err(bad());
                }
                let mut data = Vec::with_capacity(r * (end - start));
                for i in 0..r {
                    data.extend_from_slice(&t.row(i)[start..end]);
                }
                Tensor::from_parts(vec![r, end - start], data)
            }
            _ => return Err(bad()),
        };
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::Slice {
                input: a,
                axis,
                start,
                end,
            },
            rg,
        ))
    }

    /// Selects rows (or vector entries) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if t.rank() == 0 || t.rank() > 2 {
            return Err(Error::shape("gather_rows", format!("{:?}", t.shape())));
        }
        let lead = t.shape()[0];
        if let Some(&bad) = index.iter().find(|&&i| i >= lead) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} out of range for {:?}", t.shape()),
            ));
        }
        let width = row_width(t);
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index.iter() {
            data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Gather { input: a, index }, rg))
    }

    /// Adds row `e` of `a` into output row `index[e]`; the output has `rows`
    /// rows and rows never targeted stay zero.
    pub fn scatter_add_rows(&mut self, a: Var, index: Arc<[usize]>, rows: usize) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if t.rank() == 0 || t.rank() > 2 || t.shape()[0] != index.len() {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("{:?} with {} indices", t.shape(), index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("target row {bad} out of range for {rows} rows"),
            ));
        }
        let width = row_width(t);
        let mut data = vec![0.0; rows * width];
        for (e, &i) in index.iter().enumerate() {
            let src = &t.data()[e * width..(e + 1) * width];
            for (o, x) in data[i * width..(i + 1) * width].iter_mut().zip(src) {
                *o += x;
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::ScatterAdd { input: a, index },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", t.shape())));
        }
        let value = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Gradient of a scalar `loss` with respect to every registered
    /// parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let t = self.value(loss);
        if t.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                t.shape()
            )));
        }
        self.backward_seeded(&[(loss, Tensor::filled(t.shape().to_vec(), 1.0))])
    }

    /// Vector-Jacobian product: propagates the given output cotangents back
    /// to the parameters. Seeds for the same variable accumulate.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut start = 0;
        for (v, g) in seeds {
            self.check(*v)?;
            if self.value(*v).shape() != g.shape() {
                return Err(Error::shape(
                    "backward",
                    format!("seed {:?} for value {:?}", g.shape(), self.shape(*v)),
                ));
            }
            accumulate(&mut grads, *v, self.value(*v).len(), |d| {
                for (o, x) in d.iter_mut().zip(g.data()) {
                    *o += x;
                }
            });
            start = start.max(v.index() + 1);
        }

        for idx in (0..start).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }

        let mut named = BTreeMap::new();
        for (name, v) in &self.params {
            let shape = self.shape(*v).to_vec();
            let data = grads[v.index()]
                .clone()
                .unwrap_or_else(|| vec![0.0; self.value(*v).len()]);
            named.insert(name.clone(), Tensor::from_parts(shape, data));
        }
        Ok(Gradients { named })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len = |v: Var| self.value(v).len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        accumulate(grads, v, len(v), |d| add_into(d, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, len(*a), |d| add_into(d, g));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, len(*b), |d| {
                        for (o, x) in d.iter_mut().zip(g) {
                            *o -= x;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    accumulate(grads, *a, va.len(), |d| {
                        for ((o, x), y) in d.iter_mut().zip(g).zip(vb) {
                            *o += x * y;
                        }
                    });
                }
                if self.rg(*b) {
                    accumulate(grads, *b, vb.len(), |d| {
                        for ((o, x), y) in d.iter_mut().zip(g).zip(va) {
                            *o += x * y;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, len(*a), |d| {
                    for (o, x) in d.iter_mut().zip(g) {
                        *o += c * x;
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                accumulate(grads, *a, len(*a), |d| add_into(d, g));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, nn) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    accumulate(grads, *a, m * k, |d| {
                        gemm(m, nn, k, g, false, tb.data(), true, d, 1.0)
                    });
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    accumulate(grads, *b, k * nn, |d| {
                        gemm(k, m, nn, ta.data(), true, g, false, d, 1.0)
                    });
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2();
                accumulate(grads, *a, r * c, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Broadcast(a) => {
                let (ri, ci) = self.value(*a).dims2();
                let (r, c) = node.value.dims2();
                accumulate(grads, *a, ri * ci, |d| {
                    for i in 0..r {
                        let si = if ri == 1 { 0 } else { i };
                        for j in 0..c {
                            let sj = if ci == 1 { 0 } else { j };
                            d[si * ci + sj] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let l = len(p);
                        if self.rg(p) {
                            accumulate(grads, p, l, |d| add_into(d, &g[offset..offset + l]));
                        }
                        offset += l;
                    }
                } else {
                    let (rows, total) = node.value.dims2();
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.rg(p) {
                            accumulate(grads, p, rows * w, |d| {
                                for r in 0..rows {
                                    add_into(
                                        &mut d[r * w..(r + 1) * w],
                                        &g[r * total + col..r * total + col + w],
                                    );
                                }
                            });
                        }
                        col += w;
                    }
                }
            }
            Op::Sum(a) => {
                let s = g[0];
                accumulate(grads, *a, len(*a), |d| d.iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(a) => {
                let s = g[0] / len(*a) as f64;
                accumulate(grads, *a, len(*a), |d| d.iter_mut().for_each(|o| *o += s));
            }
            Op::SumAxis { input, axis } => {
                let (r, c) = self.value(*input).dims2();
                let axis = *axis;
                accumulate(grads, *input, r * c, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += if axis == 0 { g[j] } else { g[i] };
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols().max(1);
                accumulate(grads, *a, len(*a), |d| {
                    for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let s: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for ((o, y), g) in drow.iter_mut().zip(yrow).zip(grow) {
                            *o += y * (g - s);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                accumulate(grads, *a, x.len(), |d| {
                    for ((o, gi), xi) in d.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                accumulate(grads, *a, y.len(), |d| {
                    for ((o, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                accumulate(grads, *a, y.len(), |d| {
                    for ((o, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        *o += gi * yi;
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                accumulate(grads, *a, x.len(), |d| {
                    for ((o, gi), xi) in d.iter_mut().zip(g).zip(x) {
                        *o += gi / xi;
                    }
                });
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                accumulate(grads, *a, x.len(), |d| {
                    for ((o, gi), xi) in d.iter_mut().zip(g).zip(x) {
                        *o += gi * sigmoid(*xi);
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                accumulate(grads, *a, y.len(), |d| {
                    for ((o, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        *o += gi * 0.5 / yi;
                    }
                });
            }
            Op::Slice {
                input,
                axis,
                start,
                end,
            } => {
                let t = self.value(*input);
                if *axis == 0 {
                    let width = row_width(t);
                    let (s, e) = (start * width, end * width);
                    accumulate(grads, *input, t.len(), |d| add_into(&mut d[s..e], g));
                } else {
                    let (r, c) = t.dims2();
                    let w = end - start;
                    accumulate(grads, *input, r * c, |d| {
                        for i in 0..r {
                            add_into(&mut d[i * c + start..i * c + end], &g[i * w..(i + 1) * w]);
                        }
                    });
                }
            }
            Op::Gather { input, index } => {
                let t = self.value(*input);
                let width = row_width(t);
                accumulate(grads, *input, t.len(), |d| {
                    for (e, &i) in index.iter().enumerate() {
                        add_into(&mut d[i * width..(i + 1) * width], &g[e * width..(e + 1) * width]);
                    }
                });
            }
            Op::ScatterAdd { input, index } => {
                let t = self.value(*input);
                let width = row_width(t);
                accumulate(grads, *input, t.len(), |d| {
                    for (e, &i) in index.iter().enumerate() {
                        add_into(&mut d[e * width..(e + 1) * width], &g[i * width..(i + 1) * width]);
                    }
                });
            }
        }
    }
}

fn row_width(t: &Tensor) -> usize {
    if t.rank() == 2 {
        t.shape()[1]
    } else {
        1
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.index()].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Parameter gradients keyed by the names given to [`Tape::param`].
/// Parameters the loss does not depend on receive zero tensors.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.named.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.named
    }

    pub fn len(&self) -> usize {
        self.named.len()
    }

    pub fn is_empty(&self) -> bool {
        self.named.is_empty()
    }

    /// Global L2 norm over the selected gradients.
    pub fn norm_where(&self, mut keep: impl FnMut(&str) -> bool) -> f64 {
        self.named
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(_, t)| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}
