//! A small dense reverse-mode autodiff engine over `f64` tensors of rank 1 or 2.
//!
//! A [`Graph`] is an append-only tape built during one forward pass.
//! Parameters live outside the tape in a [`ParamRegistry`]; they enter the
//! tape by copy ([`Graph::param`]) or by row gather ([`Graph::lookup`]), and
//! [`Graph::backward`] accumulates their gradients back into the registry.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.is_empty() || shape.len() > 2 {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![x],
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                left: vec![rows.len(), cols],
                right: rows.iter().map(Vec::len).collect(),
            });
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a matrix; a vector counts as one row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// True when no NaN/Inf appears in data or gradient.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|x| x.is_finite()))
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Name-addressed trainable tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    names: Vec<String>,
    index: HashMap<String, ParamId>,
    tensors: Vec<Tensor>,
    frozen: Vec<bool>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        tensor.grad = Some(vec![0.0; tensor.data.len()]);
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        self.frozen.push(false);
        Ok(id)
    }

    /// Glorot-uniform matrix of shape `[rows, cols]`.
    pub fn register_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.register(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn register_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.register(name, Tensor::zeros(shape))
    }

    /// Embedding table with N(0, std) entries.
    pub fn register_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.register(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for t in &mut self.tensors {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }

    /// Splits one tensor into its data (mutable) and gradient (shared).
    pub fn data_and_grad(&mut self, id: ParamId) -> (&mut [f64], &[f64]) {
        let t = &mut self.tensors[id.0];
        (&mut t.data, t.grad.as_deref().expect("registered tensors are tracked"))
    }

    fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        if self.frozen[id.0] {
            return;
        }
        let g = self.tensors[id.0].grad.as_mut().expect("tracked");
        for (a, b) in g.iter_mut().zip(grad) {
            *a += b;
        }
    }

    fn accumulate_rows(&mut self, id: ParamId, ids: &[usize], grad: &[f64]) {
        if self.frozen[id.0] {
            return;
        }
        let t = &mut self.tensors[id.0];
        let d = t.cols();
        let g = t.grad.as_mut().expect("tracked");
        for (k, &r) in ids.iter().enumerate() {
            for (a, b) in g[r * d..(r + 1) * d].iter_mut().zip(&grad[k * d..(k + 1) * d]) {
                *a += b;
            }
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward closure of a custom op: given the upstream gradient and the
/// input values, returns one gradient per input (same lengths as inputs).
pub type BackwardFn = Box<dyn Fn(&[f64], &[&Tensor]) -> Vec<Vec<f64>>>;

enum Op {
    Constant,
    Param(ParamId),
    Lookup(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    Sum(Var),
    LogSumExp(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    StackRows(Vec<Var>),
    Gather(Var, Rc<Vec<usize>>),
    ScaleRows(Var, Var),
    RowDot(Var, Var),
    SegmentSoftmax(Var, Rc<Vec<usize>>),
    SegmentSum(Var, Var, Rc<Vec<usize>>),
    LayerNorm(Var, Var, Var, f64),
    Mask(Var, Rc<Vec<f64>>),
    Custom(Vec<Var>, BackwardFn),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Constant | Param(_) | Lookup(..) => vec![],
            MatMul(a, b) | MatMulT(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b)
            | ScaleRows(a, b) | RowDot(a, b) | SegmentSum(a, b, _) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | AddScalar(a) | Sigmoid(a) | Tanh(a) | Relu(a)
            | Softmax(a) | Sum(a) | LogSumExp(a) | SliceCols(a, _) | Gather(a, _)
            | SegmentSoftmax(a, _) | Mask(a, _) => vec![*a],
            LayerNorm(a, g, b, _) => vec![*a, *g, *b],
            Concat(v) | StackRows(v) | Custom(v, _) => v.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

// Raw kernels. Matrices are row-major slices.

/// `a[m,k] · b[k,p]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for (t, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[t * p..(t + 1) * p]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m,k] · b[p,k]ᵀ`
fn mm_t(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            out[i * p + j] = arow.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k,m]ᵀ · b[k,p]`
fn t_mm(a: &[f64], b: &[f64], k: usize, m: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for t in 0..k {
        let brow = &b[t * p..(t + 1) * p];
        for (i, &av) in a[t * m..(t + 1) * m].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * p..(i + 1) * p].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable softmax of one slice, in place.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in x.iter_mut() {
        *v /= z;
    }
}

/// Stable log-sum-exp of a slice.
pub fn logsumexp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param(_) | Op::Lookup(..) => true,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                left: s.to_vec(),
                right: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Tracked input whose gradient is reported through [`Gradients`] only.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Param(ParamId(usize::MAX)))
    }

    /// Whole parameter; repeated requests return the same node.
    pub fn param(&mut self, params: &ParamRegistry, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let mut t = params.get(id).clone();
        t.grad = None;
        let v = self.push(t, Op::Param(id));
        self.param_nodes.insert(id, v);
        v
    }

    /// Rows `ids` of a `[vocab, d]` table as a `[ids.len(), d]` matrix.
    pub fn lookup(&mut self, params: &ParamRegistry, id: ParamId, ids: &[usize]) -> Result<Var> {
        let table = params.get(id);
        let (rows, d) = (table.rows(), table.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &r in ids {
            if r >= rows {
                return Err(Error::Shape {
                    op: "lookup",
                    left: table.shape.clone(),
                    right: vec![r],
                });
            }
            data.extend_from_slice(table.row(r));
        }
        let t = Tensor::matrix(ids.len(), d, data)?;
        Ok(self.push(t, Op::Lookup(id, ids.to_vec())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, p) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, p],
            });
        }
        let data = mm(&self.val(a).data, &self.val(b).data, m, k, p);
        Ok(self.push(Tensor::matrix(m, p, data)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`, the linear-layer product with weights stored `[out, in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_t")?;
        let (p, k2) = self.matrix_dims(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_t",
                left: vec![m, k],
                right: vec![p, k2],
            });
        }
        let data = mm_t(&self.val(a).data, &self.val(b).data, m, k, p);
        Ok(self.push(Tensor::matrix(m, p, data)?, Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let src = &self.val(a).data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::matrix(n, m, data)?, Op::Transpose(a)))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.val(a), self.val(b));
        ta.same_shape(tb, op)?;
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape.clone(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `a[m,n] + bias[n]` on every row (`bias` may be `[n]` or `[1,n]`).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(bias));
        let n = ta.cols();
        if tb.len() != n {
            return Err(Error::Shape {
                op: "add_bias",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let mut data = ta.data.clone();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(&tb.data).for_each(|(x, b)| *x += b);
        }
        let t = Tensor::new(ta.shape.clone(), data)?;
        Ok(self.push(t, Op::AddBias(a, bias)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.val(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x * factor).collect(),
            grad: None,
        };
        self.push(t, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = self.val(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x + c).collect(),
            grad: None,
        };
        self.push(t, Op::AddScalar(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.val(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| f(x)).collect(),
            grad: None,
        };
        self.push(t, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Softmax over a vector, or over each row of a matrix.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let mut data = ta.data.clone();
        for row in data.chunks_mut(ta.cols()) {
            softmax_in_place(row);
        }
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
            grad: None,
        };
        self.push(t, Op::Softmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn logsumexp(&mut self, a: Var) -> Var {
        let s = logsumexp(&self.val(a).data);
        self.push(Tensor::scalar(s), Op::LogSumExp(a))
    }

    /// Concatenation along the last axis. Vectors join end to end;
    /// matrices with equal row counts join column-wise.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Shape {
            op: "concat",
            left: vec![],
            right: vec![],
        })?;
        let rank = self.shape(first).len();
        let rows = self.val(first).rows();
        for &x in xs {
            let t = self.val(x);
            if t.shape.len() != rank || t.rows() != rows {
                return Err(Error::Shape {
                    op: "concat",
                    left: self.shape(first).to_vec(),
                    right: t.shape.clone(),
                });
            }
        }
        let total: usize = xs.iter().map(|&x| self.val(x).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.val(x).row(r));
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(xs.to_vec())))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "slice_cols")?;
        if start + len > n || len == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                left: vec![m, n],
                right: vec![start, len],
            });
        }
        let src = self.val(a);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src.row(r)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(m, len, data)?, Op::SliceCols(a, start)))
    }

    /// Stacks vectors or `[1,d]` rows into a `[k,d]` matrix.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let d = xs.first().map(|&x| self.val(x).cols()).unwrap_or(0);
        let mut data = Vec::with_capacity(xs.len() * d);
        for &x in xs {
            let t = self.val(x);
            if t.rows() != 1 || t.cols() != d {
                return Err(Error::Shape {
                    op: "stack_rows",
                    left: vec![1, d],
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        Ok(self.push(Tensor::matrix(xs.len(), d, data)?, Op::StackRows(xs.to_vec())))
    }

    /// Row `r` as a `[1,d]` matrix.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "row")?;
        if r >= m {
            return Err(Error::Shape {
                op: "row",
                left: vec![m, n],
                right: vec![r],
            });
        }
        let idx: Vec<usize> = (r * n..(r + 1) * n).collect();
        self.gather(a, Rc::new(idx), vec![1, n])
    }

    /// `out.flat[k] = a.flat[index[k]]`, reshaped to `shape`. Gradients
    /// scatter-add back, so repeated indices are allowed.
    pub fn gather(&mut self, a: Var, index: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let src = &self.val(a).data;
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Shape {
                op: "gather",
                left: self.shape(a).to_vec(),
                right: vec![bad],
            });
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather(a, index)))
    }

    /// Multiplies row `i` of `a[n,d]` by `w[i]` (`w` is `[n]` or `[n,1]`).
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.val(a), self.val(w));
        if tw.len() != ta.rows() {
            return Err(Error::Shape {
                op: "scale_rows",
                left: ta.shape.clone(),
                right: tw.shape.clone(),
            });
        }
        let d = ta.cols();
        let mut data = ta.data.clone();
        for (row, &s) in data.chunks_mut(d).zip(&tw.data) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        let t = Tensor::new(ta.shape.clone(), data)?;
        Ok(self.push(t, Op::ScaleRows(a, w)))
    }

    /// Row-wise dot products of two `[m,d]` matrices → `[m,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        ta.same_shape(tb, "row_dot")?;
        let d = ta.cols();
        let data: Vec<f64> = ta
            .data
            .chunks(d)
            .zip(tb.data.chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let m = data.len();
        Ok(self.push(Tensor::matrix(m, 1, data)?, Op::RowDot(a, b)))
    }

    fn check_offsets(&self, len: usize, offsets: &[usize], op: &'static str) -> Result<()> {
        let ok = offsets.first() == Some(&0)
            && offsets.last() == Some(&len)
            && offsets.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Shape {
                op,
                left: vec![len],
                right: offsets.to_vec(),
            });
        }
        Ok(())
    }

    /// Softmax within each segment `offsets[i]..offsets[i+1]` of a flat
    /// score list (`[M]` or `[M,1]`). Segments must be non-empty.
    pub fn segment_softmax(&mut self, a: Var, offsets: Rc<Vec<usize>>) -> Result<Var> {
        let ta = self.val(a);
        self.check_offsets(ta.len(), &offsets, "segment_softmax")?;
        let mut data = ta.data.clone();
        for w in offsets.windows(2) {
            softmax_in_place(&mut data[w[0]..w[1]]);
        }
        let t = Tensor::new(ta.shape.clone(), data)?;
        Ok(self.push(t, Op::SegmentSoftmax(a, offsets)))
    }

    /// `out[i] = Σ_{j in segment i} w[j] · v[j]` for weights `w[M]` and rows `v[M,d]`.
    pub fn segment_sum(&mut self, w: Var, v: Var, offsets: Rc<Vec<usize>>) -> Result<Var> {
        let (tw, tv) = (self.val(w), self.val(v));
        if tw.len() != tv.rows() {
            return Err(Error::Shape {
                op: "segment_sum",
                left: tw.shape.clone(),
                right: tv.shape.clone(),
            });
        }
        self.check_offsets(tw.len(), &offsets, "segment_sum")?;
        let d = tv.cols();
        let n = offsets.len() - 1;
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let out = &mut data[i * d..(i + 1) * d];
            for j in offsets[i]..offsets[i + 1] {
                let p = tw.data[j];
                out.iter_mut().zip(tv.row(j)).for_each(|(o, x)| *o += p * x);
            }
        }
        Ok(self.push(Tensor::matrix(n, d, data)?, Op::SegmentSum(w, v, offsets)))
    }

    /// Per-row layer normalization with gain and bias vectors of width `d`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let ta = self.val(a);
        let d = ta.cols();
        if self.val(gain).len() != d || self.val(bias).len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                left: ta.shape.clone(),
                right: self.val(gain).shape.clone(),
            });
        }
        let (g, b) = (&self.val(gain).data, &self.val(bias).data);
        let mut data = Vec::with_capacity(ta.len());
        for row in ta.data.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            data.extend(row.iter().enumerate().map(|(j, x)| (x - mean) * inv * g[j] + b[j]));
        }
        let t = Tensor::new(ta.shape.clone(), data)?;
        Ok(self.push(t, Op::LayerNorm(a, gain, bias, eps)))
    }

    /// Multiplies by a fixed elementwise mask.
    pub fn mask(&mut self, a: Var, mask: Rc<Vec<f64>>) -> Result<Var> {
        let ta = self.val(a);
        if mask.len() != ta.len() {
            return Err(Error::Shape {
                op: "mask",
                left: ta.shape.clone(),
                right: vec![mask.len()],
            });
        }
        let data = ta.data.iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let t = Tensor::new(ta.shape.clone(), data)?;
        Ok(self.push(t, Op::Mask(a, mask)))
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`. Identity when `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.val(a).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mask(a, Rc::new(mask))
    }

    /// Adds an op whose forward value is precomputed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), backward))
    }

    /// Gradients of scalar `loss` with respect to every tracked node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.val(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: self.shape(loss).to_vec(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs backward from `loss` and accumulates into parameter gradients.
    pub fn backward(&self, loss: Var, params: &mut ParamRegistry) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            let Some(g) = grads.grads[idx].as_deref() else { continue };
            match &node.op {
                Op::Param(id) if id.0 != usize::MAX => params.accumulate(*id, g),
                Op::Lookup(id, ids) => params.accumulate_rows(*id, ids, g),
                _ => {}
            }
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Param(_) | Op::Lookup(..) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, p) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if needs(a) {
                    add_into(&mut grads[a.0], &mm_t(g, &tb.data, m, p, k));
                }
                if needs(b) {
                    add_into(&mut grads[b.0], &t_mm(&ta.data, g, m, k, p));
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, p) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                if needs(a) {
                    add_into(&mut grads[a.0], &mm(g, &tb.data, m, p, k));
                }
                if needs(b) {
                    add_into(&mut grads[b.0], &t_mm(g, &ta.data, m, p, k));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape[0], out.shape[1]);
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[j * m + i] = g[i * n + j];
                    }
                }
                add_into(&mut grads[a.0], &ga);
            }
            Op::Add(a, b) => {
                if needs(a) {
                    add_into(&mut grads[a.0], g);
                }
                if needs(b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    add_into(&mut grads[a.0], g);
                }
                if needs(b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if needs(a) {
                    let ga: Vec<f64> = g.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], &ga);
                }
                if needs(b) {
                    let gb: Vec<f64> = g.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::AddBias(a, b) => {
                if needs(a) {
                    add_into(&mut grads[a.0], g);
                }
                if needs(b) {
                    let n = out.cols();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Scale(a, f) => {
                let ga: Vec<f64> = g.iter().map(|x| x * f).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::AddScalar(a) => add_into(&mut grads[a.0], g),
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g.iter().zip(&out.data).map(|(x, y)| x * y * (1.0 - y)).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g.iter().zip(&out.data).map(|(x, y)| x * (1.0 - y * y)).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&out.data)
                    .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                    .collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(out.data.chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    ga.extend(gr.iter().zip(yr).map(|(x, y)| y * (x - dot)));
                }
                add_into(&mut grads[a.0], &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.val(*a).len()];
                add_into(&mut grads[a.0], &ga);
            }
            Op::LogSumExp(a) => {
                let lse = out.data[0];
                let ga: Vec<f64> = self.val(*a).data.iter().map(|x| g[0] * (x - lse).exp()).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Concat(xs) => {
                let rows = out.rows();
                let total = out.cols();
                let mut off = 0;
                for x in xs {
                    let c = self.val(*x).cols();
                    if needs(x) {
                        let mut gx = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gx.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        add_into(&mut grads[x.0], &gx);
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let ta = self.val(*a);
                let (m, n) = (ta.shape[0], ta.shape[1]);
                let len = out.cols();
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    ga[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                add_into(&mut grads[a.0], &ga);
            }
            Op::StackRows(xs) => {
                let d = out.cols();
                for (r, x) in xs.iter().enumerate() {
                    if needs(x) {
                        add_into(&mut grads[x.0], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Gather(a, index) => {
                let mut ga = vec![0.0; self.val(*a).len()];
                for (k, &i) in index.iter().enumerate() {
                    ga[i] += g[k];
                }
                add_into(&mut grads[a.0], &ga);
            }
            Op::ScaleRows(a, w) => {
                let (ta, tw) = (self.val(*a), self.val(*w));
                let d = ta.cols();
                if needs(a) {
                    let mut ga = g.to_vec();
                    for (row, &s) in ga.chunks_mut(d).zip(&tw.data) {
                        row.iter_mut().for_each(|x| *x *= s);
                    }
                    add_into(&mut grads[a.0], &ga);
                }
                if needs(w) {
                    let gw: Vec<f64> = g
                        .chunks(d)
                        .zip(ta.data.chunks(d))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    add_into(&mut grads[w.0], &gw);
                }
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let d = ta.cols();
                if needs(a) {
                    let ga: Vec<f64> = tb
                        .data
                        .chunks(d)
                        .zip(g)
                        .flat_map(|(row, &s)| row.iter().map(move |x| x * s))
                        .collect();
                    add_into(&mut grads[a.0], &ga);
                }
                if needs(b) {
                    let gb: Vec<f64> = ta
                        .data
                        .chunks(d)
                        .zip(g)
                        .flat_map(|(row, &s)| row.iter().map(move |x| x * s))
                        .collect();
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::SegmentSoftmax(a, offsets) => {
                let mut ga = vec![0.0; g.len()];
                for w in offsets.windows(2) {
                    let (y, gr) = (&out.data[w[0]..w[1]], &g[w[0]..w[1]]);
                    let dot: f64 = gr.iter().zip(y).map(|(x, y)| x * y).sum();
                    for (k, j) in (w[0]..w[1]).enumerate() {
                        ga[j] = y[k] * (gr[k] - dot);
                    }
                }
                add_into(&mut grads[a.0], &ga);
            }
            Op::SegmentSum(w, v, offsets) => {
                let (tw, tv) = (self.val(*w), self.val(*v));
                let d = tv.cols();
                let mut gw = vec![0.0; tw.len()];
                let mut gv = vec![0.0; tv.len()];
                for i in 0..offsets.len() - 1 {
                    let go = &g[i * d..(i + 1) * d];
                    for j in offsets[i]..offsets[i + 1] {
                        gw[j] = go.iter().zip(tv.row(j)).map(|(x, y)| x * y).sum();
                        let p = tw.data[j];
                        gv[j * d..(j + 1) * d]
                            .iter_mut()
                            .zip(go)
                            .for_each(|(o, x)| *o = p * x);
                    }
                }
                if needs(w) {
                    add_into(&mut grads[w.0], &gw);
                }
                if needs(v) {
                    add_into(&mut grads[v.0], &gv);
                }
            }
            Op::LayerNorm(a, gain, bias, eps) => {
                let ta = self.val(*a);
                let gn = &self.val(*gain).data;
                let d = ta.cols();
                let mut ga = Vec::with_capacity(ta.len());
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for (row, gr) in ta.data.chunks(d).zip(g.chunks(d)) {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|x| (x - mean) * inv).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gn).map(|(x, y)| x * y).collect();
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(x, y)| x * y).sum::<f64>() / d as f64;
                    ga.extend((0..d).map(|j| inv * (dxhat[j] - m1 - xhat[j] * m2)));
                    for j in 0..d {
                        ggain[j] += gr[j] * xhat[j];
                        gbias[j] += gr[j];
                    }
                }
                if needs(a) {
                    add_into(&mut grads[a.0], &ga);
                }
                if needs(gain) {
                    add_into(&mut grads[gain.0], &ggain);
                }
                if needs(bias) {
                    add_into(&mut grads[bias.0], &gbias);
                }
            }
            Op::Mask(a, mask) => {
                let ga: Vec<f64> = g.iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Custom(inputs, backward) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.val(*v)).collect();
                let gs = backward(g, &vals);
                for (v, gv) in inputs.iter().zip(gs) {
                    if needs(v) {
                        add_into(&mut grads[v.0], &gv);
                    }
                }
            }
        }
    }
}

/// Central-difference check of an analytic gradient.
///
/// Returns the largest `|a − n| / max(1e-8, |a| + |n|)` over `coords`
/// (all coordinates when `None`).
pub fn finite_diff_check<F>(f: F, theta: &[f64], analytic: &[f64], h: f64, coords: Option<&[usize]>) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..theta.len()).collect();
            &all
        }
    };
    let mut x = theta.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Finite-difference check of every unfrozen parameter reachable from the
/// scalar built by `build`. At most `max_coords` coordinates per tensor are
/// sampled with `rng`.
pub fn check_param_gradients<B, R>(
    params: &mut ParamRegistry,
    build: B,
    h: f64,
    max_coords: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph, &ParamRegistry) -> Result<Var>,
    R: Rng,
{
    params.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    g.backward(loss, params)?;

    let eval = |params: &ParamRegistry| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, params)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let ids: Vec<ParamId> = params.ids().filter(|&id| !params.is_frozen(id)).collect();
    for id in ids {
        let len = params.get(id).len();
        let coords: Vec<usize> = if len <= max_coords {
            (0..len).collect()
        } else {
            rand::seq::index::sample(rng, len, max_coords).into_vec()
        };
        let analytic = params.get(id).grad().expect("tracked").to_vec();
        for i in coords {
            let orig = params.get(id).data[i];
            params.get_mut(id).data[i] = orig + h;
            let fp = eval(params)?;
            params.get_mut(id).data[i] = orig - h;
            let fm = eval(params)?;
            params.get_mut(id).data[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = params.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    params.zero_grad();
    Ok(report)
}
