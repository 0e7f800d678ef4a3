//! Define-by-run reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar node walks the tape once in reverse and
//! accumulates adjoints into every ancestor. Tapes are cheap and are rebuilt
//! for every minibatch.
//!
//! Operations that are awkward to express through the primitive set (the
//! kernel activation of the induced grid, for instance) are registered with
//! [`Tape::custom`] together with a hand-written vector-Jacobian product.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    RootNotScalar(Vec<usize>),
    #[error("{op} expects a rank-{expected} tensor, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("index {index} out of range for {op} with extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("grad_check step must be positive and finite, got {0}")]
    BadStep(f64),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Column vector `[n, 1]`.
    pub fn column(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len(), 1],
            data,
        }
    }

    /// Builds a `[rows, cols]` matrix from row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(AutodiffError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![c],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
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

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(AutodiffError::BadLength {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(AutodiffError::Rank {
                op: "dims2",
                expected: 2,
                got: self.shape.clone(),
            }),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[row * c..(row + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Row-major `[m, k] x [k, n]` product into a fresh buffer.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a custom op: receives the output adjoint,
/// returns one adjoint per input (same shapes as the inputs).
pub type Vjp = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

/// Kinds of operation a tape can record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    MatMul,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Square,
    Sum,
    Mean,
    AddBias,
    Scale,
    GatherRows,
    Concat,
    Reshape,
    LogSoftmax,
    Custom,
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    GatherRows(Var, Vec<usize>),
    Concat(Vec<Var>),
    Reshape(Var),
    LogSoftmax(Var),
    Custom(Vec<Var>, Vjp),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Square(_) => OpKind::Square,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::Concat(_) => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::Custom(..) => OpKind::Custom,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::AddBias(a, b) => vec![*a, *b],
            Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Scale(a, _)
            | Op::GatherRows(a, _)
            | Op::Reshape(a)
            | Op::LogSoftmax(a) => vec![*a],
            Op::Concat(vs) | Op::Custom(vs, _) => vs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only record of operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of the root with respect to `v`; zeros when `v` does not
    /// influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Tape {
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

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(Op::Leaf, value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(Op::Constant, value, false)
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite {
                op: kind_name(op.kind()),
            });
        }
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_unchecked(op, value, needs_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.record(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.record(Op::Sub(a, b), v)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.record(Op::Mul(a, b), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        self.record(
            Op::MatMul(a, b),
            Tensor {
                shape: vec![m, n],
                data,
            },
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.record(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.record(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.record(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.record(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.record(Op::Log(a), v)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.record(Op::Square(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.record(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.record(Op::Mean(a), Tensor::scalar(s))
    }

    /// Adds a length-`C` bias to every row of an `[R, C]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: vec![r, c],
                rhs: b.shape.clone(),
            });
        }
        let mut data = self.value(x).data.clone();
        for row in data.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(&b.data) {
                *v += bv;
            }
        }
        self.record(
            Op::AddBias(x, bias),
            Tensor {
                shape: vec![r, c],
                data,
            },
        )
    }

    /// `factor * x + shift`, elementwise.
    pub fn scale(&mut self, x: Var, factor: f64, shift: f64) -> Result<Var> {
        let v = self.value(x).map(|t| factor * t + shift);
        self.record(Op::Scale(x, factor), v)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(AutodiffError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: r,
                });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.record(
            Op::GatherRows(x, rows.to_vec()),
            Tensor {
                shape: vec![rows.len(), c],
                data,
            },
        )
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::Rank {
            op: "concat",
            expected: 2,
            got: vec![],
        })?;
        let (r, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![r],
                    rhs: vec![pr],
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        self.record(
            Op::Concat(parts.to_vec()),
            Tensor {
                shape: vec![r, total],
                data,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        self.record(Op::Reshape(x), v)
    }

    /// Row-wise log-softmax of an `[R, C]` matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = &self.value(x).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for (o, &v) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.record(
            Op::LogSoftmax(x),
            Tensor {
                shape: vec![r, c],
                data,
            },
        )
    }

    /// Registers an op whose adjoint is supplied by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, vjp: Vjp) -> Result<Var> {
        self.record(Op::Custom(inputs.to_vec(), vjp), value)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(AutodiffError::RootNotScalar(root_val.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(&root_val.shape, 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                for (parent, contrib) in self.local_vjp(node, &g) {
                    if !self.nodes[parent.0].needs_grad {
                        continue;
                    }
                    match &mut grads[parent.0] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn local_vjp(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip(val(*b), |gi, bi| gi * bi)),
                (*b, g.zip(val(*a), |gi, ai| gi * ai)),
            ],
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
                let n = val(*b).shape[1];
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].needs_grad {
                    // dA = G B^T
                    let bd = &val(*b).data;
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g.data[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    out.push((*a, Tensor { shape: vec![m, k], data: ga }));
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T G
                    let ad = &val(*a).data;
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g.data[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                    out.push((*b, Tensor { shape: vec![k, n], data: gb }));
                }
                out
            }
            Op::Relu(a) => vec![(
                *a,
                g.zip(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }),
            )],
            Op::Tanh(a) => vec![(*a, g.zip(&node.value, |gi, y| gi * (1.0 - y * y)))],
            Op::Sigmoid(a) => vec![(*a, g.zip(&node.value, |gi, y| gi * y * (1.0 - y)))],
            Op::Exp(a) => vec![(*a, g.zip(&node.value, |gi, y| gi * y))],
            Op::Log(a) => vec![(*a, g.zip(val(*a), |gi, x| gi / x))],
            Op::Square(a) => vec![(*a, g.zip(val(*a), |gi, x| 2.0 * gi * x))],
            Op::Sum(a) => vec![(*a, Tensor::filled(&val(*a).shape, g.item()))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Tensor::filled(&val(*a).shape, g.item() / n))]
            }
            Op::AddBias(x, b) => {
                let c = val(*b).len();
                let mut gb = vec![0.0; c];
                for row in g.data.chunks(c) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                vec![
                    (*x, g.clone()),
                    (
                        *b,
                        Tensor {
                            shape: val(*b).shape.clone(),
                            data: gb,
                        },
                    ),
                ]
            }
            Op::Scale(a, f) => vec![(*a, g.map(|x| x * f))],
            Op::GatherRows(a, rows) => {
                let src = val(*a);
                let c = src.shape[1];
                let mut ga = Tensor::zeros(&src.shape);
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        ga.data[i * c + j] += g.data[k * c + j];
                    }
                }
                vec![(*a, ga)]
            }
            Op::Concat(parts) => {
                let r = node.value.shape[0];
                let total = node.value.shape[1];
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = val(p).shape[1];
                    let mut data = Vec::with_capacity(r * w);
                    for i in 0..r {
                        data.extend_from_slice(&g.data[i * total + offset..i * total + offset + w]);
                    }
                    out.push((
                        p,
                        Tensor {
                            shape: vec![r, w],
                            data,
                        },
                    ));
                    offset += w;
                }
                out
            }
            Op::Reshape(a) => vec![(
                *a,
                Tensor {
                    shape: val(*a).shape.clone(),
                    data: g.data.clone(),
                },
            )],
            Op::LogSoftmax(a) => {
                let c = node.value.shape[1];
                let mut ga = g.clone();
                for (grow, yrow) in ga.data.chunks_mut(c).zip(node.value.data.chunks(c)) {
                    let gs: f64 = grow.iter().sum();
                    for (gv, &y) in grow.iter_mut().zip(yrow) {
                        *gv -= y.exp() * gs;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Custom(inputs, vjp) => inputs.iter().copied().zip(vjp(g)).collect(),
        }
    }
}

fn kind_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::Constant => "constant",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::MatMul => "matmul",
        OpKind::Relu => "relu",
        OpKind::Tanh => "tanh",
        OpKind::Sigmoid => "sigmoid",
        OpKind::Exp => "exp",
        OpKind::Log => "log",
        OpKind::Square => "square",
        OpKind::Sum => "sum",
        OpKind::Mean => "mean",
        OpKind::AddBias => "add_bias",
        OpKind::Scale => "scale",
        OpKind::GatherRows => "gather_rows",
        OpKind::Concat => "concat",
        OpKind::Reshape => "reshape",
        OpKind::LogSoftmax => "log_softmax",
        OpKind::Custom => "custom",
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Maximum relative error between the tape gradient of `f` at `x` and a
/// central finite-difference estimate with the given step.
///
/// The error for each coordinate is `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(AutodiffError::BadStep(step));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(point.clone());
        let out = f(&mut tape, v)?;
        let val = tape.value(out);
        if !val.is_scalar() {
            return Err(AutodiffError::RootNotScalar(val.shape.clone()));
        }
        Ok(val.item())
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let analytic = tape.backward(out)?.wrt(v);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let up = eval(&probe)?;
        probe.data[i] = orig - step;
        let down = eval(&probe)?;
        probe.data[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(AutodiffError::NonFinite { op: "grad_check" });
        }
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic.data[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
