use std::borrow::Cow;
use std::str::FromStr;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations selectable by name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseKind {
    Tanh,
    Relu,
    Abs,
    Add,
    Sub,
    Mul,
    Square,
    Scale(f64),
}

impl ElementwiseKind {
    fn arity(self) -> usize {
        match self {
            Self::Add | Self::Sub | Self::Mul => 2,
            _ => 1,
        }
    }
}

impl FromStr for ElementwiseKind {
    type Err = Error;

    /// Parses `tanh`, `relu`, `abs`, `add`, `sub`, `mul`, `square` or
    /// `scale=<constant>`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tanh" => Self::Tanh,
            "relu" => Self::Relu,
            "abs" => Self::Abs,
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" => Self::Mul,
            "square" => Self::Square,
            other => match other.strip_prefix("scale=").map(str::parse::<f64>) {
                Some(Ok(c)) if c.is_finite() => Self::Scale(c),
                _ => return Err(Error::UnknownKind(other.to_string())),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
    Concat,
    LogSumExp,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Tanh,
    Relu,
    Abs,
    Square,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Binary(Binary, Var, Var),
    AddRow(Var, Var),
    Cosine(Var, Var),
    CosineRows(Var, Var),
    CosineMatrix(Var, Var),
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    LogSumExp(Var),
    LogSumExpRows(Var, Vec<bool>),
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    EmbeddingBag(Var, Vec<Vec<usize>>),
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records operations in evaluation order so that gradients can be
/// propagated in reverse.
///
/// Leaves may borrow their buffers (`'a`), which lets large parameter
/// tables take part in a step without being copied.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Cow<'a, [f64]>,
        requires_grad: bool,
        op: Op,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, value: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(shape, Cow::Owned(value), rg, op)
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), requires_grad, Op::Leaf)
    }

    /// Records a borrowed leaf that receives gradients.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), true, Op::Leaf)
    }

    /// Records a borrowed leaf that is treated as a constant.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape nodes hold consistent shapes")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(mismatch(op, other, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, p) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let orow = &mut out[i * p..(i + 1) * p];
            for t in 0..k {
                let x = av[i * k + t];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in orow.iter_mut().zip(&bv[t * p..(t + 1) * p]) {
                    *o += x * y;
                }
            }
        }
        Ok(self.derived(vec![m, p], out, &[a, b], Op::MatMul(a, b)))
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => f64::tanh,
            Unary::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Unary::Abs => f64::abs,
            Unary::Square => |v| v * v,
        };
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.derived(shape, out, &[x], Op::Unary(kind, x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.derived(shape, out, &[x], Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        let shape = if self.shape(a) == self.shape(b) || lb == 1 {
            self.shape(a).to_vec()
        } else if la == 1 {
            self.shape(b).to_vec()
        } else {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        };
        let n = la.max(lb);
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..n)
            .map(|i| {
                let x = av[if la == 1 { 0 } else { i }];
                let y = bv[if lb == 1 { 0 } else { i }];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        Ok(self.derived(shape, out, &[a, b], Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Dispatches a named pointwise operation.
    pub fn elementwise(&mut self, kind: ElementwiseKind, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != kind.arity() {
            return Err(Error::Arity {
                op: "elementwise",
                expected: kind.arity(),
                got: inputs.len(),
            });
        }
        Ok(match kind {
            ElementwiseKind::Tanh => self.tanh(inputs[0]),
            ElementwiseKind::Relu => self.relu(inputs[0]),
            ElementwiseKind::Abs => self.abs(inputs[0]),
            ElementwiseKind::Square => self.square(inputs[0]),
            ElementwiseKind::Scale(c) => self.scale(inputs[0], c),
            ElementwiseKind::Add => self.add(inputs[0], inputs[1])?,
            ElementwiseKind::Sub => self.sub(inputs[0], inputs[1])?,
            ElementwiseKind::Mul => self.mul(inputs[0], inputs[1])?,
        })
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "add_row")?;
        if self.shape(row) != [n] {
            return Err(mismatch("add_row", self.shape(x), self.shape(row)));
        }
        let rv = self.value(row);
        let mut out = self.value(x).to_vec();
        for r in 0..m {
            for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(rv) {
                *o += b;
            }
        }
        Ok(self.derived(vec![m, n], out, &[x, row], Op::AddRow(x, row)))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 1 || self.shape(a) != self.shape(b) {
            return Err(mismatch("cosine_similarity", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let (na, nb) = (norm(av), norm(bv));
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateVector("cosine_similarity"));
        }
        let c = dot(av, bv) / (na * nb);
        Ok(self.derived(Vec::new(), vec![c], &[a, b], Op::Cosine(a, b)))
    }

    /// Row-wise cosine similarity of two `P×d` matrices, giving `[P]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, d) = self.matrix_dims(a, "cosine_rows")?;
        if self.shape(b) != [p, d] {
            return Err(mismatch("cosine_rows", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(p);
        for i in 0..p {
            let (x, y) = (&av[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d]);
            let (nx, ny) = (norm(x), norm(y));
            if nx == 0.0 || ny == 0.0 {
                return Err(Error::DegenerateVector("cosine_rows"));
            }
            out.push(dot(x, y) / (nx * ny));
        }
        Ok(self.derived(vec![p], out, &[a, b], Op::CosineRows(a, b)))
    }

    /// All-pairs cosine similarity: entry `(i, j)` is `cos(a_i, b_j)`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.matrix_dims(a, "cosine_matrix")?;
        let (n, d2) = self.matrix_dims(b, "cosine_matrix")?;
        if d != d2 {
            return Err(mismatch("cosine_matrix", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let na: Vec<f64> = (0..m).map(|i| norm(&av[i * d..(i + 1) * d])).collect();
        let nb: Vec<f64> = (0..n).map(|j| norm(&bv[j * d..(j + 1) * d])).collect();
        if na.iter().chain(&nb).any(|&v| v == 0.0) {
            return Err(Error::DegenerateVector("cosine_matrix"));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(dot(&av[i * d..(i + 1) * d], &bv[j * d..(j + 1) * d]) / (na[i] * nb[j]));
            }
        }
        Ok(self.derived(vec![m, n], out, &[a, b], Op::CosineMatrix(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.derived(Vec::new(), vec![s], &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.derived(Vec::new(), vec![s], &[x], Op::Mean(x))
    }

    /// Maximum element; the gradient flows to the first maximiser.
    pub fn max(&mut self, x: Var) -> Var {
        let (arg, m) =
            self.value(x)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                });
        self.derived(Vec::new(), vec![m], &[x], Op::Max(x, arg))
    }

    /// Numerically stable `log Σ exp(x)` over all elements.
    pub fn log_sum_exp(&mut self, x: Var) -> Var {
        let y = log_sum_exp(self.value(x).iter().copied());
        self.derived(Vec::new(), vec![y], &[x], Op::LogSumExp(x))
    }

    /// Row-wise log-sum-exp of an `m×n` matrix over the entries where
    /// `include` is true. Every row must include at least one entry.
    pub fn log_sum_exp_rows(&mut self, x: Var, include: Option<Vec<bool>>) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "log_sum_exp_rows")?;
        let include = include.unwrap_or_else(|| vec![true; m * n]);
        if include.len() != m * n {
            return Err(mismatch("log_sum_exp_rows", &[m, n], &[include.len()]));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let row = (r * n..(r + 1) * n).filter(|&i| include[i]).map(|i| xv[i]);
            if row.clone().next().is_none() {
                return Err(Error::EmptyInput("log_sum_exp_rows"));
            }
            out.push(log_sum_exp(row));
        }
        Ok(self.derived(vec![m], out, &[x], Op::LogSumExpRows(x, include)))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::EmptyInput("concat"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(mismatch("concat", &base, &[axis]));
        }
        let mut along = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(mismatch("concat", &base, s));
            }
            along += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut out = Vec::new();
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis..].iter().product::<usize>();
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = along;
        Ok(self.derived(shape, out, inputs, Op::Concat(inputs.to_vec(), axis)))
    }

    /// Dispatches a named reduction. `Concat` joins along the last axis.
    pub fn reduce(&mut self, kind: ReduceKind, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput("reduce"));
        }
        if kind != ReduceKind::Concat && inputs.len() != 1 {
            return Err(Error::Arity {
                op: "reduce",
                expected: 1,
                got: inputs.len(),
            });
        }
        Ok(match kind {
            ReduceKind::Sum => self.sum(inputs[0]),
            ReduceKind::Mean => self.mean(inputs[0]),
            ReduceKind::Max => self.max(inputs[0]),
            ReduceKind::LogSumExp => self.log_sum_exp(inputs[0]),
            ReduceKind::Concat => {
                let axis = self.shape(inputs[0]).len().saturating_sub(1);
                self.concat(inputs, axis)?
            }
        })
    }

    /// Picks flat elements by index into a new vector.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("gather"));
        }
        let xv = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(mismatch("gather", self.shape(x), &[bad]));
        }
        let out = indices.iter().map(|&i| xv[i]).collect();
        Ok(self.derived(vec![indices.len()], out, &[x], Op::Gather(x, indices)))
    }

    /// Picks whole rows of a matrix.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (m, d) = self.matrix_dims(x, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::EmptyInput("gather_rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(mismatch("gather_rows", &[m, d], &[bad]));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            out.extend_from_slice(&xv[r * d..(r + 1) * d]);
        }
        Ok(self.derived(vec![rows.len(), d], out, &[x], Op::GatherRows(x, rows)))
    }

    /// For each bag of row ids, the mean of the corresponding table rows
    /// (repeated ids count with multiplicity). Empty bags give zero rows.
    pub fn embedding_bag(&mut self, table: Var, bags: Vec<Vec<usize>>) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "embedding_bag")?;
        if bags.is_empty() {
            return Err(Error::EmptyInput("embedding_bag"));
        }
        let tv = self.value(table);
        let mut out = vec![0.0; bags.len() * d];
        for (b, bag) in bags.iter().enumerate() {
            if let Some(&bad) = bag.iter().find(|&&id| id >= v) {
                return Err(mismatch("embedding_bag", &[v, d], &[bad]));
            }
            if bag.is_empty() {
                continue;
            }
            let row = &mut out[b * d..(b + 1) * d];
            for &id in bag {
                for (o, t) in row.iter_mut().zip(&tv[id * d..(id + 1) * d]) {
                    *o += t;
                }
            }
            let inv = 1.0 / bag.len() as f64;
            row.iter_mut().for_each(|o| *o *= inv);
        }
        Ok(self.derived(
            vec![bags.len(), d],
            out,
            &[table],
            Op::EmbeddingBag(table, bags),
        ))
    }

    /// Propagates `d(root)/d(node)` to every gradient-requiring leaf.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rn = &self.nodes[root.0];
        if rn.value.len() != 1 {
            return Err(Error::NonScalarRoot(rn.shape.clone()));
        }
        if !rn.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                let n = &nodes[v.0];
                if n.requires_grad {
                    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
                    f(buf);
                }
            };
            match &node.op {
                Op::Leaf => leaf_grads.push((idx, g)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let p = nodes[b.0].shape[1];
                    acc(*a, &mut |ga| {
                        for i in 0..m {
                            let grow = &g[i * p..(i + 1) * p];
                            for t in 0..k {
                                ga[i * k + t] += dot(grow, &bv[t * p..(t + 1) * p]);
                            }
                        }
                    });
                    acc(*b, &mut |gb| {
                        for i in 0..m {
                            let grow = &g[i * p..(i + 1) * p];
                            for t in 0..k {
                                let x = av[i * k + t];
                                for (o, gv) in gb[t * p..(t + 1) * p].iter_mut().zip(grow) {
                                    *o += x * gv;
                                }
                            }
                        }
                    });
                }
                Op::Unary(kind, x) => {
                    let (xv, yv) = (&nodes[x.0].value, &node.value);
                    acc(*x, &mut |gx| {
                        for i in 0..gx.len() {
                            gx[i] += g[i]
                                * match kind {
                                    Unary::Tanh => 1.0 - yv[i] * yv[i],
                                    Unary::Relu => (xv[i] > 0.0) as u8 as f64,
                                    Unary::Abs if xv[i] > 0.0 => 1.0,
                                    Unary::Abs if xv[i] < 0.0 => -1.0,
                                    Unary::Abs => 0.0,
                                    Unary::Square => 2.0 * xv[i],
                                };
                        }
                    });
                }
                Op::Scale(x, c) => acc(*x, &mut |gx| {
                    gx.iter_mut().zip(&g).for_each(|(o, gv)| *o += c * gv);
                }),
                Op::Binary(kind, a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (la, lb) = (av.len(), bv.len());
                    let at = |i: usize| av[if la == 1 { 0 } else { i }];
                    let bt = |i: usize| bv[if lb == 1 { 0 } else { i }];
                    acc(*a, &mut |ga| {
                        for (i, gv) in g.iter().enumerate() {
                            let d = match kind {
                                Binary::Add | Binary::Sub => *gv,
                                Binary::Mul => gv * bt(i),
                            };
                            ga[if la == 1 { 0 } else { i }] += d;
                        }
                    });
                    acc(*b, &mut |gb| {
                        for (i, gv) in g.iter().enumerate() {
                            let d = match kind {
                                Binary::Add => *gv,
                                Binary::Sub => -gv,
                                Binary::Mul => gv * at(i),
                            };
                            gb[if lb == 1 { 0 } else { i }] += d;
                        }
                    });
                }
                Op::AddRow(x, row) => {
                    let n = nodes[row.0].value.len();
                    acc(*x, &mut |gx| {
                        gx.iter_mut().zip(&g).for_each(|(o, gv)| *o += gv)
                    });
                    acc(*row, &mut |gr| {
                        for chunk in g.chunks(n) {
                            gr.iter_mut().zip(chunk).for_each(|(o, gv)| *o += gv);
                        }
                    });
                }
                Op::Cosine(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (ga_row, gb_row) = cosine_grads(av, bv, node.value[0]);
                    acc(*a, &mut |ga| {
                        ga.iter_mut().zip(&ga_row).for_each(|(o, d)| *o += g[0] * d)
                    });
                    acc(*b, &mut |gb| {
                        gb.iter_mut().zip(&gb_row).for_each(|(o, d)| *o += g[0] * d)
                    });
                }
                Op::CosineRows(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let d = nodes[a.0].shape[1];
                    let parts: Vec<_> = (0..g.len())
                        .map(|i| {
                            cosine_grads(
                                &av[i * d..(i + 1) * d],
                                &bv[i * d..(i + 1) * d],
                                node.value[i],
                            )
                        })
                        .collect();
                    acc(*a, &mut |ga| {
                        for (i, (pa, _)) in parts.iter().enumerate() {
                            ga[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(pa)
                                .for_each(|(o, x)| *o += g[i] * x);
                        }
                    });
                    acc(*b, &mut |gb| {
                        for (i, (_, pb)) in parts.iter().enumerate() {
                            gb[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(pb)
                                .for_each(|(o, x)| *o += g[i] * x);
                        }
                    });
                }
                Op::CosineMatrix(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, d) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[0];
                    let na: Vec<f64> = (0..m).map(|i| norm(&av[i * d..(i + 1) * d])).collect();
                    let nb: Vec<f64> = (0..n).map(|j| norm(&bv[j * d..(j + 1) * d])).collect();
                    let s = &node.value;
                    acc(*a, &mut |ga| {
                        for i in 0..m {
                            let ai = &av[i * d..(i + 1) * d];
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                let bj = &bv[j * d..(j + 1) * d];
                                let c1 = gij / (na[i] * nb[j]);
                                let c2 = gij * s[i * n + j] / (na[i] * na[i]);
                                for t in 0..d {
                                    ga[i * d + t] += c1 * bj[t] - c2 * ai[t];
                                }
                            }
                        }
                    });
                    acc(*b, &mut |gb| {
                        for j in 0..n {
                            let bj = &bv[j * d..(j + 1) * d];
                            for i in 0..m {
                                let gij = g[i * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                let ai = &av[i * d..(i + 1) * d];
                                let c1 = gij / (na[i] * nb[j]);
                                let c2 = gij * s[i * n + j] / (nb[j] * nb[j]);
                                for t in 0..d {
                                    gb[j * d + t] += c1 * ai[t] - c2 * bj[t];
                                }
                            }
                        }
                    });
                }
                Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
                Op::Mean(x) => acc(*x, &mut |gx| {
                    let inv = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += inv);
                }),
                Op::Max(x, arg) => acc(*x, &mut |gx| gx[*arg] += g[0]),
                Op::LogSumExp(x) => {
                    let (xv, y) = (&nodes[x.0].value, node.value[0]);
                    acc(*x, &mut |gx| {
                        gx.iter_mut()
                            .zip(xv.iter())
                            .for_each(|(o, v)| *o += g[0] * (v - y).exp());
                    });
                }
                Op::LogSumExpRows(x, include) => {
                    let xv = &nodes[x.0].value;
                    let n = nodes[x.0].shape[1];
                    acc(*x, &mut |gx| {
                        for (r, (gr, y)) in g.iter().zip(node.value.iter()).enumerate() {
                            for i in r * n..(r + 1) * n {
                                if include[i] {
                                    gx[i] += gr * (xv[i] - y).exp();
                                }
                            }
                        }
                    });
                }
                Op::Concat(inputs, axis) => {
                    let outer: usize = node.shape[..*axis].iter().product();
                    let out_chunk: usize = node.shape[*axis..].iter().product();
                    let mut offset = 0;
                    for &v in inputs {
                        let chunk: usize = nodes[v.0].shape[*axis..].iter().product();
                        acc(v, &mut |gv| {
                            for o in 0..outer {
                                let src =
                                    &g[o * out_chunk + offset..o * out_chunk + offset + chunk];
                                gv[o * chunk..(o + 1) * chunk]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, s)| *d += s);
                            }
                        });
                        offset += chunk;
                    }
                }
                Op::Gather(x, indices) => acc(*x, &mut |gx| {
                    for (gv, &i) in g.iter().zip(indices) {
                        gx[i] += gv;
                    }
                }),
                Op::GatherRows(x, rows) => {
                    let d = nodes[x.0].shape[1];
                    acc(*x, &mut |gx| {
                        for (k, &r) in rows.iter().enumerate() {
                            gx[r * d..(r + 1) * d]
                                .iter_mut()
                                .zip(&g[k * d..(k + 1) * d])
                                .for_each(|(o, gv)| *o += gv);
                        }
                    });
                }
                Op::EmbeddingBag(table, bags) => {
                    let d = nodes[table.0].shape[1];
                    acc(*table, &mut |gt| {
                        for (b, bag) in bags.iter().enumerate() {
                            if bag.is_empty() {
                                continue;
                            }
                            let inv = 1.0 / bag.len() as f64;
                            let grow = &g[b * d..(b + 1) * d];
                            for &id in bag {
                                gt[id * d..(id + 1) * d]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(o, gv)| *o += inv * gv);
                            }
                        }
                    });
                }
            }
        }

        for (idx, g) in leaf_grads {
            match &mut self.nodes[idx].grad {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(o, v)| *o += v),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Partial derivatives of `cos(a, b)` with respect to `a` and `b`.
fn cosine_grads(a: &[f64], b: &[f64], c: f64) -> (Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    let inv = 1.0 / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| y * inv - c * x / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| x * inv - c * y / (nb * nb))
        .collect();
    (ga, gb)
}
