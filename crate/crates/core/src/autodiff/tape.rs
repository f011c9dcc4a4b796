//! Define-by-run gradient tape.
//!
//! Every primitive applied through a [`Tape`] appends one node holding its
//! output value plus whatever it needs for the reverse sweep. Nodes only
//! reference earlier nodes, so the node list is already a topological order
//! and [`Tape::backward`] is a single reverse scan.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Primitive kinds accepted by [`Tape::record`]. Primitives carrying extra
/// attributes (gather indices, constants, slice bounds) have dedicated methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Relu,
    Exp,
    Neg,
    Square,
    Sqrt,
    Ln,
    Recip,
    /// Concatenate along the last (feature) axis.
    Concat,
    /// Max over rows of an `n x c` matrix, giving `1 x c`.
    MaxRows,
    Sum,
    /// Per-row sum of an `n x c` matrix, giving `n x 1`.
    SumCols,
    /// `x + b` with `b` (length `c`) added to every row of `x`.
    AddRow,
    /// Multiply by a single-element tensor.
    MulScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Exp(Var),
    Neg(Var),
    Square(Var),
    Sqrt(Var),
    Ln(Var),
    Recip(Var),
    Scale(Var, f64),
    AddConst(Var),
    Concat(Vec<Var>),
    MaxRows { input: Var, argmax: Vec<usize> },
    Sum(Var),
    SumCols(Var),
    Gather { input: Var, indices: Vec<usize> },
    BroadcastRows(Var),
    Reshape(Var),
    SliceRows { input: Var, start: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only recording of primitive applications. Confined to one thread.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    strict: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Reverse-sweep result: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, `None` if `v` was not reached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.tape, self.tape, "variable belongs to another tape");
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        assert_eq!(v.tape, self.tape, "variable belongs to another tape");
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            strict: false,
        }
    }

    /// A tape that rejects non-finite inputs to every primitive.
    pub fn strict() -> Self {
        Self {
            strict: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn check(&self, op: &str, inputs: &[Var]) -> Result<()> {
        for v in inputs {
            if v.tape != self.id || v.index >= self.nodes.len() {
                return Err(Error::ForeignVar(op.to_string()));
            }
            if self.strict && !self.nodes[v.index].value.all_finite() {
                return Err(Error::NonFinite(format!("input to {op}")));
            }
        }
        Ok(())
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    fn matrix(&self, op: &str, v: Var) -> Result<(usize, usize)> {
        self.value(v).matrix_dims().ok_or_else(|| {
            Error::Shape(format!(
                "{op}: expected a matrix, got shape {:?}",
                self.value(v).shape()
            ))
        })
    }

    /// Generic entry point for attribute-free primitives.
    pub fn record(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Shape(format!(
                    "{kind:?} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            OpKind::Concat => self.concat(inputs),
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul | OpKind::AddRow
            | OpKind::MulScalar => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match kind {
                    OpKind::Add => self.add(a, b),
                    OpKind::Sub => self.sub(a, b),
                    OpKind::Mul => self.mul(a, b),
                    OpKind::MatMul => self.matmul(a, b),
                    OpKind::AddRow => self.add_row(a, b),
                    _ => self.mul_scalar(a, b),
                }
            }
            _ => {
                arity(1)?;
                let a = inputs[0];
                match kind {
                    OpKind::Relu => self.relu(a),
                    OpKind::Exp => self.exp(a),
                    OpKind::Neg => self.neg(a),
                    OpKind::Square => self.square(a),
                    OpKind::Sqrt => self.sqrt(a),
                    OpKind::Ln => self.ln(a),
                    OpKind::Recip => self.recip(a),
                    OpKind::MaxRows => self.max_rows(a),
                    OpKind::Sum => self.sum(a),
                    _ => self.sum_cols(a),
                }
            }
        }
    }

    fn binary_same(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        self.check(name, &[a, b])?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "{name}: shapes {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(op(a, b), out, rg))
    }

    fn unary(&mut self, name: &str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(name, &[a])?;
        let out = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        Ok(self.push(op, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check("add_row", &[x, bias])?;
        let (_, c) = self.matrix("add_row", x)?;
        let vb = self.value(bias);
        if vb.len() != c {
            return Err(Error::Shape(format!(
                "add_row: row vector of length {} cannot broadcast over {} columns",
                vb.len(),
                c
            )));
        }
        let vx = self.value(x);
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Op::AddRow(x, bias), out, rg))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check("mul_scalar", &[a, s])?;
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!(
                "mul_scalar: multiplier must have one element, got shape {:?}",
                self.value(s).shape()
            )));
        }
        let k = self.value(s).item();
        let out = self.value(a).map(|x| x * k);
        let rg = self.any_grad(&[a, s]);
        Ok(self.push(Op::MulScalar(a, s), out, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("matmul", &[a, b])?;
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions differ ({m}x{k} times {k2}x{n})"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    /// Square root. The backward pass uses a zero subgradient at 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.check("sqrt", &[a])?;
        if let Some(x) = self.value(a).data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative value {x}")));
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.check("ln", &[a])?;
        if let Some(x) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("ln of non-positive value {x}")));
        }
        self.unary("ln", a, f64::ln, Op::Ln(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.check("recip", &[a])?;
        if self.value(a).data().contains(&0.0) {
            return Err(Error::Domain("recip of zero".into()));
        }
        self.unary("recip", a, |x| 1.0 / x, Op::Recip(a))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    /// Add a constant.
    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_const", a, |x| x + c, Op::AddConst(a))
    }

    /// Concatenate matrices with equal row counts along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.check("concat", parts)?;
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let dims = parts
            .iter()
            .map(|&p| self.matrix("concat", p))
            .collect::<Result<Vec<_>>>()?;
        let rows = dims[0].0;
        if let Some((r, _)) = dims.iter().find(|(r, _)| *r != rows) {
            return Err(Error::Shape(format!(
                "concat: row counts differ ({rows} vs {r})"
            )));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let shape = if rows == 1 && parts.iter().all(|&p| self.value(p).shape().len() == 1) {
            vec![total]
        } else {
            vec![rows, total]
        };
        let rg = self.any_grad(parts);
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::new(shape, out)?, rg))
    }

    /// Column-wise max over the rows of an `n x c` matrix. Ties go to the
    /// lowest row index.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        self.check("max_rows", &[a])?;
        let (n, c) = self.matrix("max_rows", a)?;
        if n == 0 {
            return Err(Error::Shape("max_rows over zero rows".into()));
        }
        let data = self.value(a).data();
        let mut best = data[..c].to_vec();
        let mut argmax = vec![0usize; c];
        for i in 1..n {
            let row = &data[i * c..(i + 1) * c];
            for j in 0..c {
                if row[j] > best[j] {
                    best[j] = row[j];
                    argmax[j] = i;
                }
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Op::MaxRows { input: a, argmax },
            Tensor::new(vec![1, c], best)?,
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check("sum", &[a])?;
        let s = self.value(a).sum();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Sum(a), Tensor::scalar(s), rg))
    }

    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.check("sum_cols", &[a])?;
        let (n, c) = self.matrix("sum_cols", a)?;
        let data = self.value(a).data();
        let out = (0..n).map(|i| data[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::SumCols(a), Tensor::new(vec![n, 1], out)?, rg))
    }

    /// Selects rows by index. Indices are constants of the recording.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.check("gather_rows", &[a])?;
        let (n, c) = self.matrix("gather_rows", a)?;
        if let Some(&i) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!(
                "gather_rows: index {i} out of range for {n} rows"
            )));
        }
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&data[i * c..(i + 1) * c]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
            Tensor::new(vec![indices.len(), c], out)?,
            rg,
        ))
    }

    /// Repeats a row vector `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        self.check("broadcast_rows", &[a])?;
        let v = self.value(a);
        if v.matrix_dims().map(|(r, _)| r) != Some(1) {
            return Err(Error::Shape(format!(
                "broadcast_rows: expected a single row, got shape {:?}",
                v.shape()
            )));
        }
        let c = v.len();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(v.data());
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::BroadcastRows(a), Tensor::new(vec![n, c], out)?, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check("reshape", &[a])?;
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Reshape(a), out, rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check("slice_rows", &[a])?;
        let (n, c) = self.matrix("slice_rows", a)?;
        if start > end || end > n {
            return Err(Error::Shape(format!(
                "slice_rows: range {start}..{end} out of bounds for {n} rows"
            )));
        }
        let out = self.value(a).data()[start * c..end * c].to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Op::SliceRows { input: a, start },
            Tensor::new(vec![end - start, c], out)?,
            rg,
        ))
    }

    /// Hash of every discrete choice made while recording: relu activity
    /// patterns, max-pool winners, gather indices and zero square roots.
    /// Two recordings with equal signatures lie in the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &x in self.nodes[a.index].value.data() {
                        (x > 0.0).hash(&mut h);
                    }
                }
                Op::MaxRows { argmax, .. } => argmax.hash(&mut h),
                Op::Gather { indices, .. } => indices.hash(&mut h),
                Op::Sqrt(_) => {
                    for &y in node.value.data() {
                        (y == 0.0).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.tape != self.id || root.index >= self.nodes.len() {
            return Err(Error::ForeignVar("backward".into()));
        }
        let rv = &self.nodes[root.index].value;
        if rv.len() != 1 {
            return Err(Error::NotScalar(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.index] = Some(Tensor::full(rv.shape(), 1.0));

        for idx in (0..=root.index).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.index].requires_grad;
        let val = |v: &Var| &nodes[v.index].value;
        // Accumulates `f(i)` into the gradient slot of `v`. A macro rather
        // than a closure so each `f` is inlined into its loop.
        macro_rules! acc {
            ($v:expr, $f:expr) => {
                accumulate_slot(nodes, grads, $v, $f)
            };
        }
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(a, |i| gd[i]);
                acc!(b, |i| gd[i]);
            }
            Op::Sub(a, b) => {
                acc!(a, |i| gd[i]);
                acc!(b, |i| -gd[i]);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(a).data(), val(b).data());
                acc!(a, |i| gd[i] * bd[i]);
                acc!(b, |i| gd[i] * ad[i]);
            }
            Op::AddRow(x, b) => {
                acc!(x, |i| gd[i]);
                let c = val(b).len();
                let mut col = vec![0.0; c];
                for row in gd.chunks(c) {
                    for (s, v) in col.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                acc!(b, |i| col[i]);
            }
            Op::MulScalar(a, s) => {
                let k = val(s).item();
                acc!(a, |i| gd[i] * k);
                if wants(s) {
                    let dot: f64 = gd.iter().zip(val(a).data()).map(|(x, y)| x * y).sum();
                    acc!(s, |_| dot);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = val(a).matrix_dims().unwrap();
                let (_, n) = val(b).matrix_dims().unwrap();
                if wants(a) {
                    let slot = grads[a.index].get_or_insert_with(|| Tensor::zeros(val(a).shape()));
                    // dA = dY * B^T
                    gemm(m, n, k, gd, false, val(b).data(), true, slot.data_mut(), 1.0);
                }
                if wants(b) {
                    let slot = grads[b.index].get_or_insert_with(|| Tensor::zeros(val(b).shape()));
                    // dB = A^T * dY
                    gemm(k, m, n, val(a).data(), true, gd, false, slot.data_mut(), 1.0);
                }
            }
            Op::Relu(a) => {
                let ad = val(a).data();
                acc!(a, |i| if ad[i] > 0.0 { gd[i] } else { 0.0 });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc!(a, |i| gd[i] * y[i]);
            }
            Op::Neg(a) => acc!(a, |i| -gd[i]),
            Op::Square(a) => {
                let ad = val(a).data();
                acc!(a, |i| 2.0 * ad[i] * gd[i]);
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                acc!(a, |i| if y[i] > 0.0 { gd[i] / (2.0 * y[i]) } else { 0.0 });
            }
            Op::Ln(a) => {
                let ad = val(a).data();
                acc!(a, |i| gd[i] / ad[i]);
            }
            Op::Recip(a) => {
                let y = node.value.data();
                acc!(a, |i| -gd[i] * y[i] * y[i]);
            }
            Op::Scale(a, c) => acc!(a, |i| gd[i] * c),
            Op::AddConst(a) => acc!(a, |i| gd[i]),
            Op::Concat(parts) => {
                let total = node.value.matrix_dims().unwrap().1;
                let mut offset = 0;
                for p in parts {
                    let c = val(p).matrix_dims().unwrap().1;
                    acc!(p, |i| {
                        let (r, j) = (i / c, i % c);
                        gd[r * total + offset + j]
                    });
                    offset += c;
                }
            }
            Op::MaxRows { input, argmax } => {
                if wants(input) {
                    let c = argmax.len();
                    let slot = grads[input.index].get_or_insert_with(|| Tensor::zeros(val(input).shape()));
                    let sd = slot.data_mut();
                    for (j, &r) in argmax.iter().enumerate() {
                        sd[r * c + j] += gd[j];
                    }
                }
            }
            Op::Sum(a) => {
                let s = gd[0];
                acc!(a, |_| s);
            }
            Op::SumCols(a) => {
                let c = val(a).matrix_dims().unwrap().1;
                acc!(a, |i| gd[i / c]);
            }
            Op::Gather { input, indices } => {
                if wants(input) {
                    let c = val(input).matrix_dims().unwrap().1;
                    let slot = grads[input.index].get_or_insert_with(|| Tensor::zeros(val(input).shape()));
                    let sd = slot.data_mut();
                    for (k, &r) in indices.iter().enumerate() {
                        for j in 0..c {
                            sd[r * c + j] += gd[k * c + j];
                        }
                    }
                }
            }
            Op::BroadcastRows(a) => {
                let c = val(a).len();
                let mut col = vec![0.0; c];
                for row in gd.chunks(c) {
                    for (s, v) in col.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                acc!(a, |i| col[i]);
            }
            Op::Reshape(a) => acc!(a, |i| gd[i]),
            Op::SliceRows { input, start } => {
                let c = val(input).matrix_dims().unwrap().1;
                let off = start * c;
                if wants(input) {
                    let slot = grads[input.index].get_or_insert_with(|| Tensor::zeros(val(input).shape()));
                    for (s, v) in slot.data_mut()[off..off + gd.len()].iter_mut().zip(gd) {
                        *s += v;
                    }
                }
            }
        }
    }
}

fn accumulate_slot(nodes: &[Node], grads: &mut [Option<Tensor>], v: &Var, f: impl Fn(usize) -> f64) {
    if !nodes[v.index].requires_grad {
        return;
    }
    match &mut grads[v.index] {
        Some(slot) => {
            for (i, s) in slot.data_mut().iter_mut().enumerate() {
                *s += f(i);
            }
        }
        empty => {
            let shape = nodes[v.index].value.shape();
            let data = (0..shape.iter().product()).map(f).collect();
            *empty = Some(Tensor::new(shape.to_vec(), data).expect("gradient matches its node's shape"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn record_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![3.0]));
        let y = tape.record(OpKind::Square, &[x]).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0]);

        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0]));
        let c = tape.record(OpKind::Concat, &[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);

        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let v = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let p = tape.record(OpKind::MatMul, &[m, v]).unwrap();
        assert_eq!(tape.value(p).shape(), &[2, 1]);
        assert_eq!(tape.value(p).data(), &[3.0, 7.0]);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.square(x).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().item(), 6.0);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.exp(x).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().item(), 1.0);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn shape_errors_are_descriptive() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("inner dimensions"), "{err}");
        let c = tape.constant(Tensor::vector(vec![1.0; 4]));
        assert!(tape.add(a, c).is_err());
        assert!(tape.record(OpKind::Add, &[a]).is_err());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(Error::NotScalar(_))));
    }

    #[test]
    fn strict_mode_rejects_non_finite() {
        let mut tape = Tape::strict();
        let a = tape.param(Tensor::vector(vec![f64::NAN]));
        assert!(matches!(tape.exp(a), Err(Error::NonFinite(_))));
        let mut lax = Tape::new();
        let a = lax.param(Tensor::vector(vec![f64::NAN]));
        assert!(lax.exp(a).is_ok());
    }

    #[test]
    fn foreign_var_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.param(Tensor::scalar(1.0));
        assert!(matches!(t2.exp(a), Err(Error::ForeignVar(_))));
    }

    #[test]
    fn max_rows_is_one_hot_with_lowest_index_ties() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3, 2], &[1.0, 5.0, 3.0, 5.0, 3.0, 0.0]));
        let m = tape.max_rows(x).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
        let w = tape.constant(t(&[1, 2], &[2.0, -1.0]));
        let p = tape.mul(m, w).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, -1.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sqrt_at_zero_has_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.0, 4.0]));
        let y = tape.sqrt(x).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[0.0, 0.25]);
    }

    #[test]
    fn gather_and_slice_scatter_back() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = tape.gather_rows(x, &[2, 2, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[5.0, 6.0, 5.0, 6.0, 1.0, 2.0]);
        let s = tape.slice_rows(x, 1, 2).unwrap();
        let gs = tape.sum(g).unwrap();
        let ss = tape.sum(s).unwrap();
        let tot = tape.add(gs, ss).unwrap();
        let grads = tape.backward(tot).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 5.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn branch_signature_tracks_relu_pattern() {
        let sig = |v: f64| {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::vector(vec![v]));
            tape.relu(x).unwrap();
            tape.branch_signature()
        };
        assert_eq!(sig(1.0), sig(2.0));
        assert_ne!(sig(1.0), sig(-1.0));
    }
}
