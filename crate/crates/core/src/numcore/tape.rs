//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value. Because inputs
//! are always recorded before the nodes that consume them, walking the node
//! list backwards is a reverse topological order, and one sweep from the loss
//! populates the gradient of every node that depends on a parameter.
//!
//! Matrices are row-major `[rows, cols]` and batched activations keep one
//! example per row.

use crate::error::{Error, Result};
use crate::numcore::sigmoid;
use crate::numcore::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    RowCosine(Var, Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        total_weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations for one reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zero when `var` has no
    /// path to the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    /// Moves the gradient out, leaving the slot empty.
    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `c = beta * c + op(a) * op(b)` for row-major buffers, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`. A transposed operand is read from its
/// stored row-major layout with swapped strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly m*k, k*n and m*n elements and the
    // strides above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
    match &mut grads[var.0] {
        Some(g) => {
            for (a, d) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn grad_slot<'a>(
    grads: &'a mut [Option<Tensor>],
    var: Var,
    shape: &[usize],
) -> &'a mut Tensor {
    grads[var.0].get_or_insert_with(|| Tensor::zeros(shape))
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn matrix_dims(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(var);
        if t.rank() != 2 {
            return Err(Error::Dimension {
                op,
                left: t.shape().to_vec(),
                right: vec![0, 0],
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a bias vector `[n]` to every row of `[m, n]` (or to a vector `[n]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.rank() != 1 || xv.cols() != bv.len() || xv.rank() == 0 {
            return Err(dim_err("add_bias", xv, bv));
        }
        let n = bv.len();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(dim_err(name, av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.needs(&[x]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, shift: f64) -> Var {
        self.unary(x, |v| v + shift, Op::AddScalar(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// `max(0, x)`, the hinge of the negative-sample loss.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Row-wise softmax, stabilized by max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.all_finite() {
            return Err(Error::NumericDomain("softmax input is not finite".into()));
        }
        let n = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "slice_cols")?;
        if start >= end || end > cols {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: vec![rows, cols],
                right: vec![start, end],
            });
        }
        let width = end - start;
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows, width], data)?,
            Op::SliceCols(x, start),
            rg,
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "slice_rows")?;
        if start >= end || end > rows {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: vec![rows, cols],
                right: vec![start, end],
            });
        }
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![end - start, cols], data)?,
            Op::SliceRows(x, start),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols of nothing".into()))?;
        let (rows, _) = self.matrix_dims(first, "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(dim_err("concat_cols", self.value(first), self.value(p)));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat_rows of nothing".into()))?;
        let (_, cols) = self.matrix_dims(first, "concat_rows")?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != cols {
                return Err(dim_err("concat_rows", self.value(first), self.value(p)));
            }
            total += r;
        }
        let mut data = Vec::with_capacity(total * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![total, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(table, "gather")?;
        if indices.is_empty() {
            return Err(Error::Input("gather with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "row index {bad} out of range for table with {rows} rows"
            )));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(tv.row(i));
        }
        let rg = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(vec![indices.len(), cols], data)?,
            Op::Gather(table, indices.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Cosine similarity between corresponding rows, giving a vector `[rows]`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() || av.rank() == 0 {
            return Err(dim_err("row_cosine", av, bv));
        }
        let rows = av.rows();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            out.push(crate::numcore::cosine(av.row(r), bv.row(r))?);
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::vector(out)?, Op::RowCosine(a, b), rg))
    }

    /// Scalar cosine similarity of two vectors.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        let n = self.value(u).len();
        let u2 = self.reshape(u, &[1, n])?;
        let m = self.value(v).len();
        let v2 = self.reshape(v, &[1, m])?;
        let c = self.row_cosine(u2, v2)?;
        self.reshape(c, &[])
    }

    /// `W x + b` for `W: [m, n]`, `x: [n]`, `b: [m]`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(w, "affine")?;
        let xv = self.value(x);
        let bv = self.value(b);
        if xv.rank() != 1 || xv.len() != n {
            return Err(dim_err("affine", self.value(w), xv));
        }
        if bv.rank() != 1 || bv.len() != m {
            return Err(dim_err("affine", self.value(w), bv));
        }
        let col = self.reshape(x, &[n, 1])?;
        let prod = self.matmul(w, col)?;
        let flat = self.reshape(prod, &[m])?;
        self.add_bias(flat, b)
    }

    /// Weighted mean negative log-likelihood of `targets` under the row-wise
    /// softmax of `logits`. Rows with weight 0 are ignored; if all weights are
    /// 0 the loss is 0.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(logits, "softmax_cross_entropy")?;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                left: vec![rows, cols],
                right: vec![targets.len(), weights.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Input(format!(
                "target class {bad} out of range for {cols} classes"
            )));
        }
        let lv = self.value(logits);
        if !lv.all_finite() {
            return Err(Error::NumericDomain("logits are not finite".into()));
        }
        let mut probs = lv.data().to_vec();
        let total_weight: f64 = weights.iter().sum();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(cols).enumerate() {
            let log_z = log_sum_exp(row);
            if weights[r] != 0.0 {
                loss += weights[r] * (log_z - row[targets[r]]);
            }
            for p in row.iter_mut() {
                *p = (*p - log_z).exp();
            }
        }
        if total_weight > 0.0 {
            loss /= total_weight;
        }
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                total_weight,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backward_node(node, g, &mut grads)?;
        }

        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if rg(*a) {
                    let slot = grad_slot(grads, *a, av.shape());
                    gemm(m, n, k, g.data(), false, bv.data(), true, slot.data_mut(), 1.0);
                }
                if rg(*b) {
                    let slot = grad_slot(grads, *b, bv.shape());
                    gemm(k, m, n, av.data(), true, g.data(), false, slot.data_mut(), 1.0);
                }
            }
            Op::AddBias(x, bias) => {
                if rg(*bias) {
                    let n = self.value(*bias).len();
                    let slot = grad_slot(grads, *bias, &[n]);
                    for row in g.data().chunks(n) {
                        for (s, d) in slot.data_mut().iter_mut().zip(row) {
                            *s += d;
                        }
                    }
                }
                if rg(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::Add(a, b) => {
                if rg(*a) && rg(*b) {
                    accumulate(grads, *a, g.clone());
                    accumulate(grads, *b, g);
                } else if rg(*a) {
                    accumulate(grads, *a, g);
                } else if rg(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if rg(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
                if rg(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let d = zip_map(&g, self.value(*b), |x, y| x * y);
                    accumulate(grads, *a, d);
                }
                if rg(*b) {
                    let d = zip_map(&g, self.value(*a), |x, y| x * y);
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, f) => accumulate(grads, *x, g.map(|v| v * f)),
            Op::AddScalar(x) => accumulate(grads, *x, g),
            Op::Sigmoid(x) => {
                let d = zip_map(&g, &node.value, |gi, y| gi * y * (1.0 - y));
                accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = zip_map(&g, &node.value, |gi, y| gi * (1.0 - y * y));
                accumulate(grads, *x, d);
            }
            Op::Relu(x) => {
                let d = zip_map(&g, self.value(*x), |gi, v| if v > 0.0 { gi } else { 0.0 });
                accumulate(grads, *x, d);
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(n).zip(node.value.data().chunks(n)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (di, yi) in drow.iter_mut().zip(yrow) {
                        *di = yi * (*di - dot);
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let width = g.cols();
                let slot = grad_slot(grads, *x, xv.shape());
                for (r, grow) in g.data().chunks(width).enumerate() {
                    let dst = &mut slot.data_mut()[r * cols + start..r * cols + start + width];
                    for (s, d) in dst.iter_mut().zip(grow) {
                        *s += d;
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let slot = grad_slot(grads, *x, xv.shape());
                let dst = &mut slot.data_mut()[start * cols..start * cols + g.len()];
                for (s, d) in dst.iter_mut().zip(g.data()) {
                    *s += d;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    if rg(p) {
                        let slot = grad_slot(grads, p, pv.shape());
                        for (r, grow) in g.data().chunks(total).enumerate() {
                            for (s, d) in slot.row_mut(r).iter_mut().zip(&grow[offset..offset + w]) {
                                *s += d;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    if rg(p) {
                        let slot = grad_slot(grads, p, pv.shape());
                        for (s, d) in slot.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *s += d;
                        }
                    }
                    offset += n;
                }
            }
            Op::Gather(table, indices) => {
                let tv = self.value(*table);
                let slot = grad_slot(grads, *table, tv.shape());
                for (r, &i) in indices.iter().enumerate() {
                    for (s, d) in slot.row_mut(i).iter_mut().zip(g.row(r)) {
                        *s += d;
                    }
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, g.reshape(&shape)?);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                accumulate(grads, *x, Tensor::filled(self.value(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gv = g.data()[0] / xv.len() as f64;
                accumulate(grads, *x, Tensor::filled(xv.shape(), gv));
            }
            Op::RowCosine(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut da = Tensor::zeros(av.shape());
                let mut db = Tensor::zeros(bv.shape());
                for r in 0..av.rows() {
                    let (x, y) = (av.row(r), bv.row(r));
                    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let cos = node.value.data()[r];
                    let gr = g.data()[r];
                    for (j, (&xj, &yj)) in x.iter().zip(y).enumerate() {
                        da.row_mut(r)[j] = gr * (yj / (nx * ny) - cos * xj / (nx * nx));
                        db.row_mut(r)[j] = gr * (xj / (nx * ny) - cos * yj / (ny * ny));
                    }
                }
                if rg(*a) {
                    accumulate(grads, *a, da);
                }
                if rg(*b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                weights,
                probs,
                total_weight,
            } => {
                let lv = self.value(*logits);
                let cols = lv.cols();
                let scale = if *total_weight > 0.0 {
                    g.data()[0] / total_weight
                } else {
                    0.0
                };
                let slot = grad_slot(grads, *logits, lv.shape());
                for (r, (srow, prow)) in slot
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(probs.chunks(cols))
                    .enumerate()
                {
                    let w = weights[r] * scale;
                    if w == 0.0 {
                        continue;
                    }
                    for (s, p) in srow.iter_mut().zip(prow) {
                        *s += w * p;
                    }
                    srow[targets[r]] -= w;
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map operands share a shape")
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecv(tape: &mut Tape, v: &[f64]) -> Var {
        tape.param(Tensor::vector(v.to_vec()).unwrap())
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = vecv(&mut tape, &[1.0, -2.0, 3.0]);
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.get(loss).data(), &[1.0]);
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = vecv(&mut tape, &[1.0, 2.0]);
        let unused = vecv(&mut tape, &[5.0, 6.0, 7.0]);
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = vecv(&mut tape, &[1.0, 2.0]);
        let y = tape.tanh(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x * x) -> grad 2x
        let mut tape = Tape::new();
        let x = vecv(&mut tape, &[1.5, -3.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[3.0, -6.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::zeros(&[2, 4]));
        let loss = tape
            .softmax_cross_entropy(logits, &[1, 3], &[1.0, 1.0])
            .unwrap();
        assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
        let g = tape.backward(loss).unwrap().get(logits);
        // (p - onehot) / 2
        assert!((g.data()[1] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((g.data()[0] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_rows_are_ignored() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::matrix(2, 2, vec![0.0, 0.0, 5.0, -5.0]).unwrap());
        let loss = tape
            .softmax_cross_entropy(logits, &[0, 1], &[1.0, 0.0])
            .unwrap();
        assert!((tape.value(loss).data()[0] - 2f64.ln()).abs() < 1e-12);
        let g = tape.backward(loss).unwrap().get(logits);
        assert_eq!(&g.data()[2..], &[0.0, 0.0]);
    }
}
