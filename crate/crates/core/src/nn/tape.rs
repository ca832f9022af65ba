//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! the handles of its inputs. [`Tape::backward`] walks the nodes in reverse
//! creation order (a valid reverse topological order) and applies the
//! per-op backward rule.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::ops;
use super::{GradSet, NnError, ParamSet, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    BroadcastRows(Var),
    Relu(Var),
    Scale(Var, f64),
    Softmax(Var),
    Transpose(Var),
    Unfold(Var, usize),
    AvgPool(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    SumAll(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: BTreeMap<String, Var>,
    record: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    /// A tape that records backward information.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            record: true,
        }
    }

    /// A forward-only tape; [`Tape::backward`] on it is an error.
    pub fn no_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a named parameter. Repeated requests for the same name
    /// return the same node so gradients accumulate in one place.
    pub fn param(&mut self, params: &'a ParamSet, name: &str) -> Result<Var, NnError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = params.value(name)?;
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: self.record,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NnError> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, name)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.zip_with(a, b, "add", |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.zip_with(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.zip_with(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the `1 x c` row `row` to every row of `m`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var, NnError> {
        let (mv, rv) = (self.value(m), self.value(row));
        if rv.rows() != 1 || rv.cols() != mv.cols() {
            return Err(NnError::Shape {
                op: "add_row",
                left: mv.shape(),
                right: rv.shape(),
            });
        }
        let mut out = mv.clone();
        ops::add_row_in_place(&mut out, rv);
        Ok(self.push(out, Op::AddRow(m, row), &[m, row]))
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Result<Var, NnError> {
        let rv = self.value(row);
        if rv.rows() != 1 {
            return Err(NnError::Shape {
                op: "broadcast_rows",
                left: rv.shape(),
                right: (1, rv.cols()),
            });
        }
        let data = rv.data().repeat(n);
        let out = Tensor::new(n, rv.cols(), data)?;
        Ok(self.push(out, Op::BroadcastRows(row), &[row]))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = ops::softmax_rows(self.value(x));
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Row softmax where hidden columns receive exactly zero weight.
    pub fn softmax_rows_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var, NnError> {
        let out = ops::softmax_rows_masked(self.value(x), Some(mask))?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x), &[x])
    }

    pub fn unfold_rows(&mut self, x: Var, window: usize) -> Result<Var, NnError> {
        let out = ops::unfold_rows(self.value(x), window)?;
        Ok(self.push(out, Op::Unfold(x, window), &[x]))
    }

    pub fn avg_pool_rows(&mut self, x: Var) -> Var {
        let out = ops::avg_pool_rows(self.value(x));
        self.push(out, Op::AvgPool(x), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = *parts
            .first()
            .ok_or_else(|| NnError::Config("concat of nothing".into()))?;
        let rows = self.value(first).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(NnError::Shape {
                    op: "concat_cols",
                    left: self.value(first).shape(),
                    right: pv.shape(),
                });
            }
            for r in 0..rows {
                let dst = &mut out.data_mut()[r * cols + offset..r * cols + offset + pv.cols()];
                dst.copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = *parts
            .first()
            .ok_or_else(|| NnError::Config("concat of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(NnError::Shape {
                    op: "concat_rows",
                    left: self.value(first).shape(),
                    right: pv.shape(),
                });
            }
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.cols() {
            return Err(NnError::Shape {
                op: "slice_cols",
                left: xv.shape(),
                right: (start, len),
            });
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new(xv.rows(), len, data)?;
        Ok(self.push(out, Op::SliceCols(x, start), &[x]))
    }

    /// Gathers rows of `x` by index (embedding lookup, row selection).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NnError> {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * xv.cols());
        for &r in rows {
            if r >= xv.rows() {
                return Err(NnError::Shape {
                    op: "select_rows",
                    left: xv.shape(),
                    right: (r, 1),
                });
            }
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(rows.len(), xv.cols(), data)?;
        Ok(self.push(out, Op::SelectRows(x, rows.to_vec()), &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf on
    /// this tape.
    pub fn backward(&self, loss: Var) -> Result<GradSet, NnError> {
        if !self.record {
            return Err(NnError::Config("backward on a no_grad tape".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(NnError::Shape {
                op: "backward",
                left: self.shape(loss),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, &self.nodes, *a, ops::matmul_nt(&g, bv)?);
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, &self.nodes, *b, ops::matmul(&av.transpose(), &g)?);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, &self.nodes, *a, ops::matmul(&g, bv)?);
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, &self.nodes, *b, ops::matmul(&g.transpose(), av)?);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, &self.nodes, *b, g.clone());
                    accumulate(&mut grads, &self.nodes, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, &self.nodes, *b, g.map(|v| -v));
                    accumulate(&mut grads, &self.nodes, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, &self.nodes, *a, hadamard(&g, bv));
                    accumulate(&mut grads, &self.nodes, *b, hadamard(&g, av));
                }
                Op::AddRow(m, row) => {
                    accumulate(&mut grads, &self.nodes, *row, column_sums(&g));
                    accumulate(&mut grads, &self.nodes, *m, g);
                }
                Op::BroadcastRows(row) => {
                    accumulate(&mut grads, &self.nodes, *row, column_sums(&g));
                }
                Op::Relu(x) => {
                    let out = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(&d, &y)| if y > 0.0 { d } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, &self.nodes, *x, Tensor::new(g.rows(), g.cols(), data)?);
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads, &self.nodes, *x, g.map(|v| v * s));
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols() {
                            dx.set(r, c, yr[c] * (gr[c] - dot));
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *x, dx);
                }
                Op::Transpose(x) => {
                    accumulate(&mut grads, &self.nodes, *x, g.transpose());
                }
                Op::Unfold(x, window) => {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut dx = Tensor::zeros(xv.rows(), d);
                    for i in 0..g.rows() {
                        for w in 0..*window {
                            for c in 0..d {
                                let cur = dx.get(i + w, c);
                                dx.set(i + w, c, cur + g.get(i, w * d + c));
                            }
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *x, dx);
                }
                Op::AvgPool(x) => {
                    let rows = self.value(*x).rows();
                    let scaled = g.map(|v| v / rows as f64);
                    let data = scaled.data().repeat(rows);
                    accumulate(&mut grads, &self.nodes, *x, Tensor::new(rows, g.cols(), data)?);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.value(*p).cols();
                        if self.nodes[p.0].needs_grad {
                            let mut data = Vec::with_capacity(g.rows() * pc);
                            for r in 0..g.rows() {
                                data.extend_from_slice(&g.row(r)[offset..offset + pc]);
                            }
                            accumulate(&mut grads, &self.nodes, *p, Tensor::new(g.rows(), pc, data)?);
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pr = self.value(*p).rows();
                        if self.nodes[p.0].needs_grad {
                            let slice = g.data()[offset * g.cols()..(offset + pr) * g.cols()].to_vec();
                            accumulate(&mut grads, &self.nodes, *p, Tensor::new(pr, g.cols(), slice)?);
                        }
                        offset += pr;
                    }
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            dx.set(r, start + c, g.get(r, c));
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *x, dx);
                }
                Op::SelectRows(x, rows) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..xv.cols() {
                            let cur = dx.get(r, c);
                            dx.set(r, c, cur + g.get(i, c));
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *x, dx);
                }
                Op::SumAll(x) => {
                    let (r, c) = self.shape(*x);
                    accumulate(&mut grads, &self.nodes, *x, Tensor::filled(r, c, g.item()));
                }
            }
        }

        let mut out = GradSet::default();
        for (name, var) in &self.params {
            if var.0 > loss.0 {
                continue;
            }
            if let Some(g) = grads[var.0].take() {
                if !g.is_finite() {
                    return Err(NnError::NonFinite(name.clone()));
                }
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node<'_>], v: Var, g: Tensor) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}
