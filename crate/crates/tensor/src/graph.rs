//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node in creation order. Inputs
//! always precede their consumers, so reverse creation order is a valid
//! topological order and `backward` visits each node exactly once.
//!
//! All node values are 2-D (`rows x cols`); vectors are `n x 1` columns.
//! Nothing broadcasts: shapes must agree exactly, and any replication has to
//! be spelled out (for example by multiplying with a row of ones).

use std::collections::{BTreeMap, HashMap};
use std::ops::Deref;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter name to gradient.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

enum Value<T> {
    Owned(Tensor<T>),
    Shared(Arc<Tensor<T>>),
}

impl<T> Deref for Value<T> {
    type Target = Tensor<T>;

    fn deref(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

struct LstmCache<T> {
    /// Activated gates, ordered input, forget, cell, output.
    gates: Vec<T>,
    tanh_c: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    FloorAt(Var, T),
    Clamp(Var, T, T),
    Concat(Vec<Var>, usize),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    Pick(Var, usize),
    EmbedRow(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LstmCell {
        x: Var,
        h: Var,
        c: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        cache: Box<LstmCache<T>>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::FloorAt(a, _)
            | Op::Clamp(a, _, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Pick(a, _)
            | Op::EmbedRow(a, _)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _) => vec![*a],
            Op::Concat(parts, _) => parts.clone(),
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                b,
                ..
            } => vec![*x, *h, *c, *w_ih, *w_hh, *b],
        }
    }
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape. One graph per forward pass; not shared across threads.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<String, Var>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).dims2()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    fn push_leaf(&mut self, value: Value<T>, requires_grad: bool) -> Result<Var> {
        if value.shape().len() > 2 {
            return Err(TensorError::invalid(
                "leaf",
                format!("graph values are matrices, got shape {:?}", value.shape()),
            ));
        }
        let value = match value {
            Value::Owned(t) if t.shape().len() == 1 => {
                let n = t.len();
                Value::Owned(Tensor::new(vec![n, 1], t.into_data())?)
            }
            Value::Shared(t) if t.shape().len() == 1 => {
                Value::Owned(Tensor::new(vec![t.len(), 1], t.data().to_vec())?)
            }
            other => other,
        };
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant leaf backed by a shared tensor, without copying it.
    pub fn shared(&mut self, value: Arc<Tensor<T>>) -> Result<Var> {
        self.push_leaf(Value::Shared(value), false)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Value::Owned(value), false)
            .expect("constant must be rank 1 or 2")
    }

    /// Leaf whose gradient is tracked and readable through [`Graph::grad`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Value::Owned(value), true)
            .expect("input must be rank 1 or 2")
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros(&[rows, cols]))
    }

    pub fn ones(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::full(&[rows, cols], T::one()))
    }

    /// Binds a named parameter from `store`. Binding the same name twice
    /// returns the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let tensor = store.shared(name)?;
        let v = self.push_leaf(Value::Shared(tensor), true)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, shift: T) -> Var {
        let out = self.value(a).map(|x| x + shift);
        self.push(out, Op::AddScalar(a))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.add_scalar(neg, T::one())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.ln());
        self.push(out, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.sqrt());
        self.push(out, Op::Sqrt(a))
    }

    /// `max(a, floor)` elementwise; the gradient is cut where the floor is active.
    pub fn floor_at(&mut self, a: Var, floor: T) -> Var {
        let out = self.value(a).map(|x| if x < floor { floor } else { x });
        self.push(out, Op::FloorAt(a, floor))
    }

    /// Clamps into `[lo, hi]`; the gradient is cut outside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// Concatenation along `axis` (0 stacks vertically, 1 horizontally).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat", "no inputs"));
        }
        if axis > 1 {
            return Err(TensorError::invalid("concat", format!("axis {axis}")));
        }
        let first = self.shape(parts[0]);
        let keep = 1 - axis;
        for &p in &parts[1..] {
            let s = self.shape(p);
            if s[keep] != first[keep] {
                return Err(TensorError::shape("concat", &first, &s));
            }
        }
        let out = if axis == 0 {
            let rows = parts.iter().map(|&p| self.shape(p)[0]).sum();
            let mut data = Vec::with_capacity(rows * first[1]);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::matrix(rows, first[1], data)?
        } else {
            let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
            let rows = first[0];
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &p in parts {
                    let t = self.value(p);
                    let c = t.cols();
                    data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
            Tensor::matrix(rows, cols, data)?
        };
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [rows, cols] = self.shape(a);
        if start + len > rows || len == 0 {
            return Err(TensorError::invalid(
                "slice_rows",
                format!("rows {start}..{} of {rows}", start + len),
            ));
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(Tensor::matrix(len, cols, data)?, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [rows, cols] = self.shape(a);
        if start + len > cols || len == 0 {
            return Err(TensorError::invalid(
                "slice_cols",
                format!("cols {start}..{} of {cols}", start + len),
            ));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src.data()[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(Tensor::matrix(rows, len, data)?, Op::SliceCols(a, start)))
    }

    pub fn column(&mut self, a: Var, c: usize) -> Result<Var> {
        self.slice_cols(a, c, 1)
    }

    /// Row-major reshape to `rows x cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).reshape(vec![rows, cols])?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Inner product of two equally shaped nodes.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(a, b)?;
        Ok(self.sum(prod))
    }

    /// Entry `(r, c)` as a `1 x 1` node.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let [rows, cols] = self.shape(a);
        if r >= rows || c >= cols {
            return Err(TensorError::invalid(
                "pick",
                format!("({r}, {c}) outside {rows}x{cols}"),
            ));
        }
        let out = Tensor::scalar(self.value(a).get(r, c));
        Ok(self.push(out, Op::Pick(a, r * cols + c)))
    }

    /// Row `row` of `table`, returned as a column vector.
    pub fn embed_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let [rows, cols] = self.shape(table);
        if row >= rows {
            return Err(TensorError::invalid(
                "embed_row",
                format!("row {row} outside table of {rows} rows"),
            ));
        }
        let data = self.value(table).data()[row * cols..(row + 1) * cols].to_vec();
        Ok(self.push(Tensor::column(data), Op::EmbedRow(table, row)))
    }

    /// Softmax along `axis` (0: down each column, 1: across each row).
    ///
    /// `mask`, when given, is row-major with one flag per entry (`true` =
    /// valid). Masked entries come out as exactly zero. Every slice must keep
    /// at least one valid entry.
    pub fn softmax(&mut self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        if let Some(m) = mask {
            if m.len() != x.len() {
                return Err(TensorError::shape("softmax mask", x.shape(), &[m.len()]));
            }
        }
        let out = softmax_values(x, axis, mask)?;
        Ok(self.push(out, Op::Softmax(a, axis)))
    }

    /// Log of the softmax along `axis`, computed with the log-sum-exp shift.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let [rows, cols] = x.dims2();
        let mut out = x.clone();
        for_each_slice(rows, cols, axis, |_, idx| {
            let max = idx
                .iter()
                .map(|&i| x.data()[i])
                .fold(T::neg_infinity(), T::max);
            let total = idx
                .iter()
                .fold(T::zero(), |acc, &i| acc + (x.data()[i] - max).exp());
            let lse = max + total.ln();
            for &i in idx {
                out.data_mut()[i] = x.data()[i] - lse;
            }
            Ok(())
        })?;
        Ok(self.push(out, Op::LogSoftmax(a, axis)))
    }

    /// One LSTM step. Returns `[h'; c']` stacked into a `2d x 1` column.
    ///
    /// Gate rows of `w_ih`, `w_hh` and `b` are ordered input, forget, cell,
    /// output.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h: Var,
        c: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
    ) -> Result<Var> {
        let [d_in, xc] = self.shape(x);
        let [d, hc] = self.shape(h);
        let cs = self.shape(c);
        let wi = self.shape(w_ih);
        let wh = self.shape(w_hh);
        let bs = self.shape(b);
        if xc != 1 || hc != 1 || cs != [d, 1] {
            return Err(TensorError::shape("lstm_cell state", &[d, hc], &cs));
        }
        if wi != [4 * d, d_in] {
            return Err(TensorError::shape("lstm_cell w_ih", &wi, &[4 * d, d_in]));
        }
        if wh != [4 * d, d] {
            return Err(TensorError::shape("lstm_cell w_hh", &wh, &[4 * d, d]));
        }
        if bs != [4 * d, 1] {
            return Err(TensorError::shape("lstm_cell b", &bs, &[4 * d, 1]));
        }
        let (xv, hv, cv) = (self.value(x).data(), self.value(h).data(), self.value(c).data());
        let (wiv, whv, bv) = (
            self.value(w_ih).data(),
            self.value(w_hh).data(),
            self.value(b).data(),
        );
        let mut gates = Vec::with_capacity(4 * d);
        for r in 0..4 * d {
            let z = dot_slices(&wiv[r * d_in..(r + 1) * d_in], xv)
                + dot_slices(&whv[r * d..(r + 1) * d], hv)
                + bv[r];
            gates.push(if (2 * d..3 * d).contains(&r) {
                z.tanh()
            } else {
                sigmoid(z)
            });
        }
        let mut out = vec![T::zero(); 2 * d];
        let mut tanh_c = Vec::with_capacity(d);
        for j in 0..d {
            let (ig, fg, gg, og) = (gates[j], gates[d + j], gates[2 * d + j], gates[3 * d + j]);
            let c_new = fg * cv[j] + ig * gg;
            let tc = c_new.tanh();
            out[j] = og * tc;
            out[d + j] = c_new;
            tanh_c.push(tc);
        }
        let cache = Box::new(LstmCache { gates, tanh_c });
        Ok(self.push(
            Tensor::column(out),
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                b,
                cache,
            },
        ))
    }

    /// [`Graph::lstm_cell`] split into `(h', c')`.
    pub fn lstm(
        &mut self,
        x: Var,
        h: Var,
        c: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
    ) -> Result<(Var, Var)> {
        let d = self.shape(h)[0];
        let stacked = self.lstm_cell(x, h, c, w_ih, w_hh, b)?;
        let h_new = self.slice_rows(stacked, 0, d)?;
        let c_new = self.slice_rows(stacked, d, d)?;
        Ok((h_new, c_new))
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Back-propagates from a `1 x 1` loss and returns the gradient of every
    /// bound parameter (zero for parameters the loss does not reach).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(TensorError::GradAccumulation);
        }
        let shape = self.value(loss).shape().to_vec();
        if shape != [1, 1] {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            for input in node.op.inputs() {
                if input.0 >= i {
                    return Err(TensorError::Cycle {
                        node: i,
                        input: input.0,
                    });
                }
            }
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        self.backward_done = true;

        let mut out = Gradients::new();
        for (name, &v) in &self.params {
            let g = match &self.grads[v.0] {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.value(v).shape()),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn accumulate(&mut self, v: Var, delta: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    /// Adds `delta` into a sub-block of `v`'s gradient through `write`.
    fn accumulate_with(&mut self, v: Var, write: impl FnOnce(&mut Tensor<T>)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.value(v).shape().to_vec();
        let g = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape));
        write(g);
    }

    fn propagate(&mut self, i: usize, g: &Tensor<T>) -> Result<()> {
        let y = &*self.nodes[i].value;
        // Each arm computes the local contributions, then releases the
        // borrow on `self.nodes` before accumulating.
        let contributions: Vec<(Var, Tensor<T>)> = match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut out = Vec::new();
                if self.requires_grad(*a) {
                    out.push((*a, g.matmul(&self.value(*b).transpose())?));
                }
                if self.requires_grad(*b) {
                    out.push((*b, self.value(*a).transpose().matmul(g)?));
                }
                out
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                vec![
                    (*a, g.zip_map(bv, "mul grad", |d, x| d * x)?),
                    (*b, g.zip_map(av, "mul grad", |d, x| d * x)?),
                ]
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.zip_map(bv, "div grad", |d, x| d / x)?;
                let mut db = g.zip_map(av, "div grad", |d, x| -d * x)?;
                for (v, &x) in db.data_mut().iter_mut().zip(bv.data()) {
                    *v = *v / (x * x);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, f) => {
                let f = *f;
                vec![(*a, g.map(|d| d * f))]
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Tanh(a) => vec![(*a, g.zip_map(y, "tanh grad", |d, t| d * (T::one() - t * t))?)],
            Op::Sigmoid(a) => vec![(
                *a,
                g.zip_map(y, "sigmoid grad", |d, s| d * s * (T::one() - s))?,
            )],
            Op::Exp(a) => vec![(*a, g.zip_map(y, "exp grad", |d, e| d * e)?)],
            Op::Log(a) => vec![(*a, g.zip_map(self.value(*a), "log grad", |d, x| d / x)?)],
            Op::Sqrt(a) => vec![(
                *a,
                g.zip_map(y, "sqrt grad", |d, s| d / (s + s))?,
            )],
            Op::FloorAt(a, floor) => {
                let floor = *floor;
                vec![(
                    *a,
                    g.zip_map(self.value(*a), "floor grad", |d, x| {
                        if x < floor {
                            T::zero()
                        } else {
                            d
                        }
                    })?,
                )]
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                vec![(
                    *a,
                    g.zip_map(self.value(*a), "clamp grad", |d, x| {
                        if x < lo || x > hi {
                            T::zero()
                        } else {
                            d
                        }
                    })?,
                )]
            }
            Op::Concat(parts, axis) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                let cols = g.cols();
                for &p in parts {
                    let [pr, pc] = self.shape(p);
                    let piece = if *axis == 0 {
                        let data = g.data()[offset * cols..(offset + pr) * cols].to_vec();
                        offset += pr;
                        Tensor::matrix(pr, pc, data)?
                    } else {
                        let t = Tensor::from_fn(pr, pc, |r, c| g.get(r, offset + c));
                        offset += pc;
                        t
                    };
                    out.push((p, piece));
                }
                out
            }
            Op::SliceRows(a, start) => {
                let (a, start) = (*a, *start);
                let cols = g.cols();
                let g = g.clone();
                self.accumulate_with(a, |acc| {
                    let dst = &mut acc.data_mut()[start * cols..start * cols + g.len()];
                    for (d, &v) in dst.iter_mut().zip(g.data()) {
                        *d = *d + v;
                    }
                });
                Vec::new()
            }
            Op::SliceCols(a, start) => {
                let (a, start) = (*a, *start);
                let g = g.clone();
                self.accumulate_with(a, |acc| {
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let v = acc.get(r, start + c) + g.get(r, c);
                            acc.set(r, start + c, v);
                        }
                    }
                });
                Vec::new()
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                vec![(*a, g.reshape(shape)?)]
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                vec![(*a, Tensor::full(&shape, g.item()))]
            }
            Op::Pick(a, flat) => {
                let (a, flat, d) = (*a, *flat, g.item());
                self.accumulate_with(a, |acc| acc.data_mut()[flat] = acc.data_mut()[flat] + d);
                Vec::new()
            }
            Op::EmbedRow(table, row) => {
                let (table, row) = (*table, *row);
                let g = g.clone();
                self.accumulate_with(table, |acc| {
                    let cols = acc.cols();
                    for (d, &v) in acc.data_mut()[row * cols..(row + 1) * cols]
                        .iter_mut()
                        .zip(g.data())
                    {
                        *d = *d + v;
                    }
                });
                Vec::new()
            }
            Op::Softmax(a, axis) => {
                let [rows, cols] = y.dims2();
                let mut dx = Tensor::zeros(y.shape());
                for_each_slice(rows, cols, *axis, |_, idx| {
                    let inner = idx
                        .iter()
                        .fold(T::zero(), |acc, &k| acc + y.data()[k] * g.data()[k]);
                    for &k in idx {
                        dx.data_mut()[k] = y.data()[k] * (g.data()[k] - inner);
                    }
                    Ok(())
                })?;
                vec![(*a, dx)]
            }
            Op::LogSoftmax(a, axis) => {
                let [rows, cols] = y.dims2();
                let mut dx = Tensor::zeros(y.shape());
                for_each_slice(rows, cols, *axis, |_, idx| {
                    let total = idx.iter().fold(T::zero(), |acc, &k| acc + g.data()[k]);
                    for &k in idx {
                        dx.data_mut()[k] = g.data()[k] - y.data()[k].exp() * total;
                    }
                    Ok(())
                })?;
                vec![(*a, dx)]
            }
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                b,
                cache,
            } => self.lstm_backward(g, [*x, *h, *c, *w_ih, *w_hh, *b], cache)?,
        };
        for (v, delta) in contributions {
            self.accumulate(v, delta)?;
        }
        Ok(())
    }

    fn lstm_backward(
        &self,
        g: &Tensor<T>,
        [x, h, c, w_ih, w_hh, b]: [Var; 6],
        cache: &LstmCache<T>,
    ) -> Result<Vec<(Var, Tensor<T>)>> {
        let d = self.shape(h)[0];
        let d_in = self.shape(x)[0];
        let one = T::one();
        let gates = &cache.gates;
        let c_prev = self.value(c).data();
        let mut dz = vec![T::zero(); 4 * d];
        let mut dc_prev = vec![T::zero(); d];
        for j in 0..d {
            let (ig, fg, gg, og) = (gates[j], gates[d + j], gates[2 * d + j], gates[3 * d + j]);
            let tc = cache.tanh_c[j];
            let dh = g.data()[j];
            let dc = g.data()[d + j] + dh * og * (one - tc * tc);
            let d_o = dh * tc;
            dz[j] = dc * gg * ig * (one - ig);
            dz[d + j] = dc * c_prev[j] * fg * (one - fg);
            dz[2 * d + j] = dc * ig * (one - gg * gg);
            dz[3 * d + j] = d_o * og * (one - og);
            dc_prev[j] = dc * fg;
        }
        let xv = self.value(x).data();
        let hv = self.value(h).data();
        let wiv = self.value(w_ih).data();
        let whv = self.value(w_hh).data();

        let mut out = Vec::with_capacity(6);
        if self.requires_grad(w_ih) {
            out.push((w_ih, Tensor::from_fn(4 * d, d_in, |r, k| dz[r] * xv[k])));
        }
        if self.requires_grad(w_hh) {
            out.push((w_hh, Tensor::from_fn(4 * d, d, |r, k| dz[r] * hv[k])));
        }
        out.push((b, Tensor::column(dz.clone())));
        if self.requires_grad(x) {
            let mut dx = vec![T::zero(); d_in];
            for (r, &dzr) in dz.iter().enumerate() {
                for (k, v) in dx.iter_mut().enumerate() {
                    *v = *v + wiv[r * d_in + k] * dzr;
                }
            }
            out.push((x, Tensor::column(dx)));
        }
        if self.requires_grad(h) {
            let mut dh = vec![T::zero(); d];
            for (r, &dzr) in dz.iter().enumerate() {
                for (k, v) in dh.iter_mut().enumerate() {
                    *v = *v + whv[r * d + k] * dzr;
                }
            }
            out.push((h, Tensor::column(dh)));
        }
        out.push((c, Tensor::column(dc_prev)));
        Ok(out)
    }
}

/// Inner product with four independent partial sums.
#[inline]
fn dot_slices<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] = acc[0] + x[0] * y[0];
        acc[1] = acc[1] + x[1] * y[1];
        acc[2] = acc[2] + x[2] * y[2];
        acc[3] = acc[3] + x[3] * y[3];
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Calls `f(slice_index, flat_indices)` for every slice along `axis`.
fn for_each_slice(
    rows: usize,
    cols: usize,
    axis: usize,
    mut f: impl FnMut(usize, &[usize]) -> Result<()>,
) -> Result<()> {
    let mut idx = Vec::new();
    match axis {
        0 => {
            for c in 0..cols {
                idx.clear();
                idx.extend((0..rows).map(|r| r * cols + c));
                f(c, &idx)?;
            }
        }
        1 => {
            for r in 0..rows {
                idx.clear();
                idx.extend((0..cols).map(|c| r * cols + c));
                f(r, &idx)?;
            }
        }
        _ => return Err(TensorError::invalid("softmax", format!("axis {axis}"))),
    }
    Ok(())
}

/// Masked, max-shifted softmax on plain values.
pub fn softmax_values<T: Scalar>(x: &Tensor<T>, axis: usize, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let [rows, cols] = x.dims2();
    let mut out = Tensor::zeros(&[rows, cols]);
    let valid = |k: usize| mask.is_none_or(|m| m[k]);
    for_each_slice(rows, cols, axis, |s, idx| {
        let max = idx
            .iter()
            .filter(|&&k| valid(k))
            .map(|&k| x.data()[k])
            .fold(None, |m: Option<T>, v| Some(m.map_or(v, |m| m.max(v))));
        let Some(max) = max else {
            return Err(TensorError::DegenerateMask { axis, index: s });
        };
        let mut total = T::zero();
        for &k in idx {
            if valid(k) {
                let e = (x.data()[k] - max).exp();
                out.data_mut()[k] = e;
                total = total + e;
            }
        }
        for &k in idx {
            out.data_mut()[k] = out.data()[k] / total;
        }
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::<f64>::new();
        let z = g.zeros(1, 1);
        let s = g.sigmoid(z);
        let t = g.tanh(z);
        assert_eq!(g.scalar(s), 0.5);
        assert_eq!(g.scalar(t), 0.0);
        let a = g.constant(Tensor::column(vec![1.0, 2.0]));
        let b = g.constant(Tensor::column(vec![3.0, 4.0]));
        let p = g.mul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 8.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let a = g.zeros(2, 1);
        let b = g.zeros(3, 1);
        assert!(matches!(g.add(a, b), Err(TensorError::Shape { .. })));
        assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
        let c = g.zeros(3, 2);
        assert!(g.concat(&[a, c], 1).is_err());
    }

    #[test]
    fn softmax_known_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::column(vec![1.0, 2.0, 3.0]));
        let s = g.softmax(x, 0, None).unwrap();
        let expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (v, e) in g.value(s).data().iter().zip(expected) {
            assert!(close(*v, e, 1e-12), "{v} vs {e}");
        }
        let u = g.zeros(3, 1);
        let su = g.softmax(u, 0, None).unwrap();
        for v in g.value(su).data() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn softmax_mask_zeroes_and_rejects_empty_slices() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[&[1.0, 5.0], &[2.0, 7.0]]));
        let s = g.softmax(x, 1, Some(&[true, false, true, true])).unwrap();
        assert_eq!(g.value(s).get(0, 0), 1.0);
        assert_eq!(g.value(s).get(0, 1), 0.0);
        let err = g.softmax(x, 1, Some(&[false, false, true, true])).unwrap_err();
        assert!(matches!(err, TensorError::DegenerateMask { axis: 1, index: 0 }));
    }

    #[test]
    fn backward_linear_and_constant() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::column(vec![0.3, -0.2, 0.9])).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let x = g.constant(Tensor::column(vec![1.5, 2.0, -4.0]));
        let loss = g.dot(w, x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["w"].data(), &[1.5, 2.0, -4.0]);

        let mut g = Graph::new();
        let _w = g.param(&store, "w").unwrap();
        let loss = g.constant(Tensor::scalar(3.0));
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["w"].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_twice_requires_reset() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 4.0);
        assert!(matches!(g.backward(y), Err(TensorError::GradAccumulation)));
        g.zero_grad();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 4.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::column(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shared_param_binds_once() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads["w"].item(), 6.0);
    }

    #[test]
    fn lstm_zero_weights_give_zero_state() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::column(vec![0.7, -1.2]));
        let h = g.zeros(3, 1);
        let c = g.zeros(3, 1);
        let wi = g.zeros(12, 2);
        let wh = g.zeros(12, 3);
        let b = g.zeros(12, 1);
        let (h1, c1) = g.lstm(x, h, c, wi, wh, b).unwrap();
        assert!(g.value(h1).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c1).data().iter().all(|&v| v == 0.0));
    }
}
