//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Tape`] and returns a [`Var`]
//! handle. [`Tape::backward`] walks the nodes in reverse, populating a
//! gradient for every node that requires one; [`Tape::write_param_grads`]
//! then adds the parameter gradients into a [`ParamStore`]. Gradients
//! accumulate in the store until the caller zeroes them.
//!
//! Operations panic on shape mismatches, like indexing does. Fallible entry
//! points ([`crate::nn::Mlp::forward`], the distribution constructors) check
//! shapes first and report them as [`Error::Dimension`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::parallel::{gemm, Layout};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Var, Var),
    Reshape(Var),
    LogSoftmax(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recording of one forward computation. Use one tape per thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn rows_cols(shape: &[usize], what: &str) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "{what}: expected rank-2 operand, got {shape:?}");
    (shape[0], shape[1])
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value: Arc::new(value), op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Record a tensor as a leaf; it participates in backward if it
    /// requires grad.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node { shape, value: tensor.shared_data(), op: Op::Leaf, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant (no gradient) from raw parts.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "constant: shape {shape:?} does not match {} values",
            data.len()
        );
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    /// Record a parameter. The value buffer is shared, not copied.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared_data(),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "scalar() on shape {:?}", n.shape);
        n.value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_shared(n.shape.clone(), Arc::clone(&n.value))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// `a[n×k] · b[k×m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = rows_cols(self.shape(a), "matmul lhs");
        let (k2, m) = rows_cols(self.shape(b), "matmul rhs");
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![0.0; n * m];
        gemm(self.value(a), Layout::Normal, self.value(b), Layout::Normal, n, k, m, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(vec![n, m], out, Op::MatMul(a, b), rg)
    }

    /// `x[n×m] + bias[m]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (_, m) = rows_cols(self.shape(x), "add_bias");
        assert_eq!(self.shape(bias), [m], "add_bias: bias shape");
        let b = self.value(bias);
        let out: Vec<f64> = self.value(x).chunks(m).flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b)).collect();
        let rg = self.rg(&[x, bias]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::AddBias(x, bias), rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shapes differ");
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `x[n×m] * w[n]`, scaling each row.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Var {
        let (n, m) = rows_cols(self.shape(x), "mul_rows");
        assert_eq!(self.shape(w), [n], "mul_rows: weight shape");
        let wv = self.value(w);
        let out = self.value(x).chunks(m).zip(wv).flat_map(|(row, &w)| row.iter().map(move |x| x * w)).collect();
        let rg = self.rg(&[x, w]);
        self.push(vec![n, m], out, Op::MulRows(x, w), rg)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v < 0.0 { 0.0 } else { v }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map(x, f64::ln, Op::Ln(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    /// Elementwise clamp; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over the last axis of a rank-2 tensor: `[n×m] -> [n]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (n, m) = rows_cols(self.shape(x), "sum_rows");
        let out = self.value(x).chunks(m).map(|r| r.iter().sum()).collect();
        let rg = self.rg(&[x]);
        self.push(vec![n], out, Op::SumRows(x), rg)
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (n, m) = rows_cols(self.shape(x), "slice_cols");
        assert!(start < end && end <= m, "slice_cols: {start}..{end} of width {m}");
        let out = self.value(x).chunks(m).flat_map(|r| r[start..end].iter().copied()).collect();
        let rg = self.rg(&[x]);
        self.push(vec![n, end - start], out, Op::SliceCols(x, start), rg)
    }

    /// `[a | b]` along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (n, p) = rows_cols(self.shape(a), "concat_cols lhs");
        let (n2, q) = rows_cols(self.shape(b), "concat_cols rhs");
        assert_eq!(n, n2, "concat_cols: row counts differ");
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&av[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv[i * q..(i + 1) * q]);
        }
        let rg = self.rg(&[a, b]);
        self.push(vec![n, p + q], out, Op::ConcatCols(a, b), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), self.value(x).len(), "reshape {:?} -> {shape:?}", self.shape(x));
        let value = Arc::clone(&self.node(x).value);
        let rg = self.rg(&[x]);
        self.nodes.push(Node { shape: shape.to_vec(), value, op: Op::Reshape(x), requires_grad: rg, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Row-wise log-softmax of a rank-2 tensor.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (n, m) = rows_cols(self.shape(x), "log_softmax");
        let mut out = Vec::with_capacity(n * m);
        for row in self.value(x).chunks(m) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|v| v - lse));
        }
        let rg = self.rg(&[x]);
        self.push(vec![n, m], out, Op::LogSoftmax(x), rg)
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse pass from a scalar `loss`. Populates a gradient for every
    /// node reachable from `loss` that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Add every parameter gradient from the last backward pass into `store`.
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op;
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.as_slice();
        let out = nodes[i].value.as_slice();
        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            let len = nodes[v.0].value.len();
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let m = nodes[b.0].shape[1];
                if wants(a) {
                    let ga = acc(grads, nodes, a);
                    gemm(g, Layout::Normal, val(b), Layout::Transposed, n, m, k, ga, true);
                }
                if wants(b) {
                    let gb = acc(grads, nodes, b);
                    gemm(val(a), Layout::Transposed, g, Layout::Normal, k, n, m, gb, true);
                }
            }
            Op::AddBias(x, bias) => {
                let m = nodes[bias.0].value.len();
                if wants(x) {
                    add_into(acc(grads, nodes, x), g);
                }
                if wants(bias) {
                    let gb = acc(grads, nodes, bias);
                    for row in g.chunks(m) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    add_into(acc(grads, nodes, a), g);
                }
                if wants(b) {
                    add_into(acc(grads, nodes, b), g);
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    add_into(acc(grads, nodes, a), g);
                }
                if wants(b) {
                    let gb = acc(grads, nodes, b);
                    gb.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b);
                    let ga = acc(grads, nodes, a);
                    for ((d, g), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                }
                if wants(b) {
                    let av = val(a);
                    let gb = acc(grads, nodes, b);
                    for ((d, g), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = val(b);
                if wants(a) {
                    let ga = acc(grads, nodes, a);
                    for ((d, g), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += g / y;
                    }
                }
                if wants(b) {
                    let av = val(a);
                    let gb = acc(grads, nodes, b);
                    for (((d, g), x), y) in gb.iter_mut().zip(g).zip(av).zip(bv) {
                        *d -= g * x / (y * y);
                    }
                }
            }
            Op::MulRows(x, w) => {
                let m = nodes[x.0].shape[1];
                let wv = val(w);
                if wants(x) {
                    let gx = acc(grads, nodes, x);
                    for ((drow, grow), &w) in gx.chunks_mut(m).zip(g.chunks(m)).zip(wv) {
                        drow.iter_mut().zip(grow).for_each(|(d, g)| *d += g * w);
                    }
                }
                if wants(w) {
                    let xv = val(x);
                    let gw = acc(grads, nodes, w);
                    for ((d, grow), xrow) in gw.iter_mut().zip(g.chunks(m)).zip(xv.chunks(m)) {
                        *d += grow.iter().zip(xrow).map(|(g, x)| g * x).sum::<f64>();
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(x) {
                    let gx = acc(grads, nodes, x);
                    gx.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if wants(x) {
                    add_into(acc(grads, nodes, x), g);
                }
            }
            Op::Relu(x) => {
                if wants(x) {
                    let xv = val(x);
                    let gx = acc(grads, nodes, x);
                    for ((d, g), x) in gx.iter_mut().zip(g).zip(xv) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if wants(x) {
                    let gx = acc(grads, nodes, x);
                    for ((d, g), y) in gx.iter_mut().zip(g).zip(out) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::Exp(x) => {
                if wants(x) {
                    let gx = acc(grads, nodes, x);
                    for ((d, g), y) in gx.iter_mut().zip(g).zip(out) {
                        *d += g * y;
                    }
                }
            }
            Op::Ln(x) => {
                if wants(x) {
                    let xv = val(x);
                    let gx = acc(grads, nodes, x);
                    for ((d, g), x) in gx.iter_mut().zip(g).zip(xv) {
                        *d += g / x;
                    }
                }
            }
            Op::Square(x) => {
                if wants(x) {
                    let xv = val(x);
                    let gx = acc(grads, nodes, x);
                    for ((d, g), x) in gx.iter_mut().zip(g).zip(xv) {
                        *d += 2.0 * x * g;
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                if wants(x) {
                    let xv = val(x);
                    let gx = acc(grads, nodes, x);
                    for ((d, g), x) in gx.iter_mut().zip(g).zip(xv) {
                        if (lo..=hi).contains(x) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(x) {
                    let gx = acc(grads, nodes, x);
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumRows(x) => {
                if wants(x) {
                    let m = nodes[x.0].shape[1];
                    let gx = acc(grads, nodes, x);
                    for (drow, g) in gx.chunks_mut(m).zip(g) {
                        drow.iter_mut().for_each(|d| *d += g);
                    }
                }
            }
            Op::SliceCols(x, start) => {
                if wants(x) {
                    let m = nodes[x.0].shape[1];
                    let w = nodes[i].shape[1];
                    let gx = acc(grads, nodes, x);
                    for (drow, grow) in gx.chunks_mut(m).zip(g.chunks(w)) {
                        add_into(&mut drow[start..start + w], grow);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let p = nodes[a.0].shape[1];
                let q = nodes[b.0].shape[1];
                if wants(a) {
                    let ga = acc(grads, nodes, a);
                    for (drow, grow) in ga.chunks_mut(p).zip(g.chunks(p + q)) {
                        add_into(drow, &grow[..p]);
                    }
                }
                if wants(b) {
                    let gb = acc(grads, nodes, b);
                    for (drow, grow) in gb.chunks_mut(q).zip(g.chunks(p + q)) {
                        add_into(drow, &grow[p..]);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if wants(x) {
                    let m = nodes[x.0].shape[1];
                    let gx = acc(grads, nodes, x);
                    for ((drow, grow), yrow) in gx.chunks_mut(m).zip(g.chunks(m)).zip(out.chunks(m)) {
                        let total: f64 = grow.iter().sum();
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += g - y.exp() * total;
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln Σ exp(x_i)`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
