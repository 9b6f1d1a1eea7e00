//! Reverse-mode accumulation over matrix-valued operations.
//!
//! A [`Graph`] records every operation eagerly (values are computed on
//! construction) and [`Graph::backward`] replays the record in reverse.
//! Nodes that do not depend on a parameter leaf are never visited by the
//! backward pass.

use super::activation::{Activation, FACT, MAX_ORDER};
use super::mat::{cholesky_jittered, cholesky_solve, gemm, Mat};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { op: BinOp, a: Var, b: Var },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    /// `slope` is the next derivative at the input, kept for backward.
    Unary { a: Var, slope: Option<Mat> },
    Scale { a: Var, c: f64 },
    AddConst { a: Var },
    ClampMin { a: Var, floor: f64 },
    SumAll { a: Var },
    SumRows { a: Var },
    SumCols { a: Var },
    SoftmaxRows { a: Var },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    Reshape { a: Var },
    Transpose { a: Var },
    SpdSolve { k: Var, b: Var, chol: Mat },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Broadcast-compatible output shape: each dimension equal or 1.
fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("shapes {a:?} and {b:?} do not broadcast")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn broadcast_apply(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (r, c) = broadcast_shape(a.shape(), b.shape());
    let ai = |i: usize, j: usize| a[(if a.rows() == 1 { 0 } else { i }, if a.cols() == 1 { 0 } else { j })];
    let bi = |i: usize, j: usize| b[(if b.rows() == 1 { 0 } else { i }, if b.cols() == 1 { 0 } else { j })];
    Mat::from_fn(r, c, |i, j| f(ai(i, j), bi(i, j)))
}

/// Sums a full-shape gradient down to `shape` along broadcast dimensions.
fn reduce_to(g: Mat, shape: (usize, usize)) -> Mat {
    if g.shape() == shape {
        return g;
    }
    let mut out = Mat::zeros(shape.0, shape.1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let oi = if shape.0 == 1 { 0 } else { i };
            let oj = if shape.1 == 1 { 0 } else { j };
            out[(oi, oj)] += g[(i, j)];
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(1024),
            grad_enabled: true,
        }
    }

    /// A graph in which parameters are recorded as constants; used for
    /// inference where no backward pass follows.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::with_capacity(1024),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Mat::scalar(v))
    }

    pub fn param(&mut self, value: Mat) -> Var {
        let g = self.grad_enabled;
        self.push(value, Op::Leaf, g)
    }

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let value = match op {
            BinOp::Add => broadcast_apply(va, vb, |x, y| x + y),
            BinOp::Sub => broadcast_apply(va, vb, |x, y| x - y),
            BinOp::Mul => broadcast_apply(va, vb, |x, y| x * y),
            BinOp::Div => broadcast_apply(va, vb, |x, y| x / y),
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Binary { op, a, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Div, a, b)
    }

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let m = if ta { va.cols() } else { va.rows() };
        let n = if tb { vb.rows() } else { vb.cols() };
        let mut out = Mat::zeros(m, n);
        gemm(1.0, va, ta, vb, tb, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// Elementwise `act^{(order)}(a)`.
    pub fn unary(&mut self, a: Var, act: Activation, order: usize) -> Var {
        self.unary_orders(a, act, order)[order]
    }

    /// `act^{(k)}(a)` for `k = 0..=max_order` from one series evaluation
    /// per element.
    pub fn unary_orders(&mut self, a: Var, act: Activation, max_order: usize) -> Vec<Var> {
        assert!(max_order < MAX_ORDER, "order {max_order} leaves no derivative for backward");
        let ng = self.ng(a);
        let (r, c) = self.shape(a);
        let k = max_order + 2;
        let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(r * c); k];
        for &x in self.value(a).as_slice() {
            let t = act.taylor(x);
            for (o, col) in out.iter_mut().enumerate() {
                col.push(t[o] * FACT[o]);
            }
        }
        let mut mats: Vec<Mat> = out.into_iter().map(|v| Mat::from_vec(r, c, v)).collect();
        let mut vars = Vec::with_capacity(max_order + 1);
        for o in 0..=max_order {
            let value = std::mem::replace(&mut mats[o], Mat::zeros(0, 0));
            let slope = ng.then(|| mats[o + 1].clone());
            vars.push(self.push(value, Op::Unary { a, slope }, ng));
        }
        vars
    }

    pub fn act(&mut self, a: Var, act: Activation) -> Var {
        self.unary(a, act, 0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.act(a, Activation::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.act(a, Activation::Ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.act(a, Activation::Square)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(value, Op::Scale { a, c }, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(value, Op::AddConst { a }, ng)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, 1.0)
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        let ng = self.ng(a);
        self.push(value, Op::ClampMin { a, floor }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums, `n x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Mat::zeros(1, v.cols());
        for i in 0..v.rows() {
            for (o, x) in out.as_mut_slice().iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SumRows { a }, ng)
    }

    /// Row sums, `n x c -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Mat::col_vector((0..v.rows()).map(|i| v.row(i).iter().sum()).collect());
        let ng = self.ng(a);
        self.push(out, Op::SumCols { a }, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = v.clone();
        let c = v.cols();
        for row in out.as_mut_slice().chunks_mut(c.max(1)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows { a }, ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(value, Op::SliceRows { a, start }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        self.push(value, Op::SliceCols { a, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Mat::vstack(&mats);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Mat::hstack(&mats);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            ng,
        )
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshape(rows, cols);
        let ng = self.ng(a);
        self.push(value, Op::Reshape { a }, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose { a }, ng)
    }

    /// `K^{-1} B` for symmetric positive (semi-)definite `K`. If the plain
    /// factorisation fails, a diagonal jitter starting at `jitter` is added
    /// and escalated by 10x up to `max_jitter`.
    pub fn spd_solve(&mut self, k: Var, b: Var, jitter: f64, max_jitter: f64) -> Result<Var> {
        let (chol, _) = cholesky_jittered(self.value(k), jitter.max(1e-10), max_jitter)
            .ok_or_else(|| Error::Numeric("Cholesky failed after maximum jitter".into()))?;
        let value = cholesky_solve(&chol, self.value(b));
        let ng = self.ng(k) || self.ng(b);
        Ok(self.push(value, Op::SpdSolve { k, b, chol }, ng))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Mat::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gy);
            } else {
                self.propagate(node, &gy, &mut grads);
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, gy: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Binary { op, a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let ga = match op {
                        BinOp::Add | BinOp::Sub => gy.clone(),
                        BinOp::Mul => broadcast_apply(gy, vb, |g, y| g * y),
                        BinOp::Div => broadcast_apply(gy, vb, |g, y| g / y),
                    };
                    self.accumulate(grads, *a, reduce_to(ga, va.shape()));
                }
                if self.ng(*b) {
                    let gb = match op {
                        BinOp::Add => gy.clone(),
                        BinOp::Sub => gy.map(|g| -g),
                        BinOp::Mul => broadcast_apply(gy, va, |g, x| g * x),
                        BinOp::Div => {
                            // d(a/b)/db = -out / b
                            let t = broadcast_apply(gy, &node.value, |g, o| -g * o);
                            broadcast_apply(&t, vb, |t, y| t / y)
                        }
                    };
                    self.accumulate(grads, *b, reduce_to(gb, vb.shape()));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    // C = op(A) op(B); dA = dC op(B)^T (transposed back if ta)
                    let mut ga = Mat::zeros(va.rows(), va.cols());
                    if *ta {
                        gemm(1.0, vb, *tb, gy, true, 0.0, &mut ga);
                    } else {
                        gemm(1.0, gy, false, vb, !*tb, 0.0, &mut ga);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Mat::zeros(vb.rows(), vb.cols());
                    if *tb {
                        gemm(1.0, gy, true, va, *ta, 0.0, &mut gb);
                    } else {
                        gemm(1.0, va, !*ta, gy, false, 0.0, &mut gb);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Unary { a, slope } => {
                let slope = slope.as_ref().expect("slope kept for differentiable nodes");
                self.accumulate(grads, *a, gy.zip_map(slope, |g, d| g * d));
            }
            Op::Scale { a, c } => self.accumulate(grads, *a, gy.map(|g| g * c)),
            Op::AddConst { a } => self.accumulate(grads, *a, gy.clone()),
            Op::ClampMin { a, floor } => {
                let va = self.value(*a);
                let g = gy.zip_map(va, |g, x| if x > *floor { g } else { 0.0 });
                self.accumulate(grads, *a, g);
            }
            Op::SumAll { a } => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Mat::filled(r, c, gy.item()));
            }
            Op::SumRows { a } => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Mat::from_fn(r, c, |_, j| gy[(0, j)]));
            }
            Op::SumCols { a } => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Mat::from_fn(r, c, |i, _| gy[(i, 0)]));
            }
            Op::SoftmaxRows { a } => {
                let y = &node.value;
                let c = y.cols();
                let mut g = Mat::zeros(y.rows(), c);
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), gy.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        g[(i, j)] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::SliceRows { a, start } => {
                let (r, c) = self.shape(*a);
                let mut g = Mat::zeros(r, c);
                let n = gy.len();
                g.as_mut_slice()[start * c..start * c + n].copy_from_slice(gy.as_slice());
                self.accumulate(grads, *a, g);
            }
            Op::SliceCols { a, start } => {
                let (r, c) = self.shape(*a);
                let mut g = Mat::zeros(r, c);
                for i in 0..r {
                    for j in 0..gy.cols() {
                        g[(i, start + j)] = gy[(i, j)];
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.ng(p) {
                        self.accumulate(grads, p, gy.slice_rows(off, rows));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.shape(p).1;
                    if self.ng(p) {
                        self.accumulate(grads, p, gy.slice_cols(off, cols));
                    }
                    off += cols;
                }
            }
            Op::Reshape { a } => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, gy.clone().reshape(r, c));
            }
            Op::Transpose { a } => self.accumulate(grads, *a, gy.transpose()),
            Op::SpdSolve { k, b, chol } => {
                let gb = cholesky_solve(chol, gy);
                if self.ng(*k) {
                    let mut gk = Mat::zeros(gb.rows(), node.value.rows());
                    gemm(-1.0, &gb, false, &node.value, true, 0.0, &mut gk);
                    self.accumulate(grads, *k, gk);
                }
                self.accumulate(grads, *b, gb);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
