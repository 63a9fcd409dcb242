//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Values are computed eagerly when a node is created, so a [`Graph`] doubles
//! as a plain evaluator: build it from constants and read values back. Nodes
//! created from [`Graph::param`] are tracked; gradients flow only into tracked
//! nodes, which is how the frozen backbone stays frozen.
//!
//! Scalars are `1×1` matrices.

use std::rc::Rc;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Transpose(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    NormalizeRows(Var),
    ReplaceRows {
        base: Var,
        src: Var,
        map: Rc<Vec<(usize, usize)>>,
    },
    PoolRows {
        x: Var,
        groups: Rc<Vec<Vec<usize>>>,
    },
    ConcatCols(Vec<Var>),
    ScaleRowsByCol {
        x: Var,
        w: Var,
        col: usize,
    },
    Sum(Var),
    Mean(Var),
    NllMean {
        logp: Var,
        labels: Rc<Vec<usize>>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

/// Eagerly evaluated computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is untracked or unreachable.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
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

    fn push(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf. Never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), t)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul(a, b), t)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let t = self.tracked(a);
        self.push(value, Op::Scale(a, k), t)
    }

    /// `x + b` with the `1×C` row `b` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let value = self.value(x) + self.value(b);
        let t = self.tracked(x) || self.tracked(b);
        self.push(value, Op::AddRow(x, b), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let t = self.tracked(a);
        self.push(value, Op::Tanh(a), t)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let t = self.tracked(a);
        self.push(value, Op::Exp(a), t)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        let t = self.tracked(a);
        self.push(value, Op::Abs(a), t)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let t = self.tracked(a);
        self.push(value, Op::Square(a), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let t = self.tracked(a);
        self.push(value, Op::Transpose(a), t)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let t = self.tracked(a);
        self.push(value, Op::Softmax(a), t)
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked
    /// entries come out as exactly zero. Every row must allow one entry.
    pub fn masked_softmax(&mut self, a: Var, mask: &Array2<bool>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), mask.dim(), "mask shape");
        let mut out = Array2::zeros(x.dim());
        for (r, (xrow, mrow)) in x.outer_iter().zip(mask.outer_iter()).enumerate() {
            let max = xrow
                .iter()
                .zip(mrow.iter())
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite(), "row {r} has no unmasked entry");
            let mut total = 0.0;
            for c in 0..xrow.len() {
                if mrow[c] {
                    let e = (xrow[c] - max).exp();
                    out[[r, c]] = e;
                    total += e;
                }
            }
            out.row_mut(r).mapv_inplace(|v| v / total);
        }
        let t = self.tracked(a);
        self.push(out, Op::MaskedSoftmax(a), t)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let t = self.tracked(a);
        self.push(value, Op::LogSoftmax(a), t)
    }

    /// Scale every row to unit L2 norm. Fails on a zero row.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = x.clone();
        for (r, mut row) in out.outer_iter_mut().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Numerical(format!("row {r} has norm {n}")));
            }
            row.mapv_inplace(|v| v / n);
        }
        let t = self.tracked(a);
        Ok(self.push(out, Op::NormalizeRows(a), t))
    }

    /// Copy of `base` where row `i` is replaced by row `j` of `src` for every
    /// `(i, j)` in `map`. Destination rows must be distinct.
    pub fn replace_rows(&mut self, base: Var, src: Var, map: Rc<Vec<(usize, usize)>>) -> Var {
        let mut value = self.value(base).clone();
        let s = self.value(src);
        for &(i, j) in map.iter() {
            value.row_mut(i).assign(&s.row(j));
        }
        let t = self.tracked(base) || self.tracked(src);
        self.push(value, Op::ReplaceRows { base, src, map }, t)
    }

    /// Output row `k` is the mean of the rows of `x` listed in `groups[k]`.
    pub fn pool_rows(&mut self, x: Var, groups: Rc<Vec<Vec<usize>>>) -> Var {
        let xv = self.value(x);
        let mut value = Array2::zeros((groups.len(), xv.ncols()));
        for (k, group) in groups.iter().enumerate() {
            assert!(!group.is_empty(), "empty pooling group");
            let inv = 1.0 / group.len() as f64;
            let mut row = value.row_mut(k);
            for &i in group {
                row.scaled_add(inv, &xv.row(i));
            }
        }
        let t = self.tracked(x);
        self.push(value, Op::PoolRows { x, groups }, t)
    }

    /// Concatenate along columns. All parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts differ");
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), t)
    }

    /// Row `r` of `x` multiplied by `w[r, col]`.
    pub fn scale_rows_by_col(&mut self, x: Var, w: Var, col: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.nrows(), wv.nrows(), "row counts differ");
        let mut value = xv.clone();
        for (r, mut row) in value.outer_iter_mut().enumerate() {
            let k = wv[[r, col]];
            row.mapv_inplace(|v| v * k);
        }
        let t = self.tracked(x) || self.tracked(w);
        self.push(value, Op::ScaleRowsByCol { x, w, col }, t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let t = self.tracked(a);
        self.push(value, Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        let t = self.tracked(a);
        self.push(value, Op::Mean(a), t)
    }

    /// `-(1/N) Σ_n logp[n, labels[n]]`.
    pub fn nll_mean(&mut self, logp: Var, labels: Rc<Vec<usize>>) -> Var {
        let lp = self.value(logp);
        assert_eq!(lp.nrows(), labels.len(), "label count");
        let total: f64 = labels.iter().enumerate().map(|(n, &y)| lp[[n, y]]).sum();
        let value = Array2::from_elem((1, 1), -total / labels.len() as f64);
        let t = self.tracked(logp);
        self.push(value, Op::NllMean { logp, labels }, t)
    }

    /// Gradients of the scalar `output` with respect to all tracked nodes.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.tracked(output) {
            return Gradients { grads };
        }
        grads[output.0] = Some(Array2::ones((1, 1)));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.tracked(a) {
                    self.accumulate(grads, a, g.dot(&self.value(b).t()));
                }
                if self.tracked(b) {
                    self.accumulate(grads, b, self.value(a).t().dot(g));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, -g);
            }
            &Op::Mul(a, b) => {
                if self.tracked(a) {
                    self.accumulate(grads, a, g * self.value(b));
                }
                if self.tracked(b) {
                    self.accumulate(grads, b, g * self.value(a));
                }
            }
            &Op::Scale(a, k) => self.accumulate(grads, a, g * k),
            &Op::AddRow(x, b) => {
                self.accumulate(grads, x, g.clone());
                if self.tracked(b) {
                    self.accumulate(grads, b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            &Op::Tanh(a) => self.accumulate(grads, a, g * &y.mapv(|t| 1.0 - t * t)),
            &Op::Exp(a) => self.accumulate(grads, a, g * y),
            &Op::Abs(a) => {
                let sign = self.value(a).mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, a, g * &sign);
            }
            &Op::Square(a) => self.accumulate(grads, a, g * &self.value(a).mapv(|v| 2.0 * v)),
            &Op::Transpose(a) => self.accumulate(grads, a, g.t().to_owned()),
            &Op::Softmax(a) | &Op::MaskedSoftmax(a) => {
                let gy = g * y;
                let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                self.accumulate(grads, a, &gy - &(y * &dot));
            }
            &Op::LogSoftmax(a) => {
                let p = y.mapv(f64::exp);
                let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                self.accumulate(grads, a, g - &(&p * &gsum));
            }
            &Op::NormalizeRows(a) => {
                let x = self.value(a);
                let mut dx = Array2::zeros(x.dim());
                for r in 0..x.nrows() {
                    let n = x.row(r).dot(&x.row(r)).sqrt();
                    let yg = y.row(r).dot(&g.row(r));
                    let mut row = dx.row_mut(r);
                    row.assign(&g.row(r));
                    row.scaled_add(-yg, &y.row(r));
                    row.mapv_inplace(|v| v / n);
                }
                self.accumulate(grads, a, dx);
            }
            Op::ReplaceRows { base, src, map } => {
                if self.tracked(*base) {
                    let mut db = g.clone();
                    for &(i, _) in map.iter() {
                        db.row_mut(i).fill(0.0);
                    }
                    self.accumulate(grads, *base, db);
                }
                if self.tracked(*src) {
                    let mut ds = Array2::zeros(self.value(*src).dim());
                    for &(i, j) in map.iter() {
                        let mut row = ds.row_mut(j);
                        row += &g.row(i);
                    }
                    self.accumulate(grads, *src, ds);
                }
            }
            Op::PoolRows { x, groups } => {
                let mut dx = Array2::zeros(self.value(*x).dim());
                for (k, group) in groups.iter().enumerate() {
                    let inv = 1.0 / group.len() as f64;
                    for &i in group {
                        dx.row_mut(i).scaled_add(inv, &g.row(k));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.tracked(p) {
                        let slice = g.slice(ndarray::s![.., start..start + w]).to_owned();
                        self.accumulate(grads, p, slice);
                    }
                    start += w;
                }
            }
            &Op::ScaleRowsByCol { x, w, col } => {
                let wv = self.value(w);
                if self.tracked(x) {
                    let mut dx = g.clone();
                    for (r, mut row) in dx.outer_iter_mut().enumerate() {
                        let k = wv[[r, col]];
                        row.mapv_inplace(|v| v * k);
                    }
                    self.accumulate(grads, x, dx);
                }
                if self.tracked(w) {
                    let xv = self.value(x);
                    let mut dw = Array2::zeros(wv.dim());
                    for r in 0..xv.nrows() {
                        dw[[r, col]] = xv.row(r).dot(&g.row(r));
                    }
                    self.accumulate(grads, w, dw);
                }
            }
            &Op::Sum(a) => {
                let dim = self.value(a).dim();
                self.accumulate(grads, a, Array2::from_elem(dim, g[[0, 0]]));
            }
            &Op::Mean(a) => {
                let dim = self.value(a).dim();
                let n = (dim.0 * dim.1) as f64;
                self.accumulate(grads, a, Array2::from_elem(dim, g[[0, 0]] / n));
            }
            Op::NllMean { logp, labels } => {
                let mut d = Array2::zeros(self.value(*logp).dim());
                let k = -g[[0, 0]] / labels.len() as f64;
                for (n, &lab) in labels.iter().enumerate() {
                    d[[n, lab]] = k;
                }
                self.accumulate(grads, *logp, d);
            }
        }
    }
}

pub(crate) fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

pub(crate) fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}
