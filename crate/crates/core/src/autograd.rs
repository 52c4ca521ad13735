//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters come
//! from a borrowed [`ParamStore`]; each parameter maps to a single leaf so
//! repeated use accumulates gradient naturally. [`Graph::backward`] walks the
//! tape once in reverse.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{axpy, dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Constant linear map between row sets: `out[i] = Σ_j w_ij · in[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    in_rows: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(in_rows: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        debug_assert!(rows.iter().flatten().all(|&(j, _)| j < in_rows));
        Self { in_rows, rows }
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn out_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.rows(), self.in_rows, "sparse map input rows");
        let mut out = Tensor::zeros(self.rows.len(), x.cols());
        for (i, entries) in self.rows.iter().enumerate() {
            let o = out.row_mut(i);
            for &(j, w) in entries {
                axpy(o, w, x.row(j));
            }
        }
        out
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    BroadcastRows(Var),
    Scale(Var, f64),
    /// Adds a constant; gradient passes unchanged.
    Shift(Var),
    MulConst(Var, Tensor),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Recip(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    L2NormalizeRows(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    GroupMax(Var, Vec<usize>),
    MeanRows(Var),
    SumRows(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Sparse(Var, Rc<SparseRows>),
    /// Forward value supplied by the caller, identity backward.
    StraightThrough(Var),
    Pick(Var, Vec<usize>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<Vec<Option<Var>>>,
    frozen: Vec<ParamGroup>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    node_grads: Vec<Option<Tensor>>,
    params: Vec<Option<Var>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.node_grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).copied().flatten().and_then(|v| self.node_grads[v.0].as_ref())
    }

    /// Owned per-parameter gradients, length = store size.
    pub fn into_param_grads(mut self) -> Vec<Option<Tensor>> {
        self.params.iter().map(|v| v.and_then(|v| self.node_grads[v.0].take())).collect()
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self::with_frozen(store, &[])
    }

    /// Parameters of the listed groups enter the tape as constants.
    pub fn with_frozen(store: &'s ParamStore, frozen: &[ParamGroup]) -> Self {
        Self {
            store,
            nodes: RefCell::new(Vec::with_capacity(512)),
            bound: RefCell::new(vec![None; store.len()]),
            frozen: frozen.to_vec(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> Tensor {
        (*self.val(v)).clone()
    }

    pub fn with_value<T>(&self, v: Var, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.val(v);
        assert_eq!(t.shape(), (1, 1), "not a scalar");
        t.data()[0]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (used for input-gradient checks).
    pub fn input(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let p = self.store.param(id);
        let trainable = !self.frozen.contains(&p.group);
        let v = self.push(p.value.clone(), Op::Leaf, trainable);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    fn unary(&self, a: Var, value: Tensor, op: Op) -> Var {
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    fn binary(&self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = self.val(a).matmul(&self.val(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&self, a: Var, b: Var) -> Var {
        let v = self.val(a).matmul_t(&self.val(b));
        self.binary(a, b, v, Op::MatMulT(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.val(a).transpose();
        self.unary(a, v, Op::Transpose(a))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.val(a).zip_map(&self.val(b), |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.val(a).zip_map(&self.val(b), |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.val(a).zip_map(&self.val(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.val(a), self.val(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row shape");
        let mut out = (*av).clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.binary(a, row, out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.val(a), self.val(row));
        assert_eq!(rv.shape(), (1, av.cols()), "mul_row shape");
        let mut out = (*av).clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o *= b;
            }
        }
        self.binary(a, row, out, Op::MulRow(a, row))
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `r × 1`).
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.val(a), self.val(col));
        assert_eq!(cv.shape(), (av.rows(), 1), "mul_col shape");
        let mut out = (*av).clone();
        for r in 0..out.rows() {
            let s = cv.data()[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        self.binary(a, col, out, Op::MulCol(a, col))
    }

    pub fn broadcast_rows(&self, row: Var, n: usize) -> Var {
        let rv = self.val(row);
        assert_eq!(rv.rows(), 1, "broadcast_rows expects a row");
        let mut data = Vec::with_capacity(n * rv.cols());
        for _ in 0..n {
            data.extend_from_slice(rv.data());
        }
        self.unary(row, Tensor::from_vec(n, rv.cols(), data), Op::BroadcastRows(row))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let v = self.val(a).map(|x| x * s);
        self.unary(a, v, Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let v = self.val(a).map(|x| x + s);
        self.unary(a, v, Op::Shift(a))
    }

    pub fn add_const(&self, a: Var, c: &Tensor) -> Var {
        let v = self.val(a).zip_map(c, |x, y| x + y);
        self.unary(a, v, Op::Shift(a))
    }

    pub fn mul_const(&self, a: Var, c: Tensor) -> Var {
        let v = self.val(a).zip_map(&c, |x, y| x * y);
        self.unary(a, v, Op::MulConst(a, c))
    }

    pub fn gelu(&self, a: Var) -> Var {
        let v = self.val(a).map(gelu);
        self.unary(a, v, Op::Gelu(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.val(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(a, v, Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.val(a).map(sigmoid);
        self.unary(a, v, Op::Sigmoid(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.val(a).map(libm::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let v = self.val(a).map(libm::log);
        self.unary(a, v, Op::Ln(a))
    }

    pub fn recip(&self, a: Var) -> Var {
        let v = self.val(a).map(|x| 1.0 / x);
        self.unary(a, v, Op::Recip(a))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let mut v = (*self.val(a)).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        self.unary(a, v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let mut v = (*self.val(a)).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + libm::log(row.iter().map(|&x| libm::exp(x - m)).sum::<f64>());
            for x in row {
                *x -= lse;
            }
        }
        self.unary(a, v, Op::LogSoftmaxRows(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&self, a: Var, eps: f64) -> Var {
        let av = self.val(a);
        let mut out = (*av).clone();
        let mut inv = Vec::with_capacity(av.rows());
        let c = av.cols() as f64;
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let is = 1.0 / libm::sqrt(var + eps);
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv.push(is);
        }
        self.unary(a, out, Op::LayerNormRows(a, inv))
    }

    pub fn l2_normalize_rows(&self, a: Var) -> Var {
        let av = self.val(a);
        let mut out = (*av).clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = libm::sqrt(dot(row, row)).max(1e-12);
            for x in row.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        self.unary(a, out, Op::L2NormalizeRows(a, norms))
    }

    pub fn gather_rows(&self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.val(a).gather_rows(&idx);
        self.unary(a, v, Op::GatherRows(a, idx))
    }

    /// Max over consecutive blocks of `group` rows: `(n·group) × c → n × c`.
    pub fn group_max(&self, a: Var, group: usize) -> Var {
        let av = self.val(a);
        assert!(group > 0 && av.rows().is_multiple_of(group), "group_max block size");
        let n = av.rows() / group;
        let c = av.cols();
        let mut out = Tensor::zeros(n, c);
        let mut arg = vec![0usize; n * c];
        for g in 0..n {
            for j in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut bi = g * group;
                for r in g * group..(g + 1) * group {
                    let x = av.get(r, j);
                    if x > best {
                        best = x;
                        bi = r;
                    }
                }
                out.set(g, j, best);
                arg[g * c + j] = bi;
            }
        }
        self.unary(a, out, Op::GroupMax(a, arg))
    }

    /// Mean over rows: `r × c → 1 × c`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let av = self.val(a);
        let mut out = Tensor::zeros(1, av.cols());
        for r in 0..av.rows() {
            axpy(out.row_mut(0), 1.0, av.row(r));
        }
        let inv = 1.0 / av.rows() as f64;
        for x in out.data_mut() {
            *x *= inv;
        }
        self.unary(a, out, Op::MeanRows(a))
    }

    /// Sum over columns: `r × c → r × 1`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let av = self.val(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        self.unary(a, Tensor::from_vec(av.rows(), 1, data), Op::SumRows(a))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.val(a).sum();
        self.unary(a, Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.val(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.val(p)).collect();
        let rows = vals[0].rows();
        assert!(vals.iter().all(|v| v.rows() == rows), "concat_cols rows");
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.val(p)).collect();
        let cols = vals[0].cols();
        assert!(vals.iter().all(|v| v.cols() == cols), "concat_rows cols");
        let mut data = Vec::new();
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols.max(1);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.val(a);
        assert!(start + len <= av.cols(), "slice_cols range");
        let mut data = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        self.unary(a, Tensor::from_vec(av.rows(), len, data), Op::SliceCols(a, start))
    }

    pub fn row(&self, a: Var, r: usize) -> Var {
        self.gather_rows(a, vec![r])
    }

    pub fn sparse(&self, a: Var, map: Rc<SparseRows>) -> Var {
        let v = map.apply(&self.val(a));
        self.unary(a, v, Op::Sparse(a, map))
    }

    /// Emits `forward` as the value while back-propagating the incoming
    /// gradient to `a` unchanged.
    pub fn straight_through(&self, a: Var, forward: Tensor) -> Var {
        assert_eq!(self.shape(a), forward.shape(), "straight_through shape");
        self.unary(a, forward, Op::StraightThrough(a))
    }

    /// Selects `a[i, idx[i]]` for every row: `r × c → r × 1`.
    pub fn pick(&self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.val(a);
        assert_eq!(idx.len(), av.rows(), "pick length");
        let data = idx.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect();
        self.unary(a, Tensor::from_vec(av.rows(), 1, data), Op::Pick(a, idx))
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let out = &node.value;
            let val = |v: Var| -> &Tensor { &nodes[v.0].value };
            let want = |v: Var| nodes[v.0].needs_grad;
            let acc = |v: Var, g: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(t) => t.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if want(*a) {
                        acc(*a, gy.matmul_t(val(*b)), &mut grads);
                    }
                    if want(*b) {
                        acc(*b, val(*a).t_matmul(&gy), &mut grads);
                    }
                }
                Op::MatMulT(a, b) => {
                    if want(*a) {
                        acc(*a, gy.matmul(val(*b)), &mut grads);
                    }
                    if want(*b) {
                        acc(*b, gy.t_matmul(val(*a)), &mut grads);
                    }
                }
                Op::Transpose(a) => acc(*a, gy.transpose(), &mut grads),
                Op::Add(a, b) => {
                    if want(*b) {
                        acc(*b, gy.clone(), &mut grads);
                    }
                    acc(*a, gy, &mut grads);
                }
                Op::Sub(a, b) => {
                    if want(*b) {
                        acc(*b, gy.map(|x| -x), &mut grads);
                    }
                    acc(*a, gy, &mut grads);
                }
                Op::Mul(a, b) => {
                    if want(*a) {
                        acc(*a, gy.zip_map(val(*b), |g, y| g * y), &mut grads);
                    }
                    if want(*b) {
                        acc(*b, gy.zip_map(val(*a), |g, x| g * x), &mut grads);
                    }
                }
                Op::AddRow(a, row) => {
                    if want(*row) {
                        let mut gr = Tensor::zeros(1, gy.cols());
                        for r in 0..gy.rows() {
                            axpy(gr.row_mut(0), 1.0, gy.row(r));
                        }
                        acc(*row, gr, &mut grads);
                    }
                    acc(*a, gy, &mut grads);
                }
                Op::MulRow(a, row) => {
                    let (av, rv) = (val(*a), val(*row));
                    if want(*row) {
                        let mut gr = Tensor::zeros(1, gy.cols());
                        for r in 0..gy.rows() {
                            for ((o, &g), &x) in gr.row_mut(0).iter_mut().zip(gy.row(r)).zip(av.row(r)) {
                                *o += g * x;
                            }
                        }
                        acc(*row, gr, &mut grads);
                    }
                    if want(*a) {
                        let mut ga = gy;
                        for r in 0..ga.rows() {
                            for (o, &w) in ga.row_mut(r).iter_mut().zip(rv.data()) {
                                *o *= w;
                            }
                        }
                        acc(*a, ga, &mut grads);
                    }
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (val(*a), val(*col));
                    if want(*col) {
                        let data = (0..gy.rows()).map(|r| dot(gy.row(r), av.row(r))).collect();
                        acc(*col, Tensor::from_vec(gy.rows(), 1, data), &mut grads);
                    }
                    if want(*a) {
                        let mut ga = gy;
                        for r in 0..ga.rows() {
                            let s = cv.data()[r];
                            for o in ga.row_mut(r) {
                                *o *= s;
                            }
                        }
                        acc(*a, ga, &mut grads);
                    }
                }
                Op::BroadcastRows(row) => {
                    let mut gr = Tensor::zeros(1, gy.cols());
                    for r in 0..gy.rows() {
                        axpy(gr.row_mut(0), 1.0, gy.row(r));
                    }
                    acc(*row, gr, &mut grads);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(*a, gy.map(|g| g * s), &mut grads);
                }
                Op::Shift(a) | Op::StraightThrough(a) => acc(*a, gy, &mut grads),
                Op::MulConst(a, c) => acc(*a, gy.zip_map(c, |g, k| g * k), &mut grads),
                Op::Gelu(a) => acc(*a, gy.zip_map(val(*a), |g, x| g * gelu_grad(x)), &mut grads),
                Op::Relu(a) => acc(*a, gy.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }), &mut grads),
                Op::Sigmoid(a) => acc(*a, gy.zip_map(out, |g, s| g * s * (1.0 - s)), &mut grads),
                Op::Exp(a) => acc(*a, gy.zip_map(out, |g, e| g * e), &mut grads),
                Op::Ln(a) => acc(*a, gy.zip_map(val(*a), |g, x| g / x), &mut grads),
                Op::Recip(a) => acc(*a, gy.zip_map(out, |g, y| -g * y * y), &mut grads),
                Op::SoftmaxRows(a) => {
                    let mut ga = gy;
                    for r in 0..ga.rows() {
                        let s = out.row(r);
                        let d = dot(ga.row(r), s);
                        for (g, &p) in ga.row_mut(r).iter_mut().zip(s) {
                            *g = p * (*g - d);
                        }
                    }
                    acc(*a, ga, &mut grads);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = gy;
                    for r in 0..ga.rows() {
                        let total: f64 = ga.row(r).iter().sum();
                        for (g, &ls) in ga.row_mut(r).iter_mut().zip(out.row(r)) {
                            *g -= libm::exp(ls) * total;
                        }
                    }
                    acc(*a, ga, &mut grads);
                }
                Op::LayerNormRows(a, inv) => {
                    let mut ga = gy;
                    let c = ga.cols() as f64;
                    for r in 0..ga.rows() {
                        let y = out.row(r);
                        let g = ga.row_mut(r);
                        let mg = g.iter().sum::<f64>() / c;
                        let mgy = dot(g, y) / c;
                        for (gi, &yi) in g.iter_mut().zip(y) {
                            *gi = inv[r] * (*gi - mg - yi * mgy);
                        }
                    }
                    acc(*a, ga, &mut grads);
                }
                Op::L2NormalizeRows(a, norms) => {
                    let mut ga = gy;
                    for r in 0..ga.rows() {
                        let y = out.row(r);
                        let g = ga.row_mut(r);
                        let d = dot(g, y);
                        for (gi, &yi) in g.iter_mut().zip(y) {
                            *gi = (*gi - yi * d) / norms[r];
                        }
                    }
                    acc(*a, ga, &mut grads);
                }
                Op::GatherRows(a, idx) => {
                    let av = val(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for (k, &r) in idx.iter().enumerate() {
                        axpy(ga.row_mut(r), 1.0, gy.row(k));
                    }
                    acc(*a, ga, &mut grads);
                }
                Op::GroupMax(a, arg) => {
                    let av = val(*a);
                    let c = av.cols();
                    let mut ga = Tensor::zeros(av.rows(), c);
                    for (k, &src) in arg.iter().enumerate() {
                        let j = k % c;
                        ga.data_mut()[src * c + j] += gy.data()[k];
                    }
                    acc(*a, ga, &mut grads);
                }
                Op::MeanRows(a) => {
                    let rows = val(*a).rows();
                    let inv = 1.0 / rows as f64;
                    let mut data = Vec::with_capacity(rows * gy.cols());
                    for _ in 0..rows {
                        data.extend(gy.data().iter().map(|g| g * inv));
                    }
                    acc(*a, Tensor::from_vec(rows, gy.cols(), data), &mut grads);
                }
                Op::SumRows(a) => {
                    let cols = val(*a).cols();
                    let mut data = Vec::with_capacity(gy.rows() * cols);
                    for &g in gy.data() {
                        data.extend(core::iter::repeat_n(g, cols));
                    }
                    acc(*a, Tensor::from_vec(gy.rows(), cols, data), &mut grads);
                }
                Op::SumAll(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Tensor::full(r, c, gy.data()[0]), &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        if want(p) {
                            let mut data = Vec::with_capacity(gy.rows() * w);
                            for r in 0..gy.rows() {
                                data.extend_from_slice(&gy.row(r)[off..off + w]);
                            }
                            acc(p, Tensor::from_vec(gy.rows(), w, data), &mut grads);
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    let c = gy.cols();
                    for &p in parts {
                        let h = val(p).rows();
                        if want(p) {
                            let data = gy.data()[off * c..(off + h) * c].to_vec();
                            acc(p, Tensor::from_vec(h, c, data), &mut grads);
                        }
                        off += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = val(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    let w = gy.cols();
                    for r in 0..gy.rows() {
                        ga.row_mut(r)[*start..*start + w].copy_from_slice(gy.row(r));
                    }
                    acc(*a, ga, &mut grads);
                }
                Op::Sparse(a, map) => {
                    let mut ga = Tensor::zeros(map.in_rows(), gy.cols());
                    for i in 0..map.out_rows() {
                        for &(j, w) in map.row(i) {
                            axpy(ga.row_mut(j), w, gy.row(i));
                        }
                    }
                    acc(*a, ga, &mut grads);
                }
                Op::Pick(a, idx) => {
                    let av = val(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for (r, &c) in idx.iter().enumerate() {
                        ga.set(r, c, gy.data()[r]);
                    }
                    acc(*a, ga, &mut grads);
                }
            }
        }
        Gradients { node_grads: grads, params: self.bound.borrow().clone() }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

const INV_SQRT2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = libm::exp(*x - m);
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}
