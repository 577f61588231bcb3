//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] simply walks it in reverse. Gradients
//! of leaves created with [`Tape::param`] accumulate additively across
//! backward calls until [`Tape::zero_grad`].
//!
//! Besides the generic dense algebra the tape carries a few graph kernels
//! (edge scores, segment softmax, neighbor aggregation) and a fused
//! "log-sum-exp of a scaled inner-product matrix" used by every contrastive
//! denominator. The fused kernel works on row blocks and recomputes the
//! product in the backward pass, so N×N similarity matrices are never kept.

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{linalg::general_mat_mul, s, Axis};

use super::{CsrMatrix, CsrPattern, Matrix, Rng};
use crate::{Error, Result};

/// Log inputs are clamped from below at this value.
pub const LOG_CLAMP: f64 = 1e-30;

const LSE_BLOCK: usize = 256;

/// Norm floor of [`Var::row_normalize`].
pub const ROW_NORM_EPS: f64 = 1e-12;

/// Bytes of fused-product score matrices one tape may keep for backward;
/// products beyond it recompute their scores.
const LSE_CACHE_BUDGET: usize = 2 << 30;

/// Entries removed from a fused log-sum-exp denominator.
#[derive(Debug, Clone)]
pub enum Exclusion {
    /// Every column takes part.
    None,
    /// Row `i` skips column `i`.
    SelfPair,
    /// Row `i` skips column `i` and every column `j` adjacent to `i`.
    SelfAndNeighbors(Arc<CsrPattern>),
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    SpMM(Arc<CsrMatrix>, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    LeakyRelu(usize, f64),
    Elu(usize, f64),
    RowSoftmax(usize),
    Dropout(usize, Matrix),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    RowL2Norm(usize),
    RowNormalize(usize),
    LogAddExp(usize, usize),
    HeadDot(usize, usize),
    EdgeScore(usize, usize, Arc<CsrPattern>),
    SegmentSoftmax(usize, Arc<CsrPattern>),
    EdgeAggregate(usize, usize, Arc<CsrPattern>),
    EdgeDot(usize, usize, Arc<CsrPattern>),
    SegmentSum(usize, Arc<CsrPattern>),
    SegmentLse(usize, Arc<CsrPattern>),
    ProductLse(ProductLse),
}

struct ProductLse {
    a: usize,
    b: usize,
    scale: f64,
    cols: Option<Arc<Vec<usize>>>,
    exclusion: Exclusion,
    both: bool,
    /// Masked scaled scores, kept when the budget allows.
    scores: Option<Matrix>,
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNT(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | MulCol(a, b) | LogAddExp(a, b) | HeadDot(a, b) => vec![*a, *b],
            EdgeScore(a, b, _) | EdgeAggregate(a, b, _) | EdgeDot(a, b, _) => vec![*a, *b],
            SpMM(_, b) => vec![*b],
            Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Sigmoid(a) | LeakyRelu(a, _)
            | Elu(a, _) | RowSoftmax(a) | Dropout(a, _) | SliceCols(a, _) | Transpose(a)
            | Sum(a) | Mean(a) | RowSum(a) | RowL2Norm(a) | RowNormalize(a) => vec![*a],
            SegmentSoftmax(a, _) | SegmentSum(a, _) | SegmentLse(a, _) => vec![*a],
            ConcatCols(parts) => parts.clone(),
            ProductLse(p) => vec![p.a, p.b],
        }
    }
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Append-only operation record.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Matrix>>>,
    cache_left: Cell<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::with_cache_budget(LSE_CACHE_BUDGET)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape {
        op,
        lhs: a.dim(),
        rhs: b.dim(),
    }
}

fn logaddexp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape whose fused products keep at most `bytes` of scores for backward.
    pub fn with_cache_budget(bytes: usize) -> Self {
        Self {
            nodes: RefCell::default(),
            grads: RefCell::default(),
            cache_left: Cell::new(bytes),
        }
    }

    /// Trainable leaf; its gradient is accumulated by [`Tape::backward`].
    pub fn param(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::from_elem((1, 1), value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op, leaf_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Leaf => leaf_grad,
            ref other => other.inputs().iter().any(|&i| nodes[i].requires_grad),
        };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        self.grads.borrow_mut().push(None);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Accumulated gradient of a parameter leaf, if any was propagated.
    pub fn grad(&self, v: Var<'_>) -> Option<Matrix> {
        self.grads.borrow()[v.id].clone()
    }

    pub fn zero_grad(&self) {
        for g in self.grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }

    /// Propagates d(loss)/d(·) to every parameter leaf reachable from `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.dim();
        if shape != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        if !nodes[loss.id].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Matrix>> = (0..=loss.id).map(|_| None).collect();
        local[loss.id] = Some(Matrix::ones((1, 1)));
        let mut grads = self.grads.borrow_mut();
        for id in (0..=loss.id).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut grads[id] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
                continue;
            }
            backprop(&nodes, id, g, &mut local);
        }
        Ok(())
    }
}

fn accumulate(nodes: &[Node], local: &mut [Option<Matrix>], id: usize, g: Matrix) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut local[id] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], id: usize, g: Matrix, local: &mut [Option<Matrix>]) {
    let need = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| -> &Matrix { &nodes[i].value };
    let out = &*nodes[id].value;
    let mut push = |i: usize, m: Matrix| accumulate(nodes, local, i, m);
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if need(*a) {
                push(*a, g.dot(&val(*b).t()));
            }
            if need(*b) {
                push(*b, val(*a).t().dot(&g));
            }
        }
        Op::MatMulNT(a, b) => {
            if need(*a) {
                push(*a, g.dot(val(*b)));
            }
            if need(*b) {
                push(*b, g.t().dot(val(*a)));
            }
        }
        Op::SpMM(s, b) => {
            push(*b, s.t_matmul_dense(&g).expect("shape checked in forward"));
        }
        Op::Add(a, b) => {
            if need(*a) {
                push(*a, g.clone());
            }
            push(*b, g);
        }
        Op::Sub(a, b) => {
            if need(*a) {
                push(*a, g.clone());
            }
            push(*b, -g);
        }
        Op::Mul(a, b) => {
            if need(*a) {
                push(*a, &g * val(*b));
            }
            if need(*b) {
                push(*b, &g * val(*a));
            }
        }
        Op::AddRow(a, b) => {
            if need(*b) {
                push(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            push(*a, g);
        }
        Op::MulCol(a, b) => {
            if need(*b) {
                let gb = (&g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                push(*b, gb);
            }
            if need(*a) {
                push(*a, &g * val(*b));
            }
        }
        Op::Scale(a, s) => push(*a, g * *s),
        Op::AddScalar(a) => push(*a, g),
        Op::Exp(a) => push(*a, g * out),
        Op::Log(a) => {
            let mut d = g;
            d.zip_mut_with(val(*a), |gi, &x| {
                *gi = if x >= LOG_CLAMP { *gi / x } else { 0.0 };
            });
            push(*a, d);
        }
        Op::Sigmoid(a) => {
            let mut d = g;
            d.zip_mut_with(out, |gi, &y| *gi *= y * (1.0 - y));
            push(*a, d);
        }
        Op::LeakyRelu(a, slope) => {
            let mut d = g;
            d.zip_mut_with(val(*a), |gi, &x| {
                if x <= 0.0 {
                    *gi *= slope;
                }
            });
            push(*a, d);
        }
        Op::Elu(a, alpha) => {
            let mut d = g;
            ndarray::Zip::from(&mut d)
                .and(val(*a))
                .and(out)
                .for_each(|gi, &x, &y| {
                    if x <= 0.0 {
                        *gi *= y + alpha;
                    }
                });
            push(*a, d);
        }
        Op::RowSoftmax(a) => {
            let mut d = &g * out;
            let dots = d.sum_axis(Axis(1));
            for (mut row, (yrow, &dot)) in d.rows_mut().into_iter().zip(out.rows().into_iter().zip(&dots)) {
                row.zip_mut_with(&yrow, |v, &y| *v -= y * dot);
            }
            push(*a, d);
        }
        Op::Dropout(a, mask) => push(*a, g * mask),
        Op::ConcatCols(parts) => {
            let mut start = 0;
            for &p in parts {
                let w = val(p).ncols();
                if need(p) {
                    push(p, g.slice(s![.., start..start + w]).to_owned());
                }
                start += w;
            }
        }
        Op::SliceCols(a, start) => {
            let mut d = Matrix::zeros(val(*a).dim());
            d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
            push(*a, d);
        }
        Op::Transpose(a) => push(*a, g.t().to_owned()),
        Op::Sum(a) => push(*a, Matrix::from_elem(val(*a).dim(), g[[0, 0]])),
        Op::Mean(a) => {
            let n = val(*a).len().max(1) as f64;
            push(*a, Matrix::from_elem(val(*a).dim(), g[[0, 0]] / n));
        }
        Op::RowSum(a) => {
            let (r, c) = val(*a).dim();
            let mut d = Matrix::zeros((r, c));
            for (mut row, &gi) in d.rows_mut().into_iter().zip(g.column(0)) {
                row.fill(gi);
            }
            push(*a, d);
        }
        Op::RowL2Norm(a) => {
            let x = val(*a);
            let mut d = x.clone();
            for ((mut row, &n), &gi) in d.rows_mut().into_iter().zip(out.column(0)).zip(g.column(0)) {
                let f = if n > 0.0 { gi / n } else { 0.0 };
                row.mapv_inplace(|v| v * f);
            }
            push(*a, d);
        }
        Op::RowNormalize(a) => {
            let x = val(*a);
            let mut d = g;
            for ((mut grow, yrow), xrow) in d.rows_mut().into_iter().zip(out.rows()).zip(x.rows()) {
                let norm = xrow.dot(&xrow).sqrt();
                if norm < ROW_NORM_EPS {
                    grow.mapv_inplace(|gv| gv / ROW_NORM_EPS);
                    continue;
                }
                let yg = yrow.dot(&grow);
                grow.zip_mut_with(&yrow, |gv, &y| *gv = (*gv - y * yg) / norm);
            }
            push(*a, d);
        }
        Op::LogAddExp(a, b) => {
            let weight = |x: &Matrix| {
                let mut w = g.clone();
                ndarray::Zip::from(&mut w).and(x).and(out).for_each(|wi, &xi, &ri| {
                    *wi = if ri == f64::NEG_INFINITY { 0.0 } else { *wi * (xi - ri).exp() };
                });
                w
            };
            if need(*a) {
                push(*a, weight(val(*a)));
            }
            if need(*b) {
                push(*b, weight(val(*b)));
            }
        }
        Op::HeadDot(h, att) => {
            let hv = val(*h);
            let av = val(*att);
            let (k_heads, dh) = av.dim();
            if need(*h) {
                let mut d = Matrix::zeros(hv.dim());
                for (mut drow, grow) in d.rows_mut().into_iter().zip(g.rows()) {
                    for k in 0..k_heads {
                        let gk = grow[k];
                        for t in 0..dh {
                            drow[k * dh + t] = gk * av[[k, t]];
                        }
                    }
                }
                push(*h, d);
            }
            if need(*att) {
                let mut d = Matrix::zeros(av.dim());
                for (hrow, grow) in hv.rows().into_iter().zip(g.rows()) {
                    for k in 0..k_heads {
                        let gk = grow[k];
                        for t in 0..dh {
                            d[[k, t]] += gk * hrow[k * dh + t];
                        }
                    }
                }
                push(*att, d);
            }
        }
        Op::EdgeScore(src, dst, pat) => {
            let k = g.ncols();
            let n = val(*src).nrows();
            let mut dsrc = Matrix::zeros((n, k));
            let mut ddst = Matrix::zeros((val(*dst).nrows(), k));
            for i in 0..pat.rows() {
                for p in pat.row_range(i) {
                    let j = pat.indices()[p];
                    for h in 0..k {
                        let v = g[[p, h]];
                        dsrc[[i, h]] += v;
                        ddst[[j, h]] += v;
                    }
                }
            }
            push(*src, dsrc);
            push(*dst, ddst);
        }
        Op::SegmentSoftmax(a, pat) => {
            let k = g.ncols();
            let mut d = Matrix::zeros(g.dim());
            for i in 0..pat.rows() {
                let r = pat.row_range(i);
                for h in 0..k {
                    let dot: f64 = r.clone().map(|p| g[[p, h]] * out[[p, h]]).sum();
                    for p in r.clone() {
                        d[[p, h]] = out[[p, h]] * (g[[p, h]] - dot);
                    }
                }
            }
            push(*a, d);
        }
        Op::EdgeAggregate(alpha, h, pat) => {
            let av = val(*alpha);
            let hv = val(*h);
            let k_heads = av.ncols();
            let dh = hv.ncols() / k_heads;
            let mut dalpha = Matrix::zeros(av.dim());
            let mut dh_m = Matrix::zeros(hv.dim());
            for i in 0..pat.rows() {
                let grow = g.row(i);
                for p in pat.row_range(i) {
                    let j = pat.indices()[p];
                    let hrow = hv.row(j);
                    for k in 0..k_heads {
                        let cols = k * dh..(k + 1) * dh;
                        let mut acc = 0.0;
                        let a = av[[p, k]];
                        for c in cols {
                            acc += grow[c] * hrow[c];
                            dh_m[[j, c]] += a * grow[c];
                        }
                        dalpha[[p, k]] = acc;
                    }
                }
            }
            if need(*alpha) {
                push(*alpha, dalpha);
            }
            if need(*h) {
                push(*h, dh_m);
            }
        }
        Op::EdgeDot(a, b, pat) => {
            let av = val(*a);
            let bv = val(*b);
            let mut da = Matrix::zeros(av.dim());
            let mut db = Matrix::zeros(bv.dim());
            for i in 0..pat.rows() {
                for p in pat.row_range(i) {
                    let j = pat.indices()[p];
                    let gp = g[[p, 0]];
                    if gp == 0.0 {
                        continue;
                    }
                    da.row_mut(i).scaled_add(gp, &bv.row(j));
                    db.row_mut(j).scaled_add(gp, &av.row(i));
                }
            }
            if need(*a) {
                push(*a, da);
            }
            if need(*b) {
                push(*b, db);
            }
        }
        Op::SegmentSum(a, pat) => {
            let mut d = Matrix::zeros((pat.nnz(), 1));
            for i in 0..pat.rows() {
                for p in pat.row_range(i) {
                    d[[p, 0]] = g[[i, 0]];
                }
            }
            push(*a, d);
        }
        Op::SegmentLse(a, pat) => {
            let v = val(*a);
            let mut d = Matrix::zeros((pat.nnz(), 1));
            for i in 0..pat.rows() {
                let r = out[[i, 0]];
                if r == f64::NEG_INFINITY {
                    continue;
                }
                for p in pat.row_range(i) {
                    d[[p, 0]] = g[[i, 0]] * (v[[p, 0]] - r).exp();
                }
            }
            push(*a, d);
        }
        Op::ProductLse(p) => {
            let (da, db) = product_lse_backward(p, val(p.a), val(p.b), out, &g, need(p.a), need(p.b));
            if let Some(da) = da {
                push(p.a, da);
            }
            if let Some(db) = db {
                push(p.b, db);
            }
        }
    }
}

/// Column position lookup for a (possibly subsampled) candidate set.
struct ColumnMap<'a> {
    cols: Option<&'a [usize]>,
    inverse: Vec<usize>,
}

impl<'a> ColumnMap<'a> {
    fn new(cols: Option<&'a [usize]>, universe: usize) -> Self {
        let inverse = match cols {
            Some(c) => {
                let mut inv = vec![usize::MAX; universe];
                for (pos, &id) in c.iter().enumerate() {
                    inv[id] = pos;
                }
                inv
            }
            None => Vec::new(),
        };
        Self { cols, inverse }
    }

    #[inline]
    fn position(&self, id: usize) -> Option<usize> {
        match self.cols {
            None => Some(id),
            Some(_) => match self.inverse[id] {
                usize::MAX => None,
                p => Some(p),
            },
        }
    }
}

fn candidate_matrix(b: &Matrix, cols: Option<&[usize]>) -> Matrix {
    match cols {
        Some(c) => b.select(Axis(0), c),
        None => b.clone(),
    }
}

/// Scaled products of rows `start..start+len` of `a` against all candidates,
/// with excluded entries set to -inf.
fn masked_block(
    a: &Matrix,
    cand: &Matrix,
    start: usize,
    len: usize,
    scale: f64,
    map: &ColumnMap<'_>,
    exclusion: &Exclusion,
) -> Matrix {
    let mut blk = Matrix::zeros((len, cand.nrows()));
    general_mat_mul(scale, &a.slice(s![start..start + len, ..]), &cand.t(), 0.0, &mut blk);
    for r in 0..len {
        let i = start + r;
        let mut kill = |id: usize| {
            if let Some(pos) = map.position(id) {
                blk[[r, pos]] = f64::NEG_INFINITY;
            }
        };
        match exclusion {
            Exclusion::None => {}
            Exclusion::SelfPair => kill(i),
            Exclusion::SelfAndNeighbors(pat) => {
                kill(i);
                for &j in pat.row(i) {
                    kill(j);
                }
            }
        }
    }
    blk
}

fn row_lse(row: ndarray::ArrayView1<'_, f64>) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.fold(0.0, |acc, &v| acc + (v - m).exp()).ln()
}

/// Row (and optionally column) log-sum-exps; with `keep` the full score
/// matrix is returned for the backward pass.
fn product_lse_forward(p: &ProductLse, a: &Matrix, b: &Matrix, keep: bool) -> (Matrix, Option<Matrix>) {
    let n = a.nrows();
    let cols = p.cols.as_deref().map(|c| c.as_slice());
    let cand = candidate_matrix(b, cols);
    let m = cand.nrows();
    let map = ColumnMap::new(cols, b.nrows());
    let mut out = Matrix::zeros((n, if p.both { 2 } else { 1 }));
    let mut col_max = vec![f64::NEG_INFINITY; if p.both { m } else { 0 }];
    let mut col_sum = vec![0.0; col_max.len()];
    let full = keep.then(|| masked_block(a, &cand, 0, n, p.scale, &map, &p.exclusion));
    let mut start = 0;
    while start < n {
        let len = LSE_BLOCK.min(n - start);
        let owned;
        let blk = match &full {
            Some(f) => f.slice(s![start..start + len, ..]),
            None => {
                owned = masked_block(a, &cand, start, len, p.scale, &map, &p.exclusion);
                owned.view()
            }
        };
        for r in 0..len {
            out[[start + r, 0]] = row_lse(blk.row(r));
        }
        if p.both {
            for row in blk.rows() {
                for (c, &v) in row.iter().enumerate() {
                    if v == f64::NEG_INFINITY {
                        continue;
                    }
                    if v > col_max[c] {
                        col_sum[c] = col_sum[c] * (col_max[c] - v).exp() + 1.0;
                        col_max[c] = v;
                    } else {
                        col_sum[c] += (v - col_max[c]).exp();
                    }
                }
            }
        }
        start += len;
    }
    if p.both {
        for c in 0..m {
            out[[c, 1]] = if col_max[c] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                col_max[c] + col_sum[c].ln()
            };
        }
    }
    (out, full)
}

fn product_lse_backward(
    p: &ProductLse,
    a: &Matrix,
    b: &Matrix,
    out: &Matrix,
    g: &Matrix,
    need_a: bool,
    need_b: bool,
) -> (Option<Matrix>, Option<Matrix>) {
    let n = a.nrows();
    let cols = p.cols.as_deref().map(|c| c.as_slice());
    let cand = candidate_matrix(b, cols);
    let map = ColumnMap::new(cols, b.nrows());
    let mut da = need_a.then(|| Matrix::zeros(a.dim()));
    let mut dcand = need_b.then(|| Matrix::zeros(cand.dim()));
    let mut start = 0;
    while start < n {
        let len = LSE_BLOCK.min(n - start);
        let mut w = match &p.scores {
            Some(sc) => sc.slice(s![start..start + len, ..]).to_owned(),
            None => masked_block(a, &cand, start, len, p.scale, &map, &p.exclusion),
        };
        for (r, mut row) in w.rows_mut().into_iter().enumerate() {
            let i = start + r;
            let (gr, lr) = (g[[i, 0]], out[[i, 0]]);
            for (c, v) in row.iter_mut().enumerate() {
                let s = *v;
                let mut acc = 0.0;
                if s != f64::NEG_INFINITY {
                    if lr != f64::NEG_INFINITY {
                        acc += gr * (s - lr).exp();
                    }
                    if p.both {
                        let lc = out[[c, 1]];
                        if lc != f64::NEG_INFINITY {
                            acc += g[[c, 1]] * (s - lc).exp();
                        }
                    }
                }
                *v = acc;
            }
        }
        if let Some(da) = da.as_mut() {
            general_mat_mul(p.scale, &w, &cand, 0.0, &mut da.slice_mut(s![start..start + len, ..]));
        }
        if let Some(dc) = dcand.as_mut() {
            general_mat_mul(p.scale, &w.t(), &a.slice(s![start..start + len, ..]), 1.0, dc);
        }
        start += len;
    }
    let db = dcand.map(|dc| match cols {
        Some(c) => {
            let mut full = Matrix::zeros(b.dim());
            for (pos, &id) in c.iter().enumerate() {
                let mut row = full.row_mut(id);
                row += &dc.row(pos);
            }
            full
        }
        None => dc,
    });
    (da, db)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() on non-scalar");
        v[[0, 0]]
    }

    pub fn grad(&self) -> Option<Matrix> {
        self.tape.grad(*self)
    }

    fn unary(self, value: Matrix, op: Op) -> Var<'t> {
        self.tape.push(value, op, false)
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<(Rc<Matrix>, Rc<Matrix>)> {
        let (a, b) = (self.value(), other.value());
        if a.dim() != b.dim() {
            return Err(shape_err(op, &a, &b));
        }
        Ok((a, b))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.ncols() != b.nrows() {
            return Err(shape_err("matmul", &a, &b));
        }
        Ok(self.unary(a.dot(&*b), Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.ncols() != b.ncols() {
            return Err(shape_err("matmul_nt", &a, &b));
        }
        Ok(self.unary(a.dot(&b.t()), Op::MatMulNT(self.id, other.id)))
    }

    /// `sparse · self` for a constant sparse left operand.
    pub fn sparse_matmul(self, sparse: Arc<CsrMatrix>) -> Result<Var<'t>> {
        let v = sparse.matmul_dense(&self.value())?;
        Ok(self.unary(v, Op::SpMM(sparse, self.id)))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "add")?;
        Ok(self.unary(&*a + &*b, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "sub")?;
        Ok(self.unary(&*a - &*b, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "mul")?;
        Ok(self.unary(&*a * &*b, Op::Mul(self.id, other.id)))
    }

    /// Adds a 1×c row vector to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), row.value());
        if b.nrows() != 1 || b.ncols() != a.ncols() {
            return Err(shape_err("add_row", &a, &b));
        }
        Ok(self.unary(&*a + &*b, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies row `i` by entry `i` of an N×1 column.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), col.value());
        if b.ncols() != 1 || b.nrows() != a.nrows() {
            return Err(shape_err("mul_col", &a, &b));
        }
        Ok(self.unary(&*a * &*b, Op::MulCol(self.id, col.id)))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = &*self.value() * s;
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = &*self.value() + s;
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    /// Natural log with inputs clamped below at [`LOG_CLAMP`].
    pub fn log(self) -> Var<'t> {
        let v = self.value().mapv(|x| x.max(LOG_CLAMP).ln());
        self.unary(v, Op::Log(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let v = self.value().mapv(|x| if x > 0.0 { x } else { slope * x });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn relu(self) -> Var<'t> {
        self.leaky_relu(0.0)
    }

    pub fn elu(self, alpha: f64) -> Var<'t> {
        let v = self.value().mapv(|x| if x > 0.0 { x } else { alpha * x.exp_m1() });
        self.unary(v, Op::Elu(self.id, alpha))
    }

    /// Softmax along each row, max-shifted.
    pub fn row_softmax(self) -> Var<'t> {
        let mut v = (*self.value()).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.unary(v, Op::RowSoftmax(self.id))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(self, rate: f64, rng: &mut Rng) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(self);
        }
        let keep = 1.0 - rate;
        let x = self.value();
        let mask = Matrix::from_shape_simple_fn(x.dim(), || if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 });
        let v = &*x * &mask;
        Ok(self.unary(v, Op::Dropout(self.id, mask)))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let values: Vec<Rc<Matrix>> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].nrows();
        if let Some(bad) = values.iter().find(|v| v.nrows() != rows) {
            return Err(shape_err("concat_cols", &values[0], bad));
        }
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        Ok(first.unary(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        if start > end || end > x.ncols() {
            return Err(Error::InvalidArgument(format!(
                "slice_cols {start}..{end} of width {}",
                x.ncols()
            )));
        }
        let v = x.slice(s![.., start..end]).to_owned();
        Ok(self.unary(v, Op::SliceCols(self.id, start)))
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.value().t().to_owned();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Matrix::from_elem((1, 1), self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let v = Matrix::from_elem((1, 1), x.sum() / x.len().max(1) as f64);
        self.unary(v, Op::Mean(self.id))
    }

    /// N×c → N×1 row sums.
    pub fn row_sum(self) -> Var<'t> {
        let v = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(v, Op::RowSum(self.id))
    }

    /// N×c → N×1 Euclidean row norms.
    pub fn row_l2_norm(self) -> Var<'t> {
        let x = self.value();
        let v = x
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        self.unary(v, Op::RowL2Norm(self.id))
    }

    /// Divides every row by `max(‖row‖, ROW_NORM_EPS)`, so a zero row stays
    /// zero. Non-finite norms are an error.
    pub fn row_normalize(self) -> Result<Var<'t>> {
        let mut v = (*self.value()).clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !n.is_finite() {
                return Err(Error::NonFinite(format!("norm of row {i}")));
            }
            let n = n.max(ROW_NORM_EPS);
            row.mapv_inplace(|x| x / n);
        }
        Ok(self.unary(v, Op::RowNormalize(self.id)))
    }

    /// Row dot products of two equally shaped matrices, N×1.
    pub fn row_dot(self, other: Var<'t>) -> Result<Var<'t>> {
        Ok(self.mul(other)?.row_sum())
    }

    /// Elementwise `log(exp(a) + exp(b))`, stable and -inf aware.
    pub fn logaddexp(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "logaddexp")?;
        let mut v = (*a).clone();
        v.zip_mut_with(&b, |x, &y| *x = logaddexp(*x, y));
        Ok(self.unary(v, Op::LogAddExp(self.id, other.id)))
    }

    /// Per-head inner products: `self` is N×(K·d), `att` is K×d; output N×K.
    pub fn head_dot(self, att: Var<'t>) -> Result<Var<'t>> {
        let (h, a) = (self.value(), att.value());
        let (k_heads, dh) = a.dim();
        if k_heads == 0 || h.ncols() != k_heads * dh {
            return Err(shape_err("head_dot", &h, &a));
        }
        let mut v = Matrix::zeros((h.nrows(), k_heads));
        for (mut orow, hrow) in v.rows_mut().into_iter().zip(h.rows()) {
            for k in 0..k_heads {
                orow[k] = (0..dh).map(|t| hrow[k * dh + t] * a[[k, t]]).sum();
            }
        }
        Ok(self.unary(v, Op::HeadDot(self.id, att.id)))
    }

    /// Edge scores `out[p, k] = src[i, k] + dst[j, k]` for every stored
    /// edge `p = (i, j)` of `pattern`.
    pub fn edge_score(self, dst: Var<'t>, pattern: Arc<CsrPattern>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&dst, "edge_score")?;
        if pattern.rows() != a.nrows() || pattern.cols() > b.nrows() {
            return Err(Error::Shape {
                op: "edge_score",
                lhs: a.dim(),
                rhs: (pattern.rows(), pattern.cols()),
            });
        }
        let k = a.ncols();
        let mut v = Matrix::zeros((pattern.nnz(), k));
        for i in 0..pattern.rows() {
            for p in pattern.row_range(i) {
                let j = pattern.indices()[p];
                for h in 0..k {
                    v[[p, h]] = a[[i, h]] + b[[j, h]];
                }
            }
        }
        Ok(self.unary(v, Op::EdgeScore(self.id, dst.id, pattern)))
    }

    /// Softmax over the edges of each row, independently per column.
    pub fn segment_softmax(self, pattern: Arc<CsrPattern>) -> Result<Var<'t>> {
        let x = self.value();
        if x.nrows() != pattern.nnz() {
            return Err(Error::Shape {
                op: "segment_softmax",
                lhs: x.dim(),
                rhs: (pattern.nnz(), x.ncols()),
            });
        }
        let mut v = (*x).clone();
        for i in 0..pattern.rows() {
            let r = pattern.row_range(i);
            if r.is_empty() {
                continue;
            }
            for h in 0..v.ncols() {
                let m = r.clone().fold(f64::NEG_INFINITY, |m, p| m.max(v[[p, h]]));
                let mut total = 0.0;
                for p in r.clone() {
                    let e = (v[[p, h]] - m).exp();
                    v[[p, h]] = e;
                    total += e;
                }
                for p in r.clone() {
                    v[[p, h]] /= total;
                }
            }
        }
        Ok(self.unary(v, Op::SegmentSoftmax(self.id, pattern)))
    }

    /// Attention-weighted neighbor sums. `self` holds E×K edge weights,
    /// `h` is N×(K·d); head `k` of row `i` is `Σ_p alpha[p,k] · h[j, k-block]`.
    pub fn edge_aggregate(self, h: Var<'t>, pattern: Arc<CsrPattern>) -> Result<Var<'t>> {
        let (alpha, hv) = (self.value(), h.value());
        let k_heads = alpha.ncols();
        if alpha.nrows() != pattern.nnz() || k_heads == 0 || hv.ncols() % k_heads != 0 {
            return Err(shape_err("edge_aggregate", &alpha, &hv));
        }
        let dh = hv.ncols() / k_heads;
        let mut v = Matrix::zeros((pattern.rows(), hv.ncols()));
        for i in 0..pattern.rows() {
            let mut orow = v.row_mut(i);
            for p in pattern.row_range(i) {
                let j = pattern.indices()[p];
                let hrow = hv.row(j);
                for k in 0..k_heads {
                    let a = alpha[[p, k]];
                    for c in k * dh..(k + 1) * dh {
                        orow[c] += a * hrow[c];
                    }
                }
            }
        }
        Ok(self.unary(v, Op::EdgeAggregate(self.id, h.id, pattern)))
    }

    /// `out[p] = ⟨self_i, other_j⟩` for every stored edge `p = (i, j)`; E×1.
    pub fn edge_dot(self, other: Var<'t>, pattern: Arc<CsrPattern>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.ncols() != b.ncols() || pattern.rows() != a.nrows() || pattern.cols() > b.nrows() {
            return Err(shape_err("edge_dot", &a, &b));
        }
        let mut v = Matrix::zeros((pattern.nnz(), 1));
        for i in 0..pattern.rows() {
            for p in pattern.row_range(i) {
                v[[p, 0]] = a.row(i).dot(&b.row(pattern.indices()[p]));
            }
        }
        Ok(self.unary(v, Op::EdgeDot(self.id, other.id, pattern)))
    }

    /// Sums an E×1 edge vector within each row of `pattern`; N×1.
    pub fn segment_sum(self, pattern: Arc<CsrPattern>) -> Result<Var<'t>> {
        let x = self.value();
        if x.dim() != (pattern.nnz(), 1) {
            return Err(Error::Shape {
                op: "segment_sum",
                lhs: x.dim(),
                rhs: (pattern.nnz(), 1),
            });
        }
        let mut v = Matrix::zeros((pattern.rows(), 1));
        for i in 0..pattern.rows() {
            v[[i, 0]] = pattern.row_range(i).map(|p| x[[p, 0]]).sum();
        }
        Ok(self.unary(v, Op::SegmentSum(self.id, pattern)))
    }

    /// Log-sum-exp of an E×1 edge vector within each row; empty rows give -inf.
    pub fn segment_logsumexp(self, pattern: Arc<CsrPattern>) -> Result<Var<'t>> {
        let x = self.value();
        if x.dim() != (pattern.nnz(), 1) {
            return Err(Error::Shape {
                op: "segment_logsumexp",
                lhs: x.dim(),
                rhs: (pattern.nnz(), 1),
            });
        }
        let mut v = Matrix::zeros((pattern.rows(), 1));
        for i in 0..pattern.rows() {
            let r = pattern.row_range(i);
            v[[i, 0]] = row_lse(x.slice(s![r, 0]));
        }
        Ok(self.unary(v, Op::SegmentLse(self.id, pattern)))
    }

    /// Row-wise log-sum-exp of `scale · self · candᵀ` with excluded entries
    /// removed, where `cand` is `other` restricted to the rows in `cols`
    /// (all rows when `None`). Exclusions are keyed by original row ids of
    /// `other`. Output is N×1.
    pub fn product_logsumexp(
        self,
        other: Var<'t>,
        scale: f64,
        cols: Option<Arc<Vec<usize>>>,
        exclusion: Exclusion,
    ) -> Result<Var<'t>> {
        self.product_lse(other, scale, cols, exclusion, false)
    }

    /// Like [`Var::product_logsumexp`] without subsampling, additionally
    /// returning column log-sum-exps: column 0 holds the row values and
    /// column 1 the column values (which equal the row values of the
    /// swapped product for the symmetric exclusions). Needs square output.
    pub fn product_logsumexp_both(self, other: Var<'t>, scale: f64, exclusion: Exclusion) -> Result<Var<'t>> {
        self.product_lse(other, scale, None, exclusion, true)
    }

    fn product_lse(
        self,
        other: Var<'t>,
        scale: f64,
        cols: Option<Arc<Vec<usize>>>,
        exclusion: Exclusion,
        both: bool,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.ncols() != b.ncols() {
            return Err(shape_err("product_logsumexp", &a, &b));
        }
        if both && a.nrows() != b.nrows() {
            return Err(shape_err("product_logsumexp_both", &a, &b));
        }
        if let Some(c) = cols.as_deref() {
            if c.iter().any(|&id| id >= b.nrows()) {
                return Err(Error::InvalidArgument("candidate column out of range".into()));
            }
        }
        if !matches!(exclusion, Exclusion::None) && a.nrows() > b.nrows() {
            return Err(shape_err("product_logsumexp exclusion", &a, &b));
        }
        let mut p = ProductLse {
            a: self.id,
            b: other.id,
            scale,
            cols,
            exclusion,
            both,
            scores: None,
        };
        let bytes = a.nrows() * p.cols.as_ref().map_or(b.nrows(), |c| c.len()) * std::mem::size_of::<f64>();
        let left = self.tape.cache_left.get();
        let keep = (self.requires_grad() || other.requires_grad()) && bytes <= left;
        if keep {
            self.tape.cache_left.set(left - bytes);
        }
        let (v, scores) = product_lse_forward(&p, &a, &b, keep);
        p.scores = scores;
        Ok(self.unary(v, Op::ProductLse(p)))
    }
}

/// Cosine similarity of every row of `a` with every row of `b` (n×m).
pub fn cosine_similarity_matrix<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    a.row_normalize()?.matmul_nt(b.row_normalize()?)
}
