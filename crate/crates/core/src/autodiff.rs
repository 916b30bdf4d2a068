//! Tensor-level reverse-mode differentiation.
//!
//! Every node holds a dense real matrix. Edge tensors of a bipartite
//! antenna/user graph are stored as `(B * R * C) x J` matrices: `B` stacked
//! samples, `R` antenna rows and `C` user columns, edge `(b, r, c)` at row
//! `(b * R + r) * C + c`. Complex features are interleaved column pairs
//! `(re, im)`.
//!
//! ```
//! use ndarray::array;
//! use precoding_gnn::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let w = tape.leaf(array![[1.0, 2.0]]);
//! let x = tape.constant(array![[3.0, 4.0]]);
//! let y = tape.sum(tape.matmul_nt(x, w));
//! let grads = tape.backward(y);
//! assert_eq!(tape.value(y)[[0, 0]], 11.0);
//! assert_eq!(grads.get(w), &array![[3.0, 4.0]]);
//! ```

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use num_complex::Complex;

use crate::linalg::ComplexMatrix;
use crate::scalar::Real;
use crate::scenario::MultiCellChannel;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Edge grid geometry: `batch` samples of `rows` antennas by `cols` users.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { batch: 1, rows, cols }
    }

    pub fn batched(batch: usize, rows: usize, cols: usize) -> Self {
        Self { batch, rows, cols }
    }

    /// Edges of one sample.
    pub fn sample_edges(&self) -> usize {
        self.rows * self.cols
    }

    pub fn edges(&self) -> usize {
        self.batch * self.rows * self.cols
    }
}

/// Channels of a batch, one per stacked sample.
pub type ChannelBatch<T> = Arc<Vec<ComplexMatrix<T>>>;
pub type MultiCellBatch<T> = Arc<Vec<MultiCellChannel<T>>>;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`.
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var, T),
    AddRow(Var, Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    SumRows(Var, Grid, usize),
    BroadcastRows(Var, Grid, usize),
    SumCols(Var, Grid, usize),
    BroadcastCols(Var, Grid, usize),
    MaxPoolExcl { x: Var, argmax: Vec<Option<usize>> },
    TaylorProduct { x: Var, h: ChannelBatch<T>, grid: Grid, group: usize },
    Normalize { x: Var, block_rows: usize, scale: T, eps: T, norms: Vec<T> },
    ProjectPower { x: Var, block_rows: usize, p: T, norms: Vec<T> },
    Tanh(Var),
    Softplus(Var),
    Relu(Var),
    Sum(Var),
    FrobSq(Var),
    MulScalar(Var, Var),
    Div(Var, Var),
    Rates { v: Var, h: MultiCellBatch<T>, sigma2: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
}

/// Records operations for one reverse sweep. Not `Sync`; use one tape per
/// thread.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients of a scalar with respect to every node of a tape. Nodes the
/// output does not depend on get an empty `0 x 0` gradient.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Array2<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> &Array2<T> {
        &self.grads[v.0]
    }

    pub fn take(&mut self, v: Var) -> Array2<T> {
        std::mem::replace(&mut self.grads[v.0], Array2::zeros((0, 0)))
    }
}

/// Reads feature pair `t` of `rows x cols` edges starting at row `base`.
fn complex_block<T: Real>(x: &Array2<T>, base: usize, rows: usize, cols: usize, t: usize) -> ComplexMatrix<T> {
    ComplexMatrix::from_fn(rows, cols, |r, k| {
        let e = base + r * cols + k;
        Complex::new(x[[e, 2 * t]], x[[e, 2 * t + 1]])
    })
}

fn write_complex_block<T: Real>(out: &mut Array2<T>, m: &ComplexMatrix<T>, base: usize, t: usize) {
    let (rows, cols) = m.shape();
    for r in 0..rows {
        for k in 0..cols {
            let e = base + r * cols + k;
            let z = m[(r, k)];
            out[[e, 2 * t]] = z.re;
            out[[e, 2 * t + 1]] = z.im;
        }
    }
}

fn scalar<T: Real>(a: &Array2<T>) -> T {
    debug_assert_eq!(a.dim(), (1, 1));
    a[[0, 0]]
}

fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow.
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn block_norms<T: Real>(x: &Array2<T>, block_rows: usize) -> Vec<T> {
    assert!(block_rows > 0 && x.nrows().is_multiple_of(block_rows), "rows must split into blocks");
    x.axis_chunks_iter(Axis(0), block_rows).map(|b| b.iter().map(|v| *v * *v).sum::<T>().sqrt()).collect()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Input whose gradient is computed but typically ignored.
    pub fn constant(&self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_const(&self, value: T) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Copy of a node's value.
    pub fn value(&self, v: Var) -> Array2<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        scalar(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    fn unary(&self, a: Var, f: impl FnOnce(&Array2<T>) -> (Array2<T>, Op<T>)) -> Var {
        let (value, op) = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value)
        };
        self.push(value, op)
    }

    fn binary(&self, a: Var, b: Var, f: impl FnOnce(&Array2<T>, &Array2<T>) -> Array2<T>, op: Op<T>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        self.push(value, op)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.dot(y), Op::MatMul(a, b))
    }

    /// `a * b^T`, the layout used for weight matrices `J_out x J_in`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.dot(&y.t()), Op::MatMulNt(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Sums a non-empty list of same-shaped nodes.
    pub fn add_all(&self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        self.unary(a, |x| (x * c, Op::Scale(a, c)))
    }

    pub fn add_const(&self, a: Var, c: T) -> Var {
        self.unary(a, |x| (x + c, Op::AddConst(a, c)))
    }

    /// Adds a `1 x J` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        self.binary(a, row, |x, r| x + &r.row(0), Op::AddRow(a, row))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| ndarray::concatenate(Axis(1), &[x.view(), y.view()]).expect("row counts agree"),
            Op::ConcatCols(a, b),
        )
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        self.unary(a, |x| (x.slice(s![.., start..start + len]).to_owned(), Op::SliceCols(a, start)))
    }

    pub fn gather_rows(&self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        self.unary(a, |x| {
            let mut out = Array2::zeros((idx.len(), x.ncols()));
            for (i, &src) in idx.iter().enumerate() {
                out.row_mut(i).assign(&x.row(src));
            }
            (out, Op::GatherRows(a, idx.clone()))
        })
    }

    /// Sums antenna rows within consecutive groups of `group` rows of each
    /// sample; the result is an edge tensor on `batch x (rows / group) x cols`.
    pub fn sum_rows(&self, a: Var, grid: Grid, group: usize) -> Var {
        self.unary(a, |x| (sum_rows_impl(x, grid, group), Op::SumRows(a, grid, group)))
    }

    /// Adjoint of [`Tape::sum_rows`]: copies each group sum back to its edges.
    pub fn broadcast_rows(&self, a: Var, grid: Grid, group: usize) -> Var {
        self.unary(a, |x| (broadcast_rows_impl(x, grid, group), Op::BroadcastRows(a, grid, group)))
    }

    /// Sums user columns within consecutive groups of `group` columns; the
    /// result lives on `batch x rows x (cols / group)`.
    pub fn sum_cols(&self, a: Var, grid: Grid, group: usize) -> Var {
        self.unary(a, |x| (sum_cols_impl(x, grid, group), Op::SumCols(a, grid, group)))
    }

    pub fn broadcast_cols(&self, a: Var, grid: Grid, group: usize) -> Var {
        self.unary(a, |x| (broadcast_cols_impl(x, grid, group), Op::BroadcastCols(a, grid, group)))
    }

    /// Elementwise max over the other antennas (`along_rows`) or the other
    /// users of each edge; zero when there is no other.
    pub fn max_pool_excl(&self, a: Var, grid: Grid, along_rows: bool) -> Var {
        self.unary(a, |x| {
            let j = x.ncols();
            let mut out = Array2::zeros(x.dim());
            let mut argmax = vec![None; x.len()];
            let (rows, cols) = (grid.rows, grid.cols);
            for b in 0..grid.batch {
                let base = b * rows * cols;
                for r in 0..rows {
                    for c in 0..cols {
                        let e = base + r * cols + c;
                        let count = if along_rows { rows } else { cols };
                        for f in 0..j {
                            let mut best: Option<(usize, T)> = None;
                            for o in 0..count {
                                let src = if along_rows {
                                    if o == r {
                                        continue;
                                    }
                                    base + o * cols + c
                                } else {
                                    if o == c {
                                        continue;
                                    }
                                    base + r * cols + o
                                };
                                let v = x[[src, f]];
                                if best.is_none_or(|(_, m)| v > m) {
                                    best = Some((src, v));
                                }
                            }
                            if let Some((src, v)) = best {
                                out[[e, f]] = v;
                                argmax[e * j + f] = Some(src);
                            }
                        }
                    }
                }
            }
            (out, Op::MaxPoolExcl { x: a, argmax })
        })
    }

    /// For every sample, every group `G` of `group` antenna rows and every
    /// complex feature pair: `D_G (H_G^H D_G)`, where `H_G` holds the matching
    /// rows of that sample's `rows x cols` channel.
    pub fn taylor_product(&self, a: Var, h: ChannelBatch<T>, grid: Grid, group: usize) -> Var {
        assert_eq!(h.len(), grid.batch, "one channel per sample");
        assert!(h.iter().all(|m| m.shape() == (grid.rows, grid.cols)), "channel must cover the edge grid");
        assert_eq!(grid.rows % group, 0);
        self.unary(a, |x| {
            let pairs = x.ncols() / 2;
            let mut out = Array2::zeros(x.dim());
            for (b, hb) in h.iter().enumerate() {
                for g in 0..grid.rows / group {
                    let base = (b * grid.rows + g * group) * grid.cols;
                    let hg = h_rows(hb, g * group, group);
                    for t in 0..pairs {
                        let d = complex_block(x, base, group, grid.cols, t);
                        let am = hg.adjoint_mul(&d).expect("conformable");
                        write_complex_block(&mut out, &d.matmul(&am).expect("conformable"), base, t);
                    }
                }
            }
            (out, Op::TaylorProduct { x: a, h: h.clone(), grid, group })
        })
    }

    /// `scale * x_b / (||x_b||_F + eps)` for each block of `block_rows`
    /// consecutive rows.
    pub fn normalize(&self, a: Var, block_rows: usize, scale: T, eps: T) -> Var {
        self.unary(a, |x| {
            let norms = block_norms(x, block_rows);
            let mut out = x.clone();
            for (mut blk, n) in out.axis_chunks_iter_mut(Axis(0), block_rows).zip(&norms) {
                let f = scale / (*n + eps);
                blk.mapv_inplace(|v| v * f);
            }
            (out, Op::Normalize { x: a, block_rows, scale, eps, norms })
        })
    }

    /// Per block of `block_rows` rows: identity when `||x_b||^2 <= p`, else
    /// `sqrt(p) x_b / ||x_b||`.
    pub fn project_power(&self, a: Var, block_rows: usize, p: T) -> Var {
        self.unary(a, |x| {
            let norms = block_norms(x, block_rows);
            let mut out = x.clone();
            for (mut blk, n) in out.axis_chunks_iter_mut(Axis(0), block_rows).zip(&norms) {
                if *n * *n > p {
                    let f = p.sqrt() / *n;
                    blk.mapv_inplace(|v| v * f);
                }
            }
            (out, Op::ProjectPower { x: a, block_rows, p, norms })
        })
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| (x.mapv(T::tanh), Op::Tanh(a)))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, |x| (x.mapv(softplus), Op::Softplus(a)))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| (x.mapv(|v| v.max(T::zero())), Op::Relu(a)))
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, |x| (Array2::from_elem((1, 1), x.sum()), Op::Sum(a)))
    }

    pub fn mean(&self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize_lossy(r * c))
    }

    /// Squared Frobenius norm as a `1 x 1` node.
    pub fn frob_sq(&self, a: Var) -> Var {
        self.unary(a, |x| (Array2::from_elem((1, 1), x.iter().map(|v| *v * *v).sum()), Op::FrobSq(a)))
    }

    /// `s * a` for a `1 x 1` node `s`.
    pub fn mul_scalar(&self, s: Var, a: Var) -> Var {
        self.binary(s, a, |sv, x| x * scalar(sv), Op::MulScalar(s, a))
    }

    /// Elementwise `a / b`.
    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Rates `log2(1 + SINR)` as a `B x (M K)` matrix, users ordered
    /// cell-major. `v` stacks, for each sample and BS, the `N x K` precoder
    /// edges, giving `(B M N K) x 2`.
    pub fn rates(&self, v: Var, h: MultiCellBatch<T>, sigma2: T) -> Var {
        self.unary(v, |x| {
            let users = h[0].cells() * h[0].users();
            let mut out = Array2::zeros((h.len(), users));
            for (b, hb) in h.iter().enumerate() {
                let vs = sample_precoders(x, hb, b);
                let r = crate::wmmse::sum_rate_multicell(hb, &vs, sigma2).expect("shapes fixed by construction");
                for (u, val) in r.per_user.into_iter().enumerate() {
                    out[[b, u]] = val;
                }
            }
            (out, Op::Rates { v, h: h.clone(), sigma2 })
        })
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.0].value.dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::from_elem((1, 1), T::one()));
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, d: Array2<T>| match &mut grads[v.0] {
                Some(e) => *e += &d,
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&val(*b).t()));
                    acc(*b, val(*a).t().dot(&g));
                }
                Op::MatMulNt(a, b) => {
                    acc(*a, g.dot(val(*b)));
                    acc(*b, g.t().dot(val(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.mapv(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * val(*b));
                    acc(*b, &g * val(*a));
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::AddConst(a, _) => acc(*a, g),
                Op::AddRow(a, r) => {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::ConcatCols(a, b) => {
                    let ja = val(*a).ncols();
                    acc(*a, g.slice(s![.., ..ja]).to_owned());
                    acc(*b, g.slice(s![.., ja..]).to_owned());
                }
                Op::SliceCols(a, start) => {
                    let mut full = Array2::zeros(val(*a).dim());
                    full.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*a, full);
                }
                Op::GatherRows(a, idx) => {
                    let mut full = Array2::zeros(val(*a).dim());
                    for (i, &src) in idx.iter().enumerate() {
                        let mut row = full.row_mut(src);
                        row += &g.row(i);
                    }
                    acc(*a, full);
                }
                Op::SumRows(a, grid, group) => acc(*a, broadcast_rows_impl(&g, *grid, *group)),
                Op::BroadcastRows(a, grid, group) => acc(*a, sum_rows_impl(&g, *grid, *group)),
                Op::SumCols(a, grid, group) => acc(*a, broadcast_cols_impl(&g, *grid, *group)),
                Op::BroadcastCols(a, grid, group) => acc(*a, sum_cols_impl(&g, *grid, *group)),
                Op::MaxPoolExcl { x, argmax } => {
                    let j = g.ncols();
                    let mut full = Array2::zeros(val(*x).dim());
                    for (i, src) in argmax.iter().enumerate() {
                        if let Some(o) = src {
                            full[[*o, i % j]] += g[[i / j, i % j]];
                        }
                    }
                    acc(*x, full);
                }
                Op::TaylorProduct { x, h, grid, group } => {
                    let xv = val(*x);
                    let pairs = xv.ncols() / 2;
                    let mut full = Array2::zeros(xv.dim());
                    for (b, hb) in h.iter().enumerate() {
                        for gi in 0..grid.rows / group {
                            let base = (b * grid.rows + gi * group) * grid.cols;
                            let hg = h_rows(hb, gi * group, *group);
                            for t in 0..pairs {
                                let d = complex_block(xv, base, *group, grid.cols, t);
                                let gb = complex_block(&g, base, *group, grid.cols, t);
                                // Out = D A with A = H^H D: dL/dD = G A^H + H (D^H G).
                                let am = hg.adjoint_mul(&d).expect("conformable");
                                let t1 = gb.matmul(&am.adjoint()).expect("conformable");
                                let t2 = hg.matmul(&d.adjoint_mul(&gb).expect("conformable")).expect("conformable");
                                write_complex_block(&mut full, &t1.add(&t2).expect("same shape"), base, t);
                            }
                        }
                    }
                    acc(*x, full);
                }
                Op::Normalize { x, block_rows, scale, eps, norms } => {
                    let xv = val(*x);
                    let mut full = g;
                    for ((mut blk, xb), n) in full
                        .axis_chunks_iter_mut(Axis(0), *block_rows)
                        .zip(xv.axis_chunks_iter(Axis(0), *block_rows))
                        .zip(norms)
                    {
                        let c = *n + *eps;
                        // s/c (g - x <g, x> / (c |x|))
                        let inner: T = blk.iter().zip(xb.iter()).map(|(a, b)| *a * *b).sum();
                        let coef = if *n > T::zero() { inner / (c * *n) } else { T::zero() };
                        blk.zip_mut_with(&xb, |gv, xv| *gv = (*gv - *xv * coef) * *scale / c);
                    }
                    acc(*x, full);
                }
                Op::ProjectPower { x, block_rows, p, norms } => {
                    let xv = val(*x);
                    let mut full = g;
                    for ((mut blk, xb), n) in full
                        .axis_chunks_iter_mut(Axis(0), *block_rows)
                        .zip(xv.axis_chunks_iter(Axis(0), *block_rows))
                        .zip(norms)
                    {
                        if *n * *n > *p {
                            let inner: T = blk.iter().zip(xb.iter()).map(|(a, b)| *a * *b).sum();
                            let coef = inner / (*n * *n);
                            let f = p.sqrt() / *n;
                            blk.zip_mut_with(&xb, |gv, xv| *gv = (*gv - *xv * coef) * f);
                        }
                    }
                    acc(*x, full);
                }
                Op::Tanh(a) => acc(*a, &g * &node.value.mapv(|t| T::one() - t * t)),
                Op::Softplus(a) => acc(*a, &g * &val(*a).mapv(sigmoid)),
                Op::Relu(a) => acc(*a, &g * &val(*a).mapv(|v| if v > T::zero() { T::one() } else { T::zero() })),
                Op::Sum(a) => acc(*a, Array2::from_elem(val(*a).dim(), scalar(&g))),
                Op::FrobSq(a) => acc(*a, val(*a) * (T::lit(2.0) * scalar(&g))),
                Op::MulScalar(sv, a) => {
                    let av = val(*a);
                    let inner: T = g.iter().zip(av.iter()).map(|(x, y)| *x * *y).sum();
                    acc(*sv, Array2::from_elem((1, 1), inner));
                    acc(*a, &g * scalar(val(*sv)));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let gb = (&g * av / (bv * bv)).mapv(|v| -v);
                    acc(*a, &g / bv);
                    acc(*b, gb);
                }
                Op::Rates { v, h, sigma2 } => acc(*v, rates_backward(val(*v), h, *sigma2, &g)),
            }
        }
        Gradients { grads: grads.into_iter().map(|g| g.unwrap_or_else(|| Array2::zeros((0, 0)))).collect() }
    }
}

fn h_rows<T: Real>(h: &ComplexMatrix<T>, row0: usize, rows: usize) -> ComplexMatrix<T> {
    ComplexMatrix::from_fn(rows, h.cols(), |r, c| h[(row0 + r, c)])
}

fn sum_rows_impl<T: Real>(x: &Array2<T>, grid: Grid, group: usize) -> Array2<T> {
    let groups = grid.rows / group;
    let cols = grid.cols;
    let mut out = Array2::zeros((grid.batch * groups * cols, x.ncols()));
    for b in 0..grid.batch {
        for r in 0..grid.rows {
            let src = (b * grid.rows + r) * cols;
            let dst = (b * groups + r / group) * cols;
            let mut d = out.slice_mut(s![dst..dst + cols, ..]);
            d += &x.slice(s![src..src + cols, ..]);
        }
    }
    out
}

fn broadcast_rows_impl<T: Real>(y: &Array2<T>, grid: Grid, group: usize) -> Array2<T> {
    let groups = grid.rows / group;
    let cols = grid.cols;
    let mut out = Array2::zeros((grid.edges(), y.ncols()));
    for b in 0..grid.batch {
        for r in 0..grid.rows {
            let dst = (b * grid.rows + r) * cols;
            let src = (b * groups + r / group) * cols;
            out.slice_mut(s![dst..dst + cols, ..]).assign(&y.slice(s![src..src + cols, ..]));
        }
    }
    out
}

fn sum_cols_impl<T: Real>(x: &Array2<T>, grid: Grid, group: usize) -> Array2<T> {
    let groups = grid.cols / group;
    let mut out = Array2::zeros((grid.batch * grid.rows * groups, x.ncols()));
    for br in 0..grid.batch * grid.rows {
        for c in 0..grid.cols {
            let mut dst = out.row_mut(br * groups + c / group);
            dst += &x.row(br * grid.cols + c);
        }
    }
    out
}

fn broadcast_cols_impl<T: Real>(y: &Array2<T>, grid: Grid, group: usize) -> Array2<T> {
    let groups = grid.cols / group;
    let mut out = Array2::zeros((grid.edges(), y.ncols()));
    for br in 0..grid.batch * grid.rows {
        for c in 0..grid.cols {
            out.row_mut(br * grid.cols + c).assign(&y.row(br * groups + c / group));
        }
    }
    out
}

fn sample_precoders<T: Real>(x: &Array2<T>, h: &MultiCellChannel<T>, b: usize) -> Vec<ComplexMatrix<T>> {
    let (m, n, k) = (h.cells(), h.antennas(), h.users());
    (0..m).map(|i| complex_block(x, ((b * m + i) * n) * k, n, k, 0)).collect()
}

/// Splits `(B M N K) x 2` edge rows into per-sample, per-BS `N x K`
/// complex precoders.
pub fn precoders_from_edges<T: Real>(x: &Array2<T>, h: &[MultiCellChannel<T>]) -> Vec<Vec<ComplexMatrix<T>>> {
    h.iter().enumerate().map(|(b, hb)| sample_precoders(x, hb, b)).collect()
}

/// Inverse of [`precoders_from_edges`] for one sample.
pub fn edges_from_precoders<T: Real>(vs: &[ComplexMatrix<T>]) -> Array2<T> {
    let (n, k) = vs[0].shape();
    let mut out = Array2::zeros((vs.len() * n * k, 2));
    for (i, v) in vs.iter().enumerate() {
        write_complex_block(&mut out, v, i * n * k, 0);
    }
    out
}

/// Edge tensor `(R C) x 2` holding `[Re, Im]` of each channel entry.
pub fn edges_from_complex<T: Real>(h: &ComplexMatrix<T>) -> Array2<T> {
    let mut out = Array2::zeros((h.rows() * h.cols(), 2));
    write_complex_block(&mut out, h, 0, 0);
    out
}

/// Stacks the edge tensors of several same-shaped channels.
pub fn edges_from_batch<T: Real>(hs: &[ComplexMatrix<T>]) -> Array2<T> {
    let blocks: Vec<_> = hs.iter().map(edges_from_complex).collect();
    let views: Vec<_> = blocks.iter().map(|a| a.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("same feature width")
}

/// Feature pair `t` of sample `b` as a complex `rows x cols` matrix.
pub fn complex_from_edges<T: Real>(x: &Array2<T>, grid: Grid, b: usize, t: usize) -> ComplexMatrix<T> {
    complex_block(x, b * grid.sample_edges(), grid.rows, grid.cols, t)
}

fn rates_backward<T: Real>(x: &Array2<T>, hs: &[MultiCellChannel<T>], sigma2: T, g: &Array2<T>) -> Array2<T> {
    let mut out = Array2::zeros(x.dim());
    let ln2 = T::LN_2();
    for (b, h) in hs.iter().enumerate() {
        let (m, n, k) = (h.cells(), h.antennas(), h.users());
        let vs = sample_precoders(x, h, b);
        let mut gv: Vec<ComplexMatrix<T>> = (0..m).map(|_| ComplexMatrix::zeros(n, k)).collect();
        for cell in 0..m {
            let z: Vec<ComplexMatrix<T>> =
                (0..m).map(|i| h.block(i, cell).adjoint_mul(&vs[i]).expect("conformable")).collect();
            for u in 0..k {
                let gr = g[[b, cell * k + u]];
                if gr == T::zero() {
                    continue;
                }
                let total: T = z.iter().map(|zi| (0..k).map(|j| zi[(u, j)].norm_sqr()).sum::<T>()).sum::<T>() + sigma2;
                let interference = total - z[cell][(u, u)].norm_sqr();
                // R = log2(total) - log2(interference), d|z|^2 / d(re, im) = 2 z.
                for (i, zi) in z.iter().enumerate() {
                    let blk = h.block(i, cell);
                    for j in 0..k {
                        let mut coef = T::lit(2.0) / total;
                        if !(i == cell && j == u) {
                            coef -= T::lit(2.0) / interference;
                        }
                        let gz = zi[(u, j)] * (coef * gr / ln2);
                        // z = h^H v, so dL/dv += h dL/dz.
                        for r in 0..n {
                            gv[i][(r, j)] += blk[(r, u)] * gz;
                        }
                    }
                }
            }
        }
        let base = b * m * n * k;
        for (i, gvi) in gv.iter().enumerate() {
            write_complex_block(&mut out, gvi, base + i * n * k, 0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((r, c), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    fn rand_complex(r: usize, c: usize, rng: &mut ChaCha8Rng) -> ComplexMatrix<f64> {
        ComplexMatrix::from_fn(r, c, |_, _| Complex::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
    }

    /// Central-difference check of d(build(x))/dx for a scalar-valued graph.
    fn check(x0: Array2<f64>, build: impl Fn(&Tape<f64>, Var) -> Var) {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&tape, x);
        let g = tape.backward(y).get(x).clone();
        let eval = |xv: Array2<f64>| {
            let t = Tape::new();
            let v = t.leaf(xv);
            let out = build(&t, v);
            t.scalar_value(out)
        };
        let step = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let mut xp = x0.clone();
            xp[[r, c]] += step;
            let mut xm = x0.clone();
            xm[[r, c]] -= step;
            let fd = (eval(xp) - eval(xm)) / (2.0 * step);
            let an = g[[r, c]];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "entry {idx}: fd {fd} vs ad {an}");
        }
    }

    fn weighted_sum(t: &Tape<f64>, y: Var, seed: u64) -> Var {
        let (r, c) = t.shape(y);
        let w = t.constant(rand_arr(r, c, seed));
        t.sum(t.mul(y, w))
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(rand_arr(2, 2, 1));
        let y = tape.sum(tape.scale(x, 0.0));
        let g = tape.backward(y);
        assert!(g.get(x).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let x0 = rand_arr(3, 2, 2);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = tape.scale(tape.frob_sq(x), 0.5);
        let g = tape.backward(y);
        assert!((g.get(x) - &x0).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn unused_nodes_get_empty_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(rand_arr(2, 2, 3));
        let unused = tape.leaf(rand_arr(2, 2, 4));
        let g = tape.backward(tape.sum(x));
        assert_eq!(g.get(unused).dim(), (0, 0));
    }

    #[test]
    fn grad_matmul_and_rows() {
        let w = rand_arr(3, 4, 3);
        check(rand_arr(5, 4, 4), |t, x| {
            let y = t.matmul_nt(x, t.constant(w.clone()));
            let y = t.add_row(y, t.constant(rand_arr(1, 3, 5)));
            weighted_sum(t, t.tanh(y), 6)
        });
        check(rand_arr(3, 4, 7), |t, wv| {
            let y = t.matmul_nt(t.constant(rand_arr(5, 4, 8)), wv);
            weighted_sum(t, t.softplus(y), 9)
        });
        check(rand_arr(4, 3, 10), |t, x| weighted_sum(t, t.matmul(x, t.constant(rand_arr(3, 2, 11))), 12));
        check(rand_arr(1, 3, 13), |t, b| weighted_sum(t, t.add_row(t.constant(rand_arr(4, 3, 14)), b), 15));
    }

    #[test]
    fn grad_grid_aggregations() {
        for grid in [Grid::new(4, 6), Grid::batched(2, 4, 6)] {
            for (group_r, group_c) in [(4, 6), (2, 3), (1, 2)] {
                check(rand_arr(grid.edges(), 3, 13), |t, x| {
                    let a = t.broadcast_rows(t.tanh(t.sum_rows(x, grid, group_r)), grid, group_r);
                    let b = t.broadcast_cols(t.tanh(t.sum_cols(x, grid, group_c)), grid, group_c);
                    weighted_sum(t, t.add(a, b), 14)
                });
            }
        }
    }

    #[test]
    fn grid_sums_match_loops() {
        let grid = Grid::batched(2, 4, 6);
        let x = rand_arr(48, 2, 15);
        let t = Tape::new();
        let v = t.leaf(x.clone());
        let rs = t.value(t.sum_rows(v, grid, 2));
        let cs = t.value(t.sum_cols(v, grid, 3));
        assert_eq!(rs.nrows(), 2 * 2 * 6);
        assert_eq!(cs.nrows(), 2 * 4 * 2);
        let at = |b: usize, r: usize, c: usize, f: usize| x[[(b * 4 + r) * 6 + c, f]];
        for b in 0..2 {
            for g in 0..2 {
                for c in 0..6 {
                    let expect = at(b, 2 * g, c, 1) + at(b, 2 * g + 1, c, 1);
                    assert!((rs[[(b * 2 + g) * 6 + c, 1]] - expect).abs() < 1e-15);
                }
            }
            for r in 0..4 {
                for g in 0..2 {
                    let expect: f64 = (0..3).map(|j| at(b, r, g * 3 + j, 0)).sum();
                    assert!((cs[[(b * 4 + r) * 2 + g, 0]] - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn grad_concat_slice_gather() {
        check(rand_arr(4, 3, 16), |t, x| {
            let y = t.concat_cols(x, t.tanh(x));
            let z = t.slice_cols(y, 2, 3);
            weighted_sum(t, t.gather_rows(z, Arc::new(vec![3, 0, 0, 2])), 17)
        });
    }

    #[test]
    fn grad_max_pool() {
        let grid = Grid::batched(2, 3, 4);
        for along in [true, false] {
            check(rand_arr(24, 2, 18), |t, x| weighted_sum(t, t.max_pool_excl(x, grid, along), 19));
        }
    }

    #[test]
    fn max_pool_without_neighbors_is_zero() {
        let t = Tape::new();
        let x = t.leaf(rand_arr(3, 2, 1));
        let y = t.value(t.max_pool_excl(x, Grid::new(1, 3), true));
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn taylor_product_matches_matrix_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let h = rand_complex(4, 3, &mut rng);
        let d = rand_complex(4, 3, &mut rng);
        let t = Tape::new();
        let x = t.leaf(edges_from_complex(&d));
        let out = t.value(t.taylor_product(x, Arc::new(vec![h.clone()]), Grid::new(4, 3), 4));
        let expect = d.matmul(&h.adjoint_mul(&d).unwrap()).unwrap();
        let got = complex_from_edges(&out, Grid::new(4, 3), 0, 0);
        assert!(got.sub(&expect).unwrap().frobenius_norm() < 1e-14);
    }

    #[test]
    fn grad_taylor_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for (batch, rows, cols, group) in [(1, 3, 2, 3), (1, 4, 3, 2), (2, 2, 2, 2)] {
            let h: ChannelBatch<f64> = Arc::new((0..batch).map(|_| rand_complex(rows, cols, &mut rng)).collect());
            let grid = Grid::batched(batch, rows, cols);
            check(rand_arr(grid.edges(), 4, 21), |t, x| {
                weighted_sum(t, t.taylor_product(x, h.clone(), grid, group), 22)
            });
        }
    }

    #[test]
    fn grad_normalize_and_projection() {
        check(rand_arr(6, 2, 23), |t, x| weighted_sum(t, t.normalize(x, 6, 1.0, 1e-12), 24));
        check(rand_arr(6, 2, 25), |t, x| weighted_sum(t, t.normalize(x, 2, 3.0, 1e-12), 26));
        check(rand_arr(6, 2, 27), |t, x| weighted_sum(t, t.project_power(x, 6, 0.5), 28));
        check(rand_arr(6, 2, 29).mapv(|v| v * 0.1), |t, x| weighted_sum(t, t.project_power(x, 6, 10.0), 30));
        // One block above the budget, one below.
        let mut mixed = rand_arr(6, 2, 31);
        mixed.slice_mut(s![3.., ..]).mapv_inplace(|v| v * 0.01);
        check(mixed, |t, x| weighted_sum(t, t.project_power(x, 3, 0.2), 32));
    }

    #[test]
    fn projection_keeps_feasible_blocks() {
        let t = Tape::new();
        let x0: Array2<f64> = array![[3.0, 4.0], [0.1, 0.0]];
        let x = t.leaf(x0.clone());
        let y: Array2<f64> = t.value(t.project_power(x, 1, 1.0));
        assert!((y[[0, 0]] - 0.6).abs() < 1e-15 && (y[[0, 1]] - 0.8).abs() < 1e-15);
        assert_eq!(y.row(1), x0.row(1));
    }

    #[test]
    fn grad_elementwise_and_scalar_ops() {
        check(rand_arr(3, 3, 31), |t, x| {
            let s = t.frob_sq(x);
            let d = t.add_const(t.sum(t.relu(x)), 2.0);
            let q = t.div(s, d);
            weighted_sum(t, t.mul_scalar(q, t.mul(x, x)), 32)
        });
        check(rand_arr(2, 3, 33), |t, x| {
            let den = t.add_const(t.mul(x, x), 1.0);
            weighted_sum(t, t.div(x, den), 34)
        });
    }

    #[test]
    fn grad_rates_single_and_multi_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for (batch, cells) in [(1, 1), (1, 2), (2, 2)] {
            let h: MultiCellBatch<f64> =
                Arc::new((0..batch).map(|_| MultiCellChannel::random(cells, 3, 2, &mut rng).unwrap()).collect());
            check(rand_arr(batch * cells * 6, 2, 34), |t, v| weighted_sum(t, t.rates(v, h.clone(), 0.7), 35));
        }
    }

    #[test]
    fn rates_match_sum_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let hs: Vec<_> = (0..2).map(|_| MultiCellChannel::<f64>::random(1, 4, 3, &mut rng).unwrap()).collect();
        let v = rand_arr(24, 2, 37);
        let t = Tape::new();
        let x = t.leaf(v.clone());
        let r = t.value(t.rates(x, Arc::new(hs.clone()), 0.5));
        let vs = precoders_from_edges(&v, &hs);
        for b in 0..2 {
            let expect = crate::wmmse::sum_rate(hs[b].block(0, 0), &vs[b][0], 0.5).unwrap();
            for (u, e) in expect.per_user.iter().enumerate() {
                assert!((r[[b, u]] - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn edge_layout_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let hs: Vec<_> = (0..2).map(|_| rand_complex(3, 2, &mut rng)).collect();
        let e = edges_from_batch(&hs);
        assert_eq!(e[[1, 1]], hs[0][(0, 1)].im);
        assert_eq!(e[[6 + 3, 0]], hs[1][(1, 1)].re);
        assert_eq!(complex_from_edges(&e, Grid::batched(2, 3, 2), 1, 0), hs[1]);
        let vs = vec![hs[0].clone(), hs[1].clone()];
        let mc = MultiCellChannel::new(1, vec![hs[0].clone()]).unwrap();
        assert_eq!(precoders_from_edges(&edges_from_precoders(&vs), &[mc.clone(), mc])[1][0], hs[1]);
    }
}
