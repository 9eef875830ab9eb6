//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! Every value is a `rows x cols` matrix of `f64`; scalars are `1 x 1` and
//! vectors are `n x 1`. Operations append nodes to a [`Tape`]; calling
//! [`Tape::backward`] on a scalar returns gradients for every parameter leaf.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("variable belongs to a different tape")]
    GraphNotRecorded,
    #[error("backward needs a scalar, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// `out[r] = sum_{i in rows[r]} w[i]`
    SparseRows(Var, Vec<Vec<usize>>),
    AddRowBias(Var, Var),
    LeakyRelu(Var, f64),
    GatherRows(Var, Vec<usize>),
    /// Per-row log-softmax over columns `lo..hi`, masked entries at `-inf`.
    MaskedLogSoftmax {
        x: Var,
        lo: usize,
        hi: usize,
        mask: Vec<bool>,
    },
    /// Flat element gather into a column vector.
    Gather(Var, Vec<usize>),
    SegmentSum(Var, Vec<Vec<usize>>),
    SegmentLogSumExp(Var, Vec<Vec<usize>>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, Vec<f64>),
    AddConst(Var),
    Sum(Var),
    /// Elementwise map with recorded derivative.
    Map(Var, Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to parameter leaves, keyed by the
/// parameter index passed to [`Tape::param`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_param: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, param: usize) -> Option<&[f64]> {
        self.by_param.get(param).and_then(|g| g.as_deref())
    }

    pub fn n_params(&self) -> usize {
        self.by_param.len()
    }

    fn accumulate(&mut self, param: usize, g: &[f64]) {
        if self.by_param.len() <= param {
            self.by_param.resize(param + 1, None);
        }
        match &mut self.by_param[param] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g.to_vec()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        Var { idx: self.nodes.len() - 1, tape: self.id }
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn owns(&self, v: Var) -> bool {
        v.tape == self.id
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols);
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.push(1, 1, vec![value], Op::Leaf)
    }

    pub fn param(&mut self, id: usize, rows: usize, cols: usize, value: &[f64]) -> Var {
        assert_eq!(value.len(), rows * cols);
        self.push(rows, cols, value.to_vec(), Op::Param(id))
    }

    /// Copy of `x` that gradients do not flow through.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let (r, c, v) = (n.rows, n.cols, n.value.clone());
        self.push(r, c, v, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (na, nb) = (self.node(a), self.node(b));
        assert_eq!(na.cols, nb.rows, "matmul shape");
        let (m, k, n) = (na.rows, na.cols, nb.cols);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &na.value, false, &nb.value, false, &mut out, 0.0);
        self.push(m, n, out, Op::MatMul(a, b))
    }

    pub fn sparse_rows(&mut self, w: Var, rows: Vec<Vec<usize>>) -> Var {
        let nw = self.node(w);
        let cols = nw.cols;
        let mut out = vec![0.0; rows.len() * cols];
        for (r, active) in rows.iter().enumerate() {
            let dst = &mut out[r * cols..(r + 1) * cols];
            for &i in active {
                assert!(i < nw.rows, "sparse index out of range");
                let src = &nw.value[i * cols..(i + 1) * cols];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let n = rows.len();
        self.push(n, cols, out, Op::SparseRows(w, rows))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (nx, nb) = (self.node(x), self.node(bias));
        assert_eq!(nb.value.len(), nx.cols, "bias width");
        let cols = nx.cols;
        let mut out = nx.value.clone();
        for row in out.chunks_mut(cols) {
            row.iter_mut().zip(&nb.value).for_each(|(o, b)| *o += b);
        }
        let rows = nx.rows;
        self.push(rows, cols, out, Op::AddRowBias(x, bias))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let n = self.node(x);
        let out = n.value.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let (r, c) = (n.rows, n.cols);
        self.push(r, c, out, Op::LeakyRelu(x, slope))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let n = self.node(x);
        let cols = n.cols;
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            out.extend_from_slice(&n.value[i * cols..(i + 1) * cols]);
        }
        let rows = idx.len();
        self.push(rows, cols, out, Op::GatherRows(x, idx))
    }

    /// Row-wise log-softmax restricted to columns `lo..hi`; `mask` has one
    /// entry per (row, column in range). Masked entries are `-inf`; rows with
    /// no valid entry are all `-inf`.
    pub fn masked_log_softmax(&mut self, x: Var, lo: usize, hi: usize, mask: Vec<bool>) -> Var {
        let n = self.node(x);
        let width = hi - lo;
        assert!(hi <= n.cols && mask.len() == n.rows * width, "mask shape");
        let mut out = vec![f64::NEG_INFINITY; n.rows * width];
        for r in 0..n.rows {
            let row = &n.value[r * n.cols + lo..r * n.cols + hi];
            let m = &mask[r * width..(r + 1) * width];
            let max = row.iter().zip(m).filter(|(_, &ok)| ok).map(|(&v, _)| v).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let z: f64 = row.iter().zip(m).filter(|(_, &ok)| ok).map(|(&v, _)| (v - max).exp()).sum();
            let lse = max + z.ln();
            for c in 0..width {
                if m[c] {
                    out[r * width + c] = row[c] - lse;
                }
            }
        }
        let rows = n.rows;
        self.push(rows, width, out, Op::MaskedLogSoftmax { x, lo, hi, mask })
    }

    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let n = self.node(x);
        let out = idx.iter().map(|&i| n.value[i]).collect();
        let len = idx.len();
        self.push(len, 1, out, Op::Gather(x, idx))
    }

    pub fn segment_sum(&mut self, x: Var, segments: Vec<Vec<usize>>) -> Var {
        let n = self.node(x);
        let out = segments.iter().map(|s| s.iter().map(|&i| n.value[i]).sum()).collect();
        let len = segments.len();
        self.push(len, 1, out, Op::SegmentSum(x, segments))
    }

    /// `out[k] = log sum_{i in segments[k]} exp(x[i])`; empty segments give `-inf`.
    pub fn segment_logsumexp(&mut self, x: Var, segments: Vec<Vec<usize>>) -> Var {
        let n = self.node(x);
        let out = segments.iter().map(|s| logsumexp(s.iter().map(|&i| n.value[i]))).collect();
        let len = segments.len();
        self.push(len, 1, out, Op::SegmentLogSumExp(x, segments))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (na, nb) = (self.node(a), self.node(b));
        assert_eq!((na.rows, na.cols), (nb.rows, nb.cols), "elementwise shape");
        let out = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let (r, c) = (na.rows, na.cols);
        self.push(r, c, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the single element of `s` to every entry of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Var {
        let (nx, ns) = (self.node(x), self.node(s));
        assert_eq!(ns.value.len(), 1, "add_scalar needs a scalar");
        let c = ns.value[0];
        let out = nx.value.iter().map(|v| v + c).collect();
        let (r, cc) = (nx.rows, nx.cols);
        self.push(r, cc, out, Op::AddScalar(x, s))
    }

    /// Elementwise product with constant weights.
    pub fn scale(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let n = self.node(x);
        assert_eq!(weights.len(), n.value.len(), "scale shape");
        let out = n.value.iter().zip(&weights).map(|(v, w)| v * w).collect();
        let (r, c) = (n.rows, n.cols);
        self.push(r, c, out, Op::Scale(x, weights))
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        let len = self.node(x).value.len();
        self.scale(x, vec![c; len])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_const(x, -1.0)
    }

    pub fn add_const(&mut self, x: Var, offsets: Vec<f64>) -> Var {
        let n = self.node(x);
        assert_eq!(offsets.len(), n.value.len(), "add_const shape");
        let out = n.value.iter().zip(&offsets).map(|(v, o)| v + o).collect();
        let (r, c) = (n.rows, n.cols);
        self.push(r, c, out, Op::AddConst(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.node(x).value.iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    /// `sum_i w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let scaled = self.scale(x, weights);
        self.sum(scaled)
    }

    /// Elementwise `f` where `f` returns `(value, derivative)`.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        let n = self.node(x);
        let (vals, ders): (Vec<f64>, Vec<f64>) = n.value.iter().map(|&v| f(v)).unzip();
        let (r, c) = (n.rows, n.cols);
        self.push(r, c, vals, Op::Map(x, ders))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| {
            let e = v.exp();
            (e, e)
        })
    }

    /// Reverse sweep from scalar `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients, TapeError> {
        if out.tape != self.id {
            return Err(TapeError::GraphNotRecorded);
        }
        let root = &self.nodes[out.idx];
        if root.value.len() != 1 {
            return Err(TapeError::NotScalar { rows: root.rows, cols: root.cols });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; out.idx + 1];
        adj[out.idx] = Some(vec![1.0]);
        let mut grads = Gradients::default();
        for i in (0..=out.idx).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut adj, &mut grads);
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>], grads: &mut Gradients) {
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            let n = &self.nodes[v.idx];
            let slot = adj[v.idx].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => grads.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (na, nb) = (&self.nodes[a.idx], &self.nodes[b.idx]);
                let (m, k, n) = (na.rows, na.cols, nb.cols);
                // dA = G B^T, dB = A^T G
                acc(*a, &|s| gemm(m, n, k, g, false, &nb.value, true, s, 1.0));
                acc(*b, &|s| gemm(k, m, n, &na.value, true, g, false, s, 1.0));
            }
            Op::SparseRows(w, rows) => {
                let cols = node.cols;
                acc(*w, &|s| {
                    for (r, active) in rows.iter().enumerate() {
                        let src = &g[r * cols..(r + 1) * cols];
                        for &i in active {
                            let dst = &mut s[i * cols..(i + 1) * cols];
                            dst.iter_mut().zip(src).for_each(|(d, x)| *d += x);
                        }
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                let cols = node.cols;
                acc(*x, &|s| s.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                acc(*b, &|s| {
                    for row in g.chunks(cols) {
                        s.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = &self.nodes[x.idx].value;
                acc(*x, &|s| {
                    for ((d, gi), v) in s.iter_mut().zip(g).zip(xv) {
                        *d += if *v > 0.0 { *gi } else { slope * gi };
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let cols = node.cols;
                acc(*x, &|s| {
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g[r * cols..(r + 1) * cols];
                        let dst = &mut s[i * cols..(i + 1) * cols];
                        dst.iter_mut().zip(src).for_each(|(d, x)| *d += x);
                    }
                });
            }
            Op::MaskedLogSoftmax { x, lo, hi, mask } => {
                let width = hi - lo;
                let in_cols = self.nodes[x.idx].cols;
                let y = &node.value;
                acc(*x, &|s| {
                    for r in 0..node.rows {
                        let m = &mask[r * width..(r + 1) * width];
                        let gs: f64 = (0..width).filter(|&c| m[c]).map(|c| g[r * width + c]).sum();
                        for c in 0..width {
                            if m[c] {
                                let p = y[r * width + c].exp();
                                s[r * in_cols + lo + c] += g[r * width + c] - p * gs;
                            }
                        }
                    }
                });
            }
            Op::Gather(x, idx) => {
                acc(*x, &|s| {
                    for (k, &i) in idx.iter().enumerate() {
                        s[i] += g[k];
                    }
                });
            }
            Op::SegmentSum(x, segs) => {
                acc(*x, &|s| {
                    for (k, seg) in segs.iter().enumerate() {
                        for &i in seg {
                            s[i] += g[k];
                        }
                    }
                });
            }
            Op::SegmentLogSumExp(x, segs) => {
                let xv = &self.nodes[x.idx].value;
                acc(*x, &|s| {
                    for (k, seg) in segs.iter().enumerate() {
                        let out = node.value[k];
                        if out == f64::NEG_INFINITY {
                            continue;
                        }
                        for &i in seg {
                            s[i] += g[k] * (xv[i] - out).exp();
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(d, x)| *d += x));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
                acc(*a, &|s| {
                    for ((d, gi), y) in s.iter_mut().zip(g).zip(vb) {
                        *d += gi * y;
                    }
                });
                acc(*b, &|s| {
                    for ((d, gi), y) in s.iter_mut().zip(g).zip(va) {
                        *d += gi * y;
                    }
                });
            }
            Op::AddScalar(x, c) => {
                acc(*x, &|s| s.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                let total: f64 = g.iter().sum();
                acc(*c, &|s| s[0] += total);
            }
            Op::Scale(x, w) => {
                acc(*x, &|s| {
                    for ((d, gi), wi) in s.iter_mut().zip(g).zip(w) {
                        *d += gi * wi;
                    }
                });
            }
            Op::AddConst(x) => {
                acc(*x, &|s| s.iter_mut().zip(g).for_each(|(d, x)| *d += x));
            }
            Op::Sum(x) => {
                acc(*x, &|s| s.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Map(x, ders) => {
                acc(*x, &|s| {
                    for ((d, gi), di) in s.iter_mut().zip(g).zip(ders) {
                        // 0 * inf stays 0: an unused branch must not poison the sum
                        if *gi != 0.0 {
                            *d += gi * di;
                        }
                    }
                });
            }
        }
    }
}

pub fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `c = beta * c + op(a) op(b)` with `op(a)` of shape `m x k` and `op(b)` of
/// shape `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    // row-major strides; a transposed operand swaps them
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    unsafe {
        // SAFETY: slice lengths match the shapes and strides above.
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
