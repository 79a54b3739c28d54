//! A small reverse-mode tape over row-major matrices.
//!
//! Values live in one arena; trainable parameters are read in place from the
//! flat parameter vector and their gradients accumulate into a matching flat
//! buffer. A tape can be cleared and reused so evaluation does not allocate
//! once the arena has grown.

use std::cell::RefCell;
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Silu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    ConcatCols(Range<usize>),
    ConcatRows(Range<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Range<usize>),
    Scale(Var, f64),
    GatedSoftmaxRows(Var),
    ScaleRows(Var, Range<usize>),
    SumRows(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    /// Offset into the arena, unused for parameters.
    at: usize,
}

const LN_EPS: f64 = 1e-5;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out = a * b` for row-major `m x k` and `k x n` operands.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    // SAFETY: the assertion above bounds every access the kernel makes
    // through these row-major strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Storage of a tape without its parameter borrow, kept around for reuse.
#[derive(Default)]
pub struct TapeBuffers {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    vars: Vec<Var>,
    consts: Vec<f64>,
    indices: Vec<usize>,
}

thread_local! {
    static POOL: RefCell<Vec<TapeBuffers>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on an empty tape whose buffers are recycled per thread.
pub fn with_tape<R>(params: &[f64], f: impl FnOnce(&mut Tape<'_>) -> R) -> R {
    let bufs = POOL.with(|p| p.borrow_mut().pop()).unwrap_or_default();
    let mut tape = Tape::from_buffers(params, bufs);
    let out = f(&mut tape);
    let bufs = tape.into_buffers();
    POOL.with(|p| p.borrow_mut().push(bufs));
    out
}

pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
    vals: Vec<f64>,
    vars: Vec<Var>,
    consts: Vec<f64>,
    indices: Vec<usize>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self::from_buffers(params, TapeBuffers::default())
    }

    pub fn from_buffers(params: &'p [f64], bufs: TapeBuffers) -> Self {
        let mut t = Tape {
            params,
            nodes: bufs.nodes,
            vals: bufs.vals,
            vars: bufs.vars,
            consts: bufs.consts,
            indices: bufs.indices,
        };
        t.clear();
        t
    }

    pub fn into_buffers(self) -> TapeBuffers {
        TapeBuffers {
            nodes: self.nodes,
            vals: self.vals,
            vars: self.vars,
            consts: self.consts,
            indices: self.indices,
        }
    }

    pub fn params(&self) -> &'p [f64] {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0 as usize];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0 as usize];
        match n.op {
            Op::Param(off) => &self.params[off..off + n.rows * n.cols],
            _ => &self.vals[n.at..n.at + n.rows * n.cols],
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.value(v)[0]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> (Var, usize) {
        let at = self.vals.len();
        self.vals.resize(at + rows * cols, 0.0);
        let id = Var(self.nodes.len() as u32);
        self.nodes.push(Node { op, rows, cols, at });
        (id, at)
    }

    /// Splits the arena into everything before `at` (inputs) and the output.
    fn io(&mut self, at: usize) -> (Inputs<'_, 'p>, &mut [f64]) {
        let (before, out) = self.vals.split_at_mut(at);
        (
            Inputs {
                nodes: &self.nodes,
                vals: before,
                params: self.params,
            },
            out,
        )
    }

    pub fn constant(&mut self, data: &[f64], rows: usize, cols: usize) -> Var {
        assert_eq!(data.len(), rows * cols);
        let (v, at) = self.push(Op::Constant, rows, cols);
        self.vals[at..].copy_from_slice(data);
        v
    }

    /// A view of `rows * cols` parameters starting at `offset`.
    pub fn param(&mut self, offset: usize, rows: usize, cols: usize) -> Var {
        assert!(
            offset + rows * cols <= self.params.len(),
            "parameter view out of range"
        );
        let id = Var(self.nodes.len() as u32);
        self.nodes.push(Node {
            op: Op::Param(offset),
            rows,
            cols,
            at: usize::MAX,
        });
        id
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions");
        let (v, at) = self.push(Op::MatMul(a, b), m, n);
        let (inp, out) = self.io(at);
        matmul_into(inp.get(a), inp.get(b), out, m, k, n);
        v
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt inner dimensions");
        let (v, at) = self.push(Op::MatMulNt(a, b), m, n);
        let (inp, out) = self.io(at);
        let (av, bv) = (inp.get(a), inp.get(b));
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = dot(&av[i * k..(i + 1) * k], &bv[j * k..(j + 1) * k]);
            }
        }
        v
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(bias), (1, n), "bias shape");
        let (v, at) = self.push(Op::AddRow(a, bias), m, n);
        let (inp, out) = self.io(at);
        let (av, bv) = (inp.get(a), inp.get(bias));
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = av[i * n + j] + bv[j];
            }
        }
        v
    }

    /// `x * w + b` for a weight `in x out` and bias `1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape, self.shape(b), "add shapes");
        let (v, at) = self.push(Op::Add(a, b), shape.0, shape.1);
        let (inp, out) = self.io(at);
        for ((o, x), y) in out.iter_mut().zip(inp.get(a)).zip(inp.get(b)) {
            *o = x + y;
        }
        v
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let (v, at) = self.push(Op::Silu(a), m, n);
        let (inp, out) = self.io(at);
        for (o, &x) in out.iter_mut().zip(inp.get(a)) {
            *o = x * sigmoid(x);
        }
        v
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, n));
        assert_eq!(self.shape(beta), (1, n));
        let (v, at) = self.push(Op::LayerNorm { x, gamma, beta }, m, n);
        let (inp, out) = self.io(at);
        let (xv, g, b) = (inp.get(x), inp.get(gamma), inp.get(beta));
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let (mean, rstd) = row_stats(row);
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        v
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.shape(parts[0]).0;
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        for &p in parts {
            assert_eq!(self.shape(p).0, m, "concat_cols row counts");
        }
        let start = self.vars.len();
        self.vars.extend_from_slice(parts);
        let (v, at) = self.push(Op::ConcatCols(start..start + parts.len()), m, n);
        let (inp, out) = self.io(at);
        let mut c0 = 0;
        for &p in parts {
            let pc = inp.nodes[p.0 as usize].cols;
            let pv = inp.get(p);
            for i in 0..m {
                out[i * n + c0..i * n + c0 + pc].copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            c0 += pc;
        }
        v
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0]).1;
        let m: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        for &p in parts {
            assert_eq!(self.shape(p).1, n, "concat_rows column counts");
        }
        let start = self.vars.len();
        self.vars.extend_from_slice(parts);
        let (v, at) = self.push(Op::ConcatRows(start..start + parts.len()), m, n);
        let (inp, out) = self.io(at);
        let mut o = 0;
        for &p in parts {
            let pv = inp.get(p);
            out[o..o + pv.len()].copy_from_slice(pv);
            o += pv.len();
        }
        v
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(x);
        assert!(start + len <= m, "slice_rows out of range");
        let (v, at) = self.push(Op::SliceRows(x, start), len, n);
        let (inp, out) = self.io(at);
        out.copy_from_slice(&inp.get(x)[start * n..(start + len) * n]);
        v
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(x);
        assert!(start + len <= n, "slice_cols out of range");
        let (v, at) = self.push(Op::SliceCols(x, start), m, len);
        let (inp, out) = self.io(at);
        let xv = inp.get(x);
        for i in 0..m {
            out[i * len..(i + 1) * len].copy_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        v
    }

    /// Row `r` of the result is row `idx[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (m, n) = self.shape(x);
        assert!(idx.iter().all(|&i| i < m), "gather index out of range");
        let start = self.indices.len();
        self.indices.extend_from_slice(idx);
        let (v, at) = self.push(Op::GatherRows(x, start..start + idx.len()), idx.len(), n);
        let (inp, out) = self.io(at);
        let xv = inp.get(x);
        for (r, &i) in idx.iter().enumerate() {
            out[r * n..(r + 1) * n].copy_from_slice(&xv[i * n..(i + 1) * n]);
        }
        v
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (m, n) = self.shape(x);
        let (v, at) = self.push(Op::Scale(x, c), m, n);
        let (inp, out) = self.io(at);
        for (o, &xv) in out.iter_mut().zip(inp.get(x)) {
            *o = c * xv;
        }
        v
    }

    /// Softmax along each row with nonnegative per-column gates:
    /// `a_ij = g_j exp(s_ij) / sum_k g_k exp(s_ik)`. Columns with a zero gate
    /// are skipped entirely, so they cannot influence the result.
    pub fn gated_softmax_rows(&mut self, scores: Var, gates: &[f64]) -> Var {
        let (m, n) = self.shape(scores);
        assert_eq!(gates.len(), n, "one gate per column");
        let (v, at) = self.push(Op::GatedSoftmaxRows(scores), m, n);
        let (inp, out) = self.io(at);
        let sv = inp.get(scores);
        for i in 0..m {
            let row = &sv[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if gates[j] > 0.0 && row[j] > max {
                    max = row[j];
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..n {
                if gates[j] > 0.0 {
                    let e = gates[j] * (row[j] - max).exp();
                    out[i * n + j] = e;
                    z += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        v
    }

    /// Multiplies row `r` of `x` by the constant `c[r]`.
    pub fn scale_rows(&mut self, x: Var, c: &[f64]) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(c.len(), m, "one factor per row");
        let start = self.consts.len();
        self.consts.extend_from_slice(c);
        let (v, at) = self.push(Op::ScaleRows(x, start..start + m), m, n);
        let (inp, out) = self.io(at);
        let xv = inp.get(x);
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xv[i * n + j] * c[i];
            }
        }
        v
    }

    /// Column sums, `1 x cols`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let (v, at) = self.push(Op::SumRows(x), 1, n);
        let (inp, out) = self.io(at);
        let xv = inp.get(x);
        for i in 0..m {
            for j in 0..n {
                out[j] += xv[i * n + j];
            }
        }
        v
    }

    /// Drops every node but keeps the allocations.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.vars.clear();
        self.consts.clear();
        self.indices.clear();
    }

    /// Back-propagates `seeds` (pairs of output variable and its upstream
    /// gradient) and accumulates parameter gradients into `param_grad`.
    pub fn backward(&self, seeds: &[(Var, &[f64])], param_grad: &mut [f64]) {
        assert_eq!(param_grad.len(), self.params.len());
        let mut grads = vec![0.0; self.vals.len()];
        let mut last = 0;
        for &(v, g) in seeds {
            let node = &self.nodes[v.0 as usize];
            assert_eq!(g.len(), node.rows * node.cols, "seed shape");
            match node.op {
                Op::Param(off) => {
                    for (p, x) in param_grad[off..off + g.len()].iter_mut().zip(g) {
                        *p += x;
                    }
                }
                _ => {
                    for (p, x) in grads[node.at..node.at + g.len()].iter_mut().zip(g) {
                        *p += x;
                    }
                }
            }
            last = last.max(v.0 as usize);
        }
        let mut acc = Grads {
            nodes: &self.nodes,
            grads: &mut grads,
            params: param_grad,
        };
        let mut dout = Vec::new();
        let mut tmp = Vec::new();
        for id in (0..=last).rev() {
            let node = &self.nodes[id];
            let (m, n) = (node.rows, node.cols);
            if matches!(node.op, Op::Constant | Op::Param(_)) {
                continue;
            }
            dout.clear();
            dout.extend_from_slice(&acc.grads[node.at..node.at + m * n]);
            if dout.iter().all(|&g| g == 0.0) {
                continue;
            }
            match &node.op {
                Op::Constant | Op::Param(_) => unreachable!(),
                Op::MatMul(a, b) => {
                    let k = self.shape(*a).1;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // dA = dC * B^T
                    acc.with(*a, |ga| {
                        for i in 0..m {
                            for p in 0..k {
                                ga[i * k + p] +=
                                    dot(&dout[i * n..(i + 1) * n], &bv[p * n..(p + 1) * n]);
                            }
                        }
                    });
                    // dB = A^T * dC
                    acc.with(*b, |gb| {
                        for i in 0..m {
                            for p in 0..k {
                                let aip = av[i * k + p];
                                for j in 0..n {
                                    gb[p * n + j] += aip * dout[i * n + j];
                                }
                            }
                        }
                    });
                }
                Op::MatMulNt(a, b) => {
                    let k = self.shape(*a).1;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc.with(*a, |ga| {
                        tmp.clear();
                        tmp.resize(m * k, 0.0);
                        matmul_into(&dout, bv, &mut tmp, m, n, k);
                        for (g, t) in ga.iter_mut().zip(&tmp) {
                            *g += t;
                        }
                    });
                    acc.with(*b, |gb| {
                        for i in 0..m {
                            for j in 0..n {
                                let d = dout[i * n + j];
                                for p in 0..k {
                                    gb[j * k + p] += d * av[i * k + p];
                                }
                            }
                        }
                    });
                }
                Op::AddRow(a, bias) => {
                    acc.with(*a, |ga| add_into(ga, &dout));
                    acc.with(*bias, |gb| {
                        for i in 0..m {
                            add_into(gb, &dout[i * n..(i + 1) * n]);
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc.with(*a, |ga| add_into(ga, &dout));
                    acc.with(*b, |gb| add_into(gb, &dout));
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    acc.with(*a, |ga| {
                        for ((g, &x), d) in ga.iter_mut().zip(av).zip(&dout) {
                            let s = sigmoid(x);
                            *g += d * s * (1.0 + x * (1.0 - s));
                        }
                    });
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (xv, gv) = (self.value(*x), self.value(*gamma));
                    acc.with(*x, |gx| {
                        let mut dxhat = vec![0.0; n];
                        for i in 0..m {
                            let row = &xv[i * n..(i + 1) * n];
                            let (mean, rstd) = row_stats(row);
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..n {
                                dxhat[j] = dout[i * n + j] * gv[j];
                                s1 += dxhat[j];
                                s2 += dxhat[j] * (row[j] - mean) * rstd;
                            }
                            let nf = n as f64;
                            for j in 0..n {
                                let xhat = (row[j] - mean) * rstd;
                                gx[i * n + j] += rstd * (dxhat[j] - s1 / nf - xhat * s2 / nf);
                            }
                        }
                    });
                    acc.with(*gamma, |gg| {
                        for i in 0..m {
                            let row = &xv[i * n..(i + 1) * n];
                            let (mean, rstd) = row_stats(row);
                            for j in 0..n {
                                gg[j] += dout[i * n + j] * (row[j] - mean) * rstd;
                            }
                        }
                    });
                    acc.with(*beta, |gb| {
                        for i in 0..m {
                            add_into(gb, &dout[i * n..(i + 1) * n]);
                        }
                    });
                }
                Op::ConcatCols(range) => {
                    let mut c0 = 0;
                    for &p in &self.vars[range.clone()] {
                        let pc = self.shape(p).1;
                        acc.with(p, |gp| {
                            for i in 0..m {
                                add_into(
                                    &mut gp[i * pc..(i + 1) * pc],
                                    &dout[i * n + c0..i * n + c0 + pc],
                                );
                            }
                        });
                        c0 += pc;
                    }
                }
                Op::ConcatRows(range) => {
                    let mut o = 0;
                    for &p in &self.vars[range.clone()] {
                        let len = {
                            let (r, c) = self.shape(p);
                            r * c
                        };
                        acc.with(p, |gp| add_into(gp, &dout[o..o + len]));
                        o += len;
                    }
                }
                Op::SliceRows(x, start) => {
                    acc.with(*x, |gx| {
                        add_into(&mut gx[start * n..(start + m) * n], &dout)
                    });
                }
                Op::SliceCols(x, start) => {
                    let xn = self.shape(*x).1;
                    acc.with(*x, |gx| {
                        for i in 0..m {
                            add_into(
                                &mut gx[i * xn + start..i * xn + start + n],
                                &dout[i * n..(i + 1) * n],
                            );
                        }
                    });
                }
                Op::GatherRows(x, range) => {
                    let idx = &self.indices[range.clone()];
                    acc.with(*x, |gx| {
                        for (r, &i) in idx.iter().enumerate() {
                            add_into(&mut gx[i * n..(i + 1) * n], &dout[r * n..(r + 1) * n]);
                        }
                    });
                }
                Op::Scale(x, c) => {
                    acc.with(*x, |gx| {
                        for (g, d) in gx.iter_mut().zip(&dout) {
                            *g += c * d;
                        }
                    });
                }
                Op::GatedSoftmaxRows(x) => {
                    let a = &self.vals[node.at..node.at + m * n];
                    acc.with(*x, |gx| {
                        for i in 0..m {
                            let ar = &a[i * n..(i + 1) * n];
                            let dr = &dout[i * n..(i + 1) * n];
                            let s = dot(ar, dr);
                            for j in 0..n {
                                gx[i * n + j] += ar[j] * (dr[j] - s);
                            }
                        }
                    });
                }
                Op::ScaleRows(x, range) => {
                    let c = &self.consts[range.clone()];
                    acc.with(*x, |gx| {
                        for i in 0..m {
                            for j in 0..n {
                                gx[i * n + j] += dout[i * n + j] * c[i];
                            }
                        }
                    });
                }
                Op::SumRows(x) => {
                    let xm = self.shape(*x).0;
                    acc.with(*x, |gx| {
                        for i in 0..xm {
                            add_into(&mut gx[i * n..(i + 1) * n], &dout);
                        }
                    });
                }
            }
        }
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

struct Inputs<'a, 'p> {
    nodes: &'a [Node],
    vals: &'a [f64],
    params: &'p [f64],
}

impl Inputs<'_, '_> {
    fn get(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0 as usize];
        match n.op {
            Op::Param(off) => &self.params[off..off + n.rows * n.cols],
            _ => &self.vals[n.at..n.at + n.rows * n.cols],
        }
    }
}

struct Grads<'a> {
    nodes: &'a [Node],
    grads: &'a mut [f64],
    params: &'a mut [f64],
}

impl Grads<'_> {
    fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let n = &self.nodes[v.0 as usize];
        let len = n.rows * n.cols;
        match n.op {
            Op::Constant => {}
            Op::Param(off) => f(&mut self.params[off..off + len]),
            _ => f(&mut self.grads[n.at..n.at + len]),
        }
    }
}
