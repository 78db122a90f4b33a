//! Reverse-mode differentiation over the small operator set the network uses.
//!
//! Every value is a `rows × cols` matrix. Token-shaped values have
//! `rows = len * nodes` with row `l * nodes + n`; attention and graph walks
//! interpret rows that way.

use alloc::vec;
use alloc::vec::Vec;

use crate::graph::RoadGraph;
use crate::linalg;
use crate::math;

pub(crate) type Id = usize;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Axis {
    /// Attend across time steps, separately for every node.
    Time,
    /// Attend across nodes, separately for every time step.
    Node,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Walk {
    Forward,
    Reverse,
}

enum Op {
    Const,
    Param { offset: usize },
    MatMul { x: Id, w: Id },
    AddRow { x: Id, row: Id },
    Add(Id, Id),
    Scale(Id, f64),
    Mul(Id, Id),
    Relu(Id),
    Silu(Id),
    Sigmoid(Id),
    Tanh(Id),
    Columns { x: Id, start: usize },
    LayerNorm { x: Id, gain: Id, bias: Id, inv_std: Vec<f64> },
    Attention { q: Id, k: Id, v: Id, axis: Axis, heads: usize, probs: Vec<f64> },
    Walk { x: Id, walk: Walk },
    MaskRows { x: Id, keep: Vec<bool> },
}

struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
    op: Op,
}

pub(crate) struct Tape<'g> {
    nodes: Vec<Node>,
    graph: &'g RoadGraph,
    len: usize,
}

impl<'g> Tape<'g> {
    pub(crate) fn new(graph: &'g RoadGraph, len: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            graph,
            len,
        }
    }

    fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Id {
        debug_assert_eq!(value.len(), rows * cols);
        let needs_grad = match &op {
            Op::Const => false,
            Op::Param { .. } => true,
            Op::MatMul { x, w } => self.ng(*x) || self.ng(*w),
            Op::AddRow { x, row } => self.ng(*x) || self.ng(*row),
            Op::Add(a, b) | Op::Mul(a, b) => self.ng(*a) || self.ng(*b),
            Op::Scale(a, _) | Op::Relu(a) | Op::Silu(a) | Op::Sigmoid(a) | Op::Tanh(a) => self.ng(*a),
            Op::Columns { x, .. } | Op::Walk { x, .. } | Op::MaskRows { x, .. } => self.ng(*x),
            Op::LayerNorm { x, gain, bias, .. } => self.ng(*x) || self.ng(*gain) || self.ng(*bias),
            Op::Attention { q, k, v, .. } => self.ng(*q) || self.ng(*k) || self.ng(*v),
        };
        self.nodes.push(Node {
            value,
            rows,
            cols,
            needs_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn ng(&self, id: Id) -> bool {
        self.nodes[id].needs_grad
    }

    pub(crate) fn value(&self, id: Id) -> &[f64] {
        &self.nodes[id].value
    }

    pub(crate) fn shape(&self, id: Id) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub(crate) fn constant(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Id {
        self.push(value, rows, cols, Op::Const)
    }

    pub(crate) fn param(&mut self, params: &[f64], offset: usize, rows: usize, cols: usize) -> Id {
        let value = params[offset..offset + rows * cols].to_vec();
        self.push(value, rows, cols, Op::Param { offset })
    }

    pub(crate) fn matmul(&mut self, x: Id, w: Id) -> Id {
        let (rows, cin) = self.shape(x);
        let (wr, cout) = self.shape(w);
        assert_eq!(cin, wr, "matmul inner dimension");
        let mut out = vec![0.0; rows * cout];
        linalg::matmul_acc(self.value(x), rows, cin, self.value(w), cout, 1.0, &mut out);
        self.push(out, rows, cout, Op::MatMul { x, w })
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub(crate) fn add_row(&mut self, x: Id, row: Id) -> Id {
        let (rows, cols) = self.shape(x);
        assert_eq!(self.shape(row), (1, cols), "broadcast row shape");
        let r = self.value(row).to_vec();
        let mut out = self.value(x).to_vec();
        for chunk in out.chunks_mut(cols) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, rows, cols, Op::AddRow { x, row })
    }

    pub(crate) fn add(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let (rows, cols) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(out, rows, cols, Op::Add(a, b))
    }

    pub(crate) fn scale(&mut self, a: Id, s: f64) -> Id {
        let (rows, cols) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(out, rows, cols, Op::Scale(a, s))
    }

    pub(crate) fn mul(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let (rows, cols) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(out, rows, cols, Op::Mul(a, b))
    }

    pub(crate) fn relu(&mut self, a: Id) -> Id {
        let (rows, cols) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.max(0.0)).collect();
        self.push(out, rows, cols, Op::Relu(a))
    }

    pub(crate) fn silu(&mut self, a: Id) -> Id {
        let (rows, cols) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * math::sigmoid(x)).collect();
        self.push(out, rows, cols, Op::Silu(a))
    }

    pub(crate) fn sigmoid(&mut self, a: Id) -> Id {
        let (rows, cols) = self.shape(a);
        let out = self.value(a).iter().map(|&x| math::sigmoid(x)).collect();
        self.push(out, rows, cols, Op::Sigmoid(a))
    }

    pub(crate) fn tanh(&mut self, a: Id) -> Id {
        let (rows, cols) = self.shape(a);
        let out = self.value(a).iter().map(|&x| math::tanh(x)).collect();
        self.push(out, rows, cols, Op::Tanh(a))
    }

    /// Columns `start..start + width` of `x`.
    pub(crate) fn columns(&mut self, x: Id, start: usize, width: usize) -> Id {
        let (rows, cols) = self.shape(x);
        assert!(start + width <= cols, "column slice out of range");
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
        }
        self.push(out, rows, width, Op::Columns { x, start })
    }

    /// Normalizes every row over its columns, then applies `gain` and `bias`.
    pub(crate) fn layer_norm(&mut self, x: Id, gain: Id, bias: Id) -> Id {
        let (rows, cols) = self.shape(x);
        let g = self.value(gain).to_vec();
        let b = self.value(bias).to_vec();
        let src = self.value(x);
        let mut out = vec![0.0; rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / math::sqrt(var + NORM_EPS);
            inv_std.push(inv);
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * inv * g[c] + b[c];
            }
        }
        self.push(
            out,
            rows,
            cols,
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention over `axis`; `q`, `k` and `v`
    /// are already projected.
    pub(crate) fn attention(&mut self, q: Id, k: Id, v: Id, axis: Axis, heads: usize) -> Id {
        let (rows, cols) = self.shape(q);
        assert_eq!(self.shape(k), (rows, cols));
        assert_eq!(self.shape(v), (rows, cols));
        assert_eq!(cols % heads, 0, "channels divisible by heads");
        let geo = AttnGeometry::new(axis, self.len, self.n_nodes());
        let dh = cols / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let seq = geo.seq;
        let mut probs = vec![0.0; geo.groups * heads * seq * seq];
        let mut out = vec![0.0; rows * cols];
        let mut scores = vec![0.0; seq];
        for g in 0..geo.groups {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..seq {
                    let qi = geo.row(g, i) * cols + c0;
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = geo.row(g, j) * cols + c0;
                        let mut acc = 0.0;
                        for d in 0..dh {
                            acc += qv[qi + d] * kv[kj + d];
                        }
                        *s = acc * scale;
                        max = max.max(*s);
                    }
                    let mut total = 0.0;
                    for s in scores.iter_mut() {
                        *s = math::exp(*s - max);
                        total += *s;
                    }
                    let p = &mut probs[((g * heads + h) * seq + i) * seq..][..seq];
                    for (pj, s) in p.iter_mut().zip(&scores) {
                        *pj = s / total;
                    }
                    let oi = geo.row(g, i) * cols + c0;
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = geo.row(g, j) * cols + c0;
                        for d in 0..dh {
                            out[oi + d] += pj * vv[vj + d];
                        }
                    }
                }
            }
        }
        self.push(
            out,
            rows,
            cols,
            Op::Attention {
                q,
                k,
                v,
                axis,
                heads,
                probs,
            },
        )
    }

    /// One random-walk step along the node axis for every time step.
    pub(crate) fn walk(&mut self, x: Id, walk: Walk) -> Id {
        let (rows, cols) = self.shape(x);
        let t = match walk {
            Walk::Forward => self.graph.forward(),
            Walk::Reverse => self.graph.reverse(),
        };
        let out = t.apply(self.value(x), self.len, cols);
        self.push(out, rows, cols, Op::Walk { x, walk })
    }

    /// Zeroes rows where `keep` is false.
    pub(crate) fn mask_rows(&mut self, x: Id, keep: Vec<bool>) -> Id {
        let (rows, cols) = self.shape(x);
        assert_eq!(keep.len(), rows);
        let mut out = self.value(x).to_vec();
        for (r, k) in keep.iter().enumerate() {
            if !k {
                out[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self.push(out, rows, cols, Op::MaskRows { x, keep })
    }

    /// Back-propagates `seed` (the gradient of a scalar w.r.t. `output`) and
    /// accumulates parameter gradients into `param_grads`.
    pub(crate) fn backward(&self, output: Id, seed: Vec<f64>, param_grads: &mut [f64]) {
        assert_eq!(seed.len(), self.nodes[output].value.len());
        let mut grads: Vec<Vec<f64>> = (0..self.nodes.len()).map(|_| Vec::new()).collect();
        grads[output] = seed;
        for id in (0..=output).rev() {
            if grads[id].is_empty() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = core::mem::take(&mut grads[id]);
            let node = &self.nodes[id];
            match &node.op {
                Op::Const => {}
                Op::Param { offset } => {
                    for (p, v) in param_grads[*offset..offset + g.len()].iter_mut().zip(&g) {
                        *p += v;
                    }
                }
                Op::MatMul { x, w } => {
                    let (rows, cin) = self.shape(*x);
                    let cout = node.cols;
                    if self.ng(*x) {
                        let gx = slot(&mut grads, *x, rows * cin);
                        linalg::matmul_grad_input(&g, rows, cout, self.value(*w), cin, gx);
                    }
                    if self.ng(*w) {
                        let gw = slot(&mut grads, *w, cin * cout);
                        linalg::matmul_grad_weight(self.value(*x), rows, cin, &g, cout, gw);
                    }
                }
                Op::AddRow { x, row } => {
                    if self.ng(*x) {
                        acc(slot(&mut grads, *x, g.len()), &g);
                    }
                    if self.ng(*row) {
                        let gr = slot(&mut grads, *row, node.cols);
                        for chunk in g.chunks(node.cols) {
                            acc(gr, chunk);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for id in [*a, *b] {
                        if self.ng(id) {
                            acc(slot(&mut grads, id, g.len()), &g);
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for (o, v) in ga.iter_mut().zip(&g) {
                        *o += s * v;
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let bv = self.value(*b);
                        let ga = slot(&mut grads, *a, g.len());
                        for ((o, v), y) in ga.iter_mut().zip(&g).zip(bv) {
                            *o += v * y;
                        }
                    }
                    if self.ng(*b) {
                        let av = self.value(*a);
                        let gb = slot(&mut grads, *b, g.len());
                        for ((o, v), x) in gb.iter_mut().zip(&g).zip(av) {
                            *o += v * x;
                        }
                    }
                }
                Op::Relu(a) => {
                    let xv = self.value(*a);
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, v), x) in ga.iter_mut().zip(&g).zip(xv) {
                        if *x > 0.0 {
                            *o += v;
                        }
                    }
                }
                Op::Silu(a) => {
                    let xv = self.value(*a);
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, v), &x) in ga.iter_mut().zip(&g).zip(xv) {
                        let s = math::sigmoid(x);
                        *o += v * (s + x * s * (1.0 - s));
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, v), y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *o += v * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, v), y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *o += v * (1.0 - y * y);
                    }
                }
                Op::Columns { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let width = node.cols;
                    let gx = slot(&mut grads, *x, rows * cols);
                    for r in 0..rows {
                        acc(&mut gx[r * cols + start..r * cols + start + width], &g[r * width..(r + 1) * width]);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    inv_std,
                } => self.layer_norm_backward(&mut grads, &g, node, *x, *gain, *bias, inv_std),
                Op::Attention {
                    q,
                    k,
                    v,
                    axis,
                    heads,
                    probs,
                } => self.attention_backward(&mut grads, &g, (*q, *k, *v), *axis, *heads, probs),
                Op::Walk { x, walk } => {
                    let t = match walk {
                        Walk::Forward => self.graph.forward(),
                        Walk::Reverse => self.graph.reverse(),
                    };
                    let gx = slot(&mut grads, *x, g.len());
                    t.apply_transpose_acc(&g, self.len, node.cols, gx);
                }
                Op::MaskRows { x, keep } => {
                    let cols = node.cols;
                    let gx = slot(&mut grads, *x, g.len());
                    for (r, k) in keep.iter().enumerate() {
                        if *k {
                            acc(&mut gx[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &self,
        grads: &mut [Vec<f64>],
        g: &[f64],
        node: &Node,
        x: Id,
        gain: Id,
        bias: Id,
        inv_std: &[f64],
    ) {
        let (rows, cols) = (node.rows, node.cols);
        let xv = self.value(x);
        let gv = self.value(gain).to_vec();
        let mut xhat = vec![0.0; cols];
        let mut gh = vec![0.0; cols];
        let mut g_gain = vec![0.0; cols];
        let mut g_bias = vec![0.0; cols];
        let want_x = self.ng(x);
        let mut gx_all = if want_x { vec![0.0; rows * cols] } else { Vec::new() };
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let gr = &g[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let inv = inv_std[r];
            for c in 0..cols {
                xhat[c] = (row[c] - mean) * inv;
                gh[c] = gr[c] * gv[c];
                g_gain[c] += gr[c] * xhat[c];
                g_bias[c] += gr[c];
            }
            if want_x {
                let m1 = gh.iter().sum::<f64>() / cols as f64;
                let m2 = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                for c in 0..cols {
                    gx_all[r * cols + c] = inv * (gh[c] - m1 - xhat[c] * m2);
                }
            }
        }
        if want_x {
            acc(slot(grads, x, rows * cols), &gx_all);
        }
        if self.ng(gain) {
            acc(slot(grads, gain, cols), &g_gain);
        }
        if self.ng(bias) {
            acc(slot(grads, bias, cols), &g_bias);
        }
    }

    fn attention_backward(
        &self,
        grads: &mut [Vec<f64>],
        g: &[f64],
        (q, k, v): (Id, Id, Id),
        axis: Axis,
        heads: usize,
        probs: &[f64],
    ) {
        let (rows, cols) = self.shape(q);
        let geo = AttnGeometry::new(axis, self.len, self.n_nodes());
        let dh = cols / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let seq = geo.seq;
        let mut gq = vec![0.0; rows * cols];
        let mut gk = vec![0.0; rows * cols];
        let mut gvv = vec![0.0; rows * cols];
        let mut dp = vec![0.0; seq];
        for grp in 0..geo.groups {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..seq {
                    let ri = geo.row(grp, i) * cols + c0;
                    let p = &probs[((grp * heads + h) * seq + i) * seq..][..seq];
                    let mut dot = 0.0;
                    for j in 0..seq {
                        let rj = geo.row(grp, j) * cols + c0;
                        let mut a = 0.0;
                        for d in 0..dh {
                            a += g[ri + d] * vv[rj + d];
                            gvv[rj + d] += p[j] * g[ri + d];
                        }
                        dp[j] = a;
                        dot += p[j] * a;
                    }
                    for j in 0..seq {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let rj = geo.row(grp, j) * cols + c0;
                        for d in 0..dh {
                            gq[ri + d] += ds * kv[rj + d];
                            gk[rj + d] += ds * qv[ri + d];
                        }
                    }
                }
            }
        }
        for (id, gr) in [(q, gq), (k, gk), (v, gvv)] {
            if self.ng(id) {
                acc(slot(grads, id, rows * cols), &gr);
            }
        }
    }
}

/// Maps (group, position) to a token row for an attention axis.
struct AttnGeometry {
    groups: usize,
    seq: usize,
    nodes: usize,
    axis: Axis,
}

impl AttnGeometry {
    fn new(axis: Axis, len: usize, nodes: usize) -> Self {
        match axis {
            Axis::Time => AttnGeometry {
                groups: nodes,
                seq: len,
                nodes,
                axis,
            },
            Axis::Node => AttnGeometry {
                groups: len,
                seq: nodes,
                nodes,
                axis,
            },
        }
    }

    #[inline]
    fn row(&self, group: usize, pos: usize) -> usize {
        match self.axis {
            Axis::Time => pos * self.nodes + group,
            Axis::Node => group * self.nodes + pos,
        }
    }
}

fn slot(grads: &mut [Vec<f64>], id: Id, len: usize) -> &mut [f64] {
    if grads[id].is_empty() {
        grads[id] = vec![0.0; len];
    }
    &mut grads[id]
}

fn acc(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
