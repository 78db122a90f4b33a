//! Road graph construction and the diffusion graph convolution (Diff-GCN).
//!
//! The forward transition is the out-degree random walk `D_out⁻¹ A` and the
//! reverse transition is the in-degree walk on the transposed graph
//! `D_in⁻¹ Aᵀ`. Hop `k` of the convolution applies each walk `k` times to the
//! node axis; powers are never materialized.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::math;

/// Sparse row-stochastic (or all-zero) walk matrix in CSR layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    n: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl Transition {
    fn from_dense(dense: &[f64], n: usize) -> Self {
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for i in 0..n {
            for j in 0..n {
                let w = dense[i * n + j];
                if w != 0.0 {
                    cols.push(j);
                    weights.push(w);
                }
            }
            offsets.push(cols.len());
        }
        Transition { n, offsets, cols, weights }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        self.cols[a..b].iter().copied().zip(self.weights[a..b].iter().copied())
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for (j, w) in self.row(i) {
                out[i * self.n + j] = w;
            }
        }
        out
    }

    /// `y[l, i, :] = Σ_j P[i, j] x[l, j, :]` over a `len × n × channels` block.
    pub fn apply(&self, x: &[f64], len: usize, channels: usize) -> Vec<f64> {
        let n = self.n;
        debug_assert_eq!(x.len(), len * n * channels);
        let mut y = vec![0.0; x.len()];
        for l in 0..len {
            let base = l * n * channels;
            for i in 0..n {
                let yi = base + i * channels;
                for (j, w) in self.row(i) {
                    let xj = base + j * channels;
                    for c in 0..channels {
                        y[yi + c] += w * x[xj + c];
                    }
                }
            }
        }
        y
    }

    /// `gx[l, j, :] += Σ_i P[i, j] g[l, i, :]`, the adjoint of [`Transition::apply`].
    pub fn apply_transpose_acc(&self, g: &[f64], len: usize, channels: usize, gx: &mut [f64]) {
        let n = self.n;
        for l in 0..len {
            let base = l * n * channels;
            for i in 0..n {
                let gi = base + i * channels;
                for (j, w) in self.row(i) {
                    let xj = base + j * channels;
                    for c in 0..channels {
                        gx[xj + c] += w * g[gi + c];
                    }
                }
            }
        }
    }
}

/// How the reverse walk is built from the adjacency matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReverseWalk {
    /// `D_in⁻¹ Aᵀ`: the walk on the transposed graph.
    #[default]
    Transposed,
    /// `D_in⁻¹ A` without transposing; rows are not stochastic in general.
    Literal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoadGraph {
    n_nodes: usize,
    adjacency: Vec<f64>,
    forward: Transition,
    reverse: Transition,
}

impl RoadGraph {
    pub fn from_adjacency(adjacency: Vec<f64>, n_nodes: usize) -> Result<Self> {
        Self::with_reverse_walk(adjacency, n_nodes, ReverseWalk::Transposed)
    }

    pub fn with_reverse_walk(adjacency: Vec<f64>, n_nodes: usize, walk: ReverseWalk) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::InvalidRange("graph needs at least one node".into()));
        }
        if adjacency.len() != n_nodes * n_nodes {
            return Err(Error::shape(
                format!("{n_nodes}x{n_nodes} adjacency"),
                format!("{} entries", adjacency.len()),
            ));
        }
        if let Some(w) = adjacency.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::Domain(format!("adjacency weight {w} must be finite and non-negative")));
        }
        let (forward, reverse) = transitions(&adjacency, n_nodes, walk);
        Ok(RoadGraph {
            n_nodes,
            forward: Transition::from_dense(&forward, n_nodes),
            reverse: Transition::from_dense(&reverse, n_nodes),
            adjacency,
        })
    }

    /// Thresholded Gaussian kernel graph from a distance matrix.
    pub fn from_distances(distances: &[f64], n_nodes: usize, kernel: &KernelOptions) -> Result<Self> {
        let adjacency = gaussian_kernel_adjacency(distances, n_nodes, kernel)?;
        Self::with_reverse_walk(adjacency, n_nodes, kernel.reverse_walk)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    pub fn forward(&self) -> &Transition {
        &self.forward
    }

    pub fn reverse(&self) -> &Transition {
        &self.reverse
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_nodes;
        let mut adj = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                adj[i * n + j] = self.adjacency[perm[i] * n + perm[j]];
            }
        }
        Self::from_adjacency(adj, n)
    }

    /// Nodes adjacent to `i` in either direction.
    pub fn neighbours(&self, i: usize) -> Vec<usize> {
        let n = self.n_nodes;
        (0..n)
            .filter(|&j| j != i && (self.adjacency[i * n + j] > 0.0 || self.adjacency[j * n + i] > 0.0))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelOptions {
    /// Kernel width; `None` uses the standard deviation of the finite
    /// off-diagonal distances.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub self_loops: bool,
    #[serde(default)]
    pub reverse_walk: ReverseWalk,
}

fn default_threshold() -> f64 {
    0.1
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions {
            sigma: None,
            threshold: default_threshold(),
            self_loops: false,
            reverse_walk: ReverseWalk::Transposed,
        }
    }
}

/// Standard deviation of the finite off-diagonal distances.
pub fn distance_spread(distances: &[f64], n: usize) -> f64 {
    let vals: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| i * n + j))
        .map(|k| distances[k])
        .filter(|d| d.is_finite())
        .collect();
    if vals.len() < 2 {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    math::sqrt(vals.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / vals.len() as f64)
}

/// `w_ij = exp(-d_ij² / σ²)` when that is at least `threshold`, zero
/// otherwise. Infinite distances mean "no road" and give zero weight. The
/// diagonal is zero unless `self_loops` is set.
pub fn gaussian_kernel_adjacency(distances: &[f64], n: usize, kernel: &KernelOptions) -> Result<Vec<f64>> {
    if distances.len() != n * n {
        return Err(Error::shape(format!("{n}x{n} distances"), format!("{} entries", distances.len())));
    }
    if let Some(d) = distances.iter().find(|d| d.is_nan() || **d < 0.0) {
        return Err(Error::Domain(format!("distance {d} must be non-negative")));
    }
    if !(0.0..1.0).contains(&kernel.threshold) {
        return Err(Error::InvalidRange(format!("threshold {} outside [0, 1)", kernel.threshold)));
    }
    let sigma = kernel.sigma.unwrap_or_else(|| distance_spread(distances, n));
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidRange(format!("kernel width must be positive, got {sigma}")));
    }
    let mut adj = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j && !kernel.self_loops {
                continue;
            }
            let d = distances[i * n + j];
            if !d.is_finite() {
                continue;
            }
            let w = math::exp(-(d * d) / (sigma * sigma));
            if w >= kernel.threshold {
                adj[i * n + j] = w;
            }
        }
    }
    Ok(adj)
}

/// Dense `(forward, reverse)` walk matrices. Zero-degree rows stay zero.
pub fn build_transitions(adjacency: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    transitions(adjacency, n, ReverseWalk::Transposed)
}

fn transitions(a: &[f64], n: usize, walk: ReverseWalk) -> (Vec<f64>, Vec<f64>) {
    let mut forward = vec![0.0; n * n];
    let mut reverse = vec![0.0; n * n];
    for i in 0..n {
        let out_deg: f64 = (0..n).map(|j| a[i * n + j]).sum();
        let in_deg: f64 = (0..n).map(|j| a[j * n + i]).sum();
        for j in 0..n {
            if out_deg > 0.0 {
                forward[i * n + j] = a[i * n + j] / out_deg;
            }
            if in_deg > 0.0 {
                reverse[i * n + j] = match walk {
                    ReverseWalk::Transposed => a[j * n + i] / in_deg,
                    ReverseWalk::Literal => a[i * n + j] / in_deg,
                };
            }
        }
    }
    (forward, reverse)
}

/// Node features laid out `len × nodes × channels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub len: usize,
    pub nodes: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn new(len: usize, nodes: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != len * nodes * channels {
            return Err(Error::shape(
                format!("{len}x{nodes}x{channels}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Features { len, nodes, channels, data })
    }

    pub fn zeros(len: usize, nodes: usize, channels: usize) -> Self {
        Features {
            len,
            nodes,
            channels,
            data: vec![0.0; len * nodes * channels],
        }
    }

    #[inline]
    pub fn at(&self, l: usize, n: usize, c: usize) -> f64 {
        self.data[(l * self.nodes + n) * self.channels + c]
    }
}

/// Filter bank of a Diff-GCN layer: one `c_in × c_out` matrix per hop and
/// direction, `K + 1` hops each.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffGcnParams {
    pub k_steps: usize,
    pub rho: f64,
    pub c_in: usize,
    pub c_out: usize,
    pub forward: Vec<Vec<f64>>,
    pub reverse: Vec<Vec<f64>>,
}

impl DiffGcnParams {
    pub fn zeros(k_steps: usize, rho: f64, c_in: usize, c_out: usize) -> Self {
        DiffGcnParams {
            k_steps,
            rho,
            c_in,
            c_out,
            forward: vec![vec![0.0; c_in * c_out]; k_steps + 1],
            reverse: vec![vec![0.0; c_in * c_out]; k_steps + 1],
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidRange(format!("graph coefficient {} outside [0, 1]", self.rho)));
        }
        let want = self.c_in * self.c_out;
        let ok = self.forward.len() == self.k_steps + 1
            && self.reverse.len() == self.k_steps + 1
            && self.forward.iter().chain(&self.reverse).all(|m| m.len() == want);
        if !ok {
            return Err(Error::shape(
                format!("{} filters of {}x{}", self.k_steps + 1, self.c_in, self.c_out),
                "inconsistent filter bank",
            ));
        }
        Ok(())
    }
}

/// Hop weight: 1 for the self term, `rho` for every neighbour hop.
pub fn hop_scale(k: usize, rho: f64) -> f64 {
    if k == 0 {
        1.0
    } else {
        rho
    }
}

/// `Σ_k s_k (Pᵏ X Θ¹_k + Qᵏ X Θ²_k)` with `P`, `Q` the forward and reverse walks.
pub fn diff_gcn(features: &Features, graph: &RoadGraph, params: &DiffGcnParams) -> Result<Features> {
    params.validate()?;
    if features.nodes != graph.n_nodes() || features.channels != params.c_in {
        return Err(Error::shape(
            format!("_x{}x{}", graph.n_nodes(), params.c_in),
            format!("{}x{}x{}", features.len, features.nodes, features.channels),
        ));
    }
    let rows = features.len * features.nodes;
    let (len, cin, cout) = (features.len, params.c_in, params.c_out);
    let mut out = vec![0.0; rows * cout];
    let mut fwd = features.data.clone();
    let mut rev = features.data.clone();
    for k in 0..=params.k_steps {
        if k > 0 {
            fwd = graph.forward().apply(&fwd, len, cin);
            rev = graph.reverse().apply(&rev, len, cin);
        }
        let s = hop_scale(k, params.rho);
        if s == 0.0 {
            continue;
        }
        linalg::matmul_acc(&fwd, rows, cin, &params.forward[k], cout, s, &mut out);
        linalg::matmul_acc(&rev, rows, cin, &params.reverse[k], cout, s, &mut out);
    }
    Features::new(len, features.nodes, cout, out)
}
