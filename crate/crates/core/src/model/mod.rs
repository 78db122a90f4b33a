//! Coarse interpolation, the conditional feature prior and the noise
//! prediction network, with exact parameter gradients.
//!
//! The network sees the coarse interpolation `χ` and the noisy field at
//! target positions only; non-target positions of the noisy input are
//! zeroed and the output is zero off the target mask.

mod layout;
mod tape;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{self, Features, RoadGraph};
use crate::grid::{Grid, Mask};
use crate::math;
use crate::solvers::NoisePredictor;

use layout::{Layout, Linear, Mixer, Norm, Slot};
use tape::{Axis, Id, Tape, Walk};

/// Which stream feeds the query, key and value of the attention layers of the
/// noise prediction blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionRouting {
    /// Query and value from the conditional prior, key from the noise stream.
    #[default]
    Prior,
    /// Query from the noise stream, key and value from the conditional prior.
    Conventional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub residual_layers: usize,
    pub residual_channels: usize,
    pub attention_heads: usize,
    pub time_embedding_dim: usize,
    pub k_steps: usize,
    pub rho: f64,
    #[serde(default)]
    pub attention_routing: AttentionRouting,
}

impl Default for ModelConfig {
    /// Full-scale settings: 4 layers, 64 channels, 8 heads, 128-dim step embedding.
    fn default() -> Self {
        ModelConfig {
            residual_layers: 4,
            residual_channels: 64,
            attention_heads: 8,
            time_embedding_dim: 128,
            k_steps: 2,
            rho: 0.1,
            attention_routing: AttentionRouting::Prior,
        }
    }
}

impl ModelConfig {
    /// Small configuration for CPU runs and tests.
    pub fn desk() -> Self {
        ModelConfig {
            residual_layers: 2,
            residual_channels: 16,
            attention_heads: 2,
            time_embedding_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.residual_layers > 0
            && self.residual_channels > 0
            && self.attention_heads > 0
            && self.time_embedding_dim > 0;
        if !positive {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.residual_channels % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "{} channels not divisible by {} heads",
                self.residual_channels, self.attention_heads
            )));
        }
        if self.time_embedding_dim % 2 != 0 {
            return Err(Error::Config("time embedding dimension must be even".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("graph coefficient {} outside [0, 1]", self.rho)));
        }
        Ok(())
    }
}

/// Learnable weights as one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let values = Layout::new(&config).init(rng);
        Ok(ModelParams { config, values })
    }

    pub fn from_flat(config: ModelConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let want = Self::count(&config);
        if values.len() != want {
            return Err(Error::shape(format!("{want} parameters"), format!("{}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(ModelParams { config, values })
    }

    /// Number of parameters a configuration needs.
    pub fn count(config: &ModelConfig) -> usize {
        Layout::new(config).total
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Zeroes the attention output projections and Diff-GCN filters, so every
    /// mixer branch reduces to the normalized residual input.
    pub fn zero_branch_outputs(&mut self) {
        for s in Layout::new(&self.config).branch_output_slots() {
            self.values[s.offset..s.offset + s.size()].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// One window to impute.
#[derive(Clone, Debug)]
pub struct ImputationTask<'g> {
    /// Values with arbitrary placeholders where not observed.
    pub observed: Grid,
    pub observed_mask: Mask,
    /// Positions the model generates.
    pub target_mask: Mask,
    /// Coarse interpolation of the conditioning entries.
    pub conditioner: Grid,
    pub graph: &'g RoadGraph,
}

impl<'g> ImputationTask<'g> {
    /// Builds a task whose targets are drawn from `observed_mask`; the
    /// conditioner interpolates only the remaining observed entries.
    /// `fill` is used for nodes with no conditioning entry at all.
    pub fn new(observed: Grid, observed_mask: Mask, target_mask: Mask, graph: &'g RoadGraph, fill: f64) -> Result<Self> {
        observed.ensure_shape(observed_mask.shape())?;
        observed.ensure_shape(target_mask.shape())?;
        if observed.nodes() != graph.n_nodes() {
            return Err(Error::shape(
                format!("{} nodes", graph.n_nodes()),
                format!("{} nodes", observed.nodes()),
            ));
        }
        let cond = observed_mask.and_not(&target_mask);
        let conditioner = lin_interp(&observed, &cond, fill)?;
        Ok(ImputationTask {
            observed,
            observed_mask,
            target_mask,
            conditioner,
            graph,
        })
    }

    /// Pure inference: every unobserved entry is a target.
    pub fn for_inference(observed: Grid, observed_mask: Mask, graph: &'g RoadGraph, fill: f64) -> Result<Self> {
        let target = observed_mask.not();
        Self::new(observed, observed_mask, target, graph, fill)
    }

    pub fn conditioning_mask(&self) -> Mask {
        self.observed_mask.and_not(&self.target_mask)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.observed.shape()
    }
}

/// Per-node linear interpolation over time between mask-true entries.
/// Leading and trailing gaps copy the nearest entry; nodes without any entry
/// get `fill`.
pub fn lin_interp(values: &Grid, mask: &Mask, fill: f64) -> Result<Grid> {
    values.ensure_shape(mask.shape())?;
    let (len, nodes) = values.shape();
    let mut out = Grid::filled(len, nodes, fill);
    for n in 0..nodes {
        let known: Vec<usize> = (0..len).filter(|&l| mask.get(l, n)).collect();
        let (Some(&first), Some(&last)) = (known.first(), known.last()) else {
            continue;
        };
        for l in 0..=first {
            out.set(l, n, values.get(first, n));
        }
        for l in last..len {
            out.set(l, n, values.get(last, n));
        }
        for pair in known.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (va, vb) = (values.get(a, n), values.get(b, n));
            out.set(a, n, va);
            for l in a + 1..b {
                let w = (l - a) as f64 / (b - a) as f64;
                out.set(l, n, va + w * (vb - va));
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("interpolated conditioner".into()));
    }
    Ok(out)
}

/// Sinusoidal embedding of a (possibly fractional) step position as
/// interleaved `(sin, cos)` pairs with frequencies from 1 down to 10⁻⁴.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("embedding dimension {dim} must be positive and even")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let exponent = if half > 1 { -4.0 * i as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = math::exp(exponent * core::f64::consts::LN_10);
        out.push(math::sin(t * freq));
        out.push(math::cos(t * freq));
    }
    Ok(out)
}

struct Net<'a, 'g> {
    tape: Tape<'g>,
    layout: &'a Layout,
    params: &'a [f64],
    cfg: &'a ModelConfig,
    rows: usize,
}

impl<'a, 'g> Net<'a, 'g> {
    fn param(&mut self, s: Slot) -> Id {
        self.tape.param(self.params, s.offset, s.rows, s.cols)
    }

    fn linear(&mut self, x: Id, l: &Linear) -> Id {
        let w = self.param(l.w);
        let b = self.param(l.b);
        let y = self.tape.matmul(x, w);
        self.tape.add_row(y, b)
    }

    fn norm(&mut self, x: Id, n: &Norm) -> Id {
        let g = self.param(n.gain);
        let b = self.param(n.bias);
        self.tape.layer_norm(x, g, b)
    }

    fn attention(&mut self, query: Id, key: Id, value: Id, at: &layout::Attention, axis: Axis) -> Id {
        let q = self.linear(query, &at.q);
        let k = self.linear(key, &at.k);
        let v = self.linear(value, &at.v);
        let o = self.tape.attention(q, k, v, axis, self.cfg.attention_heads);
        self.linear(o, &at.o)
    }

    fn diff_gcn(&mut self, x: Id, gcn: &layout::Gcn) -> Id {
        let mut fwd = x;
        let mut rev = x;
        let mut total: Option<Id> = None;
        for k in 0..=self.cfg.k_steps {
            if k > 0 {
                fwd = self.tape.walk(fwd, Walk::Forward);
                rev = self.tape.walk(rev, Walk::Reverse);
            }
            let s = graph::hop_scale(k, self.cfg.rho);
            if s == 0.0 {
                continue;
            }
            let wf = self.param(gcn.forward[k]);
            let wr = self.param(gcn.reverse[k]);
            let a = self.tape.matmul(fwd, wf);
            let b = self.tape.matmul(rev, wr);
            let mut term = self.tape.add(a, b);
            if s != 1.0 {
                term = self.tape.scale(term, s);
            }
            total = Some(match total {
                Some(t) => self.tape.add(t, term),
                None => term,
            });
        }
        total.expect("hop 0 always contributes")
    }

    /// Residual-normalized temporal, spatial and graph branches. With
    /// `cond` set, attention queries and values (or keys and values) come
    /// from it.
    fn mix(&mut self, x: Id, cond: Option<Id>, m: &Mixer) -> (Id, Id, Id) {
        let routing = self.cfg.attention_routing;
        let route = |x: Id| match (cond, routing) {
            (None, _) => (x, x, x),
            (Some(c), AttentionRouting::Prior) => (c, x, c),
            (Some(c), AttentionRouting::Conventional) => (x, c, c),
        };
        let (q, k, v) = route(x);
        let a = self.attention(q, k, v, &m.temporal, Axis::Time);
        let a = self.tape.add(a, x);
        let tem = self.norm(a, &m.temporal_norm);

        let spa_in = if cond.is_some() { tem } else { x };
        let (q, k, v) = route(spa_in);
        let a = self.attention(q, k, v, &m.spatial, Axis::Node);
        let a = self.tape.add(a, spa_in);
        let spa = self.norm(a, &m.spatial_norm);

        let gcn_in = if cond.is_some() { spa } else { x };
        let g = self.diff_gcn(gcn_in, &m.gcn);
        let g = self.tape.add(g, gcn_in);
        let gcn = self.norm(g, &m.gcn_norm);
        (tem, spa, gcn)
    }

    /// Sinusoidal embedding of each row's time index.
    fn positions(&mut self, len: usize) -> Result<Id> {
        let dim = self.cfg.time_embedding_dim;
        let nodes = self.rows / len;
        let mut data = Vec::with_capacity(self.rows * dim);
        for l in 0..len {
            let e = time_embedding(l as f64, dim)?;
            for _ in 0..nodes {
                data.extend_from_slice(&e);
            }
        }
        Ok(self.tape.constant(data, self.rows, dim))
    }

    fn prior(&mut self, chi: &Grid) -> Result<Id> {
        let x = self.tape.constant(chi.as_slice().to_vec(), self.rows, 1);
        let p = self.layout.prior.clone();
        let h = self.linear(x, &p.input);
        let pos = self.positions(chi.len())?;
        let pos = self.linear(pos, &p.position);
        let h = self.tape.add(h, pos);
        let (tem, spa, gcn) = self.mix(h, None, &p.mixer);
        let s = self.tape.add(tem, spa);
        let s = self.tape.add(s, gcn);
        let hidden = self.linear(s, &p.mlp_hidden);
        let hidden = self.tape.relu(hidden);
        Ok(self.linear(hidden, &p.mlp_out))
    }

    fn noise(&mut self, cond: Id, chi: &Grid, noisy: &[f64], t: f64, target: &Mask) -> Result<Id> {
        let mut input = Vec::with_capacity(self.rows * 2);
        for (c, x) in chi.as_slice().iter().zip(noisy) {
            input.push(*c);
            input.push(*x);
        }
        let x = self.tape.constant(input, self.rows, 2);
        let layout = self.layout;
        let y = self.linear(x, &layout.noise_input);
        let pos = self.positions(chi.len())?;
        let pos = self.linear(pos, &layout.noise_position);
        let y = self.tape.add(y, pos);
        let mut y = self.tape.relu(y);

        let emb = time_embedding(t, self.cfg.time_embedding_dim)?;
        let e = self.tape.constant(emb, 1, self.cfg.time_embedding_dim);
        let e = self.linear(e, &layout.embed_hidden);
        let e = self.tape.silu(e);
        let e = self.linear(e, &layout.embed_out);
        let e = self.tape.silu(e);

        let c = self.cfg.residual_channels;
        let inv_sqrt2 = core::f64::consts::FRAC_1_SQRT_2;
        let mut skip: Option<Id> = None;
        for block in &layout.blocks {
            let step = self.linear(e, &block.step);
            let z = self.tape.add_row(y, step);
            let (_, _, z) = self.mix(z, Some(cond), &block.mixer);
            let m = self.linear(z, &block.mid);
            let gate = self.tape.columns(m, 0, c);
            let filter = self.tape.columns(m, c, c);
            let gate = self.tape.sigmoid(gate);
            let filter = self.tape.tanh(filter);
            let h = self.tape.mul(gate, filter);
            let o = self.linear(h, &block.out);
            let res = self.tape.columns(o, 0, c);
            let sk = self.tape.columns(o, c, c);
            let sum = self.tape.add(y, res);
            y = self.tape.scale(sum, inv_sqrt2);
            skip = Some(match skip {
                Some(s) => self.tape.add(s, sk),
                None => sk,
            });
        }
        let skip = skip.expect("at least one residual layer");
        let skip = self.tape.scale(skip, 1.0 / math::sqrt(layout.blocks.len() as f64));
        let h = self.linear(skip, &layout.skip);
        let h = self.tape.relu(h);
        let out = self.linear(h, &layout.output);
        Ok(self.tape.mask_rows(out, target.as_slice().to_vec()))
    }
}

fn check_inputs(task: &ImputationTask<'_>, x_t: &Grid, params: &ModelParams) -> Result<()> {
    x_t.ensure_shape(task.shape())?;
    task.conditioner.ensure_shape(task.shape())?;
    if task.graph.n_nodes() != task.shape().1 {
        return Err(Error::shape(format!("{} nodes", task.graph.n_nodes()), format!("{} nodes", task.shape().1)));
    }
    if !x_t.is_finite() {
        return Err(Error::NonFinite("noisy input".into()));
    }
    if !task.conditioner.is_finite() {
        return Err(Error::NonFinite("conditioner".into()));
    }
    params.config.validate()
}

fn masked_input(x_t: &Grid, target: &Mask) -> Vec<f64> {
    x_t.as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(v, m)| if *m { *v } else { 0.0 })
        .collect()
}

fn run<'a, 'g>(
    task: &ImputationTask<'g>,
    x_t: &Grid,
    t: f64,
    params: &'a ModelParams,
    layout: &'a Layout,
) -> Result<(Net<'a, 'g>, Id)> {
    check_inputs(task, x_t, params)?;
    let (len, nodes) = task.shape();
    let mut net = Net {
        tape: Tape::new(task.graph, len),
        layout,
        params: &params.values,
        cfg: &params.config,
        rows: len * nodes,
    };
    let cond = net.prior(&task.conditioner)?;
    let noisy = masked_input(x_t, &task.target_mask);
    let out = net.noise(cond, &task.conditioner, &noisy, t, &task.target_mask)?;
    Ok((net, out))
}

/// Predicted noise for the noisy field `x_t` at step position `t`; zero off
/// the target mask.
pub fn noise_predict(x_t: &Grid, task: &ImputationTask<'_>, t: f64, params: &ModelParams) -> Result<Grid> {
    let layout = Layout::new(&params.config);
    let (net, out) = run(task, x_t, t, params, &layout)?;
    let (len, nodes) = task.shape();
    Grid::from_vec(len, nodes, net.tape.value(out).to_vec())
}

/// Conditional feature prior `H_cond` of the coarse interpolation.
pub fn conditional_prior(chi: &Grid, graph: &RoadGraph, params: &ModelParams) -> Result<Features> {
    params.config.validate()?;
    if chi.nodes() != graph.n_nodes() {
        return Err(Error::shape(format!("{} nodes", graph.n_nodes()), format!("{} nodes", chi.nodes())));
    }
    if !chi.is_finite() {
        return Err(Error::NonFinite("conditioner".into()));
    }
    let layout = Layout::new(&params.config);
    let (len, nodes) = chi.shape();
    let mut net = Net {
        tape: Tape::new(graph, len),
        layout: &layout,
        params: &params.values,
        cfg: &params.config,
        rows: len * nodes,
    };
    let out = net.prior(chi)?;
    Features::new(len, nodes, params.config.residual_channels, net.tape.value(out).to_vec())
}

/// Squared error against `noise` over target positions, summed (not
/// averaged), and its gradient added into `grads`.
pub fn loss_and_grad(
    x_t: &Grid,
    noise: &Grid,
    task: &ImputationTask<'_>,
    t: f64,
    params: &ModelParams,
    grads: &mut [f64],
    grad_scale: f64,
) -> Result<f64> {
    if grads.len() != params.len() {
        return Err(Error::shape(format!("{} gradients", params.len()), format!("{}", grads.len())));
    }
    noise.ensure_shape(task.shape())?;
    let layout = Layout::new(&params.config);
    let (net, out) = run(task, x_t, t, params, &layout)?;
    let pred = net.tape.value(out);
    let mut seed = vec![0.0; pred.len()];
    let mut loss = 0.0;
    for (k, m) in task.target_mask.as_slice().iter().enumerate() {
        if *m {
            let d = pred[k] - noise.as_slice()[k];
            loss += d * d;
            seed[k] = 2.0 * d * grad_scale;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    net.tape.backward(out, seed, grads);
    Ok(loss)
}

/// The trained network as a sampler predictor.
#[derive(Clone, Copy, Debug)]
pub struct NetworkPredictor<'p> {
    pub params: &'p ModelParams,
}

impl NoisePredictor for NetworkPredictor<'_> {
    fn eval(&self, x_t: &Grid, task: &ImputationTask<'_>, t: f64) -> Result<Grid> {
        noise_predict(x_t, task, t, self.params)
    }
}
