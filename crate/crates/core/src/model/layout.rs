//! Placement of every learnable tensor inside the flat parameter vector.

use alloc::vec::Vec;

use rand::Rng;

use super::ModelConfig;
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn size(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: Slot,
    pub b: Slot,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gain: Slot,
    pub bias: Slot,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct Gcn {
    pub forward: Vec<Slot>,
    pub reverse: Vec<Slot>,
}

/// Temporal attention, spatial attention and Diff-GCN, each followed by a
/// residual layer norm.
#[derive(Clone, Debug)]
pub(crate) struct Mixer {
    pub temporal: Attention,
    pub temporal_norm: Norm,
    pub spatial: Attention,
    pub spatial_norm: Norm,
    pub gcn: Gcn,
    pub gcn_norm: Norm,
}

#[derive(Clone, Debug)]
pub(crate) struct Prior {
    pub input: Linear,
    pub position: Linear,
    pub mixer: Mixer,
    pub mlp_hidden: Linear,
    pub mlp_out: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub step: Linear,
    pub mixer: Mixer,
    pub mid: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub prior: Prior,
    pub noise_input: Linear,
    pub noise_position: Linear,
    pub embed_hidden: Linear,
    pub embed_out: Linear,
    pub blocks: Vec<Block>,
    pub skip: Linear,
    pub output: Linear,
    pub total: usize,
    /// Slots initialised to zero rather than randomly.
    zeroed: Vec<Slot>,
    /// Layer-norm gains, initialised to one.
    ones: Vec<Slot>,
}

struct Alloc {
    next: usize,
    zeroed: Vec<Slot>,
    ones: Vec<Slot>,
}

impl Alloc {
    fn slot(&mut self, rows: usize, cols: usize) -> Slot {
        let s = Slot {
            offset: self.next,
            rows,
            cols,
        };
        self.next += rows * cols;
        s
    }

    fn linear(&mut self, cin: usize, cout: usize) -> Linear {
        let w = self.slot(cin, cout);
        let b = self.slot(1, cout);
        self.zeroed.push(b);
        Linear { w, b }
    }

    fn norm(&mut self, c: usize) -> Norm {
        let gain = self.slot(1, c);
        let bias = self.slot(1, c);
        self.ones.push(gain);
        self.zeroed.push(bias);
        Norm { gain, bias }
    }

    fn attention(&mut self, c: usize) -> Attention {
        Attention {
            q: self.linear(c, c),
            k: self.linear(c, c),
            v: self.linear(c, c),
            o: self.linear(c, c),
        }
    }

    fn gcn(&mut self, c: usize, k: usize) -> Gcn {
        Gcn {
            forward: (0..=k).map(|_| self.slot(c, c)).collect(),
            reverse: (0..=k).map(|_| self.slot(c, c)).collect(),
        }
    }

    fn mixer(&mut self, c: usize, k: usize) -> Mixer {
        Mixer {
            temporal: self.attention(c),
            temporal_norm: self.norm(c),
            spatial: self.attention(c),
            spatial_norm: self.norm(c),
            gcn: self.gcn(c, k),
            gcn_norm: self.norm(c),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let c = cfg.residual_channels;
        let e = cfg.time_embedding_dim;
        let k = cfg.k_steps;
        let mut a = Alloc {
            next: 0,
            zeroed: Vec::new(),
            ones: Vec::new(),
        };
        let prior = Prior {
            input: a.linear(1, c),
            position: a.linear(e, c),
            mixer: a.mixer(c, k),
            mlp_hidden: a.linear(c, c),
            mlp_out: a.linear(c, c),
        };
        let noise_input = a.linear(2, c);
        let noise_position = a.linear(e, c);
        let embed_hidden = a.linear(e, e);
        let embed_out = a.linear(e, e);
        let blocks = (0..cfg.residual_layers)
            .map(|_| Block {
                step: a.linear(e, c),
                mixer: a.mixer(c, k),
                mid: a.linear(c, 2 * c),
                out: a.linear(c, 2 * c),
            })
            .collect();
        let skip = a.linear(c, c);
        let output = a.linear(c, 1);
        a.zeroed.push(output.w);
        Layout {
            prior,
            noise_input,
            noise_position,
            embed_hidden,
            embed_out,
            blocks,
            skip,
            output,
            total: a.next,
            zeroed: a.zeroed,
            ones: a.ones,
        }
    }

    /// Glorot-uniform weights, zero biases, unit norm gains and a zero
    /// output projection.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut values = alloc::vec![0.0; self.total];
        let mut fill = |s: Slot, fan_scale: f64, rng: &mut R| {
            let bound = fan_scale * math::sqrt(6.0 / (s.rows + s.cols) as f64);
            for v in &mut values[s.offset..s.offset + s.size()] {
                *v = rng.random_range(-bound..bound);
            }
        };
        let linears = self.weight_slots();
        for (s, scale) in linears {
            fill(s, scale, rng);
        }
        for s in &self.zeroed {
            values[s.offset..s.offset + s.size()].iter_mut().for_each(|v| *v = 0.0);
        }
        for s in &self.ones {
            values[s.offset..s.offset + s.size()].iter_mut().for_each(|v| *v = 1.0);
        }
        values
    }

    /// Every weight matrix with its init scale, in layout order.
    fn weight_slots(&self) -> Vec<(Slot, f64)> {
        let mut out = Vec::new();
        let lin = |l: &Linear, out: &mut Vec<(Slot, f64)>| out.push((l.w, 1.0));
        let mixer = |m: &Mixer, out: &mut Vec<(Slot, f64)>| {
            for at in [&m.temporal, &m.spatial] {
                for l in [&at.q, &at.k, &at.v, &at.o] {
                    out.push((l.w, 1.0));
                }
            }
            let hops = m.gcn.forward.len() as f64;
            for s in m.gcn.forward.iter().chain(&m.gcn.reverse) {
                out.push((*s, 1.0 / math::sqrt(2.0 * hops)));
            }
        };
        lin(&self.prior.input, &mut out);
        lin(&self.prior.position, &mut out);
        mixer(&self.prior.mixer, &mut out);
        lin(&self.prior.mlp_hidden, &mut out);
        lin(&self.prior.mlp_out, &mut out);
        lin(&self.noise_input, &mut out);
        lin(&self.noise_position, &mut out);
        lin(&self.embed_hidden, &mut out);
        lin(&self.embed_out, &mut out);
        for b in &self.blocks {
            lin(&b.step, &mut out);
            mixer(&b.mixer, &mut out);
            lin(&b.mid, &mut out);
            lin(&b.out, &mut out);
        }
        lin(&self.skip, &mut out);
        lin(&self.output, &mut out);
        out
    }

    /// Slots of the attention output projections and Diff-GCN filters, the
    /// branch outputs that feed each residual norm.
    pub fn branch_output_slots(&self) -> Vec<Slot> {
        let mut out = Vec::new();
        let mut mixer = |m: &Mixer| {
            out.push(m.temporal.o.w);
            out.push(m.spatial.o.w);
            out.extend(m.gcn.forward.iter().chain(&m.gcn.reverse).copied());
        };
        mixer(&self.prior.mixer);
        for b in &self.blocks {
            mixer(&b.mixer);
        }
        out
    }
}
