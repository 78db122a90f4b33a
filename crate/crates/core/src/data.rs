//! Datasets, chronological splits, windowing, normalization and a synthetic
//! spatiotemporal generator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{gaussian_kernel_adjacency, KernelOptions, RoadGraph};
use crate::grid::{Grid, Mask};
use crate::math;
use crate::training::Example;

/// A multivariate sensor series. `values` is `timestamps × nodes`;
/// `distances` is a dense `N × N` matrix with `f64::INFINITY` for pairs
/// without a road connection.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub values: Grid,
    pub observed_mask: Mask,
    pub node_ids: Vec<String>,
    pub timestamps: Vec<i64>,
    pub distances: Vec<f64>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let (len, nodes) = self.values.shape();
        if self.observed_mask.shape() != (len, nodes) {
            return Err(Error::shape(format!("{len}x{nodes} mask"), format!("{:?}", self.observed_mask.shape())));
        }
        if self.node_ids.len() != nodes {
            return Err(Error::shape(format!("{nodes} node ids"), format!("{}", self.node_ids.len())));
        }
        if self.timestamps.len() != len {
            return Err(Error::shape(format!("{len} timestamps"), format!("{}", self.timestamps.len())));
        }
        if self.distances.len() != nodes * nodes {
            return Err(Error::shape(format!("{nodes}x{nodes} distances"), format!("{}", self.distances.len())));
        }
        if let Some(w) = self.timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Domain(format!("timestamps not strictly increasing at row {}", w + 1)));
        }
        if len > 2 {
            let step = self.timestamps[1] - self.timestamps[0];
            if let Some(w) = self.timestamps.windows(2).position(|w| w[1] - w[0] != step) {
                return Err(Error::Domain(format!("irregular timestamp interval at row {}", w + 1)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn nodes(&self) -> usize {
        self.values.nodes()
    }

    /// Fraction of entries natively missing.
    pub fn missing_fraction(&self) -> f64 {
        let total = self.observed_mask.as_slice().len();
        if total == 0 {
            return 0.0;
        }
        1.0 - self.observed_mask.count() as f64 / total as f64
    }

    pub fn graph(&self, kernel: &KernelOptions) -> Result<RoadGraph> {
        RoadGraph::from_distances(&self.distances, self.nodes(), kernel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Window start indices of one split, each covering `length` rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSet {
    pub split: Split,
    pub range: Range<usize>,
    pub length: usize,
    pub starts: Vec<usize>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn windows(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.starts.iter().map(move |&s| s..s + self.length)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

/// Chronological train/val/test ranges.
pub fn split_ranges(total: usize, ratios: SplitRatios) -> Result<[Range<usize>; 3]> {
    let r = [ratios.train, ratios.val, ratios.test];
    if r.iter().any(|v| !(*v >= 0.0)) || ((r[0] + r[1] + r[2]) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {r:?} must be non-negative and sum to 1")));
    }
    let cut = |x: f64| (math::floor(x * total as f64 + 1e-9) as usize).min(total);
    let a = cut(r[0]);
    let b = cut(r[0] + r[1]).max(a);
    Ok([0..a, a..b, b..total])
}

/// Splits `total` rows chronologically and cuts windows of length `len`:
/// training windows every `train_stride` rows, evaluation windows
/// non-overlapping.
pub fn split_and_window(total: usize, len: usize, ratios: SplitRatios, train_stride: usize) -> Result<[WindowSet; 3]> {
    if len == 0 || len > total {
        return Err(Error::InvalidRange(format!("window length {len} must be in 1..={total}")));
    }
    if train_stride == 0 {
        return Err(Error::Config("training stride must be positive".into()));
    }
    let [train, val, test] = split_ranges(total, ratios)?;
    let cut = |range: Range<usize>, stride: usize, split: Split| {
        let starts = if range.len() >= len {
            (range.start..=range.end - len).step_by(stride).collect()
        } else {
            Vec::new()
        };
        WindowSet {
            split,
            range,
            length: len,
            starts,
        }
    };
    let sets = [
        cut(train, train_stride, Split::Train),
        cut(val, len, Split::Val),
        cut(test, len, Split::Test),
    ];
    if sets[0].is_empty() {
        return Err(Error::InvalidRange(format!("training split too short for windows of {len}")));
    }
    Ok(sets)
}

/// Per-node z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits on observed entries of `rows` only. Nodes with no observed
    /// entry get mean 0; constant nodes get unit scale.
    pub fn fit(values: &Grid, mask: &Mask, rows: Range<usize>) -> Result<Self> {
        values.ensure_shape(mask.shape())?;
        if rows.end > values.len() {
            return Err(Error::InvalidRange(format!("rows {rows:?} exceed {} timestamps", values.len())));
        }
        let nodes = values.nodes();
        let mut mean = vec![0.0; nodes];
        let mut std = vec![1.0; nodes];
        for n in 0..nodes {
            let xs: Vec<f64> = rows.clone().filter(|&l| mask.get(l, n)).map(|l| values.get(l, n)).collect();
            if xs.is_empty() {
                continue;
            }
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
            mean[n] = m;
            if var > 1e-24 {
                std[n] = math::sqrt(var);
            }
        }
        Ok(Normalizer { mean, std })
    }

    fn check(&self, g: &Grid) -> Result<()> {
        if g.nodes() != self.mean.len() {
            return Err(Error::shape(format!("{} nodes", self.mean.len()), format!("{} nodes", g.nodes())));
        }
        Ok(())
    }

    pub fn normalize(&self, g: &Grid) -> Result<Grid> {
        self.check(g)?;
        Ok(Grid::from_fn(g.len(), g.nodes(), |l, n| (g.get(l, n) - self.mean[n]) / self.std[n]))
    }

    pub fn denormalize(&self, g: &Grid) -> Result<Grid> {
        self.check(g)?;
        Ok(Grid::from_fn(g.len(), g.nodes(), |l, n| g.get(l, n) * self.std[n] + self.mean[n]))
    }
}

/// Normalized training examples for every window of a set.
pub fn examples(values: &Grid, mask: &Mask, windows: &WindowSet, norm: &Normalizer) -> Result<Vec<Example>> {
    windows
        .windows()
        .map(|w| {
            Ok(Example {
                values: norm.normalize(&values.window(w.start, w.len()))?,
                observed_mask: mask.window(w.start, w.len()),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// Fraction of each value taken from neighbours' previous values.
    pub coupling: f64,
    /// Observation noise standard deviation relative to the largest
    /// sinusoid amplitude.
    pub noise: f64,
    /// Periods of the sinusoid components, in steps.
    pub periods: Vec<f64>,
    pub amplitudes: Vec<f64>,
    /// Phase change per unit of distance, controlling spatial smoothness.
    pub phase_gradient: f64,
    /// Pairs closer than this (in unit-square coordinates) become roads.
    pub radius: f64,
    /// Sampling interval in seconds.
    pub interval: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_nodes: 10,
            n_steps: 2000,
            seed: 7,
            coupling: 0.3,
            noise: 0.05,
            periods: vec![10.0, 29.0, 96.0],
            amplitudes: vec![1.0, 1.5, 2.0],
            phase_gradient: 0.1,
            radius: 0.4,
            interval: 300,
        }
    }
}

impl SynthConfig {
    pub fn new(n_nodes: usize, n_steps: usize, seed: u64) -> Self {
        SynthConfig {
            n_nodes,
            n_steps,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 2 {
            return Err(Error::InvalidRange(format!("need at least 2 nodes, got {}", self.n_nodes)));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidRange("need at least one step".into()));
        }
        if self.periods.is_empty() || self.periods.len() != self.amplitudes.len() {
            return Err(Error::Config("periods and amplitudes must be non-empty and equally long".into()));
        }
        if self.periods.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Config("periods must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.coupling) || !(self.noise >= 0.0) {
            return Err(Error::Config("coupling must be in [0, 1) and noise non-negative".into()));
        }
        if self.interval <= 0 {
            return Err(Error::Config("interval must be positive".into()));
        }
        Ok(())
    }
}

/// A generated dataset with the node positions used to build it.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub positions: Vec<(f64, f64)>,
    /// Phase of component `c` at node `i`, stored at `i * components + c`.
    pub phases: Vec<f64>,
    /// Per-node offset added to every value.
    pub base: Vec<f64>,
    /// Multiplier applied to the signal before adding `base`.
    pub scale: f64,
    /// Noise-free signal before coupling, `steps × nodes`.
    pub clean: Grid,
}

/// Random geometric road graph carrying phase-shifted sinusoid sums, mixed
/// with neighbours' previous values through the forward transition, plus
/// Gaussian observation noise. Fully observed.
pub fn synth_generate(config: &SynthConfig) -> Result<Synthetic> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_nodes;
    let positions: Vec<(f64, f64)> = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
    let dist = |i: usize, j: usize| {
        let (a, b) = (positions[i], positions[j]);
        math::sqrt((a.0 - b.0) * (a.0 - b.0) + (a.1 - b.1) * (a.1 - b.1))
    };

    // roads within the radius plus each node's nearest neighbour
    let mut distances = vec![f64::INFINITY; n * n];
    for i in 0..n {
        distances[i * n + i] = 0.0;
        let nearest = (0..n)
            .filter(|&j| j != i)
            .min_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)))
            .expect("at least two nodes");
        for j in 0..n {
            if j != i && (dist(i, j) < config.radius || j == nearest) {
                distances[i * n + j] = dist(i, j);
                distances[j * n + i] = dist(i, j);
            }
        }
    }
    let adjacency = gaussian_kernel_adjacency(&distances, n, &KernelOptions::default())?;
    let graph = RoadGraph::from_adjacency(adjacency, n)?;

    let k = config.periods.len();
    let directions: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * core::f64::consts::TAU).collect();
    let phases: Vec<f64> = (0..n * k)
        .map(|idx| {
            let (i, c) = (idx / k, idx % k);
            let (x, y) = positions[i];
            let along = x * math::cos(directions[c]) + y * math::sin(directions[c]);
            config.phase_gradient * core::f64::consts::TAU * along
        })
        .collect();
    let base: Vec<f64> = (0..n).map(|_| 50.0 + 15.0 * rng.random::<f64>()).collect();
    let scale = 5.0;
    let max_amp = config.amplitudes.iter().fold(0.0f64, |a, b| a.max(b.abs()));

    let clean = Grid::from_fn(config.n_steps, n, |l, i| {
        let mut s = 0.0;
        for c in 0..k {
            let w = core::f64::consts::TAU / config.periods[c];
            s += config.amplitudes[c] * math::sin(w * l as f64 + phases[i * k + c]);
        }
        s
    });

    let mut mixed = Grid::zeros(config.n_steps, n);
    let mut prev = clean.window(0, 1).into_vec();
    for l in 0..config.n_steps {
        let from_neighbours = graph.forward().apply(&prev, 1, 1);
        for i in 0..n {
            let v = (1.0 - config.coupling) * clean.get(l, i) + config.coupling * from_neighbours[i];
            mixed.set(l, i, v);
        }
        prev = mixed.window(l, 1).into_vec();
    }

    let noise_std = config.noise * max_amp;
    let values = Grid::from_fn(config.n_steps, n, |l, i| {
        let z: f64 = rng.sample(StandardNormal);
        base[i] + scale * (mixed.get(l, i) + noise_std * z)
    });
    let dataset = Dataset {
        values,
        observed_mask: Mask::full(config.n_steps, n),
        node_ids: (0..n).map(|i| format!("s{i}")).collect(),
        timestamps: (0..config.n_steps as i64).map(|l| l * config.interval).collect(),
        distances,
    };
    dataset.validate()?;
    Ok(Synthetic {
        dataset,
        positions,
        phases,
        base,
        scale,
        clean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_example() {
        let [train, val, test] = split_and_window(100, 10, SplitRatios::default(), 1).unwrap();
        assert_eq!(train.range, 0..70);
        assert_eq!(val.range, 70..80);
        assert_eq!(test.range, 80..100);
        assert_eq!(test.starts, vec![80, 90]);
        assert_eq!(val.starts, vec![70]);
        assert_eq!(train.len(), 61);
        assert!(split_and_window(100, 101, SplitRatios::default(), 1).is_err());
    }

    #[test]
    fn normalizer_round_trip() {
        let g = Grid::from_fn(20, 3, |l, n| (l * (n + 1)) as f64 + 0.5);
        let norm = Normalizer::fit(&g, &Mask::full(20, 3), 0..14).unwrap();
        let back = norm.denormalize(&norm.normalize(&g).unwrap()).unwrap();
        for (a, b) in back.as_slice().iter().zip(g.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn generator_is_deterministic_and_valid() {
        let cfg = SynthConfig::new(5, 200, 3);
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.dataset.values.is_finite());
        assert!(synth_generate(&SynthConfig::new(1, 10, 0)).is_err());
    }

    #[test]
    fn uncoupled_noiseless_is_pure_sinusoids() {
        let cfg = SynthConfig {
            coupling: 0.0,
            noise: 0.0,
            ..SynthConfig::new(4, 120, 11)
        };
        let s = synth_generate(&cfg).unwrap();
        let k = cfg.periods.len();
        for i in 0..4 {
            for l in 0..120 {
                let mut want = 0.0;
                for c in 0..k {
                    let arg = 2.0 * core::f64::consts::PI * l as f64 / cfg.periods[c] + s.phases[i * k + c];
                    want += cfg.amplitudes[c] * arg.sin();
                }
                let got = s.dataset.values.get(l, i);
                assert!((got - s.base[i] - s.scale * want).abs() < 1e-9);
            }
        }
    }
}
