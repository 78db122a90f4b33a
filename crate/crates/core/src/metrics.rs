//! Masked point-error metrics and the quantile-loss CRPS approximation.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::math;

/// Quantile levels `0.05, 0.10, …, 0.95`.
pub const CRPS_LEVELS: usize = 19;

fn check(truth: &Grid, imputed: &Grid, mask: &Mask) -> Result<()> {
    imputed.ensure_shape(truth.shape())?;
    if mask.shape() != truth.shape() {
        return Err(Error::shape(
            alloc::format!("{:?}", truth.shape()),
            alloc::format!("{:?}", mask.shape()),
        ));
    }
    if !mask.any() {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

fn masked_errors<'a>(truth: &'a Grid, imputed: &'a Grid, mask: &'a Mask) -> impl Iterator<Item = f64> + 'a {
    truth
        .as_slice()
        .iter()
        .zip(imputed.as_slice())
        .zip(mask.as_slice())
        .filter(|(_, m)| **m)
        .map(|((t, i), _)| t - i)
}

pub fn mae(truth: &Grid, imputed: &Grid, mask: &Mask) -> Result<f64> {
    check(truth, imputed, mask)?;
    let n = mask.count() as f64;
    Ok(masked_errors(truth, imputed, mask).map(f64::abs).sum::<f64>() / n)
}

pub fn mse(truth: &Grid, imputed: &Grid, mask: &Mask) -> Result<f64> {
    check(truth, imputed, mask)?;
    let n = mask.count() as f64;
    Ok(masked_errors(truth, imputed, mask).map(|e| e * e).sum::<f64>() / n)
}

pub fn rmse(truth: &Grid, imputed: &Grid, mask: &Mask) -> Result<f64> {
    mse(truth, imputed, mask).map(math::sqrt)
}

/// Pinball loss `(ω − 1{x < q})(x − q)`.
pub fn quantile_loss(q_value: f64, truth: f64, omega: f64) -> f64 {
    let indicator = if truth < q_value { 1.0 } else { 0.0 };
    (omega - indicator) * (truth - q_value)
}

/// Linear interpolation between order statistics of an ascending slice.
pub fn empirical_quantile(sorted: &[f64], omega: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * omega;
    let lo = math::floor(h) as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    s
}

/// Average of `2Λ_ω` over `levels` equally spaced interior quantile levels.
pub fn quantile_score(samples: &[f64], truth: f64, levels: usize) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            have: samples.len(),
        });
    }
    let s = sorted(samples);
    let step = 1.0 / (levels + 1) as f64;
    let total: f64 = (1..=levels)
        .map(|i| {
            let omega = i as f64 * step;
            2.0 * quantile_loss(empirical_quantile(&s, omega), truth, omega)
        })
        .sum();
    Ok(total / levels as f64)
}

/// CRPS of one point from its sample ensemble, 19 quantile levels.
pub fn crps_point(samples: &[f64], truth: f64) -> Result<f64> {
    quantile_score(samples, truth, CRPS_LEVELS)
}

/// Imputed samples of one window sharing a target mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEnsemble {
    pub samples: Vec<Grid>,
    pub mask: Mask,
}

impl SampleEnsemble {
    pub fn new(samples: Vec<Grid>, mask: Mask) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.shape() != mask.shape()) {
            return Err(Error::shape(
                alloc::format!("{:?}", mask.shape()),
                alloc::format!("{:?}", s.shape()),
            ));
        }
        Ok(SampleEnsemble { samples, mask })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Values of every sample at one flat position.
    pub fn column(&self, index: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.as_slice()[index]).collect()
    }

    /// Elementwise median across samples.
    pub fn median(&self) -> Grid {
        let (len, nodes) = self.mask.shape();
        let values = (0..len * nodes)
            .map(|k| empirical_quantile(&sorted(&self.column(k)), 0.5))
            .collect();
        Grid::from_vec(len, nodes, values).expect("shape checked on construction")
    }
}

/// Unweighted mean of [`crps_point`] over the masked positions.
pub fn crps_average(ensemble: &SampleEnsemble, truth: &Grid, mask: &Mask) -> Result<f64> {
    let (sum, count) = crps_sum(ensemble, truth, mask)?;
    Ok(sum / count as f64)
}

fn crps_sum(ensemble: &SampleEnsemble, truth: &Grid, mask: &Mask) -> Result<(f64, usize)> {
    if mask.shape() != truth.shape() || ensemble.mask.shape() != truth.shape() {
        return Err(Error::shape(
            alloc::format!("{:?}", truth.shape()),
            alloc::format!("{:?}", mask.shape()),
        ));
    }
    if !mask.any() {
        return Err(Error::EmptyMask);
    }
    let mut sum = 0.0;
    for (k, _) in mask.as_slice().iter().enumerate().filter(|(_, m)| **m) {
        sum += crps_point(&ensemble.column(k), truth.as_slice()[k])?;
    }
    Ok((sum, mask.count()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub node: usize,
    pub n_eval: usize,
    pub mae: f64,
    pub rmse: f64,
    #[serde(default)]
    pub crps: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    /// Mean 19-level CRPS over evaluated points, in data units.
    pub crps: Option<f64>,
    /// `crps` divided by the mean absolute truth over the same points.
    pub crps_normalized: Option<f64>,
    pub n_eval: usize,
    pub per_node: Vec<NodeReport>,
}

/// Accumulates metrics across several windows.
#[derive(Clone, Debug, Default)]
pub struct ReportBuilder {
    abs: f64,
    sq: f64,
    count: usize,
    crps: f64,
    crps_count: usize,
    abs_truth: f64,
    nodes: Vec<NodeAcc>,
}

#[derive(Clone, Debug, Default)]
struct NodeAcc {
    abs: f64,
    sq: f64,
    count: usize,
    crps: f64,
    crps_count: usize,
}

impl ReportBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one window; `ensemble` is optional and enables CRPS.
    pub fn add(&mut self, truth: &Grid, point: &Grid, ensemble: Option<&SampleEnsemble>, mask: &Mask) -> Result<()> {
        point.ensure_shape(truth.shape())?;
        if mask.shape() != truth.shape() {
            return Err(Error::shape(
                alloc::format!("{:?}", truth.shape()),
                alloc::format!("{:?}", mask.shape()),
            ));
        }
        let nodes = truth.nodes();
        if self.nodes.len() < nodes {
            self.nodes.resize(nodes, NodeAcc::default());
        }
        for (k, _) in mask.as_slice().iter().enumerate().filter(|(_, m)| **m) {
            let node = k % nodes;
            let e = truth.as_slice()[k] - point.as_slice()[k];
            self.abs += e.abs();
            self.sq += e * e;
            self.count += 1;
            let acc = &mut self.nodes[node];
            acc.abs += e.abs();
            acc.sq += e * e;
            acc.count += 1;
            if let Some(ens) = ensemble {
                let c = crps_point(&ens.column(k), truth.as_slice()[k])?;
                self.crps += c;
                self.crps_count += 1;
                self.abs_truth += truth.as_slice()[k].abs();
                acc.crps += c;
                acc.crps_count += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<EvalReport> {
        if self.count == 0 {
            return Err(Error::EmptyMask);
        }
        let n = self.count as f64;
        let mse = self.sq / n;
        let (crps, crps_normalized) = if self.crps_count > 0 {
            let c = self.crps / self.crps_count as f64;
            let scale = self.abs_truth / self.crps_count as f64;
            (Some(c), if scale > 0.0 { Some(c / scale) } else { None })
        } else {
            (None, None)
        };
        let per_node = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, a)| a.count > 0)
            .map(|(node, a)| NodeReport {
                node,
                n_eval: a.count,
                mae: a.abs / a.count as f64,
                rmse: math::sqrt(a.sq / a.count as f64),
                crps: (a.crps_count > 0).then(|| a.crps / a.crps_count as f64),
            })
            .collect();
        Ok(EvalReport {
            mae: self.abs / n,
            mse,
            rmse: math::sqrt(mse),
            crps,
            crps_normalized,
            n_eval: self.count,
            per_node,
        })
    }
}
