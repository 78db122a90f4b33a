//! Training noise schedules and short inference schedules aligned onto them.
//!
//! Equations are written with 1-based steps `t ∈ {1..T}`; storage is 0-based,
//! so `betas[i]` holds `β_{i+1}` and `alpha_bars[i]` holds `ᾱ_{i+1}`. A
//! fractional *step position* `p` used by samplers and the predictor's time
//! input is 0-based as well: `p = i` means `ᾱ_{i+1}`, and `p = -1` stands for
//! clean data (`ᾱ_0 := 1`).

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    Quadratic,
}

/// Offset `s` of the cosine schedule.
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSchedule {
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl TrainingSchedule {
    /// Builds a `steps`-long schedule. With a single step every kind yields
    /// `[beta_start]`.
    pub fn new(kind: ScheduleKind, beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_1 <= beta_T < 1, got beta_1 = {beta_start}, beta_T = {beta_end}"
            )));
        }
        let betas = if steps == 1 {
            alloc::vec![beta_start]
        } else {
            let last = (steps - 1) as f64;
            match kind {
                ScheduleKind::Linear => (0..steps)
                    .map(|i| match i {
                        0 => beta_start,
                        i if i == steps - 1 => beta_end,
                        i => beta_start + (i as f64 / last) * (beta_end - beta_start),
                    })
                    .collect(),
                ScheduleKind::Quadratic => {
                    let (lo, hi) = (math::sqrt(beta_start), math::sqrt(beta_end));
                    (0..steps)
                        .map(|i| match i {
                            0 => beta_start,
                            i if i == steps - 1 => beta_end,
                            i => {
                                let r = lo + (i as f64 / last) * (hi - lo);
                                r * r
                            }
                        })
                        .collect()
                }
                ScheduleKind::Cosine => cosine_betas(steps),
            }
        };
        let mut schedule = Self::from_betas(betas)?;
        schedule.kind = kind;
        schedule.beta_start = beta_start;
        schedule.beta_end = beta_end;
        Ok(schedule)
    }

    /// Rebuilds the derived arrays from an explicit β sequence.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, &b)| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidRange(format!("beta[{i}] = {b} is outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(TrainingSchedule {
            kind: ScheduleKind::Linear,
            beta_start: betas[0],
            beta_end: betas[betas.len() - 1],
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `ᾱ` at a fractional 0-based step position, interpolating `√ᾱ` linearly
    /// between neighbouring steps. Positions at or below `-1` give 1 (clean
    /// data); positions past the last step clamp to `ᾱ_T`.
    pub fn alpha_bar_at(&self, position: f64) -> f64 {
        let last = (self.steps() - 1) as f64;
        if position <= -1.0 {
            return 1.0;
        }
        if position >= last {
            return self.alpha_bars[self.steps() - 1];
        }
        let lo = math::floor(position);
        let frac = position - lo;
        let root_at = |i: f64| {
            if i < 0.0 {
                1.0
            } else {
                math::sqrt(self.alpha_bars[i as usize])
            }
        };
        if frac == 0.0 {
            return if lo < 0.0 { 1.0 } else { self.alpha_bars[lo as usize] };
        }
        let r = root_at(lo) + frac * (root_at(lo + 1.0) - root_at(lo));
        r * r
    }
}

fn cosine_betas(steps: usize) -> Vec<f64> {
    let t_total = steps as f64;
    let f = |t: f64| {
        let c = math::cos(((t / t_total + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * core::f64::consts::FRAC_PI_2);
        c * c
    };
    let f0 = f(0.0);
    (1..=steps)
        .map(|t| {
            let prev = f((t - 1) as f64) / f0;
            let cur = f(t as f64) / f0;
            (1.0 - cur / prev).min(COSINE_MAX_BETA)
        })
        .collect()
}

/// A short user-defined variance schedule `{ξ_c}` mapped onto fractional
/// training step positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedSchedule {
    xis: Vec<f64>,
    phis: Vec<f64>,
    phi_bars: Vec<f64>,
    xi_tildes: Vec<f64>,
    t_aligned: Vec<f64>,
}

impl AlignedSchedule {
    pub fn new(xis: &[f64], training: &TrainingSchedule) -> Result<Self> {
        if xis.is_empty() {
            return Err(Error::InvalidRange("aligned schedule needs at least one step".into()));
        }
        if xis.len() >= training.steps() {
            return Err(Error::InvalidRange(format!(
                "aligned schedule has {} steps, must be fewer than the {} training steps",
                xis.len(),
                training.steps()
            )));
        }
        if let Some((i, x)) = xis.iter().enumerate().find(|(_, &x)| !(x > 0.0 && x < 1.0)) {
            return Err(Error::InvalidRange(format!("xi[{i}] = {x} is outside (0, 1)")));
        }
        let phis: Vec<f64> = xis.iter().map(|x| 1.0 - x).collect();
        let mut phi_bars = Vec::with_capacity(phis.len());
        let mut acc = 1.0;
        for p in &phis {
            acc *= p;
            phi_bars.push(acc);
        }
        let xi_tildes = (0..xis.len())
            .map(|c| {
                let prev = if c == 0 { 1.0 } else { phi_bars[c - 1] };
                (1.0 - prev) / (1.0 - phi_bars[c]) * xis[c]
            })
            .collect();

        let roots: Vec<f64> = training.alpha_bars().iter().map(|a| math::sqrt(*a)).collect();
        let t_aligned = phi_bars
            .iter()
            .enumerate()
            .map(|(c, &pb)| align_position(&roots, math::sqrt(pb)).ok_or(Error::OutOfBracket {
                index: c,
                value: pb,
                low: training.alpha_bars()[training.steps() - 1],
                high: training.alpha_bars()[0],
            }))
            .collect::<Result<Vec<f64>>>()?;

        Ok(AlignedSchedule {
            xis: xis.to_vec(),
            phis,
            phi_bars,
            xi_tildes,
            t_aligned,
        })
    }

    /// Number of accelerated steps `T_acc`.
    pub fn steps(&self) -> usize {
        self.xis.len()
    }

    pub fn xis(&self) -> &[f64] {
        &self.xis
    }

    pub fn phis(&self) -> &[f64] {
        &self.phis
    }

    pub fn phi_bars(&self) -> &[f64] {
        &self.phi_bars
    }

    /// Posterior variances; the first entry is 0 since `φ̄_0 = 1`.
    pub fn xi_tildes(&self) -> &[f64] {
        &self.xi_tildes
    }

    /// Fractional 0-based training positions, one per `φ̄_c`.
    pub fn t_aligned(&self) -> &[f64] {
        &self.t_aligned
    }
}

/// Finds `t` with `roots[t+1] <= root <= roots[t]` and returns the
/// interpolated position. `roots` is strictly decreasing.
fn align_position(roots: &[f64], root: f64) -> Option<f64> {
    let last = roots.len() - 1;
    if !(root <= roots[0] && root >= roots[last]) {
        return None;
    }
    // first index whose root is < target; the bracket starts one before it
    let idx = roots.partition_point(|&r| r >= root);
    let t = idx.saturating_sub(1).min(last - 1);
    let (hi, lo) = (roots[t], roots[t + 1]);
    Some(t as f64 + (hi - root) / (hi - lo))
}

/// Serializable schedule definition: `{kind, beta_1, beta_T, T, xis}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub beta_1: f64,
    #[serde(rename = "beta_T")]
    pub beta_t: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xis: Option<Vec<f64>>,
}

impl ScheduleSpec {
    /// Quadratic 50-step training schedule with the six-step accelerated
    /// schedule used as the full-scale default.
    pub fn reference() -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Quadratic,
            beta_1: 1e-4,
            beta_t: 0.2,
            steps: 50,
            xis: Some(alloc::vec![1e-4, 1e-3, 0.2, 0.3, 0.5, 0.9]),
        }
    }

    pub fn training(&self) -> Result<TrainingSchedule> {
        TrainingSchedule::new(self.kind, self.beta_1, self.beta_t, self.steps)
    }

    pub fn aligned(&self, training: &TrainingSchedule) -> Result<Option<AlignedSchedule>> {
        self.xis
            .as_deref()
            .map(|x| AlignedSchedule::new(x, training))
            .transpose()
    }
}
