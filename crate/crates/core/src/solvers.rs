//! Reverse-process samplers: the transfer part, the pseudo-numerical
//! gradient parts, reference DDPM/DDIM steps and the full FastSTI
//! orchestration with optional schedule alignment.
//!
//! Step positions are 0-based training indices: position `t` carries noise
//! level `alpha_bars[t]`, and position `-1` stands for clean data (`ᾱ = 1`).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::math;
use crate::model::ImputationTask;
use crate::schedule::{AlignedSchedule, TrainingSchedule};

/// A noise prediction `ε(x_t, χ, A, t)`. Must be deterministic and accept
/// fractional `t`.
pub trait NoisePredictor {
    fn eval(&self, x_t: &Grid, task: &ImputationTask<'_>, t: f64) -> Result<Grid>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn eval(&self, x_t: &Grid, task: &ImputationTask<'_>, t: f64) -> Result<Grid> {
        (**self).eval(x_t, task, t)
    }
}

fn check_level(name: &str, a: f64) -> Result<()> {
    if a > 0.0 && a <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {a} is outside (0, 1]")))
    }
}

/// Transfer part `ν(x_t, ε)`: moves `x_t` from noise level `abar_t` to
/// `abar_prev` along the deterministic path implied by the noise estimate.
pub fn transfer(x_t: &Grid, eps: &Grid, abar_t: f64, abar_prev: f64) -> Result<Grid> {
    check_level("abar_t", abar_t)?;
    check_level("abar_prev", abar_prev)?;
    eps.ensure_shape(x_t.shape())?;
    let x_coef = math::sqrt(abar_prev / abar_t);
    let denom = math::sqrt(abar_t)
        * (math::sqrt((1.0 - abar_prev) * abar_t) + math::sqrt((1.0 - abar_t) * abar_prev));
    let e_coef = if abar_prev == abar_t { 0.0 } else { (abar_prev - abar_t) / denom };
    let mut out = x_t.clone();
    for (o, e) in out.as_mut_slice().iter_mut().zip(eps.as_slice()) {
        *o = x_coef * *o - e_coef * e;
    }
    Ok(out)
}

pub fn ddim_step<P: NoisePredictor + ?Sized>(
    x_t: &Grid,
    predictor: &P,
    task: &ImputationTask<'_>,
    abar_t: f64,
    abar_prev: f64,
    t: f64,
) -> Result<Grid> {
    let eps = predictor.eval(x_t, task, t)?;
    transfer(x_t, &eps, abar_t, abar_prev)
}

/// Ancestral move from `abar_t` to `abar_prev` given a noise estimate, with
/// the effective per-move `β = 1 − ᾱ_t/ᾱ_prev`. `noise = None` gives the
/// posterior mean.
pub fn ddpm_transition(x_t: &Grid, eps: &Grid, abar_t: f64, abar_prev: f64, noise: Option<&Grid>) -> Result<Grid> {
    check_level("abar_t", abar_t)?;
    check_level("abar_prev", abar_prev)?;
    if abar_t >= abar_prev && abar_t < 1.0 {
        return Err(Error::Domain(format!("ancestral move needs abar_prev > abar_t, got {abar_prev} <= {abar_t}")));
    }
    eps.ensure_shape(x_t.shape())?;
    let alpha = abar_t / abar_prev;
    let beta = 1.0 - alpha;
    let e_coef = beta / math::sqrt(1.0 - abar_t);
    let inv_sqrt_alpha = 1.0 / math::sqrt(alpha);
    let sigma = math::sqrt((1.0 - abar_prev) / (1.0 - abar_t) * beta);
    let mut out = x_t.clone();
    for (k, o) in out.as_mut_slice().iter_mut().enumerate() {
        *o = inv_sqrt_alpha * (*o - e_coef * eps.as_slice()[k]);
        if let Some(z) = noise {
            *o += sigma * z.as_slice()[k];
        }
    }
    Ok(out)
}

/// Standard ancestral step at the 1-indexed training step `t`; no noise is
/// added at `t = 1`.
pub fn ddpm_step<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    x_t: &Grid,
    predictor: &P,
    task: &ImputationTask<'_>,
    schedule: &TrainingSchedule,
    t: usize,
    rng: &mut R,
) -> Result<Grid> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::InvalidRange(format!("step {t} outside 1..={}", schedule.steps())));
    }
    let eps = predictor.eval(x_t, task, (t - 1) as f64)?;
    eps.ensure_shape(x_t.shape())?;
    let abar = schedule.alpha_bars()[t - 1];
    let beta = schedule.betas()[t - 1];
    let alpha = schedule.alphas()[t - 1];
    let e_coef = beta / math::sqrt(1.0 - abar);
    let inv_sqrt_alpha = 1.0 / math::sqrt(alpha);
    let mut out = x_t.clone();
    for (o, e) in out.as_mut_slice().iter_mut().zip(eps.as_slice()) {
        *o = inv_sqrt_alpha * (*o - e_coef * e);
    }
    if t > 1 {
        let abar_prev = schedule.alpha_bars()[t - 2];
        let sigma = math::sqrt((1.0 - abar_prev) / (1.0 - abar) * beta);
        for o in out.as_mut_slice() {
            let z: f64 = rng.sample(StandardNormal);
            *o += sigma * z;
        }
    }
    Ok(out)
}

/// Most recent noise predictions, newest first, holding at most three.
#[derive(Clone, Debug, Default)]
pub struct SolverHistory {
    entries: Vec<Grid>,
}

impl SolverHistory {
    pub const CAPACITY: usize = 3;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, e: Grid) {
        self.entries.insert(0, e);
        self.entries.truncate(Self::CAPACITY);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `i = 0` is the newest entry.
    pub fn get(&self, i: usize) -> Option<&Grid> {
        self.entries.get(i)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

fn combine(terms: &[(f64, &Grid)], scale: f64) -> Result<Grid> {
    let shape = terms[0].1.shape();
    let mut out = Grid::zeros(shape.0, shape.1);
    for (w, g) in terms {
        g.ensure_shape(shape)?;
        for (o, v) in out.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *o += w * v;
        }
    }
    for o in out.as_mut_slice() {
        *o *= scale;
    }
    Ok(out)
}

fn need_history(history: &SolverHistory, needed: usize) -> Result<()> {
    if history.len() < needed {
        return Err(Error::InsufficientHistory {
            needed,
            have: history.len(),
        });
    }
    Ok(())
}

/// `(3e_t − e_{t+δ}) / 2`.
pub fn plms2_grad(history: &SolverHistory, e_t: &Grid) -> Result<Grid> {
    need_history(history, 1)?;
    combine(&[(3.0, e_t), (-1.0, &history.entries[0])], 0.5)
}

/// `(55e_t − 59e_{t+δ} + 37e_{t+2δ} − 9e_{t+3δ}) / 24`.
pub fn plms4_grad(history: &SolverHistory, e_t: &Grid) -> Result<Grid> {
    need_history(history, 3)?;
    let h = &history.entries;
    combine(&[(55.0, e_t), (-59.0, &h[0]), (37.0, &h[1]), (-9.0, &h[2])], 1.0 / 24.0)
}

/// Result of a multi-stage warmup step.
#[derive(Clone, Debug)]
pub struct StageStep {
    pub state: Grid,
    /// The combined gradient part `e′` used for the final transfer.
    pub combined: Grid,
    /// The first-stage prediction at the step's starting point.
    pub first: Grid,
}

/// Pseudo Heun step: predict, tentative transfer, predict again, average.
#[allow(clippy::too_many_arguments)]
pub fn ph2_step<P: NoisePredictor + ?Sized>(
    x_t: &Grid,
    predictor: &P,
    task: &ImputationTask<'_>,
    abar_t: f64,
    abar_prev: f64,
    t: f64,
    t_prev: f64,
) -> Result<StageStep> {
    let e1 = predictor.eval(x_t, task, t)?;
    let x1 = transfer(x_t, &e1, abar_t, abar_prev)?;
    let e2 = predictor.eval(&x1, task, t_prev)?;
    let combined = combine(&[(1.0, &e1), (1.0, &e2)], 0.5)?;
    let state = transfer(x_t, &combined, abar_t, abar_prev)?;
    Ok(StageStep {
        state,
        combined,
        first: e1,
    })
}

/// Pseudo Runge-Kutta step with stage weights `(1, 2, 2, 1) / 6`.
#[allow(clippy::too_many_arguments)]
pub fn prk4_step<P: NoisePredictor + ?Sized>(
    x_t: &Grid,
    predictor: &P,
    task: &ImputationTask<'_>,
    abar_t: f64,
    abar_mid: f64,
    abar_prev: f64,
    t: f64,
    t_mid: f64,
    t_prev: f64,
) -> Result<StageStep> {
    let e1 = predictor.eval(x_t, task, t)?;
    let x1 = transfer(x_t, &e1, abar_t, abar_mid)?;
    let e2 = predictor.eval(&x1, task, t_mid)?;
    let x2 = transfer(x_t, &e2, abar_t, abar_mid)?;
    let e3 = predictor.eval(&x2, task, t_mid)?;
    let x3 = transfer(x_t, &e3, abar_t, abar_prev)?;
    let e4 = predictor.eval(&x3, task, t_prev)?;
    let combined = combine(&[(1.0, &e1), (2.0, &e2), (2.0, &e3), (1.0, &e4)], 1.0 / 6.0)?;
    let state = transfer(x_t, &combined, abar_t, abar_prev)?;
    Ok(StageStep {
        state,
        combined,
        first: e1,
    })
}

/// A noise level paired with the time argument passed to the predictor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanPoint {
    pub abar: f64,
    pub t: f64,
}

/// The sequence of noise levels a sampler walks through. Step `i` moves
/// from `points[i]` to `points[i + 1]`; `mids[i]` is its half-step point.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    points: Vec<PlanPoint>,
    mids: Vec<PlanPoint>,
}

const CLEAN: PlanPoint = PlanPoint { abar: 1.0, t: -1.0 };

impl SamplingPlan {
    pub fn new(points: Vec<PlanPoint>, mids: Vec<PlanPoint>) -> Result<Self> {
        if points.len() < 2 || mids.len() != points.len() - 1 {
            return Err(Error::Config(format!(
                "plan needs at least 2 points and one midpoint per step, got {} and {}",
                points.len(),
                mids.len()
            )));
        }
        for p in points.iter().chain(&mids) {
            check_level("plan noise level", p.abar)?;
        }
        if points.windows(2).any(|w| w[1].abar < w[0].abar) {
            return Err(Error::Config("plan noise levels must not decrease in signal".into()));
        }
        Ok(SamplingPlan { points, mids })
    }

    /// `steps` training positions spread evenly from `T−1` down to 0, then
    /// clean data. Half steps interpolate `√ᾱ`.
    pub fn strided(training: &TrainingSchedule, steps: usize) -> Result<Self> {
        let total = training.steps();
        if steps == 0 || steps > total {
            return Err(Error::Config(format!("steps must be in 1..={total}, got {steps}")));
        }
        let last = (total - 1) as f64;
        let mut times: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    last
                } else {
                    math::round(last * (steps - 1 - i) as f64 / (steps - 1) as f64)
                }
            })
            .collect();
        times.push(-1.0);
        let points: Vec<PlanPoint> = times
            .iter()
            .map(|&t| if t < 0.0 { CLEAN } else { PlanPoint { abar: training.alpha_bars()[t as usize], t } })
            .collect();
        let mids = times
            .windows(2)
            .map(|w| {
                let t = 0.5 * (w[0] + w[1]);
                PlanPoint {
                    abar: training.alpha_bar_at(t),
                    t,
                }
            })
            .collect();
        Self::new(points, mids)
    }

    /// Accelerated plan over `(φ̄_c, t_c)` from the noisiest entry down, then
    /// clean data. Half steps interpolate `√φ̄` and `t` linearly.
    pub fn aligned(schedule: &AlignedSchedule) -> Result<Self> {
        let mut points: Vec<PlanPoint> = schedule
            .phi_bars()
            .iter()
            .zip(schedule.t_aligned())
            .rev()
            .map(|(&abar, &t)| PlanPoint { abar, t })
            .collect();
        points.push(CLEAN);
        let mids = points
            .windows(2)
            .map(|w| {
                let r = 0.5 * (math::sqrt(w[0].abar) + math::sqrt(w[1].abar));
                PlanPoint {
                    abar: r * r,
                    t: 0.5 * (w[0].t + w[1].t),
                }
            })
            .collect();
        Self::new(points, mids)
    }

    /// Uniform grid on `s ∈ [0, 1]` from `s = 1` to `s = 0` for a continuous
    /// noise level `abar(s)`; the predictor receives `s`.
    pub fn continuous(steps: usize, abar: impl Fn(f64) -> f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        let h = 1.0 / steps as f64;
        let at = |s: f64| PlanPoint { abar: abar(s), t: s };
        let points = (0..=steps).map(|i| at(1.0 - i as f64 * h)).collect();
        let mids = (0..steps).map(|i| at(1.0 - (i as f64 + 0.5) * h)).collect();
        Self::new(points, mids)
    }

    pub fn steps(&self) -> usize {
        self.mids.len()
    }

    pub fn points(&self) -> &[PlanPoint] {
        &self.points
    }

    pub fn mids(&self) -> &[PlanPoint] {
        &self.mids
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ddpm")]
    Ddpm,
    #[serde(rename = "ddim")]
    Ddim,
    #[serde(rename = "fastSTI2")]
    FastSti2,
    #[serde(rename = "fastSTI4")]
    FastSti4,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ddpm, Method::Ddim, Method::FastSti2, Method::FastSti4];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ddpm => "ddpm",
            Method::Ddim => "ddim",
            Method::FastSti2 => "fastSTI2",
            Method::FastSti4 => "fastSTI4",
        }
    }

    pub fn from_name(name: &str) -> Option<Method> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    fn default_warmup(self) -> usize {
        match self {
            Method::FastSti2 => 2,
            Method::FastSti4 => 3,
            _ => 0,
        }
    }

    /// History entries the multistep phase needs.
    fn history_needed(self) -> usize {
        match self {
            Method::FastSti2 => 1,
            Method::FastSti4 => 3,
            _ => 0,
        }
    }

    fn min_steps(self) -> usize {
        match self {
            Method::FastSti2 => 2,
            Method::FastSti4 => 4,
            _ => 1,
        }
    }

    /// Predictor evaluations for a run of `steps` steps with `warmup`
    /// warmup steps.
    pub fn evaluations(self, steps: usize, warmup: usize) -> usize {
        match self {
            Method::Ddpm | Method::Ddim => steps,
            Method::FastSti2 => 2 * warmup + (steps - warmup),
            Method::FastSti4 => 4 * warmup + (steps - warmup),
        }
    }
}

impl core::fmt::Display for Method {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub method: Method,
    pub steps: usize,
    pub aligned: Option<AlignedSchedule>,
    /// Warmup steps before the multistep phase; `None` uses the method
    /// default (2 for FastSTI-2, 3 for FastSTI-4).
    pub warmup_steps: Option<usize>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(method: Method, steps: usize) -> Self {
        SamplerConfig {
            method,
            steps,
            aligned: None,
            warmup_steps: None,
            seed: 0,
        }
    }

    pub fn with_aligned(mut self, aligned: AlignedSchedule) -> Self {
        self.steps = aligned.steps();
        self.aligned = Some(aligned);
        self
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.method.default_warmup())
    }

    pub fn validate(&self, training: &TrainingSchedule) -> Result<()> {
        let m = self.method;
        if self.steps < m.min_steps() {
            return Err(Error::Config(format!("{m} needs at least {} steps, got {}", m.min_steps(), self.steps)));
        }
        if let Some(a) = &self.aligned {
            if a.steps() != self.steps {
                return Err(Error::Config(format!(
                    "aligned schedule has {} steps but {} were requested",
                    a.steps(),
                    self.steps
                )));
            }
        } else if self.steps > training.steps() {
            return Err(Error::Config(format!(
                "{} steps exceed the {} training steps",
                self.steps,
                training.steps()
            )));
        }
        if matches!(m, Method::FastSti2 | Method::FastSti4) {
            let w = self.warmup();
            if w < m.history_needed() || w > self.steps {
                return Err(Error::Config(format!(
                    "{m} warmup must be in {}..={}, got {w}",
                    m.history_needed(),
                    self.steps
                )));
            }
        }
        Ok(())
    }

    pub fn plan(&self, training: &TrainingSchedule) -> Result<SamplingPlan> {
        self.validate(training)?;
        match &self.aligned {
            Some(a) => SamplingPlan::aligned(a),
            None => SamplingPlan::strided(training, self.steps),
        }
    }
}

/// One row of the optional sampler trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub stage: String,
    pub t: f64,
    pub abar: f64,
    pub abar_next: f64,
    /// Euclidean norm of the state over target entries after the step.
    pub state_norm: f64,
    /// Euclidean norm of the noise estimate used for the final transfer.
    pub e_norm: f64,
}

fn standard_normal_grid<R: Rng + ?Sized>(shape: (usize, usize), rng: &mut R) -> Grid {
    Grid::from_fn(shape.0, shape.1, |_, _| rng.sample(StandardNormal))
}

fn target_norm(g: &Grid, task: &ImputationTask<'_>) -> f64 {
    let s: f64 = g
        .as_slice()
        .iter()
        .zip(task.target_mask.as_slice())
        .filter(|(_, m)| **m)
        .map(|(v, _)| v * v)
        .sum();
    math::sqrt(s)
}

/// Overwrites non-target entries with their forward-diffused observations
/// at `abar`, sharing one noise draw across them.
fn clamp_observed<R: Rng + ?Sized>(x: &mut Grid, task: &ImputationTask<'_>, abar: f64, rng: &mut R) {
    let z = standard_normal_grid(x.shape(), rng);
    let a = math::sqrt(abar);
    let b = math::sqrt(1.0 - abar);
    let target = task.target_mask.as_slice();
    let obs = task.observed.as_slice();
    for (k, v) in x.as_mut_slice().iter_mut().enumerate() {
        if !target[k] {
            *v = a * obs[k] + b * z.as_slice()[k];
        }
    }
}

fn restore_observed(x: &Grid, task: &ImputationTask<'_>) -> Grid {
    let mut out = task.observed.clone();
    for (k, m) in task.target_mask.as_slice().iter().enumerate() {
        if *m {
            out.as_mut_slice()[k] = x.as_slice()[k];
        }
    }
    out
}

/// Imputes the target entries of `task` starting from standard normal noise.
/// Observed entries of the result equal `task.observed` exactly.
pub fn sample<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    task: &ImputationTask<'_>,
    training: &TrainingSchedule,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Grid> {
    let plan = config.plan(training)?;
    run_plan(predictor, task, &plan, config, rng, None)
}

/// As [`sample`], also returning one trace row per step.
pub fn sample_traced<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    task: &ImputationTask<'_>,
    training: &TrainingSchedule,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<(Grid, Vec<TraceRow>)> {
    let plan = config.plan(training)?;
    let mut trace = Vec::new();
    let out = run_plan(predictor, task, &plan, config, rng, Some(&mut trace))?;
    Ok((out, trace))
}

/// Runs the deterministic solvers of `config.method` along an explicit plan
/// from a given starting state, with no conditioning clamp. The starting
/// state must already be at `plan.points()[0]`.
pub fn integrate<P: NoisePredictor + ?Sized>(
    predictor: &P,
    task: &ImputationTask<'_>,
    plan: &SamplingPlan,
    method: Method,
    warmup: usize,
    start: &Grid,
) -> Result<Grid> {
    if method == Method::Ddpm {
        return Err(Error::Config("ddpm is stochastic; use sample".into()));
    }
    if plan.steps() < method.min_steps() || warmup < method.history_needed() || warmup > plan.steps() {
        return Err(Error::Config(format!("{method} cannot run {} steps with warmup {warmup}", plan.steps())));
    }
    let mut x = start.clone();
    let mut history = SolverHistory::new();
    for i in 0..plan.steps() {
        x = solver_step(predictor, task, plan, i, method, warmup, &x, &mut history)?.0;
    }
    Ok(x)
}

#[allow(clippy::too_many_arguments)]
fn solver_step<P: NoisePredictor + ?Sized>(
    predictor: &P,
    task: &ImputationTask<'_>,
    plan: &SamplingPlan,
    i: usize,
    method: Method,
    warmup: usize,
    x: &Grid,
    history: &mut SolverHistory,
) -> Result<(Grid, Grid, &'static str)> {
    let (p, q, mid) = (plan.points[i], plan.points[i + 1], plan.mids[i]);
    match method {
        Method::Ddim => {
            let e = predictor.eval(x, task, p.t)?;
            let next = transfer(x, &e, p.abar, q.abar)?;
            Ok((next, e, "ddim"))
        }
        Method::FastSti2 | Method::FastSti4 if i < warmup => {
            let s = if method == Method::FastSti2 {
                ph2_step(x, predictor, task, p.abar, q.abar, p.t, q.t)?
            } else {
                prk4_step(x, predictor, task, p.abar, mid.abar, q.abar, p.t, mid.t, q.t)?
            };
            history.push(s.first);
            Ok((s.state, s.combined, if method == Method::FastSti2 { "ph2" } else { "prk4" }))
        }
        Method::FastSti2 | Method::FastSti4 => {
            let e = predictor.eval(x, task, p.t)?;
            let combined = if method == Method::FastSti2 {
                plms2_grad(history, &e)?
            } else {
                plms4_grad(history, &e)?
            };
            history.push(e);
            let next = transfer(x, &combined, p.abar, q.abar)?;
            Ok((next, combined, if method == Method::FastSti2 { "plms2" } else { "plms4" }))
        }
        Method::Ddpm => unreachable!("ddpm steps are stochastic"),
    }
}

fn run_plan<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    task: &ImputationTask<'_>,
    plan: &SamplingPlan,
    config: &SamplerConfig,
    rng: &mut R,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<Grid> {
    task.conditioner.ensure_shape(task.shape())?;
    if task.target_mask.shape() != task.shape() {
        return Err(Error::shape(format!("{:?}", task.shape()), format!("{:?}", task.target_mask.shape())));
    }
    if !task.target_mask.any() {
        return Ok(task.observed.clone());
    }
    let method = config.method;
    let warmup = config.warmup();
    let mut x = standard_normal_grid(task.shape(), rng);
    clamp_observed(&mut x, task, plan.points[0].abar, rng);
    let mut history = SolverHistory::new();
    for i in 0..plan.steps() {
        let (p, q) = (plan.points[i], plan.points[i + 1]);
        let (next, e, stage) = if method == Method::Ddpm {
            let e = predictor.eval(&x, task, p.t)?;
            let last = i + 1 == plan.steps();
            let z = (!last).then(|| standard_normal_grid(x.shape(), rng));
            (ddpm_transition(&x, &e, p.abar, q.abar, z.as_ref())?, e, "ddpm")
        } else {
            solver_step(predictor, task, plan, i, method, warmup, &x, &mut history)?
        };
        x = next;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("sampler state after step {i}")));
        }
        clamp_observed(&mut x, task, q.abar, rng);
        if let Some(rows) = trace.as_deref_mut() {
            rows.push(TraceRow {
                step: i,
                stage: stage.into(),
                t: p.t,
                abar: p.abar,
                abar_next: q.abar,
                state_norm: target_norm(&x, task),
                e_norm: target_norm(&e, task),
            });
        }
    }
    Ok(restore_observed(&x, task))
}
