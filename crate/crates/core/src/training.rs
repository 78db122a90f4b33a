//! Target masking, the masked noise-prediction loss and the optimizer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::RoadGraph;
use crate::grid::{Grid, Mask};
use crate::math;
use crate::model::{self, ImputationTask, ModelParams};
use crate::schedule::{ScheduleSpec, TrainingSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Block,
    Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    pub point_rate: f64,
    pub block_base_rate: f64,
    /// Probability per node per time step that a failure run starts.
    pub failure_prob: f64,
    pub min_steps: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            strategy: MaskStrategy::Block,
            point_rate: 0.25,
            block_base_rate: 0.05,
            failure_prob: 0.0015,
            min_steps: 12,
            max_steps: 48,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn point() -> Self {
        MaskSpec {
            strategy: MaskStrategy::Point,
            ..Self::default()
        }
    }

    pub fn block() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("point_rate", self.point_rate),
            ("block_base_rate", self.block_base_rate),
            ("failure_prob", self.failure_prob),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} outside [0, 1]")));
            }
        }
        if self.min_steps == 0 || self.min_steps > self.max_steps {
            return Err(Error::Config(format!(
                "failure duration range {}..={} is invalid",
                self.min_steps, self.max_steps
            )));
        }
        Ok(())
    }

    /// Expected target fraction of a fully observed series under the block
    /// strategy, far from window edges, accounting for overlapping runs.
    pub fn expected_block_fraction(&self) -> f64 {
        let span = (self.max_steps - self.min_steps + 1) as f64;
        // a run started j steps earlier covers this step when its duration exceeds j
        let mut clear = 1.0;
        for j in 0..self.max_steps {
            let longer = (self.min_steps.max(j + 1)..=self.max_steps).count() as f64 / span;
            clear *= 1.0 - self.failure_prob * longer;
        }
        1.0 - clear * (1.0 - self.block_base_rate)
    }
}

/// Draws imputation targets from the observed entries. Returns
/// `(target_mask, conditioning_mask)`.
pub fn make_targets<R: Rng + ?Sized>(observed_mask: &Mask, spec: &MaskSpec, rng: &mut R) -> Result<(Mask, Mask)> {
    spec.validate()?;
    let (len, nodes) = observed_mask.shape();
    let mut target = Mask::empty(len, nodes);
    match spec.strategy {
        MaskStrategy::Point => {
            for l in 0..len {
                for n in 0..nodes {
                    if rng.random::<f64>() < spec.point_rate {
                        target.set(l, n, true);
                    }
                }
            }
        }
        MaskStrategy::Block => {
            for n in 0..nodes {
                for l in 0..len {
                    if rng.random::<f64>() < spec.block_base_rate {
                        target.set(l, n, true);
                    }
                    if rng.random::<f64>() < spec.failure_prob {
                        let d = rng.random_range(spec.min_steps..=spec.max_steps);
                        for k in l..(l + d).min(len) {
                            target.set(k, n, true);
                        }
                    }
                }
            }
        }
    }
    let target = target.and(observed_mask);
    let cond = observed_mask.and_not(&target);
    Ok((target, cond))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sequence_length: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Offset between consecutive training windows.
    pub train_stride: usize,
    pub schedule: ScheduleSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            sequence_length: 24,
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            train_stride: 1,
            schedule: ScheduleSpec::reference(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.sequence_length == 0 || self.train_stride == 0 {
            return Err(Error::Config("batch size, sequence length and stride must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {} is invalid", self.weight_decay)));
        }
        self.schedule.training().map(|_| ())
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(n_params: usize, learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                format!("{} parameters", self.m.len()),
                format!("{} / {}", params.len(), grads.len()),
            ));
        }
        self.step += 1;
        let c1 = 1.0 - math::powi(self.beta1, self.step as i32);
        let c2 = 1.0 - math::powi(self.beta2, self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * (m_hat / (math::sqrt(v_hat) + self.eps) + self.weight_decay * params[i]);
        }
        Ok(())
    }
}

/// A window of (normalized) data with its native observation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub values: Grid,
    pub observed_mask: Mask,
}

/// `√ᾱ·x0 + √(1−ᾱ)·ε` at target entries; other entries are zero.
pub fn diffuse(x0: &Grid, noise: &Grid, target: &Mask, abar: f64) -> Result<Grid> {
    noise.ensure_shape(x0.shape())?;
    target_shape(target, x0.shape())?;
    let a = math::sqrt(abar);
    let b = math::sqrt(1.0 - abar);
    let mut out = Grid::zeros(x0.len(), x0.nodes());
    for (k, m) in target.as_slice().iter().enumerate() {
        if *m {
            out.as_mut_slice()[k] = a * x0.as_slice()[k] + b * noise.as_slice()[k];
        }
    }
    Ok(out)
}

fn target_shape(m: &Mask, shape: (usize, usize)) -> Result<()> {
    if m.shape() != shape {
        return Err(Error::shape(format!("{shape:?}"), format!("{:?}", m.shape())));
    }
    Ok(())
}

/// One training draw: targets, step, noise and the noisy field.
#[derive(Clone, Debug)]
pub struct Draw<'g> {
    pub task: ImputationTask<'g>,
    pub t: usize,
    pub noise: Grid,
    pub x_t: Grid,
}

impl<'g> Draw<'g> {
    pub fn new<R: Rng + ?Sized>(
        example: &Example,
        graph: &'g RoadGraph,
        schedule: &TrainingSchedule,
        spec: &MaskSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let (target, _) = make_targets(&example.observed_mask, spec, rng)?;
        let task = ImputationTask::new(example.values.clone(), example.observed_mask.clone(), target, graph, 0.0)?;
        let t = rng.random_range(0..schedule.steps());
        let (len, nodes) = example.values.shape();
        let noise = Grid::from_fn(len, nodes, |_, _| rng.sample(StandardNormal));
        let x_t = diffuse(&example.values, &noise, &task.target_mask, schedule.alpha_bars()[t])?;
        Ok(Draw { task, t, noise, x_t })
    }

    pub fn target_count(&self) -> usize {
        self.task.target_mask.count()
    }

    /// Summed squared error over targets; adds `grad_scale` times its
    /// gradient into `grads`.
    pub fn loss_and_grad(&self, params: &ModelParams, grads: &mut [f64], grad_scale: f64) -> Result<f64> {
        model::loss_and_grad(&self.x_t, &self.noise, &self.task, self.t as f64, params, grads, grad_scale)
    }

    /// Summed squared error over targets, forward pass only.
    pub fn loss(&self, params: &ModelParams) -> Result<f64> {
        let eps = model::noise_predict(&self.x_t, &self.task, self.t as f64, params)?;
        Ok(masked_sq_error(&eps, &self.noise, &self.task.target_mask))
    }
}

fn masked_sq_error(a: &Grid, b: &Grid, mask: &Mask) -> f64 {
    let mut s = 0.0;
    for (k, m) in mask.as_slice().iter().enumerate() {
        if *m {
            let d = a.as_slice()[k] - b.as_slice()[k];
            s += d * d;
        }
    }
    s
}

/// Mean squared error over every target entry of a set of draws, with its
/// gradient written to `grads` (overwritten). Returns `None` when the draws
/// hold no targets.
pub fn batch_gradient(draws: &[Draw<'_>], params: &ModelParams, grads: &mut [f64]) -> Result<Option<f64>> {
    grads.iter_mut().for_each(|g| *g = 0.0);
    let count: usize = draws.iter().map(Draw::target_count).sum();
    if count == 0 {
        return Ok(None);
    }
    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    for d in draws {
        if d.target_count() > 0 {
            total += d.loss_and_grad(params, grads, scale)?;
        }
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss over {count} targets")));
    }
    Ok(Some(loss))
}

/// One optimizer step on a batch. Returns the mean target loss before the
/// update, or `None` if no targets were drawn (parameters untouched).
pub fn train_step<R: Rng + ?Sized>(
    batch: &[Example],
    graph: &RoadGraph,
    params: &mut ModelParams,
    schedule: &TrainingSchedule,
    spec: &MaskSpec,
    optimizer: &mut AdamW,
    rng: &mut R,
) -> Result<Option<f64>> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let draws = batch
        .iter()
        .map(|e| Draw::new(e, graph, schedule, spec, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = vec![0.0; params.len()];
    let loss = batch_gradient(&draws, params, &mut grads)?;
    if loss.is_some() {
        optimizer.update(params.as_mut_slice(), &grads)?;
    }
    Ok(loss)
}

/// Mean target loss of fixed draws without updating anything.
pub fn mean_loss(draws: &[Draw<'_>], params: &ModelParams) -> Result<Option<f64>> {
    let count: usize = draws.iter().map(Draw::target_count).sum();
    if count == 0 {
        return Ok(None);
    }
    let mut total = 0.0;
    for d in draws {
        if d.target_count() > 0 {
            total += d.loss(params)?;
        }
    }
    Ok(Some(total / count as f64))
}
