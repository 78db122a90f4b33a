//! Training driver, windowed imputation, evaluation and timing.

use std::ops::Range;
use std::time::Instant;

use faststi_core::data::{self, Dataset, Normalizer, WindowSet};
use faststi_core::graph::KernelOptions;
use faststi_core::metrics::{EvalReport, ReportBuilder, SampleEnsemble};
use faststi_core::model::{self, NetworkPredictor};
use faststi_core::schedule::TrainingSchedule;
use faststi_core::solvers::{self, SamplerConfig, TraceRow};
use faststi_core::training::{self, AdamW, Draw, Example, MaskSpec, TrainConfig};
use faststi_core::{Grid, ImputationTask, Mask, ModelConfig, ModelParams, RoadGraph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{AppError, AppResult};
use crate::io::EpochRecord;

/// Independent stream for `(seed, a, b)`.
pub fn derived_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
    rng
}

/// A dataset with its graph, train-fitted normalizer and windows.
pub struct Prepared {
    pub dataset: Dataset,
    pub graph: RoadGraph,
    pub normalizer: Normalizer,
    pub normalized: Grid,
    pub windows: [WindowSet; 3],
}

impl Prepared {
    pub fn new(dataset: Dataset, cfg: &RunConfig) -> AppResult<Self> {
        Self::with(dataset, &cfg.kernel, cfg.train.sequence_length, cfg.splits, cfg.train.train_stride)
    }

    pub fn with(
        dataset: Dataset,
        kernel: &KernelOptions,
        length: usize,
        splits: data::SplitRatios,
        train_stride: usize,
    ) -> AppResult<Self> {
        dataset.validate()?;
        let windows = data::split_and_window(dataset.len(), length, splits, train_stride)?;
        let normalizer = Normalizer::fit(&dataset.values, &dataset.observed_mask, windows[0].range.clone())?;
        let normalized = normalizer.normalize(&dataset.values)?;
        let graph = dataset.graph(kernel)?;
        Ok(Prepared { dataset, graph, normalizer, normalized, windows })
    }

    pub fn train(&self) -> &WindowSet {
        &self.windows[0]
    }

    pub fn val(&self) -> &WindowSet {
        &self.windows[1]
    }

    pub fn test(&self) -> &WindowSet {
        &self.windows[2]
    }

    fn examples(&self, set: &WindowSet) -> AppResult<Vec<Example>> {
        Ok(data::examples(&self.dataset.values, &self.dataset.observed_mask, set, &self.normalizer)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub parameter_count: usize,
    pub train_windows: usize,
    pub val_windows: usize,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub curve: Vec<EpochRecord>,
    pub summary: TrainSummary,
}

/// Mean target loss and summed gradient of the draws, evaluated in parallel
/// and reduced in draw order.
fn parallel_gradient(draws: &[Draw<'_>], params: &ModelParams, grads: &mut [f64]) -> AppResult<Option<f64>> {
    let count: usize = draws.iter().map(Draw::target_count).sum();
    grads.iter_mut().for_each(|g| *g = 0.0);
    if count == 0 {
        return Ok(None);
    }
    let scale = 1.0 / count as f64;
    let parts = draws
        .par_iter()
        .filter(|d| d.target_count() > 0)
        .map(|d| {
            let mut g = vec![0.0; params.len()];
            d.loss_and_grad(params, &mut g, scale).map(|l| (l, g))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = 0.0;
    for (l, g) in parts {
        total += l;
        grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(AppError::Core(faststi_core::Error::NonFinite("training loss".into())));
    }
    Ok(Some(loss))
}

fn parallel_loss(draws: &[Draw<'_>], params: &ModelParams) -> AppResult<Option<f64>> {
    let count: usize = draws.iter().map(Draw::target_count).sum();
    if count == 0 {
        return Ok(None);
    }
    let parts = draws
        .par_iter()
        .filter(|d| d.target_count() > 0)
        .map(|d| d.loss(params))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(parts.iter().sum::<f64>() / count as f64))
}

/// Trains from a fresh initialisation and keeps the parameters with the
/// lowest validation loss (the last ones when there is no validation data).
/// `on_epoch` sees each finished epoch.
pub fn train_loop(
    prep: &Prepared,
    train: &TrainConfig,
    model_cfg: &ModelConfig,
    mask: &MaskSpec,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> AppResult<TrainOutcome> {
    train.validate()?;
    mask.validate()?;
    let started = Instant::now();
    let schedule = train.schedule.training()?;
    let mut rng = derived_rng(train.seed, 1, 0);
    let mut params = ModelParams::init(model_cfg.clone(), &mut rng)?;
    let examples = prep.examples(prep.train())?;
    let val_examples = prep.examples(prep.val())?;
    let mut val_rng = derived_rng(train.seed, 2, 0);
    let val_draws = val_examples
        .iter()
        .map(|e| Draw::new(e, &prep.graph, &schedule, mask, &mut val_rng))
        .collect::<Result<Vec<_>, _>>()?;

    let mut optimizer = AdamW::new(params.len(), train.learning_rate, train.weight_decay);
    let mut grads = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut curve = Vec::with_capacity(train.epochs);
    for epoch in 1..=train.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(train.batch_size) {
            let draws = chunk
                .iter()
                .map(|&i| Draw::new(&examples[i], &prep.graph, &schedule, mask, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(loss) = parallel_gradient(&draws, &params, &mut grads)? {
                optimizer.update(params.as_mut_slice(), &grads)?;
                sum += loss;
                batches += 1;
            }
        }
        let train_loss = if batches > 0 { sum / batches as f64 } else { f64::NAN };
        let val_loss = parallel_loss(&val_draws, &params)?.unwrap_or(f64::NAN);
        let record = EpochRecord { epoch, train_loss, val_loss };
        on_epoch(&record);
        curve.push(record);
        let better = match &best {
            _ if val_loss.is_nan() => false,
            None => true,
            Some((_, b, _)) => val_loss < *b,
        };
        if better {
            best = Some((epoch, val_loss, params.clone()));
        }
    }
    let (best_epoch, best_val_loss, params) = match best {
        Some((e, v, p)) => (Some(e), Some(v), p),
        None => (None, None, params),
    };
    let summary = TrainSummary {
        epochs: train.epochs,
        best_epoch,
        best_val_loss,
        parameter_count: params.len(),
        train_windows: examples.len(),
        val_windows: val_examples.len(),
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { params, curve, summary })
}

/// Draws `samples` imputations of one task, each from its own stream
/// derived from `(config.seed, window, sample)`.
pub fn impute_task(
    params: &ModelParams,
    task: &ImputationTask<'_>,
    schedule: &TrainingSchedule,
    config: &SamplerConfig,
    samples: usize,
    window: u64,
) -> AppResult<Vec<Grid>> {
    let predictor = NetworkPredictor { params };
    (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = derived_rng(config.seed, 3 + window, k as u64);
            solvers::sample(&predictor, task, schedule, config, &mut rng).map_err(AppError::from)
        })
        .collect()
}

pub fn impute_traced(
    params: &ModelParams,
    task: &ImputationTask<'_>,
    schedule: &TrainingSchedule,
    config: &SamplerConfig,
    window: u64,
) -> AppResult<(Grid, Vec<TraceRow>)> {
    let predictor = NetworkPredictor { params };
    let mut rng = derived_rng(config.seed, 3 + window, 0);
    Ok(solvers::sample_traced(&predictor, task, schedule, config, &mut rng)?)
}

/// Element-wise median of an ensemble.
pub fn median(samples: &[Grid]) -> AppResult<Grid> {
    let (len, nodes) = samples
        .first()
        .map(Grid::shape)
        .ok_or_else(|| AppError::Config("empty ensemble".into()))?;
    Ok(SampleEnsemble::new(samples.to_vec(), Mask::full(len, nodes))?.median())
}

/// Start rows of windows of `len` that tile `range`; the last one is pulled
/// back to end at `range.end` when the range is not a multiple of `len`.
pub fn tiling(range: Range<usize>, len: usize) -> Vec<usize> {
    if range.len() < len || len == 0 {
        return Vec::new();
    }
    let mut starts: Vec<usize> = (range.start..=range.end - len).step_by(len).collect();
    if starts.last().is_some_and(|&s| s + len < range.end) {
        starts.push(range.end - len);
    }
    starts
}

/// Imputation of a whole series in data units.
pub struct SeriesImputation {
    /// Point estimate; observed entries are the raw input.
    pub point: Grid,
    /// Full-length ensemble members, present when requested.
    pub ensemble: Option<Vec<Grid>>,
    pub trace: Option<Vec<TraceRow>>,
}

/// Imputes every entry of `rows` that is unobserved or in `targets`.
#[allow(clippy::too_many_arguments)]
pub fn impute_series(
    params: &ModelParams,
    graph: &RoadGraph,
    normalizer: &Normalizer,
    values: &Grid,
    observed: &Mask,
    targets: &Mask,
    rows: Range<usize>,
    length: usize,
    schedule: &TrainingSchedule,
    config: &SamplerConfig,
    samples: usize,
    keep_ensemble: bool,
    trace: bool,
) -> AppResult<SeriesImputation> {
    if samples == 0 {
        return Err(AppError::Config("need at least one sample".into()));
    }
    let starts = tiling(rows.clone(), length);
    if starts.is_empty() {
        return Err(AppError::Config(format!(
            "series of {} rows is shorter than the window length {length}",
            rows.len()
        )));
    }
    let normalized = normalizer.normalize(values)?;
    let (total, nodes) = values.shape();
    let mut point = values.clone();
    let mut ensemble = keep_ensemble.then(|| vec![values.clone(); samples]);
    let mut trace_rows = None;
    let mut written = rows.start;
    for (w, &start) in starts.iter().enumerate() {
        let obs = observed.window(start, length);
        let tgt = Mask::from_fn(length, nodes, |l, n| targets.get(start + l, n) || !obs.get(l, n));
        let task = ImputationTask::new(normalized.window(start, length), obs, tgt, graph, 0.0)?;
        let draws = impute_task(params, &task, schedule, config, samples, w as u64)?;
        if trace && trace_rows.is_none() {
            trace_rows = Some(impute_traced(params, &task, schedule, config, w as u64)?.1);
        }
        let med = normalizer.denormalize(&median(&draws)?)?;
        let denorm = draws.iter().map(|d| normalizer.denormalize(d)).collect::<Result<Vec<_>, _>>()?;
        for l in written.max(start) - start..length {
            for n in 0..nodes {
                if task.target_mask.get(l, n) {
                    point.set(start + l, n, med.get(l, n));
                    if let Some(ens) = ensemble.as_mut() {
                        for (k, d) in denorm.iter().enumerate() {
                            ens[k].set(start + l, n, d.get(l, n));
                        }
                    }
                }
            }
        }
        written = start + length;
    }
    debug_assert_eq!(point.shape(), (total, nodes));
    Ok(SeriesImputation { point, ensemble, trace: trace_rows })
}

/// Metrics of the model and of per-window linear interpolation on one
/// masking scenario over the test split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub model: EvalReport,
    pub baseline: EvalReport,
    pub targets: usize,
}

impl ScenarioResult {
    pub fn mae_ratio(&self) -> f64 {
        self.model.mae / self.baseline.mae
    }
}

/// Evaluation targets over the contiguous test range.
pub fn scenario_mask(prep: &Prepared, scenario: &MaskSpec) -> AppResult<Mask> {
    let test = prep.test().range.clone();
    let obs = prep.dataset.observed_mask.window(test.start, test.len());
    let mut rng = derived_rng(scenario.seed, 4, 0);
    let (target, _) = training::make_targets(&obs, scenario, &mut rng)?;
    let (total, nodes) = prep.dataset.values.shape();
    Ok(Mask::from_fn(total, nodes, |l, n| test.contains(&l) && target.get(l - test.start, n)))
}

/// Scores the model against linear interpolation on the test windows.
pub fn evaluate_scenario(
    params: &ModelParams,
    prep: &Prepared,
    schedule: &TrainingSchedule,
    config: &SamplerConfig,
    samples: usize,
    targets: &Mask,
) -> AppResult<ScenarioResult> {
    let mut model_report = ReportBuilder::new();
    let mut base_report = ReportBuilder::new();
    let length = prep.test().length;
    let values = &prep.dataset.values;
    for (w, range) in prep.test().windows().enumerate() {
        let obs = prep.dataset.observed_mask.window(range.start, length);
        let tgt = targets.window(range.start, length).and(&obs);
        if !tgt.any() {
            continue;
        }
        let task = ImputationTask::new(prep.normalized.window(range.start, length), obs, tgt.clone(), &prep.graph, 0.0)?;
        let draws = impute_task(params, &task, schedule, config, samples, w as u64)?;
        let denorm = draws
            .iter()
            .map(|d| prep.normalizer.denormalize(d))
            .collect::<Result<Vec<_>, _>>()?;
        let point = median(&denorm)?;
        let truth = values.window(range.start, length);
        let ens = SampleEnsemble::new(denorm, tgt.clone())?;
        model_report.add(&truth, &point, Some(&ens), &tgt)?;
        let base = prep.normalizer.denormalize(&task.conditioner)?;
        base_report.add(&truth, &base, None, &tgt)?;
    }
    let model = model_report.finish()?;
    let baseline = base_report.finish()?;
    Ok(ScenarioResult { targets: model.n_eval, model, baseline })
}

/// Per-window linear interpolation of `targets` in data units.
pub fn baseline_interpolation(prep: &Prepared, targets: &Mask, range: Range<usize>) -> AppResult<Grid> {
    let length = prep.test().length;
    let mut out = prep.dataset.values.clone();
    for start in tiling(range, length) {
        let obs = prep.dataset.observed_mask.window(start, length);
        let cond = obs.and_not(&targets.window(start, length));
        let chi = model::lin_interp(&prep.normalized.window(start, length), &cond, 0.0)?;
        let chi = prep.normalizer.denormalize(&chi)?;
        for l in 0..length {
            for n in 0..out.nodes() {
                if !cond.get(l, n) {
                    out.set(start + l, n, chi.get(l, n));
                }
            }
        }
    }
    Ok(out)
}

/// One row of the timing table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub steps: usize,
    pub schedule: String,
    pub evaluations: usize,
    pub repeats: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Median of the slowest run of the same method divided by this median.
    pub speedup: f64,
}

/// Times sequential sampling of every task for each configuration and
/// reports medians over `repeats` runs.
pub fn bench(
    params: &ModelParams,
    tasks: &[ImputationTask<'_>],
    schedule: &TrainingSchedule,
    configs: &[SamplerConfig],
    repeats: usize,
) -> AppResult<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(AppError::Config("need at least one repeat".into()));
    }
    let predictor = NetworkPredictor { params };
    for cfg in configs {
        cfg.validate(schedule)?;
    }
    // repeats are interleaved so drifting machine speed hits every config alike
    let mut times = vec![Vec::with_capacity(repeats); configs.len()];
    for _ in 0..repeats {
        for (cfg, slot) in configs.iter().zip(times.iter_mut()) {
            let started = Instant::now();
            for (w, task) in tasks.iter().enumerate() {
                let mut rng = derived_rng(cfg.seed, 3 + w as u64, 0);
                std::hint::black_box(solvers::sample(&predictor, task, schedule, cfg, &mut rng)?);
            }
            slot.push(started.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mut rows = Vec::new();
    for (cfg, mut times) in configs.iter().zip(times) {
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            method: cfg.method.name().to_string(),
            steps: cfg.steps,
            schedule: if cfg.aligned.is_some() { "aligned" } else { "strided" }.to_string(),
            evaluations: cfg.method.evaluations(cfg.steps, cfg.warmup()),
            repeats,
            median_ms: times[times.len() / 2],
            min_ms: times[0],
            max_ms: times[times.len() - 1],
            speedup: f64::NAN,
        });
    }
    let slowest: Vec<f64> = rows
        .iter()
        .map(|r| {
            rows.iter()
                .filter(|o| o.method == r.method)
                .map(|o| o.median_ms)
                .fold(f64::MIN, f64::max)
        })
        .collect();
    for (r, s) in rows.iter_mut().zip(slowest) {
        r.speedup = s / r.median_ms;
    }
    Ok(rows)
}
