//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use faststi_core::data::{self, SynthConfig};
use faststi_core::metrics::{ReportBuilder, SampleEnsemble};
use faststi_core::schedule::TrainingSchedule;
use faststi_core::solvers::{Method, SamplerConfig};
use faststi_core::training::{self, MaskSpec};
use faststi_core::{ImputationTask, Mask};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{self, RunConfig};
use crate::error::{AppError, AppResult};
use crate::io::{self, Checkpoint, DEFAULT_MISSING_MARKER};
use crate::pipeline::{self, derived_rng, Prepared};

#[derive(Debug, Parser)]
#[command(name = "faststi", version, about = "Diffusion-based imputation of missing traffic sensor readings")]
pub struct Cli {
    /// Worker threads for sampling and gradients (default: logical cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic road-sensor dataset
    GenerateSynth(SynthArgs),
    /// Train a noise prediction model from a run configuration
    Train(TrainArgs),
    /// Fill missing readings with a trained model
    Impute(ImputeArgs),
    /// Score imputations against ground truth
    Evaluate(EvaluateArgs),
    /// Time samplers on a fixed batch of windows
    Bench(BenchArgs),
    /// Re-run a command from the config.json it wrote
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Holdout {
    Block,
    Point,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    /// Number of sensors (at least 2)
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(2..))]
    pub nodes: u64,
    /// Number of timestamps
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output directory
    #[arg(long, default_value = "synth")]
    pub out_dir: PathBuf,
    /// Also write masked.csv and eval_mask.csv with held-out targets
    #[arg(long, value_enum)]
    pub holdout: Option<Holdout>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// Run configuration JSON
    #[arg(long)]
    pub config: PathBuf,
    /// Override the number of epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the output directory
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Override the master seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataArgs {
    /// Values CSV (timestamp column, then one column per node)
    #[arg(long)]
    pub values: PathBuf,
    /// Distances CSV (edge list or square matrix)
    #[arg(long)]
    pub distances: PathBuf,
    /// Reading that marks a missing entry
    #[arg(long, default_value_t = DEFAULT_MISSING_MARKER, allow_negative_numbers = true)]
    pub missing_marker: f64,
    /// Treat every reading as valid
    #[arg(long)]
    pub no_missing_marker: bool,
}

impl DataArgs {
    fn marker(&self) -> Option<f64> {
        (!self.no_missing_marker).then_some(self.missing_marker)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerArgs {
    /// Sampler: ddpm, ddim, fastSTI2 or fastSTI4
    #[arg(long, default_value = "fastSTI4", value_parser = parse_method)]
    pub method: Method,
    /// Denoising steps, strided over the training schedule
    #[arg(long)]
    pub steps: Option<usize>,
    /// Accelerated noise levels (JSON list or schedule object with xis)
    #[arg(long)]
    pub aligned_schedule: Option<PathBuf>,
    /// Warmup steps for the multistep solvers
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Samples per window; the point estimate is their median
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::from_name(s).ok_or_else(|| format!("unknown method '{s}' (expected ddpm, ddim, fastSTI2 or fastSTI4)"))
}

impl SamplerArgs {
    /// Without `--steps` or `--aligned-schedule` the checkpoint's
    /// accelerated levels are used, or every training step if it has none.
    fn resolve(&self, ckpt: &Checkpoint, training: &TrainingSchedule) -> AppResult<SamplerConfig> {
        let spec = &ckpt.header.schedule;
        let aligned = match (&self.aligned_schedule, self.steps) {
            (Some(p), _) => Some(config::read_aligned(p, spec, training)?),
            (None, None) => spec.aligned(training)?,
            (None, Some(_)) => None,
        };
        let mut cfg = SamplerConfig::new(self.method, self.steps.unwrap_or(training.steps()));
        if let Some(a) = aligned {
            if let Some(s) = self.steps.filter(|s| *s != a.steps()) {
                return Err(AppError::Usage(format!(
                    "--steps {s} conflicts with an aligned schedule of {} steps",
                    a.steps()
                )));
            }
            cfg = cfg.with_aligned(a);
        }
        cfg.warmup_steps = self.warmup;
        cfg.seed = self.seed;
        if self.samples == 0 {
            return Err(AppError::Usage("--samples must be positive".into()));
        }
        cfg.validate(training).map_err(|e| AppError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputeArgs {
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Mask CSV of observed entries to impute as well
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value = "imputed")]
    pub output_dir: PathBuf,
    /// Also write every ensemble member to ensemble.csv
    #[arg(long)]
    pub ensemble: bool,
    /// Write per-step sampler norms of the first window to trace.csv
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateArgs {
    /// Ground-truth values CSV
    #[arg(long)]
    pub truth: PathBuf,
    /// Imputed values CSV
    #[arg(long)]
    pub imputed: Option<PathBuf>,
    /// Ensemble CSV; enables CRPS and supplies the median when --imputed is absent
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    /// Mask CSV of the entries to score
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MISSING_MARKER, allow_negative_numbers = true)]
    pub missing_marker: f64,
    #[arg(long)]
    pub no_missing_marker: bool,
    #[arg(long, default_value = "evaluation")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated METHOD@STEPS or METHOD@aligned entries
    #[arg(long, default_value = "fastSTI2@50,fastSTI2@aligned,fastSTI4@50,fastSTI4@aligned")]
    pub runs: String,
    /// Accelerated levels for @aligned entries (default: from the checkpoint)
    #[arg(long)]
    pub aligned_schedule: Option<PathBuf>,
    /// Windows in the timed batch
    #[arg(long, default_value_t = 4)]
    pub windows: usize,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(5..))]
    pub repeats: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "bench")]
    pub output_dir: PathBuf,
    /// Also write bench.svg
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerunArgs {
    /// config.json written by an earlier run
    pub config: PathBuf,
}

fn log(msg: impl AsRef<str>) {
    eprintln!("faststi: {}", msg.as_ref());
}

fn write_resolved(dir: &Path, command: &Command) -> AppResult<()> {
    io::write_json(&dir.join("config.json"), command)
}

fn load_dataset(values: &Path, distances: &Path, marker: Option<f64>) -> AppResult<data::Dataset> {
    let ds = io::load_dataset(values, distances, marker)?;
    let missing = ds.observed_mask.len() * ds.nodes() - ds.observed_mask.count();
    match marker {
        Some(m) => log(format!(
            "WARNING: readings equal to {m} are treated as missing ({missing} entries, {:.2}%); pass --no-missing-marker if {m} is a valid reading",
            100.0 * ds.missing_fraction()
        )),
        None => log(format!("{missing} empty entries treated as missing")),
    }
    Ok(ds)
}

pub fn run(command: Command) -> AppResult<()> {
    match &command {
        Command::GenerateSynth(a) => generate_synth(a, &command),
        Command::Train(a) => train(a),
        Command::Impute(a) => impute(a, &command),
        Command::Evaluate(a) => evaluate(a, &command),
        Command::Bench(a) => bench(a, &command),
        Command::Rerun(a) => {
            let inner: Command = io::read_json(&a.config)?;
            if matches!(inner, Command::Rerun(_)) {
                return Err(AppError::Config("a rerun config cannot point to another rerun".into()));
            }
            run(inner)
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    generator: &'a SynthConfig,
    command: &'a Command,
    nodes: usize,
    timestamps: usize,
    files: Vec<(String, String)>,
}

fn sha256_file(path: &Path) -> AppResult<String> {
    let bytes = std::fs::read(path).map_err(|e| AppError::input(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn generate_synth(a: &SynthArgs, command: &Command) -> AppResult<()> {
    let cfg = SynthConfig::new(a.nodes as usize, a.steps as usize, a.seed);
    let synth = data::synth_generate(&cfg)?;
    let ds = &synth.dataset;
    let values = a.out_dir.join("values.csv");
    let distances = a.out_dir.join("distances.csv");
    io::save_dataset(&values, &distances, ds, DEFAULT_MISSING_MARKER)?;
    let mut files = vec![values, distances];
    if let Some(h) = a.holdout {
        let spec = MaskSpec {
            seed: a.seed,
            ..match h {
                Holdout::Block => MaskSpec::block(),
                Holdout::Point => MaskSpec::point(),
            }
        };
        let mut rng = derived_rng(spec.seed, 4, 0);
        let (target, cond) = training::make_targets(&ds.observed_mask, &spec, &mut rng)?;
        let masked = a.out_dir.join("masked.csv");
        let eval = a.out_dir.join("eval_mask.csv");
        io::write_values(&masked, &ds.node_ids, &ds.timestamps, &ds.values, Some(&cond), DEFAULT_MISSING_MARKER)?;
        io::write_mask(&eval, &ds.node_ids, &ds.timestamps, &target)?;
        files.push(masked);
        files.push(eval);
    }
    let files = files
        .iter()
        .map(|p| Ok((p.file_name().unwrap_or_default().to_string_lossy().into_owned(), sha256_file(p)?)))
        .collect::<AppResult<Vec<_>>>()?;
    let manifest = Manifest { generator: &cfg, command, nodes: ds.nodes(), timestamps: ds.len(), files };
    io::write_json(&a.out_dir.join("manifest.json"), &manifest)?;
    log(format!("wrote {} nodes x {} steps to {}", ds.nodes(), ds.len(), a.out_dir.display()));
    Ok(())
}

fn train(a: &TrainArgs) -> AppResult<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(d) = &a.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let cfg = cfg.resolve()?;
    let ds = load_dataset(&cfg.dataset.values, &cfg.dataset.distances, cfg.dataset.missing_marker)?;
    let prep = Prepared::new(ds, &cfg)?;
    let out = &cfg.output_dir;
    io::write_json(&out.join("config.json"), &cfg)?;
    log(format!(
        "training {} windows ({} validation) for {} epochs",
        prep.train().len(),
        prep.val().len(),
        cfg.train.epochs
    ));
    let outcome = pipeline::train_loop(&prep, &cfg.train, &cfg.model, &cfg.mask, |r| {
        log(format!("epoch {:>4}  train {:.5}  val {:.5}", r.epoch, r.train_loss, r.val_loss))
    })?;
    let ckpt = Checkpoint::new(
        outcome.params,
        cfg.train.schedule.clone(),
        prep.normalizer.clone(),
        cfg.kernel.clone(),
        cfg.train.sequence_length,
    );
    ckpt.save(&out.join("checkpoint.bin"))?;
    io::write_loss_curve(&out.join("loss_curve.csv"), &outcome.curve)?;
    io::write_json(&out.join("train_summary.json"), &outcome.summary)?;
    log(format!("checkpoint written to {}", out.join("checkpoint.bin").display()));
    Ok(())
}

fn impute(a: &ImputeArgs, command: &Command) -> AppResult<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let training = ckpt.header.schedule.training()?;
    let sampler = a.sampler.resolve(&ckpt, &training)?;
    let ds = load_dataset(&a.data.values, &a.data.distances, a.data.marker())?;
    ds.validate()?;
    if ds.nodes() != ckpt.header.normalizer.mean.len() {
        return Err(AppError::Config(format!(
            "dataset has {} nodes, checkpoint was trained on {}",
            ds.nodes(),
            ckpt.header.normalizer.mean.len()
        )));
    }
    let targets = match &a.mask {
        Some(p) => {
            let m = io::read_mask(p)?;
            if m.mask.shape() != ds.observed_mask.shape() {
                return Err(AppError::Config(format!("{}: mask shape differs from the dataset", p.display())));
            }
            m.mask
        }
        None => Mask::empty(ds.len(), ds.nodes()),
    };
    let graph = ds.graph(&ckpt.header.kernel)?;
    let result = pipeline::impute_series(
        &ckpt.params,
        &graph,
        &ckpt.header.normalizer,
        &ds.values,
        &ds.observed_mask,
        &targets,
        0..ds.len(),
        ckpt.header.sequence_length,
        &training,
        &sampler,
        a.sampler.samples,
        a.ensemble,
        a.trace,
    )?;
    let out = &a.output_dir;
    write_resolved(out, command)?;
    io::write_values(&out.join("imputed.csv"), &ds.node_ids, &ds.timestamps, &result.point, None, 0.0)?;
    if let Some(ens) = &result.ensemble {
        io::write_ensemble(&out.join("ensemble.csv"), &ds.node_ids, &ds.timestamps, ens)?;
    }
    if let Some(t) = &result.trace {
        io::write_trace(&out.join("trace.csv"), t)?;
    }
    log(format!(
        "{} with {} steps ({} predictor calls per sample), output in {}",
        sampler.method,
        sampler.steps,
        sampler.method.evaluations(sampler.steps, sampler.warmup()),
        out.display()
    ));
    Ok(())
}

fn evaluate(a: &EvaluateArgs, command: &Command) -> AppResult<()> {
    let marker = (!a.no_missing_marker).then_some(a.missing_marker);
    let truth = io::read_values(&a.truth, marker)?;
    let mask = io::read_mask(&a.mask)?;
    let shape = truth.values.shape();
    let check = |what: &Path, s: (usize, usize)| {
        if s == shape {
            Ok(())
        } else {
            Err(AppError::Config(format!("{}: shape {s:?} differs from the truth {shape:?}", what.display())))
        }
    };
    check(&a.mask, mask.mask.shape())?;
    let ensemble = match &a.ensemble {
        Some(p) => {
            let (_, _, samples) = io::read_ensemble(p)?;
            for s in &samples {
                check(p, s.shape())?;
            }
            Some(samples)
        }
        None => None,
    };
    let point = match (&a.imputed, &ensemble) {
        (Some(p), _) => {
            let t = io::read_values(p, None)?;
            check(p, t.values.shape())?;
            t.values
        }
        (None, Some(samples)) => pipeline::median(samples)?,
        (None, None) => return Err(AppError::Usage("pass --imputed, --ensemble or both".into())),
    };
    let scored = mask.mask.and(&truth.mask);
    let skipped = mask.mask.count() - scored.count();
    if skipped > 0 {
        log(format!("{skipped} masked entries have no ground truth and are skipped"));
    }
    let mut builder = ReportBuilder::new();
    let ens = ensemble.map(|s| SampleEnsemble::new(s, scored.clone())).transpose()?;
    builder.add(&truth.values, &point, ens.as_ref(), &scored)?;
    let report = builder.finish()?;
    let out = &a.output_dir;
    write_resolved(out, command)?;
    io::write_json(&out.join("report.json"), &report)?;
    io::write_node_report(&out.join("per_node.csv"), &report, Some(&truth.node_ids))?;
    println!("{}", serde_json::to_string(&report).map_err(|e| AppError::Format(e.to_string()))?);
    Ok(())
}

fn parse_runs(
    runs: &str,
    ckpt: &Checkpoint,
    training: &TrainingSchedule,
    aligned_path: Option<&Path>,
    seed: u64,
) -> AppResult<Vec<SamplerConfig>> {
    let mut out = Vec::new();
    for entry in runs.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (m, s) = entry
            .split_once('@')
            .ok_or_else(|| AppError::Usage(format!("run '{entry}' is not METHOD@STEPS or METHOD@aligned")))?;
        let method = parse_method(m).map_err(AppError::Usage)?;
        let mut cfg = if s == "aligned" {
            let aligned = match aligned_path {
                Some(p) => config::read_aligned(p, &ckpt.header.schedule, training)?,
                None => ckpt
                    .header
                    .schedule
                    .aligned(training)?
                    .ok_or_else(|| AppError::Usage("no aligned schedule given and none in the checkpoint".into()))?,
            };
            SamplerConfig::new(method, aligned.steps()).with_aligned(aligned)
        } else {
            let steps = s.parse().map_err(|_| AppError::Usage(format!("bad step count in '{entry}'")))?;
            SamplerConfig::new(method, steps)
        };
        cfg.seed = seed;
        cfg.validate(training).map_err(|e| AppError::Usage(format!("{entry}: {e}")))?;
        out.push(cfg);
    }
    if out.is_empty() {
        return Err(AppError::Usage("--runs is empty".into()));
    }
    Ok(out)
}

fn bench(a: &BenchArgs, command: &Command) -> AppResult<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let training = ckpt.header.schedule.training()?;
    let configs = parse_runs(&a.runs, &ckpt, &training, a.aligned_schedule.as_deref(), a.seed)?;
    let ds = load_dataset(&a.data.values, &a.data.distances, a.data.marker())?;
    let graph = ds.graph(&ckpt.header.kernel)?;
    let length = ckpt.header.sequence_length;
    let normalized = ckpt.header.normalizer.normalize(&ds.values)?;
    let starts = pipeline::tiling(0..ds.len(), length);
    if a.windows == 0 || starts.len() < a.windows {
        return Err(AppError::Usage(format!("need {} windows of {length}, dataset has {}", a.windows, starts.len())));
    }
    let spec = MaskSpec { seed: a.seed, ..MaskSpec::point() };
    let tasks = starts[..a.windows]
        .iter()
        .enumerate()
        .map(|(w, &s)| {
            let obs = ds.observed_mask.window(s, length);
            let mut rng = derived_rng(spec.seed, 4, w as u64);
            let (held, _) = training::make_targets(&obs, &spec, &mut rng)?;
            let target = Mask::from_fn(length, ds.nodes(), |l, n| held.get(l, n) || !obs.get(l, n));
            ImputationTask::new(normalized.window(s, length), obs, target, &graph, 0.0).map_err(AppError::from)
        })
        .collect::<AppResult<Vec<_>>>()?;
    let rows = pipeline::bench(&ckpt.params, &tasks, &training, &configs, a.repeats as usize)?;
    let out = &a.output_dir;
    write_resolved(out, command)?;
    io::write_csv_rows(&out.join("bench.csv"), &rows)?;
    if a.plot {
        let bars: Vec<(String, f64)> = rows
            .iter()
            .map(|r| (format!("{} ({} {})", r.method, r.steps, r.schedule), r.median_ms))
            .collect();
        let title = format!("Median sampling time, {} windows of {length}", a.windows);
        io::write_text(&out.join("bench.svg"), &io::bar_chart_svg(&title, "ms", &bars))?;
    }
    for r in &rows {
        log(format!(
            "{:<9} {:>3} {:<8} {:>9.2} ms  x{:.2}",
            r.method, r.steps, r.schedule, r.median_ms, r.speedup
        ));
    }
    Ok(())
}

