//! Run configuration documents.

use std::path::{Path, PathBuf};

use faststi_core::data::SplitRatios;
use faststi_core::graph::KernelOptions;
use faststi_core::schedule::{AlignedSchedule, ScheduleSpec, TrainingSchedule};
use faststi_core::solvers::{Method, SamplerConfig};
use faststi_core::training::{MaskSpec, TrainConfig};
use faststi_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::io::{self, DEFAULT_MISSING_MARKER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub values: PathBuf,
    pub distances: PathBuf,
    /// Readings equal to this value are treated as missing; `null` disables it.
    #[serde(default = "default_marker")]
    pub missing_marker: Option<f64>,
}

fn default_marker() -> Option<f64> {
    Some(DEFAULT_MISSING_MARKER)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub method: Method,
    /// Strided steps; ignored when `aligned` is set.
    pub steps: usize,
    /// Use the accelerated noise levels of the training schedule's `xis`.
    pub aligned: bool,
    pub warmup_steps: Option<usize>,
    /// Ensemble size per window.
    pub samples: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            method: Method::FastSti4,
            steps: 50,
            aligned: true,
            warmup_steps: None,
            samples: 8,
        }
    }
}

impl SamplerSection {
    pub fn resolve(&self, spec: &ScheduleSpec, training: &TrainingSchedule, seed: u64) -> AppResult<SamplerConfig> {
        let mut cfg = SamplerConfig::new(self.method, self.steps);
        if self.aligned {
            let aligned = spec
                .aligned(training)?
                .ok_or_else(|| AppError::Config("sampler.aligned is set but the schedule has no xis".into()))?;
            cfg = cfg.with_aligned(aligned);
        }
        cfg.warmup_steps = self.warmup_steps;
        cfg.seed = seed;
        if self.samples == 0 {
            return Err(AppError::Config("sampler.samples must be positive".into()));
        }
        cfg.validate(training)?;
        Ok(cfg)
    }
}

/// Everything a training run needs. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetPaths,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Master seed; copied into the training and mask sections.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub mask: MaskSpec,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub kernel: KernelOptions,
    #[serde(default)]
    pub splits: SplitRatios,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn new(values: PathBuf, distances: PathBuf) -> Self {
        RunConfig {
            dataset: DatasetPaths { values, distances, missing_marker: default_marker() },
            output_dir: default_output(),
            seed: 0,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            mask: MaskSpec::default(),
            sampler: SamplerSection::default(),
            kernel: KernelOptions::default(),
            splits: SplitRatios::default(),
        }
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        io::read_json(path)
    }

    /// Propagates the master seed and checks every section.
    pub fn resolve(mut self) -> AppResult<Self> {
        self.train.seed = self.seed;
        self.mask.seed = self.seed;
        self.train.validate()?;
        self.model.validate()?;
        self.mask.validate()?;
        let training = self.train.schedule.training()?;
        self.sampler.resolve(&self.train.schedule, &training, self.seed)?;
        Ok(self)
    }
}

/// Accelerated schedule file: either a bare list of noise levels or a
/// schedule object carrying `xis`.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum AlignedFile {
    Levels(Vec<f64>),
    Spec(ScheduleSpec),
}

pub fn read_aligned(path: &Path, training_spec: &ScheduleSpec, training: &TrainingSchedule) -> AppResult<AlignedSchedule> {
    let xis = match io::read_json::<AlignedFile>(path)? {
        AlignedFile::Levels(x) => x,
        AlignedFile::Spec(spec) => {
            let same = spec.kind == training_spec.kind
                && spec.beta_1 == training_spec.beta_1
                && spec.beta_t == training_spec.beta_t
                && spec.steps == training_spec.steps;
            if !same {
                return Err(AppError::Config(format!(
                    "{}: training part of the schedule differs from the checkpoint",
                    path.display()
                )));
            }
            spec.xis
                .ok_or_else(|| AppError::Config(format!("{}: schedule has no xis", path.display())))?
        }
    };
    Ok(AlignedSchedule::new(&xis, training)?)
}
