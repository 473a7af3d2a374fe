//! JSON run configuration.
//!
//! Every section rejects unknown keys. A config names one task, one model, one
//! adapter template and one optimizer; sweep commands add their axis in an
//! optional section. Per-run seeds come from the `seeds` list: each run seed
//! overwrites the `seed` fields of the task, model and adapter sections and the
//! shuffle seed with independent values derived from it, so a run is fully
//! determined by `(config, run seed)`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::TrainMode;
use crate::error::{Error, Result};
use crate::model::{AdapterKind, AdapterTemplate, ToyModelSpec};
use crate::optim::OptimizerConfig;
use crate::task::TaskSpec;
use crate::tensor::SeededRng;
use crate::train::TrainSettings;

/// Adapter families compared by the `compare` command.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lora,
    BOnly,
    Abc,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::BOnly => "b_only",
            Method::Abc => "abc",
        }
    }

    /// `base` with this method's kind and mode; ranks and init are kept.
    pub fn template(self, base: &AdapterTemplate) -> AdapterTemplate {
        let mut t = base.clone();
        match self {
            Method::Lora => t.kind = AdapterKind::Lora,
            Method::BOnly => {
                t.kind = AdapterKind::Tri;
                t.mode = TrainMode::BOnly;
            }
            Method::Abc => {
                t.kind = AdapterKind::Tri;
                t.mode = TrainMode::Abc;
            }
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioSweepSection {
    /// Values of `ratio_base` (λ); each run uses `ratio_mode = eq8`.
    pub ratios: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub ranks: Vec<usize>,
    pub methods: Vec<Method>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_workers() -> usize {
    1
}

fn default_threshold() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ToyModelSpec,
    pub adapter: AdapterTemplate,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_path: PathBuf,
    /// Validation accuracy that counts as converged for epochs-to-threshold.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Upper bound on concurrently running sweep jobs.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_sweep: Option<RatioSweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareSection>,
}

/// Everything needed to execute one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub run_seed: u64,
    pub task: TaskSpec,
    pub model: ToyModelSpec,
    pub adapter: AdapterTemplate,
    pub optimizer: OptimizerConfig,
    pub settings: TrainSettings,
    pub threshold: f64,
}

const SEED_MODEL: u64 = 1;
const SEED_TASK: u64 = 2;
const SEED_ADAPTER: u64 = 3;
const SEED_SHUFFLE: u64 = 4;

fn sub_seed(run_seed: u64, label: u64) -> u64 {
    SeededRng::derive(run_seed, label).next_u64()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.model
            .validate()
            .map_err(|e| Error::Config(format!("model: {e}")))?;
        self.task.validate().map_err(|e| Error::Config(format!("task: {e}")))?;
        self.optimizer.validate()?;
        if self.task.input_dim != self.model.width || self.task.num_classes != self.model.num_classes {
            return bad(format!(
                "task.input_dim/num_classes ({}, {}) must equal model.width/num_classes ({}, {})",
                self.task.input_dim, self.task.num_classes, self.model.width, self.model.num_classes
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad(format!("threshold must lie in (0, 1], got {}", self.threshold));
        }
        if self.adapter.rank == 0 {
            return bad("adapter.rank must be at least 1".into());
        }
        if let Some(s) = &self.ratio_sweep {
            if s.ratios.is_empty() || s.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                return bad("ratio_sweep.ratios must be a nonempty list of positive numbers".into());
            }
        }
        if let Some(c) = &self.compare {
            if c.ranks.is_empty() || c.ranks.contains(&0) || c.methods.is_empty() {
                return bad("compare needs nonempty ranks (all >= 1) and methods".into());
            }
        }
        Ok(())
    }

    /// Applies the command-line `--seed`, `--workers` and `--out` overrides.
    pub fn apply_overrides(&mut self, seed: Option<u64>, workers: Option<usize>, out: Option<&Path>) -> Result<()> {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        if let Some(w) = workers {
            self.workers = w;
        }
        if let Some(o) = out {
            self.output_path = o.to_path_buf();
        }
        self.validate()
    }

    pub fn resolve(&self, run_seed: u64) -> ResolvedRun {
        let mut task = self.task.clone();
        task.seed = sub_seed(run_seed, SEED_TASK);
        let mut model = self.model.clone();
        model.seed = sub_seed(run_seed, SEED_MODEL);
        let mut adapter = self.adapter.clone();
        adapter.seed = sub_seed(run_seed, SEED_ADAPTER);
        ResolvedRun {
            run_seed,
            task,
            model,
            adapter,
            optimizer: self.optimizer.clone(),
            settings: TrainSettings {
                epochs: self.epochs,
                batch_size: self.batch_size,
                shuffle_seed: sub_seed(run_seed, SEED_SHUFFLE),
            },
            threshold: self.threshold,
        }
    }
}
