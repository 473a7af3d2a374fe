//! Executes independent training runs, optionally in parallel, and
//! summarizes them.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Method, ResolvedRun};
use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::task::generate;
use crate::train::{best_epoch, epochs_to_threshold, median, save_records_csv, train, RunRecord};

/// One run of a sweep: a resolved configuration plus its axis coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub label: String,
    pub method: Option<Method>,
    pub rank: usize,
    pub ratio_base: f64,
    pub run: ResolvedRun,
}

impl Job {
    pub fn file_name(&self) -> String {
        format!("{}_seed{}.csv", self.label, self.run.run_seed)
    }
}

/// Builds the model and data for `run`, injects adapters and trains.
/// Returns the per-epoch records and the adapter parameter count.
pub fn execute(run: &ResolvedRun) -> Result<(Vec<RunRecord>, usize)> {
    let data = generate(&run.task, &run.model)?;
    let mut model = ToyModel::build(run.model.clone())?;
    model.inject(&run.adapter)?;
    let params = model.adapter_param_count();
    let records = train(&mut model, &data, &run.optimizer, &run.settings)?;
    Ok((records, params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub method: Option<Method>,
    pub rank: usize,
    pub ratio_base: f64,
    pub seed: u64,
    /// `"ok"` or the failure message.
    pub status: String,
    pub csv: Option<String>,
    pub trainable_params: Option<usize>,
    pub epochs_to_threshold: Option<usize>,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub final_val_acc: Option<f64>,
    pub final_val_mcc: Option<f64>,
    pub median_epoch_seconds: Option<f64>,
}

impl RunSummary {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    fn new(job: &Job, status: String) -> Self {
        RunSummary {
            label: job.label.clone(),
            method: job.method,
            rank: job.rank,
            ratio_base: job.ratio_base,
            seed: job.run.run_seed,
            status,
            csv: None,
            trainable_params: None,
            epochs_to_threshold: None,
            best_epoch: None,
            best_val_acc: None,
            final_train_loss: None,
            final_val_loss: None,
            final_val_acc: None,
            final_val_mcc: None,
            median_epoch_seconds: None,
        }
    }

    pub fn from_records(job: &Job, records: &[RunRecord], params: usize, csv: Option<String>) -> Self {
        let mut s = RunSummary::new(job, "ok".into());
        s.csv = csv;
        s.trainable_params = Some(params);
        s.epochs_to_threshold = epochs_to_threshold(records, job.run.threshold);
        if let Some(best) = best_epoch(records) {
            s.best_epoch = Some(best.epoch);
            s.best_val_acc = Some(best.val_acc);
        }
        if let Some(last) = records.last() {
            s.final_train_loss = Some(last.train_loss);
            s.final_val_loss = Some(last.val_loss);
            s.final_val_acc = Some(last.val_acc);
            s.final_val_mcc = Some(last.val_mcc);
        }
        s.median_epoch_seconds = median(&mut records.iter().map(|r| r.wall_seconds).collect::<Vec<_>>());
        s
    }
}

/// Runs every job on a pool of `workers` threads. Each job writes its own CSV
/// under `runs_dir` (when given); a failing job is reported in its summary and
/// never affects the others. Summaries come back in job order.
pub fn run_jobs(jobs: &[Job], workers: usize, runs_dir: Option<&Path>) -> Result<Vec<RunSummary>> {
    if let Some(dir) = runs_dir {
        std::fs::create_dir_all(dir)?;
    }
    let one = |job: &Job| -> RunSummary {
        match execute(&job.run) {
            Ok((records, params)) => {
                let csv = match runs_dir {
                    Some(dir) => {
                        let path: PathBuf = dir.join(job.file_name());
                        if let Err(e) = save_records_csv(&path, &records) {
                            return RunSummary::new(job, format!("failed to write {}: {e}", path.display()));
                        }
                        Some(job.file_name())
                    }
                    None => None,
                };
                RunSummary::from_records(job, &records, params, csv)
            }
            Err(e) => RunSummary::new(job, e.to_string()),
        }
    };
    if workers <= 1 {
        return Ok(jobs.iter().map(one).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| jobs.par_iter().map(one).collect()))
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median and interquartile range.
pub fn median_iqr(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some((quantile(&v, 0.5), quantile(&v, 0.75) - quantile(&v, 0.25)))
}

/// Statistics over the seeds of one axis value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub method: Option<Method>,
    pub rank: usize,
    pub ratio_base: f64,
    pub runs: usize,
    pub completed: usize,
    pub converged: usize,
    /// Runs that never reach the threshold count as `epochs + 1`.
    pub median_epochs_to_threshold: Option<f64>,
    pub iqr_epochs_to_threshold: Option<f64>,
    pub median_best_val_acc: Option<f64>,
    pub median_final_val_acc: Option<f64>,
    pub iqr_final_val_acc: Option<f64>,
    pub median_final_val_mcc: Option<f64>,
    pub median_epoch_seconds: Option<f64>,
}

/// Groups summaries by label, keeping first-appearance order.
pub fn aggregate(runs: &[RunSummary], epochs: usize) -> Vec<Aggregate> {
    let mut labels: Vec<&str> = Vec::new();
    for r in runs {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let group: Vec<&RunSummary> = runs.iter().filter(|r| r.label == label).collect();
            let done: Vec<&&RunSummary> = group.iter().filter(|r| r.ok()).collect();
            let pick = |f: fn(&RunSummary) -> Option<f64>| -> Vec<f64> { done.iter().filter_map(|r| f(r)).collect() };
            let ett: Vec<f64> = done
                .iter()
                .map(|r| r.epochs_to_threshold.map_or(epochs as f64 + 1.0, |e| e as f64))
                .collect();
            let ett_stats = median_iqr(&ett);
            let acc_stats = median_iqr(&pick(|r| r.final_val_acc));
            Aggregate {
                label: label.to_string(),
                method: group[0].method,
                rank: group[0].rank,
                ratio_base: group[0].ratio_base,
                runs: group.len(),
                completed: done.len(),
                converged: done.iter().filter(|r| r.epochs_to_threshold.is_some()).count(),
                median_epochs_to_threshold: ett_stats.map(|s| s.0),
                iqr_epochs_to_threshold: ett_stats.map(|s| s.1),
                median_best_val_acc: median_iqr(&pick(|r| r.best_val_acc)).map(|s| s.0),
                median_final_val_acc: acc_stats.map(|s| s.0),
                iqr_final_val_acc: acc_stats.map(|s| s.1),
                median_final_val_mcc: median_iqr(&pick(|r| r.final_val_mcc)).map(|s| s.0),
                median_epoch_seconds: median_iqr(&pick(|r| r.median_epoch_seconds)).map(|s| s.0),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_iqr_match_hand_values() {
        assert_eq!(median_iqr(&[]), None);
        assert_eq!(median_iqr(&[5.0]), Some((5.0, 0.0)));
        // sorted 1 2 3 4 5: q25 = 2, q75 = 4
        assert_eq!(median_iqr(&[3.0, 1.0, 5.0, 2.0, 4.0]), Some((3.0, 2.0)));
        // sorted 1 2 3 4: q25 = 1.75, q50 = 2.5, q75 = 3.25
        assert_eq!(median_iqr(&[4.0, 1.0, 3.0, 2.0]), Some((2.5, 1.5)));
    }
}
