//! Command implementations behind the `trilora` binary.
//!
//! Each `cmd_*` function runs one experiment, writes its files under `out`
//! and returns the in-memory result. Per-run CSVs go to `out/runs/`; every
//! invocation writes one `summary.json` holding the resolved config.

pub mod gradcheck;
pub mod output;
pub mod params;
pub mod runner;
pub mod scaling;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Method, RunConfig};
use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::optim::RatioMode;
use crate::task::generate;

use gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport};
use output::{write_rows_csv, write_summary, write_sweep_csv};
use params::{run_params, ParamsConfig, ParamsReport};
use runner::{aggregate, run_jobs, Aggregate, Job, RunSummary};
use scaling::{run_scaling, ScalingConfig, ScalingReport};

pub const SUMMARY_FILE: &str = "summary.json";
pub const RUNS_DIR: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: String,
    pub values: Vec<String>,
    pub runs: Vec<RunSummary>,
    pub aggregates: Vec<Aggregate>,
}

impl SweepResult {
    pub fn aggregate(&self, label: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.label == label)
    }

    pub fn failed_runs(&self) -> usize {
        self.runs.iter().filter(|r| !r.ok()).count()
    }
}

pub fn ratio_label(lambda: f64) -> String {
    format!("lambda{lambda}")
}

pub fn compare_label(method: Method, rank: usize) -> String {
    format!("{}_r{rank}", method.as_str())
}

/// One job per configured seed.
pub fn train_jobs(cfg: &RunConfig) -> Vec<Job> {
    cfg.seeds
        .iter()
        .map(|&s| Job {
            label: "train".into(),
            method: None,
            rank: cfg.adapter.rank,
            ratio_base: cfg.optimizer.ratio_base,
            run: cfg.resolve(s),
        })
        .collect()
}

/// One job per `(λ, seed)`; each run uses eq8 rates with `ratio_base = λ`.
pub fn ratio_sweep_jobs(cfg: &RunConfig) -> Result<Vec<Job>> {
    let section = cfg
        .ratio_sweep
        .as_ref()
        .ok_or_else(|| Error::Config("ratio-sweep needs a \"ratio_sweep\" section with \"ratios\"".into()))?;
    let mut jobs = Vec::new();
    for &lambda in &section.ratios {
        for &s in &cfg.seeds {
            let mut run = cfg.resolve(s);
            run.optimizer.ratio_mode = RatioMode::Eq8;
            run.optimizer.ratio_base = lambda;
            jobs.push(Job {
                label: ratio_label(lambda),
                method: None,
                rank: cfg.adapter.rank,
                ratio_base: lambda,
                run,
            });
        }
    }
    Ok(jobs)
}

/// One job per `(method, rank, seed)`. All methods share the optimizer
/// section; LoRA's `A` and `B` take the `A` and `B` rates.
pub fn compare_jobs(cfg: &RunConfig) -> Result<Vec<Job>> {
    let section = cfg
        .compare
        .as_ref()
        .ok_or_else(|| Error::Config("compare needs a \"compare\" section with \"ranks\" and \"methods\"".into()))?;
    let mut jobs = Vec::new();
    for &rank in &section.ranks {
        for &method in &section.methods {
            for &s in &cfg.seeds {
                let mut run = cfg.resolve(s);
                let seed = run.adapter.seed;
                run.adapter = method.template(&cfg.adapter);
                run.adapter.rank = rank;
                run.adapter.r1 = None;
                run.adapter.r2 = None;
                run.adapter.seed = seed;
                jobs.push(Job {
                    label: compare_label(method, rank),
                    method: Some(method),
                    rank,
                    ratio_base: cfg.optimizer.ratio_base,
                    run,
                });
            }
        }
    }
    Ok(jobs)
}

/// Validates every job without training: builds data, model and adapters.
/// Returns the number of jobs checked.
pub fn dry_run(jobs: &[Job]) -> Result<usize> {
    for job in jobs {
        let data = generate(&job.run.task, &job.run.model).map_err(|e| Error::Config(e.to_string()))?;
        let mut model = ToyModel::build(job.run.model.clone()).map_err(|e| Error::Config(e.to_string()))?;
        model
            .inject(&job.run.adapter)
            .map_err(|e| Error::Config(e.to_string()))?;
        debug_assert_eq!(data.train.len(), job.run.task.train_size);
    }
    Ok(jobs.len())
}

fn run_sweep(cfg: &RunConfig, out: &Path, command: &str, axis: &str, jobs: Vec<Job>) -> Result<SweepResult> {
    let runs = run_jobs(&jobs, cfg.workers, Some(&out.join(RUNS_DIR)))?;
    let aggregates = aggregate(&runs, cfg.epochs);
    let result = SweepResult {
        axis: axis.to_string(),
        values: aggregates.iter().map(|a| a.label.clone()).collect(),
        runs,
        aggregates,
    };
    let file = std::fs::File::create(out.join("sweep.csv"))?;
    write_sweep_csv(file, &result.runs, &result.aggregates)?;
    write_summary(&out.join(SUMMARY_FILE), command, cfg, &result)?;
    Ok(result)
}

/// Trains one model per configured seed.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Vec<RunSummary>> {
    std::fs::create_dir_all(out)?;
    let jobs = train_jobs(cfg);
    let runs = run_jobs(&jobs, cfg.workers, Some(&out.join(RUNS_DIR)))?;
    write_summary(&out.join(SUMMARY_FILE), "train", cfg, &runs)?;
    Ok(runs)
}

pub fn cmd_ratio_sweep(cfg: &RunConfig, out: &Path) -> Result<SweepResult> {
    std::fs::create_dir_all(out)?;
    let jobs = ratio_sweep_jobs(cfg)?;
    run_sweep(cfg, out, "ratio-sweep", "ratio_base", jobs)
}

pub fn cmd_compare(cfg: &RunConfig, out: &Path) -> Result<SweepResult> {
    std::fs::create_dir_all(out)?;
    let jobs = compare_jobs(cfg)?;
    run_sweep(cfg, out, "compare", "method_rank", jobs)
}

pub fn cmd_gradcheck(cfg: &GradcheckConfig, out: &Path) -> Result<GradcheckReport> {
    let report = run_gradcheck(cfg)?;
    write_summary(&out.join(SUMMARY_FILE), "gradcheck", cfg, &report)?;
    Ok(report)
}

pub fn cmd_params(cfg: &ParamsConfig, out: &Path) -> Result<ParamsReport> {
    let report = run_params(cfg)?;
    write_rows_csv(&out.join("params.csv"), &report.rows)?;
    write_summary(&out.join(SUMMARY_FILE), "params", cfg, &report)?;
    Ok(report)
}

#[derive(Serialize)]
struct SlopeRow {
    seed: String,
    slope_a: f64,
    slope_b: f64,
    slope_c: f64,
}

pub fn cmd_scaling(cfg: &ScalingConfig, out: &Path) -> Result<ScalingReport> {
    let report = run_scaling(cfg)?;
    write_rows_csv(&out.join("scaling.csv"), &report.rows)?;
    let mut slopes: Vec<SlopeRow> = report
        .per_seed_slopes
        .iter()
        .map(|(seed, s)| SlopeRow {
            seed: seed.to_string(),
            slope_a: s.a,
            slope_b: s.b,
            slope_c: s.c,
        })
        .collect();
    slopes.push(SlopeRow {
        seed: "mean".into(),
        slope_a: report.slopes.a,
        slope_b: report.slopes.b,
        slope_c: report.slopes.c,
    });
    write_rows_csv(&out.join("slopes.csv"), &slopes)?;
    write_summary(&out.join(SUMMARY_FILE), "scaling", cfg, &report)?;
    Ok(report)
}

/// Reads an optional JSON config for commands whose settings all have
/// defaults. Unknown keys are rejected.
pub fn load_or_default<T>(path: Option<&Path>) -> Result<T>
where
    T: Default + for<'de> Deserialize<'de>,
{
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}
