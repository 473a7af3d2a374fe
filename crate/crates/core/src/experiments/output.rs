//! Output files: sweep CSVs, command summaries, and wall-time masking for
//! determinism comparisons.
//!
//! Every timing column or key ends in `seconds`; everything else is a pure
//! function of the config and its seeds.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::experiments::runner::{Aggregate, RunSummary};

/// Column order of sweep CSVs. Aggregate rows put medians over seeds in the
/// metric columns and leave `seed` and `status` empty.
pub const SWEEP_HEADER: [&str; 18] = [
    "row_type",
    "label",
    "method",
    "rank",
    "ratio_base",
    "seed",
    "status",
    "runs",
    "converged",
    "epochs_to_threshold",
    "iqr_epochs_to_threshold",
    "best_val_acc",
    "final_val_acc",
    "iqr_final_val_acc",
    "final_val_mcc",
    "final_train_loss",
    "trainable_params",
    "median_epoch_seconds",
];

#[derive(Serialize)]
struct SweepRow<'a> {
    row_type: &'static str,
    label: &'a str,
    method: Option<&'static str>,
    rank: usize,
    ratio_base: f64,
    seed: Option<u64>,
    status: Option<&'a str>,
    runs: Option<usize>,
    converged: Option<usize>,
    epochs_to_threshold: Option<f64>,
    iqr_epochs_to_threshold: Option<f64>,
    best_val_acc: Option<f64>,
    final_val_acc: Option<f64>,
    iqr_final_val_acc: Option<f64>,
    final_val_mcc: Option<f64>,
    final_train_loss: Option<f64>,
    trainable_params: Option<usize>,
    median_epoch_seconds: Option<f64>,
}

pub fn write_sweep_csv<W: Write>(out: W, runs: &[RunSummary], aggregates: &[Aggregate]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for r in runs {
        w.serialize(SweepRow {
            row_type: "run",
            label: &r.label,
            method: r.method.map(|m| m.as_str()),
            rank: r.rank,
            ratio_base: r.ratio_base,
            seed: Some(r.seed),
            status: Some(&r.status),
            runs: None,
            converged: None,
            epochs_to_threshold: r.epochs_to_threshold.map(|e| e as f64),
            iqr_epochs_to_threshold: None,
            best_val_acc: r.best_val_acc,
            final_val_acc: r.final_val_acc,
            iqr_final_val_acc: None,
            final_val_mcc: r.final_val_mcc,
            final_train_loss: r.final_train_loss,
            trainable_params: r.trainable_params,
            median_epoch_seconds: r.median_epoch_seconds,
        })?;
    }
    for a in aggregates {
        w.serialize(SweepRow {
            row_type: "aggregate",
            label: &a.label,
            method: a.method.map(|m| m.as_str()),
            rank: a.rank,
            ratio_base: a.ratio_base,
            seed: None,
            status: None,
            runs: Some(a.runs),
            converged: Some(a.converged),
            epochs_to_threshold: a.median_epochs_to_threshold,
            iqr_epochs_to_threshold: a.iqr_epochs_to_threshold,
            best_val_acc: a.median_best_val_acc,
            final_val_acc: a.median_final_val_acc,
            iqr_final_val_acc: a.iqr_final_val_acc,
            final_val_mcc: a.median_final_val_mcc,
            final_train_loss: None,
            trainable_params: None,
            median_epoch_seconds: a.median_epoch_seconds,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Writes any serializable rows as CSV with a header taken from the field names.
pub fn write_rows_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CommandSummary<'a, C: Serialize, R: Serialize> {
    command: &'a str,
    config: &'a C,
    result: &'a R,
}

/// One JSON document per command invocation, carrying the resolved config.
pub fn write_summary<C: Serialize, R: Serialize>(path: &Path, command: &str, config: &C, result: &R) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(&CommandSummary {
        command,
        config,
        result,
    })?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn is_time_key(key: &str) -> bool {
    key.ends_with("seconds")
}

/// Blanks every column whose header ends in `seconds`.
pub fn mask_csv_times(text: &str) -> Result<String> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut masked: Vec<bool> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if i == 0 {
            masked = rec.iter().map(is_time_key).collect();
            w.write_record(&rec)?;
        } else {
            w.write_record(
                rec.iter()
                    .enumerate()
                    .map(|(j, f)| if masked.get(j) == Some(&true) { "" } else { f }),
            )?;
        }
    }
    Ok(
        String::from_utf8(w.into_inner().map_err(|e| crate::Error::invalid(e.to_string()))?)
            .expect("csv output is utf-8"),
    )
}

/// Nulls every object key ending in `seconds`, recursively.
pub fn mask_json_times(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                if is_time_key(k) {
                    *v = serde_json::Value::Null;
                } else {
                    mask_json_times(v);
                }
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(mask_json_times),
        _ => {}
    }
}

/// Every file under `dir` keyed by relative path, with timing fields masked
/// in `.csv` and `.json` files. Two runs of the same command compare equal
/// exactly when their outputs are byte-identical outside timing fields.
pub fn snapshot_dir(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(dir)
                .expect("under dir")
                .to_string_lossy()
                .replace('\\', "/");
            let text = std::fs::read_to_string(&path)?;
            let masked = match path.extension().and_then(|e| e.to_str()) {
                Some("csv") => mask_csv_times(&text)?,
                Some("json") => {
                    let mut v: serde_json::Value = serde_json::from_str(&text)?;
                    mask_json_times(&mut v);
                    serde_json::to_string_pretty(&v)?
                }
                _ => text,
            };
            out.insert(rel, masked);
        }
    }
    Ok(out)
}
