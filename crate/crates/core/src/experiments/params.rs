//! Trainable-parameter accounting per method and rank.

use serde::{Deserialize, Serialize};

use crate::adapter::{LoraAdapter, TrainMode, TriAdapter};
use crate::config::Method;
use crate::error::{Error, Result};
use crate::model::{AdapterTemplate, ToyModelSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamsConfig {
    pub widths: Vec<usize>,
    pub depth: usize,
    pub mlp_factor: f64,
    pub ranks: Vec<usize>,
}

impl Default for ParamsConfig {
    fn default() -> Self {
        ParamsConfig {
            widths: vec![32, 64, 768],
            depth: 2,
            mlp_factor: 4.0,
            ranks: vec![8, 16, 32, 64],
        }
    }
}

/// One row of the table. `percent` is adapter entries over frozen base entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub width: usize,
    pub depth: usize,
    pub method: Method,
    pub rank: usize,
    pub trainable: usize,
    pub closed_form: usize,
    pub base: usize,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsReport {
    pub rows: Vec<ParamRow>,
    /// `(width, rank)` pairs left out because the rank exceeds a layer dimension.
    pub skipped: Vec<(usize, usize)>,
}

const METHODS: [Method; 3] = [Method::Lora, Method::BOnly, Method::Abc];

/// Closed forms: LoRA `r(m + n)`, B_ONLY `r²`, ABC `mr + r² + rn`, summed
/// over layers.
pub fn closed_form(shapes: &[(String, usize, usize)], method: Method, r: usize) -> usize {
    shapes
        .iter()
        .map(|(_, m, n)| match method {
            Method::Lora => r * (m + n),
            Method::BOnly => r * r,
            Method::Abc => m * r + r * r + r * n,
        })
        .sum()
}

/// Counts entries of instantiated adapters; base weights are never built, so
/// wide models stay cheap.
pub fn counted(shapes: &[(String, usize, usize)], method: Method, r: usize) -> Result<usize> {
    let template = method.template(&AdapterTemplate::tri(r, TrainMode::Abc, 0));
    let mut total = 0;
    for (i, (name, m, n)) in shapes.iter().enumerate() {
        if r > (*m).min(*n) {
            return Err(Error::RankTooLarge {
                layer: name.clone(),
                rank: r,
                dim: (*m).min(*n),
            });
        }
        total += match method {
            Method::Lora => {
                let ad = LoraAdapter::init(*m, *n, r, 0)?;
                ad.a.len() + ad.b.len()
            }
            _ => TriAdapter::init(template.spec_for(*m, *n, i))?.trainable_count(),
        };
    }
    Ok(total)
}

pub fn run_params(cfg: &ParamsConfig) -> Result<ParamsReport> {
    if cfg.widths.is_empty() || cfg.ranks.is_empty() || cfg.depth == 0 {
        return Err(Error::Config("params needs widths, ranks and depth >= 1".into()));
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &width in &cfg.widths {
        let spec = ToyModelSpec {
            mlp_factor: cfg.mlp_factor,
            ..ToyModelSpec::new(width, cfg.depth, 2, 0)
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        let shapes = spec.layer_shapes();
        let base: usize = shapes.iter().map(|(_, m, n)| m * n).sum();
        for &rank in &cfg.ranks {
            if rank == 0 || rank > width.min(spec.hidden()) {
                skipped.push((width, rank));
                continue;
            }
            for method in METHODS {
                let trainable = counted(&shapes, method, rank)?;
                rows.push(ParamRow {
                    width,
                    depth: cfg.depth,
                    method,
                    rank,
                    trainable,
                    closed_form: closed_form(&shapes, method, rank),
                    base,
                    percent: 100.0 * trainable as f64 / base as f64,
                });
            }
        }
    }
    Ok(ParamsReport { rows, skipped })
}
