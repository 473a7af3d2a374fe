//! Gradient-norm scaling with layer width at initialization.
//!
//! For each width `n` a square `n x n` adapter with `LECUN_ALL` init receives
//! Gaussian inputs and a Gaussian upstream gradient. We record the ℓ1 norms of
//! the three factor gradients, fit log–log slopes against `n`, and compare how
//! evenly the three first-order loss contributions of one sign step are spread
//! under uniform, eq8 (`λ = n`) and eq7 learning rates.
//!
//! At init the norms grow like `‖G_A‖₁ ~ r·n^1.5`, `‖G_B‖₁ ~ r²·n^0.5` and
//! `‖G_C‖₁ ~ r·n`, so the uniform spread is about `n / r` while the eq7
//! spread is about `r·√n`. Eq7 evens out the contributions better only once
//! `n ≳ r⁴`, which is why the default rank is 4.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterSpec, InitScheme, TrainMode, TriAdapter};
use crate::error::{Error, Result};
use crate::grad::{adapter_grads, loss_delta_components, GradTriple};
use crate::optim::{lr_ratios, OptimizerConfig, RatioMode};
use crate::tensor::{gaussian_matrix, Matrix, SeededRng};
use crate::train::median;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    pub widths: Vec<usize>,
    pub rank: usize,
    pub batch: usize,
    pub seeds: Vec<u64>,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            widths: vec![64, 128, 256, 512],
            rank: 4,
            batch: 16,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub seed: u64,
    pub width: usize,
    pub l1_a: f64,
    pub l1_b: f64,
    pub l1_c: f64,
    pub spread_uniform: f64,
    pub spread_eq8: f64,
    pub spread_eq7: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slopes {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spreads {
    pub uniform: f64,
    pub eq8: f64,
    pub eq7: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of the seed-mean `ln ‖G‖₁` against `ln n`
    /// (equal to the mean of the per-seed slopes).
    pub slopes: Slopes,
    pub per_seed_slopes: Vec<(u64, Slopes)>,
    pub largest_width: usize,
    /// Median over seeds at the largest width.
    pub median_spreads: Spreads,
}

/// Ordinary least-squares slope of `ys` on `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

/// Adapter, input and upstream gradient for one `(width, seed)` cell.
pub fn probe_inputs(width: usize, rank: usize, batch: usize, seed: u64) -> Result<(TriAdapter, Matrix, Matrix)> {
    let mut rng = SeededRng::derive(seed, width as u64);
    let spec = AdapterSpec::new(width, width, rank, TrainMode::Abc, rng.next_u64()).with_init(InitScheme::LecunAll);
    let ad = TriAdapter::init(spec)?;
    let x = gaussian_matrix(width, batch, 1.0, &mut rng)?;
    let u = gaussian_matrix(width, batch, 1.0, &mut rng)?;
    Ok((ad, x, u))
}

fn spreads(g: &GradTriple, n: usize) -> Result<Spreads> {
    let cfg = |mode, base| OptimizerConfig {
        ratio_mode: mode,
        ratio_base: base,
        ..OptimizerConfig::new(1.0)
    };
    let spread = |c: OptimizerConfig| -> Result<f64> { Ok(loss_delta_components(g, lr_ratios(&c, n, n))?.spread()) };
    Ok(Spreads {
        uniform: spread(cfg(RatioMode::Uniform, 1.0))?,
        eq8: spread(cfg(RatioMode::Eq8, n as f64))?,
        eq7: spread(cfg(RatioMode::Eq7, 1.0))?,
    })
}

pub fn run_scaling(cfg: &ScalingConfig) -> Result<ScalingReport> {
    if cfg.widths.len() < 3 {
        return Err(Error::Config(format!(
            "scaling needs at least 3 widths to fit a slope, got {}",
            cfg.widths.len()
        )));
    }
    if cfg.seeds.is_empty() || cfg.rank == 0 || cfg.batch == 0 {
        return Err(Error::Config("scaling needs seeds, rank >= 1 and batch >= 1".into()));
    }
    if let Some(&w) = cfg.widths.iter().find(|&&w| w < cfg.rank) {
        return Err(Error::Config(format!("width {w} is smaller than rank {}", cfg.rank)));
    }
    let xs: Vec<f64> = cfg.widths.iter().map(|&n| (n as f64).ln()).collect();
    let mut rows = Vec::new();
    let mut per_seed_slopes = Vec::new();
    let mut mean_logs = vec![[0.0; 3]; cfg.widths.len()];
    for &seed in &cfg.seeds {
        let mut logs = vec![[0.0; 3]; cfg.widths.len()];
        for (wi, &n) in cfg.widths.iter().enumerate() {
            let (ad, x, u) = probe_inputs(n, cfg.rank, cfg.batch, seed)?;
            let g = adapter_grads(&ad, &x, &u)?;
            let l1 = g.l1_norms();
            let s = spreads(&g, n)?;
            for k in 0..3 {
                logs[wi][k] = l1[k].ln();
                mean_logs[wi][k] += l1[k].ln() / cfg.seeds.len() as f64;
            }
            rows.push(ScalingRow {
                seed,
                width: n,
                l1_a: l1[0],
                l1_b: l1[1],
                l1_c: l1[2],
                spread_uniform: s.uniform,
                spread_eq8: s.eq8,
                spread_eq7: s.eq7,
            });
        }
        per_seed_slopes.push((seed, slopes_of(&xs, &logs)));
    }
    let largest_width = *cfg.widths.iter().max().expect("nonempty");
    let at_largest: Vec<&ScalingRow> = rows.iter().filter(|r| r.width == largest_width).collect();
    let med =
        |f: fn(&ScalingRow) -> f64| median(&mut at_largest.iter().map(|r| f(r)).collect::<Vec<_>>()).expect("nonempty");
    Ok(ScalingReport {
        slopes: slopes_of(&xs, &mean_logs),
        per_seed_slopes,
        largest_width,
        median_spreads: Spreads {
            uniform: med(|r| r.spread_uniform),
            eq8: med(|r| r.spread_eq8),
            eq7: med(|r| r.spread_eq7),
        },
        rows,
    })
}

fn slopes_of(xs: &[f64], logs: &[[f64; 3]]) -> Slopes {
    let col = |k: usize| logs.iter().map(|l| l[k]).collect::<Vec<_>>();
    Slopes {
        a: fit_slope(xs, &col(0)),
        b: fit_slope(xs, &col(1)),
        c: fit_slope(xs, &col(2)),
    }
}
