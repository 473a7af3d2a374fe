//! Finite-difference verification of the analytic gradients.
//!
//! The adapter suite draws random shapes per train mode and compares
//! [`adapter_grads`] against central differences of the bilinear probe loss
//! `L = ⟨U, s·CBA·X⟩`. Because `L` is linear in each single entry, central
//! differences are exact up to rounding. The model check perturbs sampled
//! trainable entries of a small [`ToyModel`] and compares against
//! [`ToyModel::backward`].

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterSpec, Factor, InitScheme, TrainMode, TriAdapter};
use crate::error::Result;
use crate::grad::{adapter_grads, finite_diff_grads, relative_error, worst_mismatch, GradTriple, REL_FLOOR_FRACTION};
use crate::model::{AdapterTemplate, HeadInit, ToyModel, ToyModelSpec};
use crate::tensor::{gaussian_matrix, Matrix, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelCheckConfig {
    pub width: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub batch: usize,
    pub rank: usize,
    /// Trainable entries sampled per adapter kind.
    pub entries: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for ModelCheckConfig {
    fn default() -> Self {
        ModelCheckConfig {
            width: 8,
            depth: 1,
            num_classes: 3,
            batch: 6,
            rank: 2,
            entries: 200,
            step: 1e-5,
            tolerance: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub cases_per_mode: usize,
    pub max_dim: usize,
    pub max_rank: usize,
    pub max_batch: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub model: ModelCheckConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            cases_per_mode: 100,
            max_dim: 32,
            max_rank: 8,
            max_batch: 8,
            step: 1e-3,
            tolerance: 1e-6,
            seed: 0,
            model: ModelCheckConfig::default(),
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.cases_per_mode >= 1
            && self.max_dim >= 1
            && self.max_rank >= 1
            && self.max_batch >= 1
            && self.step > 0.0
            && self.tolerance > 0.0
            && self.model.width >= 1
            && self.model.depth >= 1
            && self.model.num_classes >= 2
            && self.model.batch >= 1
            && self.model.rank >= 1
            && self.model.rank <= self.model.width
            && self.model.step > 0.0
            && self.model.tolerance > 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Config(
                "gradcheck settings must be positive, with model.rank <= model.width".into(),
            ))
        }
    }
}

/// One adapter case and its worst entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case: usize,
    pub mode: TrainMode,
    pub m: usize,
    pub n: usize,
    pub r1: usize,
    pub r2: usize,
    pub batch: usize,
    pub scale: f64,
    /// `G_A`, `G_B` or `G_C`.
    pub factor: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckReport {
    pub kind: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub cases: usize,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub worst: CaseReport,
    /// Every case above tolerance.
    pub failures: Vec<CaseReport>,
    pub model_checks: Vec<ModelCheckReport>,
    pub passed: bool,
}

impl GradcheckReport {
    /// `PASS, max rel err 3.2e-11 <= 1e-6, 400 cases` or a FAIL line naming
    /// the worst factor.
    pub fn summary_line(&self) -> String {
        let model_worst = self.model_checks.iter().map(|m| m.max_rel_error).fold(0.0, f64::max);
        if self.passed {
            format!(
                "PASS, max rel err {:.2e} <= {:.0e}, {} cases; model check max rel err {:.2e}",
                self.max_rel_error, self.tolerance, self.cases, model_worst
            )
        } else if self.max_rel_error > self.tolerance {
            let w = &self.worst;
            format!(
                "FAIL, {} of {} cases exceed {:.0e}; worst {} rel err {:.3e} (mode {}, {}x{}, r1={}, r2={}, b={}, entry {:?}: analytic {:.6e} vs numeric {:.6e})",
                self.failures.len(),
                self.cases,
                self.tolerance,
                w.factor,
                w.rel_error,
                w.mode,
                w.m,
                w.n,
                w.r1,
                w.r2,
                w.batch,
                w.index,
                w.analytic,
                w.numeric
            )
        } else {
            let bad = self
                .model_checks
                .iter()
                .find(|m| !m.passed)
                .expect("some model check failed");
            format!(
                "FAIL, {} model check rel err {:.3e} at {}[{}]",
                bad.kind, bad.max_rel_error, bad.worst_param, bad.worst_index
            )
        }
    }
}

fn factor_label(f: Factor) -> String {
    format!("G_{}", f.name())
}

/// Shapes for case `i` of a mode. The first case of every mode is the
/// smallest one (`1 x 1`, ranks 1, batch 1).
fn draw_case(cfg: &GradcheckConfig, i: usize, rng: &mut SeededRng) -> (usize, usize, usize, usize, usize) {
    if i == 0 {
        return (1, 1, 1, 1, 1);
    }
    let m = 1 + rng.below(cfg.max_dim);
    let n = 1 + rng.below(cfg.max_dim);
    let r1 = 1 + rng.below(cfg.max_rank.min(m));
    let r2 = 1 + rng.below(cfg.max_rank.min(n));
    let b = if i == 1 { 1 } else { 1 + rng.below(cfg.max_batch) };
    (m, n, r1, r2, b)
}

/// Runs the suite with the production gradient.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    run_gradcheck_with(cfg, adapter_grads)
}

/// Runs the suite with an arbitrary gradient function, so tests can check
/// that a broken gradient is caught.
pub fn run_gradcheck_with<G>(cfg: &GradcheckConfig, grad_fn: G) -> Result<GradcheckReport>
where
    G: Fn(&TriAdapter, &Matrix, &Matrix) -> Result<GradTriple>,
{
    cfg.validate()?;
    let mut rng = SeededRng::derive(cfg.seed, 0x4743);
    let mut reports = Vec::new();
    for mode in TrainMode::ALL {
        for i in 0..cfg.cases_per_mode {
            let (m, n, r1, r2, b) = draw_case(cfg, i, &mut rng);
            // every third case uses a non-unit scale
            let scale = if i % 3 == 2 { 0.5 + rng.uniform() } else { 1.0 };
            let spec = AdapterSpec {
                m,
                n,
                r1,
                r2,
                mode,
                init: InitScheme::LecunAll,
                seed: rng.next_u64(),
                scale,
            };
            let ad = TriAdapter::init(spec)?;
            let x = gaussian_matrix(n, b, 1.0, &mut rng)?;
            let u = gaussian_matrix(m, b, 1.0, &mut rng)?;
            let analytic = grad_fn(&ad, &x, &u)?;
            let numeric = finite_diff_grads(
                |a| {
                    a.apply(&x)
                        .and_then(|y| y.frobenius_inner(&u))
                        .expect("shapes fixed by construction")
                },
                &ad,
                cfg.step,
            )?;
            let w = worst_mismatch(&analytic, &numeric, mode).expect("B always trains");
            reports.push(CaseReport {
                case: reports.len(),
                mode,
                m,
                n,
                r1,
                r2,
                batch: b,
                scale,
                factor: factor_label(w.factor),
                index: w.index,
                analytic: w.analytic,
                numeric: w.numeric,
                rel_error: w.rel_error,
            });
        }
    }
    let worst = reports
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .cloned()
        .expect("at least one case");
    let failures: Vec<CaseReport> = reports
        .iter()
        .filter(|r| !(r.rel_error <= cfg.tolerance))
        .cloned()
        .collect();
    let model_checks = vec![
        model_check(&cfg.model, false, cfg.seed)?,
        model_check(&cfg.model, true, cfg.seed)?,
    ];
    let passed = failures.is_empty() && model_checks.iter().all(|m| m.passed);
    Ok(GradcheckReport {
        cases: reports.len(),
        tolerance: cfg.tolerance,
        max_rel_error: worst.rel_error,
        worst,
        failures,
        model_checks,
        passed,
    })
}

/// Central differences of the model loss on `entries` randomly chosen
/// trainable entries (adapters and head). Adapters use `LECUN_ALL` init and
/// the head a random init so no gradient is identically zero.
pub fn model_check(cfg: &ModelCheckConfig, lora: bool, seed: u64) -> Result<ModelCheckReport> {
    let spec = ToyModelSpec {
        head_init: HeadInit::Lecun,
        ..ToyModelSpec::new(cfg.width, cfg.depth, cfg.num_classes, seed)
    };
    let mut model = ToyModel::build(spec)?;
    let mut template = if lora {
        AdapterTemplate::lora(cfg.rank, seed)
    } else {
        AdapterTemplate::tri(cfg.rank, TrainMode::Abc, seed)
    };
    template.init = InitScheme::LecunAll;
    model.inject(&template)?;
    if lora {
        // LoRA's B starts at zero; give it values so every path carries gradient
        let mut rng = SeededRng::derive(seed, 0x4c42);
        for layer in model.layers_mut() {
            if let crate::model::AdapterSlot::Lora(ad) = &mut layer.adapter {
                ad.b = gaussian_matrix(ad.b.rows(), ad.b.cols(), 1.0 / ad.rank() as f64, &mut rng)?;
            }
        }
    }

    let mut rng = SeededRng::derive(seed, 0x4d43 + u64::from(lora));
    let x = gaussian_matrix(cfg.width, cfg.batch, 1.0, &mut rng)?;
    let labels: Vec<usize> = (0..cfg.batch).map(|_| rng.below(cfg.num_classes)).collect();
    let (_, grads) = model.backward(&x, &labels)?;
    let analytic: Vec<(String, Matrix)> = model
        .trainable_grads(&grads)
        .into_iter()
        .map(|(name, g)| (name, g.clone()))
        .collect();
    let sizes: Vec<usize> = analytic.iter().map(|(_, g)| g.len()).collect();
    let total: usize = sizes.iter().sum();

    let mut worst = (0.0f64, String::new(), 0usize, 0.0, 0.0);
    for _ in 0..cfg.entries {
        let mut flat = rng.below(total);
        let mut p = 0;
        while flat >= sizes[p] {
            flat -= sizes[p];
            p += 1;
        }
        let perturbed = |delta: f64| -> Result<f64> {
            let mut m2 = model.clone();
            {
                let mut params = m2.trainable_params_mut();
                params[p].1.as_mut_slice()[flat] += delta;
            }
            m2.loss(&x, &labels)
        };
        let numeric = (perturbed(cfg.step)? - perturbed(-cfg.step)?) / (2.0 * cfg.step);
        let (name, g) = &analytic[p];
        let a = g.as_slice()[flat];
        let floor = REL_FLOOR_FRACTION * g.max_abs();
        let rel = relative_error(a, numeric, floor);
        if rel >= worst.0 {
            worst = (rel, name.clone(), flat, a, numeric);
        }
    }
    Ok(ModelCheckReport {
        kind: if lora { "lora" } else { "tri_abc" }.to_string(),
        entries: cfg.entries,
        max_rel_error: worst.0,
        worst_param: worst.1,
        worst_index: worst.2,
        analytic: worst.3,
        numeric: worst.4,
        passed: worst.0 <= cfg.tolerance,
    })
}
