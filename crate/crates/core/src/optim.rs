//! Sign descent and AdamW with per-factor learning rates.
//!
//! The rate ratios between the three factors come from balancing the
//! first-order loss decrease each factor produces under a sign step:
//!
//! * `Eq7`:  `η_A : η_B : η_C = 1 : n^{3/2} : n^{3/2}/m` using the layer's own `m x n`.
//! * `Eq8`:  `η_A : η_B : η_C = 1 : λ^{3/2} : λ^{1/2}` with a single global ratio base `λ`.
//!
//! A warmup/decay multiplier scales all three rates together, so the ratios
//! hold at every step.

use serde::{Deserialize, Serialize};

use crate::adapter::{Factor, TriAdapter};
use crate::error::{Error, Result};
use crate::grad::{FactorRates, GradTriple};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    #[default]
    Uniform,
    /// Per-layer ratios from the layer's `(m, n)`.
    Eq7,
    /// Global ratio base `λ` applied to every layer.
    Eq8,
}

fn default_ratio_base() -> f64 {
    1.0
}

fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}

fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// `η_A`, the rate every other factor's rate is derived from.
    pub base_lr: f64,
    #[serde(default)]
    pub ratio_mode: RatioMode,
    #[serde(default = "default_ratio_base")]
    pub ratio_base: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup_ratio: f64,
    /// Filled in by the trainer (`epochs × batches per epoch`) when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<usize>,
}

impl OptimizerConfig {
    pub fn new(base_lr: f64) -> Self {
        OptimizerConfig {
            base_lr,
            ratio_mode: RatioMode::Uniform,
            ratio_base: 1.0,
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: 0.0,
            warmup_ratio: 0.0,
            total_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be finite and nonnegative, got {}", self.base_lr));
        }
        if !(self.ratio_base > 0.0 && self.ratio_base.is_finite()) {
            return bad(format!("ratio_base must be positive, got {}", self.ratio_base));
        }
        for (i, b) in self.betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                return bad(format!("betas[{i}] must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio must lie in [0, 1), got {}", self.warmup_ratio));
        }
        if self.total_steps == Some(0) {
            return bad("total_steps must be positive".into());
        }
        Ok(())
    }
}

/// Per-factor rates for a layer of shape `m x n` (before the schedule multiplier).
pub fn lr_ratios(cfg: &OptimizerConfig, m: usize, n: usize) -> FactorRates {
    let eta = cfg.base_lr;
    match cfg.ratio_mode {
        RatioMode::Uniform => FactorRates::uniform(eta),
        RatioMode::Eq7 => {
            let n32 = (n as f64).powf(1.5);
            FactorRates {
                a: eta,
                b: eta * n32,
                c: eta * n32 / m as f64,
            }
        }
        RatioMode::Eq8 => {
            let lambda = cfg.ratio_base;
            FactorRates {
                a: eta,
                b: eta * lambda.powf(1.5),
                c: eta * lambda.sqrt(),
            }
        }
    }
}

/// Rates that make the three first-order loss contributions of a sign step
/// identical: `η_X = η_A·‖G_A‖₁ / ‖G_X‖₁`.
pub fn equilibrating_rates(grads: &GradTriple, eta_a: f64) -> Result<FactorRates> {
    let [la, lb, lc] = grads.l1_norms();
    if la == 0.0 || lb == 0.0 || lc == 0.0 {
        return Err(Error::invalid("equilibration needs nonzero gradient norms"));
    }
    Ok(FactorRates {
        a: eta_a,
        b: eta_a * la / lb,
        c: eta_a * la / lc,
    })
}

/// Number of warmup steps for a run of `total_steps`.
pub fn warmup_steps(warmup_ratio: f64, total_steps: usize) -> usize {
    (warmup_ratio * total_steps as f64).round() as usize
}

/// Linear warmup from 0 to 1 over `warmup_ratio · total_steps`, then linear
/// decay to 0 at `total_steps`.
pub fn lr_schedule(cfg: &OptimizerConfig, step: usize) -> Result<f64> {
    let total = cfg
        .total_steps
        .ok_or_else(|| Error::Config("total_steps is not set".into()))?;
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    let warmup = warmup_steps(cfg.warmup_ratio, total);
    Ok(if step < warmup {
        step as f64 / warmup as f64
    } else {
        (total - step) as f64 / (total - warmup) as f64
    })
}

/// First and second moment estimates for one parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
}

impl Moments {
    pub fn zeros_like(p: &Matrix) -> Self {
        Moments {
            m: Matrix::zeros(p.rows(), p.cols()),
            v: Matrix::zeros(p.rows(), p.cols()),
        }
    }
}

/// One bias-corrected AdamW update of `param`, at 1-based step `t`, with
/// decoupled weight decay `param ← param − lr·wd·param`.
pub fn adamw_update(param: &mut Matrix, grad: &Matrix, moments: &mut Moments, lr: f64, cfg: &OptimizerConfig, t: u64) {
    let [beta1, beta2] = cfg.betas;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let decay = lr * cfg.weight_decay;
    let p = param.as_mut_slice();
    let m = moments.m.as_mut_slice();
    let v = moments.v.as_mut_slice();
    for (((p, &g), m), v) in p.iter_mut().zip(grad.as_slice()).zip(m).zip(v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        if decay != 0.0 {
            *p -= decay * *p;
        }
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam state for the trainable factors of one tri-matrix adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub a: Option<Moments>,
    pub b: Moments,
    pub c: Option<Moments>,
}

impl OptimizerState {
    pub fn new(ad: &TriAdapter) -> Self {
        let mode = ad.mode();
        OptimizerState {
            step: 0,
            a: mode.trains(Factor::A).then(|| Moments::zeros_like(ad.a())),
            b: Moments::zeros_like(ad.b()),
            c: mode.trains(Factor::C).then(|| Moments::zeros_like(ad.c())),
        }
    }

    fn moments_mut(&mut self, f: Factor) -> Option<&mut Moments> {
        match f {
            Factor::A => self.a.as_mut(),
            Factor::B => Some(&mut self.b),
            Factor::C => self.c.as_mut(),
        }
    }
}

fn check_trainable_grads(ad: &TriAdapter, grads: &GradTriple) -> Result<()> {
    for f in Factor::ALL {
        if !ad.mode().trains(f) {
            continue;
        }
        let g = grads.get(f);
        if g.shape() != ad.factor(f).shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer gradient",
                lhs: ad.factor(f).shape(),
                rhs: g.shape(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {f}")));
        }
    }
    Ok(())
}

/// `X ← X − η_X·sign(∂L/∂X)` for every factor the adapter's mode trains.
pub fn signsgd_step(ad: &mut TriAdapter, grads: &GradTriple, rates: FactorRates) -> Result<()> {
    check_trainable_grads(ad, grads)?;
    for (f, param) in ad.trainable_mut() {
        param.axpy(-rates.get(f), &grads.get(f).sign())?;
    }
    Ok(())
}

/// One AdamW step on the trainable factors. Frozen factors and their
/// gradients are ignored.
pub fn adamw_step(
    ad: &mut TriAdapter,
    grads: &GradTriple,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    rates: FactorRates,
) -> Result<()> {
    check_trainable_grads(ad, grads)?;
    state.step += 1;
    let t = state.step;
    for (f, param) in ad.trainable_mut() {
        let moments = state
            .moments_mut(f)
            .ok_or_else(|| Error::invalid(format!("optimizer state has no moments for {f}")))?;
        if moments.m.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer state",
                lhs: param.shape(),
                rhs: moments.m.shape(),
            });
        }
        adamw_update(param, grads.get(f), moments, rates.get(f), cfg, t);
    }
    Ok(())
}
