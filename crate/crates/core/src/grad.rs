//! Closed-form adapter gradients, a central-difference oracle to check them,
//! and the first-order loss-change diagnostics used to derive per-factor
//! learning rates.
//!
//! For `Y = s·C·B·A·X` and upstream gradient `U = ∂L/∂Y`:
//!
//! ```text
//! ∂L/∂A = s·Bᵀ Cᵀ U Xᵀ      ∂L/∂B = s·Cᵀ U Xᵀ Aᵀ      ∂L/∂C = s·U Xᵀ Aᵀ Bᵀ
//! ```
//!
//! Every product is evaluated through `r1 x b` / `r2 x b` intermediates so no
//! `m x n` matrix is formed.

use crate::adapter::{Factor, LoraAdapter, TrainMode, TriAdapter};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Gradients with respect to `A`, `B`, `C`, shaped like the factors.
#[derive(Clone, Debug, PartialEq)]
pub struct GradTriple {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
}

impl GradTriple {
    pub fn zeros_like(ad: &TriAdapter) -> Self {
        GradTriple {
            a: Matrix::zeros(ad.a().rows(), ad.a().cols()),
            b: Matrix::zeros(ad.b().rows(), ad.b().cols()),
            c: Matrix::zeros(ad.c().rows(), ad.c().cols()),
        }
    }

    pub fn get(&self, f: Factor) -> &Matrix {
        match f {
            Factor::A => &self.a,
            Factor::B => &self.b,
            Factor::C => &self.c,
        }
    }

    pub fn get_mut(&mut self, f: Factor) -> &mut Matrix {
        match f {
            Factor::A => &mut self.a,
            Factor::B => &mut self.b,
            Factor::C => &mut self.c,
        }
    }

    pub fn l1_norms(&self) -> [f64; 3] {
        [self.a.l1_norm(), self.b.l1_norm(), self.c.l1_norm()]
    }

    /// Adds `other` in place (used to accumulate over batches).
    pub fn accumulate(&mut self, other: &GradTriple) -> Result<()> {
        self.a.add_assign(&other.a)?;
        self.b.add_assign(&other.b)?;
        self.c.add_assign(&other.c)
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.c.is_finite()
    }
}

/// Per-factor learning rates `(η_A, η_B, η_C)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorRates {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl FactorRates {
    pub fn uniform(eta: f64) -> Self {
        FactorRates { a: eta, b: eta, c: eta }
    }

    pub fn get(&self, f: Factor) -> f64 {
        match f {
            Factor::A => self.a,
            Factor::B => self.b,
            Factor::C => self.c,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        FactorRates {
            a: self.a * k,
            b: self.b * k,
            c: self.c * k,
        }
    }
}

fn check_batch(ad: &TriAdapter, x: &Matrix, u: &Matrix) -> Result<()> {
    let spec = ad.spec();
    if x.rows() != spec.n {
        return Err(Error::ShapeMismatch {
            op: "adapter_grads input",
            lhs: (spec.m, spec.n),
            rhs: x.shape(),
        });
    }
    if u.shape() != (spec.m, x.cols()) {
        return Err(Error::ShapeMismatch {
            op: "adapter_grads upstream",
            lhs: (spec.m, x.cols()),
            rhs: u.shape(),
        });
    }
    Ok(())
}

/// Analytic `∂L/∂A, ∂L/∂B, ∂L/∂C` given the layer input `X` (`n x b`) and
/// `U = ∂L/∂Y` (`m x b`). Independent of the train mode.
pub fn adapter_grads(ad: &TriAdapter, x: &Matrix, u: &Matrix) -> Result<GradTriple> {
    check_batch(ad, x, u)?;
    let s = ad.spec().scale;
    let ct_u = ad.c().t_matmul(u)?; // r1 x b
    let bt_ct_u = ad.b().t_matmul(&ct_u)?; // r2 x b
    let ax = ad.a().matmul(x)?; // r2 x b
    let bax = ad.b().matmul(&ax)?; // r1 x b

    let mut g = GradTriple {
        a: bt_ct_u.matmul_t(x)?,
        b: ct_u.matmul_t(&ax)?,
        c: u.matmul_t(&bax)?,
    };
    if s != 1.0 {
        g.a = g.a.scale(s);
        g.b = g.b.scale(s);
        g.c = g.c.scale(s);
    }
    Ok(g)
}

/// `∂L/∂X` contribution of the adapter: `s·Aᵀ Bᵀ Cᵀ U`.
pub fn adapter_input_grad(ad: &TriAdapter, u: &Matrix) -> Result<Matrix> {
    let ct_u = ad.c().t_matmul(u)?;
    let bt_ct_u = ad.b().t_matmul(&ct_u)?;
    let gx = ad.a().t_matmul(&bt_ct_u)?;
    let s = ad.spec().scale;
    Ok(if s == 1.0 { gx } else { gx.scale(s) })
}

/// LoRA gradients `(∂L/∂A, ∂L/∂B) = (s·Bᵀ U Xᵀ, s·U Xᵀ Aᵀ)`.
pub fn lora_grads(ad: &LoraAdapter, x: &Matrix, u: &Matrix) -> Result<(Matrix, Matrix)> {
    let bt_u = ad.b.t_matmul(u)?; // r x b
    let ax = ad.a.matmul(x)?; // r x b
    let mut ga = bt_u.matmul_t(x)?;
    let mut gb = u.matmul_t(&ax)?;
    if ad.scale != 1.0 {
        ga = ga.scale(ad.scale);
        gb = gb.scale(ad.scale);
    }
    Ok((ga, gb))
}

/// `s·Aᵀ Bᵀ U` for a LoRA adapter.
pub fn lora_input_grad(ad: &LoraAdapter, u: &Matrix) -> Result<Matrix> {
    let gx = ad.a.t_matmul(&ad.b.t_matmul(u)?)?;
    Ok(if ad.scale == 1.0 { gx } else { gx.scale(ad.scale) })
}

/// Central differences `(L(θ + h·e) − L(θ − h·e)) / 2h` over every trainable
/// entry of `ad`. Factors frozen under the adapter's mode are returned as zeros.
pub fn finite_diff_grads<F>(loss_fn: F, ad: &TriAdapter, step: f64) -> Result<GradTriple>
where
    F: Fn(&TriAdapter) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut work = ad.clone();
    let mut out = GradTriple::zeros_like(ad);
    let mode = ad.mode();
    for f in Factor::ALL {
        if !mode.trains(f) {
            continue;
        }
        for idx in 0..ad.factor(f).len() {
            let orig = ad.factor(f).as_slice()[idx];
            *entry_mut(&mut work, f, idx) = orig + step;
            let plus = loss_fn(&work);
            *entry_mut(&mut work, f, idx) = orig - step;
            let minus = loss_fn(&work);
            *entry_mut(&mut work, f, idx) = orig;
            out.get_mut(f).as_mut_slice()[idx] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(out)
}

fn entry_mut(ad: &mut TriAdapter, f: Factor, idx: usize) -> &mut f64 {
    let (_, m) = ad.trainable_mut().find(|(g, _)| *g == f).expect("factor is trainable");
    &mut m.as_mut_slice()[idx]
}

/// First-order prediction of the loss change:
/// `⟨∂L/∂A, ΔA⟩ + ⟨∂L/∂B, ΔB⟩ + ⟨∂L/∂C, ΔC⟩`.
pub fn first_order_delta(grads: &GradTriple, delta_a: &Matrix, delta_b: &Matrix, delta_c: &Matrix) -> Result<f64> {
    Ok(grads.a.frobenius_inner(delta_a)? + grads.b.frobenius_inner(delta_b)? + grads.c.frobenius_inner(delta_c)?)
}

/// Loss-change contributions of one sign step, `ΔL_X = −η_X·‖∂L/∂X‖₁`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossDeltas {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl LossDeltas {
    pub fn total(&self) -> f64 {
        self.a + self.b + self.c
    }

    /// `max |ΔL| / min |ΔL|` over the three components; infinite if any is zero.
    pub fn spread(&self) -> f64 {
        let v = [self.a.abs(), self.b.abs(), self.c.abs()];
        let max = v.iter().copied().fold(0.0, f64::max);
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

pub fn loss_delta_components(grads: &GradTriple, rates: FactorRates) -> Result<LossDeltas> {
    if rates.a < 0.0 || rates.b < 0.0 || rates.c < 0.0 {
        return Err(Error::invalid("learning rates must be nonnegative"));
    }
    let [la, lb, lc] = grads.l1_norms();
    Ok(LossDeltas {
        a: -rates.a * la,
        b: -rates.b * lb,
        c: -rates.c * lc,
    })
}

/// Sign-descent steps `(−η_A·sign(G_A), −η_B·sign(G_B), −η_C·sign(G_C))`.
pub fn sign_steps(grads: &GradTriple, rates: FactorRates) -> (Matrix, Matrix, Matrix) {
    (
        grads.a.sign().scale(-rates.a),
        grads.b.sign().scale(-rates.b),
        grads.c.sign().scale(-rates.c),
    )
}

/// Worst entrywise disagreement between two gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub factor: Factor,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Relative error `|a − f| / max(|a|, |f|, floor)`, where the floor is
/// `floor_frac` times the largest magnitude in either matrix. The floor keeps
/// entries that are tiny relative to the rest of the gradient from turning
/// rounding noise into huge ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Default floor fraction for [`worst_mismatch`].
pub const REL_FLOOR_FRACTION: f64 = 1e-3;

/// Compares only the factors that train under `mode`; returns the entry with the
/// largest relative error, or `None` when nothing trains (never the case: `B`
/// always trains).
pub fn worst_mismatch(analytic: &GradTriple, numeric: &GradTriple, mode: TrainMode) -> Option<GradMismatch> {
    let mut worst: Option<GradMismatch> = None;
    for f in Factor::ALL {
        if !mode.trains(f) {
            continue;
        }
        let (ga, gn) = (analytic.get(f), numeric.get(f));
        let floor = REL_FLOOR_FRACTION * ga.max_abs().max(gn.max_abs());
        for (idx, (&a, &n)) in ga.as_slice().iter().zip(gn.as_slice()).enumerate() {
            let rel = relative_error(a, n, floor);
            if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                worst = Some(GradMismatch {
                    factor: f,
                    index: (idx / ga.cols(), idx % ga.cols()),
                    analytic: a,
                    numeric: n,
                    rel_error: rel,
                });
            }
        }
    }
    worst
}
