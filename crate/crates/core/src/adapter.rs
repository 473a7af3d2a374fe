//! LoRA (`ΔW = BA`) and tri-matrix (`ΔW = CBA`) adapters around a frozen linear
//! weight.
//!
//! Shapes follow the column-vector convention: a layer maps `n` inputs to `m`
//! outputs, `W0` is `m x n`, and activations are stored one example per column
//! (`X` is `n x batch`). For the tri-matrix form `C` is `m x r1`, `B` is
//! `r1 x r2` and `A` is `r2 x n`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gaussian_matrix, Matrix, SeededRng};

/// Which tri-matrix factors receive updates. `B` trains in every mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    BOnly,
    Ab,
    Cb,
    Abc,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [TrainMode::BOnly, TrainMode::Ab, TrainMode::Cb, TrainMode::Abc];

    pub fn trains(self, factor: Factor) -> bool {
        match factor {
            Factor::B => true,
            Factor::A => matches!(self, TrainMode::Ab | TrainMode::Abc),
            Factor::C => matches!(self, TrainMode::Cb | TrainMode::Abc),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::BOnly => "b_only",
            TrainMode::Ab => "ab",
            TrainMode::Cb => "cb",
            TrainMode::Abc => "abc",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One of the three tri-matrix factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Factor {
    A,
    B,
    C,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::A, Factor::B, Factor::C];

    pub fn name(self) -> &'static str {
        match self {
            Factor::A => "A",
            Factor::B => "B",
            Factor::C => "C",
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `A ~ N(0, 1/n)`, `C ~ N(0, 1/r1)`, `B = 0`, so the adapter starts inert.
    #[default]
    OutputPreserving,
    /// `A ~ N(0, 1/n)`, `B ~ N(0, 1/r2)`, `C ~ N(0, 1/r1)`.
    LecunAll,
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    /// Output dimension of the adapted layer.
    pub m: usize,
    /// Input dimension of the adapted layer.
    pub n: usize,
    pub r1: usize,
    pub r2: usize,
    pub mode: TrainMode,
    #[serde(default)]
    pub init: InitScheme,
    pub seed: u64,
    /// Multiplier on `CBA`; 1.0 reproduces the bare product.
    #[serde(default = "default_scale")]
    pub scale: f64,
}

impl AdapterSpec {
    /// Square-rank spec (`r1 = r2 = r`) with the default init and unit scale.
    pub fn new(m: usize, n: usize, r: usize, mode: TrainMode, seed: u64) -> Self {
        AdapterSpec {
            m,
            n,
            r1: r,
            r2: r,
            mode,
            init: InitScheme::OutputPreserving,
            seed,
            scale: 1.0,
        }
    }

    pub fn with_init(mut self, init: InitScheme) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_for("adapter")
    }

    pub(crate) fn validate_for(&self, layer: &str) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::invalid(format!(
                "{layer}: layer dimensions must be positive, got {}x{}",
                self.m, self.n
            )));
        }
        if self.r1 == 0 || self.r2 == 0 {
            return Err(Error::invalid(format!(
                "{layer}: ranks must be at least 1, got r1={} r2={}",
                self.r1, self.r2
            )));
        }
        if self.r1 > self.m {
            return Err(Error::RankTooLarge {
                layer: layer.to_string(),
                rank: self.r1,
                dim: self.m,
            });
        }
        if self.r2 > self.n {
            return Err(Error::RankTooLarge {
                layer: layer.to_string(),
                rank: self.r2,
                dim: self.n,
            });
        }
        if !self.scale.is_finite() {
            return Err(Error::invalid(format!("{layer}: scale must be finite")));
        }
        Ok(())
    }
}

/// Tri-matrix adapter state. Trainability of each factor is read from
/// `spec.mode`; the only mutable access to the factors goes through
/// [`TriAdapter::trainable_mut`], so frozen factors cannot be touched by an
/// optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TriAdapter {
    spec: AdapterSpec,
    a: Matrix,
    b: Matrix,
    c: Matrix,
}

impl TriAdapter {
    /// Samples `A` then `C` then (for `LecunAll`) `B` from one stream seeded
    /// with `spec.seed`.
    pub fn init(spec: AdapterSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::new(spec.seed);
        let a = gaussian_matrix(spec.r2, spec.n, 1.0 / spec.n as f64, &mut rng)?;
        let c = gaussian_matrix(spec.m, spec.r1, 1.0 / spec.r1 as f64, &mut rng)?;
        let b = match spec.init {
            InitScheme::OutputPreserving => Matrix::zeros(spec.r1, spec.r2),
            InitScheme::LecunAll => gaussian_matrix(spec.r1, spec.r2, 1.0 / spec.r2 as f64, &mut rng)?,
        };
        Ok(TriAdapter { spec, a, b, c })
    }

    pub fn from_parts(spec: AdapterSpec, a: Matrix, b: Matrix, c: Matrix) -> Result<Self> {
        spec.validate()?;
        let expect = [
            ("A", a.shape(), (spec.r2, spec.n)),
            ("B", b.shape(), (spec.r1, spec.r2)),
            ("C", c.shape(), (spec.m, spec.r1)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::invalid(format!(
                    "factor {name} has shape {got:?}, spec requires {want:?}"
                )));
            }
        }
        Ok(TriAdapter { spec, a, b, c })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn mode(&self) -> TrainMode {
        self.spec.mode
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn c(&self) -> &Matrix {
        &self.c
    }

    pub fn factor(&self, f: Factor) -> &Matrix {
        match f {
            Factor::A => &self.a,
            Factor::B => &self.b,
            Factor::C => &self.c,
        }
    }

    /// Mutable views of the factors the mode allows to train, in `A, B, C` order.
    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (Factor, &mut Matrix)> {
        let mode = self.spec.mode;
        [
            (Factor::A, &mut self.a),
            (Factor::B, &mut self.b),
            (Factor::C, &mut self.c),
        ]
        .into_iter()
        .filter(move |(f, _)| mode.trains(*f))
    }

    pub fn trainable_count(&self) -> usize {
        trainable_param_count(&self.spec)
    }

    /// `scale · C·B·A` as a dense `m x n` matrix.
    pub fn delta_weight(&self) -> Matrix {
        let cba = self
            .c
            .matmul(&self.b.matmul(&self.a).expect("conforming factors"))
            .expect("conforming factors");
        apply_scale(cba, self.spec.scale)
    }

    /// The adapter's contribution `scale · C·(B·(A·X))`, evaluated right to left.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.spec.n {
            return Err(Error::ShapeMismatch {
                op: "tri adapter input",
                lhs: (self.spec.m, self.spec.n),
                rhs: x.shape(),
            });
        }
        let ax = self.a.matmul(x)?;
        let bax = self.b.matmul(&ax)?;
        Ok(apply_scale(self.c.matmul(&bax)?, self.spec.scale))
    }
}

fn apply_scale(m: Matrix, scale: f64) -> Matrix {
    if scale == 1.0 {
        m
    } else {
        m.scale(scale)
    }
}

/// Two-matrix LoRA adapter: `A` is `r x n`, `B` is `m x r`, both trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub scale: f64,
}

impl LoraAdapter {
    /// `A ~ N(0, 1/n)`, `B = 0`.
    pub fn init(m: usize, n: usize, r: usize, seed: u64) -> Result<Self> {
        Self::init_for("adapter", m, n, r, seed)
    }

    pub(crate) fn init_for(layer: &str, m: usize, n: usize, r: usize, seed: u64) -> Result<Self> {
        if r == 0 {
            return Err(Error::invalid(format!("{layer}: rank must be at least 1")));
        }
        if r > m.min(n) {
            return Err(Error::RankTooLarge {
                layer: layer.to_string(),
                rank: r,
                dim: m.min(n),
            });
        }
        let mut rng = SeededRng::new(seed);
        let a = gaussian_matrix(r, n, 1.0 / n as f64, &mut rng)?;
        Ok(LoraAdapter {
            a,
            b: Matrix::zeros(m, r),
            scale: 1.0,
        })
    }

    pub fn from_parts(a: Matrix, b: Matrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::ShapeMismatch {
                op: "lora factors",
                lhs: b.shape(),
                rhs: a.shape(),
            });
        }
        Ok(LoraAdapter { a, b, scale: 1.0 })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn delta_weight(&self) -> Matrix {
        apply_scale(self.b.matmul(&self.a).expect("conforming factors"), self.scale)
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.a.cols() {
            return Err(Error::ShapeMismatch {
                op: "lora adapter input",
                lhs: (self.b.rows(), self.a.cols()),
                rhs: x.shape(),
            });
        }
        Ok(apply_scale(self.b.matmul(&self.a.matmul(x)?)?, self.scale))
    }

    pub fn trainable_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    /// `m > n`, e.g. an MLP up-projection.
    Tall,
    /// `m < n`, e.g. an MLP down-projection.
    Wide,
    Square,
}

impl ShapeClass {
    pub fn of(m: usize, n: usize) -> Self {
        match m.cmp(&n) {
            std::cmp::Ordering::Greater => ShapeClass::Tall,
            std::cmp::Ordering::Less => ShapeClass::Wide,
            std::cmp::Ordering::Equal => ShapeClass::Square,
        }
    }
}

/// A pretrained weight that never receives updates.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLinear {
    weight: Matrix,
    shape_class: ShapeClass,
}

impl FrozenLinear {
    pub fn new(weight: Matrix) -> Self {
        let shape_class = ShapeClass::of(weight.rows(), weight.cols());
        FrozenLinear { weight, shape_class }
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn shape_class(&self) -> ShapeClass {
        self.shape_class
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.weight.matmul(x)
    }
}

fn check_layer(spec: &AdapterSpec, layer: &FrozenLinear) -> Result<()> {
    if (spec.m, spec.n) != layer.weight.shape() {
        return Err(Error::ShapeMismatch {
            op: "adapter vs layer",
            lhs: (spec.m, spec.n),
            rhs: layer.weight.shape(),
        });
    }
    Ok(())
}

pub fn init_adapter(spec: AdapterSpec) -> Result<TriAdapter> {
    TriAdapter::init(spec)
}

pub fn delta_weight(ad: &TriAdapter) -> Matrix {
    ad.delta_weight()
}

/// `W0·X + C·(B·(A·X))`; the product `CBA` is never formed.
pub fn forward_tri(ad: &TriAdapter, layer: &FrozenLinear, x: &Matrix) -> Result<Matrix> {
    check_layer(&ad.spec, layer)?;
    let mut out = layer.forward(x)?;
    out.add_assign(&ad.apply(x)?)?;
    Ok(out)
}

/// `W0·X + B·(A·X)`.
pub fn forward_lora(ad: &LoraAdapter, layer: &FrozenLinear, x: &Matrix) -> Result<Matrix> {
    if (ad.b.rows(), ad.a.cols()) != layer.weight.shape() {
        return Err(Error::ShapeMismatch {
            op: "adapter vs layer",
            lhs: (ad.b.rows(), ad.a.cols()),
            rhs: layer.weight.shape(),
        });
    }
    let mut out = layer.forward(x)?;
    out.add_assign(&ad.apply(x)?)?;
    Ok(out)
}

/// Folds the adapter into the base weight: `W0 + CBA`.
pub fn merge(ad: &TriAdapter, layer: &FrozenLinear) -> Result<FrozenLinear> {
    check_layer(&ad.spec, layer)?;
    Ok(FrozenLinear::new(layer.weight.add(&ad.delta_weight())?))
}

/// Trainable entries of a tri-matrix adapter under its mode.
pub fn trainable_param_count(spec: &AdapterSpec) -> usize {
    let a = spec.r2 * spec.n;
    let b = spec.r1 * spec.r2;
    let c = spec.m * spec.r1;
    match spec.mode {
        TrainMode::BOnly => b,
        TrainMode::Ab => b + a,
        TrainMode::Cb => b + c,
        TrainMode::Abc => a + b + c,
    }
}

pub fn lora_param_count(m: usize, n: usize, r: usize) -> usize {
    r * (m + n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense_oracle(w0: &Matrix, c: &Matrix, b: &Matrix, a: &Matrix, x: &Matrix) -> Matrix {
        // Entry-by-entry (W0 + CBA)·X, independent of the factored path.
        let (m, n) = w0.shape();
        let w = Matrix::from_fn(m, n, |i, j| {
            let mut cba = 0.0;
            for p in 0..c.cols() {
                for q in 0..b.cols() {
                    cba += c.get(i, p) * b.get(p, q) * a.get(q, j);
                }
            }
            w0.get(i, j) + cba
        });
        Matrix::from_fn(m, x.cols(), |i, k| (0..n).map(|j| w.get(i, j) * x.get(j, k)).sum())
    }

    fn worked_adapter() -> TriAdapter {
        let spec = AdapterSpec::new(2, 2, 1, TrainMode::Abc, 0);
        TriAdapter::from_parts(
            spec,
            Matrix::from_rows(&[[4.0, 5.0]]),
            Matrix::from_rows(&[[3.0]]),
            Matrix::from_rows(&[[1.0], [2.0]]),
        )
        .unwrap()
    }

    fn random_adapter(seed: u64, m: usize, n: usize, r1: usize, r2: usize) -> TriAdapter {
        let spec = AdapterSpec {
            m,
            n,
            r1,
            r2,
            mode: TrainMode::Abc,
            init: InitScheme::LecunAll,
            seed,
            scale: 1.0,
        };
        TriAdapter::init(spec).unwrap()
    }

    #[test]
    fn output_preserving_init_is_inert() {
        let ad = TriAdapter::init(AdapterSpec::new(4, 4, 2, TrainMode::Abc, 5)).unwrap();
        assert!(ad.delta_weight().is_zero());
        assert_eq!(ad.delta_weight().shape(), (4, 4));

        let mut rng = SeededRng::new(1);
        let w0 = FrozenLinear::new(gaussian_matrix(4, 4, 0.25, &mut rng).unwrap());
        let x = gaussian_matrix(4, 3, 1.0, &mut rng).unwrap();
        let h = forward_tri(&ad, &w0, &x).unwrap();
        assert!(h.bit_eq(&w0.forward(&x).unwrap()));
    }

    #[test]
    fn lecun_all_variance_of_a() {
        let mut entries = Vec::new();
        for seed in 0..16 {
            let spec = AdapterSpec {
                m: 1024,
                n: 1024,
                r1: 8,
                r2: 8,
                mode: TrainMode::Abc,
                init: InitScheme::LecunAll,
                seed,
                scale: 1.0,
            };
            entries.extend_from_slice(TriAdapter::init(spec).unwrap().a().as_slice());
        }
        assert!(entries.len() >= 100_000);
        let n = entries.len() as f64;
        let mean = entries.iter().sum::<f64>() / n;
        let var = entries.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 1.0 / 1024.0;
        assert!((var - target).abs() / target < 0.05, "var {var}");
    }

    #[test]
    fn init_is_deterministic() {
        let spec = AdapterSpec::new(6, 5, 2, TrainMode::Abc, 11).with_init(InitScheme::LecunAll);
        let x = TriAdapter::init(spec.clone()).unwrap();
        let y = TriAdapter::init(spec).unwrap();
        assert!(x.a().bit_eq(y.a()) && x.b().bit_eq(y.b()) && x.c().bit_eq(y.c()));
    }

    #[test]
    fn rank_above_dimension_is_rejected() {
        let err = TriAdapter::init(AdapterSpec::new(4, 4, 5, TrainMode::Abc, 0)).unwrap_err();
        assert!(matches!(err, Error::RankTooLarge { rank: 5, dim: 4, .. }));
        let zero = TriAdapter::init(AdapterSpec::new(4, 4, 0, TrainMode::Abc, 0));
        assert!(zero.is_err());
    }

    #[test]
    fn delta_weight_worked_example() {
        let ad = worked_adapter();
        let expected = Matrix::from_rows(&[[12.0, 15.0], [24.0, 30.0]]);
        let oracle = dense_oracle(&Matrix::zeros(2, 2), ad.c(), ad.b(), ad.a(), &Matrix::identity(2));
        assert_eq!(oracle, expected);
        assert_eq!(ad.delta_weight(), expected);
    }

    #[test]
    fn delta_weight_rank_is_bounded() {
        for seed in 0..50 {
            let (r1, r2) = (1 + (seed as usize % 3), 1 + (seed as usize % 4));
            let ad = random_adapter(seed, 7, 6, r1, r2);
            let mut sv = singular_values(&ad.delta_weight());
            sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let k = r1.min(r2);
            for s in &sv[k..] {
                assert!(*s < 1e-10 * sv[0].max(1.0), "seed {seed}: {sv:?}");
            }
        }
    }

    /// One-sided Jacobi (Hestenes) SVD: rotate column pairs until mutually
    /// orthogonal; the column norms are then the singular values.
    fn singular_values(m: &Matrix) -> Vec<f64> {
        let (rows, cols) = m.shape();
        let mut u = m.clone();
        for _ in 0..60 {
            let mut rotated = false;
            for p in 0..cols {
                for q in (p + 1)..cols {
                    let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                    for i in 0..rows {
                        let (x, y) = (u.get(i, p), u.get(i, q));
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..rows {
                        let (x, y) = (u.get(i, p), u.get(i, q));
                        u.set(i, p, c * x - s * y);
                        u.set(i, q, s * x + c * y);
                    }
                }
            }
            if !rotated {
                break;
            }
        }
        (0..cols)
            .map(|j| (0..rows).map(|i| u.get(i, j).powi(2)).sum::<f64>().sqrt())
            .collect()
    }

    #[test]
    fn forward_tri_worked_example() {
        let ad = worked_adapter();
        let w0 = FrozenLinear::new(Matrix::zeros(2, 2));
        let x = Matrix::from_rows(&[[1.0], [0.0]]);
        let expected = Matrix::from_rows(&[[12.0], [24.0]]);
        assert_eq!(dense_oracle(w0.weight(), ad.c(), ad.b(), ad.a(), &x), expected);
        assert_eq!(forward_tri(&ad, &w0, &x).unwrap(), expected);
    }

    #[test]
    fn forward_tri_rejects_wrong_input_rows() {
        let ad = worked_adapter();
        let w0 = FrozenLinear::new(Matrix::zeros(2, 2));
        assert!(forward_tri(&ad, &w0, &Matrix::zeros(3, 1)).is_err());
        let wrong_layer = FrozenLinear::new(Matrix::zeros(3, 2));
        assert!(forward_tri(&ad, &wrong_layer, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn forward_lora_examples() {
        let mut rng = SeededRng::new(4);
        let w0 = FrozenLinear::new(gaussian_matrix(5, 3, 1.0, &mut rng).unwrap());
        let x = gaussian_matrix(3, 4, 1.0, &mut rng).unwrap();
        let fresh = LoraAdapter::init(5, 3, 2, 9).unwrap();
        assert!(forward_lora(&fresh, &w0, &x).unwrap().bit_eq(&w0.forward(&x).unwrap()));

        let ad = LoraAdapter::from_parts(Matrix::from_rows(&[[2.0, 0.0]]), Matrix::from_rows(&[[1.0], [1.0]])).unwrap();
        let eye = FrozenLinear::new(Matrix::identity(2));
        let h = forward_lora(&ad, &eye, &Matrix::from_rows(&[[1.0], [1.0]])).unwrap();
        assert_eq!(h, Matrix::from_rows(&[[3.0], [3.0]]));
    }

    #[test]
    fn lora_embeds_in_tri_form() {
        for seed in 0..20 {
            let mut rng = SeededRng::new(seed);
            let (m, n, r) = (6, 5, 3);
            let lora = LoraAdapter::from_parts(
                gaussian_matrix(r, n, 1.0, &mut rng).unwrap(),
                gaussian_matrix(m, r, 1.0, &mut rng).unwrap(),
            )
            .unwrap();
            let tri = TriAdapter::from_parts(
                AdapterSpec::new(m, n, r, TrainMode::Abc, 0),
                lora.a.clone(),
                Matrix::identity(r),
                lora.b.clone(),
            )
            .unwrap();
            let w0 = FrozenLinear::new(gaussian_matrix(m, n, 1.0, &mut rng).unwrap());
            let x = gaussian_matrix(n, 4, 1.0, &mut rng).unwrap();
            let l = forward_lora(&lora, &w0, &x).unwrap();
            let t = forward_tri(&tri, &w0, &x).unwrap();
            assert!(l.sub(&t).unwrap().max_abs() <= 1e-12 * l.max_abs().max(1.0));
        }
    }

    #[test]
    fn merge_identities() {
        let fresh = TriAdapter::init(AdapterSpec::new(5, 4, 2, TrainMode::Abc, 1)).unwrap();
        let w0 = FrozenLinear::new(gaussian_matrix(5, 4, 1.0, &mut SeededRng::new(8)).unwrap());
        assert!(merge(&fresh, &w0).unwrap().weight().bit_eq(w0.weight()));

        let ad = random_adapter(3, 5, 4, 2, 3);
        let merged = merge(&ad, &w0).unwrap();
        let recovered = merged.weight().sub(w0.weight()).unwrap();
        let dw = ad.delta_weight();
        assert!(recovered.sub(&dw).unwrap().max_abs() <= 1e-12 * dw.max_abs().max(1.0));
    }

    #[test]
    fn param_counts() {
        let spec = |mode| AdapterSpec::new(768, 768, 8, mode, 0);
        assert_eq!(trainable_param_count(&spec(TrainMode::BOnly)), 64);
        assert_eq!(lora_param_count(768, 768, 8), 12288);
        assert_eq!(trainable_param_count(&spec(TrainMode::Abc)), 12352);
        assert_eq!(
            trainable_param_count(&spec(TrainMode::Abc)) - lora_param_count(768, 768, 8),
            64
        );
        assert_eq!(trainable_param_count(&AdapterSpec::new(1, 1, 1, TrainMode::Abc, 0)), 3);

        // Count entries of an actually constructed adapter.
        let mut ad = TriAdapter::init(spec(TrainMode::BOnly)).unwrap();
        let counted: usize = ad.trainable_mut().map(|(_, m)| m.len()).sum();
        assert_eq!(counted, 64);
        let lora = LoraAdapter::init(768, 768, 8, 0).unwrap();
        assert_eq!(lora.trainable_count(), 12288);
    }

    #[test]
    fn trainable_mut_respects_mode() {
        let mut ad = TriAdapter::init(AdapterSpec::new(4, 3, 2, TrainMode::BOnly, 0)).unwrap();
        let names: Vec<Factor> = ad.trainable_mut().map(|(f, _)| f).collect();
        assert_eq!(names, vec![Factor::B]);
        let mut ad = TriAdapter::init(AdapterSpec::new(4, 3, 2, TrainMode::Cb, 0)).unwrap();
        let names: Vec<Factor> = ad.trainable_mut().map(|(f, _)| f).collect();
        assert_eq!(names, vec![Factor::B, Factor::C]);
    }

    #[test]
    fn shape_classes() {
        assert_eq!(ShapeClass::of(128, 32), ShapeClass::Tall);
        assert_eq!(ShapeClass::of(32, 128), ShapeClass::Wide);
        assert_eq!(ShapeClass::of(32, 32), ShapeClass::Square);
    }

    proptest! {
        #[test]
        fn factored_forward_matches_materialized(
            seed in any::<u64>(), m in 1usize..9, n in 1usize..9, b in 1usize..5,
        ) {
            let r1 = 1 + (seed as usize) % m;
            let r2 = 1 + (seed as usize / 7) % n;
            let ad = random_adapter(seed, m, n, r1, r2);
            let mut rng = SeededRng::new(seed ^ 1);
            let w0 = FrozenLinear::new(gaussian_matrix(m, n, 1.0, &mut rng).unwrap());
            let x = gaussian_matrix(n, b, 1.0, &mut rng).unwrap();
            let factored = forward_tri(&ad, &w0, &x).unwrap();
            let materialized = dense_oracle(w0.weight(), ad.c(), ad.b(), ad.a(), &x);
            let merged = merge(&ad, &w0).unwrap().forward(&x).unwrap();
            let scale = materialized.max_abs().max(1.0);
            prop_assert!(factored.sub(&materialized).unwrap().max_abs() <= 1e-12 * scale);
            prop_assert!(merged.sub(&factored).unwrap().max_abs() <= 1e-12 * scale);
        }

        #[test]
        fn delta_weight_is_linear_in_b(seed in any::<u64>(), c in -10.0f64..10.0) {
            let ad = random_adapter(seed, 5, 4, 2, 3);
            let scaled = TriAdapter::from_parts(
                ad.spec().clone(), ad.a().clone(), ad.b().scale(c), ad.c().clone(),
            ).unwrap();
            let lhs = scaled.delta_weight();
            let rhs = ad.delta_weight().scale(c);
            prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12 * rhs.max_abs().max(1.0));
        }

        #[test]
        fn param_count_monotone(m in 1usize..200, n in 1usize..200, r in 1usize..16) {
            prop_assume!(r <= m && r <= n);
            let count = |mode| trainable_param_count(&AdapterSpec::new(m, n, r, mode, 0));
            prop_assert!(count(TrainMode::BOnly) <= count(TrainMode::Ab));
            prop_assert!(count(TrainMode::BOnly) <= count(TrainMode::Cb));
            prop_assert!(count(TrainMode::Ab) <= count(TrainMode::Abc));
            prop_assert!(count(TrainMode::Cb) <= count(TrainMode::Abc));
        }
    }
}
