//! Desk-scale classifier whose linear layers mimic transformer aspect ratios.
//!
//! Each block holds a square `n x n` projection, a tall `h x n` up-projection
//! and a wide `n x h` down-projection (`h = mlp_factor · n`):
//!
//! ```text
//! h1 = act(attn(x))
//! h2 = act(up(h1))
//! h3 = act(down(h2))
//! ```
//!
//! There are no skip connections, so the head only sees the input through the
//! adapted layers. A trainable linear head maps the final `n`-vector to class
//! logits. Base weights are frozen; only adapters and the head receive
//! gradients.

use serde::{Deserialize, Serialize};

use crate::adapter::{
    lora_param_count, trainable_param_count, AdapterSpec, FrozenLinear, InitScheme, LoraAdapter, ShapeClass, TrainMode,
    TriAdapter,
};
use crate::error::{Error, Result};
use crate::grad::{adapter_grads, adapter_input_grad, lora_grads, lora_input_grad, GradTriple};
use crate::tensor::{gaussian_matrix, Matrix, SeededRng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    /// tanh approximation of GELU.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Gelu => 0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh()),
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Gelu => {
                let inner = GELU_C * (z + 0.044715 * z * z * z);
                let t = inner.tanh();
                let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * z * z);
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    #[default]
    Zero,
    /// `N(0, 1/n)` weights, zero bias.
    Lecun,
}

fn default_mlp_factor() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelSpec {
    pub width: usize,
    pub depth: usize,
    #[serde(default = "default_mlp_factor")]
    pub mlp_factor: f64,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub head_init: HeadInit,
    #[serde(default)]
    pub seed: u64,
}

impl ToyModelSpec {
    pub fn new(width: usize, depth: usize, num_classes: usize, seed: u64) -> Self {
        ToyModelSpec {
            width,
            depth,
            mlp_factor: 4.0,
            num_classes,
            activation: Activation::Tanh,
            head_init: HeadInit::Zero,
            seed,
        }
    }

    pub fn hidden(&self) -> usize {
        (self.mlp_factor * self.width as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 {
            return Err(Error::invalid("width and depth must be positive"));
        }
        if !(self.mlp_factor > 0.0 && self.mlp_factor.is_finite()) || self.hidden() == 0 {
            return Err(Error::invalid(format!(
                "mlp_factor {} gives an empty hidden layer",
                self.mlp_factor
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        Ok(())
    }

    /// `(name, m, n)` for every linear layer in forward order.
    pub fn layer_shapes(&self) -> Vec<(String, usize, usize)> {
        let (n, h) = (self.width, self.hidden());
        (0..self.depth)
            .flat_map(|i| {
                [
                    (format!("block{i}.attn"), n, n),
                    (format!("block{i}.up"), h, n),
                    (format!("block{i}.down"), n, h),
                ]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AdapterSlot {
    None,
    Lora(LoraAdapter),
    Tri(TriAdapter),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedLinear {
    pub name: String,
    pub base: FrozenLinear,
    pub adapter: AdapterSlot,
}

impl AdaptedLinear {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = self.base.forward(x)?;
        match &self.adapter {
            AdapterSlot::None => {}
            AdapterSlot::Lora(ad) => y.add_assign(&ad.apply(x)?)?,
            AdapterSlot::Tri(ad) => y.add_assign(&ad.apply(x)?)?,
        }
        Ok(y)
    }

    pub fn trainable_count(&self) -> usize {
        match &self.adapter {
            AdapterSlot::None => 0,
            AdapterSlot::Lora(ad) => ad.trainable_count(),
            AdapterSlot::Tri(ad) => ad.trainable_count(),
        }
    }
}

/// Trainable classifier: `logits = W·h + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Lora,
    #[default]
    Tri,
}

/// Per-model adapter settings, instantiated once per linear layer with that
/// layer's `(m, n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterTemplate {
    #[serde(default)]
    pub kind: AdapterKind,
    pub rank: usize,
    /// Overrides `rank` for the `C`/`B` inner dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1: Option<usize>,
    /// Overrides `rank` for the `B`/`A` inner dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2: Option<usize>,
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    #[serde(default)]
    pub init: InitScheme,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_mode() -> TrainMode {
    TrainMode::Abc
}

fn default_scale() -> f64 {
    1.0
}

impl AdapterTemplate {
    pub fn tri(rank: usize, mode: TrainMode, seed: u64) -> Self {
        AdapterTemplate {
            kind: AdapterKind::Tri,
            rank,
            r1: None,
            r2: None,
            mode,
            init: InitScheme::OutputPreserving,
            scale: 1.0,
            seed,
        }
    }

    pub fn lora(rank: usize, seed: u64) -> Self {
        AdapterTemplate {
            kind: AdapterKind::Lora,
            ..AdapterTemplate::tri(rank, TrainMode::Abc, seed)
        }
    }

    pub fn r1(&self) -> usize {
        self.r1.unwrap_or(self.rank)
    }

    pub fn r2(&self) -> usize {
        self.r2.unwrap_or(self.rank)
    }

    pub fn spec_for(&self, m: usize, n: usize, layer_index: usize) -> AdapterSpec {
        AdapterSpec {
            m,
            n,
            r1: self.r1(),
            r2: self.r2(),
            mode: self.mode,
            init: self.init,
            seed: layer_seed(self.seed, layer_index),
            scale: self.scale,
        }
    }

    /// Trainable entries this template adds to an `m x n` layer.
    pub fn param_count(&self, m: usize, n: usize) -> usize {
        match self.kind {
            AdapterKind::Lora => lora_param_count(m, n, self.rank),
            AdapterKind::Tri => trainable_param_count(&self.spec_for(m, n, 0)),
        }
    }
}

fn layer_seed(seed: u64, index: usize) -> u64 {
    SeededRng::derive(seed, index as u64).next_u64()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    spec: ToyModelSpec,
    layers: Vec<AdaptedLinear>,
    pub head: Head,
}

/// Activations saved by [`ToyModel::forward_with_tape`] for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    /// Input to each linear layer, in layer order.
    inputs: Vec<Matrix>,
    /// Pre-activation of each linear layer.
    pre_act: Vec<Matrix>,
    features: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrad {
    None,
    Lora { a: Matrix, b: Matrix },
    Tri(GradTriple),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrad>,
    pub head_weight: Matrix,
    pub head_bias: Matrix,
}

impl ToyModel {
    /// Frozen weights are `N(0, 1/fan_in)`, drawn layer by layer from one
    /// stream seeded with `spec.seed`; the head is drawn last.
    pub fn build(spec: ToyModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::new(spec.seed);
        let mut layers = Vec::with_capacity(3 * spec.depth);
        for (name, m, n) in spec.layer_shapes() {
            let w = gaussian_matrix(m, n, 1.0 / n as f64, &mut rng)?;
            layers.push(AdaptedLinear {
                name,
                base: FrozenLinear::new(w),
                adapter: AdapterSlot::None,
            });
        }
        let (k, n) = (spec.num_classes, spec.width);
        let weight = match spec.head_init {
            HeadInit::Zero => Matrix::zeros(k, n),
            HeadInit::Lecun => gaussian_matrix(k, n, 1.0 / n as f64, &mut rng)?,
        };
        Ok(ToyModel {
            spec,
            layers,
            head: Head {
                weight,
                bias: Matrix::zeros(k, 1),
            },
        })
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[AdaptedLinear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [AdaptedLinear] {
        &mut self.layers
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Attaches one adapter to every linear layer. Fails without modifying the
    /// model if any layer is too small for the requested rank.
    pub fn inject(&mut self, template: &AdapterTemplate) -> Result<()> {
        let mut slots = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (m, n) = (layer.base.out_dim(), layer.base.in_dim());
            let slot = match template.kind {
                AdapterKind::Lora => {
                    let mut ad = LoraAdapter::init_for(&layer.name, m, n, template.rank, layer_seed(template.seed, i))?;
                    ad.scale = template.scale;
                    AdapterSlot::Lora(ad)
                }
                AdapterKind::Tri => {
                    let spec = template.spec_for(m, n, i);
                    spec.validate_for(&layer.name)?;
                    AdapterSlot::Tri(TriAdapter::init(spec)?)
                }
            };
            slots.push(slot);
        }
        for (layer, slot) in self.layers.iter_mut().zip(slots) {
            layer.adapter = slot;
        }
        Ok(())
    }

    pub fn adapter_param_count(&self) -> usize {
        self.layers.iter().map(AdaptedLinear::trainable_count).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.head.weight.len() + self.head.bias.len()
    }

    /// Frozen entries across all adapted linear layers.
    pub fn base_param_count(&self) -> usize {
        self.layers.iter().map(|l| l.base.weight().len()).sum()
    }

    pub fn shape_classes(&self) -> Vec<ShapeClass> {
        self.layers.iter().map(|l| l.base.shape_class()).collect()
    }

    /// Every trainable tensor, named `layer.factor` (or `head.weight` /
    /// `head.bias`), in a fixed order: layers first, adapter factors in `A, B, C`
    /// order, then the head.
    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match &mut layer.adapter {
                AdapterSlot::None => {}
                AdapterSlot::Lora(ad) => {
                    out.push((format!("{}.A", layer.name), &mut ad.a));
                    out.push((format!("{}.B", layer.name), &mut ad.b));
                }
                AdapterSlot::Tri(ad) => {
                    for (f, m) in ad.trainable_mut() {
                        out.push((format!("{}.{f}", layer.name), m));
                    }
                }
            }
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    /// Gradients matching [`ToyModel::trainable_params_mut`] entry for entry.
    pub fn trainable_grads<'g>(&self, grads: &'g ModelGrads) -> Vec<(String, &'g Matrix)> {
        let mut out = Vec::new();
        for (layer, g) in self.layers.iter().zip(&grads.layers) {
            match (&layer.adapter, g) {
                (AdapterSlot::Lora(_), LayerGrad::Lora { a, b }) => {
                    out.push((format!("{}.A", layer.name), a));
                    out.push((format!("{}.B", layer.name), b));
                }
                (AdapterSlot::Tri(ad), LayerGrad::Tri(t)) => {
                    for f in crate::adapter::Factor::ALL {
                        if ad.mode().trains(f) {
                            out.push((format!("{}.{f}", layer.name), t.get(f)));
                        }
                    }
                }
                _ => {}
            }
        }
        out.push(("head.weight".into(), &grads.head_weight));
        out.push(("head.bias".into(), &grads.head_bias));
        out
    }

    /// Logits (`num_classes x batch`) for inputs `x` (`width x batch`).
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_with_tape(x)?.0)
    }

    pub fn forward_with_tape(&self, x: &Matrix) -> Result<(Matrix, Tape)> {
        if x.rows() != self.spec.width {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: (self.spec.width, x.cols()),
                rhs: x.shape(),
            });
        }
        let act = self.spec.activation;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_act = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let z = layer.forward(&h)?;
            inputs.push(h);
            h = z.map(|v| act.apply(v));
            pre_act.push(z);
        }
        let mut logits = self.head.weight.matmul(&h)?;
        add_column_bias(&mut logits, &self.head.bias);
        Ok((
            logits,
            Tape {
                inputs,
                pre_act,
                features: h,
            },
        ))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn loss(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        let logits = self.forward(x)?;
        Ok(softmax_cross_entropy(&logits, labels)?.0)
    }

    /// Loss and gradients for every trainable tensor (adapters and head).
    pub fn backward(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, ModelGrads)> {
        let (logits, tape) = self.forward_with_tape(x)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }

        let head_weight = dlogits.matmul_t(&tape.features)?;
        let head_bias = Matrix::from_fn(dlogits.rows(), 1, |i, _| dlogits.row(i).iter().sum());
        let mut dh = self.head.weight.t_matmul(&dlogits)?;

        let mut layer_grads = vec![LayerGrad::None; self.layers.len()];
        let act = self.spec.activation;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let z = &tape.pre_act[i];
            let dz = Matrix::from_fn(z.rows(), z.cols(), |r, c| dh.get(r, c) * act.derivative(z.get(r, c)));
            let (lg, dx) = linear_backward(layer, &tape.inputs[i], &dz)?;
            layer_grads[i] = lg;
            dh = dx;
        }
        Ok((
            loss,
            ModelGrads {
                layers: layer_grads,
                head_weight,
                head_bias,
            },
        ))
    }
}

/// Gradients of one adapted linear layer and `∂L/∂x = (W0 + ΔW)ᵀ U`.
fn linear_backward(layer: &AdaptedLinear, x: &Matrix, u: &Matrix) -> Result<(LayerGrad, Matrix)> {
    let mut dx = layer.base.weight().t_matmul(u)?;
    let grad = match &layer.adapter {
        AdapterSlot::None => LayerGrad::None,
        AdapterSlot::Lora(ad) => {
            dx.add_assign(&lora_input_grad(ad, u)?)?;
            let (a, b) = lora_grads(ad, x, u)?;
            LayerGrad::Lora { a, b }
        }
        AdapterSlot::Tri(ad) => {
            dx.add_assign(&adapter_input_grad(ad, u)?)?;
            LayerGrad::Tri(adapter_grads(ad, x, u)?)
        }
    };
    Ok((grad, dx))
}

fn add_column_bias(m: &mut Matrix, bias: &Matrix) {
    let cols = m.cols();
    for (i, row) in m.as_mut_slice().chunks_mut(cols).enumerate() {
        let b = bias.get(i, 0);
        for v in row {
            *v += b;
        }
    }
}

/// Mean cross-entropy of column-wise softmax and its gradient with respect to
/// the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (k, b) = logits.shape();
    if labels.len() != b {
        return Err(Error::invalid(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut grad = Matrix::zeros(k, b);
    let mut total = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
        }
        let max = (0..k).map(|i| logits.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..k).map(|i| (logits.get(i, j) - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - logits.get(y, j);
        for i in 0..k {
            let p = (logits.get(i, j) - log_z).exp();
            let target = if i == y { 1.0 } else { 0.0 };
            grad.set(i, j, (p - target) / b as f64);
        }
    }
    Ok((total / b as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(n: usize, b: usize, seed: u64) -> Matrix {
        gaussian_matrix(n, b, 1.0, &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn layer_taxonomy() {
        let model = ToyModel::build(ToyModelSpec::new(32, 1, 2, 0)).unwrap();
        let shapes: Vec<_> = model.layers().iter().map(|l| l.base.weight().shape()).collect();
        assert_eq!(shapes, vec![(32, 32), (128, 32), (32, 128)]);
        assert_eq!(
            model.shape_classes(),
            vec![ShapeClass::Square, ShapeClass::Tall, ShapeClass::Wide]
        );
        let deeper = ToyModel::build(ToyModelSpec::new(32, 2, 2, 0)).unwrap();
        assert_eq!(deeper.layers().len(), 6);
    }

    #[test]
    fn build_is_deterministic() {
        let a = ToyModel::build(ToyModelSpec::new(16, 2, 3, 7)).unwrap();
        let b = ToyModel::build(ToyModelSpec::new(16, 2, 3, 7)).unwrap();
        for (x, y) in a.layers().iter().zip(b.layers()) {
            assert!(x.base.weight().bit_eq(y.base.weight()));
        }
        assert!(ToyModel::build(ToyModelSpec::new(0, 2, 3, 7)).is_err());
        assert!(ToyModel::build(ToyModelSpec::new(8, 1, 1, 7)).is_err());
    }

    #[test]
    fn injection_preserves_outputs_bit_exactly() {
        let mut model = ToyModel::build(ToyModelSpec {
            head_init: HeadInit::Lecun,
            ..ToyModelSpec::new(16, 2, 3, 1)
        })
        .unwrap();
        let x = inputs(16, 16, 2);
        let before = model.forward(&x).unwrap();
        model.inject(&AdapterTemplate::tri(4, TrainMode::Abc, 3)).unwrap();
        assert!(model.forward(&x).unwrap().bit_eq(&before));
        model.inject(&AdapterTemplate::lora(4, 3)).unwrap();
        assert!(model.forward(&x).unwrap().bit_eq(&before));
    }

    #[test]
    fn injection_param_totals_and_rank_errors() {
        let mut model = ToyModel::build(ToyModelSpec::new(32, 2, 2, 0)).unwrap();
        let template = AdapterTemplate::tri(8, TrainMode::Abc, 0);
        model.inject(&template).unwrap();
        let expected: usize = model
            .spec()
            .layer_shapes()
            .iter()
            .map(|(_, m, n)| template.param_count(*m, *n))
            .sum();
        let counted: usize = model
            .layers()
            .iter()
            .map(|l| match &l.adapter {
                AdapterSlot::Tri(ad) => {
                    let mut ad = ad.clone();
                    ad.trainable_mut().map(|(_, m)| m.len()).sum::<usize>()
                }
                _ => panic!("missing adapter"),
            })
            .sum();
        assert_eq!(model.adapter_param_count(), expected);
        assert_eq!(counted, expected);

        let err = model.inject(&AdapterTemplate::tri(64, TrainMode::Abc, 0)).unwrap_err();
        assert!(err.to_string().contains("block0.attn"), "{err}");
        let err = model.inject(&AdapterTemplate::lora(64, 0)).unwrap_err();
        assert!(err.to_string().contains("block0.attn"), "{err}");
        // a failed injection leaves the previous adapters in place
        assert_eq!(model.adapter_param_count(), expected);
    }

    #[test]
    fn zero_input_zero_head_gives_uniform_loss() {
        let model = ToyModel::build(ToyModelSpec::new(8, 1, 5, 0)).unwrap();
        let x = Matrix::zeros(8, 4);
        let loss = model.loss(&x, &[0, 1, 2, 3]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn activation_derivatives() {
        for act in [Activation::Tanh, Activation::Gelu] {
            for &z in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
                let h = 1e-6;
                let fd = (act.apply(z + h) - act.apply(z - h)) / (2.0 * h);
                assert!((fd - act.derivative(z)).abs() < 1e-8, "{act:?} at {z}");
            }
        }
    }

    #[test]
    fn softmax_rejects_bad_labels() {
        let logits = Matrix::zeros(3, 2);
        assert!(softmax_cross_entropy(&logits, &[0]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 3]).is_err());
    }
}
