//! Training and evaluation loops.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::FactorRates;
use crate::metrics::ConfusionMatrix;
use crate::model::{AdapterSlot, LayerGrad, ModelGrads, ToyModel};
use crate::optim::{adamw_step, adamw_update, lr_ratios, lr_schedule, Moments, OptimizerConfig, OptimizerState};
use crate::task::{Dataset, TaskData};
use crate::tensor::SeededRng;

/// Metrics after one epoch, evaluated on the full train and validation splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_mcc: f64,
    /// Time spent in the epoch's optimization steps (evaluation excluded).
    pub wall_seconds: f64,
}

pub const CSV_HEADER: [&str; 7] = [
    "epoch",
    "train_loss",
    "train_acc",
    "val_loss",
    "val_acc",
    "val_mcc",
    "wall_seconds",
];

impl RunRecord {
    /// Same record with the wall-clock field zeroed, for determinism checks.
    pub fn without_time(&self) -> RunRecord {
        RunRecord {
            wall_seconds: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub acc: f64,
    pub mcc: f64,
}

const EVAL_CHUNK: usize = 256;

/// Mean loss, accuracy and macro one-vs-rest MCC over the whole split.
pub fn evaluate(model: &ToyModel, data: &Dataset) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let k = model.num_classes();
    let mut cm = ConfusionMatrix::new(k);
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, labels) = data.batch(chunk);
        let logits = model.forward(&x)?;
        let (loss, _) = crate::model::softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        for (j, &y) in labels.iter().enumerate() {
            // first maximum wins ties, so a constant predictor picks class 0
            let mut best = 0;
            for c in 1..k {
                if logits.get(c, j) > logits.get(best, j) {
                    best = c;
                }
            }
            cm.add(y, best);
        }
    }
    Ok(EvalResult {
        loss: loss_sum / data.len() as f64,
        acc: cm.accuracy(),
        mcc: cm.macro_mcc(),
    })
}

enum SlotState {
    None,
    Lora { a: Moments, b: Moments },
    Tri(OptimizerState),
}

/// AdamW over every trainable tensor of a model, with per-layer factor rates.
///
/// Tri-matrix factors use `lr_ratios(cfg, m, n)`; a LoRA layer's `A` takes the
/// `A` rate and its `B` the `B` rate; the head uses `base_lr`. The schedule
/// multiplier scales all of them. Weight decay is applied to adapter factors
/// only.
pub struct ModelOptimizer {
    cfg: OptimizerConfig,
    step: u64,
    rates: Vec<FactorRates>,
    slots: Vec<SlotState>,
    head_weight: Moments,
    head_bias: Moments,
}

impl ModelOptimizer {
    pub fn new(model: &ToyModel, cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rates = Vec::new();
        let mut slots = Vec::new();
        for layer in model.layers() {
            rates.push(lr_ratios(&cfg, layer.base.out_dim(), layer.base.in_dim()));
            slots.push(match &layer.adapter {
                AdapterSlot::None => SlotState::None,
                AdapterSlot::Lora(ad) => SlotState::Lora {
                    a: Moments::zeros_like(&ad.a),
                    b: Moments::zeros_like(&ad.b),
                },
                AdapterSlot::Tri(ad) => SlotState::Tri(OptimizerState::new(ad)),
            });
        }
        Ok(ModelOptimizer {
            head_weight: Moments::zeros_like(&model.head.weight),
            head_bias: Moments::zeros_like(&model.head.bias),
            cfg,
            step: 0,
            rates,
            slots,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Base (unscheduled) factor rates of layer `i`.
    pub fn layer_rates(&self, i: usize) -> FactorRates {
        self.rates[i]
    }

    /// Applies one update with the schedule multiplier for the current step.
    pub fn step(&mut self, model: &mut ToyModel, grads: &ModelGrads) -> Result<()> {
        for (name, g) in model.trainable_grads(grads) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        let mult = match self.cfg.total_steps {
            Some(total) => lr_schedule(&self.cfg, (self.step as usize).min(total))?,
            None => 1.0,
        };
        self.step += 1;
        let t = self.step;
        let no_decay = OptimizerConfig {
            weight_decay: 0.0,
            ..self.cfg.clone()
        };
        for (i, layer) in model.layers_mut().iter_mut().enumerate() {
            let rates = self.rates[i].scaled(mult);
            match (&mut layer.adapter, &mut self.slots[i], &grads.layers[i]) {
                (AdapterSlot::None, SlotState::None, LayerGrad::None) => {}
                (AdapterSlot::Lora(ad), SlotState::Lora { a, b }, LayerGrad::Lora { a: ga, b: gb }) => {
                    adamw_update(&mut ad.a, ga, a, rates.a, &self.cfg, t);
                    adamw_update(&mut ad.b, gb, b, rates.b, &self.cfg, t);
                }
                (AdapterSlot::Tri(ad), SlotState::Tri(state), LayerGrad::Tri(g)) => {
                    adamw_step(ad, g, state, &self.cfg, rates)?;
                }
                _ => {
                    return Err(Error::invalid(format!(
                        "optimizer state does not match layer {}",
                        layer.name
                    )))
                }
            }
        }
        let head_lr = self.cfg.base_lr * mult;
        adamw_update(
            &mut model.head.weight,
            &grads.head_weight,
            &mut self.head_weight,
            head_lr,
            &no_decay,
            t,
        );
        adamw_update(
            &mut model.head.bias,
            &grads.head_bias,
            &mut self.head_bias,
            head_lr,
            &no_decay,
            t,
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub shuffle_seed: u64,
}

pub fn batches_per_epoch(train_size: usize, batch_size: usize) -> usize {
    train_size.div_ceil(batch_size)
}

/// Trains `model` in place with AdamW; returns one record per epoch.
///
/// `opt_cfg.total_steps` is filled in as `epochs × batches_per_epoch` when
/// unset. Each epoch visits the training split in a fresh permutation drawn
/// from `shuffle_seed`; the final batch may be short.
pub fn train(
    model: &mut ToyModel,
    data: &TaskData,
    opt_cfg: &OptimizerConfig,
    settings: &TrainSettings,
) -> Result<Vec<RunRecord>> {
    if settings.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let per_epoch = batches_per_epoch(data.train.len(), settings.batch_size);
    let mut cfg = opt_cfg.clone();
    if cfg.total_steps.is_none() {
        cfg.total_steps = Some((settings.epochs * per_epoch).max(1));
    }
    let mut opt = ModelOptimizer::new(model, cfg)?;
    let mut shuffle = SeededRng::derive(settings.shuffle_seed, 0x5348_5546);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut records = Vec::with_capacity(settings.epochs);

    for epoch in 1..=settings.epochs {
        shuffle.shuffle(&mut order);
        let start = Instant::now();
        for (b, idx) in order.chunks(settings.batch_size).enumerate() {
            let (x, labels) = data.train.batch(idx);
            let (loss, grads) = match model.backward(&x, &labels) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        step: (epoch - 1) * per_epoch + b,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: (epoch - 1) * per_epoch + b,
                    loss,
                });
            }
            opt.step(model, &grads).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    epoch,
                    step: (epoch - 1) * per_epoch + b,
                    loss,
                },
                other => other,
            })?;
        }
        let wall_seconds = start.elapsed().as_secs_f64();
        let tr = evaluate(model, &data.train)?;
        let va = evaluate(model, &data.val)?;
        if !(tr.loss.is_finite() && va.loss.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                step: epoch * per_epoch,
                loss: if tr.loss.is_finite() { va.loss } else { tr.loss },
            });
        }
        records.push(RunRecord {
            epoch,
            train_loss: tr.loss,
            train_acc: tr.acc,
            val_loss: va.loss,
            val_acc: va.acc,
            val_mcc: va.mcc,
            wall_seconds,
        });
    }
    Ok(records)
}

/// First epoch whose validation accuracy reaches `threshold`.
pub fn epochs_to_threshold(records: &[RunRecord], threshold: f64) -> Option<usize> {
    records.iter().find(|r| r.val_acc >= threshold).map(|r| r.epoch)
}

/// Epoch with the highest validation accuracy (earliest on ties).
pub fn best_epoch(records: &[RunRecord]) -> Option<&RunRecord> {
    records.iter().fold(None, |best: Option<&RunRecord>, r| match best {
        Some(b) if b.val_acc >= r.val_acc => Some(b),
        _ => Some(r),
    })
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Writes records as CSV with the fixed [`CSV_HEADER`].
pub fn write_records_csv<W: Write>(out: W, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_records_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_records_csv(std::fs::File::create(path)?, records)
}

pub fn read_records_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::invalid(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::TrainMode;
    use crate::model::{AdapterTemplate, ToyModelSpec};
    use crate::task::{generate, TaskKind, TaskSpec};

    fn setup(seed: u64) -> (ToyModel, TaskData) {
        let spec = ToyModelSpec::new(8, 1, 2, seed);
        let task = TaskSpec {
            kind: TaskKind::SynthLowrank,
            input_dim: 8,
            num_classes: 2,
            train_size: 64,
            val_size: 32,
            noise_level: 0.0,
            seed,
            planted_rank: 2,
            planted_scale: 1.0,
        };
        let data = generate(&task, &spec).unwrap();
        let mut model = ToyModel::build(spec).unwrap();
        model.inject(&AdapterTemplate::tri(2, TrainMode::Abc, seed)).unwrap();
        (model, data)
    }

    fn settings(epochs: usize) -> TrainSettings {
        TrainSettings {
            epochs,
            batch_size: 16,
            shuffle_seed: 3,
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (mut model, data) = setup(1);
        let before = model.clone();
        let cfg = OptimizerConfig {
            weight_decay: 0.1,
            warmup_ratio: 0.1,
            ..OptimizerConfig::new(0.0)
        };
        let recs = train(&mut model, &data, &cfg, &settings(3)).unwrap();
        assert_eq!(recs.len(), 3);
        for r in &recs {
            assert_eq!(
                r.without_time(),
                RunRecord {
                    epoch: r.epoch,
                    ..recs[0].without_time()
                }
            );
        }
        assert_eq!(model, before);
    }

    #[test]
    fn training_is_deterministic_and_freezes_base() {
        let (mut m1, data) = setup(2);
        let (mut m2, _) = setup(2);
        let base: Vec<_> = m1.layers().iter().map(|l| l.base.weight().clone()).collect();
        let cfg = OptimizerConfig::new(1e-2);
        let r1 = train(&mut m1, &data, &cfg, &settings(4)).unwrap();
        let r2 = train(&mut m2, &data, &cfg, &settings(4)).unwrap();
        let strip = |r: &[RunRecord]| r.iter().map(RunRecord::without_time).collect::<Vec<_>>();
        assert_eq!(strip(&r1), strip(&r2));
        for (w, l) in base.iter().zip(m1.layers()) {
            assert!(w.bit_eq(l.base.weight()));
        }
        assert!(r1.last().unwrap().train_loss < r1[0].train_loss || r1[0].train_acc == 1.0);
    }

    #[test]
    fn evaluate_is_pure() {
        let (model, data) = setup(3);
        let a = evaluate(&model, &data.val).unwrap();
        let b = evaluate(&model, &data.val).unwrap();
        assert_eq!(a, b);
        // zero head → constant prediction of class 0
        let zeros = data.val.labels.iter().filter(|&&y| y == 0).count() as f64;
        assert_eq!(a.acc, zeros / data.val.len() as f64);
        assert_eq!(a.mcc, 0.0);
    }

    #[test]
    fn threshold_and_best_epoch() {
        let rec = |epoch, val_acc| RunRecord {
            epoch,
            train_loss: 0.0,
            train_acc: 0.0,
            val_loss: 0.0,
            val_acc,
            val_mcc: 0.0,
            wall_seconds: 0.0,
        };
        let recs = vec![rec(1, 0.5), rec(2, 0.8), rec(3, 0.9), rec(4, 0.9)];
        assert_eq!(epochs_to_threshold(&recs, 0.85), Some(3));
        assert_eq!(epochs_to_threshold(&recs, 0.95), None);
        assert_eq!(best_epoch(&recs).unwrap().epoch, 3);
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn csv_has_fixed_header_and_reads_back() {
        let (mut model, data) = setup(4);
        let recs = train(&mut model, &data, &OptimizerConfig::new(1e-2), &settings(2)).unwrap();
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,train_loss,train_acc,val_loss,val_acc,val_mcc,wall_seconds\n"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        save_records_csv(&path, &recs).unwrap();
        assert_eq!(read_records_csv(&path).unwrap(), recs);
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let (mut model, data) = setup(5);
        model.head.weight.set(0, 0, f64::NAN);
        let err = train(&mut model, &data, &OptimizerConfig::new(1e-2), &settings(2)).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, step: 0, .. }), "{err}");
    }
}
