//! Synthetic classification tasks.
//!
//! * `SynthCls`: labels from an independent random tanh teacher network.
//! * `SynthLowrank`: the teacher is the student's own frozen base model with a
//!   planted rank-`r*` perturbation added to every linear layer, plus a random
//!   teacher head. Closing the gap requires the adapters to find the planted
//!   directions.
//!
//! Inputs are i.i.d. `N(0, 1)`. Class biases are balanced so every class has
//! close to `N / K` examples before label noise.

use serde::{Deserialize, Serialize};

use crate::adapter::FrozenLinear;
use crate::error::{Error, Result};
use crate::model::{AdapterSlot, ToyModel, ToyModelSpec};
use crate::tensor::{gaussian_matrix, Matrix, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SynthCls,
    SynthLowrank,
}

fn default_planted_rank() -> usize {
    4
}

fn default_planted_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub input_dim: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    /// Probability that a label is replaced by a different, uniformly chosen class.
    #[serde(default)]
    pub noise_level: f64,
    #[serde(default)]
    pub seed: u64,
    /// Rank of the planted perturbation (`SynthLowrank` only).
    #[serde(default = "default_planted_rank")]
    pub planted_rank: usize,
    /// `‖ΔW*‖_F / ‖W0‖_F` in expectation (`SynthLowrank` only).
    #[serde(default = "default_planted_scale")]
    pub planted_scale: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::invalid("task needs input_dim >= 1 and num_classes >= 2"));
        }
        if self.train_size == 0 || self.val_size == 0 {
            return Err(Error::invalid("train_size and val_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.noise_level) {
            return Err(Error::invalid(format!(
                "noise_level must lie in [0, 1), got {}",
                self.noise_level
            )));
        }
        if self.kind == TaskKind::SynthLowrank && (self.planted_rank == 0 || !(self.planted_scale >= 0.0)) {
            return Err(Error::invalid("planted_rank must be >= 1 and planted_scale >= 0"));
        }
        Ok(())
    }
}

/// Examples stored one per column.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.x.select_columns(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub val: Dataset,
}

const STREAM_INPUTS: u64 = 1;
const STREAM_TEACHER: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// Generates `train_size + val_size` examples and splits them in order, so
/// the two splits never share an example. `model` is the student's base
/// architecture; `SynthLowrank` derives its teacher from it.
pub fn generate(task: &TaskSpec, model: &ToyModelSpec) -> Result<TaskData> {
    task.validate()?;
    if task.input_dim != model.width || task.num_classes != model.num_classes {
        return Err(Error::Config(format!(
            "task (input_dim {}, {} classes) does not fit model (width {}, {} classes)",
            task.input_dim, task.num_classes, model.width, model.num_classes
        )));
    }
    let total = task.train_size + task.val_size;
    let mut input_rng = SeededRng::derive(task.seed, STREAM_INPUTS);
    let x = gaussian_matrix(task.input_dim, total, 1.0, &mut input_rng)?;

    let mut teacher_rng = SeededRng::derive(task.seed, STREAM_TEACHER);
    let logits = match task.kind {
        TaskKind::SynthCls => mlp_teacher_logits(task, &x, &mut teacher_rng)?,
        TaskKind::SynthLowrank => lowrank_teacher(task, model, &mut teacher_rng)?.forward(&x)?,
    };
    let mut labels = balanced_argmax(&logits);

    let mut noise_rng = SeededRng::derive(task.seed, STREAM_NOISE);
    let k = task.num_classes;
    for y in labels.iter_mut() {
        if noise_rng.uniform() < task.noise_level {
            let shift = 1 + noise_rng.below(k - 1);
            *y = (*y + shift) % k;
        }
    }

    let train_idx: Vec<usize> = (0..task.train_size).collect();
    let val_idx: Vec<usize> = (task.train_size..total).collect();
    let split = |idx: &[usize]| Dataset {
        x: x.select_columns(idx),
        labels: idx.iter().map(|&i| labels[i]).collect(),
    };
    Ok(TaskData {
        train: split(&train_idx),
        val: split(&val_idx),
    })
}

fn mlp_teacher_logits(task: &TaskSpec, x: &Matrix, rng: &mut SeededRng) -> Result<Matrix> {
    let n = task.input_dim;
    let hidden = 2 * n;
    let w1 = gaussian_matrix(hidden, n, 1.0 / n as f64, rng)?;
    let w2 = gaussian_matrix(task.num_classes, hidden, 1.0 / hidden as f64, rng)?;
    w2.matmul(&w1.matmul(x)?.map(f64::tanh))
}

/// The student's base model with `W0 + s·U·Vᵀ` in every linear layer
/// (`U ~ N(0, 1/r*)`, `V ~ N(0, 1/n)`) and a `N(0, 1/width)` head.
pub fn lowrank_teacher(task: &TaskSpec, model: &ToyModelSpec, rng: &mut SeededRng) -> Result<ToyModel> {
    let mut teacher = ToyModel::build(model.clone())?;
    let r = task.planted_rank;
    for layer in teacher.layers_mut() {
        let (m, n) = (layer.base.out_dim(), layer.base.in_dim());
        if r > m.min(n) {
            return Err(Error::RankTooLarge {
                layer: layer.name.clone(),
                rank: r,
                dim: m.min(n),
            });
        }
        let u = gaussian_matrix(m, r, 1.0 / r as f64, rng)?;
        let v = gaussian_matrix(n, r, 1.0 / n as f64, rng)?;
        let mut w = layer.base.weight().clone();
        w.axpy(task.planted_scale, &u.matmul_t(&v)?)?;
        layer.base = FrozenLinear::new(w);
        layer.adapter = AdapterSlot::None;
    }
    teacher.head.weight = gaussian_matrix(model.num_classes, model.width, 1.0 / model.width as f64, rng)?;
    Ok(teacher)
}

/// Argmax after per-class offsets chosen so classes are near-equally
/// populated. Two classes split exactly at the median margin; more classes
/// use a few rounds of proportional offset updates.
fn balanced_argmax(logits: &Matrix) -> Vec<usize> {
    let (k, n) = logits.shape();
    if k == 2 {
        let margins: Vec<f64> = (0..n).map(|j| logits.get(1, j) - logits.get(0, j)).collect();
        let mut sorted = margins.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[n / 2];
        return margins.iter().map(|&d| usize::from(d >= median)).collect();
    }

    let mean_spread = {
        let mean = logits.as_slice().iter().sum::<f64>() / logits.len() as f64;
        (logits.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / logits.len() as f64).sqrt()
    };
    let mut offset: Vec<f64> = (0..k).map(|i| -logits.row(i).iter().sum::<f64>() / n as f64).collect();
    let assign = |offset: &[f64]| -> Vec<usize> {
        (0..n)
            .map(|j| {
                (0..k)
                    .max_by(|&a, &b| (logits.get(a, j) + offset[a]).total_cmp(&(logits.get(b, j) + offset[b])))
                    .unwrap()
            })
            .collect()
    };
    let target = n as f64 / k as f64;
    let mut labels = assign(&offset);
    for round in 0..200 {
        let mut counts = vec![0usize; k];
        for &y in &labels {
            counts[y] += 1;
        }
        if counts.iter().all(|&c| (c as f64 - target).abs() <= 0.02 * target + 1.0) {
            break;
        }
        let rate = 0.5 * mean_spread / (1.0 + round as f64 / 20.0);
        for c in 0..k {
            offset[c] -= rate * (counts[c] as f64 - target) / target;
        }
        labels = assign(&offset);
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(kind: TaskKind, k: usize, seed: u64) -> TaskSpec {
        TaskSpec {
            kind,
            input_dim: 16,
            num_classes: k,
            train_size: 300,
            val_size: 100,
            noise_level: 0.0,
            seed,
            planted_rank: 4,
            planted_scale: 1.0,
        }
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let model = ToyModelSpec::new(16, 1, 2, 0);
        let data = generate(&task(TaskKind::SynthCls, 2, 1), &model).unwrap();
        assert_eq!(data.train.len(), 300);
        assert_eq!(data.val.len(), 100);
        // columns are distinct draws, so no validation column appears in train
        for j in 0..data.val.x.cols() {
            let v = data.val.x.column(j);
            for i in 0..data.train.x.cols() {
                assert_ne!(v, data.train.x.column(i));
            }
        }
    }

    #[test]
    fn labels_are_balanced() {
        for k in [2, 3, 5] {
            for kind in [TaskKind::SynthCls, TaskKind::SynthLowrank] {
                let model = ToyModelSpec::new(16, 1, k, 3);
                let data = generate(&task(kind, k, 7), &model).unwrap();
                let mut counts = data.train.class_counts(k);
                for (c, v) in counts.iter_mut().zip(data.val.class_counts(k)) {
                    *c += v;
                }
                let target = 400.0 / k as f64;
                for c in &counts {
                    assert!((*c as f64 - target).abs() <= 0.1 * target, "{kind:?} k={k}: {counts:?}");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let model = ToyModelSpec::new(16, 1, 3, 0);
        let t = task(TaskKind::SynthLowrank, 3, 11);
        assert_eq!(generate(&t, &model).unwrap(), generate(&t, &model).unwrap());
    }

    #[test]
    fn noise_flips_roughly_the_requested_fraction() {
        let model = ToyModelSpec::new(16, 1, 2, 0);
        let clean = generate(&task(TaskKind::SynthCls, 2, 5), &model).unwrap();
        let noisy = generate(
            &TaskSpec {
                noise_level: 0.2,
                ..task(TaskKind::SynthCls, 2, 5)
            },
            &model,
        )
        .unwrap();
        let flipped = clean
            .train
            .labels
            .iter()
            .zip(&noisy.train.labels)
            .filter(|(a, b)| a != b)
            .count();
        assert!((30..=90).contains(&flipped), "{flipped}");
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let model = ToyModelSpec::new(8, 1, 2, 0);
        assert!(generate(&task(TaskKind::SynthCls, 2, 0), &model).is_err());
    }
}
