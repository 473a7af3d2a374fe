//! Classification metrics: accuracy and Matthews correlation.

/// Binary Matthews correlation coefficient. Returns 0 when any marginal in
/// the denominator is empty.
pub fn mcc(tp: u64, tn: u64, fp: u64, fn_: u64) -> f64 {
    let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom.sqrt()
}

/// `counts[actual][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_predictions(num_classes: usize, actual: &[usize], predicted: &[usize]) -> Self {
        let mut cm = ConfusionMatrix::new(num_classes);
        for (&a, &p) in actual.iter().zip(predicted) {
            cm.add(a, p);
        }
        cm
    }

    pub fn add(&mut self, actual: usize, predicted: usize) {
        self.counts[actual][predicted] += 1;
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.num_classes()).map(|k| self.counts[k][k]).sum();
        correct as f64 / total as f64
    }

    /// `(tp, tn, fp, fn)` treating class `k` as positive.
    pub fn one_vs_rest(&self, k: usize) -> (u64, u64, u64, u64) {
        let total = self.total();
        let tp = self.counts[k][k];
        let actual_k: u64 = self.counts[k].iter().sum();
        let predicted_k: u64 = self.counts.iter().map(|row| row[k]).sum();
        let fn_ = actual_k - tp;
        let fp = predicted_k - tp;
        (tp, total - tp - fn_ - fp, fp, fn_)
    }

    /// Macro average of one-vs-rest MCC; for two classes this equals the
    /// binary MCC with either class as positive.
    pub fn macro_mcc(&self) -> f64 {
        let k = self.num_classes();
        (0..k)
            .map(|c| {
                let (tp, tn, fp, fn_) = self.one_vs_rest(c);
                mcc(tp, tn, fp, fn_)
            })
            .sum::<f64>()
            / k as f64
    }
}
