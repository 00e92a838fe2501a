use serde::{Deserialize, Serialize};

/// Confusion-matrix summary of a labeled evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
}

impl Evaluation {
    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Self {
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let c = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..c).map(|i| confusion[i][i]).sum();
        let accuracy = if total == 0 {
            0.0
        } else {
            trace as f64 / total as f64
        };
        let per_class_f1: Vec<f64> = (0..c)
            .map(|k| {
                let tp = confusion[k][k] as f64;
                let predicted: u64 = (0..c).map(|i| confusion[i][k]).sum();
                let actual: u64 = confusion[k].iter().sum();
                let denom = (predicted + actual) as f64;
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .collect();
        // Classes absent from both truth and predictions do not count.
        let present: Vec<f64> = (0..c)
            .filter(|&k| {
                confusion[k].iter().sum::<u64>() + (0..c).map(|i| confusion[i][k]).sum::<u64>() > 0
            })
            .map(|k| per_class_f1[k])
            .collect();
        let macro_f1 = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Self {
            confusion,
            accuracy,
            macro_f1,
            per_class_f1,
        }
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_is_trace_over_total() {
        let e = Evaluation::from_predictions(3, &[0, 0, 1, 2, 2, 2], &[0, 1, 1, 2, 2, 0]);
        assert!((e.accuracy - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(e.total(), 6);
        // class 0: tp 1, predicted 2, actual 2 -> 0.5
        assert!((e.per_class_f1[0] - 0.5).abs() < 1e-12);
        assert!(e.per_class_f1.iter().all(|f| (0.0..=1.0).contains(f)));
    }

    #[test]
    fn perfect_predictions() {
        let e = Evaluation::from_predictions(2, &[0, 1, 1], &[0, 1, 1]);
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.macro_f1, 1.0);
    }
}
