//! Binary classification metrics, spurious being the positive class.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("{predictions} predictions for {labels} labels")]
pub struct LengthMismatch {
    pub predictions: usize,
    pub labels: usize,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[bool], actual: &[bool]) -> Result<Self, LengthMismatch> {
        if predicted.len() != actual.len() {
            return Err(LengthMismatch {
                predictions: predicted.len(),
                labels: actual.len(),
            });
        }
        let mut c = Confusion::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Ratios with a zero denominator are reported as 0.
    pub fn metrics(&self) -> Metrics {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics {
            accuracy: ratio(self.tp + self.tn, self.total()),
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn compute_metrics(predicted: &[bool], actual: &[bool]) -> Result<Metrics, LengthMismatch> {
    Confusion::from_predictions(predicted, actual).map(|c| c.metrics())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let c = Confusion { tp: 3, fp: 1, fn_: 1, tn: 5 };
        let m = c.metrics();
        assert_eq!(m.accuracy, 0.8);
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.75);
        assert!((m.f1 - 0.75).abs() < 1e-15);
    }

    #[test]
    fn counts_each_cell() {
        let pred = [true, true, false, false, true];
        let real = [true, false, true, false, true];
        let c = Confusion::from_predictions(&pred, &real).unwrap();
        assert_eq!(c, Confusion { tp: 2, fp: 1, fn_: 1, tn: 1 });
        assert_eq!(
            compute_metrics(&pred, &real[..3]),
            Err(LengthMismatch { predictions: 5, labels: 3 })
        );
    }

    #[test]
    fn empty_and_all_negative_are_zero() {
        assert_eq!(compute_metrics(&[], &[]).unwrap().f1, 0.0);
        let m = compute_metrics(&[false; 4], &[false; 4]).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 0.0, 0.0, 0.0));
    }

    proptest! {
        #[test]
        fn bounded_and_symmetric(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
            let (pred, real): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let m = compute_metrics(&pred, &real).unwrap();
            for v in [m.accuracy, m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            // swapping prediction and truth swaps precision and recall
            let s = compute_metrics(&real, &pred).unwrap();
            prop_assert_eq!(m.precision, s.recall);
            prop_assert_eq!(m.recall, s.precision);
            prop_assert!((m.f1 - s.f1).abs() < 1e-12);
            prop_assert_eq!(m.accuracy, s.accuracy);
            // F1 lies between min and max of precision and recall
            prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
            prop_assert!(m.f1 + 1e-12 >= m.precision.min(m.recall) || m.f1 == 0.0);
        }
    }
}
