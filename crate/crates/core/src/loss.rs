//! Numerically stable softmax cross-entropy over classifier logits.
//!
//! The loss is the mean negative log-probability of the true class over the
//! batch; the mean (not sum) reduction is what keeps the scale-parameter
//! gradient consistent with the rest of the objective. Rows are shifted by
//! their maximum before exponentiation so logits up to a few thousand stay
//! finite.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Softmax cross-entropy with cached probabilities for the backward pass.
pub struct SoftmaxCrossEntropy {
    cached: Option<(Tensor, Vec<usize>)>, // (probs M x C, labels)
}

impl SoftmaxCrossEntropy {
    pub fn new() -> Self {
        Self { cached: None }
    }

    /// Mean negative log-probability of the true classes.
    pub fn forward(&mut self, logits: &Tensor, labels: &[usize]) -> Result<f64> {
        if logits.rank() != 2 || logits.rows() != labels.len() || labels.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "softmax_ce_forward",
                lhs: logits.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let classes = logits.cols();
        for (i, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::LabelOutOfRange {
                    index: i,
                    label,
                    num_classes: classes,
                });
            }
        }
        let mut probs = logits.clone();
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = probs.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let shifted_true = row[label] - max;
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
            // -log p in log-sum-exp form; -ln(probs[label]) would overflow
            // to infinity once the true-class probability underflows.
            loss += sum.ln() - shifted_true;
        }
        loss /= labels.len() as f64;
        self.cached = Some((probs, labels.to_vec()));
        Ok(loss)
    }

    /// `(softmax(logits) - onehot(labels)) / M`.
    pub fn backward(&mut self) -> Result<Tensor> {
        let (probs, labels) = self.cached.take().ok_or(Error::BackwardBeforeForward {
            layer: "softmax_ce",
        })?;
        let m = labels.len() as f64;
        let mut grad = probs;
        for (r, &label) in labels.iter().enumerate() {
            let row = grad.row_mut(r);
            row[label] -= 1.0;
            for v in row.iter_mut() {
                *v /= m;
            }
        }
        Ok(grad)
    }
}

impl Default for SoftmaxCrossEntropy {
    fn default() -> Self {
        Self::new()
    }
}

/// Fraction of rows whose argmax equals the label. Ties resolve to the
/// lowest class index.
pub fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let mut correct = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        let mut loss = SoftmaxCrossEntropy::new();
        let logits = Tensor::zeros(&[3, 10]);
        let l = loss.forward(&logits, &[0, 5, 9]).unwrap();
        assert!((l - 10.0f64.ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn saturated_true_logit_loss_vanishes() {
        let mut loss = SoftmaxCrossEntropy::new();
        let mut logits = Tensor::zeros(&[1, 10]);
        logits.data_mut()[3] = 30.0;
        let l = loss.forward(&logits, &[3]).unwrap();
        assert!(l < 1e-9, "{l}");
    }

    #[test]
    fn three_logit_hand_value() {
        let mut loss = SoftmaxCrossEntropy::new();
        let logits = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let l = loss.forward(&logits, &[2]).unwrap();
        let expect = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.40761).abs() < 1e-5);
    }

    #[test]
    fn label_out_of_range_reports_index() {
        let mut loss = SoftmaxCrossEntropy::new();
        let logits = Tensor::zeros(&[2, 3]);
        match loss.forward(&logits, &[1, 3]) {
            Err(Error::LabelOutOfRange { index, label, .. }) => {
                assert_eq!((index, label), (1, 3));
            }
            other => panic!("expected label error, got {other:?}"),
        }
    }

    #[test]
    fn backward_uniform_two_class() {
        let mut loss = SoftmaxCrossEntropy::new();
        let logits = Tensor::zeros(&[1, 2]);
        loss.forward(&logits, &[0]).unwrap();
        let g = loss.backward().unwrap();
        assert!((g.data()[0] + 0.5).abs() < 1e-15);
        assert!((g.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_saturated_is_near_zero() {
        let mut loss = SoftmaxCrossEntropy::new();
        let mut logits = Tensor::zeros(&[1, 4]);
        logits.data_mut()[1] = 40.0;
        loss.forward(&logits, &[1]).unwrap();
        let g = loss.backward().unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut loss = SoftmaxCrossEntropy::new();
        assert!(matches!(
            loss.backward(),
            Err(Error::BackwardBeforeForward { .. })
        ));
    }

    #[test]
    fn finite_for_huge_logits() {
        let mut loss = SoftmaxCrossEntropy::new();
        let logits = Tensor::from_rows(&[&[1e4, -1e4, 0.0]]).unwrap();
        let l = loss.forward(&logits, &[1]).unwrap();
        assert!(l.is_finite());
    }

    proptest! {
        #[test]
        fn gradient_rows_sum_to_zero(seed in 0u64..500, m in 1usize..5, c in 2usize..8) {
            let mut rng = crate::rng::Rng::new(seed);
            let logits = Tensor::new(&[m, c], (0..m * c).map(|_| rng.next_range(-5.0, 5.0)).collect()).unwrap();
            let labels: Vec<usize> = (0..m).map(|_| rng.next_below(c)).collect();
            let mut loss = SoftmaxCrossEntropy::new();
            loss.forward(&logits, &labels).unwrap();
            let g = loss.backward().unwrap();
            for r in 0..m {
                let s: f64 = g.row(r).iter().sum();
                prop_assert!(s.abs() < 1e-12);
            }
        }

        #[test]
        fn shift_invariance(seed in 0u64..500, shift in -100.0f64..100.0) {
            let mut rng = crate::rng::Rng::new(seed);
            let base: Vec<f64> = (0..6).map(|_| rng.next_range(-3.0, 3.0)).collect();
            let shifted: Vec<f64> = base.iter().map(|v| v + shift).collect();
            let mut l1 = SoftmaxCrossEntropy::new();
            let mut l2 = SoftmaxCrossEntropy::new();
            let a = l1.forward(&Tensor::new(&[1, 6], base).unwrap(), &[2]).unwrap();
            let b = l2.forward(&Tensor::new(&[1, 6], shifted).unwrap(), &[2]).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..500) {
            let mut rng = crate::rng::Rng::new(seed);
            let logits = Tensor::new(&[2, 5], (0..10).map(|_| rng.next_range(-10.0, 10.0)).collect()).unwrap();
            let mut loss = SoftmaxCrossEntropy::new();
            loss.forward(&logits, &[0, 4]).unwrap();
            let (probs, _) = loss.cached.as_ref().unwrap();
            for r in 0..2 {
                let s: f64 = probs.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_decreases_as_true_logit_grows() {
        let mut prev = f64::INFINITY;
        for step in 0..10 {
            let mut loss = SoftmaxCrossEntropy::new();
            let logits = Tensor::from_rows(&[&[step as f64 * 0.5, 1.0, -0.5]]).unwrap();
            let l = loss.forward(&logits, &[0]).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 0.0]]).unwrap();
        assert_eq!(batch_accuracy(&logits, &[1, 0]), 1.0);
        assert_eq!(batch_accuracy(&logits, &[0, 0]), 0.5);
    }
}
