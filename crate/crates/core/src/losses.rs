//! The multi-task loss family: per-class binary cross-entropy over softmax
//! probabilities for identification, smooth L1 over centroid offsets for
//! localization (positives only), their weighted combination, and the
//! time-accumulated sequence variant.

use crate::error::{Result, SpineError};
use crate::ops::softmax;

/// Number of identification classes: 26 vertebra types plus background.
pub const NUM_CLASSES: usize = 27;
/// Index of the background class.
pub const BACKGROUND: usize = NUM_CLASSES - 1;

const CLAMP_EPS: f64 = 1e-12;

/// Ground truth for one sample: a one-hot class label plus, for positive
/// samples, the centroid offset within the sample in voxels.
#[derive(Debug, Clone)]
pub struct SampleTarget {
    pub label: usize,
    pub centroid_offset: [f64; 3],
}

impl SampleTarget {
    pub fn positive(label: usize, centroid_offset: [f64; 3]) -> SampleTarget {
        assert!(label < BACKGROUND, "positive label must be < {BACKGROUND}");
        SampleTarget { label, centroid_offset }
    }

    pub fn background() -> SampleTarget {
        SampleTarget {
            label: BACKGROUND,
            centroid_offset: [0.0; 3],
        }
    }

    pub fn is_positive(&self) -> bool {
        self.label != BACKGROUND
    }

    pub fn onehot(&self) -> [f64; NUM_CLASSES] {
        let mut v = [0.0; NUM_CLASSES];
        v[self.label] = 1.0;
        v
    }
}

/// One training-loss observation: the identification and localization terms,
/// their weighted total, and the positive-sample count entering the
/// localization normalizer.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossReport {
    pub id_loss: f64,
    pub loc_loss: f64,
    pub total: f64,
    pub positive_count: usize,
    pub lambda: f64,
}

impl LossReport {
    pub fn new(id_loss: f64, loc_loss: f64, lambda: f64, positive_count: usize) -> LossReport {
        LossReport {
            id_loss,
            loc_loss,
            total: total_loss(id_loss, loc_loss, lambda),
            positive_count,
            lambda,
        }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
}

/// Summed per-class binary cross-entropy for one probability vector against a
/// one-hot target: -sum_j [ y_j log p_j + (1 - y_j) log(1 - p_j) ].
fn per_sample_id_loss(probs: &[f64], label: usize) -> f64 {
    let mut acc = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        let p = clamp_prob(p);
        if j == label {
            acc -= p.ln();
        } else {
            acc -= (1.0 - p).ln();
        }
    }
    acc
}

/// Identification loss: mean over samples of the summed per-class binary
/// cross-entropy. Inputs are probability vectors (each must sum to 1 within
/// 1e-6); probabilities are clamped to [1e-12, 1 - 1e-12] before logs.
pub fn identification_loss(predictions: &[Vec<f64>], targets: &[SampleTarget]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(SpineError::InvalidArgument(
            "identification_loss requires at least one sample".into(),
        ));
    }
    if predictions.len() != targets.len() {
        return Err(SpineError::shape(
            "identification_loss",
            format!("{} targets", predictions.len()),
            format!("{}", targets.len()),
        ));
    }
    let mut acc = 0.0;
    for (i, (p, t)) in predictions.iter().zip(targets).enumerate() {
        if p.len() != NUM_CLASSES {
            return Err(SpineError::shape(
                format!("identification_loss prediction {i}"),
                format!("{NUM_CLASSES} classes"),
                format!("{}", p.len()),
            ));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| v < 0.0) {
            return Err(SpineError::InvalidArgument(format!(
                "identification_loss prediction {i} is not a probability vector (sum {sum})"
            )));
        }
        acc += per_sample_id_loss(p, t.label);
    }
    Ok(acc / predictions.len() as f64)
}

/// Smooth L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Derivative of [`smooth_l1`]: x for |x| < 1, sign(x) otherwise.
pub fn smooth_l1_deriv(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Localization loss: sum over positive samples of the summed smooth L1 over
/// the 3 offset coordinates, divided by the positive count m. Returns
/// (loss, m); all-negative batches yield (0, 0).
pub fn localization_loss(pred_offsets: &[[f64; 3]], targets: &[SampleTarget]) -> Result<(f64, usize)> {
    if pred_offsets.len() != targets.len() {
        return Err(SpineError::shape(
            "localization_loss",
            format!("{} targets", pred_offsets.len()),
            format!("{}", targets.len()),
        ));
    }
    let mut acc = 0.0;
    let mut m = 0usize;
    for (pred, t) in pred_offsets.iter().zip(targets) {
        if t.is_positive() {
            m += 1;
            for j in 0..3 {
                acc += smooth_l1(t.centroid_offset[j] - pred[j]);
            }
        }
    }
    if m == 0 {
        Ok((0.0, 0))
    } else {
        Ok((acc / m as f64, m))
    }
}

/// Weighted total: id_loss + lambda * loc_loss.
pub fn total_loss(id_loss: f64, loc_loss: f64, lambda: f64) -> f64 {
    id_loss + lambda * loc_loss
}

/// Sequence loss accumulated over time: sum_t (id_t + lambda * loc_t).
pub fn sequence_loss(per_step_id: &[f64], per_step_loc: &[f64], lambda: f64) -> Result<f64> {
    if per_step_id.is_empty() {
        return Err(SpineError::InvalidArgument(
            "sequence_loss requires at least one step".into(),
        ));
    }
    if per_step_id.len() != per_step_loc.len() {
        return Err(SpineError::shape(
            "sequence_loss",
            format!("{} loc terms", per_step_id.len()),
            format!("{}", per_step_loc.len()),
        ));
    }
    Ok(per_step_id
        .iter()
        .zip(per_step_loc)
        .map(|(id, loc)| total_loss(*id, *loc, lambda))
        .sum())
}

/// Identification loss and gradient w.r.t. the logits for a single sample:
/// the softmax composed with the per-class binary cross-entropy.
pub fn id_loss_grad_wrt_logits(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = per_sample_id_loss(&p, label);
    // dL/dp_j with clamped probabilities.
    let dp: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            let pj = clamp_prob(pj);
            if j == label {
                -1.0 / pj
            } else {
                1.0 / (1.0 - pj)
            }
        })
        .collect();
    // Chain through the softmax Jacobian: dL/dz_k = p_k * (dp_k - sum_j dp_j p_j).
    let dot: f64 = dp.iter().zip(&p).map(|(d, pj)| d * pj).sum();
    let grad = p.iter().zip(&dp).map(|(&pj, &dj)| pj * (dj - dot)).collect();
    (loss, grad)
}

/// Localization loss and gradient w.r.t. the predicted offset for a single
/// positive sample (unnormalized: caller applies lambda and 1/m).
pub fn loc_loss_grad(pred: &[f64; 3], target: &[f64; 3]) -> (f64, [f64; 3]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 3];
    for j in 0..3 {
        let x = target[j] - pred[j];
        loss += smooth_l1(x);
        grad[j] = -smooth_l1_deriv(x);
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::assert_close;
    use proptest::prelude::*;

    fn onehot_prediction(label: usize) -> Vec<f64> {
        let mut p = vec![0.0; NUM_CLASSES];
        p[label] = 1.0;
        p
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let preds = vec![onehot_prediction(4)];
        let targets = vec![SampleTarget::positive(4, [0.0; 3])];
        let loss = identification_loss(&preds, &targets).unwrap();
        // Zero up to the clamping epsilon.
        assert!(loss.abs() < 1e-9, "{loss}");
    }

    #[test]
    fn uniform_prediction_matches_direct_evaluation_oracle() {
        let preds = vec![vec![1.0 / 27.0; NUM_CLASSES]];
        let targets = vec![SampleTarget::positive(9, [0.0; 3])];
        let loss = identification_loss(&preds, &targets).unwrap();
        // Independent direct evaluation: -log(1/27) - 26*log(26/27).
        let expected = -(1.0f64 / 27.0).ln() - 26.0 * (26.0f64 / 27.0).ln();
        assert_close(loss, expected, 1e-10);
    }

    #[test]
    fn mean_linearity_over_two_samples() {
        let p1 = softmax(&{
            let mut l = [0.0; NUM_CLASSES];
            l[3] = 2.0;
            l
        });
        let p2 = softmax(&{
            let mut l = [0.0; NUM_CLASSES];
            l[7] = -1.0;
            l
        });
        let t1 = SampleTarget::positive(3, [0.0; 3]);
        let t2 = SampleTarget::positive(5, [0.0; 3]);
        let a = identification_loss(&[p1.clone()], &[t1.clone()]).unwrap();
        let b = identification_loss(&[p2.clone()], &[t2.clone()]).unwrap();
        let both = identification_loss(&[p1, p2], &[t1, t2]).unwrap();
        assert_close(both, (a + b) / 2.0, 1e-12);
    }

    #[test]
    fn rejects_empty_and_unnormalized() {
        assert!(identification_loss(&[], &[]).is_err());
        let bad = vec![vec![0.1; NUM_CLASSES]];
        let t = vec![SampleTarget::background()];
        assert!(identification_loss(&bad, &t).is_err());
    }

    #[test]
    fn smooth_l1_reference_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(-3.0), 2.5);
        // Both branches meet at |x| = 1 with value 0.5.
        assert_eq!(0.5 * 1.0f64 * 1.0, 0.5);
        assert_eq!(1.0f64.abs() - 0.5, 0.5);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(smooth_l1(-1.0), 0.5);
    }

    #[test]
    fn smooth_l1_derivative_matches_finite_differences() {
        let h = 1e-6;
        for &x in &[-2.7, -1.3, -0.6, -0.2, 0.0, 0.3, 0.9, 1.4, 5.0] {
            let numeric = (smooth_l1(x + h) - smooth_l1(x - h)) / (2.0 * h);
            assert_close(smooth_l1_deriv(x), numeric, 1e-6);
        }
    }

    proptest! {
        #[test]
        fn smooth_l1_is_even_and_monotone(x in 0.0f64..50.0, y in 0.0f64..50.0) {
            prop_assert_eq!(smooth_l1(x), smooth_l1(-x));
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(smooth_l1(lo) <= smooth_l1(hi));
        }
    }

    #[test]
    fn localization_loss_all_background_is_zero() {
        let preds = vec![[5.0, 5.0, 5.0]; 3];
        let targets = vec![SampleTarget::background(); 3];
        assert_eq!(localization_loss(&preds, &targets).unwrap(), (0.0, 0));
    }

    #[test]
    fn localization_loss_single_positive_example() {
        // pred - gt = (0.5, 2, 0) -> (0.125 + 1.5 + 0) / 1 = 1.625
        let preds = vec![[10.5, 12.0, 3.0]];
        let targets = vec![SampleTarget::positive(0, [10.0, 10.0, 3.0])];
        let (loss, m) = localization_loss(&preds, &targets).unwrap();
        assert_eq!(m, 1);
        assert_close(loss, 1.625, 1e-12);
    }

    #[test]
    fn localization_loss_exact_prediction_is_zero() {
        let targets = vec![
            SampleTarget::positive(1, [4.0, 5.0, 6.0]),
            SampleTarget::positive(2, [1.0, 2.0, 3.0]),
        ];
        let preds = vec![[4.0, 5.0, 6.0], [1.0, 2.0, 3.0]];
        assert_eq!(localization_loss(&preds, &targets).unwrap(), (0.0, 2));
    }

    #[test]
    fn background_predictions_do_not_affect_loss_bits() {
        let targets = vec![
            SampleTarget::positive(3, [2.0, 2.0, 2.0]),
            SampleTarget::background(),
            SampleTarget::positive(8, [1.0, 0.0, 9.0]),
        ];
        let mut preds = vec![[2.3, 1.9, 2.2], [0.0, 0.0, 0.0], [1.5, 0.5, 8.0]];
        let (base, m) = localization_loss(&preds, &targets).unwrap();
        assert_eq!(m, 2);
        for wild in [[1e9, -1e9, 42.0], [f64::MAX, 0.0, -7.0]] {
            preds[1] = wild;
            let (perturbed, _) = localization_loss(&preds, &targets).unwrap();
            assert_eq!(base.to_bits(), perturbed.to_bits());
        }
    }

    #[test]
    fn total_loss_values() {
        assert_close(total_loss(1.0, 2.0, 0.12), 1.24, 1e-12);
        assert_eq!(total_loss(3.0, 99.0, 0.0), 3.0);
        assert_eq!(total_loss(3.0, 0.0, 0.5), 3.0);
    }

    #[test]
    fn sequence_loss_values() {
        assert_close(sequence_loss(&[1.0, 1.0], &[2.0, 2.0], 0.10).unwrap(), 2.4, 1e-12);
        assert_eq!(sequence_loss(&[0.0; 4], &[0.0; 4], 0.3).unwrap(), 0.0);
        assert!(sequence_loss(&[], &[], 0.1).is_err());
        assert!(sequence_loss(&[1.0], &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn sequence_loss_with_one_step_equals_total_loss() {
        let (id, loc, lambda) = (0.73, 2.11, 0.1);
        assert_eq!(
            sequence_loss(&[id], &[loc], lambda).unwrap(),
            total_loss(id, loc, lambda)
        );
    }

    #[test]
    fn loss_report_invariant() {
        let r = LossReport::new(1.375, 0.5, 0.12, 7);
        assert!((r.total - (r.id_loss + r.lambda * r.loc_loss)).abs() <= 1e-12);
    }

    #[test]
    fn id_grad_matches_finite_differences() {
        let logits: Vec<f64> = (0..NUM_CLASSES).map(|i| (i as f64 * 0.37).sin()).collect();
        let label = 11;
        let (_, grad) = id_loss_grad_wrt_logits(&logits, label);
        let h = 1e-6;
        for k in 0..NUM_CLASSES {
            let mut plus = logits.clone();
            plus[k] += h;
            let mut minus = logits.clone();
            minus[k] -= h;
            let lp = id_loss_grad_wrt_logits(&plus, label).0;
            let lm = id_loss_grad_wrt_logits(&minus, label).0;
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                (grad[k] - numeric).abs() <= 1e-6 * grad[k].abs().max(numeric.abs()).max(1.0),
                "logit {k}: {} vs {numeric}",
                grad[k]
            );
        }
    }

    #[test]
    fn loc_grad_matches_finite_differences() {
        let target = [3.0, -1.0, 0.4];
        let pred = [2.2, 1.5, 0.3];
        let (_, grad) = loc_loss_grad(&pred, &target);
        let h = 1e-6;
        for j in 0..3 {
            let mut plus = pred;
            plus[j] += h;
            let mut minus = pred;
            minus[j] -= h;
            let numeric = (loc_loss_grad(&plus, &target).0 - loc_loss_grad(&minus, &target).0) / (2.0 * h);
            assert_close(grad[j], numeric, 1e-6);
        }
    }
}
