//! CNN training: SGD with momentum over labeled sample crops, multi-task
//! loss (mean per-class cross-entropy plus lambda times the positive-masked
//! smooth-L1 localization term), stepped learning-rate decay.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SampleCrop;
use crate::error::{Result, SpineError};
use crate::losses::{id_loss_grad_wrt_logits, loc_loss_grad, total_loss, LossReport};
use crate::net::{build_cnn, cnn_backward, cnn_forward, cnn_forward_cached, CnnArch, CnnParams};
use crate::optim::{sgd_step, OptimState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CnnTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_iters: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for CnnTrainConfig {
    fn default() -> CnnTrainConfig {
        CnnTrainConfig {
            epochs: 15,
            batch_size: 24,
            learning_rate: 0.001,
            lr_decay_factor: 0.4,
            lr_decay_every_iters: 20000,
            weight_decay: 1e-4,
            momentum: 0.9,
            lambda: 0.12,
            seed: 0,
        }
    }
}

impl CnnTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(SpineError::BadConfig("cnn epochs and batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(SpineError::BadConfig("cnn learning rate must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(SpineError::BadConfig("lambda must be non-negative".into()));
        }
        if self.lr_decay_factor <= 0.0 {
            return Err(SpineError::BadConfig("lr decay factor must be positive".into()));
        }
        Ok(())
    }
}

fn shuffle(v: &mut [usize], rng: &mut impl rand::Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Trains the multi-task CNN on pre-generated sample crops. Deterministic for
/// a given seed: batch grads accumulate in sample order, one optimizer step
/// per batch, per-epoch loss reports returned (and logged).
pub fn train_cnn(
    samples: &[SampleCrop],
    arch: &CnnArch,
    cfg: &CnnTrainConfig,
) -> Result<(CnnParams, Vec<LossReport>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(SpineError::InvalidArgument("train_cnn requires samples".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        let expect = [1, arch.sample_dims[0], arch.sample_dims[1], arch.sample_dims[2]];
        if s.tensor.shape() != expect {
            return Err(SpineError::shape(
                format!("training sample {i}"),
                format!("{expect:?}"),
                format!("{:?}", s.tensor.shape()),
            ));
        }
    }

    let mut params = build_cnn(arch, cfg.seed)?;
    let mut state = {
        let tensors = params.tensors();
        OptimState::new(&tensors, cfg.learning_rate, cfg.momentum, cfg.weight_decay)?
    };

    use rand::SeedableRng;
    let mut order_rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x434e_4e5f_4f52_44);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut iters = 0usize;

    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut order_rng);
        let mut epoch_id_sum = 0.0;
        let mut epoch_loc_sum = 0.0;
        let mut epoch_positives = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let m = batch
                .iter()
                .filter(|&&i| samples[i].target.is_positive())
                .count();
            let n = batch.len();
            let mut grad_acc: Vec<Tensor> = params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            let mut batch_id = 0.0;
            let mut batch_loc = 0.0;
            for &si in batch {
                let s = &samples[si];
                let cache = cnn_forward_cached(&params, &s.tensor)?;
                let (id_loss, mut d_logits) =
                    id_loss_grad_wrt_logits(&cache.output.logits, s.target.label);
                for g in &mut d_logits {
                    *g /= n as f64;
                }
                let mut d_offset = [0.0; 3];
                let mut loc_loss = 0.0;
                if s.target.is_positive() && m > 0 {
                    let (l, g) = loc_loss_grad(&cache.output.offset, &s.target.centroid_offset);
                    loc_loss = l;
                    let scale = cfg.lambda / m as f64;
                    for (d, gv) in d_offset.iter_mut().zip(g) {
                        *d = gv * scale;
                    }
                }
                let grads = cnn_backward(&params, &cache, &d_logits, &d_offset)?;
                for (acc, g) in grad_acc.iter_mut().zip(&grads) {
                    acc.axpy(1.0, g)?;
                }
                batch_id += id_loss;
                batch_loc += loc_loss;
            }
            let batch_report = LossReport::new(
                batch_id / n as f64,
                if m > 0 { batch_loc / m as f64 } else { 0.0 },
                cfg.lambda,
                m,
            );
            if !batch_report.total.is_finite() {
                return Err(SpineError::NonFinite(format!(
                    "cnn batch loss at epoch {epoch} (id {}, loc {})",
                    batch_report.id_loss, batch_report.loc_loss
                )));
            }
            {
                let grad_refs: Vec<&Tensor> = grad_acc.iter().collect();
                let mut tensors = params.tensors_mut();
                sgd_step(&mut tensors, &grad_refs, &mut state)?;
            }
            iters += 1;
            if cfg.lr_decay_every_iters > 0 && iters % cfg.lr_decay_every_iters == 0 {
                state.learning_rate *= cfg.lr_decay_factor;
            }
            epoch_id_sum += batch_id;
            epoch_loc_sum += batch_loc;
            epoch_positives += m;
        }

        let report = LossReport::new(
            epoch_id_sum / samples.len() as f64,
            if epoch_positives > 0 {
                epoch_loc_sum / epoch_positives as f64
            } else {
                0.0
            },
            cfg.lambda,
            epoch_positives,
        );
        log::info!(
            "cnn epoch {epoch}: id {:.6} loc {:.6} total {:.6} (m={})",
            report.id_loss,
            report.loc_loss,
            report.total,
            report.positive_count
        );
        curve.push(report);
    }
    Ok((params, curve))
}

/// Classifies sample crops: per sample, the argmax label and the predicted
/// offset. Parallel over samples; deterministic.
pub fn predict_samples(
    params: &CnnParams,
    samples: &[SampleCrop],
) -> Result<Vec<(usize, [f64; 3])>> {
    samples
        .par_iter()
        .map(|s| {
            let out = cnn_forward(params, &s.tensor)?;
            Ok((crate::ops::argmax(&out.logits), out.offset))
        })
        .collect()
}

/// Mean multi-task loss of the samples under fixed parameters (no training),
/// useful for before/after comparisons.
pub fn evaluate_cnn_loss(
    params: &CnnParams,
    samples: &[SampleCrop],
    lambda: f64,
) -> Result<LossReport> {
    if samples.is_empty() {
        return Err(SpineError::InvalidArgument("no samples".into()));
    }
    let results: Vec<Result<(f64, f64, bool)>> = samples
        .par_iter()
        .map(|s| {
            let out = cnn_forward(params, &s.tensor)?;
            let (id, _) = id_loss_grad_wrt_logits(&out.logits, s.target.label);
            let (loc, positive) = if s.target.is_positive() {
                (loc_loss_grad(&out.offset, &s.target.centroid_offset).0, true)
            } else {
                (0.0, false)
            };
            Ok((id, loc, positive))
        })
        .collect();
    let mut id_sum = 0.0;
    let mut loc_sum = 0.0;
    let mut m = 0usize;
    for r in results {
        let (id, loc, positive) = r?;
        id_sum += id;
        loc_sum += loc;
        if positive {
            m += 1;
        }
    }
    let id = id_sum / samples.len() as f64;
    let loc = if m > 0 { loc_sum / m as f64 } else { 0.0 };
    let _ = total_loss(id, loc, lambda);
    Ok(LossReport::new(id, loc, lambda, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_phantom, generate_cnn_samples, PhantomSpec};

    fn tiny_arch() -> CnnArch {
        CnnArch {
            sample_dims: [32, 48, 48],
            channels: [2, 3, 4, 5],
            kernel: [3, 3, 3],
            fc_width: 16,
        }
    }

    fn tiny_samples() -> Vec<SampleCrop> {
        let (vol, ann) = synth_phantom(&PhantomSpec {
            seed: 5,
            vertebra_count: 4,
            in_plane: [64, 64],
            longitudinal_margin: 40,
            ..PhantomSpec::default()
        })
        .unwrap();
        let (samples, _) = generate_cnn_samples(&[(vol, ann)], [32, 48, 48], 3, 3, 11);
        samples
    }

    #[test]
    fn training_decreases_the_loss() {
        let samples = tiny_samples();
        let cfg = CnnTrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.02,
            lr_decay_every_iters: 0,
            weight_decay: 0.0,
            seed: 3,
            ..CnnTrainConfig::default()
        };
        let (_, curve) = train_cnn(&samples, &tiny_arch(), &cfg).unwrap();
        assert_eq!(curve.len(), 3);
        assert!(
            curve[2].total < curve[0].total,
            "{} -> {}",
            curve[0].total,
            curve[2].total
        );
        for r in &curve {
            assert!((r.total - (r.id_loss + r.lambda * r.loc_loss)).abs() <= 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let samples = tiny_samples();
        let cfg = CnnTrainConfig {
            epochs: 2,
            batch_size: 6,
            learning_rate: 0.01,
            seed: 9,
            ..CnnTrainConfig::default()
        };
        let (p1, c1) = train_cnn(&samples, &tiny_arch(), &cfg).unwrap();
        let (p2, c2) = train_cnn(&samples, &tiny_arch(), &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(c1.len(), c2.len());
        for (a, b) in c1.iter().zip(&c2) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
    }

    #[test]
    fn rejects_empty_and_misshaped_samples() {
        let cfg = CnnTrainConfig::default();
        assert!(train_cnn(&[], &tiny_arch(), &cfg).is_err());
        let mut samples = tiny_samples();
        samples[0].tensor = Tensor::zeros(&[1, 16, 48, 48]);
        assert!(train_cnn(&samples, &tiny_arch(), &cfg).is_err());
    }
}
