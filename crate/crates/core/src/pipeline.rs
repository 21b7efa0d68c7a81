//! End-to-end orchestration: sample generation, CNN training, FCN
//! conversion, sequence extraction, Bi-RNN training, and corpus evaluation.

use crate::config::RunConfig;
use crate::data::{
    generate_cnn_samples, generate_rnn_subimages, mix_seed, window_target, AnnotationSet,
    GenerationWarning, Volume,
};
use crate::error::{Result, SpineError};
use crate::eval::{
    identification_records, predict_volume, records_to_report, sample_metrics, EvalReport,
    MatchRecords,
};
use crate::losses::LossReport;
use crate::net::{convert_to_fcn, fcn_forward, CnnParams, FcnModel, ScoreMaps};
use crate::sequence::{
    train_birnn, BiRnnParams, FeatureSequence, RnnEpochReport, SequenceStep, StepTarget,
};
use crate::train::{predict_samples, train_cnn};

/// Builds the training-time feature sequence of a scanned (sub)image: cells
/// are kept iff the ground-truth window rule marks them positive, targets
/// come from the annotations, features from the scan.
pub fn ground_truth_sequence(
    maps: &ScoreMaps,
    volume: &Volume,
    annotations: &AnnotationSet,
    sample_dims: [usize; 3],
) -> FeatureSequence {
    let mut steps = Vec::new();
    let mut targets = Vec::new();
    for cell in 0..maps.num_cells() {
        let g = maps.grid_index(cell);
        let origin = [g[0] * 16, g[1] * 16, g[2] * 16];
        let target = window_target(annotations, volume.spacing_mm, origin, sample_dims);
        if !target.is_positive() {
            continue;
        }
        steps.push(SequenceStep {
            feature: maps.feature_at(cell),
            grid_index: g,
            origin_voxel: origin,
        });
        targets.push(StepTarget {
            label: target.label,
            offset: target.centroid_offset,
        });
    }
    FeatureSequence {
        steps,
        targets: Some(targets),
    }
}

/// Everything the training stages produce.
pub struct TrainedPipeline {
    pub cnn: CnnParams,
    pub fcn: FcnModel,
    pub birnn: BiRnnParams,
    pub cnn_curve: Vec<LossReport>,
    pub rnn_curve: Vec<RnnEpochReport>,
    pub warnings: Vec<GenerationWarning>,
    pub sequence_count: usize,
}

/// Runs the full training protocol on annotated volumes.
pub fn train_pipeline(
    volumes: &[(Volume, AnnotationSet)],
    cfg: &RunConfig,
) -> Result<TrainedPipeline> {
    cfg.validate()?;
    if volumes.is_empty() {
        return Err(SpineError::InvalidArgument("train_pipeline requires volumes".into()));
    }
    let sample_dims = cfg.cnn_arch.sample_dims;

    let (samples, warnings) = generate_cnn_samples(
        volumes,
        sample_dims,
        cfg.data.positives_per_vertebra,
        cfg.data.negatives_per_vertebra,
        cfg.sampling_seed(),
    );
    for w in &warnings {
        log::warn!("sample generation, volume {}: {}", w.volume_index, w.message);
    }
    log::info!("training cnn on {} samples", samples.len());
    let mut cnn_cfg = cfg.cnn_train.clone();
    cnn_cfg.seed = cfg.cnn_seed();
    let (cnn, cnn_curve) = train_cnn(&samples, &cfg.cnn_arch, &cnn_cfg)?;

    let fcn = convert_to_fcn(&cnn)?;

    let subimages = generate_rnn_subimages(
        volumes,
        sample_dims,
        cfg.data.subimages_per_vertebra,
        mix_seed(cfg.sampling_seed(), 0x535542, 0),
    );
    log::info!("extracting feature sequences from {} subimages", subimages.len());
    let mut sequences = Vec::new();
    for (sub_vol, sub_ann) in &subimages {
        let maps = fcn_forward(&fcn, &sub_vol.intensities)?;
        let seq = ground_truth_sequence(&maps, sub_vol, sub_ann, sample_dims);
        if !seq.is_empty() {
            sequences.push(seq);
        }
    }
    if sequences.is_empty() {
        return Err(SpineError::InvalidArgument(
            "no non-empty training sequences; phantoms may lack positive windows".into(),
        ));
    }
    let sequence_count = sequences.len();
    log::info!("training birnn on {sequence_count} sequences");
    let mut rnn_cfg = cfg.rnn_train.clone();
    rnn_cfg.seed = cfg.rnn_seed();
    let (birnn, rnn_curve) = train_birnn(&sequences, &cfg.rnn_arch, &rnn_cfg)?;

    Ok(TrainedPipeline {
        cnn,
        fcn,
        birnn,
        cnn_curve,
        rnn_curve,
        warnings,
        sequence_count,
    })
}

/// Held-out evaluation of both inference paths, pooled over volumes.
pub struct CorpusEval {
    /// CNN + Bi-RNN path.
    pub rnn_report: EvalReport,
    /// CNN-only ablation path.
    pub cnn_report: EvalReport,
}

/// Evaluates both paths on annotated held-out volumes. Sample-level metrics
/// are computed with crops generated from the held-out volumes themselves.
pub fn evaluate_corpus(
    cnn: &CnnParams,
    fcn: &FcnModel,
    birnn: &BiRnnParams,
    volumes: &[(Volume, AnnotationSet)],
    cfg: &RunConfig,
) -> Result<CorpusEval> {
    if volumes.is_empty() {
        return Err(SpineError::InvalidArgument("evaluate_corpus requires volumes".into()));
    }
    let threshold = cfg.data.identification_threshold_mm;
    let mut rnn_records = MatchRecords::default();
    let mut cnn_records = MatchRecords::default();
    for (vol, ann) in volumes {
        let prediction = predict_volume(fcn, birnn, vol)?;
        rnn_records.merge(identification_records(
            &prediction.rnn,
            ann,
            vol.spacing_mm,
            threshold,
        ));
        cnn_records.merge(identification_records(
            &prediction.cnn_only,
            ann,
            vol.spacing_mm,
            threshold,
        ));
    }

    let (eval_samples, _) = generate_cnn_samples(
        volumes,
        cfg.cnn_arch.sample_dims,
        cfg.data.positives_per_vertebra,
        cfg.data.negatives_per_vertebra,
        mix_seed(cfg.sampling_seed(), 0x4556_414c, 0),
    );
    let sample = if eval_samples.is_empty() {
        None
    } else {
        let preds = predict_samples(cnn, &eval_samples)?;
        let targets: Vec<_> = eval_samples.iter().map(|s| s.target.clone()).collect();
        let spacing = volumes[0].0.spacing_mm;
        Some(sample_metrics(&preds, &targets, spacing)?)
    };

    Ok(CorpusEval {
        rnn_report: records_to_report(&rnn_records, sample),
        cnn_report: records_to_report(&cnn_records, sample),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_phantom, PhantomSpec};
    use crate::net::{build_cnn, CnnArch};

    #[test]
    fn ground_truth_sequence_marks_positive_windows() {
        let (vol, ann) = synth_phantom(&PhantomSpec {
            seed: 3,
            vertebra_count: 4,
            in_plane: [64, 64],
            longitudinal_margin: 40,
            ..PhantomSpec::default()
        })
        .unwrap();
        let arch = CnnArch {
            sample_dims: [32, 48, 48],
            channels: [1, 1, 1, 1],
            kernel: [3, 3, 3],
            fc_width: 4,
        };
        let cnn = build_cnn(&arch, 4).unwrap();
        let fcn = convert_to_fcn(&cnn).unwrap();
        let maps = fcn_forward(&fcn, &vol.intensities).unwrap();
        let seq = ground_truth_sequence(&maps, &vol, &ann, arch.sample_dims);
        assert!(!seq.is_empty());
        let targets = seq.targets.as_ref().unwrap();
        assert_eq!(targets.len(), seq.len());
        // Ordering is row-major over the grid, hence longitudinal-monotone.
        for pair in seq.steps.windows(2) {
            assert!(pair[0].grid_index[0] <= pair[1].grid_index[0]);
        }
        // Every target offset points inside its window.
        for (step, t) in seq.steps.iter().zip(targets) {
            for i in 0..3 {
                assert!(t.offset[i] >= 0.0 && t.offset[i] < arch.sample_dims[i] as f64);
            }
            let _ = step;
        }
        // Independent count: windows containing a centroid.
        let mut expected = 0;
        for cell in 0..maps.num_cells() {
            let g = maps.grid_index(cell);
            let origin = [g[0] * 16, g[1] * 16, g[2] * 16];
            let t = window_target(&ann, vol.spacing_mm, origin, arch.sample_dims);
            if t.is_positive() {
                expected += 1;
            }
        }
        assert_eq!(seq.len(), expected);
    }
}
