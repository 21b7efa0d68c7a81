//! Aggregation of dense predictions and the evaluation metrics:
//! sample classification accuracy, sample localization error, identification
//! rate and localization error statistics with the cervical/thoracic/lumbar
//! region breakdown.

use serde::{Deserialize, Serialize};

use crate::data::{label_name, AnnotationSet};
use crate::error::{Result, SpineError};
use crate::losses::{SampleTarget, BACKGROUND};
use crate::net::{dense_predict, fcn_forward, map_to_image, FcnModel};
use crate::ops::{argmax, softmax};
use crate::sequence::{build_feature_sequence, birnn_forward, BiRnnParams};
use crate::data::Volume;

/// One dense vote: a labeled centroid with the classifier's confidence.
#[derive(Debug, Clone, Copy)]
pub struct Vote {
    pub label: usize,
    pub centroid_voxel: [f64; 3],
    pub confidence: f64,
}

/// The aggregated prediction for one label.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FinalPrediction {
    pub label: String,
    pub label_index: usize,
    pub centroid_voxel: [f64; 3],
    pub support_count: usize,
    pub mean_confidence: f64,
}

/// Lower median: the element at index (n-1)/2 of the sorted values.
fn lower_median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    values[(values.len() - 1) / 2]
}

/// Groups votes by label and takes the componentwise (lower) median of each
/// group. At most one prediction per label; empty input gives an empty set.
pub fn aggregate(votes: &[Vote]) -> Vec<FinalPrediction> {
    let mut groups: Vec<Vec<&Vote>> = vec![Vec::new(); BACKGROUND];
    for v in votes {
        assert!(v.label < BACKGROUND, "aggregate only accepts non-background votes");
        groups[v.label].push(v);
    }
    let mut out = Vec::new();
    for (label, group) in groups.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let mut centroid = [0.0; 3];
        for (i, c) in centroid.iter_mut().enumerate() {
            let mut comps: Vec<f64> = group.iter().map(|v| v.centroid_voxel[i]).collect();
            *c = lower_median(&mut comps);
        }
        let mean_confidence =
            group.iter().map(|v| v.confidence).sum::<f64>() / group.len() as f64;
        out.push(FinalPrediction {
            label: label_name(label).to_string(),
            label_index: label,
            centroid_voxel: centroid,
            support_count: group.len(),
            mean_confidence,
        });
    }
    out
}

/// Sample-level metrics: classification accuracy over all samples (background
/// included) and the mean Euclidean localization error in millimeters over
/// positive samples.
pub fn sample_metrics(
    predictions: &[(usize, [f64; 3])],
    targets: &[SampleTarget],
    spacing_mm: [f64; 3],
) -> Result<(f64, f64)> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(SpineError::InvalidArgument(format!(
            "sample_metrics needs matching non-empty lists, got {} and {}",
            predictions.len(),
            targets.len()
        )));
    }
    let mut correct = 0usize;
    let mut err_sum = 0.0;
    let mut positives = 0usize;
    for ((label, offset), t) in predictions.iter().zip(targets) {
        if *label == t.label {
            correct += 1;
        }
        if t.is_positive() {
            positives += 1;
            let mut d2 = 0.0;
            for i in 0..3 {
                let d = (offset[i] - t.centroid_offset[i]) * spacing_mm[i];
                d2 += d * d;
            }
            err_sum += d2.sqrt();
        }
    }
    let accuracy = correct as f64 / predictions.len() as f64;
    let loc_error = if positives > 0 {
        err_sum / positives as f64
    } else {
        0.0
    };
    Ok((accuracy, loc_error))
}

/// Match outcome per ground-truth vertebra plus spurious prediction labels;
/// poolable across volumes.
#[derive(Debug, Clone, Default)]
pub struct MatchRecords {
    /// (gt label, Some(distance mm) when identified)
    pub per_vertebra: Vec<(usize, Option<f64>)>,
    /// Predicted labels absent from the ground truth.
    pub false_positive_labels: Vec<usize>,
}

impl MatchRecords {
    pub fn merge(&mut self, other: MatchRecords) {
        self.per_vertebra.extend(other.per_vertebra);
        self.false_positive_labels.extend(other.false_positive_labels);
    }
}

/// A ground-truth vertebra is identified iff the prediction carrying its
/// label exists, is the closest of all predictions to the true centroid, and
/// lies within `threshold_mm`.
pub fn identification_records(
    predictions: &[FinalPrediction],
    gt: &AnnotationSet,
    spacing_mm: [f64; 3],
    threshold_mm: f64,
) -> MatchRecords {
    let centroids = gt.centroid_voxels(spacing_mm);
    let dist = |p: &FinalPrediction, c: &[f64; 3]| -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let d = (p.centroid_voxel[i] - c[i]) * spacing_mm[i];
            d2 += d * d;
        }
        d2.sqrt()
    };
    let mut per_vertebra = Vec::with_capacity(centroids.len());
    for (label, c) in &centroids {
        let same: Option<&FinalPrediction> =
            predictions.iter().find(|p| p.label_index == *label);
        let outcome = same.and_then(|p| {
            let d = dist(p, c);
            let closest = predictions.iter().all(|q| dist(q, c) >= d);
            (closest && d <= threshold_mm).then_some(d)
        });
        per_vertebra.push((*label, outcome));
    }
    let gt_labels: Vec<usize> = centroids.iter().map(|(l, _)| *l).collect();
    let false_positive_labels = predictions
        .iter()
        .map(|p| p.label_index)
        .filter(|l| !gt_labels.contains(l))
        .collect();
    MatchRecords {
        per_vertebra,
        false_positive_labels,
    }
}

/// Identification rate and localization error statistics over a label range.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RegionReport {
    pub id_rate: f64,
    pub loc_mean_mm: f64,
    pub loc_std_mm: f64,
    pub gt_count: usize,
    pub identified: usize,
}

fn region_report(records: &MatchRecords, range: impl Fn(usize) -> bool) -> RegionReport {
    let subset: Vec<&(usize, Option<f64>)> = records
        .per_vertebra
        .iter()
        .filter(|(l, _)| range(*l))
        .collect();
    let gt_count = subset.len();
    let dists: Vec<f64> = subset.iter().filter_map(|(_, d)| *d).collect();
    let identified = dists.len();
    let id_rate = if gt_count > 0 {
        identified as f64 / gt_count as f64
    } else {
        0.0
    };
    let (mean, std) = if identified > 0 {
        let mean = dists.iter().sum::<f64>() / identified as f64;
        let var = dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / identified as f64;
        (mean, var.sqrt())
    } else {
        (0.0, 0.0)
    };
    RegionReport {
        id_rate,
        loc_mean_mm: mean,
        loc_std_mm: std,
        gt_count,
        identified,
    }
}

/// Per-region sub-reports: cervical C1-C7, thoracic T1-T12, lumbar L1-L5.
/// Sacral vertebrae count toward the overall numbers only.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RegionBlock {
    pub cervical: RegionReport,
    pub thoracic: RegionReport,
    pub lumbar: RegionReport,
}

/// The evaluation report serialized by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_cls_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_loc_error_mm: Option<f64>,
    pub id_rate_all: f64,
    pub loc_mean_mm: f64,
    pub loc_std_mm: f64,
    pub gt_count: usize,
    pub identified: usize,
    pub regions: RegionBlock,
    pub false_positive_labels: Vec<String>,
}

/// Summarizes pooled match records (optionally with sample-level metrics)
/// into the final report.
pub fn records_to_report(records: &MatchRecords, sample: Option<(f64, f64)>) -> EvalReport {
    let all = region_report(records, |_| true);
    let mut fp: Vec<usize> = records.false_positive_labels.clone();
    fp.sort_unstable();
    fp.dedup();
    EvalReport {
        sample_cls_accuracy: sample.map(|s| s.0),
        sample_loc_error_mm: sample.map(|s| s.1),
        id_rate_all: all.id_rate,
        loc_mean_mm: all.loc_mean_mm,
        loc_std_mm: all.loc_std_mm,
        gt_count: all.gt_count,
        identified: all.identified,
        regions: RegionBlock {
            cervical: region_report(records, |l| l <= 6),
            thoracic: region_report(records, |l| (7..=18).contains(&l)),
            lumbar: region_report(records, |l| (19..=23).contains(&l)),
        },
        false_positive_labels: fp.into_iter().map(|l| label_name(l).to_string()).collect(),
    }
}

/// Convenience wrapper producing the report for one volume.
pub fn identification_metrics(
    predictions: &[FinalPrediction],
    gt: &AnnotationSet,
    spacing_mm: [f64; 3],
    threshold_mm: f64,
) -> Result<EvalReport> {
    if gt.entries.is_empty() {
        return Err(SpineError::InvalidArgument(
            "identification_metrics requires ground truth".into(),
        ));
    }
    let records = identification_records(predictions, gt, spacing_mm, threshold_mm);
    Ok(records_to_report(&records, None))
}

/// Predictions of both inference paths over one volume, sharing one FCN scan.
#[derive(Debug, Clone)]
pub struct VolumePrediction {
    /// CNN + Bi-RNN path.
    pub rnn: Vec<FinalPrediction>,
    /// CNN-only path (dense argmax predictions aggregated directly).
    pub cnn_only: Vec<FinalPrediction>,
}

/// Runs the full pipeline on one volume: FCN scan, sequence construction,
/// Bi-RNN labeling, coordinate mapping and median aggregation, plus the
/// CNN-only path for the ablation comparison. An all-background volume yields
/// empty prediction sets.
pub fn predict_volume(
    fcn: &FcnModel,
    birnn: &BiRnnParams,
    volume: &Volume,
) -> Result<VolumePrediction> {
    let maps = fcn_forward(fcn, &volume.intensities)?;

    let cnn_votes: Vec<Vote> = dense_predict(&maps)
        .into_iter()
        .map(|p| Vote {
            label: p.label,
            centroid_voxel: p.centroid_voxel,
            confidence: p.confidence,
        })
        .collect();
    let cnn_only = aggregate(&cnn_votes);

    let seq = build_feature_sequence(&maps);
    let rnn = if seq.is_empty() {
        log::warn!("predict_volume: no positive grid cells; empty prediction set");
        Vec::new()
    } else {
        let outputs = birnn_forward(birnn, &seq)?;
        let mut votes = Vec::new();
        for (step, out) in seq.steps.iter().zip(&outputs) {
            let probs = softmax(&out.logits);
            let label = argmax(&probs);
            if label == BACKGROUND {
                continue;
            }
            votes.push(Vote {
                label,
                centroid_voxel: map_to_image(step.grid_index, out.offset),
                confidence: probs[label],
            });
        }
        aggregate(&votes)
    };
    Ok(VolumePrediction { rnn, cnn_only })
}

/// On-disk shape of a `predict` run over one volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub volume: String,
    pub spacing_mm: [f64; 3],
    pub paths: PredictionPaths,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionPaths {
    pub cnn_bi_rnn: Vec<FinalPrediction>,
    pub cnn_only: Vec<FinalPrediction>,
}

/// On-disk shape of an `evaluate` run: one report per inference path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub cnn_bi_rnn: EvalReport,
    pub cnn_only: EvalReport,
}
