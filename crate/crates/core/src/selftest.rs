//! Built-in verification suites behind the `selftest` CLI command: gradient
//! checks, conversion equivalence, loss oracles, coordinate arithmetic,
//! aggregation robustness, and a miniature end-to-end run whose artifacts are
//! written out so `predict`/`evaluate` can reproduce its numbers.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DataConfig, RunConfig};
use crate::data::{generate_corpus, save_volume, CorpusSpec, PhantomSpec};
use crate::error::Result;
use crate::eval::{
    aggregate, identification_records, records_to_report, EvaluationFile, PredictionsFile,
    PredictionPaths, Vote,
};
use crate::losses::{
    identification_loss, localization_loss, sequence_loss, smooth_l1, total_loss, SampleTarget,
};
use crate::net::{build_cnn, cnn_forward, convert_to_fcn, fcn_forward, map_to_image, CnnArch};
use crate::ops::{conv3d, conv3d_grad, dense, dense_grad, maxpool3d, maxpool3d_grad, Padding};
use crate::pipeline::{evaluate_corpus, train_pipeline};
use crate::sequence::{birnn_grad, build_birnn, lstm_step, BiRnnArch, LstmState, RnnTrainConfig};
use crate::tensor::Tensor;
use crate::train::CnnTrainConfig;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rel_ok(analytic: f64, numeric: f64, tol: f64) -> bool {
    (analytic - numeric).abs() <= tol * analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central finite differences of `loss` against `analytic`, every entry.
/// Returns (probes, failures).
fn fd_probe(operand: &Tensor, analytic: &Tensor, tol: f64, loss: impl Fn(&Tensor) -> f64) -> (usize, usize) {
    let h = 1e-5;
    let mut failures = 0;
    for i in 0..operand.len() {
        let mut plus = operand.clone();
        plus.data_mut()[i] += h;
        let mut minus = operand.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        if !rel_ok(analytic.data()[i], numeric, tol) {
            failures += 1;
        }
    }
    (operand.len(), failures)
}

fn check_conv_gradients() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut probes = 0;
    let mut failures = 0;
    for pad in [Padding::Valid, Padding::Same] {
        let input = random_tensor(&[2, 3, 4, 4], &mut rng);
        let kernel = random_tensor(&[2, 2, 3, 3, 3], &mut rng);
        let bias = random_tensor(&[2], &mut rng);
        let out = conv3d(&input, &kernel, &bias, 1, pad).unwrap();
        let up = random_tensor(out.shape(), &mut rng);
        let g = conv3d_grad(&input, &kernel, &bias, 1, pad, &up).unwrap();
        let loss = |i: &Tensor, k: &Tensor, b: &Tensor| {
            let o = conv3d(i, k, b, 1, pad).unwrap();
            o.data().iter().zip(up.data()).map(|(a, u)| a * u).sum::<f64>()
        };
        for (operand, analytic, f) in [
            (&input, &g.wrt_input, 0usize),
            (&kernel, &g.wrt_weights, 1),
            (&bias, &g.wrt_bias, 2),
        ] {
            let (p, fails) = fd_probe(operand, analytic, 1e-4, |t| match f {
                0 => loss(t, &kernel, &bias),
                1 => loss(&input, t, &bias),
                _ => loss(&input, &kernel, t),
            });
            probes += p;
            failures += fails;
        }
    }
    CheckOutcome {
        name: "conv3d gradient vs finite differences".into(),
        passed: failures == 0 && probes >= 100,
        detail: format!("{probes} probes, {failures} failures"),
    }
}

fn check_pool_and_dense_gradients() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut probes = 0;
    let mut failures = 0;
    // Pool: distinct values keep probes away from ties.
    let mut vals: Vec<f64> = (0..2 * 4 * 4 * 4).map(|i| i as f64 * 0.173).collect();
    for i in (1..vals.len()).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    let input = Tensor::from_vec(&[2, 4, 4, 4], vals).unwrap();
    let out = maxpool3d(&input).unwrap();
    let up = random_tensor(out.shape(), &mut rng);
    let g = maxpool3d_grad(&input, &up).unwrap();
    let (p, f) = fd_probe(&input, &g, 1e-4, |t| {
        let o = maxpool3d(t).unwrap();
        o.data().iter().zip(up.data()).map(|(a, u)| a * u).sum::<f64>()
    });
    probes += p;
    failures += f;

    let x = random_tensor(&[6], &mut rng);
    let w = random_tensor(&[5, 6], &mut rng);
    let b = random_tensor(&[5], &mut rng);
    let up = random_tensor(&[5], &mut rng);
    let g = dense_grad(&x, &w, &up).unwrap();
    let loss = |x: &Tensor, w: &Tensor, b: &Tensor| {
        let o = dense(x, w, b).unwrap();
        o.data().iter().zip(up.data()).map(|(a, u)| a * u).sum::<f64>()
    };
    for which in 0..3 {
        let (operand, analytic) = match which {
            0 => (&x, &g.wrt_input),
            1 => (&w, &g.wrt_weights),
            _ => (&b, &g.wrt_bias),
        };
        let (p, f) = fd_probe(operand, analytic, 1e-4, |t| match which {
            0 => loss(t, &w, &b),
            1 => loss(&x, t, &b),
            _ => loss(&x, &w, t),
        });
        probes += p;
        failures += f;
    }
    CheckOutcome {
        name: "maxpool3d and dense gradients vs finite differences".into(),
        passed: failures == 0 && probes >= 100,
        detail: format!("{probes} probes, {failures} failures"),
    }
}

fn check_rnn_gradients() -> CheckOutcome {
    use crate::sequence::{FeatureSequence, SequenceStep, StepUpstream};
    let mut rng = ChaCha8Rng::seed_from_u64(103);

    // Single cell: gate semantics.
    let cell = crate::sequence::LstmCellParams {
        w_input: random_tensor(&[16, 3], &mut rng),
        w_hidden: random_tensor(&[16, 4], &mut rng),
        bias: random_tensor(&[16], &mut rng),
    };
    let state = LstmState::zeros(4);
    let (out0, _) = lstm_step(&cell, &[0.3, -0.5, 0.8], &state).unwrap();
    let sane = out0.iter().all(|v| v.is_finite() && v.abs() <= 1.0);

    // Full Bi-RNN at T=3 against finite differences.
    let arch = BiRnnArch {
        input_width: 5,
        hidden_units: 4,
        num_layers: 2,
    };
    let params = build_birnn(&arch, 31).unwrap();
    let seq = FeatureSequence {
        steps: (0..3)
            .map(|t| SequenceStep {
                feature: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
                grid_index: [t, 0, 0],
                origin_voxel: [16 * t, 0, 0],
            })
            .collect(),
        targets: None,
    };
    let ups: Vec<StepUpstream> = (0..3)
        .map(|_| StepUpstream {
            d_logits: (0..27).map(|_| rng.random_range(-1.0..1.0)).collect(),
            d_offset: [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ],
        })
        .collect();
    let analytic = birnn_grad(&params, &seq, &ups).unwrap();
    let fd_loss = |p: &crate::sequence::BiRnnParams| {
        let outs = crate::sequence::birnn_forward(p, &seq).unwrap();
        let mut acc = 0.0;
        for (o, u) in outs.iter().zip(&ups) {
            for (a, b) in o.logits.iter().zip(&u.d_logits) {
                acc += a * b;
            }
            for (a, b) in o.offset.iter().zip(&u.d_offset) {
                acc += a * b;
            }
        }
        acc
    };
    let h = 1e-5;
    let mut probes = 0;
    let mut failures = 0;
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let n = params.tensors()[ti].len();
        for k in 0..n {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data_mut()[k] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data_mut()[k] -= h;
            let numeric = (fd_loss(&plus) - fd_loss(&minus)) / (2.0 * h);
            if !rel_ok(analytic[ti].data()[k], numeric, 1e-4) {
                failures += 1;
            }
            probes += 1;
        }
    }
    CheckOutcome {
        name: "lstm step and bi-rnn BPTT vs finite differences".into(),
        passed: sane && failures == 0 && probes >= 100,
        detail: format!("{probes} probes, {failures} failures"),
    }
}

fn check_fcn_equivalence() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst: f64 = 0.0;
    for draw in 0..3 {
        let arch = CnnArch {
            sample_dims: [32, 112, 96],
            channels: [
                rng.random_range(1..3),
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(2..5),
            ],
            kernel: [3, 3, 3],
            fc_width: rng.random_range(4..9),
        };
        let params = build_cnn(&arch, 200 + draw).unwrap();
        let fcn = convert_to_fcn(&params).unwrap();
        let volume = random_tensor(&[1, 48, 128, 112], &mut rng);
        let maps = fcn_forward(&fcn, &volume).unwrap();
        for cell in 0..maps.num_cells() {
            let g = maps.grid_index(cell);
            let crop = volume.crop3d([g[0] * 16, g[1] * 16, g[2] * 16], arch.sample_dims).unwrap();
            let out = cnn_forward(&params, &crop).unwrap();
            for (a, b) in maps.id_at(cell).iter().zip(&out.logits) {
                worst = worst.max((a - b).abs());
            }
            for (a, b) in maps.loc_at(cell).iter().zip(&out.offset) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    CheckOutcome {
        name: "fcn grid cells equal explicit-crop cnn outputs".into(),
        passed: worst <= 1e-10,
        detail: format!("max |diff| = {worst:.3e}"),
    }
}

fn check_loss_oracles() -> CheckOutcome {
    let mut ok = true;
    let mut detail = String::new();
    // smooth L1 reference points and the knee.
    ok &= smooth_l1(0.0) == 0.0 && smooth_l1(0.5) == 0.125 && smooth_l1(-3.0) == 2.5;
    ok &= (smooth_l1(1.0 - 1e-12) - 0.5).abs() < 1e-9 && smooth_l1(1.0) == 0.5;
    // Direct evaluation of the uniform-prediction identification loss.
    let preds = vec![vec![1.0 / 27.0; 27]];
    let targets = vec![SampleTarget::positive(4, [0.0; 3])];
    let got = identification_loss(&preds, &targets).unwrap();
    let expect = -(1.0f64 / 27.0).ln() - 26.0 * (26.0f64 / 27.0).ln();
    ok &= (got - expect).abs() <= 1e-10;
    let _ = write!(detail, "uniform id loss {got:.12} vs {expect:.12}; ");
    // Iverson masking is bit-exact and the m = 0 batch scores zero.
    let targets = vec![SampleTarget::positive(2, [1.0, 2.0, 3.0]), SampleTarget::background()];
    let mut offs = vec![[1.5, 2.5, 3.5], [0.0, 0.0, 0.0]];
    let (a, _) = localization_loss(&offs, &targets).unwrap();
    offs[1] = [1e12, -4.0, 77.7];
    let (b, _) = localization_loss(&offs, &targets).unwrap();
    ok &= a.to_bits() == b.to_bits();
    let all_bg = vec![SampleTarget::background(); 3];
    ok &= localization_loss(&vec![[9.0; 3]; 3], &all_bg).unwrap() == (0.0, 0);
    // Weighted-total identities.
    ok &= (total_loss(1.0, 2.0, 0.12) - 1.24).abs() <= 1e-12;
    ok &= (sequence_loss(&[1.0, 1.0], &[2.0, 2.0], 0.10).unwrap() - 2.4).abs() <= 1e-12;
    ok &= sequence_loss(&[0.7], &[1.3], 0.12).unwrap() == total_loss(0.7, 1.3, 0.12);
    let _ = write!(detail, "masking bit-exact, identities hold");
    CheckOutcome {
        name: "loss formula oracles".into(),
        passed: ok,
        detail,
    }
}

fn check_coordinate_mapping() -> CheckOutcome {
    let mut ok = map_to_image([2, 3, 1], [4.0, 10.0, 7.0]) == [36.0, 58.0, 23.0];
    ok &= map_to_image([1, 1, 1], [0.0; 3]) == [16.0, 16.0, 16.0];
    let arch = CnnArch {
        sample_dims: [32, 112, 96],
        channels: [1, 1, 1, 1],
        kernel: [3, 3, 3],
        fc_width: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..50 {
        let dims = [
            (2 + rng.random_range(0..6)) * 16,
            (7 + rng.random_range(0..6)) * 16,
            (6 + rng.random_range(0..6)) * 16,
        ];
        let grid = crate::net::fcn_grid_dims(&arch, dims).unwrap();
        for i in 0..3 {
            if grid[i] != (dims[i] - arch.sample_dims[i]) / 16 + 1 {
                ok = false;
            }
        }
    }
    CheckOutcome {
        name: "score-map coordinate mapping and grid arithmetic".into(),
        passed: ok,
        detail: "mapping examples and 50 random grid sizes".into(),
    }
}

fn check_aggregation_median() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut failures = 0;
    let trials = 200;
    for _ in 0..trials {
        let q = [
            rng.random_range(0.0..200.0),
            rng.random_range(0.0..200.0),
            rng.random_range(0.0..200.0),
        ];
        let n = rng.random_range(3..15);
        let majority = n / 2 + 1;
        let mut votes = Vec::new();
        for i in 0..n {
            let c = if i < majority {
                [
                    q[0] + rng.random_range(-2.0..2.0),
                    q[1] + rng.random_range(-2.0..2.0),
                    q[2] + rng.random_range(-2.0..2.0),
                ]
            } else {
                [
                    rng.random_range(0.0..200.0),
                    rng.random_range(0.0..200.0),
                    rng.random_range(0.0..200.0),
                ]
            };
            votes.push(Vote {
                label: 3,
                centroid_voxel: c,
                confidence: 1.0,
            });
        }
        let preds = aggregate(&votes);
        let agg = preds[0].centroid_voxel;
        if (0..3).any(|i| (agg[i] - q[i]).abs() > 2.0) {
            failures += 1;
        }
    }
    CheckOutcome {
        name: "median aggregation tracks the majority cluster".into(),
        passed: failures == 0,
        detail: format!("{trials} randomized trials, {failures} failures"),
    }
}

/// Configuration of the miniature end-to-end run.
pub fn smoke_config() -> RunConfig {
    RunConfig {
        seed: 61,
        threads: None,
        data: DataConfig {
            train_dir: None,
            resample: false,
            target_spacing_mm: [1.0, 1.0, 1.0],
            positives_per_vertebra: 3,
            negatives_per_vertebra: 3,
            subimages_per_vertebra: 2,
            identification_threshold_mm: 20.0,
        },
        cnn_arch: CnnArch {
            sample_dims: [32, 48, 48],
            channels: [3, 4, 6, 8],
            kernel: [3, 3, 3],
            fc_width: 48,
        },
        rnn_arch: BiRnnArch {
            input_width: 48,
            hidden_units: 32,
            num_layers: 2,
        },
        cnn_train: CnnTrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 0.003,
            lr_decay_factor: 0.4,
            lr_decay_every_iters: 20000,
            weight_decay: 1e-4,
            momentum: 0.9,
            lambda: 0.12,
            seed: 0,
        },
        rnn_train: RnnTrainConfig {
            epochs: 8,
            batch_size: 16,
            learning_rate: 0.005,
            weight_decay: 1e-4,
            momentum: 0.9,
            lambda: 0.10,
            lr_decay_factor: 1.0,
            lr_decay_every_iters: 0,
            sequence_cap: 320,
            chunk_overlap: 64,
            seed: 0,
        },
    }
}

fn smoke_corpus(count: usize, base_seed: u64) -> CorpusSpec {
    CorpusSpec {
        base_seed,
        count,
        vertebra_count_range: [4, 6],
        first_label_range: [0, 4],
        template: PhantomSpec {
            curvature: 1.5,
            size_gradient: 0.6,
            noise: 0.03,
            radius_jitter: 0.15,
            in_plane: [64, 64],
            longitudinal_margin: 48,
            ..PhantomSpec::default()
        },
    }
}

fn check_end_to_end(out_dir: Option<&Path>) -> Result<CheckOutcome> {
    let cfg = smoke_config();
    let train = generate_corpus(&smoke_corpus(6, 71))?;
    let test = generate_corpus(&smoke_corpus(2, 72))?;

    let trained = train_pipeline(&train, &cfg)?;
    let losses_finite = trained.cnn_curve.iter().all(|r| r.total.is_finite())
        && trained.rnn_curve.iter().all(|r| r.total.is_finite());
    let eval = evaluate_corpus(&trained.cnn, &trained.fcn, &trained.birnn, &test, &cfg)?;

    let mut predicted_any = false;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::SpineError::io(dir, e))?;
        crate::checkpoint::save_cnn(&dir.join("cnn.spmk"), &trained.cnn)?;
        crate::checkpoint::save_fcn(&dir.join("fcn.spmk"), &trained.fcn)?;
        crate::checkpoint::save_birnn(&dir.join("birnn.spmk"), &trained.birnn)?;
        for (i, (vol, ann)) in test.iter().enumerate() {
            let name = format!("test_{i}.vvol");
            save_volume(&dir.join(&name), vol, Some(ann))?;
            let prediction = crate::eval::predict_volume(&trained.fcn, &trained.birnn, vol)?;
            predicted_any |= !prediction.rnn.is_empty();
            let pf = PredictionsFile {
                volume: name.clone(),
                spacing_mm: vol.spacing_mm,
                paths: PredictionPaths {
                    cnn_bi_rnn: prediction.rnn.clone(),
                    cnn_only: prediction.cnn_only.clone(),
                },
            };
            let json = serde_json::to_string_pretty(&pf)?;
            let ppath = dir.join(format!("test_{i}.predictions.json"));
            std::fs::write(&ppath, json).map_err(|e| crate::error::SpineError::io(&ppath, e))?;
            let threshold = cfg.data.identification_threshold_mm;
            let ef = EvaluationFile {
                cnn_bi_rnn: records_to_report(
                    &identification_records(&prediction.rnn, ann, vol.spacing_mm, threshold),
                    None,
                ),
                cnn_only: records_to_report(
                    &identification_records(&prediction.cnn_only, ann, vol.spacing_mm, threshold),
                    None,
                ),
            };
            let json = serde_json::to_string_pretty(&ef)?;
            let epath = dir.join(format!("test_{i}.eval.json"));
            std::fs::write(&epath, json).map_err(|e| crate::error::SpineError::io(&epath, e))?;
        }
        let summary = serde_json::json!({
            "sample_cls_accuracy": eval.rnn_report.sample_cls_accuracy,
            "sample_loc_error_mm": eval.rnn_report.sample_loc_error_mm,
            "cnn_bi_rnn": eval.rnn_report,
            "cnn_only": eval.cnn_report,
        });
        let spath = dir.join("summary.json");
        std::fs::write(&spath, serde_json::to_string_pretty(&summary)?)
            .map_err(|e| crate::error::SpineError::io(&spath, e))?;
    } else {
        for (vol, _) in &test {
            let prediction = crate::eval::predict_volume(&trained.fcn, &trained.birnn, vol)?;
            predicted_any |= !prediction.rnn.is_empty();
        }
    }

    let acc = eval.rnn_report.sample_cls_accuracy.unwrap_or(0.0);
    Ok(CheckOutcome {
        name: "end-to-end smoke run (train, convert, train-rnn, predict)".into(),
        passed: losses_finite && predicted_any,
        detail: format!(
            "sample accuracy {acc:.3}, id rate rnn {:.3} / cnn {:.3}, loc {:.2} mm",
            eval.rnn_report.id_rate_all, eval.cnn_report.id_rate_all, eval.rnn_report.loc_mean_mm
        ),
    })
}

/// Runs every suite; when `out_dir` is given, the end-to-end artifacts
/// (volumes, checkpoints, predictions, evaluations) are written there.
pub fn run_selftest(out_dir: Option<&Path>) -> Result<SelftestReport> {
    let mut checks = vec![
        check_conv_gradients(),
        check_pool_and_dense_gradients(),
        check_rnn_gradients(),
        check_fcn_equivalence(),
        check_loss_oracles(),
        check_coordinate_mapping(),
        check_aggregation_median(),
    ];
    checks.push(check_end_to_end(out_dir)?);
    Ok(SelftestReport { checks })
}
