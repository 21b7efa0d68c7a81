//! Scratch harness for sizing the desk-scale end-to-end run: prints stage
//! timings and held-out metrics for a candidate configuration.
//!
//! Run with: cargo run --release -p spinemark-core --example calibrate

use std::time::Instant;

use spinemark_core::config::{DataConfig, RunConfig};
use spinemark_core::data::{synth_phantom, AnnotationSet, PhantomSpec, Volume};
use spinemark_core::net::CnnArch;
use spinemark_core::pipeline::{evaluate_corpus, train_pipeline};
use spinemark_core::sequence::{BiRnnArch, RnnTrainConfig};
use spinemark_core::train::CnnTrainConfig;

fn phantom_corpus(count: usize, base_seed: u64) -> Vec<(Volume, AnnotationSet)> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(base_seed);
    (0..count)
        .map(|i| {
            let vertebra_count = rng.random_range(5..=10);
            let first_label = rng.random_range(0..=(26 - vertebra_count).min(8));
            synth_phantom(&PhantomSpec {
                seed: base_seed.wrapping_add(1000 + i as u64),
                vertebra_count,
                first_label,
                curvature: 2.0,
                size_gradient: 0.6,
                noise: 0.04,
                radius_jitter: 0.3,
                level_spacing: 26.0,
                in_plane: [64, 64],
                longitudinal_margin: 48,
                base_radius: 6.0,
                spacing_mm: [1.0, 1.0, 1.0],
            })
            .unwrap()
        })
        .collect()
}

fn desk_config() -> RunConfig {
    RunConfig {
        seed: 20240817,
        threads: None,
        data: DataConfig {
            train_dir: None,
            resample: false,
            target_spacing_mm: [1.0, 1.0, 1.0],
            positives_per_vertebra: 4,
            negatives_per_vertebra: 4,
            subimages_per_vertebra: 2,
            identification_threshold_mm: 20.0,
        },
        cnn_arch: CnnArch {
            sample_dims: [32, 48, 48],
            channels: [4, 6, 8, 10],
            kernel: [3, 3, 3],
            fc_width: 128,
        },
        rnn_arch: BiRnnArch {
            input_width: 128,
            hidden_units: 64,
            num_layers: 2,
        },
        cnn_train: CnnTrainConfig {
            epochs: 14,
            batch_size: 24,
            learning_rate: 0.003,
            lr_decay_factor: 0.4,
            lr_decay_every_iters: 20000,
            weight_decay: 1e-4,
            momentum: 0.9,
            lambda: 0.12,
            seed: 0,
        },
        rnn_train: RnnTrainConfig {
            epochs: 24,
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

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let t0 = Instant::now();
    let train = phantom_corpus(30, 1);
    let test = phantom_corpus(8, 2);
    println!("corpus generated in {:.1?}", t0.elapsed());

    let cfg = desk_config();
    let t1 = Instant::now();
    let trained = train_pipeline(&train, &cfg).unwrap();
    println!(
        "pipeline trained in {:.1?} ({} sequences)",
        t1.elapsed(),
        trained.sequence_count
    );
    for r in &trained.cnn_curve {
        println!(
            "  cnn: id {:.4} loc {:.4} total {:.4}",
            r.id_loss, r.loc_loss, r.total
        );
    }
    for r in trained.rnn_curve.iter().take(3).chain(trained.rnn_curve.iter().rev().take(2).collect::<Vec<_>>().into_iter().rev()) {
        println!(
            "  rnn epoch {}: id {:.4} loc {:.4} total {:.4}",
            r.epoch, r.id_loss, r.loc_loss, r.total
        );
    }

    let t2 = Instant::now();
    let eval = evaluate_corpus(&trained.cnn, &trained.fcn, &trained.birnn, &test, &cfg).unwrap();
    println!("evaluation in {:.1?}", t2.elapsed());
    println!(
        "sample accuracy {:.4}, sample loc err {:.3} mm",
        eval.rnn_report.sample_cls_accuracy.unwrap(),
        eval.rnn_report.sample_loc_error_mm.unwrap()
    );
    println!(
        "CNN-only: id rate {:.4}, loc {:.3} +- {:.3} mm ({}/{} identified, fp {:?})",
        eval.cnn_report.id_rate_all,
        eval.cnn_report.loc_mean_mm,
        eval.cnn_report.loc_std_mm,
        eval.cnn_report.identified,
        eval.cnn_report.gt_count,
        eval.cnn_report.false_positive_labels,
    );
    println!(
        "CNN+BiRNN: id rate {:.4}, loc {:.3} +- {:.3} mm ({}/{} identified, fp {:?})",
        eval.rnn_report.id_rate_all,
        eval.rnn_report.loc_mean_mm,
        eval.rnn_report.loc_std_mm,
        eval.rnn_report.identified,
        eval.rnn_report.gt_count,
        eval.rnn_report.false_positive_labels,
    );
    // Error-structure diagnostics on held-out samples.
    let (eval_samples, _) = spinemark_core::data::generate_cnn_samples(
        &test,
        cfg.cnn_arch.sample_dims,
        cfg.data.positives_per_vertebra,
        cfg.data.negatives_per_vertebra,
        999,
    );
    let preds = spinemark_core::train::predict_samples(&trained.cnn, &eval_samples).unwrap();
    let mut bg_total = 0usize;
    let mut bg_ok = 0usize;
    let mut pos_total = 0usize;
    let mut pos_ok = 0usize;
    let mut dist_hist = [0usize; 5]; // |dlevel| of 0,1,2,3+, pred-bg
    for (p, s) in preds.iter().zip(&eval_samples) {
        if s.target.is_positive() {
            pos_total += 1;
            if p.0 == s.target.label {
                pos_ok += 1;
                dist_hist[0] += 1;
            } else if p.0 == 26 {
                dist_hist[4] += 1;
            } else {
                let d = (p.0 as isize - s.target.label as isize).unsigned_abs();
                dist_hist[d.min(3)] += 1;
            }
        } else {
            bg_total += 1;
            if p.0 == 26 {
                bg_ok += 1;
            }
        }
    }
    println!(
        "diag: bg {bg_ok}/{bg_total}, pos {pos_ok}/{pos_total}, |dlevel| hist [exact, 1, 2, 3+, ->bg] = {dist_hist:?}"
    );
    println!("total {:.1?}", t0.elapsed());
}
