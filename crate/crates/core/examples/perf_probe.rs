//! Timing probe for the training hot path.
//! cargo run --release -p spinemark-core --example perf_probe

use std::time::Instant;

use spinemark_core::losses::id_loss_grad_wrt_logits;
use spinemark_core::net::{build_cnn, cnn_backward, cnn_forward_cached, CnnArch};
use spinemark_core::ops::kernels;
use spinemark_core::test_util::seeded_tensor;

fn main() {
    // Raw kernel throughput.
    let a = seeded_tensor(&[1 << 16], 1);
    let b = seeded_tensor(&[1 << 16], 2);
    let mut dst = vec![0.0; 1 << 16];
    let t = Instant::now();
    let reps = 2000;
    let mut sink = 0.0;
    for i in 0..reps {
        sink += kernels::dot(a.data(), b.data());
        kernels::axpy(&mut dst, a.data(), 1.0 + i as f64 * 1e-9);
    }
    let flops = reps as f64 * 2.0 * 2.0 * (1 << 16) as f64;
    println!(
        "kernels (streaming): {:.2} GFLOP/s (sink {sink:.3}, {:.3})",
        flops / t.elapsed().as_secs_f64() / 1e9,
        dst[7]
    );
    // L1-resident rows, the conv regime.
    let small_a = seeded_tensor(&[64], 5);
    let small_b = seeded_tensor(&[64], 6);
    let t = Instant::now();
    let reps2 = 3_000_000u64;
    let mut sink2 = 0.0;
    for _ in 0..reps2 {
        sink2 += kernels::dot(std::hint::black_box(small_a.data()), std::hint::black_box(small_b.data()));
    }
    println!(
        "kernels (L1 dot, len 64): {:.2} GFLOP/s (sink {sink2:.3})",
        reps2 as f64 * 2.0 * 64.0 / t.elapsed().as_secs_f64() / 1e9
    );

    let arch = CnnArch {
        sample_dims: [32, 64, 64],
        channels: [4, 6, 8, 10],
        kernel: [3, 3, 3],
        fc_width: 128,
    };
    let params = build_cnn(&arch, 3).unwrap();
    let sample = seeded_tensor(&[1, 32, 64, 64], 4);

    let n = 20;
    let t = Instant::now();
    for _ in 0..n {
        let out = spinemark_core::net::cnn_forward(&params, &sample).unwrap();
        std::hint::black_box(&out);
    }
    println!("cnn fwd only: {:.1} ms/sample", t.elapsed().as_secs_f64() / n as f64 * 1e3);

    let t = Instant::now();
    for _ in 0..n {
        let cache = cnn_forward_cached(&params, &sample).unwrap();
        std::hint::black_box(&cache.output.logits);
    }
    println!("cnn fwd cached: {:.1} ms/sample", t.elapsed().as_secs_f64() / n as f64 * 1e3);

    let cache = cnn_forward_cached(&params, &sample).unwrap();
    let (_, d_logits) = id_loss_grad_wrt_logits(&cache.output.logits, 3);
    let t = Instant::now();
    for _ in 0..n {
        let grads = cnn_backward(&params, &cache, &d_logits, &[0.1, 0.1, 0.1]).unwrap();
        std::hint::black_box(&grads);
    }
    println!("cnn bwd only: {:.1} ms/sample", t.elapsed().as_secs_f64() / n as f64 * 1e3);

    // Individual convs, forward.
    use spinemark_core::ops::{conv3d, Padding};
    let shapes: [(usize, usize, [usize;3]); 4] = [
        (1, 4, [32, 64, 64]),
        (4, 6, [16, 32, 32]),
        (6, 8, [8, 16, 16]),
        (8, 10, [4, 8, 8]),
    ];
    for (ci, co, dims) in shapes {
        let x = seeded_tensor(&[ci, dims[0], dims[1], dims[2]], 9);
        let k = seeded_tensor(&[co, ci, 3, 3, 3], 10);
        let b = seeded_tensor(&[co], 11);
        let t = Instant::now();
        let reps = 50;
        for _ in 0..reps {
            std::hint::black_box(conv3d(&x, &k, &b, 1, Padding::Same).unwrap());
        }
        let per = t.elapsed().as_secs_f64() / reps as f64;
        let mflop = (ci * co * 27 * dims.iter().product::<usize>()) as f64 * 2.0 / 1e6;
        println!("conv {ci}->{co} {dims:?}: {:.2} ms ({:.2} GFLOP/s)", per * 1e3, mflop / 1e3 / per);
    }
}
