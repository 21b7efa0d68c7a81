//! Support code for the test suites: seeded random tensors and the central
//! finite-difference gradient checker. Not used by any production path.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub fn seeded_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}

/// Relative tolerance for gradient checks: |a - n| <= tol * max(|a|, |n|, 1).
#[derive(Clone, Copy)]
pub struct RelTol(pub f64);

pub fn rel_close(analytic: f64, numeric: f64, tol: RelTol) -> bool {
    let scale = analytic.abs().max(numeric.abs()).max(1.0);
    (analytic - numeric).abs() <= tol.0 * scale
}

/// Checks every entry of `analytic` against a central finite difference of
/// `loss` with respect to the matching entry of `operand` (h = 1e-5).
/// Returns the number of probes performed.
pub fn fd_check(
    operand: &Tensor,
    analytic: &Tensor,
    tol: RelTol,
    loss: impl Fn(&Tensor) -> f64,
) -> usize {
    assert_eq!(operand.shape(), analytic.shape());
    let h = 1e-5;
    let mut probes = 0;
    for i in 0..operand.len() {
        let mut plus = operand.clone();
        plus.data_mut()[i] += h;
        let mut minus = operand.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let a = analytic.data()[i];
        assert!(
            rel_close(a, numeric, tol),
            "gradient mismatch at index {i}: analytic {a}, numeric {numeric}"
        );
        probes += 1;
    }
    probes
}
