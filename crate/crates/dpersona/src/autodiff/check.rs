//! Finite-difference oracles for gradient verification.
//!
//! These helpers evaluate a scalar function at perturbed inputs only; they
//! never touch the tape's backward pass, so they stay an independent check
//! of it.

use ndarray::ArrayD;

/// Central finite differences of `f` with respect to every element of every
/// input array, using step `h`.
pub fn central_diff(
    inputs: &[ArrayD<f64>],
    h: f64,
    mut f: impl FnMut(&[ArrayD<f64>]) -> f64,
) -> Vec<ArrayD<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = ArrayD::<f64>::zeros(inputs[i].raw_dim());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[j] -= h;
            grad.as_slice_mut().unwrap()[j] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// Largest relative error between analytic and numeric gradients, with an
/// absolute floor so near-zero entries compare on absolute error.
pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
