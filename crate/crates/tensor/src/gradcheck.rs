//! Central finite-difference oracle for checking reverse-mode gradients.
//!
//! The oracle only evaluates the forward function; it never reads the
//! gradients produced by [`crate::Tensor::backward`].

use crate::tensor::Tensor;

/// Central differences of `f` with respect to every entry of `param`,
/// restoring the original values afterwards. `f` must be deterministic (replay
/// any random stream inside it).
pub fn numerical_grad(param: &Tensor<f64>, h: f64, mut f: impl FnMut() -> f64) -> Vec<f64> {
    let base = param.to_vec();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        param.set_data(plus).expect("perturbed value is finite");
        let fp = f();
        let mut minus = base.clone();
        minus[i] -= h;
        param.set_data(minus).expect("perturbed value is finite");
        let fm = f();
        out.push((fp - fm) / (2.0 * h));
    }
    param.set_data(base).expect("original value is finite");
    out
}

/// Like [`numerical_grad`] but only for the listed flat indices.
pub fn numerical_grad_at(param: &Tensor<f64>, indices: &[usize], h: f64, mut f: impl FnMut() -> f64) -> Vec<f64> {
    let base = param.to_vec();
    let out = indices
        .iter()
        .map(|&i| {
            let mut plus = base.clone();
            plus[i] += h;
            param.set_data(plus).expect("perturbed value is finite");
            let fp = f();
            let mut minus = base.clone();
            minus[i] -= h;
            param.set_data(minus).expect("perturbed value is finite");
            let fm = f();
            (fp - fm) / (2.0 * h)
        })
        .collect();
    param.set_data(base).expect("original value is finite");
    out
}

/// Largest entrywise discrepancy, normalised by the largest reference
/// magnitude (floored at `floor` so all-zero gradients compare absolutely).
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric
        .iter()
        .chain(analytic)
        .fold(floor, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}
