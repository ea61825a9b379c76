//! Linear CKA (centered kernel alignment) between model representations.
//!
//! For activation matrices `X (n x p)` and `Y (n x q)` over the same probe
//! examples, linear CKA is
//!
//! ```text
//! |Y^T X|_F^2 / (|X^T X|_F * |Y^T Y|_F)
//! ```
//!
//! after column-centering both matrices. It lies in `[0, 1]`, is invariant
//! to orthogonal transforms and isotropic scaling of either side, and high
//! values mean the two models carve up the probe set the same way.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{forward_with_taps, register_constants, ModelParams, ModelSpec};

/// A CKA score plus a degenerate-input marker (constant activations give a
/// 0/0 that is reported as zero with the flag set).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CkaValue {
    pub value: Scalar,
    pub degenerate: bool,
}

/// Column-center a matrix in place.
fn center_columns(m: &mut Tensor) {
    let (n, p) = (m.shape()[0], m.shape()[1]);
    for col in 0..p {
        let mut mean = 0.0;
        for row in 0..n {
            mean += m.data()[row * p + col];
        }
        mean /= n as Scalar;
        for row in 0..n {
            m.data_mut()[row * p + col] -= mean;
        }
    }
}

fn frobenius(m: &Tensor) -> Scalar {
    m.data().iter().map(|v| v * v).sum::<Scalar>().sqrt()
}

/// Every column constant: the centered matrix is structurally zero and the
/// CKA ratio would be 0/0 (up to rounding dust from the mean subtraction).
fn is_constant(m: &Tensor) -> bool {
    let (n, p) = (m.shape()[0], m.shape()[1]);
    (0..p).all(|col| {
        let first = m.data()[col];
        (1..n).all(|row| m.data()[row * p + col] == first)
    })
}

/// Linear CKA between two activation matrices with matching row counts.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<CkaValue> {
    if x.rank() != 2 || y.rank() != 2 {
        return Err(Error::contract("linear_cka expects [n, features] activation matrices"));
    }
    if x.shape()[0] != y.shape()[0] {
        return Err(Error::contract(format!(
            "activation matrices disagree on the probe count: {} vs {}",
            x.shape()[0],
            y.shape()[0]
        )));
    }
    if x.shape()[0] < 2 {
        return Err(Error::contract("linear_cka needs at least two probe examples"));
    }
    if is_constant(x) || is_constant(y) {
        return Ok(CkaValue { value: 0.0, degenerate: true });
    }
    let mut xc = x.clone();
    let mut yc = y.clone();
    center_columns(&mut xc);
    center_columns(&mut yc);

    let cross = yc.transposed().matmul(&xc); // [q, p]
    let numerator: Scalar = cross.data().iter().map(|v| v * v).sum();
    let denominator = frobenius(&xc.transposed().matmul(&xc)) * frobenius(&yc.transposed().matmul(&yc));
    if denominator == 0.0 {
        return Ok(CkaValue { value: 0.0, degenerate: true });
    }
    Ok(CkaValue { value: numerator / denominator, degenerate: false })
}

/// Per-layer CKA values between one model pair, plus the overall average.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CkaProfile {
    /// One value per layer of the stack, in layer order.
    pub per_layer: Vec<Scalar>,
    pub degenerate: Vec<bool>,
    /// Mean of the per-layer values.
    pub overall: Scalar,
    pub probe_size: usize,
}

/// Flattened per-layer activations of a model over a probe set: one
/// `[n, features]` matrix per layer of the stack.
pub fn collect_activations(
    spec: &ModelSpec,
    params: &ModelParams,
    probe: &Tensor,
) -> Result<Vec<Tensor>> {
    let n = probe.shape()[0];
    let shapes = spec.layer_output_shapes()?;
    let mut layers: Vec<Vec<Scalar>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(n * s.iter().product::<usize>()))
        .collect();

    // tap every layer regardless of the spec's penalty taps
    let mut all_taps = spec.clone();
    all_taps.tap_layers = (0..spec.layers.len()).collect();

    const CHUNK: usize = 256;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let rows: Vec<Tensor> = (start..end).map(|i| probe.example(i)).collect();
        let chunk = Tensor::stack(&rows);
        let tape = Tape::new();
        let xv = tape.constant(chunk);
        let vars = register_constants(&tape, params);
        let (_, taps) = forward_with_taps(&all_taps, &vars, &xv)?;
        tape.check()?;
        for (layer, tap) in layers.iter_mut().zip(&taps) {
            layer.extend_from_slice(tap.value().data());
        }
        start = end;
    }

    Ok(layers
        .into_iter()
        .zip(&shapes)
        .map(|(data, shape)| {
            let features: usize = shape.iter().product();
            Tensor::from_vec(vec![n, features], data)
        })
        .collect())
}

/// Layer-wise linear CKA between two models sharing a spec, over a probe
/// set `[n, input shape...]`.
pub fn layerwise_cka_profile(
    spec: &ModelSpec,
    params_i: &ModelParams,
    params_j: &ModelParams,
    probe: &Tensor,
) -> Result<CkaProfile> {
    let n = probe.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::contract("cka profile needs at least two probe examples"));
    }
    let acts_i = collect_activations(spec, params_i, probe)?;
    let acts_j = collect_activations(spec, params_j, probe)?;
    let mut per_layer = Vec::with_capacity(acts_i.len());
    let mut degenerate = Vec::with_capacity(acts_i.len());
    for (a, b) in acts_i.iter().zip(&acts_j) {
        let v = linear_cka(a, b)?;
        per_layer.push(v.value);
        degenerate.push(v.degenerate);
    }
    let overall = per_layer.iter().sum::<Scalar>() / per_layer.len() as Scalar;
    Ok(CkaProfile { per_layer, degenerate, overall, probe_size: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rng;

    fn random_matrix(n: usize, p: usize, seed: u64) -> Tensor {
        let mut stream = rng::stream(&[seed, 0x636b61]);
        Tensor::from_vec(vec![n, p], (0..n * p).map(|_| rng::normal(&mut stream)).collect())
    }

    #[test]
    fn self_similarity_is_one() {
        let x = random_matrix(50, 7, 1);
        let v = linear_cka(&x, &x).unwrap();
        assert!(!v.degenerate);
        assert!((v.value - 1.0).abs() < 1e-9, "{}", v.value);
    }

    #[test]
    fn orthogonal_transform_preserves_cka() {
        let x = random_matrix(40, 2, 2);
        // rotation by 0.6 radians
        let (c, s) = (0.6f64.cos() as Scalar, 0.6f64.sin() as Scalar);
        let q = Tensor::from_vec(vec![2, 2], vec![c, -s, s, c]);
        let y = x.matmul(&q);
        let v = linear_cka(&x, &y).unwrap();
        assert!((v.value - 1.0).abs() < 1e-9, "{}", v.value);
    }

    #[test]
    fn isotropic_scaling_preserves_cka() {
        let x = random_matrix(30, 5, 3);
        let y = random_matrix(30, 4, 4);
        let base = linear_cka(&x, &y).unwrap().value;
        let scaled = linear_cka(&x.scale(17.0), &y.scale(0.03)).unwrap().value;
        assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn symmetry() {
        let x = random_matrix(25, 3, 5);
        let y = random_matrix(25, 6, 6);
        let a = linear_cka(&x, &y).unwrap().value;
        let b = linear_cka(&y, &x).unwrap().value;
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn centering_is_idempotent() {
        let mut x = random_matrix(20, 4, 7);
        center_columns(&mut x);
        let once = x.clone();
        center_columns(&mut x);
        for (a, b) in once.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_gaussians_have_low_cka() {
        for seed in 0..5 {
            let x = random_matrix(2000, 16, 100 + seed);
            let y = random_matrix(2000, 16, 200 + seed);
            let v = linear_cka(&x, &y).unwrap().value;
            assert!(v < 0.05, "seed {seed}: {v}");
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn constant_activations_are_degenerate() {
        let x = Tensor::full(&[10, 3], 0.4);
        let y = random_matrix(10, 3, 8);
        let v = linear_cka(&x, &y).unwrap();
        assert_eq!(v.value, 0.0);
        assert!(v.degenerate);
    }

    #[test]
    fn probe_count_mismatch_is_rejected() {
        let x = random_matrix(10, 3, 9);
        let y = random_matrix(11, 3, 10);
        assert!(matches!(linear_cka(&x, &y), Err(Error::Contract(_))));
    }

    #[test]
    fn identical_models_profile_to_all_ones() {
        let spec = ModelSpec::mlp(&[2, 6, 4, 2], Activation::Tanh);
        let params = ModelParams::init(&spec, 9);
        let probe = crate::data::synth_two_moons(64, 0.1, 3).inputs;
        let profile = layerwise_cka_profile(&spec, &params, &params, &probe).unwrap();
        assert_eq!(profile.per_layer.len(), 3);
        assert_eq!(profile.probe_size, 64);
        for v in &profile.per_layer {
            assert!((v - 1.0).abs() < 1e-9);
        }
        assert!((profile.overall - 1.0).abs() < 1e-9);
    }

    #[test]
    fn overall_is_the_mean_of_layers() {
        let spec = ModelSpec::mlp(&[2, 5, 3, 2], Activation::Relu);
        let a = ModelParams::init(&spec, 1);
        let b = ModelParams::init(&spec, 2);
        let probe = crate::data::synth_two_moons(48, 0.1, 5).inputs;
        let profile = layerwise_cka_profile(&spec, &a, &b, &probe).unwrap();
        let mean = profile.per_layer.iter().sum::<Scalar>() / profile.per_layer.len() as Scalar;
        assert!((profile.overall - mean).abs() < 1e-12);
        for v in &profile.per_layer {
            assert!((-1e-9..=1.0 + 1e-9).contains(v), "{v}");
        }
    }
}
