//! Tensor arithmetic and tape-based reverse-mode differentiation.
//!
//! Gradients computed with `create_graph` are recorded back onto the tape,
//! so mixed second-order terms (parameter gradients of input gradients) come
//! out of the same machinery. See [`tape`] for the op set and conventions.

pub mod tape;
pub mod tensor;

pub use tape::{grad, ConvDims, Fault, GradRequest, Tape, Var};
pub use tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Stable per-example softmax cross-entropy: `[b, classes] -> [b]`.
///
/// Phrased as `logsumexp(z) - z[label]` with a detached row-max shift, which
/// keeps the expression finite and differentiable to any order.
pub fn softmax_crossentropy(logits: &Var, labels: &[usize]) -> Var {
    let shape = logits.shape();
    assert_eq!(shape.len(), 2, "softmax_crossentropy needs [batch, classes] logits");
    let (batch, classes) = (shape[0], shape[1]);
    assert_eq!(labels.len(), batch, "labels length {} vs batch {batch}", labels.len());
    let tape = logits.tape();

    let row_max = {
        let v = logits.value();
        let data = (0..batch)
            .map(|i| v.row(i).iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max))
            .collect();
        tape.constant(Tensor::from_vec(vec![batch], data))
    };
    let shifted = logits.sub(&row_max.repeat_axis1(classes));
    let log_sum = shifted.exp().sum_axis1().log().add(&row_max);
    log_sum.sub(&logits.gather(labels))
}

/// Softmax probabilities in value space (no gradient), row-wise.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    assert_eq!(logits.rank(), 2, "softmax_rows needs rank 2");
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![0.0; batch * classes];
    for i in 0..batch {
        let row = logits.row(i);
        let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let mut sum = 0.0;
        for (j, &z) in row.iter().enumerate() {
            let e = (z - max).exp();
            out[i * classes + j] = e;
            sum += e;
        }
        for v in &mut out[i * classes..(i + 1) * classes] {
            *v /= sum;
        }
    }
    Tensor::from_vec(vec![batch, classes], out)
}

/// Central finite differences of a scalar function, one coordinate at a time:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// Forward-only, so it is independent of the backward pass it is used to
/// check.
pub fn finite_difference<F>(mut f: F, point: &Tensor, h: Scalar) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Scalar>,
{
    if h <= 0.0 {
        return Err(Error::contract(format!("finite difference step must be positive, got {h}")));
    }
    let mut out = Tensor::zeros(point.shape());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let center = point.data()[i];
        probe.data_mut()[i] = center + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = center - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = center;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric(format!(
                "finite difference probe at coordinate {i} produced a non-finite value"
            )));
        }
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_of_square_is_two_x() {
        // f(x) = x^2 at x = 3 with h = 1e-5 -> 6 within 1e-8
        let f = |t: &Tensor| Ok(t.data()[0] * t.data()[0]);
        let g = finite_difference(f, &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8, "{}", g.item());
    }

    #[test]
    fn finite_difference_of_sum_is_all_ones() {
        let f = |t: &Tensor| Ok(t.sum());
        let x = Tensor::from_vec(vec![4], vec![0.3, -0.7, 2.0, 5.5]);
        let g = finite_difference(f, &x, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_difference_rejects_bad_step() {
        let err = finite_difference(|t| Ok(t.sum()), &Tensor::scalar(1.0), 0.0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn finite_difference_flags_non_finite_probe() {
        let f = |t: &Tensor| Ok(t.data()[0].ln());
        let err = finite_difference(f, &Tensor::scalar(0.0), 1e-3).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_classes() {
        let tape = Tape::new();
        let logits = tape.input(Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]));
        let ce = softmax_crossentropy(&logits, &[0]);
        assert!((ce.value().item() - (2.0 as Scalar).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let tape = Tape::new();
        let logits = tape.input(Tensor::from_vec(vec![2, 3], vec![1.0, -0.5, 0.25, 0.0, 2.0, -1.0]));
        let ce = softmax_crossentropy(&logits, &[2, 0]).sum_all();
        let g = grad(&GradRequest { output: ce, wrt: vec![logits.clone()], create_graph: false })
            .unwrap()[0]
            .value();
        let probs = softmax_rows(&logits.value());
        for i in 0..2 {
            for j in 0..3 {
                let expect = probs.row(i)[j] - if (i == 0 && j == 2) || (i == 1 && j == 0) { 1.0 } else { 0.0 };
                assert!((g.row(i)[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_matches_finite_difference_on_tanh_net() {
        // f(W, x) = sum(tanh(x W)) on fixed small values, checked per input
        // coordinate against the forward-only oracle.
        let w0 = Tensor::from_vec(vec![2, 3], vec![0.2, -0.4, 0.7, 1.1, -0.3, 0.5]);
        let x0 = Tensor::from_vec(vec![1, 2], vec![0.9, -1.2]);

        let eval = |x: &Tensor, w: &Tensor| -> Scalar {
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            xv.matmul(&wv).tanh().sum_all().value().item()
        };

        let tape = Tape::new();
        let x = tape.input(x0.clone());
        let w = tape.input(w0.clone());
        let f = x.matmul(&w).tanh().sum_all();
        let grads = grad(&GradRequest {
            output: f,
            wrt: vec![x, w],
            create_graph: false,
        })
        .unwrap();

        let fd_x = finite_difference(|p| Ok(eval(p, &w0)), &x0, 1e-5).unwrap();
        let fd_w = finite_difference(|p| Ok(eval(&x0, p)), &w0, 1e-5).unwrap();
        for (got, want) in grads[0].value().data().iter().zip(fd_x.data()) {
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
        }
        for (got, want) in grads[1].value().data().iter().zip(fd_w.data()) {
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_per_example_gradients() {
        let w = Tensor::from_vec(vec![2, 2], vec![0.3, -0.2, 0.8, 0.5]);
        let xs = Tensor::from_vec(vec![3, 2], vec![0.1, 0.9, -0.4, 0.2, 1.3, -0.7]);

        let batch_grad = {
            let tape = Tape::new();
            let wv = tape.input(w.clone());
            let xv = tape.constant(xs.clone());
            let f = xv.matmul(&wv).tanh().sum_all();
            grad(&GradRequest { output: f, wrt: vec![wv], create_graph: false }).unwrap()[0].value()
        };

        let mut acc = Tensor::zeros(&[2, 2]);
        for i in 0..3 {
            let tape = Tape::new();
            let wv = tape.input(w.clone());
            let xv = tape.constant(xs.example(i).reshaped(&[1, 2]));
            let f = xv.matmul(&wv).tanh().sum_all();
            let g = grad(&GradRequest { output: f, wrt: vec![wv], create_graph: false }).unwrap()
                [0]
            .value();
            acc = acc.add(&g);
        }
        for (a, b) in batch_grad.data().iter().zip(acc.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
