//! Adam optimizer with bias correction.

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

use super::ModelParams;

/// Per-parameter first/second moment estimates plus hyperparameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: Scalar,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
    /// Completed steps.
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: Scalar, beta1: Scalar, beta2: Scalar, eps: Scalar) -> Self {
        let shapes: Vec<_> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// lr with the usual 0.9 / 0.999 / 1e-8 defaults.
    pub fn with_lr(params: &ModelParams, lr: Scalar) -> Self {
        AdamState::new(params, lr, 0.9, 0.999, 1e-8)
    }
}

/// One Adam update. `grads` must be in the canonical parameter order
/// (`ModelParams::tensors`). Non-finite gradients abort the step with the
/// parameters untouched.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    {
        let tensors = params.tensors();
        if tensors.len() != grads.len() {
            return Err(Error::contract(format!(
                "adam_step got {} gradients for {} parameter tensors",
                grads.len(),
                tensors.len()
            )));
        }
        for (i, (p, g)) in tensors.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::contract(format!(
                    "gradient {i} shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_all_finite() {
                return Err(Error::numeric(format!("non-finite gradient for parameter tensor {i}")));
            }
        }
    }

    let t = state.step + 1;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    for (i, p) in params.tensors_mut().into_iter().enumerate() {
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for ((pv, gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = state.beta1 * *mv + (1.0 - state.beta1) * gv;
            *vv = state.beta2 * *vv + (1.0 - state.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerParams, ModelSpec};

    fn scalar_param(w: Scalar) -> ModelParams {
        ModelParams {
            layers: vec![LayerParams::Dense {
                weight: Tensor::from_vec(vec![1, 1], vec![w]),
                bias: Tensor::zeros(&[1]),
            }],
            init_seed: 0,
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = scalar_param(1.5);
        let before = params.clone();
        let mut state = AdamState::with_lr(&params, 0.001);
        let grads = vec![Tensor::zeros(&[1, 1]), Tensor::zeros(&[1])];
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_matches_reference_formula() {
        // w = 1, g = 1, lr = 0.001, betas (0.9, 0.999), eps = 1e-8:
        // m_hat = 1, v_hat = 1, so w' = 1 - 0.001 / (1 + 1e-8).
        let mut params = scalar_param(1.0);
        let mut state = AdamState::new(&params, 0.001, 0.9, 0.999, 1e-8);
        let grads = vec![Tensor::from_vec(vec![1, 1], vec![1.0]), Tensor::zeros(&[1])];
        adam_step(&mut params, &grads, &mut state).unwrap();

        let m = 0.1;
        let v = 0.001;
        let m_hat = m / (1.0 - 0.9);
        let v_hat: Scalar = v / (1.0 - 0.999);
        let expect = 1.0 - 0.001 * m_hat / (v_hat.sqrt() + 1e-8);
        let got = params.tensors()[0].data()[0];
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
        assert!((got - 0.999).abs() < 1e-8);
    }

    #[test]
    fn repeated_identical_gradients_descend_monotonically() {
        let mut params = scalar_param(1.0);
        let mut state = AdamState::with_lr(&params, 0.01);
        let grads = vec![Tensor::from_vec(vec![1, 1], vec![2.0]), Tensor::zeros(&[1])];
        let mut prev = params.tensors()[0].data()[0];
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut state).unwrap();
            let cur = params.tensors()[0].data()[0];
            assert!(cur < prev, "positive gradient must move the weight down");
            prev = cur;
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        let spec = ModelSpec::mlp(&[2, 3, 2], Activation::Relu);
        let mut params = ModelParams::init(&spec, 4);
        let before = params.clone();
        let mut state = AdamState::with_lr(&params, 0.0);
        let grads: Vec<Tensor> =
            params.tensors().iter().map(|t| Tensor::ones(&t.shape().to_vec())).collect();
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn non_finite_gradient_is_a_numeric_fault() {
        let mut params = scalar_param(1.0);
        let before = params.clone();
        let mut state = AdamState::with_lr(&params, 0.001);
        let grads =
            vec![Tensor::from_vec(vec![1, 1], vec![Scalar::NAN]), Tensor::zeros(&[1])];
        let err = adam_step(&mut params, &grads, &mut state).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(params, before, "failed step must not touch parameters");
        assert_eq!(state.step, 0);
    }
}
