//! Layer-stack models with per-layer output taps.
//!
//! A `ModelSpec` describes an ordered stack of dense/conv/flatten/avgpool
//! layers plus the indices of the layers whose post-activation outputs are
//! exposed ("taps"). Taps are what the pairwise diversity penalty consumes:
//! the gradient of a tap's feature sum with respect to the input.

pub mod adam;
pub mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, GradRequest, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_params, save_params, spec_digest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { input: usize, output: usize, activation: Activation },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    Flatten,
    /// Global spatial average: `[b, c, h, w] -> [b, c]`.
    AvgPool,
}

/// Architecture description: layer stack, class count, and tap layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Per-example input shape, e.g. `[2]` for 2-D points or `[c, h, w]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    /// Strictly increasing layer indices whose outputs are exposed.
    pub tap_layers: Vec<usize>,
}

impl ModelSpec {
    /// Fully-connected stack `dims[0] -> ... -> dims.last()`, hidden layers
    /// using `activation`, identity on the output layer. All hidden layers
    /// are tapped.
    pub fn mlp(dims: &[usize], activation: Activation) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            layers.push(LayerSpec::Dense { input: w[0], output: w[1], activation });
        }
        if let Some(LayerSpec::Dense { activation, .. }) = layers.last_mut() {
            *activation = Activation::Identity;
        }
        let hidden = layers.len() - 1;
        ModelSpec {
            input_shape: vec![dims[0]],
            layers,
            num_classes: *dims.last().unwrap(),
            tap_layers: (0..hidden).collect(),
        }
    }

    /// Small conv stack: `convs` conv layers (3x3, stride 1, pad 1) over
    /// `channels`, then global average pooling and a dense classifier.
    /// All conv layers are tapped.
    pub fn small_conv(input_shape: &[usize], channels: &[usize], num_classes: usize) -> Self {
        assert_eq!(input_shape.len(), 3, "conv input shape must be [c, h, w]");
        assert!(!channels.is_empty(), "need at least one conv layer");
        let mut layers = Vec::new();
        let mut in_ch = input_shape[0];
        for &out_ch in channels {
            layers.push(LayerSpec::Conv2d {
                in_channels: in_ch,
                out_channels: out_ch,
                kernel: 3,
                stride: 1,
                padding: 1,
                activation: Activation::Relu,
            });
            in_ch = out_ch;
        }
        let taps = (0..channels.len()).collect();
        layers.push(LayerSpec::AvgPool);
        layers.push(LayerSpec::Dense {
            input: in_ch,
            output: num_classes,
            activation: Activation::Identity,
        });
        ModelSpec { input_shape: input_shape.to_vec(), layers, num_classes, tap_layers: taps }
    }

    pub fn tap_count(&self) -> usize {
        self.tap_layers.len()
    }

    /// Per-example output shape of every layer, in order. Errors if the
    /// stack does not compose.
    pub fn layer_output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                LayerSpec::Dense { input, output, .. } => {
                    if shape != vec![*input] {
                        return Err(Error::contract(format!(
                            "layer {i}: dense expects flat input [{input}], got {shape:?}"
                        )));
                    }
                    vec![*output]
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding, .. } => {
                    if shape.len() != 3 || shape[0] != *in_channels {
                        return Err(Error::contract(format!(
                            "layer {i}: conv expects [{in_channels}, h, w], got {shape:?}"
                        )));
                    }
                    let (h, w) = (shape[1], shape[2]);
                    if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                        return Err(Error::contract(format!(
                            "layer {i}: kernel {kernel} larger than padded {h}x{w} input"
                        )));
                    }
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w + 2 * padding - kernel) / stride + 1;
                    vec![*out_channels, oh, ow]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::AvgPool => {
                    if shape.len() != 3 {
                        return Err(Error::contract(format!(
                            "layer {i}: avgpool expects [c, h, w], got {shape:?}"
                        )));
                    }
                    vec![shape[0]]
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::contract("model has no layers"));
        }
        let shapes = self.layer_output_shapes()?;
        let final_shape = shapes.last().unwrap();
        if final_shape != &vec![self.num_classes] {
            return Err(Error::contract(format!(
                "final layer produces {final_shape:?}, expected [{}] logits",
                self.num_classes
            )));
        }
        let mut prev = None;
        for &t in &self.tap_layers {
            if t >= self.layers.len() {
                return Err(Error::contract(format!("tap layer {t} out of range")));
            }
            if let Some(p) = prev {
                if t <= p {
                    return Err(Error::contract("tap layers must be strictly increasing"));
                }
            }
            prev = Some(t);
        }
        Ok(())
    }

    /// Flattened per-example input size.
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Dense { weight: Tensor, bias: Tensor },
    Conv2d { weight: Tensor, bias: Tensor },
    None,
}

/// Trainable parameters for a `ModelSpec`, plus the seed they were drawn
/// from. The seed is provenance metadata; checkpoints do not persist it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
    pub init_seed: u64,
}

impl ModelParams {
    /// Glorot-uniform initialization: weights uniform in
    /// `±sqrt(6 / (fan_in + fan_out))`, biases uniform in `±1/sqrt(fan_in)`
    /// (randomized biases keep relu units alive on the non-negative input
    /// range and break symmetry). Deterministic per seed.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let mut stream = rng::stream(&[seed, i as u64, 0x706172616d]);
            let lp = match layer {
                LayerSpec::Dense { input, output, .. } => {
                    let limit = (6.0 / (input + output) as f64).sqrt() as Scalar;
                    let data = (0..input * output)
                        .map(|_| rng::uniform(&mut stream, -limit, limit))
                        .collect();
                    let b_limit = (1.0 / *input as f64).sqrt() as Scalar;
                    let bias = (0..*output)
                        .map(|_| rng::uniform(&mut stream, -b_limit, b_limit))
                        .collect();
                    LayerParams::Dense {
                        weight: Tensor::from_vec(vec![*input, *output], data),
                        bias: Tensor::from_vec(vec![*output], bias),
                    }
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                    let fan_in = in_channels * kernel * kernel;
                    let fan_out = out_channels * kernel * kernel;
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as Scalar;
                    let count = out_channels * in_channels * kernel * kernel;
                    let data =
                        (0..count).map(|_| rng::uniform(&mut stream, -limit, limit)).collect();
                    let b_limit = (1.0 / fan_in as f64).sqrt() as Scalar;
                    let bias = (0..*out_channels)
                        .map(|_| rng::uniform(&mut stream, -b_limit, b_limit))
                        .collect();
                    LayerParams::Conv2d {
                        weight: Tensor::from_vec(
                            vec![*out_channels, *in_channels, *kernel, *kernel],
                            data,
                        ),
                        bias: Tensor::from_vec(vec![*out_channels], bias),
                    }
                }
                LayerSpec::Flatten | LayerSpec::AvgPool => LayerParams::None,
            };
            layers.push(lp);
        }
        ModelParams { layers, init_seed: seed }
    }

    /// References to all parameter tensors in canonical order
    /// (layer-major, weight before bias).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerParams::Dense { weight, bias } | LayerParams::Conv2d { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                LayerParams::Dense { weight, bias } | LayerParams::Conv2d { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn validate_for(&self, spec: &ModelSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::contract(format!(
                "params have {} layers, spec has {}",
                self.layers.len(),
                spec.layers.len()
            )));
        }
        for (i, (lp, ls)) in self.layers.iter().zip(&spec.layers).enumerate() {
            let ok = match (lp, ls) {
                (LayerParams::Dense { weight, bias }, LayerSpec::Dense { input, output, .. }) => {
                    weight.shape() == [*input, *output] && bias.shape() == [*output]
                }
                (
                    LayerParams::Conv2d { weight, bias },
                    LayerSpec::Conv2d { in_channels, out_channels, kernel, .. },
                ) => {
                    weight.shape() == [*out_channels, *in_channels, *kernel, *kernel]
                        && bias.shape() == [*out_channels]
                }
                (LayerParams::None, LayerSpec::Flatten | LayerSpec::AvgPool) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::contract(format!("layer {i} params do not match spec")));
            }
            for t in self.layers[i..=i].iter().flat_map(layer_tensors) {
                if !t.is_all_finite() {
                    return Err(Error::numeric(format!("layer {i} parameters are non-finite")));
                }
            }
        }
        Ok(())
    }
}

fn layer_tensors(layer: &LayerParams) -> Vec<&Tensor> {
    match layer {
        LayerParams::Dense { weight, bias } | LayerParams::Conv2d { weight, bias } => {
            vec![weight, bias]
        }
        LayerParams::None => vec![],
    }
}

/// Parameters registered on a tape, layer by layer.
pub struct ModelVars {
    pub layers: Vec<Option<(Var, Var)>>,
}

impl ModelVars {
    /// All parameter vars in the same canonical order as
    /// `ModelParams::tensors`.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for layer in self.layers.iter().flatten() {
            out.push(layer.0.clone());
            out.push(layer.1.clone());
        }
        out
    }
}

/// Register parameters as differentiable leaves (training).
pub fn register_params(tape: &Tape, params: &ModelParams) -> ModelVars {
    register(tape, params, true)
}

/// Register parameters as constants (inference / attack targets).
pub fn register_constants(tape: &Tape, params: &ModelParams) -> ModelVars {
    register(tape, params, false)
}

fn register(tape: &Tape, params: &ModelParams, trainable: bool) -> ModelVars {
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        layers.push(match layer {
            LayerParams::Dense { weight, bias } | LayerParams::Conv2d { weight, bias } => {
                if trainable {
                    Some((tape.input(weight.clone()), tape.input(bias.clone())))
                } else {
                    Some((tape.constant(weight.clone()), tape.constant(bias.clone())))
                }
            }
            LayerParams::None => None,
        });
    }
    ModelVars { layers }
}

fn apply_activation(v: Var, activation: Activation) -> Var {
    match activation {
        Activation::Identity => v,
        Activation::Relu => v.relu(),
        Activation::Tanh => v.tanh(),
    }
}

/// Forward pass over a batch, returning the logits and the post-activation
/// outputs of every tap layer, in tap order.
///
/// `x` is `[batch, input_shape...]` on the same tape as `vars`.
pub fn forward_with_taps(
    spec: &ModelSpec,
    vars: &ModelVars,
    x: &Var,
) -> Result<(Var, Vec<Var>)> {
    let x_shape = x.shape();
    if x_shape.len() != spec.input_shape.len() + 1 || x_shape[1..] != spec.input_shape[..] {
        return Err(Error::contract(format!(
            "input batch shape {x_shape:?} does not match spec input {:?}",
            spec.input_shape
        )));
    }
    let batch = x_shape[0];
    let mut cur = x.clone();
    let mut taps = Vec::with_capacity(spec.tap_layers.len());
    let mut next_tap = spec.tap_layers.iter().peekable();
    for (i, layer) in spec.layers.iter().enumerate() {
        cur = match (layer, &vars.layers[i]) {
            (LayerSpec::Dense { activation, .. }, Some((w, b))) => {
                let y = cur.matmul(w).add(&b.repeat_axis0(batch));
                apply_activation(y, *activation)
            }
            (
                LayerSpec::Conv2d { out_channels, kernel, stride, padding, activation, .. },
                Some((w, b)),
            ) => {
                let in_shape = cur.shape();
                let (h, w_dim) = (in_shape[2], in_shape[3]);
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w_dim + 2 * padding - kernel) / stride + 1;
                let cols = cur.unfold(*kernel, *stride, *padding);
                let rows = cols.shape()[0];
                let patch = cols.shape()[1];
                let w_mat = w.reshape(&[*out_channels, patch]).transpose();
                let y = cols.matmul(&w_mat).add(&b.repeat_axis0(rows));
                let y = y.reshape(&[batch, oh, ow, *out_channels]).permute(&[0, 3, 1, 2]);
                apply_activation(y, *activation)
            }
            (LayerSpec::Flatten, None) => {
                let flat: usize = cur.shape()[1..].iter().product();
                cur.reshape(&[batch, flat])
            }
            (LayerSpec::AvgPool, None) => {
                let s = cur.shape();
                let (c, h, w_dim) = (s[1], s[2], s[3]);
                cur.reshape(&[batch * c, h * w_dim])
                    .sum_axis1()
                    .scale(1.0 / (h * w_dim) as Scalar)
                    .reshape(&[batch, c])
            }
            _ => return Err(Error::contract(format!("layer {i}: params do not match spec"))),
        };
        if next_tap.peek() == Some(&&i) {
            taps.push(cur.clone());
            next_tap.next();
        }
    }
    Ok((cur, taps))
}

/// Gradient, with respect to the input, of the feature sum of tap `k`.
///
/// `x` is a batch `[b, input_shape...]`; rows of the result are the
/// per-example gradients (examples are independent, so one backward pass
/// over the batch-and-feature sum recovers all of them at once).
pub fn layer_input_gradient(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor,
    k: usize,
) -> Result<Tensor> {
    if k >= spec.tap_count() {
        return Err(Error::contract(format!(
            "tap index {k} out of range ({} taps)",
            spec.tap_count()
        )));
    }
    let tape = Tape::new();
    let xv = tape.input(x.clone());
    let vars = register_constants(&tape, params);
    let (_, taps) = forward_with_taps(spec, &vars, &xv)?;
    let summed = taps[k].sum_all();
    let g = grad(&GradRequest { output: summed, wrt: vec![xv], create_graph: false })?;
    Ok(g[0].value())
}
