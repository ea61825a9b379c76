//! Pairwise input-gradient diversity objective and the joint training step.
//!
//! For every pair of ensemble members the objective penalizes the cosine
//! similarity between the members' per-layer input gradients: for tap layer
//! `k` and example `x`, the gradient of the feature sum of the tap with
//! respect to `x`. Summing those cosines over the first `H` taps and
//! averaging over the batch gives the pair penalty `R`; the full objective
//! is
//!
//! ```text
//! gamma1 * sum_i mean_x CE_i(x, y)  +  gamma2 * sum_{i<j} R(i, j)
//! ```
//!
//! Minimizing the second term pushes members' gradients apart, which is the
//! diversity mechanism. `R` ranges over `[-H, H]`; dashboards usually want
//! the per-layer-mean `R / H` in `[-1, 1]`.
//!
//! The input gradients are computed with `create_graph`, so the final
//! backward pass differentiates through them (mixed second order). Each
//! member's gradients are computed once per step and reused across all of
//! its pairs: `N * H` input-gradient backward passes, not `N^2 * H`.

use crate::autodiff::{grad, softmax_crossentropy, GradRequest, Scalar, Tape, Tensor, Var};
use crate::ensemble::EnsembleHandle;
use crate::error::{Error, Result};
use crate::nn::{
    adam_step, forward_with_taps, register_constants, register_params, AdamState, ModelParams,
    ModelSpec, ModelVars,
};

/// Weights and scope of the pairwise objective.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParlConfig {
    /// Weight of the summed cross-entropy term.
    pub gamma1: Scalar,
    /// Weight of the pairwise penalty term; zero disables diversity training.
    pub gamma2: Scalar,
    /// Number of leading tap layers the penalty restricts (H).
    pub tap_count: usize,
    /// Guard added to gradient norms so zero gradients (dead relu layers)
    /// keep the loss finite and differentiable.
    pub cosine_eps: Scalar,
}

impl ParlConfig {
    pub fn new(gamma1: Scalar, gamma2: Scalar, tap_count: usize) -> Self {
        ParlConfig { gamma1, gamma2, tap_count, cosine_eps: 1e-12 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return Err(Error::config("gamma weights must be non-negative"));
        }
        if self.cosine_eps <= 0.0 {
            return Err(Error::config("cosine_eps must be positive"));
        }
        Ok(())
    }
}

/// Penalty of one member pair: the batch-mean cosine sum `R` plus the
/// per-layer mean cosines it decomposes into.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PairPenalty {
    pub i: usize,
    pub j: usize,
    /// Batch mean of the per-example sum over the first H layer cosines;
    /// ranges over [-H, H].
    pub r: Scalar,
    /// Batch mean of the cosine at each restricted layer; each in [-1, 1].
    pub layer_means: Vec<Scalar>,
}

impl PairPenalty {
    /// `R / H`, the per-layer-normalized penalty in [-1, 1].
    pub fn r_normalized(&self) -> Scalar {
        if self.layer_means.is_empty() {
            0.0
        } else {
            self.r / self.layer_means.len() as Scalar
        }
    }
}

/// Pre-step penalty values for every pair, as measured on the step's batch.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PenaltyReport {
    pub pairs: Vec<PairPenalty>,
    pub tap_count: usize,
    pub batch_size: usize,
}

impl PenaltyReport {
    /// Mean over pairs of `R / H`.
    pub fn mean_r_normalized(&self) -> Scalar {
        if self.pairs.is_empty() || self.tap_count == 0 {
            return 0.0;
        }
        let sum: Scalar = self.pairs.iter().map(|p| p.r_normalized()).sum();
        sum / self.pairs.len() as Scalar
    }
}

/// What one training step saw and did.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub penalty: PenaltyReport,
    /// Value of the full objective before the update.
    pub objective: Scalar,
    /// Unweighted `sum_i mean_x CE_i`.
    pub cross_entropy_sum: Scalar,
    /// Unweighted `sum_{i<j} R(i, j)`.
    pub penalty_sum: Scalar,
    /// Input-gradient backward passes this step issued (N * H).
    pub input_grad_passes: usize,
}

/// Cosine similarity of two flattened gradients with eps-guarded norms:
/// `<g_i, g_j> / (max(|g_i|, eps) * max(|g_j|, eps))`, in [-1, 1].
pub fn layer_pair_similarity(g_i: &Tensor, g_j: &Tensor, eps: Scalar) -> Scalar {
    assert_eq!(g_i.len(), g_j.len(), "gradient length mismatch");
    assert!(eps > 0.0, "eps guard must be positive");
    let dot: Scalar = g_i.data().iter().zip(g_j.data()).map(|(a, b)| a * b).sum();
    let ni = guarded_norm_value(g_i.data(), eps);
    let nj = guarded_norm_value(g_j.data(), eps);
    dot / (ni * nj)
}

/// `max(|g|, eps)` phrased as `sqrt(max(sum g^2, eps^2))` — the same formula
/// the graph version uses, so values agree bitwise.
fn guarded_norm_value(data: &[Scalar], eps: Scalar) -> Scalar {
    let ss: Scalar = data.iter().map(|v| v * v).sum();
    ss.max(eps * eps).sqrt()
}

/// Row-wise guarded cosine between `[b, d]` gradient matrices, as graph ops.
fn rowwise_cosine(g_i: &Var, g_j: &Var, eps: Scalar) -> Var {
    let dot = g_i.mul(g_j).sum_axis1();
    let ni = g_i.mul(g_i).sum_axis1().clamp_min(eps * eps).sqrt();
    let nj = g_j.mul(g_j).sum_axis1().clamp_min(eps * eps).sqrt();
    dot.div(&ni.mul(&nj))
}

/// Per-tap input gradients of a member, flattened to `[b, input_len]`.
///
/// One backward pass per tap over the batch-and-feature sum; rows are the
/// per-example gradients because examples are independent. With
/// `create_graph` the results stay differentiable with respect to the
/// member's parameters.
pub fn tap_input_gradients(
    spec: &ModelSpec,
    vars: &ModelVars,
    x: &Var,
    tap_count: usize,
    create_graph: bool,
) -> Result<Vec<Var>> {
    if tap_count > spec.tap_count() {
        return Err(Error::contract(format!(
            "penalty restricts {tap_count} taps but the model exposes {}",
            spec.tap_count()
        )));
    }
    let batch = x.shape()[0];
    let input_len: usize = x.shape()[1..].iter().product();
    let (_, taps) = forward_with_taps(spec, vars, x)?;
    let mut out = Vec::with_capacity(tap_count);
    for tap in taps.iter().take(tap_count) {
        let summed = tap.sum_all();
        let g = grad(&GradRequest { output: summed, wrt: vec![x.clone()], create_graph })?
            .remove(0);
        out.push(g.reshape(&[batch, input_len]));
    }
    Ok(out)
}

/// Pair penalty graph from two members' tap gradients: returns the scalar
/// `R` var and the per-layer batch-cosine vars.
pub fn pair_penalty_graph(g_i: &[Var], g_j: &[Var], eps: Scalar) -> (Var, Vec<Var>) {
    assert_eq!(g_i.len(), g_j.len(), "members expose different tap counts");
    assert!(!g_i.is_empty(), "pair penalty needs at least one tap");
    let per_layer: Vec<Var> =
        g_i.iter().zip(g_j).map(|(a, b)| rowwise_cosine(a, b, eps)).collect();
    let mut total = per_layer[0].clone();
    for cos in &per_layer[1..] {
        total = total.add(cos);
    }
    (total.mean_all(), per_layer)
}

/// Sum over the first `tap_count` taps of the layer-gradient cosine between
/// two models, for a single example (no batch dimension). In [-H, H].
pub fn pairwise_similarity(
    spec: &ModelSpec,
    params_i: &ModelParams,
    params_j: &ModelParams,
    x: &Tensor,
    tap_count: usize,
    eps: Scalar,
) -> Result<Scalar> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    penalty(spec, params_i, params_j, &x.reshaped(&shape), tap_count, eps)
}

/// Batch-mean pairwise similarity `R` between two models sharing a spec.
pub fn penalty(
    spec: &ModelSpec,
    params_i: &ModelParams,
    params_j: &ModelParams,
    batch: &Tensor,
    tap_count: usize,
    eps: Scalar,
) -> Result<Scalar> {
    if batch.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::contract("penalty needs a non-empty batch"));
    }
    params_i.validate_for(spec)?;
    params_j.validate_for(spec)?;
    let tape = Tape::new();
    let x = tape.input(batch.clone());
    let vars_i = register_constants(&tape, params_i);
    let vars_j = register_constants(&tape, params_j);
    let g_i = tap_input_gradients(spec, &vars_i, &x, tap_count, false)?;
    let g_j = tap_input_gradients(spec, &vars_j, &x, tap_count, false)?;
    let (r, _) = pair_penalty_graph(&g_i, &g_j, eps);
    tape.check()?;
    Ok(r.value().item())
}

/// The full objective graph plus its measured decomposition.
pub struct ObjectiveGraph {
    pub objective: Var,
    pub report: PenaltyReport,
    pub cross_entropy_sum: Scalar,
    pub penalty_sum: Scalar,
    pub input_grad_passes: usize,
    /// Flat parameter vars per member, canonical order.
    pub member_params: Vec<Vec<Var>>,
}

/// Build the joint objective for all members on one tape.
///
/// The cross-entropy term is always part of the graph. Tap gradients and
/// pair penalties are always *measured* (they feed the report) but join the
/// differentiated objective only when `gamma2 != 0`.
pub fn parl_objective_graph(
    tape: &Tape,
    ensemble: &EnsembleHandle,
    x: &Tensor,
    y: &[usize],
    config: &ParlConfig,
) -> Result<ObjectiveGraph> {
    config.validate()?;
    let spec = ensemble.shared_spec()?.clone();
    let batch = x.shape().first().copied().unwrap_or(0);
    if batch == 0 {
        return Err(Error::contract("objective needs a non-empty batch"));
    }
    if y.len() != batch {
        return Err(Error::contract(format!("{} labels for a batch of {batch}", y.len())));
    }
    if config.tap_count > spec.tap_count() {
        return Err(Error::contract(format!(
            "config restricts {} taps but the model exposes {}",
            config.tap_count,
            spec.tap_count()
        )));
    }

    let n = ensemble.size();
    let x_var = tape.input(x.clone());
    let create_graph = config.gamma2 != 0.0;

    let mut member_params = Vec::with_capacity(n);
    let mut ce_sum: Option<Var> = None;
    let mut member_grads: Vec<Vec<Var>> = Vec::with_capacity(n);

    let before = tape.backward_passes();
    for member in ensemble.members() {
        let vars = register_params(tape, &member.params);
        let (logits, taps) = forward_with_taps(&spec, &vars, &x_var)?;
        let ce = softmax_crossentropy(&logits, y).mean_all();
        ce_sum = Some(match ce_sum {
            Some(acc) => acc.add(&ce),
            None => ce,
        });
        // reuse the forward's taps rather than re-running the stack
        let mut grads = Vec::with_capacity(config.tap_count);
        let input_len: usize = x.shape()[1..].iter().product();
        for tap in taps.iter().take(config.tap_count) {
            let g = grad(&GradRequest {
                output: tap.sum_all(),
                wrt: vec![x_var.clone()],
                create_graph,
            })?
            .remove(0);
            grads.push(g.reshape(&[batch, input_len]));
        }
        member_grads.push(grads);
        member_params.push(vars.flat());
    }
    let input_grad_passes = tape.backward_passes() - before;

    let mut pairs = Vec::new();
    let mut penalty_total: Option<Var> = None;
    let mut penalty_sum = 0.0;
    if config.tap_count > 0 {
        for i in 0..n {
            for j in (i + 1)..n {
                let (r, per_layer) =
                    pair_penalty_graph(&member_grads[i], &member_grads[j], config.cosine_eps);
                let layer_means: Vec<Scalar> =
                    per_layer.iter().map(|c| c.value().mean()).collect();
                let r_value = r.value().item();
                penalty_sum += r_value;
                pairs.push(PairPenalty { i, j, r: r_value, layer_means });
                penalty_total = Some(match penalty_total {
                    Some(acc) => acc.add(&r),
                    None => r,
                });
            }
        }
    }

    let ce_sum = ce_sum.expect("ensemble is non-empty");
    let cross_entropy_sum = ce_sum.value().item();
    let mut objective = ce_sum.scale(config.gamma1);
    if create_graph {
        if let Some(p) = penalty_total {
            objective = objective.add(&p.scale(config.gamma2));
        }
    }
    tape.check()?;

    Ok(ObjectiveGraph {
        objective,
        report: PenaltyReport { pairs, tap_count: config.tap_count, batch_size: batch },
        cross_entropy_sum,
        penalty_sum,
        input_grad_passes,
        member_params,
    })
}

/// Value of the joint objective on a batch (no training).
pub fn parl_objective(
    ensemble: &EnsembleHandle,
    x: &Tensor,
    y: &[usize],
    config: &ParlConfig,
) -> Result<Scalar> {
    let tape = Tape::new();
    let graph = parl_objective_graph(&tape, ensemble, x, y, config)?;
    // gamma2 = 0 keeps the penalty out of the differentiated graph, but the
    // objective *value* is the same either way since the term is weighted by
    // zero.
    Ok(graph.objective.value().item())
}

/// One joint training step: build the objective, backpropagate through the
/// recorded input gradients, and apply one Adam update per member.
///
/// On any numeric fault the step errors out with every member's parameters
/// untouched. The returned report carries the pre-step penalty values.
pub fn parl_train_step(
    ensemble: &mut EnsembleHandle,
    x: &Tensor,
    y: &[usize],
    config: &ParlConfig,
    states: &mut [AdamState],
) -> Result<StepReport> {
    if states.len() != ensemble.size() {
        return Err(Error::contract(format!(
            "{} optimizer states for {} members",
            states.len(),
            ensemble.size()
        )));
    }
    let tape = Tape::new();
    let graph = parl_objective_graph(&tape, ensemble, x, y, config)?;

    let wrt: Vec<Var> = graph.member_params.iter().flatten().cloned().collect();
    let grads = grad(&GradRequest { output: graph.objective.clone(), wrt, create_graph: false })?;
    let grad_values: Vec<Tensor> = grads.iter().map(|g| g.value()).collect();

    let mut offset = 0;
    for (member, state) in ensemble.members_mut().iter_mut().zip(states.iter_mut()) {
        let count = member.params.tensors().len();
        adam_step(&mut member.params, &grad_values[offset..offset + count], state)?;
        offset += count;
    }

    Ok(StepReport {
        objective: graph.objective.value().item(),
        penalty: graph.report,
        cross_entropy_sum: graph.cross_entropy_sum,
        penalty_sum: graph.penalty_sum,
        input_grad_passes: graph.input_grad_passes,
    })
}
