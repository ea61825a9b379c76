//! Untargeted L-inf adversarial example generation: FGSM, BIM, MIM, and PGD
//! with random restarts.
//!
//! Attacks run against an `EnsembleHandle` (a single model is an ensemble of
//! one); the attack loss is the mean of member cross-entropies. Every
//! iterate is projected back into the epsilon ball around the clean input
//! and clamped to the valid pixel range `[0, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, softmax_crossentropy, GradRequest, Scalar, Tape, Tensor, Var};
use crate::ensemble::EnsembleHandle;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{digest_bytes, load_tensors, save_tensors};
use crate::nn::{forward_with_taps, register_constants};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Fgsm,
    Bim,
    Mim,
    Pgd,
}

impl AttackFamily {
    pub fn name(&self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Bim => "bim",
            AttackFamily::Mim => "mim",
            AttackFamily::Pgd => "pgd",
        }
    }

    pub fn is_iterative(&self) -> bool {
        !matches!(self, AttackFamily::Fgsm)
    }
}

impl std::str::FromStr for AttackFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackFamily::Fgsm),
            "bim" => Ok(AttackFamily::Bim),
            "mim" => Ok(AttackFamily::Mim),
            "pgd" => Ok(AttackFamily::Pgd),
            other => Err(Error::config(format!("unknown attack family '{other}'"))),
        }
    }
}

/// Attack family plus hyperparameters.
///
/// Defaults follow the usual evaluation setup: 50 iterations at step size
/// `epsilon / 5`, MIM decay 0.01, 10 PGD restarts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    /// L-inf budget in input units.
    pub epsilon: Scalar,
    /// Iteration count for the iterative families.
    pub steps: usize,
    /// Per-iteration step size.
    pub alpha: Scalar,
    /// MIM momentum decay factor.
    pub mu: Scalar,
    /// PGD random-restart count.
    pub restarts: usize,
}

impl AttackSpec {
    pub fn new(family: AttackFamily, epsilon: Scalar) -> Self {
        AttackSpec { family, epsilon, steps: 50, alpha: epsilon / 5.0, mu: 0.01, restarts: 10 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::config("epsilon must be non-negative"));
        }
        if self.family.is_iterative() {
            if self.steps < 1 {
                return Err(Error::config("iterative attacks need at least one step"));
            }
            // alpha = epsilon / k collapses to zero with the budget; only a
            // genuinely zero step at positive budget is a config error
            if self.alpha <= 0.0 && self.epsilon > 0.0 {
                return Err(Error::config("iterative attacks need a positive step size"));
            }
        }
        if self.family == AttackFamily::Pgd && self.restarts < 1 {
            return Err(Error::config("pgd needs at least one restart"));
        }
        if self.mu < 0.0 {
            return Err(Error::config("mim decay must be non-negative"));
        }
        Ok(())
    }
}

/// An adversarial batch together with the clean batch it perturbs.
#[derive(Clone, Debug)]
pub struct AdvBatch {
    pub x_adv: Tensor,
    pub origin: Tensor,
    pub spec: AttackSpec,
}

impl AdvBatch {
    /// Ball and range invariant: `|x_adv - origin|_inf <= eps + 1e-9` and
    /// every value in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if self.x_adv.shape() != self.origin.shape() {
            return Err(Error::contract("adversarial batch shape differs from origin"));
        }
        let dist = self.x_adv.linf_dist(&self.origin);
        if dist > self.spec.epsilon + 1e-9 {
            return Err(Error::contract(format!(
                "perturbation {dist} exceeds budget {}",
                self.spec.epsilon
            )));
        }
        if self.x_adv.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::contract("adversarial inputs left the valid range [0, 1]"));
        }
        Ok(())
    }

    /// Export to the checkpoint tensor container (x_adv then origin), keyed
    /// by a digest of the attack spec, for cross-run transfer workflows.
    pub fn save(&self, path: &Path) -> Result<()> {
        let digest = digest_bytes(
            serde_json::to_string(&self.spec).expect("attack spec serializes").as_bytes(),
        );
        save_tensors(path, &digest, &[&self.x_adv, &self.origin])
    }

    /// Load a batch previously written by `save`; the stored digest must
    /// match `spec`.
    pub fn load(path: &Path, spec: &AttackSpec) -> Result<AdvBatch> {
        let expect =
            digest_bytes(serde_json::to_string(spec).expect("attack spec serializes").as_bytes());
        let (digest, mut tensors) = load_tensors(path)?;
        if digest != expect {
            return Err(Error::contract(format!(
                "{} was written for a different attack spec",
                path.display()
            )));
        }
        if tensors.len() != 2 {
            return Err(Error::contract("adversarial batch file must hold exactly two tensors"));
        }
        let origin = tensors.pop().unwrap();
        let x_adv = tensors.pop().unwrap();
        let batch = AdvBatch { x_adv, origin, spec: spec.clone() };
        batch.validate()?;
        Ok(batch)
    }
}

/// Graph-level attack loss on `x`: per-example mean of member
/// cross-entropies, shape `[batch]`.
pub fn attack_loss(target: &EnsembleHandle, x: &Var, y: &[usize]) -> Result<Var> {
    let tape = x.tape();
    let mut acc: Option<Var> = None;
    for member in target.members() {
        let vars = register_constants(&tape, &member.params);
        let (logits, _) = forward_with_taps(&member.spec, &vars, x)?;
        let ce = softmax_crossentropy(&logits, y);
        acc = Some(match acc {
            Some(a) => a.add(&ce),
            None => ce,
        });
    }
    Ok(acc.expect("ensemble is non-empty").scale(1.0 / target.size() as Scalar))
}

/// Per-example attack loss values (forward only).
pub fn attack_loss_values(target: &EnsembleHandle, x: &Tensor, y: &[usize]) -> Result<Vec<Scalar>> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let loss = attack_loss(target, &xv, y)?;
    tape.check()?;
    Ok(loss.value().into_data())
}

/// Per-example losses and the gradient of their sum with respect to `x`.
fn loss_and_grad(
    target: &EnsembleHandle,
    x: &Tensor,
    y: &[usize],
) -> Result<(Vec<Scalar>, Tensor)> {
    let tape = Tape::new();
    let xv = tape.input(x.clone());
    let loss = attack_loss(target, &xv, y)?;
    let total = loss.sum_all();
    let g = grad(&GradRequest { output: total, wrt: vec![xv], create_graph: false })?;
    Ok((loss.value().into_data(), g[0].value()))
}

fn sign(v: Scalar) -> Scalar {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clamp01(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// Project `x` into the eps ball around `clean`, then into `[0, 1]`.
fn project(x: &Tensor, clean: &Tensor, eps: Scalar) -> Tensor {
    clamp01(&clean.zip(x, |c, v| c + (v - c).clamp(-eps, eps)))
}

/// Normalize each example's gradient by its own guarded L1 norm.
fn per_example_l1_normalize(g: &Tensor, guard: Scalar) -> Tensor {
    let batch = g.shape()[0];
    let per: usize = g.shape()[1..].iter().product();
    let mut out = g.clone();
    for b in 0..batch {
        let slice = &mut out.data_mut()[b * per..(b + 1) * per];
        let norm: Scalar = slice.iter().map(|v| v.abs()).sum();
        let denom = norm.max(guard);
        for v in slice.iter_mut() {
            *v /= denom;
        }
    }
    out
}

/// One-shot signed-gradient attack.
pub fn fgsm(target: &EnsembleHandle, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<AdvBatch> {
    spec.validate()?;
    let (_, g) = loss_and_grad(target, x, y)?;
    let x_adv = clamp01(&x.zip(&g, |xv, gv| xv + spec.epsilon * sign(gv)));
    let batch = AdvBatch { x_adv, origin: x.clone(), spec: spec.clone() };
    debug_assert!(batch.validate().is_ok());
    Ok(batch)
}

/// Shared BIM/MIM iteration from an explicit start point. `trace`, when
/// given, receives every iterate including the start.
fn iterate_attack(
    target: &EnsembleHandle,
    clean: &Tensor,
    start: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    momentum: bool,
    mut trace: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    let mut cur = start.clone();
    if let Some(t) = trace.as_deref_mut() {
        t.push(cur.clone());
    }
    let mut acc = Tensor::zeros(clean.shape());
    for _ in 0..spec.steps {
        let (_, g) = loss_and_grad(target, &cur, y)?;
        let direction = if momentum {
            let normalized = per_example_l1_normalize(&g, 1e-12);
            acc = acc.scale(spec.mu).add(&normalized);
            acc.map(sign)
        } else {
            g.map(sign)
        };
        cur = project(&cur.add(&direction.scale(spec.alpha)), clean, spec.epsilon);
        if let Some(t) = trace.as_deref_mut() {
            t.push(cur.clone());
        }
    }
    Ok(cur)
}

/// Iterative signed-gradient attack with per-step projection.
pub fn bim(target: &EnsembleHandle, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<AdvBatch> {
    spec.validate()?;
    let x_adv = iterate_attack(target, x, x, y, spec, false, None)?;
    Ok(AdvBatch { x_adv, origin: x.clone(), spec: spec.clone() })
}

/// Momentum variant: the fresh gradient is L1-normalized per example,
/// folded into a decaying accumulator, and the step follows the sign of the
/// freshly accumulated momentum.
pub fn mim(target: &EnsembleHandle, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<AdvBatch> {
    spec.validate()?;
    let x_adv = iterate_attack(target, x, x, y, spec, true, None)?;
    Ok(AdvBatch { x_adv, origin: x.clone(), spec: spec.clone() })
}

/// The random start points PGD uses: clean input plus uniform noise in
/// `[-eps, eps]`, clamped to `[0, 1]`. Exposed so restart selection can be
/// recomputed independently.
pub fn pgd_restart_inits(x: &Tensor, spec: &AttackSpec, seed: u64) -> Vec<Tensor> {
    (0..spec.restarts)
        .map(|r| {
            let mut stream = rng::stream(&[seed, r as u64, 0x706764]);
            let data = x
                .data()
                .iter()
                .map(|&v| v + rng::uniform(&mut stream, -spec.epsilon, spec.epsilon))
                .collect();
            clamp01(&Tensor::from_vec(x.shape().to_vec(), data))
        })
        .collect()
}

/// PGD detail: final candidates per restart and their per-example losses,
/// plus the per-example worst case assembled from them.
pub struct PgdDetail {
    pub adv: AdvBatch,
    pub candidates: Vec<Tensor>,
    pub candidate_losses: Vec<Vec<Scalar>>,
}

/// Run BIM from each start point and keep, per example, the candidate with
/// the highest attack loss (worst case for the defender). Earlier restarts
/// win ties.
pub fn pgd_from_inits(
    target: &EnsembleHandle,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    inits: &[Tensor],
) -> Result<PgdDetail> {
    assert!(!inits.is_empty(), "pgd needs at least one start point");
    let mut candidates = Vec::with_capacity(inits.len());
    let mut losses = Vec::with_capacity(inits.len());
    for init in inits {
        let candidate = iterate_attack(target, x, init, y, spec, false, None)?;
        let loss = attack_loss_values(target, &candidate, y)?;
        candidates.push(candidate);
        losses.push(loss);
    }

    let batch = x.shape()[0];
    let per: usize = x.shape()[1..].iter().product();
    let mut x_adv = candidates[0].clone();
    let mut best_loss = losses[0].clone();
    for (candidate, loss) in candidates.iter().zip(&losses).skip(1) {
        for b in 0..batch {
            if loss[b] > best_loss[b] {
                best_loss[b] = loss[b];
                x_adv.data_mut()[b * per..(b + 1) * per]
                    .copy_from_slice(&candidate.data()[b * per..(b + 1) * per]);
            }
        }
    }
    Ok(PgdDetail {
        adv: AdvBatch { x_adv, origin: x.clone(), spec: spec.clone() },
        candidates,
        candidate_losses: losses,
    })
}

/// PGD with seeded random restarts.
pub fn pgd(
    target: &EnsembleHandle,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    seed: u64,
) -> Result<AdvBatch> {
    spec.validate()?;
    let inits = pgd_restart_inits(x, spec, seed);
    Ok(pgd_from_inits(target, x, y, spec, &inits)?.adv)
}

/// Dispatch on the spec's family. `seed` only matters for PGD.
pub fn run_attack(
    target: &EnsembleHandle,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    seed: u64,
) -> Result<AdvBatch> {
    match spec.family {
        AttackFamily::Fgsm => fgsm(target, x, y, spec),
        AttackFamily::Bim => bim(target, x, y, spec),
        AttackFamily::Mim => mim(target, x, y, spec),
        AttackFamily::Pgd => pgd(target, x, y, spec, seed),
    }
}

/// Like `run_attack`, also returning every intermediate iterate (for PGD,
/// the iterates of every restart). Used to audit the ball invariant.
pub fn attack_with_trace(
    target: &EnsembleHandle,
    x: &Tensor,
    y: &[usize],
    spec: &AttackSpec,
    seed: u64,
) -> Result<(AdvBatch, Vec<Tensor>)> {
    spec.validate()?;
    match spec.family {
        AttackFamily::Fgsm => {
            let adv = fgsm(target, x, y, spec)?;
            let trace = vec![adv.x_adv.clone()];
            Ok((adv, trace))
        }
        AttackFamily::Bim | AttackFamily::Mim => {
            let mut trace = Vec::new();
            let momentum = spec.family == AttackFamily::Mim;
            let x_adv = iterate_attack(target, x, x, y, spec, momentum, Some(&mut trace))?;
            Ok((AdvBatch { x_adv, origin: x.clone(), spec: spec.clone() }, trace))
        }
        AttackFamily::Pgd => {
            let inits = pgd_restart_inits(x, spec, seed);
            let mut trace = Vec::new();
            for init in &inits {
                iterate_attack(target, x, init, y, spec, false, Some(&mut trace))?;
            }
            let detail = pgd_from_inits(target, x, y, spec, &inits)?;
            Ok((detail.adv, trace))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softmax_rows;
    use crate::ensemble::EnsembleMember;
    use crate::nn::{Activation, LayerParams, LayerSpec, ModelParams, ModelSpec};

    /// Linear softmax model with fixed weights; CE gradients have a closed
    /// form used as the FGSM oracle.
    fn linear_model() -> (EnsembleHandle, Tensor, Tensor) {
        let w = Tensor::from_vec(vec![2, 3], vec![0.8, -0.4, 0.2, -0.6, 0.9, 0.3]);
        let b = Tensor::from_vec(vec![3], vec![0.05, -0.1, 0.2]);
        let spec = ModelSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::Dense { input: 2, output: 3, activation: Activation::Identity }],
            num_classes: 3,
            tap_layers: vec![0],
        };
        let params = ModelParams {
            layers: vec![LayerParams::Dense { weight: w.clone(), bias: b.clone() }],
            init_seed: 0,
        };
        let ens = EnsembleHandle::new(vec![EnsembleMember { spec, params }]).unwrap();
        (ens, w, b)
    }

    fn small_ensemble(n: usize, seed: u64) -> EnsembleHandle {
        let spec = ModelSpec::mlp(&[2, 5, 3], Activation::Tanh);
        EnsembleHandle::init(&spec, n, seed).unwrap()
    }

    fn moons_batch() -> (Tensor, Vec<usize>) {
        let x = Tensor::from_vec(vec![3, 2], vec![0.2, 0.8, 0.5, 0.4, 0.9, 0.1]);
        (x, vec![0, 1, 2])
    }

    #[test]
    fn attack_loss_of_single_model_is_its_cross_entropy() {
        let ens = small_ensemble(1, 2);
        let (x, y) = moons_batch();
        let got = attack_loss_values(&ens, &x, &y).unwrap();
        let logits = ens.member_logits(&x).unwrap().remove(0);
        for (i, &label) in y.iter().enumerate() {
            let row = logits.row(i);
            let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let lse: Scalar =
                row.iter().map(|&z| ((z - max) as f64).exp()).sum::<f64>().ln() as Scalar + max;
            let expect = lse - row[label];
            assert!((got[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn attack_loss_of_identical_members_equals_single_model() {
        let one = small_ensemble(1, 4);
        let member = one.members()[0].clone();
        let three = EnsembleHandle::new(vec![member.clone(), member.clone(), member]).unwrap();
        let (x, y) = moons_batch();
        let a = attack_loss_values(&one, &x, &y).unwrap();
        let b = attack_loss_values(&three, &x, &y).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn attack_loss_of_two_models_is_the_mean() {
        let ens = small_ensemble(2, 6);
        let (x, y) = moons_batch();
        let both = attack_loss_values(&ens, &x, &y).unwrap();
        let singles: Vec<Vec<Scalar>> = (0..2)
            .map(|i| {
                let solo =
                    EnsembleHandle::new(vec![ens.members()[i].clone()]).unwrap();
                attack_loss_values(&solo, &x, &y).unwrap()
            })
            .collect();
        for i in 0..3 {
            let expect = (singles[0][i] + singles[1][i]) / 2.0;
            assert!((both[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn fgsm_with_zero_budget_is_identity() {
        let ens = small_ensemble(1, 8);
        let (x, y) = moons_batch();
        let spec = AttackSpec::new(AttackFamily::Fgsm, 0.0);
        let adv = fgsm(&ens, &x, &y, &spec).unwrap();
        assert_eq!(adv.x_adv, x);
    }

    #[test]
    fn fgsm_matches_closed_form_on_linear_softmax() {
        // for logits z = x W + b, dCE/dx = (softmax(z) - onehot(y)) W^T
        let (ens, w, b) = linear_model();
        let x = Tensor::from_vec(vec![2, 2], vec![0.3, 0.7, 0.6, 0.2]);
        let y = vec![1usize, 0];
        let spec = AttackSpec::new(AttackFamily::Fgsm, 0.05);
        let adv = fgsm(&ens, &x, &y, &spec).unwrap();

        let logits = x.matmul(&w).add(&Tensor::stack(&[b.clone(), b.clone()]));
        let probs = softmax_rows(&logits);
        let mut expect = x.clone();
        for i in 0..2 {
            let mut delta = probs.row(i).to_vec();
            delta[y[i]] -= 1.0;
            for d in 0..2 {
                let grad_d: Scalar =
                    (0..3).map(|c| delta[c] * w.row(d)[c]).sum();
                let v = expect.row(i)[d] + 0.05 * sign(grad_d);
                expect.data_mut()[i * 2 + d] = v.clamp(0.0, 1.0);
            }
        }
        for (a, e) in adv.x_adv.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn fgsm_moves_every_coordinate_by_epsilon_when_gradient_is_nonzero() {
        let (ens, _, _) = linear_model();
        // chosen so no input coordinate has an exactly zero CE gradient
        let x = Tensor::from_vec(vec![1, 2], vec![0.45, 0.6]);
        let y = vec![2usize];
        let spec = AttackSpec::new(AttackFamily::Fgsm, 0.03);
        let adv = fgsm(&ens, &x, &y, &spec).unwrap();
        for (a, &c) in adv.x_adv.data().iter().zip(x.data()) {
            assert!(((a - c).abs() - 0.03).abs() < 1e-12, "step was {}", (a - c).abs());
        }
    }

    #[test]
    fn bim_single_full_budget_step_coincides_with_fgsm() {
        let ens = small_ensemble(2, 10);
        let (x, y) = moons_batch();
        let mut spec = AttackSpec::new(AttackFamily::Bim, 0.04);
        spec.steps = 1;
        spec.alpha = 0.04;
        let b = bim(&ens, &x, &y, &spec).unwrap();
        let f = fgsm(&ens, &x, &y, &AttackSpec::new(AttackFamily::Fgsm, 0.04)).unwrap();
        assert_eq!(b.x_adv, f.x_adv);
    }

    #[test]
    fn bim_two_steps_match_hand_unrolled_recurrence() {
        let ens = small_ensemble(2, 12);
        let (x, y) = moons_batch();
        let mut spec = AttackSpec::new(AttackFamily::Bim, 0.06);
        spec.steps = 2;
        spec.alpha = 0.06 / 2.0;
        let got = bim(&ens, &x, &y, &spec).unwrap();

        // manual unroll with the library gradient as the only shared piece
        let mut cur = x.clone();
        for _ in 0..2 {
            let (_, g) = loss_and_grad(&ens, &cur, &y).unwrap();
            let stepped = cur.zip(&g, |v, gv| v + spec.alpha * sign(gv));
            cur = project(&stepped, &x, spec.epsilon);
        }
        assert_eq!(got.x_adv, cur);
    }

    #[test]
    fn mim_three_steps_match_hand_unrolled_recurrence() {
        let ens = small_ensemble(3, 14);
        let (x, y) = moons_batch();
        let mut spec = AttackSpec::new(AttackFamily::Mim, 0.05);
        spec.steps = 3;
        spec.alpha = 0.01;
        spec.mu = 0.01;
        let got = mim(&ens, &x, &y, &spec).unwrap();

        let mut cur = x.clone();
        let mut acc = Tensor::zeros(x.shape());
        for _ in 0..3 {
            let (_, g) = loss_and_grad(&ens, &cur, &y).unwrap();
            let gn = per_example_l1_normalize(&g, 1e-12);
            acc = acc.scale(spec.mu).add(&gn);
            let stepped = cur.zip(&acc.map(sign), |v, s| v + spec.alpha * s);
            cur = project(&stepped, &x, spec.epsilon);
        }
        assert_eq!(got.x_adv, cur);
    }

    #[test]
    fn mim_without_decay_coincides_with_bim() {
        // sign(g / |g|_1) == sign(g) wherever g != 0, so the zero-decay
        // momentum iterates track BIM exactly
        let ens = small_ensemble(2, 16);
        let (x, y) = moons_batch();
        let mut spec = AttackSpec::new(AttackFamily::Mim, 0.05);
        spec.steps = 4;
        spec.alpha = 0.01;
        spec.mu = 0.0;
        let m = mim(&ens, &x, &y, &spec).unwrap();
        let mut bspec = spec.clone();
        bspec.family = AttackFamily::Bim;
        let b = bim(&ens, &x, &y, &bspec).unwrap();
        assert_eq!(m.x_adv, b.x_adv);
    }

    #[test]
    fn single_step_mim_coincides_with_single_step_bim() {
        let ens = small_ensemble(2, 18);
        let (x, y) = moons_batch();
        let mut spec = AttackSpec::new(AttackFamily::Mim, 0.03);
        spec.steps = 1;
        spec.alpha = 0.03;
        spec.mu = 0.7; // decay is irrelevant on the first step
        let m = mim(&ens, &x, &y, &spec).unwrap();
        let mut bspec = spec.clone();
        bspec.family = AttackFamily::Bim;
        let b = bim(&ens, &x, &y, &bspec).unwrap();
        assert_eq!(m.x_adv, b.x_adv);
    }

    #[test]
    fn pgd_with_clean_init_is_bim() {
        let ens = small_ensemble(2, 20);
        let (x, y) = moons_batch();
        let mut spec = AttackSpec::new(AttackFamily::Pgd, 0.05);
        spec.steps = 5;
        spec.restarts = 1;
        let detail = pgd_from_inits(&ens, &x, &y, &spec, &[x.clone()]).unwrap();
        let mut bspec = spec.clone();
        bspec.family = AttackFamily::Bim;
        let b = bim(&ens, &x, &y, &bspec).unwrap();
        assert_eq!(detail.adv.x_adv, b.x_adv);
    }

    #[test]
    fn pgd_selects_the_per_example_worst_candidate() {
        let ens = small_ensemble(2, 22);
        let (x, y) = moons_batch();
        let mut spec = AttackSpec::new(AttackFamily::Pgd, 0.06);
        spec.steps = 4;
        spec.restarts = 3;
        let inits = pgd_restart_inits(&x, &spec, 99);
        let detail = pgd_from_inits(&ens, &x, &y, &spec, &inits).unwrap();

        // recompute-and-argmax oracle
        let batch = x.shape()[0];
        for b in 0..batch {
            let (mut best_r, mut best_loss) = (0usize, detail.candidate_losses[0][b]);
            for r in 1..3 {
                if detail.candidate_losses[r][b] > best_loss {
                    best_loss = detail.candidate_losses[r][b];
                    best_r = r;
                }
            }
            assert_eq!(
                detail.adv.x_adv.example(b),
                detail.candidates[best_r].example(b),
                "example {b} did not pick restart {best_r}"
            );
        }

        // and the selected instance loss matches a fresh evaluation
        let reval = attack_loss_values(&ens, &detail.adv.x_adv, &y).unwrap();
        for b in 0..batch {
            let best = (0..3)
                .map(|r| detail.candidate_losses[r][b])
                .fold(Scalar::NEG_INFINITY, Scalar::max);
            assert!((reval[b] - best).abs() < 1e-12);
        }
    }

    #[test]
    fn every_family_keeps_every_iterate_inside_the_ball() {
        let ens = small_ensemble(2, 24);
        let (x, y) = moons_batch();
        for family in [AttackFamily::Fgsm, AttackFamily::Bim, AttackFamily::Mim, AttackFamily::Pgd]
        {
            let mut spec = AttackSpec::new(family, 0.05);
            spec.steps = 4;
            spec.restarts = 2;
            let (adv, trace) = attack_with_trace(&ens, &x, &y, &spec, 7).unwrap();
            adv.validate().unwrap();
            for (i, iterate) in trace.iter().enumerate() {
                let dist = iterate.linf_dist(&x);
                assert!(
                    dist <= spec.epsilon + 1e-9,
                    "{} iterate {i} at distance {dist}",
                    family.name()
                );
                assert!(iterate.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn attacks_are_deterministic_given_seeds() {
        let ens = small_ensemble(3, 26);
        let (x, y) = moons_batch();
        let mut spec = AttackSpec::new(AttackFamily::Pgd, 0.04);
        spec.steps = 3;
        spec.restarts = 3;
        let a = run_attack(&ens, &x, &y, &spec, 5).unwrap();
        let b = run_attack(&ens, &x, &y, &spec, 5).unwrap();
        assert_eq!(a.x_adv, b.x_adv);
        let c = run_attack(&ens, &x, &y, &spec, 6).unwrap();
        assert_ne!(a.x_adv, c.x_adv, "different seeds should move the restarts");
    }

    #[test]
    fn adv_batches_round_trip_through_the_container() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adv.parl");
        let ens = small_ensemble(1, 28);
        let (x, y) = moons_batch();
        let spec = AttackSpec::new(AttackFamily::Fgsm, 0.02);
        let adv = fgsm(&ens, &x, &y, &spec).unwrap();
        adv.save(&path).unwrap();
        let loaded = AdvBatch::load(&path, &spec).unwrap();
        assert_eq!(loaded.x_adv, adv.x_adv);
        assert_eq!(loaded.origin, adv.origin);

        let other = AttackSpec::new(AttackFamily::Bim, 0.02);
        assert!(AdvBatch::load(&path, &other).is_err());
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let mut spec = AttackSpec::new(AttackFamily::Bim, -0.1);
        assert!(spec.validate().is_err());
        spec.epsilon = 0.1;
        spec.steps = 0;
        assert!(spec.validate().is_err());
        spec.steps = 10;
        spec.alpha = 0.0;
        assert!(spec.validate().is_err());
        // zero budget tolerates a zero step (degenerate identity attack)
        let degenerate = AttackSpec::new(AttackFamily::Bim, 0.0);
        assert!(degenerate.validate().is_ok());
    }
}
