//! Majority-vote ensembles and accuracy evaluation under clean, black-box
//! transfer, and white-box attack conditions.
//!
//! Black-box: adversarial inputs are crafted on a surrogate ensemble and
//! evaluated on the target. White-box: crafted on the target itself.

use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackSpec};
use crate::autodiff::{softmax_rows, Scalar, Tape, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{forward_with_taps, register_constants, ModelParams, ModelSpec};

#[derive(Clone, Debug)]
pub struct EnsembleMember {
    pub spec: ModelSpec,
    pub params: ModelParams,
}

/// Ordered collection of models voting by majority.
#[derive(Clone, Debug)]
pub struct EnsembleHandle {
    members: Vec<EnsembleMember>,
}

impl EnsembleHandle {
    pub fn new(members: Vec<EnsembleMember>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::contract("ensemble needs at least one member"));
        }
        let first = &members[0].spec;
        for (i, m) in members.iter().enumerate() {
            m.spec.validate()?;
            m.params.validate_for(&m.spec)?;
            if m.spec.input_shape != first.input_shape || m.spec.num_classes != first.num_classes {
                return Err(Error::contract(format!(
                    "member {i} input/output dims differ from member 0"
                )));
            }
        }
        Ok(EnsembleHandle { members })
    }

    /// Fresh ensemble of `n` models sharing `spec`, each initialized from its
    /// own derived seed.
    pub fn init(spec: &ModelSpec, n: usize, seed: u64) -> Result<Self> {
        let members = (0..n)
            .map(|i| EnsembleMember {
                spec: spec.clone(),
                params: ModelParams::init(spec, crate::rng::mix(&[seed, i as u64])),
            })
            .collect();
        EnsembleHandle::new(members)
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [EnsembleMember] {
        &mut self.members
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].spec.num_classes
    }

    /// The spec shared by every member; errors if members disagree (joint
    /// training requires identical architectures).
    pub fn shared_spec(&self) -> Result<&ModelSpec> {
        let first = &self.members[0].spec;
        if self.members.iter().any(|m| &m.spec != first) {
            return Err(Error::contract("ensemble members have different specs"));
        }
        Ok(first)
    }

    /// Per-member logits for a batch.
    pub fn member_logits(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.members
            .iter()
            .map(|m| {
                let tape = Tape::new();
                let xv = tape.constant(x.clone());
                let vars = register_constants(&tape, &m.params);
                let (logits, _) = forward_with_taps(&m.spec, &vars, &xv)?;
                tape.check()?;
                Ok(logits.value())
            })
            .collect()
    }
}

/// Modal class over member predictions. Ties break by the class with the
/// highest softmax probability summed across members, then by the lowest
/// class index, so the result is a total order and independent of member
/// ordering.
pub fn majority_vote(predictions: &[usize], confidences: &[Vec<Scalar>]) -> usize {
    assert!(!predictions.is_empty(), "majority_vote needs at least one prediction");
    assert_eq!(predictions.len(), confidences.len(), "one confidence vector per prediction");
    let classes = confidences[0].len();
    let mut counts = vec![0usize; classes];
    let mut summed = vec![0.0 as Scalar; classes];
    for (&p, conf) in predictions.iter().zip(confidences) {
        assert!(p < classes, "prediction {p} out of {classes} classes");
        counts[p] += 1;
        for (s, &c) in summed.iter_mut().zip(conf) {
            *s += c;
        }
    }
    let top = *counts.iter().max().unwrap();
    let mut best: Option<usize> = None;
    for c in 0..classes {
        if counts[c] != top {
            continue;
        }
        best = match best {
            None => Some(c),
            Some(b) if summed[c] > summed[b] => Some(c),
            keep => keep,
        };
    }
    best.unwrap()
}

/// One evaluated example: ground truth, member predictions, final vote.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VoteRecord {
    pub truth: u32,
    pub members: Vec<u32>,
    pub vote: u32,
}

/// Accuracy of an ensemble on a dataset, with enough per-example detail to
/// recount the headline number.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: Scalar,
    pub per_member_accuracy: Vec<Scalar>,
    pub votes: Vec<VoteRecord>,
    /// The attack evaluated, if any.
    pub attack: Option<AttackSpec>,
    pub epsilon: Option<Scalar>,
}

impl EvalResult {
    /// Recompute the accuracy from the stored per-example records; must
    /// equal the reported number exactly.
    pub fn recount(&self) -> Scalar {
        if self.votes.is_empty() {
            return 0.0;
        }
        let hits = self.votes.iter().filter(|v| v.vote == v.truth).count();
        hits as Scalar / self.votes.len() as Scalar
    }
}

/// Evaluate majority-vote accuracy.
///
/// - `attack: None` — clean accuracy (`source` must also be `None`).
/// - `attack: Some`, `source: None` — white-box: examples are crafted on the
///   target itself.
/// - `attack: Some`, `source: Some` — black-box: examples are crafted on the
///   surrogate `source` and transferred to the target.
pub fn evaluate(
    target: &EnsembleHandle,
    data: &Dataset,
    attack: Option<&AttackSpec>,
    source: Option<&EnsembleHandle>,
    seed: u64,
) -> Result<EvalResult> {
    if source.is_some() && attack.is_none() {
        return Err(Error::contract("a surrogate ensemble was given without an attack"));
    }
    if data.len() == 0 {
        return Err(Error::contract("evaluation dataset is empty"));
    }
    let expect_shape = &target.members()[0].spec.input_shape;
    if data.inputs.shape()[1..] != expect_shape[..] {
        return Err(Error::contract(format!(
            "dataset example shape {:?} does not match model input {:?}",
            &data.inputs.shape()[1..],
            expect_shape
        )));
    }

    let inputs = match attack {
        None => data.inputs.clone(),
        Some(spec) => {
            let crafter = source.unwrap_or(target);
            let adv = run_attack(crafter, &data.inputs, &data.labels, spec, seed)?;
            adv.x_adv
        }
    };
    eval_on_inputs(target, data, &inputs, attack)
}

/// Evaluate the target on pre-crafted adversarial inputs (black-box reuse:
/// craft once on the surrogate, evaluate many targets).
pub fn evaluate_adversarial(
    target: &EnsembleHandle,
    data: &Dataset,
    adv: &crate::attacks::AdvBatch,
) -> Result<EvalResult> {
    if adv.origin != data.inputs {
        return Err(Error::contract(
            "adversarial batch origin does not match the evaluation dataset",
        ));
    }
    adv.validate()?;
    eval_on_inputs(target, data, &adv.x_adv, Some(&adv.spec))
}

fn eval_on_inputs(
    target: &EnsembleHandle,
    data: &Dataset,
    inputs: &Tensor,
    attack: Option<&AttackSpec>,
) -> Result<EvalResult> {
    let n = data.len();
    let members = target.size();
    let mut votes = Vec::with_capacity(n);
    let mut member_hits = vec![0usize; members];
    let mut hits = 0usize;

    // chunked to keep per-tape memory bounded
    const CHUNK: usize = 256;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let chunk_x = select_rows(&inputs, &idx);
        let logits = target.member_logits(&chunk_x)?;
        let probs: Vec<Tensor> = logits.iter().map(softmax_rows).collect();
        for (row, &example) in idx.iter().enumerate() {
            let truth = data.labels[example];
            let mut preds = Vec::with_capacity(members);
            let mut confs = Vec::with_capacity(members);
            for m in 0..members {
                let p = probs[m].row(row);
                let pred = argmax(p);
                if pred == truth {
                    member_hits[m] += 1;
                }
                preds.push(pred);
                confs.push(p.to_vec());
            }
            let vote = majority_vote(&preds, &confs);
            if vote == truth {
                hits += 1;
            }
            votes.push(VoteRecord {
                truth: truth as u32,
                members: preds.iter().map(|&p| p as u32).collect(),
                vote: vote as u32,
            });
        }
        start = end;
    }

    Ok(EvalResult {
        accuracy: hits as Scalar / n as Scalar,
        per_member_accuracy: member_hits.iter().map(|&h| h as Scalar / n as Scalar).collect(),
        votes,
        attack: attack.cloned(),
        epsilon: attack.map(|a| a.epsilon),
    })
}

fn argmax(row: &[Scalar]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn select_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let rows: Vec<Tensor> = idx.iter().map(|&i| t.example(i)).collect();
    Tensor::stack(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    #[test]
    fn strict_majority_wins() {
        let conf = vec![vec![0.5, 0.3, 0.2]; 3];
        assert_eq!(majority_vote(&[0, 0, 1], &conf), 0);
    }

    #[test]
    fn singleton_is_its_own_majority() {
        assert_eq!(majority_vote(&[2], &[vec![0.1, 0.2, 0.7]]), 2);
    }

    #[test]
    fn three_way_tie_breaks_on_summed_probability() {
        // classes A, B, C each get one vote; summed probabilities favor B
        let confs = vec![
            vec![0.50, 0.40, 0.10],
            vec![0.20, 0.40, 0.40],
            vec![0.20, 0.40, 0.40],
        ];
        // summed: A 0.9, B 1.2, C 0.9
        assert_eq!(majority_vote(&[0, 1, 2], &confs), 1);
    }

    #[test]
    fn tie_break_falls_back_to_lowest_class_index() {
        let confs = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert_eq!(majority_vote(&[0, 1], &confs), 0);
    }

    #[test]
    fn vote_is_invariant_to_member_order() {
        let preds = [1usize, 2, 1, 0];
        let confs = vec![
            vec![0.1, 0.6, 0.3],
            vec![0.2, 0.2, 0.6],
            vec![0.3, 0.5, 0.2],
            vec![0.7, 0.2, 0.1],
        ];
        let base = majority_vote(&preds, &confs);
        let orders = [[3, 2, 1, 0], [2, 0, 3, 1], [1, 3, 0, 2]];
        for order in orders {
            let p: Vec<usize> = order.iter().map(|&i| preds[i]).collect();
            let c: Vec<Vec<Scalar>> = order.iter().map(|&i| confs[i].clone()).collect();
            assert_eq!(majority_vote(&p, &c), base);
        }
    }

    #[test]
    fn single_member_ensemble_accuracy_equals_member_accuracy() {
        let spec = ModelSpec::mlp(&[2, 8, 2], Activation::Tanh);
        let ens = EnsembleHandle::init(&spec, 1, 3).unwrap();
        let data = crate::data::synth_two_moons(64, 0.05, 9);
        let result = evaluate(&ens, &data, None, None, 0).unwrap();
        assert_eq!(result.accuracy, result.per_member_accuracy[0]);
        assert!((result.recount() - result.accuracy).abs() < 1e-15);
    }

    #[test]
    fn recount_matches_reported_accuracy() {
        let spec = ModelSpec::mlp(&[2, 6, 2], Activation::Relu);
        let ens = EnsembleHandle::init(&spec, 3, 5).unwrap();
        let data = crate::data::synth_two_moons(100, 0.1, 4);
        let result = evaluate(&ens, &data, None, None, 0).unwrap();
        assert_eq!(result.recount(), result.accuracy);
        assert_eq!(result.votes.len(), 100);
    }

    #[test]
    fn surrogate_without_attack_is_rejected() {
        let spec = ModelSpec::mlp(&[2, 4, 2], Activation::Tanh);
        let ens = EnsembleHandle::init(&spec, 2, 1).unwrap();
        let data = crate::data::synth_two_moons(10, 0.1, 1);
        let err = evaluate(&ens, &data, None, Some(&ens), 0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn mismatched_dataset_shape_is_rejected() {
        let spec = ModelSpec::mlp(&[3, 4, 2], Activation::Tanh);
        let ens = EnsembleHandle::init(&spec, 1, 1).unwrap();
        let data = crate::data::synth_two_moons(10, 0.1, 1); // 2-d inputs
        let err = evaluate(&ens, &data, None, None, 0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
