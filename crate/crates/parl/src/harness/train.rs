//! Config-driven ensemble training: one run per seed, joint objective,
//! per-step penalty/loss trace, checkpoints.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::data::augment;
use crate::ensemble::{evaluate, EnsembleHandle};
use crate::error::{Error, Result};
use crate::loss::{parl_train_step, PenaltyReport, StepReport};
use crate::nn::{save_params, AdamState};
use crate::rng;

use super::config::{ExperimentConfig, Role};
use super::report::{write_string, ReportKind, RunReport, SCHEMA_VERSION};

/// One row of the training metrics stream. Pair/layer fields are empty on
/// trace rows of ensembles without penalty pairs.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub seed: u64,
    pub step: usize,
    pub pair: String,
    pub layer: String,
    pub mean_g: String,
    pub r: String,
    pub objective: Scalar,
    pub ce_sum: Scalar,
    pub penalty_sum: Scalar,
}

pub const METRICS_HEADER: &str = "seed,step,pair,layer,mean_g,r,objective,ce_sum,penalty_sum";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.step,
            self.pair,
            self.layer,
            self.mean_g,
            self.r,
            self.objective,
            self.ce_sum,
            self.penalty_sum
        )
    }

    fn from_step(seed: u64, step: usize, report: &StepReport) -> Vec<MetricsRow> {
        let base = |pair: String, layer: String, mean_g: String, r: String| MetricsRow {
            seed,
            step,
            pair,
            layer,
            mean_g,
            r,
            objective: report.objective,
            ce_sum: report.cross_entropy_sum,
            penalty_sum: report.penalty_sum,
        };
        if report.penalty.pairs.is_empty() {
            return vec![base(String::new(), String::new(), String::new(), String::new())];
        }
        let mut rows = Vec::new();
        for pair in &report.penalty.pairs {
            let tag = format!("{}-{}", pair.i, pair.j);
            for (k, g) in pair.layer_means.iter().enumerate() {
                rows.push(base(tag.clone(), k.to_string(), g.to_string(), pair.r.to_string()));
            }
            if pair.layer_means.is_empty() {
                rows.push(base(tag.clone(), String::new(), String::new(), pair.r.to_string()));
            }
        }
        rows
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRunSummary {
    pub seed: u64,
    /// "ok" or "failed: <reason>".
    pub status: String,
    pub steps: usize,
    /// Penalty measured on a fixed train probe after the final step.
    pub final_penalty: Option<PenaltyReport>,
    /// Mean over pairs of R / H at the end of training.
    pub final_r_normalized: Option<Scalar>,
    pub clean_test_accuracy: Option<Scalar>,
    pub wall_secs: f64,
}

/// In-memory result of one seed's training.
pub struct TrainedSeed {
    pub seed: u64,
    pub ensemble: Option<EnsembleHandle>,
    pub rows: Vec<MetricsRow>,
    pub summary: TrainRunSummary,
}

/// Train one ensemble for one seed. Numeric faults abort the run (reported
/// in the summary), they do not panic.
pub fn train_seed(config: &ExperimentConfig, role: Role, seed: u64) -> Result<TrainedSeed> {
    let started = Instant::now();
    let spec = config.model.build()?;
    let parl = config.parl.resolve(&spec, role.gamma2(config))?;
    let offset = role.stream_offset(config);
    let (train, test) = config.dataset.build(seed)?;

    let n_members = config.ensemble.size;
    let mut ensemble = EnsembleHandle::init(&spec, n_members, rng::mix(&[seed, offset, 0x696e6974]))?;
    let mut states: Vec<AdamState> = ensemble
        .members()
        .iter()
        .map(|m| {
            AdamState::new(
                &m.params,
                config.optimizer.lr as Scalar,
                config.optimizer.beta1 as Scalar,
                config.optimizer.beta2 as Scalar,
                config.optimizer.eps as Scalar,
            )
        })
        .collect();

    let mut rows = Vec::new();
    let mut step = 0usize;
    let mut failure: Option<String> = None;

    'epochs: for epoch in 0..config.training.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_stream = rng::stream(&[seed, offset, epoch as u64, 0x73687566]);
        rng::shuffle(&mut shuffle_stream, &mut order);
        for (batch_idx, chunk) in order.chunks(config.training.batch_size).enumerate() {
            let batch = train.select(chunk);
            let x = match &config.training.augment {
                Some(section) => {
                    let aug_seed = rng::mix(&[seed, offset, epoch as u64, batch_idx as u64, 0x617567]);
                    augment(&batch.inputs, &section.spec_for(aug_seed))?
                }
                None => batch.inputs,
            };
            match parl_train_step(&mut ensemble, &x, &batch.labels, &parl, &mut states) {
                Ok(report) => {
                    rows.extend(MetricsRow::from_step(seed, step, &report));
                    step += 1;
                }
                Err(Error::Numeric(msg)) => {
                    failure = Some(msg);
                    break 'epochs;
                }
                Err(other) => return Err(other),
            }
        }
    }

    if let Some(msg) = failure {
        return Ok(TrainedSeed {
            seed,
            ensemble: None,
            rows,
            summary: TrainRunSummary {
                seed,
                status: format!("failed: {msg}"),
                steps: step,
                final_penalty: None,
                final_r_normalized: None,
                clean_test_accuracy: None,
                wall_secs: started.elapsed().as_secs_f64(),
            },
        });
    }

    // end-of-run measurements: penalty on a fixed train probe, clean test
    // accuracy on the configured evaluation sample
    let probe = train.subsample(256.min(train.len()), rng::mix(&[seed, 0x70726f6265]));
    let final_penalty = measure_penalty(&ensemble, &probe.inputs, parl.tap_count, parl.cosine_eps)?;
    let final_r_normalized = final_penalty.as_ref().map(|p| p.mean_r_normalized());
    let eval_set = test.subsample(config.evaluation.sample_count, rng::mix(&[seed, 0x6576616c]));
    let clean = evaluate(&ensemble, &eval_set, None, None, 0)?;

    Ok(TrainedSeed {
        seed,
        ensemble: Some(ensemble),
        rows,
        summary: TrainRunSummary {
            seed,
            status: "ok".into(),
            steps: step,
            final_penalty,
            final_r_normalized,
            clean_test_accuracy: Some(clean.accuracy),
            wall_secs: started.elapsed().as_secs_f64(),
        },
    })
}

/// Pairwise penalty of a trained ensemble on a probe batch (None when the
/// ensemble has a single member or no restricted taps).
pub fn measure_penalty(
    ensemble: &EnsembleHandle,
    probe: &Tensor,
    tap_count: usize,
    eps: Scalar,
) -> Result<Option<PenaltyReport>> {
    let n = ensemble.size();
    if n < 2 || tap_count == 0 {
        return Ok(None);
    }
    let spec = ensemble.shared_spec()?;
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let r = crate::loss::penalty(
                spec,
                &ensemble.members()[i].params,
                &ensemble.members()[j].params,
                probe,
                tap_count,
                eps,
            )?;
            // layer means via single-layer penalties keeps this measurement
            // independent of the training path
            let mut layer_means = Vec::with_capacity(tap_count);
            for k in 0..tap_count {
                let upto = crate::loss::penalty(
                    spec,
                    &ensemble.members()[i].params,
                    &ensemble.members()[j].params,
                    probe,
                    k + 1,
                    eps,
                )?;
                let below: Scalar = layer_means.iter().sum();
                layer_means.push(upto - below);
            }
            pairs.push(crate::loss::PairPenalty { i, j, r, layer_means });
        }
    }
    Ok(Some(PenaltyReport {
        pairs,
        tap_count,
        batch_size: probe.shape().first().copied().unwrap_or(0),
    }))
}

pub struct TrainOutput {
    pub run_dir: PathBuf,
    pub summaries: Vec<TrainRunSummary>,
    pub metrics_path: PathBuf,
    pub report_path: PathBuf,
}

/// Train every configured seed (in parallel) and write the run directory:
/// `config.toml`, `metrics.csv`, `report.json`, `checkpoints/seed_<k>/`.
pub fn cmd_train(config: &ExperimentConfig, role: Role) -> Result<TrainOutput> {
    config.validate()?;
    let run_dir = config.out_dir.join(config.run_id(role));
    std::fs::create_dir_all(&run_dir)?;
    write_string(&run_dir.join("config.toml"), &config.to_toml_string())?;

    let results: Vec<Result<TrainedSeed>> = config
        .seeds
        .par_iter()
        .map(|&seed| train_seed(config, role, seed))
        .collect();

    let spec = config.model.build()?;
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut summaries = Vec::new();
    for result in results {
        let trained = result?;
        for row in &trained.rows {
            metrics.push_str(&row.to_csv());
            metrics.push('\n');
        }
        if let Some(ensemble) = &trained.ensemble {
            let seed_dir = run_dir.join("checkpoints").join(format!("seed_{}", trained.seed));
            for (i, member) in ensemble.members().iter().enumerate() {
                save_params(&seed_dir.join(format!("member_{i}.parl")), &spec, &member.params)?;
            }
        }
        summaries.push(trained.summary);
    }

    let metrics_path = run_dir.join("metrics.csv");
    write_string(&metrics_path, &metrics)?;

    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        kind: ReportKind::Train,
        name: config.name.clone(),
        config_digest: config.digest_hex(),
        config_toml: config.to_toml_string(),
        train_runs: Some(summaries.clone()),
        eval_rows: None,
    };
    let report_path = run_dir.join("report.json");
    write_string(&report_path, &serde_json::to_string_pretty(&report).expect("report serializes"))?;

    Ok(TrainOutput { run_dir, summaries, metrics_path, report_path })
}
