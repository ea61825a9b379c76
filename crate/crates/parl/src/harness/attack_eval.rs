//! Attack sweeps over trained checkpoints: black-box (surrogate-crafted)
//! when a surrogate run is given, white-box otherwise, plus a clean row per
//! seed.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::attacks::AttackFamily;
use crate::data::Dataset;
use crate::ensemble::{evaluate, EnsembleHandle, EnsembleMember};
use crate::error::Result;
use crate::nn::load_params;
use crate::rng;

use super::config::ExperimentConfig;
use super::report::{write_string, EvalRow, ReportKind, RunReport, RESULTS_HEADER, SCHEMA_VERSION};

/// Load the ensemble a `cmd_train` run wrote for one seed.
pub fn load_ensemble(run_dir: &Path, config: &ExperimentConfig, seed: u64) -> Result<EnsembleHandle> {
    let spec = config.model.build()?;
    let seed_dir = run_dir.join("checkpoints").join(format!("seed_{seed}"));
    let members = (0..config.ensemble.size)
        .map(|i| {
            let params = load_params(&seed_dir.join(format!("member_{i}.parl")), &spec)?;
            Ok(EnsembleMember { spec: spec.clone(), params })
        })
        .collect::<Result<Vec<_>>>()?;
    EnsembleHandle::new(members)
}

/// The seeded test subset every evaluation of this (config, seed) uses.
pub fn eval_subset(config: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let (_, test) = config.dataset.build(seed)?;
    Ok(test.subsample(config.evaluation.sample_count, rng::mix(&[seed, 0x6576616c])))
}

/// All rows for one seed: clean, then every (family, epsilon) cell.
/// Epsilon zero short-circuits to the clean result.
pub fn eval_rows_for_seed(
    config: &ExperimentConfig,
    target: &EnsembleHandle,
    surrogate: Option<&EnsembleHandle>,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let subset = eval_subset(config, seed)?;
    let mode = if surrogate.is_some() { "black_box" } else { "white_box" };
    let mut rows = Vec::new();

    let clean = evaluate(target, &subset, None, None, 0)?;
    rows.push(EvalRow {
        seed,
        mode: "clean".into(),
        attack: "clean".into(),
        epsilon: 0.0,
        accuracy: clean.accuracy,
        result: clean.clone(),
    });

    for &family in &config.evaluation.families {
        for &eps in &config.evaluation.epsilons {
            let (accuracy, result) = if eps == 0.0 {
                (clean.accuracy, clean.clone())
            } else {
                let spec = config.evaluation.attack_spec(family, eps);
                let attack_seed =
                    rng::mix(&[seed, family as u64, eps.to_bits(), 0x6174746b]);
                let result = evaluate(target, &subset, Some(&spec), surrogate, attack_seed)?;
                (result.accuracy, result)
            };
            rows.push(EvalRow {
                seed,
                mode: mode.into(),
                attack: family.name().into(),
                epsilon: eps as crate::autodiff::Scalar,
                accuracy,
                result,
            });
        }
    }
    Ok(rows)
}

pub struct AttackEvalOutput {
    pub out_dir: PathBuf,
    pub rows: Vec<EvalRow>,
    pub results_path: PathBuf,
    pub report_path: PathBuf,
}

/// Evaluate a trained target run (and optional surrogate run) over the
/// configured sweep; writes `results.csv` and `report.json` under
/// `<out>/<run id>-eval`.
pub fn cmd_attack_eval(
    config: &ExperimentConfig,
    target_run: &Path,
    surrogate_run: Option<&Path>,
) -> Result<AttackEvalOutput> {
    config.validate()?;
    let per_seed: Vec<Result<Vec<EvalRow>>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let target = load_ensemble(target_run, config, seed)?;
            let surrogate = surrogate_run
                .map(|dir| load_ensemble(dir, config, seed))
                .transpose()?;
            eval_rows_for_seed(config, &target, surrogate.as_ref(), seed)
        })
        .collect();

    let mut rows = Vec::new();
    for seed_rows in per_seed {
        rows.extend(seed_rows?);
    }

    let out_dir = config.out_dir.join(format!(
        "{}-eval-{}",
        config.name,
        &config.digest_hex()[..8]
    ));
    std::fs::create_dir_all(&out_dir)?;
    write_string(&out_dir.join("config.toml"), &config.to_toml_string())?;

    let mut csv = String::from(RESULTS_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    let results_path = out_dir.join("results.csv");
    write_string(&results_path, &csv)?;

    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        kind: ReportKind::AttackEval,
        name: config.name.clone(),
        config_digest: config.digest_hex(),
        config_toml: config.to_toml_string(),
        train_runs: None,
        eval_rows: Some(rows.clone()),
    };
    let report_path = out_dir.join("report.json");
    write_string(&report_path, &serde_json::to_string_pretty(&report).expect("report serializes"))?;

    Ok(AttackEvalOutput { out_dir, rows, results_path, report_path })
}

/// Mean accuracy across seeds for one (mode, attack, epsilon) cell.
pub fn seed_mean(rows: &[EvalRow], attack: Option<AttackFamily>, epsilon: f64) -> Option<f64> {
    let name = attack.map_or("clean", |f| f.name());
    let matching: Vec<f64> = rows
        .iter()
        .filter(|r| r.attack == name && (r.epsilon as f64 - epsilon).abs() < 1e-12)
        .map(|r| r.accuracy as f64)
        .collect();
    if matching.is_empty() {
        None
    } else {
        Some(matching.iter().sum::<f64>() / matching.len() as f64)
    }
}
