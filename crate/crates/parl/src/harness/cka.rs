//! CKA command: layer-wise similarity profiles for every member pair of a
//! trained run, exported as plottable CSVs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::diversity::{layerwise_cka_profile, CkaProfile};
use crate::error::Result;

use super::attack_eval::{eval_subset, load_ensemble};
use super::config::ExperimentConfig;
use super::report::write_string;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CkaPairSummary {
    pub seed: u64,
    pub i: usize,
    pub j: usize,
    pub overall: Scalar,
    pub profile: CkaProfile,
}

pub struct CkaOutput {
    pub out_dir: PathBuf,
    pub pairs: Vec<CkaPairSummary>,
}

/// Per-pair layer-wise CKA over the evaluation probe subset, for every seed
/// of a trained run. Writes one `layer,value` CSV per (seed, pair) plus a
/// JSON summary of overall averages.
pub fn cmd_cka(config: &ExperimentConfig, run_dir: &Path) -> Result<CkaOutput> {
    config.validate()?;
    let out_dir = run_dir.join("cka");
    std::fs::create_dir_all(&out_dir)?;

    let mut pairs = Vec::new();
    for &seed in &config.seeds {
        let ensemble = load_ensemble(run_dir, config, seed)?;
        let probe = eval_subset(config, seed)?.inputs;
        let spec = ensemble.shared_spec()?;
        for i in 0..ensemble.size() {
            for j in (i + 1)..ensemble.size() {
                let profile = layerwise_cka_profile(
                    spec,
                    &ensemble.members()[i].params,
                    &ensemble.members()[j].params,
                    &probe,
                )?;
                let mut csv = String::from("layer,value\n");
                for (layer, value) in profile.per_layer.iter().enumerate() {
                    csv.push_str(&format!("{layer},{value}\n"));
                }
                write_string(&out_dir.join(format!("seed_{seed}_pair_{i}_{j}.csv")), &csv)?;
                pairs.push(CkaPairSummary { seed, i, j, overall: profile.overall, profile });
            }
        }
    }
    write_string(
        &out_dir.join("summary.json"),
        &serde_json::to_string_pretty(&pairs).expect("cka summary serializes"),
    )?;
    Ok(CkaOutput { out_dir, pairs })
}
