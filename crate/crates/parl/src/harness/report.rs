//! Report schema and writers shared by the harness commands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::ensemble::EvalResult;
use crate::error::{Error, Result};

use super::train::TrainRunSummary;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Train,
    AttackEval,
}

/// One evaluated (seed, mode, attack, epsilon) cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub seed: u64,
    /// clean | white_box | black_box
    pub mode: String,
    /// clean | fgsm | bim | mim | pgd
    pub attack: String,
    pub epsilon: Scalar,
    pub accuracy: Scalar,
    pub result: EvalResult,
}

pub const RESULTS_HEADER: &str = "seed,mode,attack,epsilon,accuracy";

impl EvalRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.seed, self.mode, self.attack, self.epsilon, self.accuracy)
    }
}

/// The versioned report written to every run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub kind: ReportKind,
    pub name: String,
    pub config_digest: String,
    pub config_toml: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_runs: Option<Vec<TrainRunSummary>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_rows: Option<Vec<EvalRow>>,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<RunReport> {
        let text = std::fs::read_to_string(path)?;
        let report: RunReport =
            serde_json::from_str(&text).map_err(|e| Error::parse(0, format!("bad report: {e}")))?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::Version { found: report.schema_version, expected: SCHEMA_VERSION });
        }
        Ok(report)
    }

    /// Recount every evaluation row from its stored per-example records;
    /// errors on the first mismatch.
    pub fn verify(&self) -> Result<()> {
        let echoed = crate::nn::checkpoint::digest_bytes(self.config_toml.as_bytes());
        let echoed_hex: String = echoed.iter().map(|b| format!("{b:02x}")).collect();
        if echoed_hex != self.config_digest {
            return Err(Error::contract("config digest does not match the echoed config"));
        }
        if let Some(rows) = &self.eval_rows {
            for row in rows {
                if (row.result.recount() - row.accuracy).abs() > 0.0 {
                    return Err(Error::contract(format!(
                        "row (seed {}, {}, {}, eps {}) reports accuracy {} but recounts to {}",
                        row.seed,
                        row.mode,
                        row.attack,
                        row.epsilon,
                        row.accuracy,
                        row.result.recount()
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn write_string(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, content)?;
    Ok(())
}

/// Human summary of a run directory; also verifies digests and recounts.
pub fn cmd_report(run_dir: &Path) -> Result<String> {
    let report = RunReport::load(&run_dir.join("report.json"))?;
    report.verify()?;
    let mut out = String::new();
    out.push_str(&format!(
        "run '{}' ({:?}), config digest {}\n",
        report.name, report.kind, &report.config_digest[..12]
    ));
    if let Some(runs) = &report.train_runs {
        out.push_str("seed  status  steps  clean_acc  final_R/H\n");
        for r in runs {
            out.push_str(&format!(
                "{:<5} {:<7} {:<6} {:<10} {}\n",
                r.seed,
                r.status,
                r.steps,
                r.clean_test_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
                r.final_r_normalized.map_or("-".into(), |v| format!("{v:.4}")),
            ));
        }
    }
    if let Some(rows) = &report.eval_rows {
        out.push_str("seed  mode       attack  epsilon  accuracy\n");
        for row in rows {
            out.push_str(&format!(
                "{:<5} {:<10} {:<7} {:<8} {:.4}\n",
                row.seed, row.mode, row.attack, row.epsilon, row.accuracy
            ));
        }
        out.push_str("recount check: ok\n");
    }
    Ok(out)
}
