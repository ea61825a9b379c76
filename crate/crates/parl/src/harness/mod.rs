//! Reproducible experiment orchestration behind the CLI: config-driven
//! training, attack sweeps, CKA reports, and saliency exports.
//!
//! Run directories are keyed by a digest of the effective config, every
//! random stream is derived from explicit (seed, purpose) components, and
//! `metrics.csv` / `results.csv` contain no wall-clock data, so a run
//! repeated with the same config and seeds reproduces them bitwise.

pub mod attack_eval;
pub mod cka;
pub mod config;
pub mod gradviz;
pub mod report;
pub mod train;

pub use attack_eval::{cmd_attack_eval, eval_rows_for_seed, load_ensemble, seed_mean};
pub use cka::cmd_cka;
pub use config::{DatasetConfig, ExperimentConfig, ModelConfig, Role};
pub use gradviz::cmd_gradviz;
pub use report::{cmd_report, EvalRow, RunReport};
pub use train::{cmd_train, train_seed, TrainOutput, TrainedSeed};
