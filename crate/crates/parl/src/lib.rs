//! Training diverse neural-network ensembles that resist adversarial
//! transfer.
//!
//! The crate trains an ensemble jointly with a pairwise input-gradient
//! penalty: alongside the usual cross-entropy terms, every pair of members
//! is penalized for having aligned per-layer input gradients, which pushes
//! their decision boundaries apart and degrades the transferability of
//! adversarial examples crafted on one member (or on a surrogate ensemble)
//! to the others. Robustness is then measured against FGSM/BIM/MIM/PGD
//! attacks under black-box (surrogate) and white-box threat models, with
//! linear-CKA profiles as a representation-similarity diagnostic.
//!
//! Module map:
//!
//! - [`autodiff`] — tensors and a tape engine whose backward rules are
//!   themselves recorded, so gradients can be differentiated again (the
//!   penalty differentiates input gradients with respect to parameters).
//! - [`nn`] — layer stacks with per-layer output taps, Adam, checkpoints.
//! - [`loss`] — the pairwise diversity penalty and the joint training step.
//! - [`attacks`] — L-inf FGSM, BIM, MIM and PGD with random restarts.
//! - [`ensemble`] — majority-vote inference and attack evaluation.
//! - [`diversity`] — linear CKA between member representations.
//! - [`data`] — synthetic tasks, CIFAR binary ingestion, augmentation.
//! - [`harness`] — config-driven experiment orchestration behind the CLI.
//!
//! The `examples/` directory has one runnable walkthrough per capability;
//! start with `cargo run --release --example train_two_moons`.

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod diversity;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod loss;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
