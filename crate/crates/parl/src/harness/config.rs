//! Experiment configuration: a single TOML file with overridable defaults.
//!
//! The effective (merged) config is echoed into every run directory along
//! with its SHA-256 digest, so any report row is regenerable from
//! (config digest, seed).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackFamily, AttackSpec};
use crate::autodiff::Scalar;
use crate::data::{self, AugmentSpec, CifarVariant, Dataset};
use crate::error::{Error, Result};
use crate::loss::ParlConfig;
use crate::nn::{Activation, ModelSpec};
use crate::rng;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "defaults::name")]
    pub name: String,
    /// One independent run per seed.
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "defaults::out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub parl: ParlSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
}

mod defaults {
    use std::path::PathBuf;

    pub fn name() -> String {
        "experiment".into()
    }

    pub fn seeds() -> Vec<u64> {
        vec![1, 2, 3]
    }

    pub fn out_dir() -> PathBuf {
        PathBuf::from("runs")
    }

    pub fn train_fraction() -> f64 {
        2.0 / 3.0
    }

    pub fn ensemble_size() -> usize {
        3
    }

    pub fn gamma1() -> f64 {
        1.0
    }

    pub fn gamma2() -> f64 {
        0.5
    }

    pub fn cosine_eps() -> f64 {
        1e-12
    }

    pub fn lr() -> f64 {
        0.001
    }

    pub fn beta1() -> f64 {
        0.9
    }

    pub fn beta2() -> f64 {
        0.999
    }

    pub fn adam_eps() -> f64 {
        1e-8
    }

    pub fn epochs() -> usize {
        150
    }

    pub fn batch_size() -> usize {
        64
    }

    pub fn sample_count() -> usize {
        1000
    }

    pub fn epsilons() -> Vec<f64> {
        vec![0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07]
    }

    pub fn families() -> Vec<crate::attacks::AttackFamily> {
        use crate::attacks::AttackFamily::*;
        vec![Fgsm, Bim, Mim, Pgd]
    }

    pub fn attack_steps() -> usize {
        50
    }

    pub fn alpha_divisor() -> f64 {
        5.0
    }

    pub fn mu() -> f64 {
        0.01
    }

    pub fn restarts() -> usize {
        10
    }

    pub fn surrogate_gamma2() -> f64 {
        0.0
    }

    pub fn seed_offset() -> u64 {
        1000
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    TwoMoons {
        n: usize,
        noise: f64,
        #[serde(default = "defaults::train_fraction")]
        train_fraction: f64,
    },
    Blobs {
        n: usize,
        classes: usize,
        spread: f64,
        #[serde(default = "defaults::train_fraction")]
        train_fraction: f64,
    },
    Images {
        n: usize,
        classes: usize,
        size: usize,
        noise: f64,
        #[serde(default = "defaults::train_fraction")]
        train_fraction: f64,
    },
    Cifar10 {
        train_paths: Vec<PathBuf>,
        test_path: PathBuf,
    },
    Cifar100 {
        train_path: PathBuf,
        test_path: PathBuf,
    },
}

impl DatasetConfig {
    pub fn is_image(&self) -> bool {
        !matches!(self, DatasetConfig::TwoMoons { .. } | DatasetConfig::Blobs { .. })
    }

    /// Build the (train, test) pair for one run seed. Synthetic data is
    /// derived from the seed; file-backed data is split-fixed by the files.
    pub fn build(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let data_seed = rng::mix(&[seed, 0x64617461]);
        match self {
            DatasetConfig::TwoMoons { n, noise, train_fraction } => {
                let full = data::synth_two_moons(*n, *noise as Scalar, data_seed);
                Ok(full.split(*train_fraction, data_seed))
            }
            DatasetConfig::Blobs { n, classes, spread, train_fraction } => {
                let full = data::synth_blobs(*n, *classes, *spread as Scalar, data_seed);
                Ok(full.split(*train_fraction, data_seed))
            }
            DatasetConfig::Images { n, classes, size, noise, train_fraction } => {
                let full = data::synth_images(*n, *classes, *size, *noise as Scalar, data_seed);
                Ok(full.split(*train_fraction, data_seed))
            }
            DatasetConfig::Cifar10 { train_paths, test_path } => {
                let mut parts = Vec::new();
                for p in train_paths {
                    parts.push(data::load_cifar_binary(p, CifarVariant::Cifar10)?);
                }
                let train = concat_datasets(parts)?;
                let mut test = data::load_cifar_binary(test_path, CifarVariant::Cifar10)?;
                test.split = data::Split::Test;
                Ok((train, test))
            }
            DatasetConfig::Cifar100 { train_path, test_path } => {
                let train = data::load_cifar_binary(train_path, CifarVariant::Cifar100)?;
                let mut test = data::load_cifar_binary(test_path, CifarVariant::Cifar100)?;
                test.split = data::Split::Test;
                Ok((train, test))
            }
        }
    }
}

fn concat_datasets(mut parts: Vec<Dataset>) -> Result<Dataset> {
    if parts.is_empty() {
        return Err(Error::config("cifar10 needs at least one training file"));
    }
    let mut base = parts.remove(0);
    for part in parts {
        if part.num_classes != base.num_classes
            || part.inputs.shape()[1..] != base.inputs.shape()[1..]
        {
            return Err(Error::config("training files disagree on shape or classes"));
        }
        let mut rows: Vec<_> = (0..base.len()).map(|i| base.inputs.example(i)).collect();
        rows.extend((0..part.len()).map(|i| part.inputs.example(i)));
        base.inputs = crate::autodiff::Tensor::stack(&rows);
        base.labels.extend(part.labels);
    }
    Ok(base)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp {
        dims: Vec<usize>,
        activation: Activation,
        #[serde(default)]
        tap_layers: Option<Vec<usize>>,
    },
    Conv {
        input_shape: Vec<usize>,
        channels: Vec<usize>,
        num_classes: usize,
        #[serde(default)]
        tap_layers: Option<Vec<usize>>,
    },
    Custom {
        spec: ModelSpec,
    },
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec> {
        let spec = match self {
            ModelConfig::Mlp { dims, activation, tap_layers } => {
                if dims.len() < 2 {
                    return Err(Error::config("mlp needs at least [input, output] dims"));
                }
                let mut spec = ModelSpec::mlp(dims, *activation);
                if let Some(taps) = tap_layers {
                    spec.tap_layers = taps.clone();
                }
                spec
            }
            ModelConfig::Conv { input_shape, channels, num_classes, tap_layers } => {
                if input_shape.len() != 3 {
                    return Err(Error::config("conv input_shape must be [c, h, w]"));
                }
                let mut spec = ModelSpec::small_conv(input_shape, channels, *num_classes);
                if let Some(taps) = tap_layers {
                    spec.tap_layers = taps.clone();
                }
                spec
            }
            ModelConfig::Custom { spec } => spec.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "defaults::ensemble_size")]
    pub size: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { size: defaults::ensemble_size() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParlSection {
    #[serde(default = "defaults::gamma1")]
    pub gamma1: f64,
    #[serde(default = "defaults::gamma2")]
    pub gamma2: f64,
    /// Leading taps restricted by the penalty; defaults to every tap the
    /// model exposes.
    #[serde(default)]
    pub tap_count: Option<usize>,
    #[serde(default = "defaults::cosine_eps")]
    pub cosine_eps: f64,
}

impl Default for ParlSection {
    fn default() -> Self {
        ParlSection {
            gamma1: defaults::gamma1(),
            gamma2: defaults::gamma2(),
            tap_count: None,
            cosine_eps: defaults::cosine_eps(),
        }
    }
}

impl ParlSection {
    /// Resolve against a concrete model, with the penalty weight chosen by
    /// the caller (target vs surrogate role).
    pub fn resolve(&self, spec: &ModelSpec, gamma2: f64) -> Result<ParlConfig> {
        let tap_count = self.tap_count.unwrap_or_else(|| spec.tap_count());
        if tap_count > spec.tap_count() {
            return Err(Error::config(format!(
                "parl.tap_count {tap_count} exceeds the model's {} taps",
                spec.tap_count()
            )));
        }
        let config = ParlConfig {
            gamma1: self.gamma1 as Scalar,
            gamma2: gamma2 as Scalar,
            tap_count,
            cosine_eps: self.cosine_eps as Scalar,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: defaults::lr(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::adam_eps(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Image augmentation, applied dynamically per epoch.
    #[serde(default)]
    pub augment: Option<AugmentSection>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            augment: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(default)]
    pub max_shift: usize,
    #[serde(default)]
    pub flip: bool,
    #[serde(default)]
    pub crop_pad: usize,
}

impl AugmentSection {
    pub fn spec_for(&self, seed: u64) -> AugmentSpec {
        AugmentSpec {
            max_shift: self.max_shift,
            flip: self.flip,
            crop_pad: self.crop_pad,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Test examples drawn (seeded) for each evaluation.
    #[serde(default = "defaults::sample_count")]
    pub sample_count: usize,
    #[serde(default = "defaults::epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "defaults::families")]
    pub families: Vec<AttackFamily>,
    #[serde(default = "defaults::attack_steps")]
    pub attack_steps: usize,
    /// Step size rule alpha = epsilon / alpha_divisor ...
    #[serde(default = "defaults::alpha_divisor")]
    pub alpha_divisor: f64,
    /// ... unless an absolute alpha is forced here.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "defaults::mu")]
    pub mu: f64,
    #[serde(default = "defaults::restarts")]
    pub restarts: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            sample_count: defaults::sample_count(),
            epsilons: defaults::epsilons(),
            families: defaults::families(),
            attack_steps: defaults::attack_steps(),
            alpha_divisor: defaults::alpha_divisor(),
            alpha: None,
            mu: defaults::mu(),
            restarts: defaults::restarts(),
        }
    }
}

impl EvaluationConfig {
    pub fn attack_spec(&self, family: AttackFamily, epsilon: f64) -> AttackSpec {
        AttackSpec {
            family,
            epsilon: epsilon as Scalar,
            steps: self.attack_steps,
            alpha: self.alpha.unwrap_or(epsilon / self.alpha_divisor) as Scalar,
            mu: self.mu as Scalar,
            restarts: self.restarts,
        }
    }
}

/// How the hold-out surrogate ensemble (black-box crafting source) is
/// trained: unprotected by default, with its own seed stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    #[serde(default = "defaults::surrogate_gamma2")]
    pub gamma2: f64,
    #[serde(default = "defaults::seed_offset")]
    pub seed_offset: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig { gamma2: defaults::surrogate_gamma2(), seed_offset: defaults::seed_offset() }
    }
}

/// Which ensemble a training run produces. The surrogate role shifts the
/// initialization and batch-order streams (same data, different models) and
/// swaps in the surrogate's penalty weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Target,
    Surrogate,
}

impl Role {
    pub fn stream_offset(&self, config: &ExperimentConfig) -> u64 {
        match self {
            Role::Target => 0,
            Role::Surrogate => config.surrogate.seed_offset,
        }
    }

    pub fn gamma2(&self, config: &ExperimentConfig) -> f64 {
        match self {
            Role::Target => config.parl.gamma2,
            Role::Surrogate => config.surrogate.gamma2,
        }
    }

    pub fn suffix(&self) -> &'static str {
        match self {
            Role::Target => "",
            Role::Surrogate => "-surrogate",
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("bad config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the canonical TOML encoding.
    pub fn digest(&self) -> [u8; 32] {
        crate::nn::checkpoint::digest_bytes(self.to_toml_string().as_bytes())
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Run directory name: `<name><role suffix>-<digest prefix>`.
    pub fn run_id(&self, role: Role) -> String {
        format!("{}{}-{}", self.name, role.suffix(), &self.digest_hex()[..8])
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.ensemble.size == 0 {
            return Err(Error::config("ensemble size must be at least 1"));
        }
        let spec = self.model.build()?;
        self.parl.resolve(&spec, self.parl.gamma2)?;
        self.parl.resolve(&spec, self.surrogate.gamma2)?;
        if self.optimizer.lr < 0.0 {
            return Err(Error::config("learning rate must be non-negative"));
        }
        if self.training.batch_size == 0 || self.training.epochs == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if self.training.augment.is_some() && !self.dataset.is_image() {
            return Err(Error::config("augmentation requires an image dataset"));
        }
        if self.evaluation.sample_count == 0 {
            return Err(Error::config("evaluation sample count must be positive"));
        }
        if self.evaluation.epsilons.iter().any(|&e| e < 0.0) {
            return Err(Error::config("epsilons must be non-negative"));
        }
        for &eps in &self.evaluation.epsilons {
            for &family in &self.evaluation.families {
                self.evaluation.attack_spec(family, eps).validate()?;
            }
        }
        Ok(())
    }
}
