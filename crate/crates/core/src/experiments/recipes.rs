use serde::{Deserialize, Serialize};

use super::datasets::DomainSpec;
use crate::config::{ModelConfig, TrainConfig};
use crate::data::Shift;
use crate::error::{FanError, Result};
use crate::model::Variant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DomainSpec,
    pub target: DomainSpec,
}

/// A fully specified, seeded experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub name: String,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Names accepted by [`Recipe::builtin`].
pub const BUILTIN: &[&str] = &[
    "mnist-usps-sampled",
    "usps-mnist-sampled",
    "mnist-usps-full",
    "usps-mnist-full",
    "svhn-mnist",
    "svhn-mnist-subset",
    "synth-invert",
    "synth-noise",
    "synth-brightness",
    "ablation-joint",
    "ablation-separation",
    "ablation-concatenation",
    "ablation-full",
];

const SEEDS: [u64; 3] = [0, 1, 2];

fn idx(dataset: &str, train_samples: Option<usize>) -> DomainSpec {
    DomainSpec::Idx {
        dataset: dataset.into(),
        train_samples,
        test_samples: None,
    }
}

fn synthetic(shift: Option<Shift>, base_seed: u64) -> DomainSpec {
    DomainSpec::Synthetic {
        shift,
        train_samples: 2000,
        test_samples: 1000,
        base_seed,
    }
}

fn recipe(name: &str, source: DomainSpec, target: DomainSpec, train: TrainConfig) -> Recipe {
    Recipe {
        name: name.into(),
        seeds: SEEDS.to_vec(),
        model: ModelConfig::default(),
        train,
        data: DataConfig { source, target },
    }
}

/// Settings for the synthetic pairs: few, short epochs.
fn synthetic_train() -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        source_epochs: 3,
        target_epochs: 3,
        ..TrainConfig::default()
    }
}

impl Recipe {
    pub fn builtin(name: &str) -> Result<Recipe> {
        let def = TrainConfig::default;
        let shifted = |shift: Shift| {
            recipe(
                name,
                synthetic(None, 101),
                synthetic(Some(shift), 202),
                synthetic_train(),
            )
        };
        Ok(match name {
            "mnist-usps-sampled" => recipe(name, idx("mnist", Some(2000)), idx("usps", Some(1800)), def()),
            "usps-mnist-sampled" => recipe(name, idx("usps", Some(1800)), idx("mnist", Some(2000)), def()),
            "mnist-usps-full" => recipe(name, idx("mnist", None), idx("usps", None), def()),
            "usps-mnist-full" => recipe(name, idx("usps", None), idx("mnist", None), def()),
            "svhn-mnist" => recipe(name, idx("svhn", None), idx("mnist", None), def()),
            "svhn-mnist-subset" => recipe(
                name,
                idx("svhn", Some(10_000)),
                idx("mnist", Some(10_000)),
                TrainConfig {
                    source_epochs: 10,
                    target_epochs: 10,
                    ..def()
                },
            ),
            "synth-invert" => shifted(Shift::Invert),
            "synth-noise" => shifted(Shift::Noise),
            "synth-brightness" => shifted(Shift::Brightness),
            _ => match name.strip_prefix("ablation-").map(str::parse::<Variant>) {
                Some(Ok(v)) => {
                    let mut r = shifted(Shift::Invert);
                    r.model.variant = v;
                    r
                }
                _ => {
                    return Err(FanError::Config(format!(
                        "unknown recipe `{name}`; built-in recipes: {}",
                        BUILTIN.join(", ")
                    )))
                }
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(FanError::Config(format!("invalid recipe name `{}`", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(FanError::Config(format!("recipe {} lists no seeds", self.name)));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(FanError::Config(format!("recipe {} repeats a seed", self.name)));
        }
        self.model.split.validate(self.model.variant)?;
        self.train.validate()
    }

    /// The same recipe restricted to one seed, with that seed as the
    /// training root seed.
    pub fn for_seed(&self, seed: u64) -> Recipe {
        let mut r = self.clone();
        r.seeds = vec![seed];
        r.train.seed = seed;
        r
    }
}
