use std::env;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, procedural_digits, sample_protocol, DomainDataset, DomainTag, Shift};
use crate::error::{FanError, Result};
use crate::trainer::{derive_seed, SeedStream};

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "FAN_DATA_ROOT";

/// Where a domain's images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DomainSpec {
    /// `<root>/<dataset>/{train,test}-{images,labels}.idx`.
    Idx {
        dataset: String,
        /// Per-seed random subset of the training split.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_samples: Option<usize>,
        /// Fixed subset of the test split, identical across seeds.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_samples: Option<usize>,
    },
    /// Procedural digits, optionally shifted.
    Synthetic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shift: Option<Shift>,
        train_samples: usize,
        test_samples: usize,
        base_seed: u64,
    },
}

impl DomainSpec {
    pub fn describe(&self) -> String {
        match self {
            DomainSpec::Idx { dataset, .. } => dataset.clone(),
            DomainSpec::Synthetic { shift: None, .. } => "synthetic".into(),
            DomainSpec::Synthetic { shift: Some(s), .. } => format!("synthetic-{}", s.name()),
        }
    }
}

/// Train and test splits of one domain.
#[derive(Clone, Debug)]
pub struct DomainData {
    pub train: DomainDataset,
    pub test: DomainDataset,
}

/// The data root from an explicit path or the environment.
pub fn data_root(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
}

/// Paths of one split of an IDX dataset.
pub fn idx_paths(root: &Path, dataset: &str, split: &str) -> (PathBuf, PathBuf) {
    let dir = root.join(dataset);
    (
        dir.join(format!("{split}-images.idx")),
        dir.join(format!("{split}-labels.idx")),
    )
}

/// Whether both splits of `dataset` exist under `root`.
pub fn idx_available(root: Option<&Path>, dataset: &str) -> bool {
    let Some(root) = root else { return false };
    ["train", "test"].iter().all(|s| {
        let (i, l) = idx_paths(root, dataset, s);
        i.is_file() && l.is_file()
    })
}

fn load_split(root: Option<&Path>, dataset: &str, split: &str, tag: DomainTag) -> Result<DomainDataset> {
    let root = root.ok_or_else(|| {
        FanError::Data(format!(
            "dataset `{dataset}` needs a data root; set {DATA_ROOT_ENV} or pass one explicitly"
        ))
    })?;
    let (images, labels) = idx_paths(root, dataset, split);
    if !images.is_file() || !labels.is_file() {
        return Err(FanError::Data(format!(
            "missing {} or {}",
            images.display(),
            labels.display()
        )));
    }
    load_idx(&images, Some(&labels), tag)
}

fn synthetic(shift: Option<Shift>, n: usize, seed: u64, tag: DomainTag) -> Result<DomainDataset> {
    let base = procedural_digits(n, seed)?;
    let ds = match shift {
        Some(s) => s.apply(&base, seed ^ 0x5151),
        None => base,
    };
    Ok(ds.with_domain(tag))
}

/// Loads a domain. Target training images have their labels withheld.
/// `seed` selects the per-run training subset.
pub fn load_domain(spec: &DomainSpec, tag: DomainTag, root: Option<&Path>, seed: u64) -> Result<DomainData> {
    let stream = match tag {
        DomainTag::Source => 0,
        DomainTag::Target => 1,
    };
    let (train, test) = match spec {
        DomainSpec::Idx {
            dataset,
            train_samples,
            test_samples,
        } => {
            let mut train = load_split(root, dataset, "train", tag)?;
            let mut test = load_split(root, dataset, "test", tag)?;
            if let Some(n) = *train_samples {
                train = sample_protocol(&train, n, derive_seed(seed, SeedStream::DataSampling, stream))
                    .map_err(|e| FanError::Data(e.to_string()))?;
            }
            if let Some(n) = *test_samples {
                test = sample_protocol(&test, n, derive_seed(0, SeedStream::DataSampling, 2 + stream))
                    .map_err(|e| FanError::Data(e.to_string()))?;
            }
            (train, test)
        }
        DomainSpec::Synthetic {
            shift,
            train_samples,
            test_samples,
            base_seed,
        } => (
            synthetic(*shift, *train_samples, derive_seed(*base_seed, SeedStream::DataSampling, 10), tag)?,
            synthetic(*shift, *test_samples, derive_seed(*base_seed, SeedStream::DataSampling, 11), tag)?,
        ),
    };
    let train = match tag {
        DomainTag::Target => train.withhold_labels(),
        DomainTag::Source => train,
    };
    Ok(DomainData { train, test })
}
