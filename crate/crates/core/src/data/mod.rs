//! Digit-image datasets: IDX ingestion, preprocessing, sampling protocols
//! and synthetic domain shifts.

mod idx;
mod preprocess;
mod sampling;
mod synth;

use std::fmt;

use fan_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{FanError, Result};

pub use idx::{load_idx, read_idx, write_idx_images, write_idx_labels, IdxArray};
pub use preprocess::{resize_bilinear, rgb_to_gray, to_model_input, LUMA};
pub use sampling::{sample_protocol, shuffled_indices};
pub use synth::{procedural_digits, synth_domain_pair, Shift};

pub const IMAGE_SIDE: usize = 28;
pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        })
    }
}

/// A set of `[N, 1, 28, 28]` images in `[0, 1]`.
///
/// Labels are either visible (supervised source data, test sets) or
/// withheld. Withheld labels stay attached for scoring only; training code
/// reads [`DomainDataset::labels`], which returns `None` for them.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    images: Tensor,
    labels: Option<Vec<usize>>,
    withheld: Option<Vec<usize>>,
    pub domain: DomainTag,
    pub provenance: String,
}

impl DomainDataset {
    pub fn new(
        images: Tensor,
        labels: Option<Vec<usize>>,
        domain: DomainTag,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != IMAGE_SIDE || s[3] != IMAGE_SIDE {
            return Err(FanError::Data(format!("images must be [N,1,28,28], got {s:?}")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(FanError::Data("pixel values outside [0, 1]".into()));
        }
        if let Some(l) = &labels {
            check_labels(l, s[0])?;
        }
        Ok(DomainDataset {
            images,
            labels,
            withheld: None,
            domain,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// Labels visible to training code.
    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Labels usable for scoring: visible ones, else withheld ones.
    pub fn evaluation_labels(&self) -> Option<&[usize]> {
        self.labels.as_deref().or(self.withheld.as_deref())
    }

    /// Hides the labels from training code while keeping them for scoring.
    pub fn withhold_labels(mut self) -> Self {
        if let Some(l) = self.labels.take() {
            self.withheld = Some(l);
        }
        self
    }

    /// Drops every label, including withheld ones.
    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self.withheld = None;
        self
    }

    pub fn with_domain(mut self, domain: DomainTag) -> Self {
        self.domain = domain;
        self
    }

    /// Subset in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<DomainDataset> {
        let pick = |l: &Vec<usize>| idx.iter().map(|&i| l[i]).collect::<Vec<_>>();
        Ok(DomainDataset {
            images: self.images.select_rows(idx)?,
            labels: self.labels.as_ref().map(pick),
            withheld: self.withheld.as_ref().map(pick),
            domain: self.domain,
            provenance: self.provenance.clone(),
        })
    }

    /// Replaces the pixels, keeping labels and tags. Values are clamped to
    /// `[0, 1]`.
    pub(crate) fn map_pixels(&self, images: Tensor, provenance: String) -> DomainDataset {
        DomainDataset {
            images: images.map(|v| v.clamp(0.0, 1.0)),
            labels: self.labels.clone(),
            withheld: self.withheld.clone(),
            domain: self.domain,
            provenance,
        }
    }

    /// Per-class counts over the evaluation labels.
    pub fn class_histogram(&self) -> Option<[usize; NUM_CLASSES]> {
        self.evaluation_labels().map(|l| {
            let mut h = [0; NUM_CLASSES];
            l.iter().for_each(|&c| h[c] += 1);
            h
        })
    }
}

pub(crate) fn check_labels(labels: &[usize], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(FanError::Data(format!("{} labels for {n} images", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&c| c >= NUM_CLASSES) {
        return Err(FanError::Data(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    Ok(())
}

/// One-hot encoding of a class index.
pub fn one_hot(class: usize) -> [f32; NUM_CLASSES] {
    let mut v = [0.0; NUM_CLASSES];
    v[class] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn withheld_labels_are_hidden_but_scorable() {
        let ds = DomainDataset::new(Tensor::zeros(&[2, 1, 28, 28]), Some(vec![3, 4]), DomainTag::Target, "t")
            .unwrap()
            .withhold_labels();
        assert!(ds.labels().is_none());
        assert_eq!(ds.evaluation_labels(), Some(&[3, 4][..]));
        assert!(ds.clone().without_labels().evaluation_labels().is_none());
    }

    #[test]
    fn rejects_out_of_range_pixels_and_labels() {
        let bad = Tensor::full(&[1, 1, 28, 28], 1.5);
        assert!(DomainDataset::new(bad, None, DomainTag::Source, "x").is_err());
        let ok = Tensor::zeros(&[1, 1, 28, 28]);
        assert!(DomainDataset::new(ok, Some(vec![10]), DomainTag::Source, "x").is_err());
    }

    #[test]
    fn one_hot_has_single_one() {
        let v = one_hot(7);
        assert_eq!(v.iter().sum::<f32>(), 1.0);
        assert_eq!(v[7], 1.0);
    }
}
