//! Training objectives. Every loss is a mean over the batch.

use fan_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{FanError, Result};
use crate::model::{FanModel, FanVars, Mode, Variant};

/// Weights of the source-stage (`alpha`, `beta`) and target-stage
/// (`mu`, `nu`) loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f32,
    pub beta: f32,
    pub mu: f32,
    pub nu: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 2.0,
            beta: 1.0,
            mu: 2.0,
            nu: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("mu", self.mu), ("nu", self.nu)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(FanError::Config(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Graph handles for the source-stage objective and its terms.
#[derive(Clone, Copy, Debug)]
pub struct SourceLoss {
    pub total: Var,
    pub classification: Var,
    /// Present only for the variant that uses the mutual penalty.
    pub mutual: Option<Var>,
    pub reconstruction: Var,
}

/// Concrete values of a [`SourceLoss`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceBreakdown {
    pub total: f32,
    pub classification: f32,
    pub mutual: Option<f32>,
    pub reconstruction: f32,
}

impl SourceLoss {
    pub fn values(&self, g: &Graph) -> SourceBreakdown {
        SourceBreakdown {
            total: g.value(self.total).item(),
            classification: g.value(self.classification).item(),
            mutual: self.mutual.map(|m| g.value(m).item()),
            reconstruction: g.value(self.reconstruction).item(),
        }
    }
}

/// `alpha·L_c + beta·L_m + L_r`, with `L_m` only for [`Variant::Full`].
#[allow(clippy::too_many_arguments)]
pub fn source_total(
    g: &mut Graph,
    variant: Variant,
    vars: FanVars,
    recon: Var,
    x: Var,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<SourceLoss> {
    let classification = classification(g, vars.logits, labels)?;
    let mutual = if variant.uses_mutual_loss() {
        Some(mutual(g, vars.h_d, vars.h_t)?)
    } else {
        None
    };
    let reconstruction = reconstruction(g, recon, x)?;
    let mut terms = vec![(weights.alpha, classification), (1.0, reconstruction)];
    if let Some(m) = mutual {
        terms.push((weights.beta, m));
    }
    let total = match weighted_sum(g, &terms)? {
        Some(t) => t,
        None => g.scale(reconstruction, 0.0)?,
    };
    Ok(SourceLoss {
        total,
        classification,
        mutual,
        reconstruction,
    })
}

/// Cross-entropy of class logits against integer labels.
pub fn classification(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    Ok(g.cross_entropy(logits, labels)?)
}

/// Mean squared inner product between the two halves of the code.
pub fn mutual(g: &mut Graph, h_d: Var, h_t: Var) -> Result<Var> {
    let dots = g.row_dot(h_d, h_t)?;
    let sq = g.square(dots)?;
    Ok(g.mean(sq)?)
}

/// Mean squared pixel error.
pub fn reconstruction(g: &mut Graph, recon: Var, x: Var) -> Result<Var> {
    Ok(g.mse(recon, x)?)
}

/// Discriminator objective: source scored as 1, target as 0.
pub fn discriminator(g: &mut Graph, src_scores: Var, tgt_scores: Var) -> Result<Var> {
    let a = g.bce_with_logits(src_scores, 1.0)?;
    let b = g.bce_with_logits(tgt_scores, 0.0)?;
    Ok(g.add(a, b)?)
}

/// Inverted-label objective for the target encoder: target scored as 1.
pub fn mapper_adversarial(g: &mut Graph, tgt_scores: Var) -> Result<Var> {
    Ok(g.bce_with_logits(tgt_scores, 1.0)?)
}

/// `a·x + b·y`, skipping terms whose weight is zero.
pub(crate) fn weighted_sum(g: &mut Graph, terms: &[(f32, Var)]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let t = if w == 1.0 { v } else { g.scale(v, w)? };
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(acc)
}

fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f32> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).item())
}

/// Tensor-level forms of the losses above.
pub mod value {
    use super::*;

    pub fn classification(logits: &Tensor, labels: &[usize]) -> Result<f32> {
        eval(|g| {
            let l = g.input(logits.clone());
            super::classification(g, l, labels)
        })
    }

    pub fn mutual(h_d: &Tensor, h_t: &Tensor) -> Result<f32> {
        eval(|g| {
            let (a, b) = (g.input(h_d.clone()), g.input(h_t.clone()));
            super::mutual(g, a, b)
        })
    }

    pub fn reconstruction(recon: &Tensor, x: &Tensor) -> Result<f32> {
        eval(|g| {
            let (a, b) = (g.input(recon.clone()), g.input(x.clone()));
            super::reconstruction(g, a, b)
        })
    }

    pub fn discriminator(src_scores: &Tensor, tgt_scores: &Tensor) -> Result<f32> {
        eval(|g| {
            let (a, b) = (g.input(src_scores.clone()), g.input(tgt_scores.clone()));
            super::discriminator(g, a, b)
        })
    }

    pub fn mapper_adversarial(tgt_scores: &Tensor) -> Result<f32> {
        eval(|g| {
            let a = g.input(tgt_scores.clone());
            super::mapper_adversarial(g, a)
        })
    }

    /// Source-stage objective of `model` on one labeled batch.
    pub fn source_total(
        model: &FanModel,
        x: &Tensor,
        labels: &[usize],
        weights: &LossWeights,
        mode: Mode,
    ) -> Result<SourceBreakdown> {
        let mut g = Graph::new();
        let bound = model.store().bind_frozen(&mut g);
        let xv = g.input(x.clone());
        let vars = model.encode_vars_frozen(&mut g, &bound, xv, mode)?;
        let recon = model.decode_vars_frozen(&mut g, &bound, vars, mode)?;
        let loss = super::source_total(&mut g, model.variant(), vars, recon, xv, labels, weights)?;
        Ok(loss.values(&g))
    }
}
