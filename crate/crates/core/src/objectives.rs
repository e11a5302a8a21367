//! Classification head, cross-entropy, fused-feature concatenation and the
//! supervised inter-class contrastive loss.

use crate::layers::Linear;
use crate::rng::SeededRng;
use crate::{Error, ParamStore, Result, Tape, Var};

/// Added to the L2 norm before dividing.
pub const NORM_EPS: f64 = 1e-12;

/// Two independent `d → C` classifiers, one per fused stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmotionHead {
    pub mt: Linear,
    pub tm: Linear,
    pub classes: usize,
}

impl EmotionHead {
    pub fn new(store: &mut ParamStore, model_dim: usize, classes: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self {
            mt: Linear::new(store, "head.mt", model_dim, classes, std, rng),
            tm: Linear::new(store, "head.tm", model_dim, classes, std, rng),
            classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct IclConfig {
    pub tau: f64,
    pub lambda: f64,
    /// L2-normalize the concatenated features before similarities.
    pub normalize: bool,
    /// Force raw dot products regardless of `normalize`.
    pub raw_similarity: bool,
}

impl Default for IclConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda: 1.0,
            normalize: true,
            raw_similarity: false,
        }
    }
}

impl IclConfig {
    pub fn normalizes(&self) -> bool {
        self.normalize && !self.raw_similarity
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(alloc::format!("icl.tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(alloc::format!(
                "icl.lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Logits `(W₁·cls_mt + b₁ + W₂·cls_tm + b₂) / 2` and their softmax, for
/// row-stacked `[K, d]` inputs. Returns `(probabilities, logits)`.
pub fn classify(tape: &mut Tape<'_>, cls_mt: Var, cls_tm: Var, head: &EmotionHead) -> Result<(Var, Var)> {
    let a = head.mt.forward(tape, cls_mt)?;
    let b = head.tm.forward(tape, cls_tm)?;
    let sum = tape.add(a, b)?;
    let logits = tape.scale(sum, 0.5)?;
    let probs = tape.softmax_rows(logits)?;
    Ok((probs, logits))
}

/// Mean of `−ln p(r_i)` over the batch.
pub fn erc_loss(tape: &mut Tape<'_>, probs: Var, labels: &[usize]) -> Result<Var> {
    tape.nll(probs, labels)
}

/// `[cls_mt ⊕ cls_tm]` per row, optionally L2-normalized.
pub fn concat_fused(tape: &mut Tape<'_>, cls_mt: Var, cls_tm: Var, normalize: bool) -> Result<Var> {
    let f = tape.concat_cols(&[cls_mt, cls_tm])?;
    if normalize {
        tape.l2_normalize_rows(f, NORM_EPS)
    } else {
        Ok(f)
    }
}

/// Supervised contrastive loss over the rows of `features`, summed over
/// anchors; see [`Tape::supcon`].
pub fn icl_loss(tape: &mut Tape<'_>, features: Var, labels: &[usize], cfg: &IclConfig) -> Result<Var> {
    cfg.validate()?;
    let k = tape.dims(features).0;
    if k < 2 {
        return Err(Error::BatchTooSmall(k));
    }
    tape.supcon(features, labels, cfg.tau)
}

/// `erc + λ·icl`.
pub fn total_loss(tape: &mut Tape<'_>, erc: Var, icl: Option<Var>, lambda: f64) -> Result<Var> {
    match icl {
        Some(icl) if lambda != 0.0 => {
            let weighted = tape.scale(icl, lambda)?;
            tape.add(erc, weighted)
        }
        _ => Ok(erc),
    }
}
