//! Loss terms and their weighted combination.
//!
//! All terms are sums over pixels, not means:
//!
//! ```text
//! L = L_ce(src) + λ₁·(L_dis(src) + L_dis(tgt)) + λ₂·(L_ce(tgt, anchor) + L_ce(tgt, prob))
//! ```
//!
//! Pixel targets are `Option<usize>`: `None` masks the pixel out of a term.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::model::{Bound, Discriminator};
use crate::tensor::{Tape, Var};

/// Probabilities are clamped to this floor before `ln`.
pub const PROB_FLOOR: f64 = 1e-12;

fn dims2(tape: &Tape, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match tape.shape(v) {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, &[0, 0], other)),
    }
}

/// `−Σ_j log p[j, target_j]` over pixels with a target.
pub fn ce_loss(tape: &mut Tape, probs: Var, targets: &[Option<usize>]) -> Result<Var> {
    let (p, c) = dims2(tape, probs, "ce_loss")?;
    if targets.len() != p {
        return Err(Error::shape("ce_loss targets", &[p], &[targets.len()]));
    }
    let mut onehot = vec![0.0; p * c];
    for (j, t) in targets.iter().enumerate() {
        if let Some(k) = *t {
            if k >= c {
                return Err(Error::Contract(format!(
                    "label {k} at pixel {j} outside [0, {c})"
                )));
            }
            onehot[j * c + k] = 1.0;
        }
    }
    let mask = tape.constant(vec![p, c], onehot)?;
    let logp = tape.log_clamped(probs, PROB_FLOOR);
    let nll = tape.scale(logp, -1.0);
    let picked = tape.mul(nll, mask)?;
    Ok(tape.sum(picked))
}

/// `Σ_j ‖anchor[target_j] − feature_j‖²` over pixels with a target. Anchors
/// enter as constants, so gradients reach the features only.
pub fn dis_loss(
    tape: &mut Tape,
    features: Var,
    targets: &[Option<usize>],
    anchors: &AnchorSet,
) -> Result<Var> {
    let (p, f) = dims2(tape, features, "dis_loss")?;
    if targets.len() != p {
        return Err(Error::shape("dis_loss targets", &[p], &[targets.len()]));
    }
    if f != anchors.feature_dim() {
        return Err(Error::shape(
            "dis_loss anchors",
            &[f],
            &[anchors.feature_dim()],
        ));
    }
    let mut centers = vec![0.0; p * f];
    let mut mask = vec![0.0; p * f];
    for (j, t) in targets.iter().enumerate() {
        let Some(k) = *t else { continue };
        let anchor = anchors.anchor(k).ok_or_else(|| {
            Error::Contract(format!(
                "pixel {j} targets category {k}, which has no valid anchor"
            ))
        })?;
        centers[j * f..(j + 1) * f].copy_from_slice(anchor);
        mask[j * f..(j + 1) * f].fill(1.0);
    }
    let centers = tape.constant(vec![p, f], centers)?;
    let mask = tape.constant(vec![p, f], mask)?;
    let diff = tape.sub(features, centers)?;
    let sq = tape.mul(diff, diff)?;
    let masked = tape.mul(sq, mask)?;
    Ok(tape.sum(masked))
}

/// The five scalar terms of the adaptation objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ce_source: Var,
    pub dis_source: Var,
    pub ce_target_anchor: Var,
    pub dis_target: Var,
    pub ce_target_prob: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// λ₁, weight of both distance terms.
    pub lambda_dis: f64,
    /// λ₂, weight of both target cross-entropy terms.
    pub lambda_ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dis: 0.3,
            lambda_ce: 0.7,
        }
    }
}

/// `ce_s + λ₁·(dis_s + dis_t) + λ₂·(ce_t + ce_tP)` on the tape.
pub fn combine(tape: &mut Tape, terms: &LossTerms, weights: LossWeights) -> Result<Var> {
    let dis = tape.add(terms.dis_source, terms.dis_target)?;
    let dis = tape.scale(dis, weights.lambda_dis);
    let ce = tape.add(terms.ce_target_anchor, terms.ce_target_prob)?;
    let ce = tape.scale(ce, weights.lambda_ce);
    let total = tape.add(terms.ce_source, dis)?;
    tape.add(total, ce)
}

/// Scalar values of every term plus the pixel counts each term summed over.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_source: f64,
    pub dis_source: f64,
    pub ce_target_anchor: f64,
    pub dis_target: f64,
    pub ce_target_prob: f64,
    pub total: f64,
    pub source_pixels: u64,
    pub anchor_active: u64,
    pub prob_active: u64,
}

impl LossBreakdown {
    pub fn read(tape: &Tape, terms: &LossTerms, total: Var) -> Self {
        Self {
            ce_source: tape.item(terms.ce_source),
            dis_source: tape.item(terms.dis_source),
            ce_target_anchor: tape.item(terms.ce_target_anchor),
            dis_target: tape.item(terms.dis_target),
            ce_target_prob: tape.item(terms.ce_target_prob),
            total: tape.item(total),
            ..Self::default()
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.ce_source,
            self.dis_source,
            self.ce_target_anchor,
            self.dis_target,
            self.ce_target_prob,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Every term divided by the number of pixels it summed over.
    pub fn per_pixel(&self) -> [f64; 5] {
        let div = |v: f64, n: u64| if n == 0 { 0.0 } else { v / n as f64 };
        [
            div(self.ce_source, self.source_pixels),
            div(self.dis_source, self.source_pixels),
            div(self.ce_target_anchor, self.anchor_active),
            div(self.dis_target, self.anchor_active),
            div(self.ce_target_prob, self.prob_active),
        ]
    }
}

/// Binary cross-entropy on discriminator logits, source = 1, target = 0.
///
/// Returns `(discriminator_loss, alignment_loss)`:
/// `discriminator_loss = Σ softplus(−z_src) + Σ softplus(z_tgt)` and
/// `alignment_loss = Σ softplus(−z_tgt)`, i.e. target features scored
/// against the source label. Which side receives gradients is decided by
/// how the caller bound the discriminator and produced the features.
pub fn adversarial_losses(
    tape: &mut Tape,
    disc: &Discriminator,
    bound: &Bound,
    source_features: Var,
    target_features: Var,
) -> Result<(Var, Var)> {
    let zs = disc.logits_on(tape, bound, source_features)?;
    let zt = disc.logits_on(tape, bound, target_features)?;
    let neg_zs = tape.scale(zs, -1.0);
    let src = tape.softplus(neg_zs);
    let src = tape.sum(src);
    let tgt = tape.softplus(zt);
    let tgt = tape.sum(tgt);
    let disc_loss = tape.add(src, tgt)?;
    let neg_zt = tape.scale(zt, -1.0);
    let align = tape.softplus(neg_zt);
    let align = tape.sum(align);
    Ok((disc_loss, align))
}
