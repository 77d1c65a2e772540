//! Preference and improvement losses with analytic gradients, plus the
//! finite-difference harness that verifies them.
//!
//! All losses are `-log(sigmoid(margin))` shapes: nonnegative, equal to
//! `ln 2` exactly at zero margin, computed in double precision. Reference
//! quantities are constants; gradients flow only to the policy-side inputs
//! listed by each function.

use crate::error::{Error, Result};
use crate::linalg::{cosine, cosine_grad_a, sigmoid, softplus};
use serde::{Deserialize, Serialize};

/// Hyperparameters of the preference losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceHyper {
    /// Temperature of the text preference loss.
    pub beta_t: f64,
    /// Temperature of the segmentation preference loss.
    pub beta_s: f64,
    /// Extra weight on differing-token log-likelihoods.
    pub lambda: f64,
    /// Margin scale inside the improvement losses.
    pub improvement_scale: f64,
}

impl Default for PreferenceHyper {
    fn default() -> Self {
        PreferenceHyper { beta_t: 0.5, beta_s: 10.0, lambda: 5.0, improvement_scale: 10.0 }
    }
}

impl PreferenceHyper {
    pub fn validate(&self) -> Result<()> {
        if self.beta_t <= 0.0 || self.beta_s <= 0.0 || self.lambda <= 0.0 || self.improvement_scale <= 0.0 {
            return Err(Error::Config("preference hyperparameters must be positive".into()));
        }
        Ok(())
    }
}

/// A loss value together with the partials with respect to the flattened
/// policy-side inputs. Each loss documents its flattening order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradients: Vec<f64>,
}

impl LossValue {
    fn check_finite(self) -> Result<Self> {
        if !self.value.is_finite() || self.gradients.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite loss or gradient".into()));
        }
        Ok(self)
    }
}

fn weight_markers(len: usize, l: &[usize]) -> Result<Vec<bool>> {
    let mut marked = vec![false; len];
    for &i in l {
        if i >= len {
            return Err(Error::Index(format!("index {i} out of range for length {len}")));
        }
        marked[i] = true;
    }
    Ok(marked)
}

/// Length-normalized log-likelihood with extra weight `lambda` on the listed
/// token positions: `(1/|y|) (sum_{i not in l} lp_i + lambda * sum_{i in l} lp_i)`.
pub fn weighted_log_likelihood(logps: &[f64], l: &[usize], lambda: f64) -> Result<f64> {
    if logps.is_empty() {
        return Err(Error::shape("weighted_log_likelihood needs at least one token"));
    }
    let marked = weight_markers(logps.len(), l)?;
    let mut total = 0.0;
    for (lp, m) in logps.iter().zip(&marked) {
        total += if *m { lambda * lp } else { *lp };
    }
    Ok(total / logps.len() as f64)
}

/// Text preference loss over one `(y, y_c)` pair.
///
/// `-log sigmoid(beta_t [W(policy_yc) - W(ref_yc)] - beta_t [W(policy_y) - W(ref_y)])`
/// with `W` the weighted log-likelihood above. Gradients are taken with
/// respect to the policy log-probabilities only, flattened as
/// `[d/d policy_yc..., d/d policy_y...]`.
pub fn text_dpo_loss(
    policy_yc: &[f64],
    policy_y: &[f64],
    ref_yc: &[f64],
    ref_y: &[f64],
    l_y: &[usize],
    l_yc: &[usize],
    hyper: &PreferenceHyper,
) -> Result<LossValue> {
    if policy_yc.len() != ref_yc.len() || policy_y.len() != ref_y.len() {
        return Err(Error::shape("policy/reference sequence lengths differ"));
    }
    let beta = hyper.beta_t;
    let w_pol_yc = weighted_log_likelihood(policy_yc, l_yc, hyper.lambda)?;
    let w_ref_yc = weighted_log_likelihood(ref_yc, l_yc, hyper.lambda)?;
    let w_pol_y = weighted_log_likelihood(policy_y, l_y, hyper.lambda)?;
    let w_ref_y = weighted_log_likelihood(ref_y, l_y, hyper.lambda)?;
    let margin = beta * (w_pol_yc - w_ref_yc) - beta * (w_pol_y - w_ref_y);
    let value = softplus(-margin);
    let dmargin = sigmoid(margin) - 1.0;

    let marked_yc = weight_markers(policy_yc.len(), l_yc)?;
    let marked_y = weight_markers(policy_y.len(), l_y)?;
    let mut gradients = Vec::with_capacity(policy_yc.len() + policy_y.len());
    let n_yc = policy_yc.len() as f64;
    for m in &marked_yc {
        let w = if *m { hyper.lambda } else { 1.0 };
        gradients.push(dmargin * beta * w / n_yc);
    }
    let n_y = policy_y.len() as f64;
    for m in &marked_y {
        let w = if *m { hyper.lambda } else { 1.0 };
        gradients.push(-dmargin * beta * w / n_y);
    }
    LossValue { value, gradients }.check_finite()
}

/// Per-target segmentation preference loss.
///
/// Rewards move the policy's mid-quality embedding toward the reference best
/// embedding and away from the reference worst one; the indicator gates the
/// term to zero once the policy already beats the reference best mask.
/// Gradient flattening: `[d/d f_policy_mid...]`.
pub fn seg_preference_loss(
    f_policy_mid: &[f64],
    f_ref_best: &[f64],
    f_ref_mid: &[f64],
    f_ref_worst: &[f64],
    indicator_active: bool,
    beta_s: f64,
) -> Result<LossValue> {
    let d = f_policy_mid.len();
    if f_ref_best.len() != d || f_ref_mid.len() != d || f_ref_worst.len() != d {
        return Err(Error::shape("embedding dimensions differ"));
    }
    if !indicator_active {
        return Ok(LossValue { value: 0.0, gradients: vec![0.0; d] });
    }
    let r_w = beta_s * (cosine(f_policy_mid, f_ref_best)? - cosine(f_ref_mid, f_ref_best)?);
    let r_l = beta_s * (cosine(f_policy_mid, f_ref_worst)? - cosine(f_ref_mid, f_ref_worst)?);
    let margin = r_w - r_l;
    let value = softplus(-margin);
    let dmargin = sigmoid(margin) - 1.0;
    let g_best = cosine_grad_a(f_policy_mid, f_ref_best)?;
    let g_worst = cosine_grad_a(f_policy_mid, f_ref_worst)?;
    let gradients = g_best
        .iter()
        .zip(&g_worst)
        .map(|(gb, gw)| dmargin * beta_s * (gb - gw))
        .collect();
    LossValue { value, gradients }.check_finite()
}

/// Text improvement loss: pushes the refined response's sentence embedding
/// closer to the ground truth than each original response's embedding.
/// `refined_prob` is a constant weight (no gradient flows through it).
/// Gradient flattening: `[d/d h_refined...]`.
pub fn text_improvement_loss(
    refined_prob: f64,
    h_refined: &[f64],
    h_gt: &[f64],
    h_originals: &[Vec<f64>],
    scale: f64,
) -> Result<LossValue> {
    if h_originals.is_empty() {
        return Err(Error::shape("need at least one original response embedding"));
    }
    if !(refined_prob > 0.0 && refined_prob <= 1.0) {
        return Err(Error::Numeric(format!("refined_prob {refined_prob} outside (0, 1]")));
    }
    let d = h_refined.len();
    if h_gt.len() != d || h_originals.iter().any(|h| h.len() != d) {
        return Err(Error::shape("sentence embedding dimensions differ"));
    }
    let k = h_originals.len() as f64;
    let cos_refined = cosine(h_refined, h_gt)?;
    let mut value = 0.0;
    let mut dmargin_sum = 0.0;
    for h_k in h_originals {
        let margin = scale * refined_prob * (cos_refined - cosine(h_k, h_gt)?);
        value += softplus(-margin);
        dmargin_sum += sigmoid(margin) - 1.0;
    }
    value /= k;
    let g_cos = cosine_grad_a(h_refined, h_gt)?;
    let factor = dmargin_sum / k * scale * refined_prob;
    let gradients = g_cos.iter().map(|g| factor * g).collect();
    LossValue { value, gradients }.check_finite()
}

/// Segmentation improvement loss over per-target IoUs of the refined masks
/// versus each original response's masks.
/// Gradient flattening: `[d/d refined_ious...]`.
pub fn seg_improvement_loss(
    refined_ious: &[f64],
    original_ious: &[Vec<f64>],
    scale: f64,
) -> Result<LossValue> {
    let n = refined_ious.len();
    if n == 0 || original_ious.is_empty() {
        return Err(Error::shape("seg_improvement_loss needs at least one target and response"));
    }
    if original_ious.iter().any(|row| row.len() != n) {
        return Err(Error::shape("original IoU rows must match target count"));
    }
    let in_range = |v: f64| (-1e-3..=1.0 + 1e-3).contains(&v);
    if !refined_ious.iter().copied().all(in_range)
        || !original_ious.iter().flatten().copied().all(in_range)
    {
        return Err(Error::Numeric("IoU outside [0, 1]".into()));
    }
    let k = original_ious.len() as f64;
    let mut value = 0.0;
    let mut gradients = vec![0.0; n];
    for row in original_ious {
        for (i, (&r, &o)) in refined_ious.iter().zip(row).enumerate() {
            let x = scale * (r - o);
            value += softplus(-x);
            gradients[i] += (sigmoid(x) - 1.0) * scale;
        }
    }
    let norm = 1.0 / (k * n as f64);
    value *= norm;
    for g in &mut gradients {
        *g *= norm;
    }
    LossValue { value, gradients }.check_finite()
}

/// Sum of the text and segmentation preference parts; gradients concatenate
/// in `[text..., seg...]` order.
pub fn combined_preference_loss(text: &LossValue, seg: &LossValue) -> LossValue {
    let mut gradients = Vec::with_capacity(text.gradients.len() + seg.gradients.len());
    gradients.extend_from_slice(&text.gradients);
    gradients.extend_from_slice(&seg.gradients);
    LossValue { value: text.value + seg.value, gradients }
}

/// Result of one finite-difference verification run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub coords: usize,
    pub passed: bool,
}

/// Verify analytic gradients against central finite differences.
///
/// `loss_fn` maps a flat input vector to a loss value with analytic
/// gradients of the same length. The relative error per coordinate is
/// `|a - n| / max(|a|, |n|)`, treated as zero when both are below 1e-7.
pub fn finite_difference_check(
    loss_fn: &dyn Fn(&[f64]) -> Result<LossValue>,
    inputs: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let base = loss_fn(inputs)?;
    if !base.value.is_finite() {
        return Err(Error::Numeric("non-finite loss at check point".into()));
    }
    if base.gradients.len() != inputs.len() {
        return Err(Error::shape(format!(
            "gradient length {} does not match input length {}",
            base.gradients.len(),
            inputs.len()
        )));
    }
    let mut max_rel_err = 0.0f64;
    let mut worst = 0usize;
    let mut point = inputs.to_vec();
    for i in 0..inputs.len() {
        point[i] = inputs[i] + step;
        let up = loss_fn(&point)?.value;
        point[i] = inputs[i] - step;
        let down = loss_fn(&point)?.value;
        point[i] = inputs[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric("non-finite loss during finite differences".into()));
        }
        let numeric = (up - down) / (2.0 * step);
        let analytic = base.gradients[i];
        let denom = analytic.abs().max(numeric.abs());
        let rel = if denom < 1e-7 { 0.0 } else { (analytic - numeric).abs() / denom };
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_coord: worst,
        coords: inputs.len(),
        passed: max_rel_err <= tolerance,
    })
}
