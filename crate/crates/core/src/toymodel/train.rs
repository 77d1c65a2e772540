//! The three-stage training driver: supervised finetuning, preference
//! finetuning with a frozen decoder against a frozen reference snapshot, and
//! prompt-embedding-only ensemble training.

use super::{ForcedPass, ModelParams, ParamVars, ToyModel};
use crate::collect::{target_localization_score, Phase, SegPreferenceSample, TextPreferenceSample};
use crate::ensemble::{
    attention_bias, lenient_candidates, preference_scores, text_fusion_layout, BiasMode,
    PreferenceScores,
};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::losses::{
    combined_preference_loss, seg_improvement_loss, seg_preference_loss, text_dpo_loss,
    text_improvement_loss, LossValue, PreferenceHyper,
};
use crate::maskops::{boundary_iou, BandWidth, Mask};
use crate::rngutil::subseed;
use crate::segmenter::{ScoredResponse, Segmenter};
use crate::synth::Sample;
use crate::tape::{Gradients, Tape, Var};
use crate::tokens::TokenSeq;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// The three training stages, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainStage {
    Sft,
    PreferenceFinetune(Phase),
    EnsembleTrain,
}

/// One loss-trace row; stages leave the columns they do not produce at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub l_t: f64,
    pub l_s: f64,
    pub l_pre: f64,
    pub l_ti: f64,
    pub l_si: f64,
    pub total: f64,
}

impl TraceRow {
    pub fn zeros(step: usize) -> Self {
        TraceRow { step, l_t: 0.0, l_s: 0.0, l_pre: 0.0, l_ti: 0.0, l_si: 0.0, total: 0.0 }
    }
}

fn apply_updates(
    params: &mut ModelParams,
    pv: &ParamVars,
    grads: &Gradients,
    lr: f64,
    trainable: impl Fn(&str) -> bool,
) {
    for (name, var) in pv.iter() {
        if !trainable(name) {
            continue;
        }
        if let Some(g) = grads.get_opt(*var) {
            let t = params.get_mut(name);
            for (p, gv) in t.data.iter_mut().zip(&g.data) {
                *p -= lr * gv;
            }
        }
    }
}

/// Mean binary cross-entropy of mask logits against a binary target:
/// `mean(softplus(logit) - target * logit)`.
fn mask_bce(tape: &mut Tape, logits: Var, gt: &Mask) -> Var {
    let target = Mat::col_vec(
        (0..gt.height() * gt.width())
            .map(|i| if gt.get(i / gt.width(), i % gt.width()) { 1.0 } else { 0.0 })
            .collect(),
    );
    let sp = tape.softplus(logits);
    let tl = tape.mul_const(logits, &target);
    let diff = tape.sub(sp, tl);
    tape.mean(diff)
}

/// Differentiable soft IoU of mask logits against a binary target.
fn soft_iou(tape: &mut Tape, logits: Var, gt: &Mask) -> Var {
    let g: Vec<f64> = (0..gt.height() * gt.width())
        .map(|i| if gt.get(i / gt.width(), i % gt.width()) { 1.0 } else { 0.0 })
        .collect();
    let g_sum: f64 = g.iter().sum();
    let gmat = Mat::col_vec(g);
    let probs = tape.sigmoid(logits);
    let masked = tape.mul_const(probs, &gmat);
    let inter = tape.sum(masked);
    let p_sum = tape.sum(probs);
    let rest = tape.sub(p_sum, inter);
    let union = tape.add_const(rest, g_sum);
    tape.div_elem(inter, union)
}

// ---------------------------------------------------------------------------
// Stage 1: supervised finetuning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct SftOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_loss_weight: f64,
}

/// Build the SFT loss graph for a batch: token cross-entropy plus per-pixel
/// mask binary cross-entropy, averaged over the batch.
pub(crate) fn sft_loss_graph(
    model: &ToyModel,
    tape: &mut Tape,
    pv: &ParamVars,
    batch: &[&Sample],
    mask_loss_weight: f64,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Config("empty SFT batch".into()));
    }
    let mut total: Option<Var> = None;
    for sample in batch {
        let pass = model.forced_pass(tape, pv, &sample.image, sample.instruction, &sample.gt_response, true)?;
        let mean_lp = tape.mean(pass.logp_var);
        let mut loss = tape.scale(mean_lp, -1.0);
        if !pass.mask_logit_vars.is_empty() {
            let per = mask_loss_weight / pass.mask_logit_vars.len() as f64;
            for (logits, gt) in pass.mask_logit_vars.iter().zip(&sample.gt_masks) {
                let bce = mask_bce(tape, *logits, gt);
                let scaled = tape.scale(bce, per);
                loss = tape.add(loss, scaled);
            }
        }
        total = Some(match total {
            Some(t) => tape.add(t, loss),
            None => loss,
        });
    }
    let total = total.expect("nonempty batch");
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

/// One first-order update on a batch; returns the batch loss.
pub fn sft_step(model: &mut ToyModel, batch: &[&Sample], opts: &SftOptions) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = model.param_vars(&mut tape);
    let loss = sft_loss_graph(model, &mut tape, &pv, batch, opts.mask_loss_weight)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite SFT loss {value}")));
    }
    let grads = tape.backward(loss);
    apply_updates(&mut model.params, &pv, &grads, opts.learning_rate, |_| true);
    Ok(value)
}

/// Run the SFT stage with deterministic cyclic batching.
pub fn sft_train(model: &mut ToyModel, data: &[Sample], opts: &SftOptions) -> Result<Vec<TraceRow>> {
    if data.is_empty() {
        return Err(Error::Config("SFT needs a nonempty dataset".into()));
    }
    let mut trace = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let batch: Vec<&Sample> = (0..opts.batch_size.min(data.len()))
            .map(|j| &data[(step * opts.batch_size + j) % data.len()])
            .collect();
        let value = sft_step(model, &batch, opts)?;
        let mut row = TraceRow::zeros(step);
        row.total = value;
        trace.push(row);
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Stage 2: preference finetuning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct PreferenceOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub mask_loss_weight: f64,
    pub hyper: PreferenceHyper,
    pub band: BandWidth,
}

/// Reference-side constants precomputed at stage entry from the frozen
/// snapshot: per-pair log-probabilities of `y` and `y_c`.
pub(crate) struct ReferenceLogps {
    pub y: Vec<Vec<f64>>,
    pub y_c: Vec<Vec<f64>>,
}

pub(crate) fn reference_logps(reference: &ToyModel, pt: &[TextPreferenceSample]) -> Result<ReferenceLogps> {
    let mut y = Vec::with_capacity(pt.len());
    let mut y_c = Vec::with_capacity(pt.len());
    for s in pt {
        y.push(reference.score_sequence(&s.image, s.instruction, &s.y)?.response.logps);
        y_c.push(reference.score_sequence(&s.image, s.instruction, &s.y_c)?.response.logps);
    }
    Ok(ReferenceLogps { y, y_c })
}

pub(crate) struct PreferenceStep {
    pub seeds: Vec<(Var, Mat)>,
    pub l_t: f64,
    pub l_s: f64,
    pub l_pre: f64,
    pub l_ce: f64,
}

/// Per-target indicator: does the reference best mask still outperform the
/// policy's mid-quality mask under the phase criterion?
fn indicator_for(
    ps: &SegPreferenceSample,
    target: usize,
    policy_mask: &Mask,
    band: BandWidth,
) -> Result<bool> {
    let ord = ps.orderings[target];
    let ref_best = ps.target_criteria[target][ord[0]];
    let policy_crit = match ps.phase {
        Phase::Localization => target_localization_score(policy_mask, &ps.gt_masks[target], &ps.sam_masks)?,
        Phase::Boundary => boundary_iou(policy_mask, &ps.gt_masks[target], band)?,
    };
    Ok(ref_best >= policy_crit)
}

/// Build one preference step's loss seeds on the tape: the text DPO part,
/// the gated segmentation preference part, and the mask cross-entropy on a
/// clean sample. Gradients are seeded via the hand-derived loss gradients.
pub(crate) fn build_preference_step(
    model: &ToyModel,
    tape: &mut Tape,
    pv: &ParamVars,
    pt: &TextPreferenceSample,
    ref_y: &[f64],
    ref_yc: &[f64],
    ps: &SegPreferenceSample,
    clean: &Sample,
    opts: &PreferenceOptions,
    indicator_override: Option<&[bool]>,
) -> Result<PreferenceStep> {
    let mut seeds: Vec<(Var, Mat)> = Vec::new();

    // Text preference: teacher-forced policy passes over y and y_c.
    let pass_y = model.forced_pass(tape, pv, &pt.image, pt.instruction, &pt.y, false)?;
    let pass_yc = model.forced_pass(tape, pv, &pt.image, pt.instruction, &pt.y_c, false)?;
    let pol_y = tape.value(pass_y.logp_var).data.clone();
    let pol_yc = tape.value(pass_yc.logp_var).data.clone();
    let text = text_dpo_loss(&pol_yc, &pol_y, ref_yc, ref_y, &pt.l_y, &pt.l_yc, &opts.hyper)?;
    let n_yc = pol_yc.len();
    seeds.push((pass_yc.logp_var, Mat::col_vec(text.gradients[..n_yc].to_vec())));
    seeds.push((pass_y.logp_var, Mat::col_vec(text.gradients[n_yc..].to_vec())));

    // Segmentation preference: policy embeddings on the per-target mid-slot
    // images, gated by the phase criterion.
    let n = ps.num_targets();
    let mid_slots: Vec<usize> = {
        let mut v: Vec<usize> = ps.orderings.iter().map(|o| o[1]).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut passes: BTreeMap<usize, ForcedPass> = BTreeMap::new();
    for slot in mid_slots {
        let pass = model.forced_pass(tape, pv, &ps.images[slot], ps.instruction, &ps.response, true)?;
        if pass.seg_positions.len() != n {
            return Err(Error::Structure(format!(
                "policy produced {} targets on a {}-target preference sample",
                pass.seg_positions.len(),
                n
            )));
        }
        passes.insert(slot, pass);
    }
    let mut seg_total = LossValue { value: 0.0, gradients: Vec::new() };
    let mut slot_seeds: BTreeMap<usize, Mat> = BTreeMap::new();
    for t in 0..n {
        let ord = ps.orderings[t];
        let pass = &passes[&ord[1]];
        let emb_var = pass.emb_var.expect("targets present");
        let f_policy = tape.value(emb_var).row(t).to_vec();
        let active = match indicator_override {
            Some(flags) => flags[t],
            None => {
                let policy_mask = model.mask_from_logits(tape.value(pass.mask_logit_vars[t]));
                indicator_for(ps, t, &policy_mask, opts.band)?
            }
        };
        let term = seg_preference_loss(
            &f_policy,
            &ps.embeddings[ord[0]][t],
            &ps.embeddings[ord[1]][t],
            &ps.embeddings[ord[2]][t],
            active,
            opts.hyper.beta_s,
        )?;
        let seed = slot_seeds
            .entry(ord[1])
            .or_insert_with(|| Mat::zeros(n, model.config.d_model));
        for (c, g) in term.gradients.iter().enumerate() {
            seed.data[t * model.config.d_model + c] += g / n as f64;
        }
        seg_total.value += term.value / n as f64;
    }
    for (slot, seed) in slot_seeds {
        let emb_var = passes[&slot].emb_var.expect("targets present");
        seeds.push((emb_var, seed));
    }

    // Mask cross-entropy on a clean sample, ground-truth masks.
    let clean_pass = model.forced_pass(tape, pv, &clean.image, clean.instruction, &clean.gt_response, true)?;
    let mut ce_total: Option<Var> = None;
    let per = 1.0 / clean_pass.mask_logit_vars.len().max(1) as f64;
    for (logits, gt) in clean_pass.mask_logit_vars.iter().zip(&clean.gt_masks) {
        let bce = mask_bce(tape, *logits, gt);
        let scaled = tape.scale(bce, per);
        ce_total = Some(match ce_total {
            Some(t) => tape.add(t, scaled),
            None => scaled,
        });
    }
    let l_ce = match ce_total {
        Some(v) => {
            seeds.push((v, Mat::scalar(opts.mask_loss_weight)));
            tape.value(v).item()
        }
        None => 0.0,
    };

    let combined = combined_preference_loss(&text, &seg_total);
    Ok(PreferenceStep { seeds, l_t: text.value, l_s: seg_total.value, l_pre: combined.value, l_ce })
}

/// Stage 2: finetune the policy on the preference data with the decoder
/// frozen and the reference snapshotted at entry. The localization-phase
/// data drives the first half of the steps, the boundary-phase data the
/// second half.
pub fn preference_finetune(
    model: &mut ToyModel,
    pt: &[TextPreferenceSample],
    ps_localization: &[SegPreferenceSample],
    ps_boundary: &[SegPreferenceSample],
    clean: &[Sample],
    opts: &PreferenceOptions,
) -> Result<Vec<TraceRow>> {
    if pt.is_empty() {
        return Err(Error::Config("text preference dataset is empty".into()));
    }
    if ps_localization.is_empty() || ps_boundary.is_empty() {
        return Err(Error::Config("missing phase dataset for preference finetuning".into()));
    }
    if clean.is_empty() {
        return Err(Error::Config("clean dataset for the mask loss is empty".into()));
    }
    opts.hyper.validate()?;

    let reference = model.clone();
    let ref_hash = reference.params.full_hash();
    let decoder_hash = model.params.subset_hash(ModelParams::is_decoder);
    let ref_logps = reference_logps(&reference, pt)?;

    let mut trace = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let phase_data = if step < opts.steps / 2 { ps_localization } else { ps_boundary };
        let pt_ix = step % pt.len();
        let ps_ix = step % phase_data.len();
        let clean_ix = step % clean.len();

        let mut tape = Tape::new();
        let pv = model.param_vars(&mut tape);
        let built = build_preference_step(
            model,
            &mut tape,
            &pv,
            &pt[pt_ix],
            &ref_logps.y[pt_ix],
            &ref_logps.y_c[pt_ix],
            &phase_data[ps_ix],
            &clean[clean_ix],
            opts,
            None,
        )?;
        let grads = tape.backward_seeded(&built.seeds);
        apply_updates(&mut model.params, &pv, &grads, opts.learning_rate, |name| {
            !ModelParams::is_decoder(name)
        });
        trace.push(TraceRow {
            step,
            l_t: built.l_t,
            l_s: built.l_s,
            l_pre: built.l_pre,
            l_ti: 0.0,
            l_si: 0.0,
            total: built.l_pre + opts.mask_loss_weight * built.l_ce,
        });
    }

    if model.params.subset_hash(ModelParams::is_decoder) != decoder_hash {
        return Err(Error::Frozen("decoder tensors changed during preference finetuning".into()));
    }
    if reference.params.full_hash() != ref_hash {
        return Err(Error::Frozen("reference snapshot changed during preference finetuning".into()));
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Stage 3: ensemble training (prompt embeddings only)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct EnsembleOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub k_responses: usize,
    pub seed: u64,
    pub hyper: PreferenceHyper,
}

/// Frozen per-sample inputs for stage 3: the K sampled responses, their
/// scores and fusion bias, hard sentence embeddings and original IoUs. None
/// of these depend on the prompt embeddings, so they are computed once.
pub(crate) struct EnsembleCache {
    pub responses: Vec<ScoredResponse>,
    pub resp_tokens: Vec<TokenSeq>,
    pub scores: PreferenceScores,
    pub gamma_text: Vec<f64>,
    pub h_gt: Vec<f64>,
    pub h_originals: Vec<Vec<f64>>,
    pub original_ious: Vec<Vec<f64>>,
}

pub(crate) fn build_ensemble_cache(
    model: &ToyModel,
    sample: &Sample,
    k_responses: usize,
    seed: u64,
) -> Result<EnsembleCache> {
    // Match the evaluation-time construction: the first response is greedy,
    // the rest are sampled.
    let mut responses = Vec::with_capacity(k_responses);
    let mut masks: Vec<Vec<Mask>> = Vec::with_capacity(k_responses);
    for k in 0..k_responses {
        let gen_seed = if k == 0 {
            None
        } else {
            Some(subseed(seed, "ens-gen", &[sample.sample_id, k as u64]))
        };
        let out = model.generate(&sample.image, sample.instruction, gen_seed)?;
        responses.push(out.response);
        masks.push(out.masks);
    }
    let scores = preference_scores(&responses)?;
    let layout = text_fusion_layout(&model.config, &responses);
    let gamma_text = attention_bias(&layout, &scores, BiasMode::TextFusion)?.gamma;
    let h_gt = model.mean_token_embedding(&sample.gt_response);
    let h_originals: Vec<Vec<f64>> = responses
        .iter()
        .map(|r| model.mean_token_embedding(&r.tokens))
        .collect();
    let n = sample.num_targets();
    let original_ious: Vec<Vec<f64>> = masks
        .iter()
        .map(|ms| {
            (0..n)
                .map(|t| match ms.get(t) {
                    Some(m) => crate::maskops::iou(m, &sample.gt_masks[t]).unwrap_or(0.0),
                    None => 0.0,
                })
                .collect()
        })
        .collect();
    Ok(EnsembleCache {
        resp_tokens: responses.iter().map(|r| r.tokens.clone()).collect(),
        responses,
        scores,
        gamma_text,
        h_gt,
        h_originals,
        original_ious,
    })
}

pub(crate) struct EnsembleStep {
    pub seeds: Vec<(Var, Mat)>,
    pub l_ti: f64,
    pub l_si: f64,
}

/// Build one ensemble-training step on the tape for a fixed refined
/// response: the text improvement loss through the soft sentence embedding
/// and the segmentation improvement loss through soft IoUs of the fused
/// masks. `refined_prob_override` pins the stop-gradient sequence weight.
pub(crate) fn build_ensemble_step(
    model: &ToyModel,
    tape: &mut Tape,
    pv: &ParamVars,
    sample: &Sample,
    cache: &EnsembleCache,
    refined: &TokenSeq,
    hyper: &PreferenceHyper,
    refined_prob_override: Option<f64>,
) -> Result<EnsembleStep> {
    let mut seeds: Vec<(Var, Mat)> = Vec::new();

    let text_pass = model.fusion_text_pass(
        tape,
        pv,
        &sample.image,
        sample.instruction,
        &cache.resp_tokens,
        &cache.gamma_text,
        refined,
    )?;
    let logps = tape.value(text_pass.logp_var).data.clone();
    let refined_prob = refined_prob_override
        .unwrap_or_else(|| (logps.iter().sum::<f64>() / logps.len() as f64).exp());
    let h_soft = tape.value(text_pass.soft_embedding).row(0).to_vec();
    let ti = text_improvement_loss(
        refined_prob,
        &h_soft,
        &cache.h_gt,
        &cache.h_originals,
        hyper.improvement_scale,
    )?;
    seeds.push((text_pass.soft_embedding, Mat::row_vec(ti.gradients.clone())));

    // Segmentation improvement through the embedding-fusion pass.
    let refined_segs = crate::tokens::seg_positions(refined);
    let mut l_si = 0.0;
    if !refined_segs.is_empty() {
        if let Some(candidates) = lenient_candidates(&cache.responses, &cache.scores.eta, refined_segs.len()) {
            let (f_tokens, bias) = crate::ensemble::embed_tokens_and_bias(
                &model.config,
                &cache.responses,
                &cache.scores,
                refined.len(),
            )?;
            let pass = model.fusion_embed_pass(
                tape,
                pv,
                &sample.image,
                sample.instruction,
                &cache.resp_tokens,
                &f_tokens,
                &bias.gamma,
                refined,
                &candidates,
                true,
            )?;
            let usable = refined_segs.len().min(sample.num_targets());
            if usable > 0 {
                let mut iou_vars = Vec::with_capacity(usable);
                let mut iou_vals = Vec::with_capacity(usable);
                for t in 0..usable {
                    let v = soft_iou(tape, pass.mask_logit_vars[t], &sample.gt_masks[t]);
                    iou_vals.push(tape.value(v).item());
                    iou_vars.push(v);
                }
                let originals: Vec<Vec<f64>> = cache
                    .original_ious
                    .iter()
                    .map(|row| row[..usable].to_vec())
                    .collect();
                let si = seg_improvement_loss(&iou_vals, &originals, hyper.improvement_scale)?;
                for (var, g) in iou_vars.iter().zip(&si.gradients) {
                    seeds.push((*var, Mat::scalar(*g)));
                }
                l_si = si.value;
            }
        }
    }
    Ok(EnsembleStep { seeds, l_ti: ti.value, l_si })
}

/// Stage 3: optimize the improvement losses through the fusion forwards.
/// Every tensor except the prompt embeddings stays bit-identical.
pub fn ensemble_train(model: &mut ToyModel, data: &[Sample], opts: &EnsembleOptions) -> Result<Vec<TraceRow>> {
    if data.is_empty() {
        return Err(Error::Config("ensemble training needs a nonempty dataset".into()));
    }
    if opts.k_responses == 0 {
        return Err(Error::Config("k_responses must be at least 1".into()));
    }
    opts.hyper.validate()?;
    let frozen_hash = model.params.subset_hash(|n| !ModelParams::is_prompt(n));

    let caches: Vec<EnsembleCache> = data
        .iter()
        .map(|s| build_ensemble_cache(model, s, opts.k_responses, opts.seed))
        .collect::<Result<Vec<_>>>()?;

    let mut trace = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let ix = step % data.len();
        let sample = &data[ix];
        let cache = &caches[ix];
        let (refined, _truncated) = model.fusion_decode(
            &sample.image,
            sample.instruction,
            &cache.resp_tokens,
            &cache.gamma_text,
        )?;
        let mut tape = Tape::new();
        let pv = model.param_vars(&mut tape);
        let built = build_ensemble_step(model, &mut tape, &pv, sample, cache, &refined, &opts.hyper, None)?;
        let grads = tape.backward_seeded(&built.seeds);
        apply_updates(&mut model.params, &pv, &grads, opts.learning_rate, ModelParams::is_prompt);
        trace.push(TraceRow {
            step,
            l_t: 0.0,
            l_s: 0.0,
            l_pre: 0.0,
            l_ti: built.l_ti,
            l_si: built.l_si,
            total: built.l_ti + built.l_si,
        });
    }

    if model.params.subset_hash(|n| !ModelParams::is_prompt(n)) != frozen_hash {
        return Err(Error::Frozen("non-prompt tensors changed during ensemble training".into()));
    }
    Ok(trace)
}
