//! Validation-set evaluation: plain single-response scoring or K-response
//! ensemble fusion, producing CHAIR, gIoU/cIoU, and the optional correlation
//! between sentence preference scores and per-target IoU.

use crate::ensemble::{
    fuse_embeddings_with_candidates, fuse_responses, lenient_candidates, masks_for_embeddings,
    preference_scores,
};
use crate::error::Result;
use crate::maskops::Mask;
use crate::metrics::{aggregate_iou, chair, pearson, MetricsReport, ObjectSet};
use crate::persist::PerSampleRow;
use crate::rngutil::subseed;
use crate::segmenter::Segmenter;
use crate::synth::Sample;
use crate::tokens::objects_in;
use crate::toymodel::ToyModel;

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub ensemble: bool,
    pub k_responses: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub rows: Vec<PerSampleRow>,
}

/// Mask predictions aligned with the ground-truth targets: target `n` takes
/// the n-th predicted mask, or an empty mask when the prediction ran short.
fn aligned_pairs(sample: &Sample, predicted: &[Mask]) -> Vec<(Mask, Mask)> {
    let g = sample.image.height();
    (0..sample.num_targets())
        .map(|n| {
            let pred = predicted.get(n).cloned().unwrap_or_else(|| Mask::empty(g, g));
            (pred, sample.gt_masks[n].clone())
        })
        .collect()
}

/// Evaluate the model over a validation split.
pub fn evaluate(model: &ToyModel, samples: &[Sample], opts: &EvalOptions) -> Result<EvalOutcome> {
    let mut chair_rows: Vec<(ObjectSet, ObjectSet)> = Vec::with_capacity(samples.len());
    let mut mask_pairs: Vec<(Mask, Mask)> = Vec::new();
    let mut rows: Vec<PerSampleRow> = Vec::with_capacity(samples.len());
    let mut eta_points: Vec<f64> = Vec::new();
    let mut iou_points: Vec<f64> = Vec::new();

    for sample in samples {
        let (tokens, masks) = if opts.ensemble {
            evaluate_sample_ensemble(model, sample, opts, &mut eta_points, &mut iou_points)?
        } else {
            let out = model.generate(&sample.image, sample.instruction, None)?;
            (out.response.tokens, out.masks)
        };

        let mentioned = ObjectSet::new(objects_in(&tokens));
        let gt = ObjectSet::new(sample.targets.iter().copied());
        let hallucinated = mentioned.iter().filter(|id| !gt.contains(*id)).count();
        let pairs = aligned_pairs(sample, &masks);
        let (sample_giou, _) = aggregate_iou(&pairs)?;
        rows.push(PerSampleRow {
            sample_id: sample.sample_id,
            instruction: sample.instruction,
            n_targets: sample.num_targets(),
            n_mentioned: mentioned.len(),
            n_hallucinated: hallucinated,
            mean_iou: sample_giou,
        });
        chair_rows.push((mentioned, gt));
        mask_pairs.extend(pairs);
    }

    let (c_s, c_i) = chair(&chair_rows)?;
    let (giou, ciou) = aggregate_iou(&mask_pairs)?;
    let pearson_r = if eta_points.len() >= 2 {
        pearson(&eta_points, &iou_points).ok()
    } else {
        None
    };
    Ok(EvalOutcome {
        report: MetricsReport { c_s, c_i, giou, ciou, pearson_r },
        rows,
    })
}

/// One sample under K-response fusion. Falls back to the greedy response
/// when no response carries any segmentation embedding to fuse.
fn evaluate_sample_ensemble(
    model: &ToyModel,
    sample: &Sample,
    opts: &EvalOptions,
    eta_points: &mut Vec<f64>,
    iou_points: &mut Vec<f64>,
) -> Result<(crate::tokens::TokenSeq, Vec<Mask>)> {
    // The first response is the greedy decode (the mode of the decoder);
    // the rest sample around it.
    let mut responses = Vec::with_capacity(opts.k_responses);
    let mut response_masks = Vec::with_capacity(opts.k_responses);
    for k in 0..opts.k_responses {
        let seed = if k == 0 {
            None
        } else {
            Some(subseed(opts.seed, "eval-gen", &[sample.sample_id, k as u64]))
        };
        let out = model.generate(&sample.image, sample.instruction, seed)?;
        responses.push(out.response);
        response_masks.push(out.masks);
    }
    let scores = preference_scores(&responses)?;

    // Correlation data: sentence score vs per-target IoU across responses.
    for (k, resp) in responses.iter().enumerate() {
        for n in 0..resp.num_targets().min(sample.num_targets()) {
            if let Some(mask) = response_masks[k].get(n) {
                eta_points.push(scores.eta[k][n]);
                iou_points.push(crate::maskops::iou(mask, &sample.gt_masks[n])?);
            }
        }
    }

    let fused = fuse_responses(model, &sample.image, sample.instruction, &responses, &scores)?;
    let refined_segs = crate::tokens::seg_positions(&fused.tokens);
    // Validity gate (ground-truth blind): the refinement must keep the
    // target structure of the first (greedy) response, and any object it
    // mentions beyond the greedy response needs agreement from at least two
    // source responses. A fused decode that drifted beyond that selection is
    // discarded for the plain response.
    let greedy_objects = objects_in(&responses[0].tokens);
    let fused_objects = objects_in(&fused.tokens);
    let selection_only = fused_objects.iter().all(|o| {
        greedy_objects.contains(o)
            || responses
                .iter()
                .filter(|r| objects_in(&r.tokens).contains(o))
                .count()
                >= 2
    });
    if refined_segs.is_empty()
        || refined_segs.len() != responses[0].num_targets()
        || fused_objects.len() != greedy_objects.len()
        || !selection_only
    {
        let out = model.generate(&sample.image, sample.instruction, None)?;
        return Ok((out.response.tokens, out.masks));
    }
    // A refinement that reproduces the greedy response verbatim changed
    // nothing; keep that response's own masks.
    if fused.tokens == responses[0].tokens {
        let out = model.generate(&sample.image, sample.instruction, None)?;
        return Ok((out.response.tokens, out.masks));
    }
    match lenient_candidates(&responses, &scores.eta, refined_segs.len()) {
        Some(candidates) => {
            let embeddings = fuse_embeddings_with_candidates(
                model,
                &sample.image,
                sample.instruction,
                &responses,
                &scores,
                &fused.tokens,
                &candidates,
            )?;
            let masks = masks_for_embeddings(model, &sample.image, sample.instruction, &embeddings)?;
            Ok((fused.tokens, masks))
        }
        None => {
            // No response produced any seg embedding; score the greedy
            // response instead.
            let out = model.generate(&sample.image, sample.instruction, None)?;
            Ok((out.response.tokens, out.masks))
        }
    }
}
