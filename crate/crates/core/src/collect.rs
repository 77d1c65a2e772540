//! Preference-data collection: noise perturbations, localization scoring,
//! two-phase curriculum collection of segmentation preference triples, and
//! the synthetic corruption/correction oracle for text preference pairs.

use crate::error::{Error, Result};
use crate::maskops::{boundary_iou, iou, BandWidth, Mask};
use crate::raster::{Image, Rect};
use crate::rngutil::substream;
use crate::segmenter::{InstructionId, Segmenter};
use crate::synth::Sample;
use crate::tokens::{token_object, ObjectId, TokenId, TokenSeq};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// A sam mask "corresponds to" a ground-truth mask when their IoU exceeds
/// this threshold; corresponding masks are excluded from the wrong-object
/// term of the localization score.
pub const CORRESPONDENCE_IOU: f64 = 0.5;

/// Which half of preference finetuning the data is collected for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// First half: select perturbations by localization score.
    Localization,
    /// Second half: select by boundary IoU among high-score perturbations.
    Boundary,
}

/// Gaussian noise over a rectangular region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub rect: Rect,
    pub sigma: f64,
    pub seed: u64,
}

/// Collection settings shared by both phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    /// Perturbations generated per round.
    pub n_perturb: usize,
    /// Regeneration cap for the localization phase.
    pub max_rounds: usize,
    pub noise_sigma: f64,
    /// Boundary band width; `None` picks the raster default.
    pub band_width: Option<usize>,
    /// Perturbation rectangle size range as fractions of each dimension.
    pub rect_min_frac: f64,
    pub rect_max_frac: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            n_perturb: 30,
            max_rounds: 20,
            noise_sigma: 0.25,
            band_width: None,
            rect_min_frac: 0.25,
            rect_max_frac: 0.75,
        }
    }
}

impl CollectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_perturb < 3 {
            return Err(Error::Config("n_perturb must be at least 3".into()));
        }
        if self.max_rounds == 0 {
            return Err(Error::Config("max_rounds must be at least 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn band(&self, height: usize, width: usize) -> BandWidth {
        match self.band_width {
            Some(w) => BandWidth(w.max(1)),
            None => BandWidth::for_raster(height, width),
        }
    }
}

/// One perturbed image with the model outputs and quality criteria.
#[derive(Debug, Clone)]
pub struct PerturbationRecord {
    pub image: Image,
    pub masks: Vec<Mask>,
    pub embeddings: Vec<Vec<f64>>,
    /// Sample-level localization score (mean over targets).
    pub score_s: f64,
    /// Sample-level boundary IoU (mean over targets).
    pub boundary_b: f64,
    /// Per-target localization scores.
    pub target_s: Vec<f64>,
    /// Per-target boundary IoUs.
    pub target_b: Vec<f64>,
}

/// A collected segmentation preference triple. Slot order is best, mid,
/// worst by the sample-level phase criterion; `orderings[n]` re-sorts the
/// slots per target by the per-target criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegPreferenceSample {
    pub sample_id: u64,
    pub phase: Phase,
    pub instruction: InstructionId,
    /// Token sequence under which the embeddings were extracted; the policy
    /// is teacher-forced on the same sequence during finetuning.
    pub response: TokenSeq,
    /// Three perturbed images, slot order best/mid/worst.
    pub images: Vec<Image>,
    /// `embeddings[slot][target]`.
    pub embeddings: Vec<Vec<Vec<f64>>>,
    /// `masks[slot][target]`.
    pub masks: Vec<Vec<Mask>>,
    /// Per-target slot orderings, best to worst under the phase criterion.
    pub orderings: Vec<[usize; 3]>,
    /// Sample-level localization score per slot.
    pub slot_scores: Vec<f64>,
    /// Sample-level boundary IoU per slot.
    pub slot_boundary: Vec<f64>,
    /// `target_criteria[n][slot]`: per-target phase criterion values.
    pub target_criteria: Vec<[f64; 3]>,
    pub gt_masks: Vec<Mask>,
    pub sam_masks: Vec<Mask>,
}

impl SegPreferenceSample {
    pub fn num_targets(&self) -> usize {
        self.gt_masks.len()
    }

    /// Check the structural invariants of a collected triple.
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != 3 || self.embeddings.len() != 3 || self.masks.len() != 3 {
            return Err(Error::Structure("preference triple must have 3 slots".into()));
        }
        let n = self.num_targets();
        for slot in 0..3 {
            if self.embeddings[slot].len() != n || self.masks[slot].len() != n {
                return Err(Error::Structure("per-slot target count mismatch".into()));
            }
        }
        for ord in &self.orderings {
            let mut seen = [false; 3];
            for &s in ord {
                if s >= 3 || seen[s] {
                    return Err(Error::Structure("ordering is not a permutation".into()));
                }
                seen[s] = true;
            }
        }
        for (n, ord) in self.orderings.iter().enumerate() {
            let c = &self.target_criteria[n];
            if !(c[ord[0]] >= c[ord[1]] && c[ord[1]] >= c[ord[2]]) {
                return Err(Error::Structure(
                    "ordering inconsistent with per-target criterion".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Result of one collection call.
#[derive(Debug, Clone)]
pub enum CollectOutcome {
    Collected(Box<SegPreferenceSample>),
    /// The localization-phase exit condition never held within the cap.
    Skipped { rounds: usize },
}

/// Text preference pair: the model response `y` and a corrected response
/// `y_c`, with the differing-token index lists for both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextPreferenceSample {
    pub sample_id: u64,
    pub image: Image,
    pub instruction: InstructionId,
    pub y: TokenSeq,
    pub y_c: TokenSeq,
    pub l_y: Vec<usize>,
    pub l_yc: Vec<usize>,
}

/// Copy of the image with seeded Gaussian noise added inside `spec.rect`,
/// clamped to `[0, 1]`. Pixels outside the rectangle are untouched.
pub fn perturb_image(img: &Image, spec: &NoiseSpec) -> Result<Image> {
    if !spec.rect.fits_in(img.height(), img.width()) {
        return Err(Error::Geometry(format!(
            "noise rect {:?} outside {}x{} image",
            spec.rect,
            img.height(),
            img.width()
        )));
    }
    if spec.sigma < 0.0 {
        return Err(Error::Geometry("noise sigma must be nonnegative".into()));
    }
    let mut rng = substream(spec.seed, "noise", &[]);
    let normal = Normal::new(0.0, spec.sigma).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut out = img.clone();
    for r in spec.rect.top..spec.rect.top + spec.rect.height {
        for c in spec.rect.left..spec.rect.left + spec.rect.width {
            let noisy = img.get(r, c) + normal.sample(&mut rng);
            out.set(r, c, noisy.clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Per-target localization score: IoU with the ground truth minus the best
/// IoU with any non-corresponding sam mask (0 when none exists).
pub fn target_localization_score(pred: &Mask, gt: &Mask, sam: &[Mask]) -> Result<f64> {
    let gt_iou = iou(pred, gt)?;
    let mut wrong = 0.0f64;
    for m in sam {
        if iou(m, gt)? > CORRESPONDENCE_IOU {
            continue;
        }
        wrong = wrong.max(iou(pred, m)?);
    }
    Ok(gt_iou - wrong)
}

/// Sample-level localization score: mean of the per-target scores.
pub fn localization_score(pred: &[Mask], gt: &[Mask], sam: &[Mask]) -> Result<f64> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "localization_score needs matching nonempty mask lists ({} vs {})",
            pred.len(),
            gt.len()
        )));
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        total += target_localization_score(p, g, sam)?;
    }
    Ok(total / pred.len() as f64)
}

/// Indices of the best, median (lower-middle), and worst records under
/// `criterion`, ties broken by lower index.
pub fn select_high_median_low(criteria: &[f64]) -> [usize; 3] {
    let mut order: Vec<usize> = (0..criteria.len()).collect();
    order.sort_by(|&a, &b| {
        criteria[b]
            .partial_cmp(&criteria[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mid = (order.len() - 1) / 2;
    [order[0], order[mid], order[order.len() - 1]]
}

/// Indices of the `k` highest records under `criterion`, ties to lower index.
pub fn select_top_k(criteria: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..criteria.len()).collect();
    order.sort_by(|&a, &b| {
        criteria[b]
            .partial_cmp(&criteria[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

fn sample_noise_spec(rng: &mut impl Rng, height: usize, width: usize, cfg: &CollectConfig) -> NoiseSpec {
    let side = |dim: usize, rng: &mut dyn rand::RngCore| -> usize {
        let lo = ((dim as f64 * cfg.rect_min_frac).ceil() as usize).max(1);
        let hi = ((dim as f64 * cfg.rect_max_frac).floor() as usize).max(lo);
        rand::Rng::gen_range(rng, lo..=hi)
    };
    let h = side(height, rng);
    let w = side(width, rng);
    let top = rng.gen_range(0..=height - h);
    let left = rng.gen_range(0..=width - w);
    NoiseSpec {
        rect: Rect { top, left, height: h, width: w },
        sigma: cfg.noise_sigma,
        seed: rng.gen(),
    }
}

fn evaluate_perturbation(
    sample: &Sample,
    model: &dyn Segmenter,
    sam: &[Mask],
    band: BandWidth,
    spec: &NoiseSpec,
) -> Result<PerturbationRecord> {
    let image = perturb_image(&sample.image, spec)?;
    let out = model.score_sequence(&image, sample.instruction, &sample.gt_response)?;
    let n = sample.num_targets();
    if out.masks.len() != n || out.response.embeddings.len() != n {
        return Err(Error::Structure(format!(
            "model produced {} targets, expected {n}",
            out.masks.len()
        )));
    }
    let mut target_s = Vec::with_capacity(n);
    let mut target_b = Vec::with_capacity(n);
    for (pred, gt) in out.masks.iter().zip(&sample.gt_masks) {
        target_s.push(target_localization_score(pred, gt, sam)?);
        target_b.push(boundary_iou(pred, gt, band)?);
    }
    let score_s = target_s.iter().sum::<f64>() / n as f64;
    let boundary_b = target_b.iter().sum::<f64>() / n as f64;
    Ok(PerturbationRecord {
        image,
        masks: out.masks,
        embeddings: out.response.embeddings,
        score_s,
        boundary_b,
        target_s,
        target_b,
    })
}

fn build_triple(
    sample: &Sample,
    sam: &[Mask],
    phase: Phase,
    records: &[PerturbationRecord],
    slots: [usize; 3],
) -> SegPreferenceSample {
    let n = sample.num_targets();
    let picked: Vec<&PerturbationRecord> = slots.iter().map(|&i| &records[i]).collect();
    let mut orderings = Vec::with_capacity(n);
    let mut target_criteria = Vec::with_capacity(n);
    for t in 0..n {
        let crit: [f64; 3] = match phase {
            Phase::Localization => [picked[0].target_s[t], picked[1].target_s[t], picked[2].target_s[t]],
            Phase::Boundary => [picked[0].target_b[t], picked[1].target_b[t], picked[2].target_b[t]],
        };
        let sel = select_high_median_low(&crit);
        orderings.push(sel);
        target_criteria.push(crit);
    }
    SegPreferenceSample {
        sample_id: sample.sample_id,
        phase,
        instruction: sample.instruction,
        response: sample.gt_response.clone(),
        images: picked.iter().map(|r| r.image.clone()).collect(),
        embeddings: picked.iter().map(|r| r.embeddings.clone()).collect(),
        masks: picked.iter().map(|r| r.masks.clone()).collect(),
        orderings,
        slot_scores: picked.iter().map(|r| r.score_s).collect(),
        slot_boundary: picked.iter().map(|r| r.boundary_b).collect(),
        target_criteria,
        gt_masks: sample.gt_masks.clone(),
        sam_masks: sam.to_vec(),
    }
}

/// One round of perturbation records: `n_perturb` seeded noise specs, the
/// model run on each perturbed image, and the per-target criteria.
pub fn round_records(
    sample: &Sample,
    model: &dyn Segmenter,
    sam: &[Mask],
    cfg: &CollectConfig,
    seed: u64,
    round: usize,
) -> Result<Vec<PerturbationRecord>> {
    let band = cfg.band(sample.image.height(), sample.image.width());
    let mut rng = substream(seed, "collect-round", &[round as u64]);
    let specs: Vec<NoiseSpec> = (0..cfg.n_perturb)
        .map(|_| sample_noise_spec(&mut rng, sample.image.height(), sample.image.width(), cfg))
        .collect();
    specs
        .par_iter()
        .map(|spec| evaluate_perturbation(sample, model, sam, band, spec))
        .collect::<Result<Vec<_>>>()
}

/// Collect one segmentation preference triple from a sample.
///
/// Localization phase: regenerate rounds of `n_perturb` perturbations until
/// the scores straddle the quality gates (min below 0, max above 0.8), then
/// keep the best/median/worst by score. The regeneration cap turns the open
/// loop into `Skipped`. Boundary phase: a single round; among the 5 highest
/// scores keep the best/median/worst by boundary IoU.
pub fn collect_seg_preference(
    sample: &Sample,
    model: &dyn Segmenter,
    sam: &[Mask],
    phase: Phase,
    cfg: &CollectConfig,
    seed: u64,
) -> Result<CollectOutcome> {
    cfg.validate()?;
    let max_rounds = match phase {
        Phase::Localization => cfg.max_rounds,
        Phase::Boundary => 1,
    };
    for round in 0..max_rounds {
        let records = round_records(sample, model, sam, cfg, seed, round)?;
        let scores: Vec<f64> = records.iter().map(|r| r.score_s).collect();
        match phase {
            Phase::Localization => {
                let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if min < 0.0 && max > 0.8 {
                    let slots = select_high_median_low(&scores);
                    return Ok(CollectOutcome::Collected(Box::new(build_triple(
                        sample, sam, phase, &records, slots,
                    ))));
                }
            }
            Phase::Boundary => {
                let top = select_top_k(&scores, 5.min(scores.len()));
                let top_b: Vec<f64> = top.iter().map(|&i| records[i].boundary_b).collect();
                let picked = select_high_median_low(&top_b);
                let slots = [top[picked[0]], top[picked[1]], top[picked[2]]];
                return Ok(CollectOutcome::Collected(Box::new(build_triple(
                    sample, sam, phase, &records, slots,
                ))));
            }
        }
    }
    Ok(CollectOutcome::Skipped { rounds: max_rounds })
}

/// Longest-common-subsequence alignment; returns the indices of each side
/// that are not on the LCS.
pub fn diff_indices(a: &[TokenId], b: &[TokenId]) -> (Vec<usize>, Vec<usize>) {
    let (n, m) = (a.len(), b.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[i][j] = if a[i] == b[j] {
                dp[i + 1][j + 1] + 1
            } else {
                dp[i + 1][j].max(dp[i][j + 1])
            };
        }
    }
    let mut l_a = Vec::new();
    let mut l_b = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] {
            i += 1;
            j += 1;
        } else if dp[i + 1][j] >= dp[i][j + 1] {
            l_a.push(i);
            i += 1;
        } else {
            l_b.push(j);
            j += 1;
        }
    }
    l_a.extend(i..n);
    l_b.extend(j..m);
    (l_a, l_b)
}

/// Synthetic stand-in for the response-correction assistant: corrects object
/// tokens against the ground truth, or injects a small number of object
/// errors when the model response is already clean.
#[derive(Debug, Clone)]
pub struct CorruptionOracle {
    pub max_injected_errors: usize,
}

impl Default for CorruptionOracle {
    fn default() -> Self {
        CorruptionOracle { max_injected_errors: 2 }
    }
}

impl CorruptionOracle {
    /// Correction path: replace the response's object tokens with the
    /// ground-truth targets in order. Falls back to the full ground-truth
    /// response when the object slot count does not line up.
    pub fn correct(&self, y: &[TokenId], targets: &[ObjectId], gt_response: &[TokenId]) -> TokenSeq {
        let obj_positions: Vec<usize> = y
            .iter()
            .enumerate()
            .filter(|(_, t)| token_object(**t).is_some())
            .map(|(i, _)| i)
            .collect();
        if obj_positions.len() == targets.len() {
            let mut y_c = y.to_vec();
            for (pos, id) in obj_positions.iter().zip(targets) {
                y_c[*pos] = crate::tokens::object_token(*id);
            }
            y_c
        } else {
            gt_response.to_vec()
        }
    }

    /// Error-injection path: corrupt a small number of the ground-truth
    /// response's object tokens into wrong object ids.
    pub fn corrupt(&self, gt_response: &[TokenId], targets: &[ObjectId], rng: &mut impl Rng) -> TokenSeq {
        let obj_positions: Vec<usize> = gt_response
            .iter()
            .enumerate()
            .filter(|(_, t)| token_object(**t).is_some())
            .map(|(i, _)| i)
            .collect();
        let mut y = gt_response.to_vec();
        if obj_positions.is_empty() {
            return y;
        }
        let count = rng.gen_range(1..=self.max_injected_errors.min(obj_positions.len()));
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < count {
            let p = obj_positions[rng.gen_range(0..obj_positions.len())];
            if !chosen.contains(&p) {
                chosen.push(p);
            }
        }
        for p in chosen {
            loop {
                let id = rng.gen_range(0..crate::tokens::NUM_OBJECTS as u8);
                if !targets.contains(&id) {
                    y[p] = crate::tokens::object_token(id);
                    break;
                }
            }
        }
        y
    }
}

/// Collect one text preference pair from a sample.
///
/// The model's greedy response is corrected by the oracle when its object
/// set deviates from the ground truth; otherwise errors are injected into
/// the ground-truth response and the clean version becomes the correction.
pub fn collect_text_preference(
    sample: &Sample,
    model: &dyn Segmenter,
    oracle: &CorruptionOracle,
    seed: u64,
) -> Result<TextPreferenceSample> {
    let out = model.generate(&sample.image, sample.instruction, None)?;
    let y_model = out.response.tokens;
    let model_objects = crate::tokens::objects_in(&y_model);
    let mut gt_objects: Vec<ObjectId> = sample.targets.clone();
    gt_objects.sort_unstable();
    gt_objects.dedup();
    let mut model_sorted = model_objects.clone();
    model_sorted.sort_unstable();

    let (y, y_c) = if model_sorted == gt_objects {
        let mut rng = substream(seed, "inject", &[sample.sample_id]);
        let corrupted = oracle.corrupt(&sample.gt_response, &sample.targets, &mut rng);
        (corrupted, sample.gt_response.clone())
    } else {
        let corrected = oracle.correct(&y_model, &sample.targets, &sample.gt_response);
        (y_model, corrected)
    };
    let (l_y, l_yc) = diff_indices(&y, &y_c);
    Ok(TextPreferenceSample {
        sample_id: sample.sample_id,
        image: sample.image.clone(),
        instruction: sample.instruction,
        y,
        y_c,
        l_y,
        l_yc,
    })
}
