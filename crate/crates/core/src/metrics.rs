//! Evaluation metrics: CHAIR hallucination scores, gIoU/cIoU aggregation, and
//! the Pearson correlation coefficient.

use crate::error::{Error, Result};
use crate::maskops::{intersection_union, iou, Mask};
use crate::tokens::ObjectId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Set of object identifiers mentioned in (or annotated for) one response.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSet(BTreeSet<ObjectId>);

impl ObjectSet {
    pub fn new(ids: impl IntoIterator<Item = ObjectId>) -> Self {
        ObjectSet(ids.into_iter().collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: ObjectId) -> bool {
        self.0.contains(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.0.iter().copied()
    }
}

/// Flat metrics report emitted by evaluation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fraction of responses containing at least one hallucinated object.
    pub c_s: f64,
    /// Fraction of hallucinated object mentions among all mentions; absent
    /// when nothing was mentioned.
    pub c_i: Option<f64>,
    /// Mean per-target IoU.
    pub giou: f64,
    /// Cumulative intersection over cumulative union.
    pub ciou: f64,
    /// Correlation between sentence preference scores and per-target IoU;
    /// absent with fewer than 2 points or a constant sequence.
    pub pearson_r: Option<f64>,
}

/// CHAIR hallucination metrics over `(mentioned, ground truth)` pairs.
///
/// `c_s` is the fraction of responses with at least one mentioned object not
/// in that response's ground truth; `c_i` is the fraction of hallucinated
/// mentions among all mentions, summed over responses. With zero mentions
/// overall, `c_i` is undefined and reported as `None`.
pub fn chair(responses: &[(ObjectSet, ObjectSet)]) -> Result<(f64, Option<f64>)> {
    if responses.is_empty() {
        return Err(Error::shape("chair requires at least one response"));
    }
    let mut hallucinated_responses = 0usize;
    let mut hallucinated_mentions = 0usize;
    let mut total_mentions = 0usize;
    for (mentioned, gt) in responses {
        let bad = mentioned.iter().filter(|id| !gt.contains(*id)).count();
        if bad > 0 {
            hallucinated_responses += 1;
        }
        hallucinated_mentions += bad;
        total_mentions += mentioned.len();
    }
    let c_s = hallucinated_responses as f64 / responses.len() as f64;
    let c_i = if total_mentions == 0 {
        None
    } else {
        Some(hallucinated_mentions as f64 / total_mentions as f64)
    };
    Ok((c_s, c_i))
}

/// Pearson correlation coefficient between two equal-length sequences.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "pearson length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::shape("pearson requires at least 2 points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        num += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::ZeroVariance("constant sequence in pearson".into()));
    }
    Ok(num / (vx.sqrt() * vy.sqrt()))
}

/// Mean per-pair IoU (gIoU) and cumulative IoU (cIoU) over mask pairs.
pub fn aggregate_iou(pairs: &[(Mask, Mask)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::shape("aggregate_iou requires at least one pair"));
    }
    let mut iou_sum = 0.0;
    let mut inter_sum = 0usize;
    let mut union_sum = 0usize;
    for (pred, gt) in pairs {
        iou_sum += iou(pred, gt)?;
        let (i, u) = intersection_union(pred, gt)?;
        inter_sum += i;
        union_sum += u;
    }
    let giou = iou_sum / pairs.len() as f64;
    let ciou = if union_sum == 0 {
        1.0
    } else {
        inter_sum as f64 / union_sum as f64
    };
    Ok((giou, ciou))
}
