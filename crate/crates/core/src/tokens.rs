//! Token vocabulary and response-sequence helpers.
//!
//! The toy response grammar is one sentence per segmentation target:
//! `object-token <seg> <sep>` repeated, then `<eos>`. Object identity is an
//! integer vocabulary id carried by the token itself, which keeps hallucination
//! metrics free of string matching.

use serde::{Deserialize, Serialize};

pub type TokenId = u16;
pub type TokenSeq = Vec<TokenId>;

/// Padding (unused in sequences, reserved id 0).
pub const PAD: TokenId = 0;
/// End of response.
pub const EOS: TokenId = 1;
/// End of sentence delimiter.
pub const SEP: TokenId = 2;
/// Segmentation marker; each occurrence owns one segmentation embedding.
pub const SEG: TokenId = 3;
/// First object token; object id `k` maps to token `OBJ_BASE + k`.
pub const OBJ_BASE: TokenId = 4;

/// Number of distinct object ids in the toy vocabulary.
pub const NUM_OBJECTS: usize = 16;

/// Total vocabulary size.
pub const VOCAB_SIZE: usize = OBJ_BASE as usize + NUM_OBJECTS;

/// Object identity in the synthetic task.
pub type ObjectId = u8;

pub fn object_token(id: ObjectId) -> TokenId {
    debug_assert!((id as usize) < NUM_OBJECTS);
    OBJ_BASE + id as TokenId
}

pub fn token_object(tok: TokenId) -> Option<ObjectId> {
    if tok >= OBJ_BASE && (tok as usize) < VOCAB_SIZE {
        Some((tok - OBJ_BASE) as ObjectId)
    } else {
        None
    }
}

/// Ground-truth response for an ordered list of target objects.
pub fn response_for_targets(targets: &[ObjectId]) -> TokenSeq {
    let mut seq = Vec::with_capacity(targets.len() * 3 + 1);
    for &id in targets {
        seq.push(object_token(id));
        seq.push(SEG);
        seq.push(SEP);
    }
    seq.push(EOS);
    seq
}

/// Object ids mentioned in a sequence, in order of first appearance.
pub fn objects_in(seq: &[TokenId]) -> Vec<ObjectId> {
    let mut seen = Vec::new();
    for &tok in seq {
        if let Some(id) = token_object(tok) {
            if !seen.contains(&id) {
                seen.push(id);
            }
        }
    }
    seen
}

/// Indices of `<seg>` tokens.
pub fn seg_positions(seq: &[TokenId]) -> Vec<usize> {
    seq.iter()
        .enumerate()
        .filter(|(_, t)| **t == SEG)
        .map(|(i, _)| i)
        .collect()
}

/// Sentence spans `(start, end)` partitioning the token range. A sentence is a
/// maximal run ending with `<sep>` (inclusive); trailing tokens form the last
/// span.
pub fn sentence_spans(seq: &[TokenId]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, &tok) in seq.iter().enumerate() {
        if tok == SEP {
            spans.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < seq.len() {
        spans.push((start, seq.len()));
    }
    spans
}

/// Span containing a position, if any.
pub fn span_of(spans: &[(usize, usize)], pos: usize) -> Option<(usize, usize)> {
    spans.iter().copied().find(|&(s, e)| pos >= s && pos < e)
}

/// Per-sentence layout of a decoded response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseStructure {
    pub sentence_spans: Vec<(usize, usize)>,
    pub seg_positions: Vec<usize>,
}

impl ResponseStructure {
    pub fn of(seq: &[TokenId]) -> Self {
        ResponseStructure {
            sentence_spans: sentence_spans(seq),
            seg_positions: seg_positions(seq),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_grammar_round_trip() {
        let seq = response_for_targets(&[5, 14]);
        assert_eq!(
            seq,
            vec![object_token(5), SEG, SEP, object_token(14), SEG, SEP, EOS]
        );
        assert_eq!(objects_in(&seq), vec![5, 14]);
        assert_eq!(seg_positions(&seq), vec![1, 4]);
    }

    #[test]
    fn spans_partition_and_contain_segs() {
        let seq = response_for_targets(&[2, 9, 13]);
        let spans = sentence_spans(&seq);
        assert_eq!(spans, vec![(0, 3), (3, 6), (6, 9), (9, 10)]);
        let mut covered = 0;
        for &(s, e) in &spans {
            assert_eq!(s, covered);
            covered = e;
        }
        assert_eq!(covered, seq.len());
        for pos in seg_positions(&seq) {
            assert!(span_of(&spans, pos).is_some());
        }
    }

    #[test]
    fn vocab_fits_limit() {
        assert!(VOCAB_SIZE <= 64);
    }
}
