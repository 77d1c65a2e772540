//! The pluggable segmenter interface: anything that maps an image and an
//! instruction to a token response with per-token log-probabilities, one
//! embedding per `<seg>` token, and one mask per target.

use crate::error::{Error, Result};
use crate::maskops::Mask;
use crate::raster::Image;
use crate::tokens::{ResponseStructure, TokenId, TokenSeq};
use serde::{Deserialize, Serialize};

pub type InstructionId = u32;

/// A response with everything the preference machinery needs: tokens,
/// per-token log-likelihoods, sentence spans, `<seg>` positions and their
/// embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub tokens: TokenSeq,
    pub logps: Vec<f64>,
    pub sentence_spans: Vec<(usize, usize)>,
    pub seg_positions: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
}

impl ScoredResponse {
    pub fn from_parts(tokens: TokenSeq, logps: Vec<f64>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != logps.len() {
            return Err(Error::shape("token/logp lengths differ or empty"));
        }
        let structure = ResponseStructure::of(&tokens);
        if structure.seg_positions.len() != embeddings.len() {
            return Err(Error::Structure(format!(
                "{} seg tokens but {} embeddings",
                structure.seg_positions.len(),
                embeddings.len()
            )));
        }
        Ok(ScoredResponse {
            tokens,
            logps,
            sentence_spans: structure.sentence_spans,
            seg_positions: structure.seg_positions,
            embeddings,
        })
    }

    pub fn num_targets(&self) -> usize {
        self.seg_positions.len()
    }

    /// Sentence span containing token position `pos`.
    pub fn span_containing(&self, pos: usize) -> Result<(usize, usize)> {
        crate::tokens::span_of(&self.sentence_spans, pos)
            .ok_or_else(|| Error::Structure(format!("position {pos} outside all sentence spans")))
    }
}

/// Output of one segmenter call: the scored response plus one mask per
/// `<seg>` token, aligned with `response.seg_positions`.
#[derive(Debug, Clone)]
pub struct SegOutput {
    pub response: ScoredResponse,
    pub masks: Vec<Mask>,
    pub truncated: bool,
}

/// Model interface used by collection and evaluation.
pub trait Segmenter: Sync {
    /// Free-running decode: greedy when `seed` is `None`, sampled otherwise.
    fn generate(&self, image: &Image, instruction: InstructionId, seed: Option<u64>) -> Result<SegOutput>;

    /// Teacher-forced scoring of a given token sequence: per-token
    /// log-likelihoods, `<seg>` embeddings, and decoded masks.
    fn score_sequence(&self, image: &Image, instruction: InstructionId, tokens: &[TokenId]) -> Result<SegOutput>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::{object_token, EOS, SEG, SEP};

    #[test]
    fn scored_response_checks_structure() {
        let tokens = vec![object_token(1), SEG, SEP, EOS];
        let logps = vec![-0.1; 4];
        let ok = ScoredResponse::from_parts(tokens.clone(), logps.clone(), vec![vec![1.0; 4]]);
        assert!(ok.is_ok());
        let bad = ScoredResponse::from_parts(tokens, logps, vec![]);
        assert!(matches!(bad, Err(Error::Structure(_))));
    }
}
