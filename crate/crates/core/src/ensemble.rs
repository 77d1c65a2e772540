//! Preference-based ensemble: token and sentence preference scores from
//! prediction likelihoods, additive attention-bias construction, biased
//! scaled-dot-product attention, and fusion of K responses and their
//! segmentation embeddings into refined outputs.

use crate::error::{Error, Result};
use crate::linalg::{sigmoid, softmax_into, Mat};
use crate::maskops::Mask;
use crate::raster::Image;
use crate::segmenter::{InstructionId, ScoredResponse};
use crate::tape::Tape;
use crate::tokens::{TokenId, TokenSeq};
use crate::toymodel::{EmbedCandidates, ModelConfig, ToyModel};
use serde::{Deserialize, Serialize};

/// Role of one position in the fused input sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionRole {
    Image,
    Instruction,
    ResponseToken { response: usize, token: usize },
    Prompt,
    EmbeddingToken { response: usize, target: usize },
    RefinedResponse,
    Unlabeled,
}

/// Normalized preference scores: `tau[k][i]` per response token and
/// `eta[k][n]` per response target, both in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceScores {
    pub tau: Vec<Vec<f64>>,
    pub eta: Vec<Vec<f64>>,
}

/// Which score feeds the attention bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasMode {
    TextFusion,
    EmbeddingFusion,
}

/// One additive logit offset per key position of the fused input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasVector {
    pub gamma: Vec<f64>,
}

/// Joint min-max normalization onto `[-1, 1]`; an all-equal pool maps to 0.
fn min_max_normalize(groups: &mut [Vec<f64>]) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for g in groups.iter() {
        for v in g {
            min = min.min(*v);
            max = max.max(*v);
        }
    }
    for g in groups.iter_mut() {
        for v in g.iter_mut() {
            *v = if max == min { 0.0 } else { 2.0 * (*v - min) / (max - min) - 1.0 };
        }
    }
}

/// Token preference scores: the token's own likelihood plus the mean
/// likelihood of its sentence, min-max normalized jointly over all tokens of
/// all responses.
pub fn token_preference_scores(responses: &[ScoredResponse]) -> Result<Vec<Vec<f64>>> {
    if responses.is_empty() {
        return Err(Error::shape("need at least one response"));
    }
    let mut raw: Vec<Vec<f64>> = Vec::with_capacity(responses.len());
    for resp in responses {
        if resp.tokens.is_empty() {
            return Err(Error::shape("response has no tokens"));
        }
        let probs: Vec<f64> = resp.logps.iter().map(|lp| lp.exp()).collect();
        let mut scores = Vec::with_capacity(probs.len());
        for (i, p) in probs.iter().enumerate() {
            let (s, e) = resp.span_containing(i)?;
            let span_mean = probs[s..e].iter().sum::<f64>() / (e - s) as f64;
            scores.push(p + span_mean);
        }
        raw.push(scores);
    }
    min_max_normalize(&mut raw);
    Ok(raw)
}

/// Sentence preference scores: mean likelihood of the sentence containing
/// each `<seg>` token, min-max normalized jointly over all `(k, n)`.
pub fn sentence_preference_scores(responses: &[ScoredResponse]) -> Result<Vec<Vec<f64>>> {
    if responses.is_empty() {
        return Err(Error::shape("need at least one response"));
    }
    let mut raw: Vec<Vec<f64>> = Vec::with_capacity(responses.len());
    for resp in responses {
        let probs: Vec<f64> = resp.logps.iter().map(|lp| lp.exp()).collect();
        let mut scores = Vec::with_capacity(resp.seg_positions.len());
        for &pos in &resp.seg_positions {
            let (s, e) = resp.span_containing(pos)?;
            scores.push(probs[s..e].iter().sum::<f64>() / (e - s) as f64);
        }
        raw.push(scores);
    }
    min_max_normalize(&mut raw);
    Ok(raw)
}

pub fn preference_scores(responses: &[ScoredResponse]) -> Result<PreferenceScores> {
    Ok(PreferenceScores {
        tau: token_preference_scores(responses)?,
        eta: sentence_preference_scores(responses)?,
    })
}

/// Build the additive attention bias for a fused sequence layout: biased
/// positions get `sigmoid(score) - 0.5`, every other position exactly 0.
pub fn attention_bias(
    layout: &[PositionRole],
    scores: &PreferenceScores,
    mode: BiasMode,
) -> Result<BiasVector> {
    let mut gamma = Vec::with_capacity(layout.len());
    for (j, role) in layout.iter().enumerate() {
        let offset = match (mode, role) {
            (_, PositionRole::Unlabeled) => {
                return Err(Error::Layout(format!("position {j} is unlabeled")));
            }
            (BiasMode::TextFusion, PositionRole::ResponseToken { response, token }) => {
                let tau = scores
                    .tau
                    .get(*response)
                    .and_then(|r| r.get(*token))
                    .ok_or_else(|| {
                        Error::Layout(format!("no tau score for response {response} token {token}"))
                    })?;
                sigmoid(*tau) - 0.5
            }
            (BiasMode::EmbeddingFusion, PositionRole::EmbeddingToken { response, target }) => {
                let eta = scores
                    .eta
                    .get(*response)
                    .and_then(|r| r.get(*target))
                    .ok_or_else(|| {
                        Error::Layout(format!("no eta score for response {response} target {target}"))
                    })?;
                sigmoid(*eta) - 0.5
            }
            _ => 0.0,
        };
        gamma.push(offset);
    }
    Ok(BiasVector { gamma })
}

/// Scaled dot-product attention with an optional additive key-axis bias:
/// `softmax(Q K^T / sqrt(d_k) + gamma) V`, with `gamma[j]` added to key `j`'s
/// logit for every query row.
pub fn biased_attention(
    queries: &Mat,
    keys: &Mat,
    values: &Mat,
    d_k: usize,
    gamma: Option<&BiasVector>,
) -> Result<Mat> {
    if queries.cols != keys.cols {
        return Err(Error::shape("query/key channel dims differ"));
    }
    if keys.rows != values.rows {
        return Err(Error::shape("key/value counts differ"));
    }
    if d_k == 0 {
        return Err(Error::shape("d_k must be positive"));
    }
    if let Some(b) = gamma {
        if b.gamma.len() != keys.rows {
            return Err(Error::shape(format!(
                "gamma length {} does not match {} keys",
                b.gamma.len(),
                keys.rows
            )));
        }
    }
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut out = Mat::zeros(queries.rows, values.cols);
    let mut logits = vec![0.0; keys.rows];
    let mut weights = vec![0.0; keys.rows];
    for qi in 0..queries.rows {
        let q = queries.row(qi);
        for (ki, logit) in logits.iter_mut().enumerate() {
            let k = keys.row(ki);
            let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
            *logit = dot * scale
                + match gamma {
                    Some(b) => b.gamma[ki],
                    None => 0.0,
                };
        }
        softmax_into(&logits, &mut weights);
        for (ki, w) in weights.iter().enumerate() {
            let v = values.row(ki);
            for (o, vv) in out.data[qi * values.cols..(qi + 1) * values.cols]
                .iter_mut()
                .zip(v)
            {
                *o += w * vv;
            }
        }
    }
    Ok(out)
}

/// Layout of the text-fusion input `[image, instruction, responses, prompts]`.
pub fn text_fusion_layout(config: &ModelConfig, responses: &[ScoredResponse]) -> Vec<PositionRole> {
    let mut layout = Vec::new();
    layout.extend(std::iter::repeat(PositionRole::Image).take(config.n_patches()));
    layout.push(PositionRole::Instruction);
    for (k, resp) in responses.iter().enumerate() {
        for i in 0..resp.tokens.len() {
            layout.push(PositionRole::ResponseToken { response: k, token: i });
        }
    }
    layout.extend(std::iter::repeat(PositionRole::Prompt).take(config.n_prompts));
    layout
}

/// Layout of the embedding-fusion input, which appends one embedding token
/// per `(response, target)`, the repeated instruction that triggers the
/// refined decode, and the refined response.
pub fn embed_fusion_layout(
    config: &ModelConfig,
    responses: &[ScoredResponse],
    refined_len: usize,
) -> Vec<PositionRole> {
    let mut layout = text_fusion_layout(config, responses);
    for (k, resp) in responses.iter().enumerate() {
        for n in 0..resp.num_targets() {
            layout.push(PositionRole::EmbeddingToken { response: k, target: n });
        }
    }
    layout.push(PositionRole::Instruction);
    layout.extend(std::iter::repeat(PositionRole::RefinedResponse).take(refined_len));
    layout
}

/// A refined response produced by text fusion.
#[derive(Debug, Clone)]
pub struct FusedResponse {
    pub tokens: TokenSeq,
    pub truncated: bool,
}

/// Fuse K responses into a refined response: greedy decode under the
/// text-fusion attention bias. Deterministic given its inputs.
pub fn fuse_responses(
    model: &ToyModel,
    image: &Image,
    instruction: InstructionId,
    responses: &[ScoredResponse],
    scores: &PreferenceScores,
) -> Result<FusedResponse> {
    if responses.is_empty() {
        return Err(Error::shape("need at least one response to fuse"));
    }
    let layout = text_fusion_layout(&model.config, responses);
    let bias = attention_bias(&layout, scores, BiasMode::TextFusion)?;
    let tokens: Vec<TokenSeq> = responses.iter().map(|r| r.tokens.clone()).collect();
    let (refined, truncated) = model.fusion_decode(image, instruction, &tokens, &bias.gamma)?;
    Ok(FusedResponse { tokens: refined, truncated })
}

/// Candidate embeddings for each refined target, strict variant: every
/// response must carry the same number of targets as the refined response.
pub fn strict_candidates(
    responses: &[ScoredResponse],
    eta: &[Vec<f64>],
    n_targets: usize,
) -> Result<Vec<EmbedCandidates>> {
    for (k, resp) in responses.iter().enumerate() {
        if resp.num_targets() != n_targets {
            return Err(Error::Structure(format!(
                "response {k} has {} targets, refined response has {n_targets}",
                resp.num_targets()
            )));
        }
    }
    Ok(build_candidates(responses, eta, n_targets))
}

/// Lenient candidate construction for ragged responses: a response without
/// an n-th target contributes its last embedding instead; responses without
/// any seg token contribute nothing. Returns `None` when some target ends up
/// with no candidates at all.
pub fn lenient_candidates(
    responses: &[ScoredResponse],
    eta: &[Vec<f64>],
    n_targets: usize,
) -> Option<Vec<EmbedCandidates>> {
    let sets = build_candidates(responses, eta, n_targets);
    if sets.iter().any(|c| c.vectors.rows == 0) {
        None
    } else {
        Some(sets)
    }
}

fn build_candidates(
    responses: &[ScoredResponse],
    eta: &[Vec<f64>],
    n_targets: usize,
) -> Vec<EmbedCandidates> {
    let d = responses
        .iter()
        .flat_map(|r| r.embeddings.first())
        .map(|e| e.len())
        .next()
        .unwrap_or(0);
    (0..n_targets)
        .map(|n| {
            let mut rows = Vec::new();
            let mut bias = Vec::new();
            for (k, resp) in responses.iter().enumerate() {
                let (vec_n, eta_n) = if n < resp.num_targets() {
                    (&resp.embeddings[n], eta[k].get(n))
                } else if let Some(last) = resp.embeddings.last() {
                    (last, eta[k].last())
                } else {
                    continue;
                };
                rows.extend_from_slice(vec_n);
                bias.push(sigmoid(*eta_n.unwrap_or(&0.0)) - 0.5);
            }
            EmbedCandidates {
                vectors: Mat::from_vec(bias.len(), if bias.is_empty() { 0 } else { d }, rows),
                bias,
            }
        })
        .collect()
}

/// Embedding-token rows (k-major) and the matching full-sequence bias for
/// the embedding-fusion forward.
pub fn embed_tokens_and_bias(
    config: &ModelConfig,
    responses: &[ScoredResponse],
    scores: &PreferenceScores,
    refined_len: usize,
) -> Result<(Mat, BiasVector)> {
    let d = config.d_model;
    let mut rows = Vec::new();
    let mut count = 0;
    for resp in responses {
        for e in &resp.embeddings {
            if e.len() != d {
                return Err(Error::shape("embedding dim mismatch"));
            }
            rows.extend_from_slice(e);
            count += 1;
        }
    }
    let layout = embed_fusion_layout(config, responses, refined_len);
    let bias = attention_bias(&layout, scores, BiasMode::EmbeddingFusion)?;
    Ok((Mat::from_vec(count, d, rows), bias))
}

/// Refined segmentation embeddings for a refined response, one per `<seg>`
/// token, via the biased embedding-fusion forward. Strict about target
/// counts: every response must agree with the refined response.
pub fn fuse_embeddings(
    model: &ToyModel,
    image: &Image,
    instruction: InstructionId,
    responses: &[ScoredResponse],
    scores: &PreferenceScores,
    refined: &[TokenId],
) -> Result<Vec<Vec<f64>>> {
    let n_targets = crate::tokens::seg_positions(refined).len();
    let candidates = strict_candidates(responses, &scores.eta, n_targets)?;
    fuse_embeddings_with_candidates(model, image, instruction, responses, scores, refined, &candidates)
}

/// As `fuse_embeddings` but with externally supplied candidate sets (the
/// evaluation path uses the lenient construction).
pub fn fuse_embeddings_with_candidates(
    model: &ToyModel,
    image: &Image,
    instruction: InstructionId,
    responses: &[ScoredResponse],
    scores: &PreferenceScores,
    refined: &[TokenId],
    candidates: &[EmbedCandidates],
) -> Result<Vec<Vec<f64>>> {
    if refined.is_empty() {
        return Err(Error::shape("refined response is empty"));
    }
    let (f_tokens, bias) = embed_tokens_and_bias(&model.config, responses, scores, refined.len())?;
    let tokens: Vec<TokenSeq> = responses.iter().map(|r| r.tokens.clone()).collect();
    let mut tape = Tape::new();
    let pv = model.param_vars(&mut tape);
    let pass = model.fusion_embed_pass(
        &mut tape,
        &pv,
        image,
        instruction,
        &tokens,
        &f_tokens,
        &bias.gamma,
        refined,
        candidates,
        false,
    )?;
    Ok(pass
        .fused
        .iter()
        .map(|v| tape.value(*v).row(0).to_vec())
        .collect())
}

/// Decode a mask for each fused embedding.
pub fn masks_for_embeddings(
    model: &ToyModel,
    image: &Image,
    instruction: InstructionId,
    fused: &[Vec<f64>],
) -> Result<Vec<Mask>> {
    fused
        .iter()
        .map(|f| model.mask_for_embedding(image, instruction, f))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn resp(tokens: Vec<TokenId>, logps: Vec<f64>, embeddings: Vec<Vec<f64>>) -> ScoredResponse {
        ScoredResponse::from_parts(tokens, logps, embeddings).unwrap()
    }

    use crate::tokens::{object_token, EOS, SEG, SEP};

    #[test]
    fn tau_degenerate_and_endpoints() {
        // One shared likelihood: every tau is exactly 0.
        let r = resp(vec![object_token(0), SEG, SEP, EOS], vec![-0.5; 4], vec![vec![1.0]]);
        let tau = token_preference_scores(&[r]).unwrap();
        assert!(tau[0].iter().all(|t| *t == 0.0));

        // Two tokens in separate sentences with distinct likelihoods map to
        // the interval endpoints.
        let r = resp(vec![SEP, SEP], vec![-2.0, -0.5], vec![]);
        let tau = token_preference_scores(&[r]).unwrap();
        assert_eq!(tau[0][0], -1.0);
        assert_eq!(tau[0][1], 1.0);
    }

    #[test]
    fn tau_matches_two_pass_oracle() {
        let mut rng = crate::rngutil::substream(61, "ens-test", &[0]);
        for _ in 0..30 {
            let mut responses = Vec::new();
            for _ in 0..3 {
                let n_sent = rng.gen_range(1..4);
                let mut tokens = Vec::new();
                for _ in 0..n_sent {
                    tokens.push(object_token(rng.gen_range(0..8)));
                    tokens.push(SEG);
                    tokens.push(SEP);
                }
                tokens.push(EOS);
                let logps: Vec<f64> = (0..tokens.len()).map(|_| -rng.gen_range(0.05..3.0)).collect();
                let n = crate::tokens::seg_positions(&tokens).len();
                responses.push(resp(tokens, logps, vec![vec![1.0, 0.0]; n]));
            }
            let tau = token_preference_scores(&responses).unwrap();

            // Independent two-pass oracle: raw scores then min-max.
            let mut raws = Vec::new();
            for r in &responses {
                let spans = crate::tokens::sentence_spans(&r.tokens);
                let probs: Vec<f64> = r.logps.iter().map(|l| l.exp()).collect();
                let mut row = Vec::new();
                for i in 0..r.tokens.len() {
                    let (s, e) = crate::tokens::span_of(&spans, i).unwrap();
                    row.push(probs[i] + probs[s..e].iter().sum::<f64>() / (e - s) as f64);
                }
                raws.push(row);
            }
            let flat: Vec<f64> = raws.iter().flatten().copied().collect();
            let (lo, hi) = flat
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            for (k, row) in raws.iter().enumerate() {
                for (i, v) in row.iter().enumerate() {
                    let expect = if hi == lo { 0.0 } else { 2.0 * (v - lo) / (hi - lo) - 1.0 };
                    assert!((tau[k][i] - expect).abs() < 1e-12);
                    assert!((-1.0..=1.0).contains(&tau[k][i]));
                }
            }
            // With distinct raws the endpoints are attained.
            if hi > lo {
                let all: Vec<f64> = tau.iter().flatten().copied().collect();
                assert!(all.iter().any(|v| *v == 1.0));
                assert!(all.iter().any(|v| *v == -1.0));
            }
        }
    }

    #[test]
    fn eta_single_and_endpoints() {
        let r = resp(vec![object_token(0), SEG, SEP, EOS], vec![-0.5; 4], vec![vec![1.0]]);
        let eta = sentence_preference_scores(&[r]).unwrap();
        assert_eq!(eta[0], vec![0.0]);

        // Two targets with distinct span means hit the endpoints.
        let tokens = vec![object_token(0), SEG, SEP, object_token(1), SEG, SEP, EOS];
        let logps = vec![-2.0, -2.0, -2.0, -0.1, -0.1, -0.1, -0.1];
        let r = resp(tokens, logps, vec![vec![1.0], vec![2.0]]);
        let eta = sentence_preference_scores(&[r]).unwrap();
        assert_eq!(eta[0], vec![-1.0, 1.0]);
    }

    #[test]
    fn bias_offsets_only_at_biased_positions() {
        let layout = vec![
            PositionRole::Image,
            PositionRole::Instruction,
            PositionRole::ResponseToken { response: 0, token: 0 },
            PositionRole::ResponseToken { response: 0, token: 1 },
            PositionRole::Prompt,
            PositionRole::EmbeddingToken { response: 0, target: 0 },
        ];
        let scores = PreferenceScores { tau: vec![vec![0.0, 1.0]], eta: vec![vec![-1.0]] };
        let text = attention_bias(&layout, &scores, BiasMode::TextFusion).unwrap();
        assert_eq!(text.gamma[0], 0.0);
        assert_eq!(text.gamma[1], 0.0);
        assert_eq!(text.gamma[2], 0.0, "sigmoid(0) - 0.5 is exactly zero");
        assert!((text.gamma[3] - (sigmoid(1.0) - 0.5)).abs() < 1e-15);
        assert_eq!(text.gamma[4], 0.0);
        assert_eq!(text.gamma[5], 0.0, "embedding tokens are unbiased in text mode");
        for g in &text.gamma {
            assert!(g.abs() < 0.5);
        }

        let emb = attention_bias(&layout, &scores, BiasMode::EmbeddingFusion).unwrap();
        assert_eq!(emb.gamma[2], 0.0);
        assert!((emb.gamma[5] - (sigmoid(-1.0) - 0.5)).abs() < 1e-15);

        let bad = vec![PositionRole::Unlabeled];
        assert!(matches!(
            attention_bias(&bad, &scores, BiasMode::TextFusion),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn biased_attention_zero_gamma_is_bit_exact_and_rows_normalize() {
        let mut rng = crate::rngutil::substream(61, "ens-test", &[1]);
        for _ in 0..25 {
            let (nq, nk, d, dv) = (
                rng.gen_range(1..5),
                rng.gen_range(1..6),
                rng.gen_range(1..5),
                rng.gen_range(1..4),
            );
            let m = |r: usize, c: usize, rng: &mut dyn rand::RngCore| {
                Mat::from_vec(r, c, (0..r * c).map(|_| rand::Rng::gen_range(rng, -2.0..2.0)).collect())
            };
            let q = m(nq, d, &mut rng);
            let k = m(nk, d, &mut rng);
            let v = m(nk, dv, &mut rng);
            let plain = biased_attention(&q, &k, &v, d, None).unwrap();
            let zeros = BiasVector { gamma: vec![0.0; nk] };
            let biased = biased_attention(&q, &k, &v, d, Some(&zeros)).unwrap();
            assert_eq!(plain.data, biased.data, "zero bias must be bit-exact");

            // Attention rows sum to one: check via uniform values.
            let ones = Mat::from_vec(nk, 1, vec![1.0; nk]);
            let row_sums = biased_attention(&q, &k, &ones, d, None).unwrap();
            for s in &row_sums.data {
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn raising_gamma_strictly_increases_key_mass() {
        let mut rng = crate::rngutil::substream(61, "ens-test", &[2]);
        for _ in 0..50 {
            let (nq, nk, d) = (rng.gen_range(1..5), rng.gen_range(2..6), rng.gen_range(1..5));
            let m = |r: usize, c: usize, rng: &mut dyn rand::RngCore| {
                Mat::from_vec(r, c, (0..r * c).map(|_| rand::Rng::gen_range(rng, -2.0..2.0)).collect())
            };
            let q = m(nq, d, &mut rng);
            let k = m(nk, d, &mut rng);
            // Probe key j's attention mass with a one-hot value vector.
            let j = rng.gen_range(0..nk);
            let mut probe = Mat::zeros(nk, 1);
            probe.set(j, 0, 1.0);
            let mut gamma = BiasVector { gamma: (0..nk).map(|_| rng.gen_range(-0.4..0.4)).collect() };
            let before = biased_attention(&q, &k, &probe, d, Some(&gamma)).unwrap();
            gamma.gamma[j] += rng.gen_range(0.05..0.5);
            let after = biased_attention(&q, &k, &probe, d, Some(&gamma)).unwrap();
            for (b, a) in before.data.iter().zip(&after.data) {
                assert!(a > b, "raising gamma[{j}] must increase its mass for every query row");
            }
        }
    }

    #[test]
    fn layout_builders_cover_all_rows() {
        let config = ModelConfig::default();
        let r1 = resp(vec![object_token(1), SEG, SEP, EOS], vec![-0.5; 4], vec![vec![0.0; 8]]);
        let r2 = resp(vec![object_token(2), SEG, SEP, EOS], vec![-0.7; 4], vec![vec![0.0; 8]]);
        let responses = [r1, r2];
        let text = text_fusion_layout(&config, &responses);
        assert_eq!(text.len(), config.n_patches() + 1 + 8 + config.n_prompts);
        let emb = embed_fusion_layout(&config, &responses, 5);
        assert_eq!(emb.len(), text.len() + 2 + 1 + 5);
        assert!(emb.iter().all(|r| !matches!(r, PositionRole::Unlabeled)));
    }
}
