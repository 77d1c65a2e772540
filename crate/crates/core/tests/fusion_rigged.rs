//! Rigged-model constructions for the fusion operations: a copy-style
//! attention head that reproduces the max-biased token, and pass-through /
//! near-copy behavior of the embedding fusion head.

use prefseg_core::ensemble::{
    fuse_embeddings, fuse_responses, preference_scores, strict_candidates,
};
use prefseg_core::linalg::{cosine, Mat};
use prefseg_core::raster::Image;
use prefseg_core::segmenter::ScoredResponse;
use prefseg_core::tokens::{object_token, TokenId, EOS, SEG, SEP};
use prefseg_core::toymodel::{ModelConfig, ToyModel};

/// A minimal single-layer model whose attention copies values verbatim:
/// query/key maps are zero (uniform-plus-bias attention), the value and
/// output maps are identity, the MLP is disabled, and every embedding table
/// is zeroed except one-hot token rows. Token logits read the token table
/// back, so whichever token row dominates the attention mix wins the argmax.
fn copy_model() -> ToyModel {
    let config = ModelConfig {
        grid: 4,
        patch: 4,
        d_model: 8,
        d_mlp: 4,
        n_layers: 1,
        vocab_size: 8,
        n_instructions: 1,
        n_prompts: 1,
        max_seq: 160,
        max_decode_len: 6,
        sample_temperature: 0.5,
    };
    let mut model = ToyModel::new(config, 0).unwrap();
    let d = 8;
    let zeros = |r, c| Mat::zeros(r, c);
    let params = &mut model.params;
    params.set("embed.patch.w", zeros(model.config.patch_input_dim(), d));
    params.set("embed.patch.b", zeros(1, d));
    params.set("embed.instr", zeros(1, d));
    params.set("embed.pos", zeros(model.config.max_seq, d));
    params.set("embed.type", zeros(prefseg_core::toymodel::NUM_ROLES, d));
    // One-hot token embeddings scaled so they stand out after normalization.
    let mut tok = Mat::zeros(8, d);
    for t in 0..8 {
        tok.set(t, t, 3.0);
    }
    params.set("embed.tok", tok.clone());
    params.set("layer0.attn.wq", zeros(d, d));
    params.set("layer0.attn.wk", zeros(d, d));
    params.set("layer0.attn.wv", Mat::identity(d));
    params.set("layer0.attn.wo", Mat::identity(d));
    params.set("layer0.mlp.w1", zeros(d, 4));
    params.set("layer0.mlp.b1", zeros(1, 4));
    params.set("layer0.mlp.w2", zeros(4, d));
    params.set("layer0.mlp.b2", zeros(1, d));
    params.set("head.vocab", tok.transpose());
    params.set("prompts", zeros(1, d));
    params.set("fuse.wq", zeros(d, d));
    params.set("fuse.wk", zeros(d, d));
    params.set("fuse.wv", Mat::identity(d));
    model
}

fn single_token_response(tok: TokenId, logp: f64) -> ScoredResponse {
    ScoredResponse::from_parts(vec![tok], vec![logp], vec![]).unwrap()
}

#[test]
fn fuse_responses_copies_the_max_biased_token() {
    let model = copy_model();
    let image = Image::filled(4, 4, 0.0);
    // Two one-token responses; the ground-truth object token carries a much
    // higher likelihood, so its tau hits +1 and its bias wins.
    let good = object_token(1); // token id 5
    let bad = object_token(3); // token id 7
    let responses = vec![
        single_token_response(good, -0.05),
        single_token_response(bad, -3.0),
    ];
    let scores = preference_scores(&responses).unwrap();
    assert_eq!(scores.tau[0][0], 1.0);
    assert_eq!(scores.tau[1][0], -1.0);
    let fused = fuse_responses(&model, &image, 0, &responses, &scores).unwrap();
    assert!(
        fused.tokens.contains(&good),
        "refined response {:?} must contain the max-biased token {good}",
        fused.tokens
    );
    assert!(
        !fused.tokens.contains(&bad),
        "with zero query/key maps the lower-biased token cannot win the argmax"
    );

    // Determinism: identical inputs give identical refined responses.
    let again = fuse_responses(&model, &image, 0, &responses, &scores).unwrap();
    assert_eq!(fused.tokens, again.tokens);
}

fn seg_response(obj: TokenId, logps: [f64; 4], embedding: Vec<f64>) -> ScoredResponse {
    let tokens = vec![obj, SEG, SEP, EOS];
    ScoredResponse::from_parts(tokens, logps.to_vec(), vec![embedding]).unwrap()
}

#[test]
fn fuse_embeddings_k1_identity_passthrough() {
    let model = copy_model();
    let image = Image::filled(4, 4, 0.0);
    let f = vec![0.3, -0.7, 0.2, 0.9, -0.1, 0.4, 0.0, -0.5];
    let resp = seg_response(object_token(0), [-0.2, -0.2, -0.2, -0.2], f.clone());
    let responses = vec![resp.clone()];
    let scores = preference_scores(&responses).unwrap();
    // Reuse the response itself as the refined sequence: one seg target.
    let fused = fuse_embeddings(&model, &image, 0, &responses, &scores, &resp.tokens).unwrap();
    assert_eq!(fused.len(), 1, "one fused embedding per refined seg token");
    for (a, b) in fused[0].iter().zip(&f) {
        assert_eq!(a, b, "K=1 with identity value map must pass the embedding through");
    }
}

#[test]
fn fuse_embeddings_copies_high_eta_candidate() {
    let model = copy_model();
    let image = Image::filled(4, 4, 0.0);
    let f_high = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let f_low1 = vec![0.0, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let f_low2 = vec![0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0];
    // Distinct sentence likelihoods put eta at the endpoints: the high-eta
    // response is the reliable one.
    let responses = vec![
        seg_response(object_token(0), [-0.05, -0.05, -0.05, -0.05], f_high.clone()),
        seg_response(object_token(1), [-2.0, -2.0, -2.0, -2.0], f_low1),
        seg_response(object_token(2), [-4.0, -4.0, -4.0, -4.0], f_low2),
    ];
    let scores = preference_scores(&responses).unwrap();
    assert_eq!(scores.eta[0][0], 1.0);
    assert_eq!(scores.eta[2][0], -1.0);
    let refined = responses[0].tokens.clone();
    let candidates = strict_candidates(&responses, &scores.eta, 1).unwrap();
    assert_eq!(candidates[0].vectors.rows, 3);
    let fused = prefseg_core::ensemble::fuse_embeddings_with_candidates(
        &model, &image, 0, &responses, &scores, &refined, &candidates,
    )
    .unwrap();
    let cos = cosine(&fused[0], &f_high).unwrap();
    assert!(cos > 0.99, "fused embedding must align with the high-eta candidate, cos = {cos}");
}

#[test]
fn strict_candidates_reject_target_count_mismatch() {
    let f = vec![0.0; 8];
    let one = seg_response(object_token(0), [-0.5, -0.5, -0.5, -0.5], f.clone());
    let tokens = vec![object_token(0), SEG, SEP, object_token(1), SEG, SEP, EOS];
    let two = ScoredResponse::from_parts(tokens, vec![-0.5; 7], vec![f.clone(), f]).unwrap();
    let responses = vec![one, two];
    let scores = preference_scores(&responses).unwrap();
    assert!(strict_candidates(&responses, &scores.eta, 2).is_err());
}
