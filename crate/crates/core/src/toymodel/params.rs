//! Model parameter storage, seeded initialization, hashing, and bit-exact
//! checkpoint persistence.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rngutil::substream;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

use super::ModelConfig;

/// Named tensors in deterministic (sorted) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Mat>,
}

/// Position-role ids for the type embedding table.
pub const ROLE_IMAGE: usize = 0;
pub const ROLE_INSTRUCTION: usize = 1;
pub const ROLE_RESPONSE: usize = 2;
pub const ROLE_PROMPT: usize = 3;
pub const ROLE_SEG_EMBED: usize = 4;
pub const ROLE_REFINED: usize = 5;
pub const NUM_ROLES: usize = 6;

impl ModelParams {
    /// Seeded initialization of every tensor the model uses.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let d = config.d_model;
        let mut tensors = BTreeMap::new();
        let mut put = |name: &str, m: Mat| {
            tensors.insert(name.to_string(), m);
        };
        let rng_for = |name: &str| substream(seed, "init", &[fxhash(name)]);

        put("embed.patch.w", Mat::gaussian(config.patch_input_dim(), d, 0.2, &mut rng_for("embed.patch.w")));
        put("embed.patch.b", Mat::zeros(1, d));
        put("embed.instr", Mat::gaussian(config.n_instructions, d, 0.3, &mut rng_for("embed.instr")));
        put("embed.tok", Mat::gaussian(config.vocab_size, d, 0.3, &mut rng_for("embed.tok")));
        put("embed.pos", Mat::gaussian(config.max_seq, d, 0.1, &mut rng_for("embed.pos")));
        put("embed.type", Mat::gaussian(NUM_ROLES, d, 0.1, &mut rng_for("embed.type")));

        let w_std = (1.0 / d as f64).sqrt();
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            put(&p("attn.gain"), Mat::from_vec(1, d, vec![1.0; d]));
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                let name = p(w);
                put(&name, Mat::gaussian(d, d, w_std, &mut rng_for(&name)));
            }
            put(&p("mlp.gain"), Mat::from_vec(1, d, vec![1.0; d]));
            put(&p("mlp.w1"), Mat::gaussian(d, config.d_mlp, w_std, &mut rng_for(&p("mlp.w1"))));
            put(&p("mlp.b1"), Mat::zeros(1, config.d_mlp));
            put(
                &p("mlp.w2"),
                Mat::gaussian(config.d_mlp, d, (1.0 / config.d_mlp as f64).sqrt(), &mut rng_for(&p("mlp.w2"))),
            );
            put(&p("mlp.b2"), Mat::zeros(1, d));
        }
        put("final.gain", Mat::from_vec(1, d, vec![1.0; d]));
        put("head.vocab", Mat::gaussian(d, config.vocab_size, w_std, &mut rng_for("head.vocab")));
        put("head.emb.w", Mat::gaussian(d, d, w_std, &mut rng_for("head.emb.w")));
        put("head.emb.b", Mat::zeros(1, d));

        put("dec.patch", Mat::gaussian(d, d, w_std, &mut rng_for("dec.patch")));
        put(
            "dec.pixel",
            Mat::gaussian(super::PIXEL_FEATURES, d, w_std, &mut rng_for("dec.pixel")),
        );
        put("dec.offset", Mat::gaussian(config.patch_len(), d, 0.1, &mut rng_for("dec.offset")));
        put("dec.bias", Mat::scalar(0.0));

        put("prompts", Mat::gaussian(config.n_prompts, d, 0.02, &mut rng_for("prompts")));

        // Fusion head: near-identity so embedding fusion starts as
        // self-consistency-weighted selection over the candidates with the
        // preference bias as tiebreak.
        let mut wq = Mat::identity(d);
        for v in wq.data.iter_mut() {
            *v *= 12.0;
        }
        wq.add_assign(&Mat::gaussian(d, d, 0.02, &mut rng_for("fuse.wq")));
        let mut wk = Mat::identity(d);
        wk.add_assign(&Mat::gaussian(d, d, 0.02, &mut rng_for("fuse.wk")));
        let mut wv = Mat::identity(d);
        wv.add_assign(&Mat::gaussian(d, d, 0.01, &mut rng_for("fuse.wv")));
        put("fuse.wq", wq);
        put("fuse.wk", wk);
        put("fuse.wv", wv);

        ModelParams { tensors }
    }

    pub fn get(&self, name: &str) -> &Mat {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"))
    }

    pub fn set(&mut self, name: &str, m: Mat) {
        let slot = self
            .tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"));
        assert!(slot.same_shape(&m), "tensor {name} shape change");
        *slot = m;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|m| m.data.len()).sum()
    }

    /// SHA-256 over names, shapes, and little-endian payloads of the tensors
    /// selected by `filter`, in sorted name order.
    pub fn subset_hash(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        for (name, m) in &self.tensors {
            if !filter(name) {
                continue;
            }
            hasher.update(name.as_bytes());
            hasher.update((m.rows as u64).to_le_bytes());
            hasher.update((m.cols as u64).to_le_bytes());
            for v in &m.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    pub fn full_hash(&self) -> String {
        self.subset_hash(|_| true)
    }

    /// Names belonging to the segmentation decoder (frozen in stage 2).
    pub fn is_decoder(name: &str) -> bool {
        name.starts_with("dec.")
    }

    /// The only tensor trained in stage 3.
    pub fn is_prompt(name: &str) -> bool {
        name == "prompts"
    }
}

fn fxhash(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// Checkpoint manifest: run identity plus the tensor index into `params.bin`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config_hash: String,
    pub stage: String,
    pub step: usize,
    pub seed: u64,
    pub params_hash: String,
    pub tensors: Vec<TensorMeta>,
}

/// Write `manifest.json` plus raw little-endian f64 blobs to `dir`.
pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams,
    config_hash: &str,
    stage: &str,
    step: usize,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, m) in params.iter() {
        tensors.push(TensorMeta {
            name: name.clone(),
            rows: m.rows,
            cols: m.cols,
            offset: blob.len(),
        });
        for v in &m.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        config_hash: config_hash.to_string(),
        stage: stage.to_string(),
        step,
        seed,
        params_hash: params.full_hash(),
        tensors,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(dir.join("params.bin"), blob)?;
    Ok(())
}

/// Bit-exact reload of a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, CheckpointManifest)> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let blob = std::fs::read(dir.join("params.bin"))?;
    let mut tensors = BTreeMap::new();
    for meta in &manifest.tensors {
        let count = meta.rows * meta.cols;
        let end = meta.offset + count * 8;
        if end > blob.len() {
            return Err(Error::Format(format!("tensor {} overruns params.bin", meta.name)));
        }
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let at = meta.offset + i * 8;
            let mut bytes = [0u8; 8];
            bytes.copy_from_slice(&blob[at..at + 8]);
            data.push(f64::from_le_bytes(bytes));
        }
        tensors.insert(meta.name.clone(), Mat::from_vec(meta.rows, meta.cols, data));
    }
    let params = ModelParams { tensors };
    if params.full_hash() != manifest.params_hash {
        return Err(Error::Format("checkpoint hash mismatch after reload".into()));
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(&cfg, 5);
        let b = ModelParams::init(&cfg, 5);
        assert_eq!(a.full_hash(), b.full_hash());
        let c = ModelParams::init(&cfg, 6);
        assert_ne!(a.full_hash(), c.full_hash());
        assert!(a.num_scalars() > 0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, 9);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, "deadbeef", "sft", 42, 9).unwrap();
        let (loaded, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.full_hash(), params.full_hash());
        assert_eq!(manifest.stage, "sft");
        assert_eq!(manifest.step, 42);
        for (name, m) in params.iter() {
            assert_eq!(loaded.get(name), m);
        }
    }

    #[test]
    fn subset_hash_isolates_groups() {
        let cfg = ModelConfig::default();
        let mut params = ModelParams::init(&cfg, 9);
        let dec_before = params.subset_hash(ModelParams::is_decoder);
        let rest_before = params.subset_hash(|n| !ModelParams::is_decoder(n));
        params.get_mut("prompts").data[0] += 1.0;
        assert_eq!(params.subset_hash(ModelParams::is_decoder), dec_before);
        assert_ne!(params.subset_hash(|n| !ModelParams::is_decoder(n)), rest_before);
    }
}
