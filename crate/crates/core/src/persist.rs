//! Artifact persistence: datasets, preference datasets, metric reports,
//! loss traces, and the append-only run manifest. Everything except
//! checkpoint payloads is plain JSON or CSV; floats round-trip bit-exactly
//! through the shortest-representation formatter.

use crate::collect::{Phase, SegPreferenceSample, TextPreferenceSample};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::synth::Sample;
use crate::toymodel::train::TraceRow;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
}

pub fn save_dataset(
    dir: &Path,
    config_hash: &str,
    seed: u64,
    train: &[Sample],
    val: &[Sample],
) -> Result<()> {
    let manifest = DatasetManifest {
        kind: "samples".into(),
        config_hash: config_hash.into(),
        seed,
        train_count: train.len(),
        val_count: val.len(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    for (split, samples) in [("train", train), ("val", val)] {
        for s in samples {
            write_json(&dir.join(split).join(format!("sample_{:05}.json", s.sample_id)), s)?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>, Vec<Sample>)> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.kind != "samples" {
        return Err(Error::Format(format!("expected samples manifest, got {}", manifest.kind)));
    }
    let load_split = |split: &str, count: usize| -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let s: Sample = read_json(&dir.join(split).join(format!("sample_{i:05}.json")))?;
            s.validate()?;
            out.push(s);
        }
        Ok(out)
    };
    let train = load_split("train", manifest.train_count)?;
    let val = load_split("val", manifest.val_count)?;
    Ok((manifest, train, val))
}

// ---------------------------------------------------------------------------
// Preference datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextPrefManifest {
    pub kind: String,
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub count: usize,
}

pub fn save_text_prefs(
    dir: &Path,
    config_hash: &str,
    checkpoint_hash: &str,
    samples: &[TextPreferenceSample],
) -> Result<()> {
    let manifest = TextPrefManifest {
        kind: "text_preference".into(),
        config_hash: config_hash.into(),
        checkpoint_hash: checkpoint_hash.into(),
        count: samples.len(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    for (i, s) in samples.iter().enumerate() {
        write_json(&dir.join(format!("pt_{i:05}.json")), s)?;
    }
    Ok(())
}

pub fn load_text_prefs(dir: &Path) -> Result<(TextPrefManifest, Vec<TextPreferenceSample>)> {
    let manifest: TextPrefManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.kind != "text_preference" {
        return Err(Error::Format(format!("expected text_preference manifest, got {}", manifest.kind)));
    }
    let samples = (0..manifest.count)
        .map(|i| read_json(&dir.join(format!("pt_{i:05}.json"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

/// Manifest of one segmentation-preference collection run; the skip log
/// lists source samples whose localization loop hit the round cap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegPrefManifest {
    pub kind: String,
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub phase: Phase,
    pub count: usize,
    pub skipped: Vec<u64>,
}

pub fn save_seg_prefs(
    dir: &Path,
    config_hash: &str,
    checkpoint_hash: &str,
    phase: Phase,
    samples: &[SegPreferenceSample],
    skipped: &[u64],
) -> Result<()> {
    let manifest = SegPrefManifest {
        kind: "seg_preference".into(),
        config_hash: config_hash.into(),
        checkpoint_hash: checkpoint_hash.into(),
        phase,
        count: samples.len(),
        skipped: skipped.to_vec(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    for (i, s) in samples.iter().enumerate() {
        write_json(&dir.join(format!("ps_{i:05}.json")), s)?;
    }
    Ok(())
}

pub fn load_seg_prefs(dir: &Path) -> Result<(SegPrefManifest, Vec<SegPreferenceSample>)> {
    let manifest: SegPrefManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.kind != "seg_preference" {
        return Err(Error::Format(format!("expected seg_preference manifest, got {}", manifest.kind)));
    }
    let samples: Vec<SegPreferenceSample> = (0..manifest.count)
        .map(|i| read_json(&dir.join(format!("ps_{i:05}.json"))))
        .collect::<Result<Vec<_>>>()?;
    for s in &samples {
        s.validate()?;
    }
    Ok((manifest, samples))
}

// ---------------------------------------------------------------------------
// Reports and traces
// ---------------------------------------------------------------------------

/// Flat evaluation report document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub ensemble: bool,
    pub n_samples: usize,
    pub metrics: MetricsReport,
}

pub fn save_eval_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_json(path, report)
}

pub fn load_eval_report(path: &Path) -> Result<EvalReport> {
    read_json(path)
}

/// One evaluation row per validation sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerSampleRow {
    pub sample_id: u64,
    pub instruction: u32,
    pub n_targets: usize,
    pub n_mentioned: usize,
    pub n_hallucinated: usize,
    pub mean_iou: f64,
}

pub fn save_per_sample_csv(path: &Path, rows: &[PerSampleRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::from("sample_id,instruction,n_targets,n_mentioned,n_hallucinated,mean_iou\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.sample_id, r.instruction, r.n_targets, r.n_mentioned, r.n_hallucinated, r.mean_iou
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn save_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::from("step,l_t,l_s,l_pre,l_ti,l_si,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.l_t, r.l_s, r.l_pre, r.l_ti, r.l_si, r.total
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub kind: String,
    pub path: String,
    pub wall_ms: u128,
}

/// Append-only index of a run's artifacts. Wall-clock timings live here and
/// only here, so every other artifact stays byte-deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub entries: Vec<ManifestEntry>,
}

impl RunManifest {
    pub fn load_or_new(dir: &Path, config_hash: &str) -> Result<Self> {
        let path = dir.join("run_manifest.json");
        if path.exists() {
            let m: RunManifest = read_json(&path)?;
            if m.config_hash != config_hash {
                return Err(Error::Config(format!(
                    "run directory belongs to config {} but current config is {}",
                    m.config_hash, config_hash
                )));
            }
            Ok(m)
        } else {
            Ok(RunManifest { config_hash: config_hash.into(), entries: Vec::new() })
        }
    }

    /// Record an artifact; the referenced path must exist at write time.
    pub fn record(&mut self, dir: &Path, kind: &str, rel_path: &str, wall_ms: u128) -> Result<()> {
        if !dir.join(rel_path).exists() {
            return Err(Error::Config(format!("manifest entry {rel_path} does not exist")));
        }
        self.entries.push(ManifestEntry { kind: kind.into(), path: rel_path.into(), wall_ms });
        write_json(&dir.join("run_manifest.json"), self)
    }
}

/// Recursively collect the relative paths and bytes of a directory tree,
/// sorted by path (used by determinism checks and tests).
pub fn dir_digest(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    fn walk(base: &Path, at: &Path, out: &mut Vec<(String, Vec<u8>)>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(at)?
            .map(|e| Ok(e?.path()))
            .collect::<Result<Vec<_>>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(base, &p, out)?;
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p)?));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_split;

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let train = generate_split(5, "train", 6, 16, 16);
        let val = generate_split(5, "val", 3, 16, 16);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), "abc", 5, &train, &val).unwrap();
        let (manifest, train2, val2) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.train_count, 6);
        assert_eq!(train, train2);
        assert_eq!(val, val2);

        // Saving the same data twice produces byte-identical trees.
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(dir2.path(), "abc", 5, &train, &val).unwrap();
        assert_eq!(dir_digest(dir.path()).unwrap(), dir_digest(dir2.path()).unwrap());
    }

    #[test]
    fn manifest_rejects_missing_files_and_foreign_configs() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::load_or_new(dir.path(), "h1").unwrap();
        assert!(m.record(dir.path(), "report", "nope.json", 1).is_err());
        std::fs::write(dir.path().join("ok.json"), "{}").unwrap();
        m.record(dir.path(), "report", "ok.json", 1).unwrap();
        assert!(RunManifest::load_or_new(dir.path(), "h2").is_err());
        let again = RunManifest::load_or_new(dir.path(), "h1").unwrap();
        assert_eq!(again.entries.len(), 1);
    }
}
