//! Pipeline orchestration over a run directory: synthesis, preference
//! collection, the three training stages, evaluation, gradient verification,
//! and report assembly. Every artifact is stamped with the config hash and
//! recorded in the append-only run manifest.

use prefseg_core::collect::{
    collect_seg_preference, collect_text_preference, CollectOutcome, CorruptionOracle, Phase,
    SegPreferenceSample, TextPreferenceSample,
};
use prefseg_core::config::RunConfig;
use prefseg_core::error::{Error, Result};
use prefseg_core::evaluate::{evaluate, EvalOptions};
use prefseg_core::persist::{
    self, dir_digest, load_dataset, load_seg_prefs, load_text_prefs, EvalReport, RunManifest,
};
use prefseg_core::rngutil::subseed;
use prefseg_core::synth::{generate_split, sam_oracle};
use prefseg_core::toymodel::train::{
    ensemble_train, preference_finetune, sft_train, EnsembleOptions, PreferenceOptions, SftOptions,
};
use prefseg_core::toymodel::{load_checkpoint, save_checkpoint, ToyModel};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const CKPT_SFT: &str = "ckpt_sft";
pub const CKPT_PREF: &str = "ckpt_pref";
pub const CKPT_ENSEMBLE: &str = "ckpt_ensemble";

fn config_path(out: &Path) -> PathBuf {
    out.join("config.json")
}

/// Load the run configuration written by `synth`.
pub fn load_run_config(out: &Path) -> Result<RunConfig> {
    let path = config_path(out);
    if !path.exists() {
        return Err(Error::Config(format!(
            "no config at {}; run the synth step first",
            path.display()
        )));
    }
    RunConfig::from_json_file(&path)
}

fn record(out: &Path, config: &RunConfig, kind: &str, rel: &str, started: Instant) -> Result<()> {
    let mut manifest = RunManifest::load_or_new(out, &config.config_hash())?;
    manifest.record(out, kind, rel, started.elapsed().as_millis())
}

/// Synthesize the train/val dataset for a run directory.
pub fn cmd_synth(out: &Path, config: &RunConfig) -> Result<()> {
    config.validate()?;
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    std::fs::write(config_path(out), config.canonical_json())?;
    let train = generate_split(config.seed, "dataset-train", config.train_samples, config.model.grid, config.model.grid);
    let val = generate_split(config.seed, "dataset-val", config.val_samples, config.model.grid, config.model.grid);
    persist::save_dataset(&out.join("dataset"), &config.config_hash(), config.seed, &train, &val)?;
    record(out, config, "dataset", "dataset", started)
}

fn load_model(out: &Path, config: &RunConfig, name: &str) -> Result<(ToyModel, String)> {
    let dir = out.join(name);
    if !dir.exists() {
        return Err(Error::Config(format!(
            "checkpoint {name} not found; run its training stage first"
        )));
    }
    let (params, manifest) = load_checkpoint(&dir)?;
    if manifest.config_hash != config.config_hash() {
        return Err(Error::Config(format!(
            "checkpoint {name} belongs to a different config"
        )));
    }
    Ok((ToyModel::from_params(config.model.clone(), params)?, manifest.params_hash))
}

/// Outcome counts of one collection run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollectStats {
    pub text_pairs: usize,
    pub seg_collected: usize,
    pub seg_skipped: usize,
}

/// Collect the text preference pairs and the phase's segmentation preference
/// triples from the SFT checkpoint. `criterion` overrides the selection
/// criterion (the curriculum ablation runs the localization criterion for
/// the boundary slot).
pub fn cmd_collect(
    out: &Path,
    checkpoint: &str,
    slot: Phase,
    criterion: Option<Phase>,
) -> Result<CollectStats> {
    let config = load_run_config(out)?;
    let started = Instant::now();
    let (model, checkpoint_hash) = load_model(out, &config, checkpoint)?;
    let (_, train, _) = load_dataset(&out.join("dataset"))?;
    let collect_cfg = config.collect_config();
    let criterion = criterion.unwrap_or(slot);
    let oracle = CorruptionOracle::default();

    let mut text: Vec<TextPreferenceSample> = Vec::new();
    let mut seg: Vec<SegPreferenceSample> = Vec::new();
    let mut skipped: Vec<u64> = Vec::new();
    let slot_tag = phase_tag(slot);
    for sample in &train {
        let pt_seed = subseed(config.seed, "collect-text", &[sample.sample_id]);
        text.push(collect_text_preference(sample, &model, &oracle, pt_seed)?);
        let sam = sam_oracle(config.model.grid, config.model.grid, &sample.objects);
        let ps_seed = subseed(config.seed, "collect-seg", &[phase_ix(slot), sample.sample_id]);
        match collect_seg_preference(sample, &model, &sam, criterion, &collect_cfg, ps_seed)? {
            CollectOutcome::Collected(ps) => seg.push(*ps),
            CollectOutcome::Skipped { .. } => skipped.push(sample.sample_id),
        }
    }

    let dir = out.join(format!("pref_{slot_tag}"));
    persist::save_text_prefs(&dir.join("text"), &config.config_hash(), &checkpoint_hash, &text)?;
    persist::save_seg_prefs(
        &dir.join("seg"),
        &config.config_hash(),
        &checkpoint_hash,
        criterion,
        &seg,
        &skipped,
    )?;
    record(out, &config, "preference", &format!("pref_{slot_tag}"), started)?;
    Ok(CollectStats { text_pairs: text.len(), seg_collected: seg.len(), seg_skipped: skipped.len() })
}

fn phase_tag(phase: Phase) -> &'static str {
    match phase {
        Phase::Localization => "localization",
        Phase::Boundary => "boundary",
    }
}

fn phase_ix(phase: Phase) -> u64 {
    match phase {
        Phase::Localization => 0,
        Phase::Boundary => 1,
    }
}

/// Run one training stage. Prerequisites: `sft` needs the dataset, `pref`
/// needs the SFT checkpoint plus both preference datasets, `ensemble` needs
/// the stage-2 checkpoint.
pub fn cmd_train(out: &Path, stage: &str) -> Result<PathBuf> {
    let config = load_run_config(out)?;
    let started = Instant::now();
    let (_, train, _) = load_dataset(&out.join("dataset"))?;
    let (ckpt_name, trace_name) = match stage {
        "sft" => (CKPT_SFT, "trace_sft.csv"),
        "pref" => (CKPT_PREF, "trace_pref.csv"),
        "ensemble" => (CKPT_ENSEMBLE, "trace_ensemble.csv"),
        other => return Err(Error::Config(format!("unknown stage {other}"))),
    };

    let (mut model, trace) = match stage {
        "sft" => {
            let mut model = ToyModel::new(config.model.clone(), subseed(config.seed, "init", &[]))?;
            let trace = sft_train(
                &mut model,
                &train,
                &SftOptions {
                    steps: config.sft_steps,
                    batch_size: config.batch_size,
                    learning_rate: config.learning_rate,
                    mask_loss_weight: config.mask_loss_weight,
                },
            )?;
            (model, trace)
        }
        "pref" => {
            let (mut model, _) = load_model(out, &config, CKPT_SFT)?;
            let (_, pt) = load_text_prefs(&out.join("pref_localization").join("text"))?;
            let (_, ps_loc) = load_seg_prefs(&out.join("pref_localization").join("seg"))?;
            let (_, ps_bnd) = load_seg_prefs(&out.join("pref_boundary").join("seg"))?;
            let trace = preference_finetune(
                &mut model,
                &pt,
                &ps_loc,
                &ps_bnd,
                &train,
                &PreferenceOptions {
                    steps: config.pref_steps,
                    learning_rate: config.pref_learning_rate,
                    mask_loss_weight: config.pref_mask_loss_weight,
                    hyper: config.hyper,
                    band: config.band(),
                },
            )?;
            (model, trace)
        }
        _ => {
            let (mut model, _) = load_model(out, &config, CKPT_PREF)?;
            let trace = ensemble_train(
                &mut model,
                &train,
                &EnsembleOptions {
                    steps: config.ensemble_steps,
                    learning_rate: config.ensemble_learning_rate,
                    k_responses: config.k_responses,
                    seed: subseed(config.seed, "ens-train", &[]),
                    hyper: config.hyper,
                },
            )?;
            (model, trace)
        }
    };

    let steps = trace.len();
    persist::save_trace_csv(&out.join(trace_name), &trace)?;
    let ckpt_dir = out.join(ckpt_name);
    save_checkpoint(&ckpt_dir, &model.params, &config.config_hash(), stage, steps, config.seed)?;
    // Drop mutable access before recording.
    let _ = &mut model;
    record(out, &config, "checkpoint", ckpt_name, started)?;
    record(out, &config, "trace", trace_name, started)?;
    Ok(ckpt_dir)
}

/// Evaluate a checkpoint on the validation split, with or without the
/// K-response ensemble fusion. Writes the metrics report and per-sample CSV.
pub fn cmd_eval(out: &Path, checkpoint: &str, ensemble: bool) -> Result<EvalReport> {
    let config = load_run_config(out)?;
    let started = Instant::now();
    let (model, checkpoint_hash) = load_model(out, &config, checkpoint)?;
    let (_, _, val) = load_dataset(&out.join("dataset"))?;
    let outcome = evaluate(
        &model,
        &val,
        &EvalOptions {
            ensemble,
            k_responses: config.k_responses,
            seed: subseed(config.seed, "eval", &[]),
        },
    )?;
    let mode = if ensemble { "ensemble" } else { "single" };
    let report = EvalReport {
        config_hash: config.config_hash(),
        checkpoint_hash,
        ensemble,
        n_samples: val.len(),
        metrics: outcome.report,
    };
    let report_name = format!("report_{checkpoint}_{mode}.json");
    let csv_name = format!("per_sample_{checkpoint}_{mode}.csv");
    persist::save_eval_report(&out.join(&report_name), &report)?;
    persist::save_per_sample_csv(&out.join(&csv_name), &outcome.rows)?;
    record(out, &config, "report", &report_name, started)?;
    record(out, &config, "per_sample", &csv_name, started)?;
    Ok(report)
}

/// One gradient-verification line.
#[derive(Debug, Clone)]
pub struct GradCheckLine {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Verify the analytic gradients of all preference and improvement losses
/// against central finite differences at `points` random points each.
pub fn cmd_gradcheck(points: usize, seed: u64) -> Result<Vec<GradCheckLine>> {
    use prefseg_core::losses::*;
    use rand::Rng;

    let step = 1e-5;
    let tol = 1e-4;
    let hyper = PreferenceHyper::default();
    let mut lines = Vec::new();

    let mut run = |name: &'static str,
                   mut one: Box<dyn FnMut(u64) -> Result<GradCheckReport>>|
     -> Result<()> {
        let mut max_rel = 0.0f64;
        let mut all_pass = true;
        for p in 0..points {
            let report = one(p as u64)?;
            max_rel = max_rel.max(report.max_rel_err);
            all_pass &= report.passed;
        }
        lines.push(GradCheckLine { name, points, max_rel_err: max_rel, passed: all_pass });
        Ok(())
    };

    run(
        "text_dpo_loss",
        Box::new(move |p| {
            let mut rng = prefseg_core::rngutil::substream(seed, "gc-text", &[p]);
            let n_yc = rng.gen_range(1..8);
            let n_y = rng.gen_range(1..8);
            let ref_yc: Vec<f64> = (0..n_yc).map(|_| rng.gen_range(-3.0..-0.05)).collect();
            let ref_y: Vec<f64> = (0..n_y).map(|_| rng.gen_range(-3.0..-0.05)).collect();
            let l_yc: Vec<usize> = (0..n_yc).filter(|_| rng.gen_bool(0.4)).collect();
            let l_y: Vec<usize> = (0..n_y).filter(|_| rng.gen_bool(0.4)).collect();
            let point: Vec<f64> = (0..n_yc + n_y).map(|_| rng.gen_range(-3.0..-0.05)).collect();
            let f = move |x: &[f64]| {
                text_dpo_loss(&x[..n_yc], &x[n_yc..], &ref_yc, &ref_y, &l_y, &l_yc, &hyper)
            };
            finite_difference_check(&f, &point, step, tol)
        }),
    )?;

    run(
        "seg_preference_loss",
        Box::new(move |p| {
            let mut rng = prefseg_core::rngutil::substream(seed, "gc-seg", &[p]);
            let d = 8;
            let mut mk = || -> Vec<f64> { (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect() };
            let point = mk().iter().map(|v| v + 0.15).collect::<Vec<_>>();
            let (best, mid, worst) = (mk(), mk(), mk());
            let f = move |x: &[f64]| seg_preference_loss(x, &best, &mid, &worst, true, hyper.beta_s);
            finite_difference_check(&f, &point, step, tol)
        }),
    )?;

    run(
        "text_improvement_loss",
        Box::new(move |p| {
            let mut rng = prefseg_core::rngutil::substream(seed, "gc-ti", &[p]);
            let d = 8;
            let k = rng.gen_range(1..4);
            let gt: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0) + 0.1).collect();
            let originals: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0) + 0.1).collect())
                .collect();
            let point: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0) + 0.1).collect();
            let prob = rng.gen_range(0.05..1.0);
            let f = move |x: &[f64]| {
                text_improvement_loss(prob, x, &gt, &originals, hyper.improvement_scale)
            };
            finite_difference_check(&f, &point, step, tol)
        }),
    )?;

    run(
        "seg_improvement_loss",
        Box::new(move |p| {
            let mut rng = prefseg_core::rngutil::substream(seed, "gc-si", &[p]);
            let n = rng.gen_range(1..4);
            let k = rng.gen_range(1..4);
            let point: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
            let originals: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..n).map(|_| rng.gen_range(0.05..0.95)).collect())
                .collect();
            let f = move |x: &[f64]| seg_improvement_loss(x, &originals, hyper.improvement_scale);
            finite_difference_check(&f, &point, step, tol)
        }),
    )?;

    Ok(lines)
}

/// Assemble the metric-versus-stage plot data from the reports present in a
/// run directory.
pub fn cmd_report(out: &Path) -> Result<PathBuf> {
    let config = load_run_config(out)?;
    let started = Instant::now();
    let stages = [
        ("sft", format!("report_{CKPT_SFT}_single.json")),
        ("preference", format!("report_{CKPT_PREF}_single.json")),
        ("ensemble_single", format!("report_{CKPT_ENSEMBLE}_single.json")),
        ("ensemble_fused", format!("report_{CKPT_ENSEMBLE}_ensemble.json")),
    ];
    let mut csv = String::from("stage,giou,ciou,c_s,c_i,pearson_r\n");
    let mut found = 0;
    for (label, file) in &stages {
        let path = out.join(file);
        if !path.exists() {
            continue;
        }
        let report = persist::load_eval_report(&path)?;
        let m = &report.metrics;
        csv.push_str(&format!(
            "{label},{},{},{},{},{}\n",
            m.giou,
            m.ciou,
            m.c_s,
            m.c_i.map(|v| v.to_string()).unwrap_or_default(),
            m.pearson_r.map(|v| v.to_string()).unwrap_or_default(),
        ));
        found += 1;
    }
    if found == 0 {
        return Err(Error::Config("no evaluation reports found; run eval first".into()));
    }
    let path = out.join("plotdata.csv");
    std::fs::write(&path, csv)?;
    record(out, &config, "plotdata", "plotdata.csv", started)?;
    Ok(path)
}

/// Byte-level digest of a run directory excluding the run manifest (whose
/// wall-clock timings legitimately differ between runs).
pub fn run_digest(out: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    Ok(dir_digest(out)?
        .into_iter()
        .filter(|(path, _)| path != "run_manifest.json")
        .collect())
}

/// Convenience wrapper running the full pipeline in order.
pub fn run_full_pipeline(out: &Path, config: &RunConfig) -> Result<()> {
    cmd_synth(out, config)?;
    cmd_train(out, "sft")?;
    cmd_collect(out, CKPT_SFT, Phase::Localization, None)?;
    cmd_collect(out, CKPT_SFT, Phase::Boundary, None)?;
    cmd_train(out, "pref")?;
    cmd_train(out, "ensemble")?;
    cmd_eval(out, CKPT_SFT, false)?;
    cmd_eval(out, CKPT_PREF, false)?;
    cmd_eval(out, CKPT_ENSEMBLE, false)?;
    cmd_eval(out, CKPT_ENSEMBLE, true)?;
    cmd_report(out)?;
    Ok(())
}

