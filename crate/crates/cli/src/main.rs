use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use prefseg_cli as cli;
use prefseg_core::collect::Phase;
use prefseg_core::config::RunConfig;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "prefseg", version, about = "Preference-optimized toy reasoning segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigOverrides {
    /// Config file with defaults; individual flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    val_samples: Option<usize>,
    #[arg(long)]
    sft_steps: Option<usize>,
    #[arg(long)]
    pref_steps: Option<usize>,
    #[arg(long)]
    ensemble_steps: Option<usize>,
    #[arg(long)]
    n_perturb: Option<usize>,
    #[arg(long)]
    max_rounds: Option<usize>,
    #[arg(long)]
    k_responses: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    band_width: Option<usize>,
}

impl ConfigOverrides {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        apply!(seed, train_samples, val_samples, sft_steps, pref_steps, ensemble_steps, n_perturb, max_rounds, k_responses, learning_rate);
        if let Some(w) = self.band_width {
            cfg.band_width = Some(w);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    match s {
        "localization" | "loc" => Ok(Phase::Localization),
        "boundary" | "bnd" => Ok(Phase::Boundary),
        other => Err(format!("unknown phase {other} (expected localization|boundary)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/val dataset into a run directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Collect text and segmentation preference data from a checkpoint.
    Collect {
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory name inside the run directory.
        #[arg(long, default_value = cli::CKPT_SFT)]
        checkpoint: String,
        /// Which finetuning half the data is for.
        #[arg(long, value_parser = parse_phase)]
        phase: Phase,
        /// Selection criterion override for ablations.
        #[arg(long, value_parser = parse_phase)]
        criterion: Option<Phase>,
    },
    /// Run one training stage: sft, pref, or ensemble.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stage: String,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: String,
        /// Fuse K responses with the preference-based ensemble.
        #[arg(long)]
        ensemble: bool,
    },
    /// Verify the analytic loss gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Assemble metric-versus-stage plot data from the run's reports.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("{err}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, overrides } => {
            let config = overrides.build()?;
            cli::cmd_synth(&out, &config)?;
            println!("dataset written to {}", out.join("dataset").display());
        }
        Command::Collect { out, checkpoint, phase, criterion } => {
            let stats = cli::cmd_collect(&out, &checkpoint, phase, criterion)?;
            println!(
                "collected {} text pairs, {} seg triples ({} skipped)",
                stats.text_pairs, stats.seg_collected, stats.seg_skipped
            );
        }
        Command::Train { out, stage } => {
            let ckpt = cli::cmd_train(&out, &stage)?;
            println!("checkpoint written to {}", ckpt.display());
        }
        Command::Eval { out, checkpoint, ensemble } => {
            let report = cli::cmd_eval(&out, &checkpoint, ensemble)?;
            let m = &report.metrics;
            println!(
                "giou {:.4} ciou {:.4} c_s {:.4} c_i {} pearson {}",
                m.giou,
                m.ciou,
                m.c_s,
                m.c_i.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
                m.pearson_r.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
            );
        }
        Command::Gradcheck { points, seed } => {
            let lines = cli::cmd_gradcheck(points, seed)?;
            let mut ok = true;
            for line in &lines {
                println!(
                    "{}: {} points, max rel err {:.3e} ... {}",
                    line.name,
                    line.points,
                    line.max_rel_err,
                    if line.passed { "PASS" } else { "FAIL" }
                );
                ok &= line.passed;
            }
            if !ok {
                anyhow::bail!("numeric error: gradient verification failed");
            }
        }
        Command::Report { out } => {
            let path = cli::cmd_report(&out)?;
            println!("plot data written to {}", path.display());
        }
    }
    Ok(())
}
