use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anchor_uda::experiment::{self, ExperimentConfig};
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

/// Category-anchor guided domain adaptation on synthetic segmentation grids.
#[derive(Parser)]
#[command(name = "anchor-uda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the source, target-train and target-eval datasets.
    Generate(Common),
    /// Pretrain, warm up and adapt; write checkpoints, reports and logs.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue adaptation from a stage snapshot.
        #[arg(long, value_name = "PATH")]
        stage_resume: Option<PathBuf>,
    },
    /// Run the ablation variants from one warmed model.
    Ablate(Common),
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        dataset: PathBuf,
        #[arg(long, value_name = "DIR", default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading config {}", self.config.display()))?;
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = common.load()?;
            for (path, count) in experiment::cmd_generate(&cfg)? {
                println!("{}\t{count} grids", path.display());
            }
        }
        Command::Run {
            common,
            stage_resume,
        } => {
            let cfg = common.load()?;
            let report = experiment::cmd_run(&cfg, stage_resume.as_deref())?;
            let show = |name: &str, r: Option<&anchor_uda::metrics::EvalReport>| {
                if let Some(r) = r {
                    println!("{name}\t{}", pct(r.miou));
                }
            };
            println!("model\tmiou_x100");
            show("pretrained", report.pretrained.as_ref());
            show("source-only", report.source_only.as_ref());
            show("warmup", report.warmup.as_ref());
            for s in &report.stages {
                show(&format!("stage-{}", s.summary.stage), Some(&s.eval));
            }
            show("final", Some(&report.final_eval));
            println!("outputs in {}", cfg.out.display());
        }
        Command::Ablate(common) => {
            let cfg = common.load()?;
            let report = experiment::cmd_ablate(&cfg)?;
            print!("{}", report.to_table());
            println!("outputs in {}", cfg.out.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
        } => {
            let report = experiment::cmd_eval(&checkpoint, &dataset, Path::new(&out))?;
            print!("{}", report.to_table());
            println!("pixel_accuracy\t{}", pct(report.pixel_accuracy));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
