//! Command-line experiment runner.

mod config;
mod report;
mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{CorpusSection, EncoderOverrides, ExperimentConfig, PlanSection, ProbeSection, QuantizerSection, SourceKind};
pub use report::{build_report, cmd_report, render_text, AblationCurves, Report, ReportRow};
pub use stages::{
    cmd_distill, cmd_eval, cmd_features, cmd_probe, cmd_pretrain, cmd_quantize, cmd_run, cmd_synth, cmd_targets,
    Context, Corpus, CurvePoint, MaskedEval, Outcome, Provenance, TrainSummary, PROVENANCE,
};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "selfdistill", version, about = "Iterative self-distillation of speech encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Iteration for iteration-scoped commands.
    #[arg(long, global = true)]
    pub iteration: Option<usize>,
    /// Recompute stages whose cached artifacts no longer match.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    Synth,
    /// Compute MFCC feature shards.
    Features,
    /// Fit the first-round codebook on MFCC frames and label the corpus.
    Quantize,
    /// Train the iteration-1 model.
    Pretrain,
    /// Produce labels for an iteration from the previous model.
    Targets,
    /// Train the student of an iteration (and its PCA ablation if enabled).
    Distill,
    /// Train probes on a frozen model.
    Probe,
    /// Evaluate a model and its probes on held-out data.
    Eval,
    /// Summarize evaluations into a table.
    Report,
    /// Run every stage.
    Run,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::StaleCache { .. } | Error::Plan(_) | Error::Usage(_) => 2,
        Error::Dependency { .. } => 3,
        Error::Numeric { .. } => 4,
        _ => 1,
    }
}

fn context(cli: &Cli) -> Result<Context> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Usage("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    let out = cfg.out.clone();
    Ok(Context::new(cfg, out, cli.force))
}

fn iterations(cli: &Cli, all: Vec<usize>) -> Vec<usize> {
    cli.iteration.map(|i| vec![i]).unwrap_or(all)
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.command == Command::Report && cli.config.is_none() {
        let out = cli
            .out
            .clone()
            .ok_or_else(|| Error::Usage("report needs --out or --config".into()))?;
        print!("{}", render_text(&cmd_report(&out)?));
        return Ok(());
    }
    let ctx = context(cli)?;
    let last = ctx.config.last_iteration();
    match cli.command {
        Command::Synth => drop(cmd_synth(&ctx)?),
        Command::Features => drop(cmd_features(&ctx)?),
        Command::Quantize => drop(cmd_quantize(&ctx)?),
        Command::Pretrain => drop(cmd_pretrain(&ctx)?),
        Command::Targets => {
            for i in iterations(cli, (2..=last).collect()) {
                cmd_targets(&ctx, i)?;
            }
        }
        Command::Distill => {
            for i in iterations(cli, (2..=last).collect()) {
                cmd_distill(&ctx, i)?;
            }
        }
        Command::Probe => {
            for i in iterations(cli, ctx.config.probe_iterations()) {
                cmd_probe(&ctx, i)?;
            }
        }
        Command::Eval => {
            for i in iterations(cli, (1..=last).collect()) {
                cmd_eval(&ctx, i)?;
            }
        }
        Command::Report => print!("{}", render_text(&cmd_report(&ctx.out)?)),
        Command::Run => {
            let n = cmd_run(&ctx)?;
            log::info!("{n} stage(s) recomputed");
            print!("{}", std::fs::read_to_string(ctx.out.join("report/report.txt")).unwrap_or_default());
        }
    }
    Ok(())
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(
            exit_code(&Error::Dependency {
                stage: "synth".into(),
                path: "p".into()
            }),
            3
        );
        assert_eq!(
            exit_code(&Error::Numeric {
                stage: "s".into(),
                layer: 0
            }),
            4
        );
        assert_eq!(exit_code(&Error::Format("x".into())), 1);
    }

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from(["selfdistill", "distill", "--config", "c.toml", "--iteration", "3", "--seed", "9"])
            .unwrap();
        assert_eq!(cli.command, Command::Distill);
        assert_eq!((cli.iteration, cli.seed), (Some(3), Some(9)));
    }
}
