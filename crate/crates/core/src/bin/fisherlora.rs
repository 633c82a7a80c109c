use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fisherlora::harness::commands;
use fisherlora::harness::config::RunConfig;
use fisherlora::Result;

/// Fisher-guided LoRA initialization experiments.
#[derive(Parser, Debug)]
#[command(name = "fisherlora", version)]
struct Cli {
    /// Key-value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output.dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Accumulate Fisher factors for every tapped layer.
    Stats,
    /// Build adapters from factors written by `stats`.
    Init {
        /// Directory holding the `stats` outputs (default: the output dir).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Train adapters written by `init`.
    Train {
        /// Directory holding the `init` outputs (default: the output dir).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Symmetric-perturbation curvature against Fisher Energy.
    Probe,
    /// Per-group adapter training over singular directions.
    Preliminary,
    /// Criterion × scaling grid over several seeds.
    Ablate,
    /// Pairwise overlap of selected directions across tasks.
    Overlap {
        /// `name=init_dir`, repeated at least twice.
        #[arg(long = "task", value_parser = parse_task, required = true)]
        tasks: Vec<(String, PathBuf)>,
    },
    /// Per-phase wall-clock and peak matrix memory.
    Timing,
}

fn parse_task(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, dir) = s.split_once('=').ok_or_else(|| format!("expected name=dir, got {s:?}"))?;
    Ok((name.to_string(), PathBuf::from(dir)))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    let manifest = match cli.command {
        Command::Stats => commands::cmd_stats(&cfg, &out)?,
        Command::Init { from } => commands::cmd_init(&cfg, from.as_deref().unwrap_or(&out), &out)?,
        Command::Train { from } => commands::cmd_train(&cfg, from.as_deref().unwrap_or(&out), &out)?,
        Command::Probe => commands::cmd_probe(&cfg, &out)?,
        Command::Preliminary => commands::cmd_preliminary(&cfg, &out)?,
        Command::Ablate => commands::cmd_ablate(&cfg, &out)?,
        Command::Overlap { tasks } => commands::cmd_overlap(&cfg, &tasks, &out)?,
        Command::Timing => commands::cmd_timing(&cfg, &out)?,
    };
    for path in &manifest.artifact_paths {
        println!("{}", out.join(path).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
