use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use forcegain::commands;
use forcegain::config::{Command, Overrides};
use forcegain::{Failure, RunConfig};
use forcegain_core::transfer::PolicyKind;

/// Peg-in-hole runs: collect scripted data, train the force planner and gain
/// tuner, evaluate under environment shift, sweep the desired-force scale and
/// fine-tune the planner.
#[derive(Parser, Debug)]
#[command(name = "forcegain", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Roll out the scripted policy and write trajectories plus a manifest.
    Collect(Flags),
    /// Train gain tuner, force planner and the joint baseline.
    Train(Flags),
    /// Evaluate policies on presets over paired seeds.
    Eval(Flags),
    /// Scale the planned force and record force and stiffness traces.
    Ablate(Flags),
    /// Fine-tune the planner on a few trajectories of a shifted preset.
    Finetune(Flags),
    /// Print the default configuration as TOML.
    Config,
}

#[derive(Args, Debug)]
struct Flags {
    /// TOML configuration; unset fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Episodes to collect or evaluate, ablation seeds, or fine-tuning trajectories.
    #[arg(long)]
    episodes: Option<u64>,
    /// Training or fine-tuning steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Preset name or preset TOML path; comma-separated for eval.
    #[arg(long, value_delimiter = ',')]
    preset: Option<Vec<String>>,
    /// Comma-separated policies for eval (fp_gt, joint_dt, fixed_gain, scripted).
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<String>>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve(cmd: Command, flags: &Flags) -> Result<RunConfig, Failure> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let policies = match &flags.policies {
        Some(names) => Some(names.iter().map(|n| PolicyKind::parse(n)).collect::<Result<Vec<_>, _>>()?),
        None => None,
    };
    let overrides = Overrides {
        seed: flags.seed,
        out: flags.out.clone(),
        episodes: flags.episodes,
        steps: flags.steps,
        presets: flags.preset.clone(),
        policies,
    };
    cfg.apply(cmd, &overrides)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (cmd, flags) = match &cli.command {
        Cmd::Collect(f) => (Command::Collect, f),
        Cmd::Train(f) => (Command::Train, f),
        Cmd::Eval(f) => (Command::Eval, f),
        Cmd::Ablate(f) => (Command::Ablate, f),
        Cmd::Finetune(f) => (Command::Finetune, f),
        Cmd::Config => {
            print!("{}", RunConfig::default().to_toml());
            return Ok(());
        }
    };
    let cfg = resolve(cmd, flags)?;
    match cmd {
        Command::Collect => commands::collect(&cfg).map(drop),
        Command::Train => commands::train_cmd(&cfg).map(drop),
        Command::Eval => commands::eval_cmd(&cfg).map(drop),
        Command::Ablate => commands::ablate_cmd(&cfg).map(drop),
        Command::Finetune => commands::finetune_cmd(&cfg).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
