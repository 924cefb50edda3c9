use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use pitlab::checkpoint::FORMAT_VERSION;
use pitlab::config::{ExperimentConfig, SCHEMA_VERSION};
use pitlab::experiment::{Ablation, EvalPart, Run, StageName};
use pitlab::Error;

#[derive(Parser, Debug)]
#[command(name = "pitlab", about = "Train and evaluate a policy and an implicit improver on a synthetic task suite")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the preference dataset and evaluation prompts.
    GenData(Common),
    /// Train one stage.
    Train {
        stage: TrainStage,
        #[command(flatten)]
        common: Common,
    },
    /// Build improvement chains on the evaluation prompts.
    Improve(Common),
    /// Run one part of the evaluation suite.
    Eval {
        part: EvalArg,
        #[command(flatten)]
        common: Common,
    },
    /// Every stage in order, then the manifest.
    RunAll(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Fail instead of running missing upstream stages.
    #[arg(long)]
    stage_only: bool,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum TrainStage {
    Pretrain,
    SftPolicy,
    SftPit,
    RmPolicy,
    RmGap,
    RlPolicy,
    RlPit,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum EvalArg {
    Compare,
    Elo,
    Agreement,
    RewardHist,
    RegionTrace,
    Sweep,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AblationArg {
    FirstRlOnly,
    SecondRlOnly,
}

fn open(c: &Common) -> pitlab::Result<Run> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let ablation = c.ablation.map(|a| match a {
        AblationArg::FirstRlOnly => Ablation::FirstRlOnly,
        AblationArg::SecondRlOnly => Ablation::SecondRlOnly,
    });
    Run::open(cfg, &c.out, ablation)
}

fn stage_of(s: TrainStage) -> StageName {
    match s {
        TrainStage::Pretrain => StageName::Pretrain,
        TrainStage::SftPolicy => StageName::SftPolicy,
        TrainStage::SftPit => StageName::SftPit,
        TrainStage::RmPolicy => StageName::RmPolicy,
        TrainStage::RmGap => StageName::RmGap,
        TrainStage::RlPolicy => StageName::RlPolicy,
        TrainStage::RlPit => StageName::RlPit,
    }
}

fn part_of(p: EvalArg) -> EvalPart {
    match p {
        EvalArg::Compare => EvalPart::Compare,
        EvalArg::Elo => EvalPart::Elo,
        EvalArg::Agreement => EvalPart::Agreement,
        EvalArg::RewardHist => EvalPart::RewardHist,
        EvalArg::RegionTrace => EvalPart::RegionTrace,
        EvalArg::Sweep => EvalPart::Sweep,
    }
}

fn execute(cmd: Command) -> pitlab::Result<()> {
    let (mut run, stage_only) = match &cmd {
        Command::GenData(c) | Command::Improve(c) | Command::RunAll(c) => (open(c)?, c.stage_only),
        Command::Train { common, .. } | Command::Eval { common, .. } => (open(common)?, common.stage_only),
    };
    let with_deps = !stage_only;
    match cmd {
        Command::GenData(_) => run.run_stage(StageName::GenData, with_deps)?,
        Command::Train { stage, .. } => run.run_stage(stage_of(stage), with_deps)?,
        Command::Improve(_) => run.run_stage(StageName::Improve, with_deps)?,
        Command::Eval { part, .. } => run.run_eval_part(part_of(part), with_deps)?,
        Command::RunAll(_) => {
            run.run_all()?;
        }
    }
    run.write_manifest()?;
    println!("{}", run.dir.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Plan(_) => 3,
        Error::Dependency(_) | Error::VocabMismatch { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let version = format!(
        "{} (config schema {SCHEMA_VERSION}, checkpoint format {FORMAT_VERSION})",
        env!("CARGO_PKG_VERSION")
    );
    let version: &'static str = Box::leak(version.into_boxed_str());
    let matches = match Cli::command().version(version).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
