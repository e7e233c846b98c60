//! `embsig`: experiment runner over a run directory.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;
mod config;
mod error;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::error::CliError;
use crate::run::{RunDir, CONFIG};

#[derive(Parser, Debug)]
#[command(name = "embsig", version, about = "Probability signatures and embedding structure experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run directory, relative to the output root unless absolute.
    #[arg(long, global = true, default_value = "default")]
    run: PathBuf,
    /// Output root for run directories.
    #[arg(long, global = true, env = "EMBSIG_OUTPUT_ROOT", default_value = "embsig-runs")]
    root: PathBuf,
    /// Flat `section.key=value` config file layered over the run's config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", global = true)]
    set: Vec<String>,
    /// Overwrite existing output of the same subcommand.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an addition-task dataset and vocabulary.
    GenTask(commands::GenTaskArgs),
    /// Train a model on the run's dataset or corpus.
    Train(commands::TrainArgs),
    /// Analytic and empirical probability signatures of the task.
    Signatures(commands::SignaturesArgs),
    /// Embedding structure metrics over the saved snapshots.
    Metrics(commands::MetricsArgs),
    /// Compare predicted and measured gradients.
    Oracle(commands::OracleArgs),
    /// Ingest or synthesize a corpus and write its bigram signatures.
    CorpusSig(commands::CorpusSigArgs),
    /// Percentile alignment between embeddings and corpus signatures.
    Align(commands::AlignArgs),
    /// Collate the run's artifacts into a static report.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenTask(_) => "gen-task",
            Command::Train(_) => "train",
            Command::Signatures(_) => "signatures",
            Command::Metrics(_) => "metrics",
            Command::Oracle(_) => "oracle",
            Command::CorpusSig(_) => "corpus-sig",
            Command::Align(_) => "align",
            Command::Report => "report",
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let dir = g.root.join(&g.run);
    // The report is derived output and is always regenerated.
    let force = g.force || matches!(cli.command, Command::Report);
    let run = RunDir::open(&dir, cli.command.name(), force)?;
    let mut cfg = if run.exists(CONFIG) {
        Config::load(&run.path(CONFIG))?
    } else {
        Config::default()
    };
    if let Some(p) = &g.config {
        cfg.merge(&Config::load(p)?);
    }
    cfg.set_pairs(&g.set)?;

    match &cli.command {
        Command::GenTask(a) => commands::gen_task(run, cfg, a, g.force),
        Command::Train(a) => commands::train(run, cfg, a),
        Command::Signatures(a) => commands::signatures(run, cfg, a),
        Command::Metrics(a) => commands::metrics(run, cfg, a),
        Command::Oracle(a) => commands::oracle(run, cfg, a),
        Command::CorpusSig(a) => commands::corpus_sig(run, cfg, a, g.force),
        Command::Align(a) => commands::align(run, cfg, a),
        Command::Report => report::report(run, cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
