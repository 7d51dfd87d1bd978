//! `mlmkit`: corpus sampling, vocabulary training, pretraining, fine-tuning,
//! feature extraction and evaluation from the command line.

mod commands;
mod manifest;
mod settings;

use clap::{Parser, Subcommand};
use commands::Run;
use settings::{Settings, UsageError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "mlmkit", version, about = "Masked-language-model pretraining and fine-tuning toolkit")]
struct Cli {
    /// File of key=value lines; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a subword vocabulary from a corpus.
    Vocab(commands::VocabArgs),
    /// Draw whole documents up to a byte budget.
    Sample(commands::SampleArgs),
    /// Size and tokens-per-document percentiles of a corpus.
    Stats(commands::StatsArgs),
    /// Train an encoder with the masked-language-model objective.
    Pretrain(Box<commands::PretrainArgs>),
    /// Grid-search a task head on top of a pretrained encoder.
    Finetune(commands::FinetuneArgs),
    /// Write frozen word features from the last four layers.
    Embed(commands::EmbedArgs),
    /// Score predictions against gold annotations.
    Eval(commands::EvalArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    if let Some(n) = settings.optional("threads", cli.threads)? {
        if n == 0 {
            return Err(settings::usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let seed = cli.seed;
    let name = match &cli.command {
        Command::Vocab(_) => "vocab",
        Command::Sample(_) => "sample",
        Command::Stats(_) => "stats",
        Command::Pretrain(_) => "pretrain",
        Command::Finetune(_) => "finetune",
        Command::Embed(_) => "embed",
        Command::Eval(_) => "eval",
    };
    let r = Run::new(name, settings, seed)?;
    match cli.command {
        Command::Vocab(a) => commands::vocab(a, r),
        Command::Sample(a) => commands::sample(a, r),
        Command::Stats(a) => commands::stats(a, r),
        Command::Pretrain(a) => commands::pretrain_cmd(*a, r),
        Command::Finetune(a) => commands::finetune_cmd(a, r),
        Command::Embed(a) => commands::embed(a, r),
        Command::Eval(a) => commands::eval_cmd(a, r),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            if e.downcast_ref::<UsageError>().is_some() {
                eprintln!("usage error: {line}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {line}");
                ExitCode::from(1)
            }
        }
    }
}
