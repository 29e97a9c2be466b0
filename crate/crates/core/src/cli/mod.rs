//! Command-line front end. Every subcommand reads the same TOML run config.

pub mod config;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
pub use config::RunConfig;
pub use stages::{Stage, StageOptions, PIPELINE};

#[derive(Parser, Debug)]
#[command(name = "ambiprobe", version, about = "Probe BiLSTM language-model states for lexical substitutes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic corpus and substitution dataset.
    Synth(ConfigArg),
    /// Tokenize and split the raw corpus.
    PrepareCorpus(ConfigArg),
    /// Train the language model.
    TrainLm(ConfigArg),
    /// Test-set perplexity of the trained model.
    EvalLm(ConfigArg),
    /// Filter and split the substitution dataset.
    PrepareLexsub(ConfigArg),
    /// Extract hidden states for every substitution item.
    ExtractStates(ConfigArg),
    /// Train probes for each state kind, layer and task.
    TrainProbes {
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated probe filters such as `current-1-WORD` or `predictive`.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score probes and baselines on the test split.
    Evaluate(ConfigArg),
    /// Write tables, JSONL results and scatter data.
    Report(ConfigArg),
    /// Run every stage whose inputs changed.
    Pipeline {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Rerun stages even when their outputs are up to date.
        #[arg(long)]
        force: bool,
    },
}

/// Exit code for a failed run: 2 for bad input or configuration, 3 for
/// numerical or internal failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Input(_)
        | Error::Parse { .. }
        | Error::Format { .. }
        | Error::Incompatible(_)
        | Error::Split(_)
        | Error::Io { .. }
        | Error::Sampling { .. } => 2,
        _ => 3,
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let (label, result) = dispatch(cli.command);
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("[{label}] error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> (&'static str, crate::Result<()>) {
    let single = |stage: Stage, c: &ConfigArg, opts: StageOptions| {
        (stage.name(), RunConfig::load(&c.config).and_then(|rc| stage.execute(&rc, &opts)))
    };
    match cmd {
        Command::Synth(c) => ("synth", RunConfig::load(&c.config).and_then(|rc| stages::synth(&rc))),
        Command::PrepareCorpus(c) => single(Stage::PrepareCorpus, &c, StageOptions::default()),
        Command::TrainLm(c) => single(Stage::TrainLm, &c, StageOptions::default()),
        Command::EvalLm(c) => single(Stage::EvalLm, &c, StageOptions::default()),
        Command::PrepareLexsub(c) => single(Stage::PrepareLexsub, &c, StageOptions::default()),
        Command::ExtractStates(c) => single(Stage::ExtractStates, &c, StageOptions::default()),
        Command::TrainProbes { config, only, jobs } => {
            single(Stage::TrainProbes, &config, StageOptions { only, jobs })
        }
        Command::Evaluate(c) => single(Stage::Evaluate, &c, StageOptions::default()),
        Command::Report(c) => single(Stage::Report, &c, StageOptions::default()),
        Command::Pipeline { config, jobs, force } => {
            let rc = match RunConfig::load(&config.config) {
                Ok(rc) => rc,
                Err(e) => return ("pipeline", Err(e)),
            };
            let opts = StageOptions { only: Vec::new(), jobs };
            for stage in PIPELINE {
                match stage.is_fresh(&rc, &opts) {
                    Ok(true) if !force => {
                        log::info!("[{}] up to date, skipping", stage.name());
                        continue;
                    }
                    Ok(_) => {}
                    Err(e) => return (stage.name(), Err(e)),
                }
                log::info!("[{}] running", stage.name());
                if let Err(e) = stage.execute(&rc, &opts) {
                    return (stage.name(), Err(e));
                }
            }
            ("pipeline", Ok(()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run(["ambiprobe", "frobnicate"]), 1);
        assert_eq!(run(["ambiprobe"]), 1);
    }

    #[test]
    fn help_exits_cleanly() {
        assert_eq!(run(["ambiprobe", "--help"]), 0);
    }

    #[test]
    fn missing_config_is_exit_two() {
        assert_eq!(run(["ambiprobe", "train-lm", "--config", "/nonexistent/x.toml"]), 2);
    }

    #[test]
    fn only_splits_on_commas() {
        let cli = Cli::try_parse_from([
            "ambiprobe", "train-probes", "--config", "c.toml", "--only", "current-1-WORD,predictive", "--jobs", "4",
        ])
        .unwrap();
        match cli.command {
            Command::TrainProbes { only, jobs, .. } => {
                assert_eq!(only, vec!["current-1-WORD", "predictive"]);
                assert_eq!(jobs, 4);
            }
            _ => panic!(),
        }
    }
}
