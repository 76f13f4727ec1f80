//! Command-line front end for training, evaluating and ranking with S2M models.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::{Precision, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Verification(_) => 3,
        }
    }

    pub(crate) fn from_config(e: s2m::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<s2m::Error> for CliError {
    fn from(e: s2m::Error) -> Self {
        if e.is_data_error() || matches!(e, s2m::Error::Divergence { .. }) {
            CliError::Data(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "s2m", version, about = "Sequential sentence matching for multi-turn response selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the training vocabulary, one token per line in id order.
    BuildVocab(Options),
    /// Train a model and keep the best checkpoint.
    Train(Options),
    /// Score grouped test sessions and report ranking metrics.
    Evaluate {
        #[command(flatten)]
        options: Options,
        /// Also write every candidate's scores here.
        #[arg(long, value_name = "PATH")]
        scores: Option<PathBuf>,
        /// Also write the metrics as `metric.bucket = value` lines here.
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
    },
    /// Rank candidate responses for one context.
    Rank {
        #[command(flatten)]
        options: Options,
        /// Utterances separated by `|||`.
        #[arg(long)]
        context: String,
        /// One candidate response per line.
        #[arg(long, value_name = "PATH")]
        candidates: PathBuf,
    },
    /// Compare analytic gradients against finite differences.
    GradCheck {
        #[command(flatten)]
        options: Options,
        /// Scale the analytic gradient to confirm the check can fail.
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct Options {
    /// `key = value` config file; flags override it.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub train: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub valid: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub test: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub embeddings: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub stacks: Option<usize>,
    /// pure, i1, i2 or i3.
    #[arg(long)]
    pub integration: Option<String>,
    /// max, mean or gru.
    #[arg(long)]
    pub pooling: Option<String>,
    /// cnn, gru or attention.
    #[arg(long)]
    pub self_rep: Option<String>,
    /// Disable cross-representation.
    #[arg(long)]
    pub no_cross: bool,
    /// Disable self-representation.
    #[arg(long)]
    pub no_self: bool,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
    /// 32 or 64.
    #[arg(long)]
    pub precision: Option<String>,
    /// Embedding and hidden width.
    #[arg(long, value_name = "N")]
    pub dim: Option<usize>,
    #[arg(long, value_name = "N")]
    pub max_turns: Option<usize>,
    #[arg(long, value_name = "N")]
    pub max_len: Option<usize>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    pub max_steps: Option<u64>,
    /// Stop once validation R@1 reaches this value.
    #[arg(long, value_name = "RECALL")]
    pub stop_at: Option<f64>,
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "RATE")]
    pub learning_rate: Option<f64>,
    /// Candidates per test context.
    #[arg(long, value_name = "N")]
    pub group_size: Option<usize>,
    /// Candidates per validation context.
    #[arg(long, value_name = "N")]
    pub valid_group: Option<usize>,
    /// Test lines start with a session-id column.
    #[arg(long)]
    pub session_column: bool,
    #[arg(long, value_name = "N")]
    pub min_count: Option<usize>,
    /// Fine-tune word embeddings instead of keeping them fixed.
    #[arg(long)]
    pub train_embeddings: bool,
}

impl Options {
    /// Flags given on the command line as config key/value pairs.
    pub fn flag_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_owned(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        put("train", path(&self.train));
        put("valid", path(&self.valid));
        put("test", path(&self.test));
        put("embeddings", path(&self.embeddings));
        put("vocab", path(&self.vocab));
        put("checkpoint", path(&self.checkpoint));
        put("stacks", self.stacks.map(|x| x.to_string()));
        put("integration", self.integration.clone());
        put("pooling", self.pooling.clone());
        put("self_rep", self.self_rep.clone());
        put("cross_rep", self.no_cross.then(|| "false".into()));
        put("self_rep_enabled", self.no_self.then(|| "false".into()));
        put("seed", self.seed.map(|x| x.to_string()));
        put("workers", self.workers.map(|x| x.to_string()));
        put("precision", self.precision.clone());
        put("dim", self.dim.map(|x| x.to_string()));
        put("max_turns", self.max_turns.map(|x| x.to_string()));
        put("max_len", self.max_len.map(|x| x.to_string()));
        put("epochs", self.epochs.map(|x| x.to_string()));
        put("max_steps", self.max_steps.map(|x| x.to_string()));
        put("stop_at", self.stop_at.map(|x| x.to_string()));
        put("batch_size", self.batch_size.map(|x| x.to_string()));
        put("learning_rate", self.learning_rate.map(|x| x.to_string()));
        put("group_size", self.group_size.map(|x| x.to_string()));
        put("valid_group", self.valid_group.map(|x| x.to_string()));
        put("session_column", self.session_column.then(|| "true".into()));
        put("min_count", self.min_count.map(|x| x.to_string()));
        put("freeze_embeddings", self.train_embeddings.then(|| "false".into()));
        out
    }

    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let file = match &self.config {
            Some(p) => Some(
                std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
            ),
            None => None,
        };
        RunConfig::resolve(file.as_deref(), &self.flag_pairs())
    }
}

/// Runs one command, writing its report to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::BuildVocab(o) => commands::build_vocab(&o.resolve()?, out),
        Command::Train(o) => commands::train(&o.resolve()?, out),
        Command::Evaluate { options, scores, report } => commands::evaluate(
            &options.resolve()?,
            &commands::Exports {
                scores: scores.as_deref(),
                report: report.as_deref(),
            },
            out,
        ),
        Command::Rank {
            options,
            context,
            candidates,
        } => commands::rank(&options.resolve()?, context, candidates, out),
        Command::GradCheck { options, inject_fault } => commands::grad_check(&options.resolve()?, *inject_fault, out),
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return 1;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
