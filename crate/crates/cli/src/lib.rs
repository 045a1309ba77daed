//! `attnsim` command line: dump validation, single-sample and corpus
//! analysis, separator segmentation, synthetic fixtures.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::PathBuf;

use attnsim_core::{Error, ExclusionPolicy, RunConfig};
use clap::{Args, Parser, Subcommand};

mod commands;
pub mod report;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "attnsim", version, about = "Analyze attention-head similarity in ATNDUMP1 activation dumps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check dump files (or every file in a directory) against the format invariants.
    Validate {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Per-head and per-layer reports for one dump.
    Analyze {
        input: PathBuf,
        #[command(flatten)]
        opts: AnalysisArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus statistics over every dump in a directory.
    Aggregate {
        dir: PathBuf,
        #[command(flatten)]
        opts: AnalysisArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Separator boundaries from one layer's summed attention.
    Segment {
        input: PathBuf,
        #[arg(long)]
        layer: usize,
        #[command(flatten)]
        opts: AnalysisArgs,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write seeded synthetic dumps.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long, default_value_t = 8)]
        head_dim: usize,
        #[arg(long, default_value_t = 0)]
        padding: usize,
        #[arg(long, default_value_t = 12)]
        sentence_len: usize,
    },
}

#[derive(Debug, Args)]
pub struct AnalysisArgs {
    /// Similarity threshold on the max-normalized matrix.
    #[arg(long, default_value_t = 0.3)]
    pub threshold: f64,
    /// Column-strength threshold for separator detection.
    #[arg(long, default_value_t = 0.5)]
    pub col_threshold: f64,
    /// Columns zeroed in the clipped attention sums.
    #[arg(long, default_value_t = 3)]
    pub top_k_columns: usize,
    /// Sentence separator tokens.
    #[arg(long, num_args = 1.., default_values = [".", ";"])]
    pub separators: Vec<String>,
    /// Tokens whose pairs are dropped.
    #[arg(long, num_args = 1.., default_values = ["[PAD]"], conflicts_with = "no_exclude")]
    pub exclude: Vec<String>,
    /// Keep pairs touching any token.
    #[arg(long)]
    pub no_exclude: bool,
    /// Comma-separated layer indices (default: all).
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Comma-separated head indices (default: all).
    #[arg(long, value_delimiter = ',')]
    pub heads: Option<Vec<usize>>,
    #[arg(long, env = "ATTNSIM_WORKERS", default_value_t = 1)]
    pub workers: usize,
}

impl AnalysisArgs {
    pub fn to_config(&self) -> RunConfig {
        RunConfig {
            sim_threshold: self.threshold,
            col_threshold: self.col_threshold,
            top_k_columns: self.top_k_columns,
            separators: self.separators.iter().cloned().collect::<BTreeSet<_>>(),
            exclusion: if self.no_exclude {
                ExclusionPolicy::none()
            } else {
                ExclusionPolicy::from_tokens(self.exclude.iter().cloned())
            },
            layers: self.layers.clone(),
            heads: self.heads.clone(),
            workers: self.workers,
        }
    }
}

/// Maps a library error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    use attnsim_core::DumpError;
    match err {
        Error::InvalidThreshold { .. } | Error::InvalidArgument(_) | Error::DimensionMismatch(_) => EXIT_CONFIG,
        Error::Io(_) | Error::Dump { source: DumpError::Io(_), .. } => EXIT_IO,
        _ => EXIT_INVALID,
    }
}

/// Parses `args` and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
