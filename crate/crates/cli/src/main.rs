//! `divatt`: train, tri-train, evaluate, and inspect diversity-constrained
//! attention classifiers for cross-domain binary text classification.
//!
//! Exit codes: 0 success, 1 runtime failure (including failed gradient
//! checks), 2 usage or configuration errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use divatt::error::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "divatt", version, about = "Diversity-constrained attention classifiers under domain shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one attention classifier per seed (variants mha, mhad)
    Train(Overrides),
    /// Train a three-model ensemble per seed (variants tri1, tri2)
    Tritrain(Overrides),
    /// Evaluate checkpoints on a labeled test set; emits CSV
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        /// Checkpoint file or ensemble directory; repeatable. Defaults to
        /// the paths train/tritrain write for the configured seeds.
        #[arg(long = "checkpoint", value_name = "PATH")]
        checkpoints: Vec<PathBuf>,
    },
    /// Report each attention head's top tokens on a text file
    Attend {
        #[command(flatten)]
        overrides: Overrides,
        /// Trained single-model checkpoint
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Text file to analyze; defaults to the configured test path
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        /// Tokens listed per head
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Verify every gradient against central finite differences
    Gradcheck {
        /// Seed for the random probe points
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Every config-file key as an optional flag; set flags override the file.
#[derive(Args)]
struct Overrides {
    /// Flat `key = value` config file
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// mha | mhad | tri1 | tri2
    #[arg(long)]
    variant: Option<String>,
    /// Source-domain label echoed into reports
    #[arg(long)]
    source: Option<String>,
    /// Target-domain label echoed into reports
    #[arg(long)]
    target: Option<String>,
    /// Labeled data, one `label<TAB>text` per line
    #[arg(long, value_name = "FILE")]
    train: Option<PathBuf>,
    /// Unlabeled source data, one text per line
    #[arg(long, value_name = "FILE")]
    unlabeled: Option<PathBuf>,
    /// Labeled held-out data, same format as --train
    #[arg(long, value_name = "FILE")]
    test: Option<PathBuf>,
    /// Word vectors: `count dim` header, then `token v1..vdim` lines
    #[arg(long, value_name = "FILE")]
    embeddings: Option<PathBuf>,
    /// Where checkpoints are written and looked up (default: output dir)
    #[arg(long, value_name = "DIR")]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Comma-separated seeds, one independent run each
    #[arg(long, value_delimiter = ',', value_name = "N,...")]
    seeds: Option<Vec<u64>>,
    /// Single seed; shorthand for --seeds with one entry
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// additive | dot_product
    #[arg(long)]
    scoring: Option<String>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    train_embeddings: Option<bool>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    agreement_stop: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
}

impl Overrides {
    fn resolve(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.variant {
            cfg.variant = v.parse()?;
        }
        if let Some(v) = self.source {
            cfg.source = v;
        }
        if let Some(v) = self.target {
            cfg.target = v;
        }
        if let Some(v) = self.train {
            cfg.train = Some(v);
        }
        if let Some(v) = self.unlabeled {
            cfg.unlabeled = Some(v);
        }
        if let Some(v) = self.test {
            cfg.test = Some(v);
        }
        if let Some(v) = self.embeddings {
            cfg.embeddings = Some(v);
        }
        if let Some(v) = self.checkpoint_dir {
            cfg.checkpoint_dir = Some(v);
        }
        if let Some(v) = self.output_dir {
            cfg.output_dir = v;
        }
        if let Some(v) = self.seeds {
            cfg.seeds = v;
        }
        if let Some(v) = &self.scoring {
            cfg.hp.scoring = v.parse()?;
        }
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.hp.$field = v; })*
            };
        }
        apply!(
            hidden, heads, max_len, dropout, train_embeddings, gamma, alpha, beta, tau,
            learning_rate, lr_decay, batch_size, max_epochs, patience, val_fraction,
            agreement_stop, max_iterations
        );
        if let Some(s) = self.seed {
            cfg.hp.seed = s;
            cfg.seeds = vec![s];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(overrides) => {
            commands::cmd_train(&overrides.resolve()?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Tritrain(overrides) => {
            commands::cmd_tritrain(&overrides.resolve()?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { overrides, checkpoints } => {
            commands::cmd_eval(&overrides.resolve()?, &checkpoints)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Attend { overrides, checkpoint, input, top_k } => {
            commands::cmd_attend(&overrides.resolve()?, &checkpoint, input.as_deref(), top_k)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed } => {
            let all_passed = commands::cmd_gradcheck(seed)?;
            Ok(if all_passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parse { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
