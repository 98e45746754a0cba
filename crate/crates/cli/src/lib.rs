//! Command-line experiments for the graphprior detection head.

pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use graphprior::training::Mode;

pub use config::RunConfig;
pub use error::CliError;

use commands::Overrides;
use gradcheck::GradcheckOptions;

#[derive(Debug, Parser)]
#[command(
    name = "graphprior",
    version,
    about = "Graph-prior detection head experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// baseline | gp | gpr | oracle, overriding the config.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            config: self.config.clone(),
            seed: self.seed,
            mode: self.mode,
            out: self.out.clone(),
        }
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
        .map_err(|_| format!("expected one of baseline, gp, gpr, oracle; got {s:?}"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the co-occurrence prior from COCO-style annotations.
    BuildPrior {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "PATH")]
        annotations: Option<PathBuf>,
    },
    /// Compare every analytic gradient with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of random fixtures per block.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, hide = true, value_name = "BLOCK")]
        perturb: Option<String>,
    },
    /// Train on the synthetic benchmark and evaluate on its test split.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Train with ground-truth graphs and compare against the baseline.
    Oracle {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Trace energy and edges along one SGLD chain.
    Refine {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
}

pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::BuildPrior { common, annotations } => {
            commands::cmd_build_prior(&common.overrides(), annotations.as_deref())
        }
        Command::Gradcheck { seed, seeds, perturb } => commands::cmd_gradcheck(&GradcheckOptions {
            seed: *seed,
            seeds: *seeds,
            perturb: perturb.clone(),
        }),
        Command::Train { common } => commands::cmd_train(&common.overrides()),
        Command::Eval { common, checkpoint } => {
            commands::cmd_eval(&common.overrides(), checkpoint.as_deref())
        }
        Command::Oracle { common } => commands::cmd_oracle(&common.overrides()),
        Command::Refine {
            common,
            checkpoint,
            scene,
        } => commands::cmd_refine(&common.overrides(), checkpoint.as_deref(), *scene),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", CliError::new("usage", msg).line());
            return 2;
        }
    };
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.line());
            1
        }
    }
}
