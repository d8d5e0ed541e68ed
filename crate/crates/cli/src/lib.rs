//! `wcr` command-line driver: configuration, flag overrides, and the
//! subcommands binding the core modules into reproducible runs.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use wcr_core::Strategy;

pub use commands::Outputs;
pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "wcr",
    version,
    about = "Active-learning selection with weighted classification-regression uncertainty"
)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Category weight table of the labeled set.
    Stats,
    /// Rank unlabeled images by uncertainty.
    Score,
    /// Initialize a state, or run one selection iteration on it.
    Select,
    /// Run the closed loop with the simulated detector.
    Loop,
    /// Mark the most uncertain labeled images with weight 2.
    DoubleWeights,
    /// Tile images into overlapping windows and clip annotations.
    Tiles,
    /// Evaluate detections against ground truth.
    Eval,
    /// Generate a synthetic imbalanced dataset.
    Synth,
    /// Compare two selection histories.
    Diff {
        history_a: PathBuf,
        history_b: PathBuf,
        /// Also write a merged selection.
        #[arg(long)]
        merge: bool,
        /// Cap on the merged selection size.
        #[arg(long)]
        merge_budget: Option<usize>,
    },
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub strategy: Option<Strategy>,
    #[arg(long, global = true)]
    pub ground_truth: Option<PathBuf>,
    #[arg(long, global = true)]
    pub validation: Option<PathBuf>,
    #[arg(long, global = true)]
    pub detections: Option<PathBuf>,
    /// File with one category name per line.
    #[arg(long, global = true)]
    pub categories: Option<PathBuf>,
    #[arg(long, global = true)]
    pub labeled: Option<PathBuf>,
    #[arg(long, global = true)]
    pub state: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed_init: Option<u64>,
    #[arg(long, global = true)]
    pub seed_gmm: Option<u64>,
    #[arg(long, global = true)]
    pub seed_random: Option<u64>,
    #[arg(long, global = true)]
    pub seed_simdet: Option<u64>,
    #[arg(long, global = true)]
    pub seed_eval: Option<u64>,
    #[arg(long, global = true)]
    pub seed_dataset: Option<u64>,
    #[arg(long, global = true)]
    pub min_score: Option<f64>,
    /// Inclusive component range, `MIN..MAX`.
    #[arg(long, global = true, value_parser = parse_k_range)]
    pub k_range: Option<(usize, usize)>,
    #[arg(long, global = true)]
    pub window: Option<u32>,
    #[arg(long, global = true)]
    pub stride: Option<u32>,
    #[arg(long, global = true)]
    pub init_fraction: Option<f64>,
    #[arg(long, global = true)]
    pub batch_fraction: Option<f64>,
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    #[arg(long, global = true)]
    pub double_weight_fraction: Option<f64>,
}

pub fn parse_k_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once("..")
        .or_else(|| s.split_once('-'))
        .ok_or_else(|| format!("expected MIN..MAX, got `{s}`"))?;
    let a = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((a, b))
}

impl Overrides {
    /// The config file (or defaults) with every given flag applied.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { c.$($field).+ = v.clone().into(); })*
            };
        }
        set!(
            strategy => strategy,
            out_dir => out_dir,
            seed_init => seeds.init,
            seed_gmm => seeds.gmm,
            seed_random => seeds.random,
            seed_simdet => seeds.simdet,
            seed_eval => seeds.eval,
            seed_dataset => seeds.dataset,
            min_score => min_score,
            window => window,
            stride => stride,
            init_fraction => init_fraction,
            batch_fraction => batch_fraction,
            iterations => iterations,
            double_weight_fraction => double_weight_fraction,
        );
        set!(
            ground_truth => ground_truth,
            validation => validation,
            detections => detections,
            categories => categories_file,
            labeled => labeled,
            state => state,
        );
        if self.categories.is_some() {
            c.categories.clear();
        }
        if let Some((lo, hi)) = self.k_range {
            c.k_min = lo;
            c.k_max = hi;
        }
        Ok(c)
    }
}

pub fn run_command(cfg: &RunConfig, command: &Command) -> Result<Outputs, CliError> {
    match command {
        Command::Stats => commands::cmd_stats(cfg),
        Command::Score => commands::cmd_score(cfg),
        Command::Select => commands::cmd_select(cfg),
        Command::Loop => commands::cmd_loop(cfg),
        Command::DoubleWeights => commands::cmd_double_weights(cfg),
        Command::Tiles => commands::cmd_tiles(cfg),
        Command::Eval => commands::cmd_eval(cfg),
        Command::Synth => commands::cmd_synth(cfg),
        Command::Diff {
            history_a,
            history_b,
            merge,
            merge_budget,
        } => commands::cmd_diff(cfg, history_a, history_b, *merge_budget, *merge),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                error::EXIT_USAGE
            } else {
                error::EXIT_OK
            };
            let _ = e.print();
            return code;
        }
    };
    let result = cli
        .overrides
        .resolve()
        .and_then(|cfg| run_command(&cfg, &cli.command));
    match result {
        Ok(outputs) => {
            for f in &outputs.files {
                println!("{}", f.display());
            }
            error::EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
