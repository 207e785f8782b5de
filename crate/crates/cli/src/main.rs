//! `gates`: GATES estimation, cross-fitting, tests, and simulation from the command line.
//!
//! Reports go to stdout (or `--out`) as JSON with sorted keys; a short human
//! summary goes to stderr. Exit codes: 0 success, 2 bad input, 3 runtime failure.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use report::CliError;

#[derive(Debug, Parser)]
#[command(name = "gates", version, about = "Sorted group average treatment effects for randomized experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate GATES for a fixed score column, with intervals and both tests.
    Gates(GatesArgs),
    /// Cross-fit a scoring rule over folds and estimate GATES.
    Crossfit(CrossfitArgs),
    /// Run the Monte Carlo harness on the synthetic outcome model.
    Simulate(SimulateArgs),
    /// Evaluate the cutoff-estimation bias bound for one group.
    BiasBound(BiasBoundArgs),
    /// Rank-consistency test for a given estimate vector and covariance.
    RankTest(RankTestArgs),
    /// Heterogeneity test for a given estimate vector and covariance.
    HetTest(HetTestArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "y")]
    y_col: String,
    #[arg(long, default_value = "t")]
    t_col: String,
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for Monte Carlo and fold work.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct GatesArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "score")]
    score_col: String,
    /// Number of groups.
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Drop the highest-indexed units of each arm until K divides both arm sizes.
    #[arg(long)]
    trim: bool,
    /// Monte Carlo draws for the rank test.
    #[arg(long, default_value_t = gates_core::DEFAULT_RANK_TEST_DRAWS)]
    n_mc: usize,
    #[arg(long, default_value_t = gates_core::DEFAULT_PD_FLOOR)]
    pd_floor: f64,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct CrossfitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Covariate columns, comma separated; default is every other column.
    #[arg(long, value_delimiter = ',')]
    x_cols: Option<Vec<String>>,
    /// Score column, used by `--trainer precomputed`.
    #[arg(long)]
    score_col: Option<String>,
    /// Built-in trainer: `linear`, `precomputed`, or `covariate:<name>`.
    #[arg(long, default_value = "linear", conflicts_with = "trainer_cmd")]
    trainer: String,
    /// External trainer command; receives `--train --eval --out --seed`.
    #[arg(long)]
    trainer_cmd: Option<String>,
    #[arg(long, default_value_t = 600)]
    trainer_timeout: u64,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    folds: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = gates_core::DEFAULT_RANK_TEST_DRAWS)]
    n_mc: usize,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Heterogeneous,
    Homogeneous,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    trials: usize,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    k: usize,
    /// Cross-fit with this many folds instead of using a fixed score.
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, value_enum, default_value = "heterogeneous")]
    mode: Mode,
    /// Fixed score: a covariate name or `cate` for the true effect.
    #[arg(long, default_value = "x29")]
    score: String,
    /// Trainer when cross-fitting: `linear` or `covariate:<name>`.
    #[arg(long, default_value = "linear")]
    trainer: String,
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 10_000)]
    rank_draws: usize,
    /// Population draws for the oracle GATES.
    #[arg(long, default_value_t = 1_000_000)]
    truth_draws: usize,
    /// Retraining replications for the cross-fit oracle.
    #[arg(long, default_value_t = 1_000)]
    truth_reps: usize,
    #[arg(long)]
    seed: u64,
    /// Also write the per-group table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct BiasBoundArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    k: usize,
    /// Group index, 1..=K.
    #[arg(long)]
    group: usize,
    #[arg(long)]
    epsilon: f64,
    /// Bound on |CATE| near the upper cutoff of the group.
    #[arg(long)]
    m_k: f64,
    /// Bound on |CATE| near the lower cutoff of the group.
    #[arg(long)]
    m_km1: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VectorArgs {
    /// Group estimates, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    tau: Vec<f64>,
    /// Overall effect subtracted from every estimate.
    #[arg(long, allow_hyphen_values = true)]
    ate: f64,
    /// Covariance rows separated by `;`, entries by `,`.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "sigma_file")]
    sigma: Option<String>,
    /// Covariance as a headerless CSV.
    #[arg(long)]
    sigma_file: Option<PathBuf>,
    /// The covariance describes a centered vector (entries sum to zero).
    #[arg(long)]
    centered: bool,
    #[arg(long, default_value_t = gates_core::DEFAULT_PD_FLOOR)]
    pd_floor: f64,
}

#[derive(Debug, Args)]
struct RankTestArgs {
    #[command(flatten)]
    input: VectorArgs,
    #[arg(long, default_value_t = gates_core::DEFAULT_RANK_TEST_DRAWS)]
    n_mc: usize,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct HetTestArgs {
    #[command(flatten)]
    input: VectorArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gates(a) => commands::gates(a),
        Command::Crossfit(a) => commands::crossfit(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::BiasBound(a) => commands::bias_bound(a),
        Command::RankTest(a) => commands::rank_test(a),
        Command::HetTest(a) => commands::het_test(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return report::fail(&CliError::usage(e.to_string().trim_start_matches("error: ").trim_end()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report::fail(&e),
    }
}
