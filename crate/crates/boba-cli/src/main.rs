//! `boba`: run simulations, aggregate gradient files, verify invariants and
//! time the aggregators.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Exit codes shared by every command.
pub mod exit {
    pub const OK: u8 = 0;
    /// A check failed or an output could not be written.
    pub const FAILURE: u8 = 1;
    /// Bad flags, configuration or input files.
    pub const USAGE: u8 = 2;
    /// The run diverged or produced non-finite values.
    pub const NUMERIC: u8 = 3;
}

#[derive(Debug, Parser)]
#[command(name = "boba", version, about = "Byzantine-robust aggregation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one federated experiment from a TOML config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Master seed, overriding the config.
        #[arg(long, env = "BOBA_SIM_SEED")]
        seed: Option<u64>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Aggregate the gradients stored in a gradient file.
    Aggregate {
        #[arg(long)]
        file: PathBuf,
        /// Rule name, e.g. boba, average, krum, b-mkrum.
        #[arg(long, required_unless_present = "text")]
        agr: Option<String>,
        /// Declared Byzantine tolerance.
        #[arg(long, required_unless_present = "text")]
        f: Option<usize>,
        /// Rejection threshold of the subspace rules.
        #[arg(long, allow_hyphen_values = true)]
        pmin: Option<f64>,
        /// Print the file's columns as CSV instead of aggregating.
        #[arg(long)]
        text: bool,
    },
    /// Run the lemma, fixture and bound checks.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides every tolerance (used to exercise the failure path).
        #[arg(long, hide = true, allow_hyphen_values = true)]
        tolerance: Option<f64>,
    },
    /// Time the aggregators over a grid of client counts and dimensions.
    Bench {
        /// Comma-separated client counts.
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<usize>,
        /// Comma-separated dimensions.
        #[arg(long, value_delimiter = ',', required = true)]
        d: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Principal-component variance shares of the first round's honest
    /// gradients.
    Pca {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "BOBA_SIM_SEED")]
        seed: Option<u64>,
    },
    /// Write a hand-built gradient file.
    MakeFixture {
        #[arg(value_enum)]
        kind: FixtureKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 9)]
        honest: usize,
        #[arg(long, default_value_t = 3)]
        byzantine: usize,
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the default configuration.
    DefaultConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteArg {
    Lemmas,
    Fixtures,
    Bounds,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FixtureKind {
    /// Indistinguishable honest/Byzantine pair (1-D, two classes).
    LowerBound,
    /// Three planar clients where Krum picks a perturbed one.
    ThreeClient,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Simulate { config, out, seed, threads } => commands::simulate(&config, &out, seed, threads),
        Command::Aggregate { file, agr, f, pmin, text } => commands::aggregate(&file, agr.as_deref(), f, pmin, text),
        Command::Verify { suite, seed, tolerance } => {
            let suite = match suite {
                SuiteArg::Lemmas => boba_core::verify::Suite::Lemmas,
                SuiteArg::Fixtures => boba_core::verify::Suite::Fixtures,
                SuiteArg::Bounds => boba_core::verify::Suite::Bounds,
                SuiteArg::All => boba_core::verify::Suite::All,
            };
            commands::verify(suite, seed, tolerance)
        }
        Command::Bench { n, d, repeats, seed } => commands::bench(&n, &d, repeats, seed),
        Command::Pca { config, seed } => commands::pca(&config, seed),
        Command::MakeFixture { kind, out, honest, byzantine, delta, eps, seed } => match kind {
            FixtureKind::LowerBound => commands::make_lower_bound(&out, honest, byzantine, delta),
            FixtureKind::ThreeClient => commands::make_three_client(&out, delta, eps, seed),
        },
        Command::DefaultConfig => {
            print!("{}", boba_core::config::SimConfig::default().to_toml_string());
            exit::OK
        }
    };
    ExitCode::from(code)
}
