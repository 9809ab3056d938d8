use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tracesac::data::{ingest_csv, synthesize_market, CsvSchema, SynthSpec};
use tracesac::harness::{cli_eval, cli_report, cli_train, cli_verify, RunConfig, VerifyOptions};
use tracesac::Error;

/// Trace-SAC laboratory: data preparation, training, evaluation and oracle
/// checks.
#[derive(Debug, Parser)]
#[command(name = "tracesac", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a market CSV and write it back in canonical form.
    Ingest {
        /// Input CSV with header `timestamp,bid,ask,f0..`.
        input: PathBuf,
        #[arg(long)]
        features: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic market from a JSON spec.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every (environment, trace kind, seed) run of a config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replaces the seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replay saved agents deterministically on their test days.
    Eval {
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate final validation returns into the results table.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle checks.
    Verify {
        #[arg(long, hide = true)]
        corrupt_lstm_backward: bool,
    },
}

const CONFIG_ERROR: u8 = 1;
const CHECK_FAILURE: u8 = 2;

fn read_synth_spec(path: &Path) -> Result<SynthSpec, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Ingest { input, features, out } => {
            let data = ingest_csv(&input, CsvSchema { n_features: features })?;
            println!("{}: {} bars, {} features", input.display(), data.len(), data.n_features());
            if let Some(out) = out {
                data.write_csv(&out)?;
            }
        }
        Command::Synth { config, out, seed } => {
            let mut spec = read_synth_spec(&config).map_err(|msg| Error::Config {
                field: "synth".into(),
                msg,
            })?;
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let data = synthesize_market(&spec)?;
            data.write_csv(&out)?;
            println!("wrote {} bars to {}", data.len(), out.display());
        }
        Command::Train { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            if let Some(seed) = seed {
                cfg.seeds = vec![seed];
            }
            let manifest = cli_train(&cfg)?;
            println!("{} runs written to {}", manifest.runs.len(), cfg.output_dir.display());
        }
        Command::Eval { out } => {
            for row in cli_eval(&out)? {
                println!(
                    "env{} {} seed {}: test return {:.4}%",
                    row.env_id, row.trace_kind, row.seed, row.test_return_pct
                );
            }
        }
        Command::Report { out } => {
            let (_, table) = cli_report(&out)?;
            print!("{table}");
        }
        Command::Verify { corrupt_lstm_backward } => {
            let (_, table, ok) = cli_verify(VerifyOptions { corrupt_lstm_backward });
            print!("{table}");
            if !ok {
                return Ok(ExitCode::from(CHECK_FAILURE));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(CONFIG_ERROR)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CONFIG_ERROR)
        }
    }
}
