use clap::{Args, Parser, Subcommand};
use pxlab::experiment::{dump_layer_widths, dump_spectrum, run_rounds_ablation, run_sweep, ExperimentConfig};
use pxlab::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Pruning-at-initialization experiments: sparsity sweeps, NTK spectra,
/// layer widths and round-count ablations written as CSV.
#[derive(Parser)]
#[command(name = "pxlab", version, after_help = "Set PXLAB_WORKERS to run cells in parallel worker slots.")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Prune, train and evaluate every (method, sparsity, seed); writes sweep.csv.
    Sweep(Io),
    /// NTK eigenvalues of the dense and pruned nets; writes spectrum.csv.
    Spectrum(Io),
    /// Active output units per layer; writes widths.csv.
    Widths(Io),
    /// Accuracy across the rounds grid; writes rounds.csv.
    Rounds(Io),
}

#[derive(Args)]
struct Io {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Fatal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Config(msg),
            other => Failure::Fatal(other.to_string()),
        }
    }
}

fn write(dir: &Path, name: &str, csv: &str) -> Result<PathBuf, Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Fatal(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, csv).map_err(|e| Failure::Fatal(format!("{}: {e}", path.display())))?;
    Ok(path)
}

/// Returns the number of failed cells.
fn run(verb: Verb) -> Result<usize, Failure> {
    let (Verb::Sweep(io) | Verb::Spectrum(io) | Verb::Widths(io) | Verb::Rounds(io)) = &verb;
    let cfg = ExperimentConfig::load(&io.config)?;
    let out = io
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Failure::Config("no output directory: pass --out or set `output_dir`".into()))?;
    let (name, csv, failures) = match verb {
        Verb::Sweep(_) => {
            let t = run_sweep(&cfg, Some(&out))?;
            ("sweep.csv", t.csv, t.failures)
        }
        Verb::Rounds(_) => {
            let t = run_rounds_ablation(&cfg, Some(&out))?;
            ("rounds.csv", t.csv, t.failures)
        }
        Verb::Spectrum(_) => {
            let (csv, f) = dump_spectrum(&cfg)?;
            ("spectrum.csv", csv, f)
        }
        Verb::Widths(_) => {
            let (csv, f) = dump_layer_widths(&cfg)?;
            ("widths.csv", csv, f)
        }
    };
    let path = write(&out, name, &csv)?;
    eprintln!("wrote {}", path.display());
    Ok(failures)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.verb) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} cell(s) failed; see the status column");
            ExitCode::from(2)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Fatal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
