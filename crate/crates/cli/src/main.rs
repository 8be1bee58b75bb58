//! `specmix` command-line tool.
//!
//! Exit codes: 0 success, 2 usage or format problems, 3 numeric failures.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "specmix", version, about = "Hyperspectral unmixing: scene generation, training, evaluation")]
struct Cli {
    /// Worker threads for scene-wide encoding and FCLS. 1 keeps every
    /// output bit-reproducible.
    #[arg(long, global = true, env = "SPECMIX_THREADS", default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene from a JSON spec.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a scene.
    Train {
        #[arg(long)]
        scene: PathBuf,
        /// Training config (JSON); defaults apply for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss-trace CSV [default: <out>.loss.csv]
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score a checkpoint against a scene's ground truth.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        subset: SubsetArgs,
    },
    /// Write per-endmember abundance maps for a whole scene.
    Unmix {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Writes <prefix>_em<k>.pgm and <prefix>_abundances.f64.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Write the decoder's endmember spectra as CSV.
    Endmembers {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a classical baseline and score it like `eval`.
    Baseline {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::VcaFcls)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        /// Seed for VCA's random projections.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        subset: SubsetArgs,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    VcaFcls,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
enum Subset {
    All,
    Test,
}

/// Which pixels are scored. `test` recomputes the training split.
#[derive(Args, Debug, Clone, Copy)]
struct SubsetArgs {
    #[arg(long, value_enum, default_value_t = Subset::All)]
    subset: Subset,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use specmix::Error as E;
    match err.downcast_ref::<specmix::Error>() {
        Some(E::NonFinite { .. } | E::Degenerate(_) | E::IncompleteGamma { .. } | E::Domain(_) | E::Contract(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be >= 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: could not start thread pool: {e}");
        return ExitCode::from(2);
    }
    match commands::run(cli.command, cli.threads) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
