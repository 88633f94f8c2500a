//! `mfg-horizon <mode> --config path.json [--seed n] [--out dir] [--workers w]`

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::{error, info, warn};
use mfg_core::experiment::{run, write_error_manifest, ExperimentConfig, Mode, RunStatus};
use mfg_core::MfgError;

#[derive(Debug, Parser)]
#[command(name = "mfg-horizon", version, about = "Discounted infinite-horizon mean field game experiments")]
struct Cli {
    /// One of: solve, finite-solve, sweep, stationary, invariant, check, oracle.
    mode: String,
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed and MFG_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory; defaults to the config `out`, then `out/<mode>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Caps the worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

fn env_seed() -> Result<Option<u64>, MfgError> {
    match std::env::var("MFG_SEED") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| MfgError::Config {
            path: "MFG_SEED".into(),
            message: format!("not an unsigned integer: `{v}`"),
        }),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let fallback_out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out").join(&cli.mode));
    let fail = |e: MfgError| {
        error!("{e}");
        write_error_manifest(&cli.mode, &fallback_out, &e);
        ExitCode::from(1)
    };

    let mode: Mode = match cli.mode.parse() {
        Ok(m) => m,
        Err(e) => return fail(e),
    };
    if let Some(w) = cli.workers {
        if w == 0 {
            return fail(MfgError::Config {
                path: "--workers".into(),
                message: "must be positive".into(),
            });
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            warn!("cannot size the worker pool: {e}");
        }
    }
    let mut config = match ExperimentConfig::from_file(&cli.config) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if let Some(m) = config.mode {
        if m != mode {
            warn!("config mode `{m}` ignored; running `{mode}`");
        }
    }
    match (cli.seed, env_seed()) {
        (Some(s), _) => config.seed = Some(s),
        (None, Ok(Some(s))) => config.seed = Some(s),
        (None, Ok(None)) => {}
        (None, Err(e)) => return fail(e),
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or(fallback_out.clone());
    let manifest = run(mode, &config, &out);
    match manifest.status {
        RunStatus::Ok => info!("done in {:.1}s; artifacts in {}", manifest.wall_time_s, out.display()),
        RunStatus::Flagged => {
            for f in &manifest.flags {
                warn!("flagged: {f}");
            }
        }
        RunStatus::Error => {}
    }
    ExitCode::from(manifest.exit_code as u8)
}
