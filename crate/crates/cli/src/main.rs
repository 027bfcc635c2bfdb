use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xlu_core::config::{Preset, RunConfig};
use xlu_core::pipeline::{self, TrainOptions, DATA_DIR};
use xlu_core::Error;

/// Wideband XL-MIMO channel estimation with constrained unrolled networks.
#[derive(Parser)]
#[command(name = "xlu", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset for keys the config file leaves out.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Root seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test datasets.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the unrolled network on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (defaults to <out>/data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Keep all dual variables at zero.
        #[arg(long)]
        unconstrained: bool,
        /// Continue from a checkpoint; epoch numbering carries on.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score estimators on the test split and write diagnostics.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trained network checkpoint(s).
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Comma-separated estimator names.
        #[arg(long, value_delimiter = ',', default_value = "lmmse,omp,pgd_net")]
        estimators: Vec<String>,
    },
    /// Run the configured parameter sweep on fresh realizations.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One checkpoint per pilot overhead.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<String>>,
    },
    /// Print the header of a dataset or checkpoint file.
    Inspect { file: PathBuf },
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn resolve(common: &Common) -> xlu_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path, common.preset)?,
        None => RunConfig::preset(common.preset.unwrap_or(Preset::Desk)),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_dir(cfg: &RunConfig, data: &Option<PathBuf>) -> PathBuf {
    data.clone().unwrap_or_else(|| Path::new(&cfg.out).join(DATA_DIR))
}

fn inspect(file: &Path) -> xlu_core::Result<String> {
    let mut magic = [0u8; 4];
    std::io::Read::read_exact(&mut std::fs::File::open(file)?, &mut magic)?;
    let json = match &magic {
        b"XLMU" => {
            let h = xlu_core::data::read_header(file)?;
            serde_json::json!({
                "kind": "dataset",
                "geometry": h.geometry,
                "pilots": h.pilots,
                "rf_chains": h.rf_chains,
                "measurements": h.measurements(),
                "snr_db": h.snr_db,
                "split": h.split,
                "samples": h.samples,
                "root_seed": h.root_seed,
                "config_hash": hex::encode(h.config_hash),
            })
        }
        b"XLUC" => {
            let (_, h) = xlu_core::unrolled::UnrolledModel::<f32>::load(file)?;
            serde_json::json!({ "kind": "checkpoint", "header": h })
        }
        _ => return Err(Error::Validation(format!("{} is neither a dataset nor a checkpoint", file.display()))),
    };
    Ok(serde_json::to_string_pretty(&json).expect("json value serializes"))
}

fn run(cli: Cli) -> xlu_core::Result<()> {
    pipeline::init_workers()?;
    match cli.command {
        Command::Generate { common } => {
            let cfg = resolve(&common)?;
            for p in pipeline::run_generate(&cfg, Path::new(&cfg.out))? {
                println!("{}", p.display());
            }
        }
        Command::Train {
            common,
            data,
            unconstrained,
            resume,
        } => {
            let cfg = resolve(&common)?;
            let opts = TrainOptions { unconstrained, resume };
            let outcome = pipeline::run_train(&cfg, &data_dir(&cfg, &data), Path::new(&cfg.out), &opts)?;
            if let Some(db) = outcome.report.best_val_nmse_db {
                println!("best validation NMSE {db:.2} dB at epoch {}", outcome.report.best_epoch.unwrap_or(0));
            }
            println!("{}", outcome.checkpoint.display());
        }
        Command::Evaluate {
            common,
            data,
            checkpoint,
            estimators,
        } => {
            let cfg = resolve(&common)?;
            let res = pipeline::run_evaluate(&cfg, &data_dir(&cfg, &data), &checkpoint, &estimators, Path::new(&cfg.out))?;
            for s in res.scores {
                println!("{:<10} {:>8.2} dB  ({} failures)", s.estimator, s.nmse_db, s.failures);
            }
        }
        Command::Sweep {
            common,
            checkpoint,
            estimators,
        } => {
            let cfg = resolve(&common)?;
            let names = estimators.unwrap_or_else(|| cfg.sweep.estimators.clone());
            let res = pipeline::run_sweep_files(&cfg, &checkpoint, &names, Path::new(&cfg.out))?;
            for p in res.points {
                println!("{:<10} {}={:<8} {:>8.2} dB", p.estimator, res.axis.name(), p.value, p.mean_db);
            }
        }
        Command::Inspect { file } => println!("{}", inspect(&file)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
