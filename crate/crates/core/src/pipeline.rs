//! File-level workflow behind the command-line tool: dataset generation,
//! training runs, evaluation and sweeps, each writing its artifacts into an
//! output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::{ArrayGeometry, PathSet};
use crate::config::RunConfig;
use crate::data::{generate, read_dataset, write_dataset, DatasetHeader, PairSet, Split};
use crate::error::{Error, Result};
use crate::estimators::{empirical_covariance, PolarGrid};
use crate::eval::{
    beam_split, beam_split_paths, evaluate_pairs, layerwise_curve, run_sweep, CovarianceSource, EstimatorFactory,
    LayerCurve, LmmseFactory, OmpFactory, Oracle, PgdNetFactory, PointContext, SetScore, SweepResult,
};
use crate::measurement::{make_combiner, Combiner};
use crate::rng::stream;
use crate::training::{train, DualState, TrainReport, TrainSetup};
use crate::unrolled::{CheckpointInfo, UnrolledModel};

pub const DATA_DIR: &str = "data";
pub const CHECKPOINT: &str = "model.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// Caps the global worker pool at `XLU_NUM_WORKERS` when set.
pub fn init_workers() -> Result<()> {
    let Ok(v) = std::env::var("XLU_NUM_WORKERS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Validation(format!("XLU_NUM_WORKERS must be a positive integer, got `{v}`")))?;
    // a pool that already exists keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn dataset_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.xlmu", split.name()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn to_json<S: Serialize>(v: &S) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

fn write_resolved(cfg: &RunConfig, out: &Path) -> Result<()> {
    let text = format!("# config hash {}\n{}", cfg.hash(), cfg.to_toml()?);
    write_text(&out.join(RESOLVED_CONFIG), &text)
}

/// Writes the train, val and test splits under `out/data`.
pub fn run_generate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let dir = out.join(DATA_DIR);
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for split in Split::ALL {
        let header = cfg.dataset_header(split);
        let set = generate::<f32>(&header, &cfg.sampling)?;
        let path = dataset_path(&dir, split);
        write_dataset(&path, &header, &set)?;
        log::info!("wrote {} ({} realizations)", path.display(), header.samples);
        written.push(path);
    }
    write_resolved(cfg, out)?;
    Ok(written)
}

fn check_compatible(cfg: &RunConfig, header: &DatasetHeader, path: &Path) -> Result<()> {
    if header.geometry != cfg.geometry {
        return Err(Error::Validation(format!(
            "{}: dataset geometry {:?} does not match the configured geometry {:?}",
            path.display(),
            header.geometry,
            cfg.geometry
        )));
    }
    if header.measurements() != cfg.measurements() || header.root_seed != cfg.seed {
        return Err(Error::Validation(format!(
            "{}: dataset has P·N_RF = {} and seed {}, config expects {} and seed {}",
            path.display(),
            header.measurements(),
            header.root_seed,
            cfg.measurements(),
            cfg.seed
        )));
    }
    Ok(())
}

pub fn load_split(cfg: &RunConfig, data: &Path, split: Split) -> Result<(DatasetHeader, PairSet<f32>)> {
    let path = dataset_path(data, split);
    if !path.exists() {
        return Err(Error::Validation(format!("missing dataset {}; run `generate` first", path.display())));
    }
    let (header, set) = read_dataset::<f32>(&path)?;
    check_compatible(cfg, &header, &path)?;
    Ok((header, set))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Freeze λ at zero.
    pub unconstrained: bool,
    /// Continue from this checkpoint (its dual state is read alongside).
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: PathBuf,
    pub model: UnrolledModel<f32>,
}

fn dual_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("dual.json")
}

/// Step size `1/‖A‖₂²`, the largest that keeps a plain gradient step stable.
pub fn default_step(a: &Combiner<f32>) -> f64 {
    1.0 / a.cast::<f64>().to_complex().spectral_norm_sqr()
}

/// Trains on `data/train.xlmu`, validates on `data/val.xlmu` and writes the
/// best checkpoint, the report and the resolved config into `out`.
pub fn run_train(cfg: &RunConfig, data: &Path, out: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.training.unconstrained |= opts.unconstrained;
    cfg.validate()?;
    let hash = cfg.hash();
    let (train_header, train_set) = load_split(&cfg, data, Split::Train)?;
    let (_, val_set) = load_split(&cfg, data, Split::Val)?;
    let a = train_header.combiner::<f32>()?;
    let layers = cfg.model.layers;

    let (model, dual, first_epoch) = match &opts.resume {
        Some(path) => {
            let (model, header) = UnrolledModel::<f32>::load(path)?;
            if header.model != cfg.unrolled()? {
                return Err(Error::Validation(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            let dual = match fs::read_to_string(dual_path(path)) {
                Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?,
                Err(_) => DualState::new(layers, cfg.training.epsilon, cfg.training.dual_step)?,
            };
            (model, dual, header.info.epoch + 1)
        }
        None => {
            let model = UnrolledModel::<f32>::new(cfg.unrolled()?, default_step(&a), &mut stream(cfg.seed, "init", 0))?;
            (model, DualState::new(layers, cfg.training.epsilon, cfg.training.dual_step)?, 0)
        }
    };

    fs::create_dir_all(out)?;
    write_resolved(&cfg, out)?;
    let setup = TrainSetup {
        train: &train_set,
        val: &val_set,
        combiner: &a,
        first_epoch,
    };
    let mut rng = stream(cfg.seed, "train", first_epoch as u64);
    let last = out.join(LAST_CHECKPOINT);
    let measurements = a.rows;
    let info = |epoch| CheckpointInfo {
        config_hash: hash.clone(),
        epoch,
        measurements,
    };
    let (best, report) = train(&setup, model, dual, &cfg.training, &mut rng, |rec, model, dual| {
        model.save(&last, &info(rec.epoch))?;
        write_text(&dual_path(&last), &to_json(dual)?)
    })?;
    let checkpoint = out.join(CHECKPOINT);
    best.save(&checkpoint, &info(report.best_epoch.unwrap_or(first_epoch.saturating_sub(1))))?;
    write_text(&out.join("report.csv"), &report.to_csv())?;
    write_text(&out.join("report.json"), &to_json(&ReportFile { config_hash: &hash, report: &report })?)?;
    Ok(TrainOutcome {
        report,
        checkpoint,
        model: best,
    })
}

#[derive(Serialize)]
struct ReportFile<'a, R> {
    config_hash: &'a str,
    #[serde(flatten)]
    report: &'a R,
}

/// Loads checkpoints, pairing each with the combiner of its training run
/// (the config's seed at the checkpoint's measurement count).
pub fn load_models(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<PgdNetFactory<f32>> {
    let mut factory = PgdNetFactory {
        name: "pgd_net".into(),
        models: Vec::new(),
        combiners: Vec::new(),
    };
    for path in checkpoints {
        let (model, header) = UnrolledModel::<f32>::load(path)
            .map_err(|e| Error::Validation(format!("cannot load checkpoint {}: {e}", path.display())))?;
        if model.config.io_shape.len() != cfg.geometry.antennas {
            return Err(Error::Validation(format!(
                "{} expects {} antennas, config has {}",
                path.display(),
                model.config.io_shape.len(),
                cfg.geometry.antennas
            )));
        }
        let rf = cfg.measurement.rf_chains;
        let m = header.info.measurements;
        if m == 0 || m % rf != 0 {
            return Err(Error::Validation(format!(
                "{} was trained with {m} measurements, not a multiple of N_RF = {rf}",
                path.display()
            )));
        }
        let a = make_combiner::<f32, _>(cfg.geometry.antennas, m / rf, rf, &mut stream(cfg.seed, "combiner", 0))?;
        factory.models.push(model);
        factory.combiners.push(a);
    }
    Ok(factory)
}

/// Estimator registry for the requested names.
pub struct Registry {
    pub lmmse: LmmseFactory<f32>,
    pub omp: OmpFactory,
    pub pgd: Option<PgdNetFactory<f32>>,
}

impl Registry {
    pub fn new(cfg: &RunConfig, covariance: Option<&PairSet<f32>>, pgd: Option<PgdNetFactory<f32>>) -> Result<Self> {
        let source = match covariance {
            Some(set) => CovarianceSource::Fixed(empirical_covariance(set.antennas, set.h.chunks(set.antennas))?),
            None => CovarianceSource::Sampled(cfg.estimators.lmmse_covariance_samples),
        };
        Ok(Registry {
            lmmse: LmmseFactory { source },
            omp: OmpFactory {
                grid: cfg.estimators.omp_grid.clone(),
                k_max: cfg.estimators.omp_k_max,
                carrier_only: cfg.estimators.omp_carrier_only,
            },
            pgd,
        })
    }

    pub fn select(&self, names: &[String], cfg: &RunConfig) -> Result<Vec<&dyn EstimatorFactory<f32>>> {
        names
            .iter()
            .map(|n| -> Result<&dyn EstimatorFactory<f32>> {
                match n.as_str() {
                    "oracle" => Ok(&Oracle),
                    "lmmse" => {
                        if matches!(self.lmmse.source, CovarianceSource::Sampled(0)) {
                            return Err(Error::Validation(
                                "lmmse needs a covariance source: set estimators.lmmse_covariance_samples > 0 or provide a training split"
                                    .into(),
                            ));
                        }
                        Ok(&self.lmmse)
                    }
                    "omp" => {
                        if cfg.estimators.omp_grid.angle_factor == 0 {
                            return Err(Error::Validation("omp needs estimators.omp_grid.angle_factor >= 1".into()));
                        }
                        Ok(&self.omp)
                    }
                    "pgd_net" => self.pgd.as_ref().map(|p| p as &dyn EstimatorFactory<f32>).ok_or_else(|| {
                        Error::Validation("pgd_net needs a trained model: pass --checkpoint <file>".into())
                    }),
                    other => Err(Error::Validation(format!(
                        "unknown estimator `{other}` (available: oracle, lmmse, omp, pgd_net)"
                    ))),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub config_hash: String,
    pub scores: Vec<SetScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layerwise: Option<LayerCurve>,
}

/// Scores the requested estimators on `data/test.xlmu` and writes
/// `evaluation.{csv,json}`, `layerwise.csv` and beam-split plot data.
pub fn run_evaluate(
    cfg: &RunConfig,
    data: &Path,
    checkpoints: &[PathBuf],
    estimators: &[String],
    out: &Path,
) -> Result<EvaluationFile> {
    cfg.validate()?;
    let (header, test) = load_split(cfg, data, Split::Test)?;
    let a = header.combiner::<f32>()?;
    let pgd = if checkpoints.is_empty() { None } else { Some(load_models(cfg, checkpoints)?) };
    let train = dataset_path(data, Split::Train)
        .exists()
        .then(|| load_split(cfg, data, Split::Train).map(|(_, s)| s))
        .transpose()?;
    let registry = Registry::new(cfg, train.as_ref(), pgd)?;
    let chosen = registry.select(estimators, cfg)?;
    let ctx = PointContext {
        value: header.snr_db[0],
        geometry: cfg.geometry.clone(),
        sampling: cfg.sampling.clone(),
        combiner: a.clone(),
        snr_db: header.snr_db[0],
        layer: None,
        seed: cfg.seed,
    };
    let scores = evaluate_pairs(&test, &ctx, &chosen)?;
    let layerwise = match registry.pgd.as_ref().and_then(|p| p.models.first()) {
        Some(model) if estimators.iter().any(|e| e == "pgd_net") => Some(layerwise_curve(model, &test, &a)?),
        _ => None,
    };
    fs::create_dir_all(out)?;
    let hash = cfg.hash();
    let mut csv = String::from("estimator,nmse_db,nmse_linear,count,zero_norm,failures\n");
    for s in &scores {
        csv += &format!(
            "{},{},{},{},{},{}\n",
            s.estimator,
            s.nmse_db,
            s.nmse.linear(),
            s.nmse.count,
            s.nmse.zero_norm,
            s.failures
        );
    }
    write_text(&out.join("evaluation.csv"), &csv)?;
    if let Some(curve) = &layerwise {
        write_text(&out.join("layerwise.csv"), &curve.to_csv())?;
    }
    write_beam_split(&cfg.geometry, cfg.seed, &out.join("beam_split"))?;
    let file = EvaluationFile {
        config_hash: hash,
        scores,
        layerwise,
    };
    write_text(&out.join("evaluation.json"), &to_json(&file)?)?;
    write_resolved(cfg, out)?;
    Ok(file)
}

/// Polar spectra of three single-path channels (25, 50 and 100% visible)
/// at the first and last subcarrier, one two-column CSV per curve.
pub fn write_beam_split(geom: &ArrayGeometry, seed: u64, dir: &Path) -> Result<()> {
    let coverage = [0.25, 0.5, 1.0];
    let paths = beam_split_paths(geom, &coverage, (5.0, 30.0), (-1.0, 1.0), &mut stream(seed, "beam_split", 0))?;
    let subs = [0, geom.subcarriers - 1];
    let traces = beam_split(geom, &paths, &coverage, &subs, &PolarGrid::default())?;
    fs::create_dir_all(dir)?;
    let mut summary = String::from("coverage,subcarrier,argmax,peak\n");
    for t in &traces {
        for (k, &m) in t.subcarriers.iter().enumerate() {
            let mut csv = String::from("atom,magnitude\n");
            for (i, v) in t.spectrum[k].iter().enumerate() {
                csv += &format!("{i},{v}\n");
            }
            write_text(&dir.join(format!("coverage{:03}_sub{}.csv", (t.coverage * 100.0).round(), m + 1)), &csv)?;
            summary += &format!("{},{},{},{}\n", t.coverage, m + 1, t.argmax[k], t.peak[k]);
        }
    }
    let set = PathSet { paths };
    write_text(&dir.join("paths.json"), &to_json(&set)?)?;
    write_text(&dir.join("summary.csv"), &summary)
}

/// Runs the configured sweep and writes `sweep.{csv,json}` plus one curve
/// file per estimator.
pub fn run_sweep_files(cfg: &RunConfig, checkpoints: &[PathBuf], estimators: &[String], out: &Path) -> Result<SweepResult> {
    cfg.validate()?;
    let mut spec = cfg.sweep_spec();
    spec.estimators = estimators.to_vec();
    let pgd = if checkpoints.is_empty() { None } else { Some(load_models(cfg, checkpoints)?) };
    let registry = Registry::new(cfg, None, pgd)?;
    let chosen = registry.select(estimators, cfg)?;
    let result = run_sweep(&spec, &chosen, &cfg.hash())?;
    fs::create_dir_all(out)?;
    write_text(&out.join("sweep.csv"), &result.to_csv())?;
    #[derive(Serialize)]
    struct SweepFile<'a> {
        config: &'a RunConfig,
        result: &'a SweepResult,
    }
    write_text(&out.join("sweep.json"), &to_json(&SweepFile { config: cfg, result: &result })?)?;
    for (name, csv) in result.curves() {
        write_text(&out.join("curves").join(format!("{name}.csv")), &csv)?;
    }
    write_resolved(cfg, out)?;
    Ok(result)
}
