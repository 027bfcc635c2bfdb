//! Run configuration: presets, file overrides, validation and hashing.
//!
//! A config file (TOML or JSON) may name a `preset`; its tables are merged
//! key by key on top of that preset, so a file only lists what it changes.
//! Without a preset every section must be given.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::channel::{ArrayGeometry, PathSampling};
use crate::data::{DatasetHeader, Split};
use crate::error::{Error, Result};
use crate::estimators::PolarGrid;
use crate::eval::{SweepAxis, SweepBase, SweepSpec};
use crate::nn::ProxNetSpec;
use crate::training::{InjectionConfig, LossKind, LrSchedule, TrainConfig};
use crate::unrolled::{IoShape, StartPoint, UnrolledConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Validation(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementConfig {
    pub pilots: usize,
    pub rf_chains: usize,
    /// Datasets hold the same number of realizations at every level.
    pub snr_db: Vec<f64>,
}

/// Realizations per split and SNR level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 70/10/20 split of `total` realizations.
    pub fn from_total(total: usize) -> Self {
        let train = total * 7 / 10;
        let val = total / 10;
        SplitSizes {
            train,
            val,
            test: total - train - val,
        }
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub prox: ProxNetSpec,
    /// Defaults to the most square factorization the prox net accepts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub io_shape: Option<IoShape>,
    /// Defaults to `√N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_scale: Option<f64>,
    #[serde(default)]
    pub start: StartPoint,
    #[serde(default)]
    pub tied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub omp_grid: PolarGrid,
    /// Defaults to twice the path count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omp_k_max: Option<usize>,
    /// One dictionary at the carrier instead of one per subcarrier.
    #[serde(default)]
    pub omp_carrier_only: bool,
    /// Realizations pooled into the LMMSE prior covariance.
    pub lmmse_covariance_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub estimators: Vec<String>,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub seed: u64,
    /// Output directory; not part of the config hash.
    pub out: String,
    pub geometry: ArrayGeometry,
    pub sampling: PathSampling,
    pub measurement: MeasurementConfig,
    pub splits: SplitSizes,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub estimators: EstimatorConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// N=64 ULA, 32 subcarriers, 32 measurements at 10 dB, three layers.
    pub fn desk() -> Self {
        let geometry = ArrayGeometry::ula(64, 100e9, 10e9, 32).expect("valid desk geometry");
        RunConfig {
            preset: Some(Preset::Desk),
            seed: 2024,
            out: "runs/desk".into(),
            geometry,
            sampling: PathSampling {
                paths: 3,
                distance: (5.0, 30.0),
                theta: (-std::f64::consts::FRAC_PI_3, std::f64::consts::FRAC_PI_3),
                phi: (-std::f64::consts::FRAC_PI_6, std::f64::consts::FRAC_PI_6),
                coverage: vec![0.25, 0.5, 0.75],
            },
            measurement: MeasurementConfig {
                pilots: 8,
                rf_chains: 4,
                snr_db: vec![10.0],
            },
            // 625 realizations x 32 subcarriers = 20k training pairs
            splits: SplitSizes {
                train: 625,
                val: 100,
                test: 500,
            },
            model: ModelConfig {
                layers: 3,
                prox: ProxNetSpec::desk(),
                io_shape: None,
                input_scale: None,
                start: StartPoint::MatchedFilter,
                tied: false,
            },
            training: TrainConfig::desk(),
            estimators: EstimatorConfig {
                omp_grid: PolarGrid::default(),
                omp_k_max: None,
                omp_carrier_only: false,
                lmmse_covariance_samples: 2000,
            },
            sweep: SweepConfig {
                axis: SweepAxis::Snr,
                values: vec![-5.0, 0.0, 5.0, 10.0],
                estimators: vec!["lmmse".into(), "omp".into(), "pgd_net".into()],
                trials: 500,
            },
        }
    }

    /// N=512 ULA, 256 subcarriers, 256 measurements, five layers.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.preset = Some(Preset::Paper);
        c.out = "runs/paper".into();
        c.geometry = ArrayGeometry::ula(512, 100e9, 10e9, 256).expect("valid preset geometry");
        c.measurement = MeasurementConfig {
            pilots: 64,
            rf_chains: 4,
            snr_db: vec![-5.0, 0.0, 5.0, 10.0],
        };
        // 5e7 pairs per SNR level over 256 subcarriers, split 3.5/0.5/1.0
        c.splits = SplitSizes {
            train: 136_718,
            val: 19_531,
            test: 39_062,
        };
        c.model.layers = 5;
        c.model.prox = ProxNetSpec::paper();
        c.training = TrainConfig {
            epochs: 100,
            learning_rate: 1e-4,
            lr_schedule: LrSchedule::Constant,
            loss: LossKind::Squared,
            augment: false,
            noise: Some(InjectionConfig { relative: 1e-2, gamma: 0.5 }),
            ..TrainConfig::desk()
        };
        c
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.sampling.validate()?;
        let m = &self.measurement;
        if m.pilots == 0 || m.rf_chains == 0 {
            return Err(Error::Validation("measurement.pilots and measurement.rf_chains must be positive".into()));
        }
        if m.snr_db.is_empty() || m.snr_db.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return Err(Error::Validation("measurement.snr_db needs at least one valid level".into()));
        }
        if self.model.layers == 0 {
            return Err(Error::Validation("model.layers must be at least 1".into()));
        }
        self.unrolled()?.validate()?;
        self.training.validate()?;
        self.sweep_spec().validate()?;
        Ok(())
    }

    pub fn measurements(&self) -> usize {
        self.measurement.pilots * self.measurement.rf_chains
    }

    pub fn unrolled(&self) -> Result<UnrolledConfig> {
        let divisor = self.model.prox.divisor();
        let io_shape = match self.model.io_shape {
            Some(s) => {
                s.check(self.geometry.antennas, divisor)?;
                s
            }
            None => IoShape::for_geometry(&self.geometry, divisor)?,
        };
        Ok(UnrolledConfig {
            layers: self.model.layers,
            prox: self.model.prox.clone(),
            io_shape,
            start: self.model.start,
            input_scale: self.model.input_scale.unwrap_or((self.geometry.antennas as f64).sqrt()),
            tied: self.model.tied,
        })
    }

    pub fn sweep_spec(&self) -> SweepSpec {
        SweepSpec {
            axis: self.sweep.axis,
            values: self.sweep.values.clone(),
            base: SweepBase {
                geometry: self.geometry.clone(),
                sampling: self.sampling.clone(),
                pilots: self.measurement.pilots,
                rf_chains: self.measurement.rf_chains,
                snr_db: self.measurement.snr_db[0],
            },
            estimators: self.sweep.estimators.clone(),
            trials: self.sweep.trials,
            seed: self.seed,
            domain: Split::Test.name().into(),
        }
    }

    pub fn dataset_header(&self, split: Split) -> DatasetHeader {
        DatasetHeader {
            geometry: self.geometry.clone(),
            pilots: self.measurement.pilots,
            rf_chains: self.measurement.rf_chains,
            snr_db: self.measurement.snr_db.clone(),
            split,
            samples: self.splits.get(split) * self.measurement.snr_db.len(),
            root_seed: self.seed,
            config_hash: self.hash_bytes(),
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring `out`.
    pub fn hash_bytes(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.out.clear();
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn hash(&self) -> String {
        hex::encode(self.hash_bytes())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Validation(format!("config does not serialize: {e}")))
    }

    /// Parses a TOML or JSON document (by `format`) and resolves it against
    /// its preset, or against `fallback` when it names none.
    pub fn from_str_with(text: &str, format: Format, fallback: Option<Preset>) -> Result<Self> {
        let user: Value = match format {
            Format::Toml => {
                let t: toml::Table = toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
                serde_json::to_value(t).map_err(|e| Error::Validation(format!("config: {e}")))?
            }
            Format::Json => serde_json::from_str(text).map_err(|e| {
                Error::Validation(format!("config: line {}, column {}: {e}", e.line(), e.column()))
            })?,
        };
        let preset = match user.get("preset") {
            Some(Value::String(s)) => Some(s.parse::<Preset>().map_err(|e| located(text, format, &["preset"], e.to_string()))?),
            Some(_) => return Err(located(text, format, &["preset"], "preset must be a string".into())),
            None => fallback,
        };
        let mut merged = match preset {
            Some(p) => serde_json::to_value(Self::preset(p)).expect("preset serializes"),
            None => Value::Object(Default::default()),
        };
        merge(&mut merged, user);
        if let (Some(p), Value::Object(map)) = (preset, &mut merged) {
            map.insert("preset".into(), serde_json::to_value(p).expect("preset serializes"));
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
            let path: Vec<String> = e.path().iter().map(|s| s.to_string()).collect();
            let keys: Vec<&str> = path.iter().map(String::as_str).collect();
            located(text, format, &keys, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`; the extension picks the format (`.json` or TOML).
    pub fn load(path: &Path, fallback: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let format = if path.extension().is_some_and(|e| e == "json") { Format::Json } else { Format::Toml };
        Self::from_str_with(&text, format, fallback).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Prefixes `msg` with the line of the deepest key of `path` found in the
/// source text, if any.
fn located(text: &str, format: Format, path: &[&str], msg: String) -> Error {
    let keys: Vec<&str> = path.iter().copied().filter(|k| k.parse::<usize>().is_err() && *k != "?").collect();
    let line = match format {
        Format::Toml => find_toml_line(text, &keys),
        Format::Json => keys.last().and_then(|k| find_line(text, &format!("\"{k}\""))),
    };
    let at = if keys.is_empty() { String::new() } else { format!(" at `{}`", keys.join(".")) };
    match line {
        Some(l) => Error::Validation(format!("config line {l}{at}: {msg}")),
        None => Error::Validation(format!("config{at}: {msg}")),
    }
}

fn find_line(text: &str, needle: &str) -> Option<usize> {
    text.lines().position(|l| l.contains(needle)).map(|i| i + 1)
}

/// Line of `keys` in a TOML document, tracking `[table]` headers and
/// accepting dotted or inline forms.
fn find_toml_line(text: &str, keys: &[&str]) -> Option<usize> {
    let (last, tables) = keys.split_last()?;
    let want = tables.join(".");
    let mut current = String::new();
    let mut fallback = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = h.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == keys.join(".") {
                return Some(i + 1);
            }
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        let k = k.trim().trim_matches('"');
        let full = if current.is_empty() { k.to_string() } else { format!("{current}.{k}") };
        if full == keys.join(".") || (current == want && k == *last) {
            return Some(i + 1);
        }
        if fallback.is_none() && (k == *last || full.ends_with(&format!(".{last}")) || line.contains(&format!("{last} ="))) {
            fallback = Some(i + 1);
        }
    }
    fallback
}
