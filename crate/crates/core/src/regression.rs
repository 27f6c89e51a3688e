//! 1-D sin regression with a hole in the training support, used to inspect
//! how predictive uncertainty grows away from the data.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::agent::CONFIG_VERSION;
use crate::error::{Error, Result};
use crate::model::{DropoutMode, Ensemble, ModelConfig, Penalties, StateEncoding};
use crate::nn::OptimizerKind;
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressConfig {
    pub version: u32,
    pub seed: u64,
    /// Name of the target function; only "sin" exists.
    pub generator: String,
    pub samples: usize,
    pub x_min: f64,
    pub x_max: f64,
    /// Open interval without training samples.
    pub gap: (f64, f64),
    pub target_noise_std: f64,
    pub grid_points: usize,
    pub hidden: Vec<usize>,
    pub ensemble_size: usize,
    pub family_size: usize,
    pub subset_size: usize,
    pub keep_rate: f64,
    pub dropout: DropoutMode,
    pub mask_input: bool,
    /// Train each member on its own resample of the data.
    pub bootstrap: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for RegressConfig {
    fn default() -> Self {
        RegressConfig {
            version: CONFIG_VERSION,
            seed: 0,
            generator: "sin".into(),
            samples: 200,
            x_min: -3.0,
            x_max: 3.0,
            gap: (0.5, 1.5),
            target_noise_std: 0.0,
            grid_points: 241,
            hidden: vec![32, 32],
            ensemble_size: 5,
            family_size: 5,
            subset_size: 3,
            keep_rate: 0.9,
            dropout: DropoutMode::Restrictive,
            mask_input: false,
            bootstrap: false,
            epochs: 3000,
            batch_size: 32,
            learning_rate: 3e-3,
            weight_decay: 0.0,
        }
    }
}

impl RegressConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden.clone(),
            ensemble_size: self.ensemble_size,
            family_size: self.family_size,
            subset_size: self.subset_size,
            keep_rate: self.keep_rate,
            dropout: self.dropout,
            mask_input: self.mask_input,
            two_step_loss: false,
            bootstrap: self.bootstrap,
            penalties: Penalties {
                weight_decay: self.weight_decay,
                ..Penalties::default()
            },
            optimizer: OptimizerKind::Adam,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }

    /// Parses a config file body; `version` is required.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        if value.get("version").is_none() {
            return Err(Error::config("version: required field is missing"));
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!("version: unsupported version {} (expected {CONFIG_VERSION})", self.version)));
        }
        if self.generator != "sin" {
            return Err(Error::config(format!("generator: unknown dataset generator {:?}", self.generator)));
        }
        if !(self.x_min < self.x_max) {
            return Err(Error::config("x_min must be below x_max"));
        }
        let (lo, hi) = self.gap;
        if !(self.x_min < lo && lo < hi && hi < self.x_max) {
            return Err(Error::config("gap must be a non-empty interval inside (x_min, x_max)"));
        }
        if self.samples == 0 || self.grid_points < 2 {
            return Err(Error::config("samples must be ≥ 1 and grid_points ≥ 2"));
        }
        if !(self.target_noise_std >= 0.0) {
            return Err(Error::config("target_noise_std must be ≥ 0"));
        }
        self.model_config().validate()
    }

    pub fn in_support(&self, x: f64) -> bool {
        x >= self.x_min && x <= self.x_max && !(x > self.gap.0 && x < self.gap.1)
    }
}

/// Training pairs drawn uniformly from the support, gap excluded.
pub fn sin_dataset(cfg: &RegressConfig) -> (Array2<f64>, Array2<f64>) {
    let mut r = rng::stream(cfg.seed, &[tag::DATA]);
    let noise = Normal::new(0.0, cfg.target_noise_std.max(0.0)).expect("finite std");
    let mut x = Array2::zeros((cfg.samples, 1));
    let mut y = Array2::zeros((cfg.samples, 1));
    for i in 0..cfg.samples {
        let xi = loop {
            let v = r.random_range(cfg.x_min..=cfg.x_max);
            if cfg.in_support(v) {
                break v;
            }
        };
        x[[i, 0]] = xi;
        y[[i, 0]] = xi.sin() + if cfg.target_noise_std > 0.0 { noise.sample(&mut r) } else { 0.0 };
    }
    (x, y)
}

pub fn fit(cfg: &RegressConfig) -> Result<Ensemble> {
    cfg.validate()?;
    let mut init = rng::stream(cfg.seed, &[tag::INIT]);
    let mut ens = Ensemble::new(cfg.model_config(), StateEncoding::Identity, 1, 0, &mut init)?;
    let (x, y) = sin_dataset(cfg);
    ens.train_regression(&x, &y, &mut rng::stream(cfg.seed, &[tag::TRAIN]))?;
    Ok(ens)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionRow {
    pub x: f64,
    pub mean: f64,
    pub std: f64,
    pub in_support: bool,
}

/// Predictive mean and std on an even grid over `[x_min, x_max]`. The std
/// is the spread of the per-(member, mask) means, the model uncertainty.
pub fn predict_grid(ens: &Ensemble, cfg: &RegressConfig) -> Result<Vec<PredictionRow>> {
    let n = cfg.grid_points;
    (0..n)
        .map(|i| {
            let x = cfg.x_min + (cfg.x_max - cfg.x_min) * i as f64 / (n - 1) as f64;
            let s = ens.predictive_summary(&[x], &[])?;
            Ok(PredictionRow {
                x,
                mean: s.mean[0],
                std: s.epistemic_std[0],
                in_support: cfg.in_support(x),
            })
        })
        .collect()
}

/// Mean std over grid points inside the gap divided by the mean std over
/// in-support points.
pub fn gap_ratio(rows: &[PredictionRow]) -> f64 {
    let mean = |sel: bool| {
        let v: Vec<f64> = rows.iter().filter(|r| r.in_support == sel).map(|r| r.std).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    mean(false) / mean(true)
}

pub const PREDICTIONS_HEADER: &str = "x,mean,std,in_support";

pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut out = String::from(PREDICTIONS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:?},{:?},{:?},{}\n", r.x, r.mean, r.std, u8::from(r.in_support)));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<&str> = PREDICTIONS_HEADER.split(',').collect();
    if reader.headers()?.iter().collect::<Vec<_>>() != header {
        return Err(Error::input(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let num = |k: usize| {
            rec[k]
                .parse::<f64>()
                .map_err(|_| Error::input(format!("{}: bad number in row {}", path.display(), i + 1)))
        };
        rows.push(PredictionRow {
            x: num(0)?,
            mean: num(1)?,
            std: num(2)?,
            in_support: &rec[3] == "1",
        });
    }
    Ok(rows)
}
