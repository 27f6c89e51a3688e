//! Multi-trial orchestration and the CSV/JSON artifacts read by the
//! plotting tools.
//!
//! Output layout for a run:
//!
//! ```text
//! out/
//!   metadata.json
//!   learning_curve.csv        trial,episode,env_steps,return
//!   trial_0/                  checkpoint directory of trial 0
//!   trial_1/ ...
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{CheckpointDir, EpisodeLog, Learner, RunConfig};
use crate::error::{Error, Result};
use crate::regression::{self, PredictionRow, RegressConfig};

pub const LEARNING_CURVE_HEADER: &str = "trial,episode,env_steps,return";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub config: RunConfig,
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub tool_version: String,
}

impl RunMetadata {
    pub fn new(config: &RunConfig, trials: usize) -> Self {
        RunMetadata {
            config_hash: config.hash(),
            config: config.clone(),
            trials,
            seeds: (0..trials).map(|t| config.seed + t as u64).collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn read(out: &Path) -> Result<Self> {
        let path = out.join("metadata.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Config of trial `t`: the base config with seed `seed + t`.
pub fn trial_config(base: &RunConfig, trial: usize) -> RunConfig {
    RunConfig {
        seed: base.seed + trial as u64,
        ..base.clone()
    }
}

pub fn trial_dir(out: &Path, trial: usize) -> PathBuf {
    out.join(format!("trial_{trial}"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub trial: usize,
    pub episode: usize,
    pub env_steps: u64,
    pub ret: f64,
}

pub fn curve_rows(trial: usize, logs: &[EpisodeLog]) -> Vec<CurveRow> {
    logs.iter()
        .map(|l| CurveRow {
            trial,
            episode: l.episode,
            env_steps: l.env_steps,
            ret: l.total_return,
        })
        .collect()
}

/// Writes rows sorted by `(trial, episode)`.
pub fn write_learning_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut rows = rows.to_vec();
    rows.sort_by_key(|r| (r.trial, r.episode));
    let mut out = String::from(LEARNING_CURVE_HEADER);
    out.push('\n');
    for r in &rows {
        out.push_str(&format!("{},{},{},{:?}\n", r.trial, r.episode, r.env_steps, r.ret));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_learning_curve(path: &Path) -> Result<Vec<CurveRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let expected: Vec<&str> = LEARNING_CURVE_HEADER.split(',').collect();
    if reader.headers()?.iter().collect::<Vec<_>>() != expected {
        return Err(Error::input(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = || Error::input(format!("{}: malformed row {}", path.display(), i + 1));
        rows.push(CurveRow {
            trial: rec[0].parse().map_err(|_| bad())?,
            episode: rec[1].parse().map_err(|_| bad())?,
            env_steps: rec[2].parse().map_err(|_| bad())?,
            ret: rec[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// Outcome of one trial; `error` is set when it stopped early.
#[derive(Debug)]
pub struct TrialOutcome {
    pub trial: usize,
    pub logs: Vec<EpisodeLog>,
    pub error: Option<Error>,
}

fn finish(mut learner: Learner, trial: usize) -> TrialOutcome {
    let error = learner.run().err();
    TrialOutcome {
        trial,
        logs: learner.logs,
        error,
    }
}

fn on_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn collect(out: &Path, outcomes: Vec<TrialOutcome>) -> Result<Vec<TrialOutcome>> {
    let rows: Vec<CurveRow> = outcomes.iter().flat_map(|o| curve_rows(o.trial, &o.logs)).collect();
    write_learning_curve(&out.join("learning_curve.csv"), &rows)?;
    Ok(outcomes)
}

/// Runs `trials` independent trials with seeds `seed + t`, `parallel` at a
/// time. Each trial checkpoints into its own directory; the learning curve
/// is written once all trials have stopped.
pub fn run_trials(config: &RunConfig, trials: usize, out: &Path, parallel: usize) -> Result<Vec<TrialOutcome>> {
    config.validate()?;
    if trials == 0 {
        return Err(Error::config("trials must be ≥ 1"));
    }
    std::fs::create_dir_all(out)?;
    let meta = RunMetadata::new(config, trials);
    std::fs::write(out.join("metadata.json"), serde_json::to_string_pretty(&meta)?)?;
    let learners = (0..trials)
        .map(|t| Learner::new(trial_config(config, t), Some(CheckpointDir::new(trial_dir(out, t)))))
        .collect::<Result<Vec<_>>>()?;
    let outcomes = on_pool(parallel, || {
        learners
            .into_par_iter()
            .enumerate()
            .map(|(t, l)| finish(l, t))
            .collect::<Vec<_>>()
    })?;
    collect(out, outcomes)
}

/// Continues every trial of an earlier run from its last committed episode.
pub fn resume_trials(out: &Path, expected: Option<&RunConfig>, parallel: usize) -> Result<Vec<TrialOutcome>> {
    let meta = RunMetadata::read(out)?;
    if let Some(cfg) = expected {
        if cfg.hash() != meta.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: run {} vs requested {}",
                meta.config_hash,
                cfg.hash()
            )));
        }
    }
    let learners = (0..meta.trials)
        .map(|t| {
            let cfg = trial_config(&meta.config, t);
            Learner::resume(CheckpointDir::new(trial_dir(out, t)), Some(&cfg))
        })
        .collect::<Result<Vec<_>>>()?;
    let outcomes = on_pool(parallel, || {
        learners
            .into_par_iter()
            .enumerate()
            .map(|(t, l)| finish(l, t))
            .collect::<Vec<_>>()
    })?;
    collect(out, outcomes)
}

/// Fits the regression ensemble and writes `predictions.csv` under `out`.
pub fn run_regression(config: &RegressConfig, out: &Path) -> Result<Vec<PredictionRow>> {
    let ensemble = regression::fit(config)?;
    let rows = regression::predict_grid(&ensemble, config)?;
    std::fs::create_dir_all(out)?;
    regression::write_predictions_csv(&out.join("predictions.csv"), &rows)?;
    Ok(rows)
}
