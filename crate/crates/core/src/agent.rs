//! The learning loop: random warmup, then episodes of closed-loop MPC with
//! the current model followed by a model update on all data so far.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{observe, Env, EnvKind, NoiseConfig};
use crate::error::{Error, Result};
use crate::model::{
    append_dataset_csv, dataset_header, read_dataset_csv, validate_subset_size, DropoutMode, Ensemble, LossTrace,
    ModelConfig, Penalties, TwoStepTransition,
};
use crate::nn::OptimizerKind;
use crate::planner::{mpc_act, ActionBounds, CemConfig, MpcConfig, PlanState};
use crate::probe::Probe;
use crate::propagation::{ParticleModel, PropagationMode, TrueDynamics};
use crate::rng::{self, tag, StreamRng};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Restrictive dropout, two-step loss, mean-only propagation.
    Full,
    /// Fresh Bernoulli masks on every call.
    Mc,
    /// No dropout; bootstrap-resampled members.
    Be,
    /// One-step loss only.
    NoFec,
    /// Particles sample from the predicted Gaussian.
    NoDu,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Full, Ablation::Mc, Ablation::Be, Ablation::NoFec, Ablation::NoDu];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::Mc => "mc",
            Ablation::Be => "be",
            Ablation::NoFec => "no_fec",
            Ablation::NoDu => "no_du",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("ablation: unknown mode {s:?} (expected full, mc, be, no_fec or no_du)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    /// B
    pub ensemble_size: usize,
    /// M
    pub family_size: usize,
    /// Q
    pub subset_size: usize,
    pub keep_rate: f64,
    pub mask_input: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// λ, applied uniformly to every layer.
    pub weight_decay: f64,
    pub logvar_bound: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            hidden: m.hidden,
            ensemble_size: m.ensemble_size,
            family_size: m.family_size,
            subset_size: m.subset_size,
            keep_rate: m.keep_rate,
            mask_input: m.mask_input,
            epochs: m.epochs,
            batch_size: m.batch_size,
            learning_rate: m.learning_rate,
            weight_decay: m.penalties.weight_decay,
            logvar_bound: m.penalties.logvar_bound,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerSection {
    /// H
    pub horizon: usize,
    /// P
    pub particles: usize,
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    pub init_std_fraction: f64,
    pub alpha: f64,
}

impl Default for PlannerSection {
    fn default() -> Self {
        let m = MpcConfig::default();
        PlannerSection {
            horizon: m.horizon,
            particles: m.particles,
            population: m.cem.population,
            elites: m.cem.elites,
            iterations: m.cem.iterations,
            init_std_fraction: m.cem.init_std_fraction,
            alpha: m.cem.alpha,
        }
    }
}

/// Everything that determines a run. Serialized as the experiment config
/// file; `version` is required there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub env: EnvKind,
    pub seed: u64,
    /// K, learning episodes after warmup.
    pub episodes: usize,
    /// T
    pub steps: usize,
    pub warmup_episodes: usize,
    pub noise_factor: f64,
    pub ablation: Ablation,
    pub model: ModelSection,
    pub planner: PlannerSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            env: EnvKind::Pendulum,
            seed: 0,
            episodes: 60,
            steps: 200,
            warmup_episodes: 1,
            noise_factor: 0.0,
            ablation: Ablation::Full,
            model: ModelSection::default(),
            planner: PlannerSection::default(),
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

fn within(name: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => field(name, msg),
        other => field(name, other),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(field("version", format!("unsupported version {} (expected {CONFIG_VERSION})", self.version)));
        }
        if self.steps == 0 {
            return Err(field("steps", "T must be ≥ 1"));
        }
        if self.warmup_episodes == 0 {
            return Err(field("warmup_episodes", "at least one warmup episode is required"));
        }
        NoiseConfig {
            factor: self.noise_factor,
        }
        .validate()
        .map_err(|e| within("noise_factor", e))?;
        let m = &self.model;
        if m.hidden.is_empty() || m.hidden.contains(&0) {
            return Err(field("model.hidden", "needs at least one layer, each with ≥ 1 unit"));
        }
        for (name, v) in [
            ("model.ensemble_size", m.ensemble_size),
            ("model.batch_size", m.batch_size),
            ("planner.horizon", self.planner.horizon),
            ("planner.particles", self.planner.particles),
            ("planner.population", self.planner.population),
            ("planner.elites", self.planner.elites),
            ("planner.iterations", self.planner.iterations),
        ] {
            if v == 0 {
                return Err(field(name, "must be ≥ 1"));
            }
        }
        match self.ablation {
            Ablation::Mc => {
                if m.subset_size == 0 {
                    return Err(field("model.subset_size", "Q must be ≥ 1"));
                }
            }
            Ablation::Be => {}
            _ => validate_subset_size(m.family_size, m.subset_size).map_err(|e| within("model.subset_size", e))?,
        }
        self.model_config().validate().map_err(|e| within("model", e))?;
        self.mpc_config().validate().map_err(|e| within("planner", e))?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let (dropout, keep_rate, bootstrap) = match self.ablation {
            Ablation::Mc => (DropoutMode::Fresh, m.keep_rate, false),
            Ablation::Be => (DropoutMode::Disabled, 1.0, true),
            _ => (DropoutMode::Restrictive, m.keep_rate, false),
        };
        ModelConfig {
            hidden: m.hidden.clone(),
            ensemble_size: m.ensemble_size,
            family_size: m.family_size,
            subset_size: m.subset_size,
            keep_rate,
            dropout,
            mask_input: m.mask_input,
            two_step_loss: self.ablation != Ablation::NoFec,
            bootstrap,
            penalties: Penalties {
                weight_decay: m.weight_decay,
                logvar_bound: m.logvar_bound,
            },
            optimizer: OptimizerKind::Adam,
            learning_rate: m.learning_rate,
            epochs: m.epochs,
            batch_size: m.batch_size,
        }
    }

    pub fn mpc_config(&self) -> MpcConfig {
        let p = &self.planner;
        MpcConfig {
            horizon: p.horizon,
            particles: p.particles,
            propagation: if self.ablation == Ablation::NoDu {
                PropagationMode::Sampled
            } else {
                PropagationMode::MeanOnly
            },
            cem: CemConfig {
                population: p.population,
                elites: p.elites,
                iterations: p.iterations,
                init_std_fraction: p.init_std_fraction,
                alpha: p.alpha,
            },
        }
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            factor: self.noise_factor,
        }
    }

    pub fn bounds(&self) -> ActionBounds {
        ActionBounds::new(self.env.action_low(), self.env.action_high()).expect("built-in bounds are valid")
    }

    /// Canonical JSON: fixed field order, shortest round-trip floats.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parses a config file body. `version` must be present; unknown keys
    /// are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        if value.get("version").is_none() {
            return Err(field("version", "required field is missing"));
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    #[serde(rename = "return")]
    pub total_return: f64,
    /// Environment steps taken so far in the run, this episode included.
    pub env_steps: u64,
    pub warmup: bool,
    /// False when the episode was aborted early.
    pub valid: bool,
    /// Steps where planning failed and the fallback action was applied.
    pub planner_fallbacks: usize,
    /// Observed states, as seen by the planner and stored in the dataset.
    pub steps: Vec<StepRecord>,
    pub loss_trace: LossTrace,
    pub wall_clock_seconds: f64,
}

impl EpisodeLog {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &EpisodeLog) -> bool {
        let mut a = self.clone();
        a.wall_clock_seconds = other.wall_clock_seconds;
        a == *other
    }
}

/// Random streams for one episode.
struct EpisodeStreams {
    env: StreamRng,
    noise: StreamRng,
    actions: StreamRng,
    plan: StreamRng,
}

impl EpisodeStreams {
    fn new(seed: u64, episode: usize) -> Self {
        let e = episode as u64;
        EpisodeStreams {
            env: rng::stream(seed, &[e, tag::ENV]),
            noise: rng::stream(seed, &[e, tag::NOISE]),
            actions: rng::stream(seed, &[e, tag::WARMUP_ACTIONS]),
            plan: rng::stream(seed, &[e, tag::PLAN]),
        }
    }
}

/// How actions are chosen during an episode.
pub enum Policy<'a> {
    Random,
    Mpc(&'a dyn ParticleModel),
}

/// Two-step transitions from consecutive observations: one per step after
/// the first.
pub fn two_step_transitions(steps: &[StepRecord], episode: u64) -> Vec<TwoStepTransition> {
    steps
        .windows(2)
        .map(|w| TwoStepTransition {
            s_prev: w[0].state.clone(),
            a_prev: w[0].action.clone(),
            s_mid: w[1].state.clone(),
            a_mid: w[1].action.clone(),
            s_next: w[1].next_state.clone(),
            episode,
        })
        .collect()
}

/// Runs one `T`-step episode. The returned log is flagged invalid if the
/// planner errored; the transitions cover the steps that completed.
pub fn run_episode(cfg: &RunConfig, episode: usize, policy: Policy<'_>) -> (EpisodeLog, Vec<TwoStepTransition>) {
    let start = Instant::now();
    let kind = cfg.env;
    let mut streams = EpisodeStreams::new(cfg.seed, episode);
    let mut env = Env::new(kind, &mut streams.env);
    let scale = kind.observation_scale();
    let noise = cfg.noise();
    let bounds = cfg.bounds();
    let mpc = cfg.mpc_config();
    let reward = move |m: &[f64], v: &[f64], a: &[f64]| kind.reward(m, v, a);
    let mut warm = PlanState::initial(mpc.horizon, &bounds, mpc.cem.init_std_fraction);
    let mut obs = observe(env.state(), &scale, noise, &mut streams.noise);
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut valid = true;
    let mut fallbacks = 0;
    let warmup = matches!(policy, Policy::Random);
    for t in 0..cfg.steps {
        let action = match &policy {
            Policy::Random => (0..kind.action_dim())
                .map(|j| streams.actions.random_range(bounds.low[j]..=bounds.high[j]))
                .collect::<Vec<f64>>(),
            Policy::Mpc(model) => match mpc_act(*model, &obs, &warm, &bounds, &mpc, &reward, &mut streams.plan) {
                Ok(d) => {
                    fallbacks += usize::from(d.fallback);
                    warm = d.next_state;
                    d.action
                }
                Err(e) => {
                    warn!("episode {episode} aborted at step {t}: {e}");
                    valid = false;
                    break;
                }
            },
        };
        let (_, r) = env.step(&action);
        let next_obs = observe(env.state(), &scale, noise, &mut streams.noise);
        steps.push(StepRecord {
            state: obs,
            action: kind.clip_action(&action),
            reward: r,
            next_state: next_obs.clone(),
        });
        obs = next_obs;
    }
    let transitions = two_step_transitions(&steps, episode as u64);
    let log = EpisodeLog {
        episode,
        total_return: steps.iter().map(|s| s.reward).sum(),
        env_steps: 0,
        warmup,
        valid,
        planner_fallbacks: fallbacks,
        steps,
        loss_trace: Vec::new(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    (log, transitions)
}

/// One MPC episode using the environment's exact dynamics as the model.
pub fn oracle_episode(cfg: &RunConfig, episode: usize) -> EpisodeLog {
    let model = TrueDynamics(cfg.env);
    run_episode(cfg, episode, Policy::Mpc(&model)).0
}

/// Checkpoint directory: `config.json`, `dataset.csv`, `model_ep{k}.json`,
/// `logs/episode_{k}.json`.
#[derive(Clone, Debug)]
pub struct CheckpointDir {
    pub root: PathBuf,
}

impl CheckpointDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CheckpointDir { root: root.into() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.root.join("dataset.csv")
    }

    pub fn model_path(&self, episode: usize) -> PathBuf {
        self.root.join(format!("model_ep{episode}.json"))
    }

    pub fn log_path(&self, episode: usize) -> PathBuf {
        self.root.join("logs").join(format!("episode_{episode}.json"))
    }

    fn write_atomic(path: &Path, body: &[u8]) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Highest episode whose log was committed.
    pub fn last_committed(&self) -> Option<usize> {
        let dir = self.root.join("logs");
        let entries = std::fs::read_dir(dir).ok()?;
        entries
            .filter_map(|e| {
                let name = e.ok()?.file_name().into_string().ok()?;
                name.strip_prefix("episode_")?.strip_suffix(".json")?.parse().ok()
            })
            .max()
    }

    pub fn read_logs(&self) -> Result<Vec<EpisodeLog>> {
        let Some(last) = self.last_committed() else {
            return Ok(Vec::new());
        };
        (0..=last)
            .map(|k| {
                let text = std::fs::read_to_string(self.log_path(k))
                    .map_err(|e| Error::Checkpoint(format!("missing log for episode {k}: {e}")))?;
                Ok(serde_json::from_str(&text)?)
            })
            .collect()
    }
}

/// Training run state, resumable from a checkpoint directory.
pub struct Learner {
    pub config: RunConfig,
    pub ensemble: Ensemble,
    pub dataset: Vec<TwoStepTransition>,
    pub logs: Vec<EpisodeLog>,
    checkpoint: Option<CheckpointDir>,
    probe: Probe,
}

impl Learner {
    pub fn new(config: RunConfig, checkpoint: Option<CheckpointDir>) -> Result<Self> {
        config.validate()?;
        let kind = config.env;
        let mut init = rng::stream(config.seed, &[tag::INIT]);
        let ensemble = Ensemble::new(
            config.model_config(),
            kind.encoding(),
            kind.state_dim(),
            kind.action_dim(),
            &mut init,
        )?;
        if let Some(dir) = &checkpoint {
            std::fs::create_dir_all(dir.root.join("logs"))?;
            if dir.last_committed().is_some() || dir.dataset_path().exists() {
                return Err(Error::Checkpoint(format!(
                    "{} already holds a run; resume it or pick another directory",
                    dir.root.display()
                )));
            }
            CheckpointDir::write_atomic(&dir.config_path(), config.canonical_json().as_bytes())?;
        }
        Ok(Learner {
            config,
            ensemble,
            dataset: Vec::new(),
            logs: Vec::new(),
            checkpoint,
            probe: Probe::disabled(),
        })
    }

    /// Restores a run from its last committed episode. When `expected` is
    /// given, its hash must match the stored config.
    pub fn resume(dir: CheckpointDir, expected: Option<&RunConfig>) -> Result<Self> {
        let text = std::fs::read_to_string(dir.config_path())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.config_path().display())))?;
        let stored: RunConfig = serde_json::from_str(&text)?;
        if let Some(cfg) = expected {
            if cfg.hash() != stored.hash() {
                return Err(Error::Checkpoint(format!(
                    "config hash mismatch: checkpoint {} vs requested {}",
                    stored.hash(),
                    cfg.hash()
                )));
            }
        }
        stored.validate()?;
        let logs = dir.read_logs()?;
        let Some(last) = logs.last().map(|l| l.episode) else {
            // nothing committed yet: start over in place
            let _ = std::fs::remove_file(dir.dataset_path());
            let mut l = Learner::new(stored, None)?;
            l.checkpoint = Some(dir);
            return Ok(l);
        };
        let kind = stored.env;
        let header = dataset_header(kind.state_names(), kind.action_names());
        let mut dataset = if dir.dataset_path().exists() {
            read_dataset_csv(&dir.dataset_path(), &header, kind.state_dim(), kind.action_dim())?
        } else {
            Vec::new()
        };
        let before = dataset.len();
        dataset.retain(|t| t.episode as usize <= last);
        if dataset.len() != before {
            // rows from an episode that never committed
            std::fs::remove_file(dir.dataset_path())?;
            append_dataset_csv(&dir.dataset_path(), &header, &dataset)?;
        }
        let ensemble = match Self::latest_model(&dir, last)? {
            Some(e) => e,
            None => {
                let mut init = rng::stream(stored.seed, &[tag::INIT]);
                Ensemble::new(stored.model_config(), kind.encoding(), kind.state_dim(), kind.action_dim(), &mut init)?
            }
        };
        Ok(Learner {
            config: stored,
            ensemble,
            dataset,
            logs,
            checkpoint: Some(dir),
            probe: Probe::disabled(),
        })
    }

    fn latest_model(dir: &CheckpointDir, last: usize) -> Result<Option<Ensemble>> {
        for k in (0..=last).rev() {
            let p = dir.model_path(k);
            if p.exists() {
                let text = std::fs::read_to_string(&p)?;
                return Ok(Some(serde_json::from_str(&text)?));
            }
        }
        Ok(None)
    }

    pub fn set_probe(&mut self, probe: Probe) {
        self.ensemble.set_probe(probe.clone());
        self.probe = probe;
    }

    pub fn total_episodes(&self) -> usize {
        self.config.warmup_episodes + self.config.episodes
    }

    pub fn next_episode(&self) -> usize {
        self.logs.len()
    }

    pub fn is_done(&self) -> bool {
        self.next_episode() >= self.total_episodes()
    }

    /// Runs the next episode (warmup or learning), updates the model when a
    /// learning episode follows, and commits the result.
    pub fn step_episode(&mut self) -> Result<&EpisodeLog> {
        let k = self.next_episode();
        let cfg = self.config.clone();
        let warmup = k < cfg.warmup_episodes;
        let (mut log, transitions) = if warmup {
            run_episode(&cfg, k, Policy::Random)
        } else {
            self.ensemble
                .resample_family(k as u64, &mut rng::stream(cfg.seed, &[k as u64, tag::MASKS]))?;
            run_episode(&cfg, k, Policy::Mpc(&self.ensemble))
        };
        log.env_steps = self.logs.last().map_or(0, |l| l.env_steps) + log.steps.len() as u64;
        self.dataset.extend(transitions.iter().cloned());

        let is_last = k + 1 >= self.total_episodes();
        let trains = log.valid && !self.dataset.is_empty() && (!warmup || (k + 1 == cfg.warmup_episodes && !is_last));
        if trains {
            let t = Instant::now();
            log.loss_trace = self
                .ensemble
                .train_on_dataset(&self.dataset, &mut rng::stream(cfg.seed, &[k as u64, tag::TRAIN]))?;
            log.wall_clock_seconds += t.elapsed().as_secs_f64();
        }
        info!(
            "episode {k}{}: return {:.3}, |D| = {}",
            if warmup { " (warmup)" } else { "" },
            log.total_return,
            self.dataset.len()
        );

        if let Some(dir) = &self.checkpoint {
            let kind = cfg.env;
            let header = dataset_header(kind.state_names(), kind.action_names());
            append_dataset_csv(&dir.dataset_path(), &header, &transitions)?;
            if trains {
                CheckpointDir::write_atomic(&dir.model_path(k), serde_json::to_string(&self.ensemble)?.as_bytes())?;
            }
            CheckpointDir::write_atomic(&dir.log_path(k), serde_json::to_string_pretty(&log)?.as_bytes())?;
        }
        let valid = log.valid;
        self.logs.push(log);
        if !valid {
            return Err(Error::Planning(format!("episode {k} aborted; partial log kept")));
        }
        Ok(self.logs.last().expect("just pushed"))
    }

    /// Runs every remaining episode.
    pub fn run(&mut self) -> Result<&[EpisodeLog]> {
        while !self.is_done() {
            self.step_episode()?;
        }
        Ok(&self.logs)
    }
}

/// Warmup plus `K` learning episodes without persistence.
pub fn learn(config: &RunConfig) -> Result<Vec<EpisodeLog>> {
    let mut l = Learner::new(config.clone(), None)?;
    l.run()?;
    Ok(l.logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            episodes: 1,
            steps: 12,
            model: ModelSection {
                hidden: vec![8],
                epochs: 2,
                ..ModelSection::default()
            },
            planner: PlannerSection {
                horizon: 3,
                particles: 1,
                population: 8,
                elites: 2,
                iterations: 1,
                ..PlannerSection::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn warmup_episode_counts() {
        let mut cfg = tiny();
        cfg.steps = 200;
        let (log, tr) = run_episode(&cfg, 0, Policy::Random);
        assert_eq!(log.steps.len(), 200);
        assert_eq!(tr.len(), 199);
        let (_, tr1) = run_episode(&cfg, 1, Policy::Random);
        let all: Vec<_> = tr.iter().chain(&tr1).collect();
        assert_eq!(all.len(), 398);
        assert!(all.iter().all(|t| t.episode <= 1));
        assert!(tr1.iter().all(|t| t.episode == 1));
    }

    #[test]
    fn single_step_episode_has_no_transitions() {
        let cfg = RunConfig { steps: 1, ..tiny() };
        let (log, tr) = run_episode(&cfg, 0, Policy::Random);
        assert_eq!(log.steps.len(), 1);
        assert!(tr.is_empty());
    }

    #[test]
    fn transitions_chain_consecutive_observations() {
        let (log, tr) = run_episode(&tiny(), 0, Policy::Random);
        for (i, t) in tr.iter().enumerate() {
            assert_eq!(t.s_prev, log.steps[i].state);
            assert_eq!(t.s_mid, log.steps[i + 1].state);
            assert_eq!(t.s_mid, log.steps[i].next_state);
            assert_eq!(t.s_next, log.steps[i + 1].next_state);
            assert_eq!(t.a_mid, log.steps[i + 1].action);
        }
    }

    #[test]
    fn zero_learning_episodes_never_train() {
        let cfg = RunConfig { episodes: 0, ..tiny() };
        let logs = learn(&cfg).unwrap();
        assert_eq!(logs.len(), 1);
        assert!(logs[0].loss_trace.is_empty());
    }

    #[test]
    fn return_is_sum_of_step_rewards() {
        let logs = learn(&tiny()).unwrap();
        for l in &logs {
            assert_eq!(l.total_return, l.steps.iter().map(|s| s.reward).sum::<f64>());
            assert_eq!(l.steps.len(), 12);
        }
        assert_eq!(logs[1].env_steps, 24);
    }

    #[test]
    fn oracle_holds_upright_start() {
        // start upright by running the oracle from a hand-set state
        let cfg = RunConfig {
            steps: 200,
            planner: PlannerSection {
                horizon: 10,
                particles: 1,
                population: 60,
                elites: 6,
                iterations: 2,
                ..PlannerSection::default()
            },
            ..tiny()
        };
        let kind = cfg.env;
        let model = TrueDynamics(kind);
        let bounds = cfg.bounds();
        let mpc = cfg.mpc_config();
        let reward = |m: &[f64], v: &[f64], a: &[f64]| kind.reward(m, v, a);
        let mut env = Env::with_state(kind, vec![0.0, 0.0]);
        let mut warm = PlanState::initial(mpc.horizon, &bounds, mpc.cem.init_std_fraction);
        let mut r = rng::stream(2, &[]);
        let mut total = 0.0;
        for _ in 0..cfg.steps {
            let d = mpc_act(&model, env.state(), &warm, &bounds, &mpc, &reward, &mut r).unwrap();
            warm = d.next_state;
            total += env.step(&d.action).1;
        }
        assert!(total > -5.0, "{total}");
    }

    #[test]
    fn config_validation_names_fields() {
        let mut cfg = RunConfig::default();
        cfg.model.subset_size = 5;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("model.subset_size") && msg.contains("0.5M < Q < M"), "{msg}");
        cfg.ablation = Ablation::Mc;
        assert!(cfg.validate().is_ok());
        cfg.ablation = Ablation::Full;
        cfg.model.subset_size = 3;
        cfg.planner.elites = 1000;
        assert!(cfg.validate().unwrap_err().to_string().starts_with("configuration error: planner"));
    }

    #[test]
    fn config_json_requires_version_and_rejects_unknown_keys() {
        assert!(RunConfig::from_json(r#"{"seed": 1}"#).unwrap_err().to_string().contains("version"));
        assert!(RunConfig::from_json(r#"{"version": 1, "sead": 1}"#).is_err());
        let cfg = RunConfig::from_json(r#"{"version": 1, "model": {"hidden": [16]}}"#).unwrap();
        assert_eq!(cfg.model.hidden, vec![16]);
        assert_eq!(cfg.planner, PlannerSection::default());
    }

    #[test]
    fn hash_depends_on_ablation() {
        let a = RunConfig::default();
        let b = RunConfig {
            ablation: Ablation::NoFec,
            ..a.clone()
        };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }
}
