//! Cross-entropy method over open-loop action sequences, and the
//! receding-horizon controller built on it.

use log::warn;
use ndarray::{Array2, Zip};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagation::{candidate_returns, init_bundle, ParticleModel, PropagationMode, RewardFn, WORST_RETURN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CemConfig {
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    /// Initial std as a fraction of half the action range.
    pub init_std_fraction: f64,
    /// Weight of the previous distribution in each refit.
    pub alpha: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            population: 400,
            elites: 40,
            iterations: 5,
            init_std_fraction: 1.0,
            alpha: 0.1,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(Error::config("cem.population must be ≥ 1"));
        }
        if self.elites == 0 || self.elites > self.population {
            return Err(Error::config(format!(
                "cem.elites must satisfy 1 ≤ elites ≤ population (got {} of {})",
                self.elites, self.population
            )));
        }
        if self.iterations == 0 {
            return Err(Error::config("cem.iterations must be ≥ 1"));
        }
        if !(self.init_std_fraction > 0.0 && self.init_std_fraction.is_finite()) {
            return Err(Error::config("cem.init_std_fraction must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("cem.alpha must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Box bounds on one action.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionBounds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBounds {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != high.len() || low.is_empty() || low.iter().zip(&high).any(|(l, h)| !(l < h)) {
            return Err(Error::config("action bounds need low < high per dimension"));
        }
        Ok(ActionBounds { low, high })
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn clip(&self, a: &mut [f64]) {
        for ((x, l), h) in a.iter_mut().zip(&self.low).zip(&self.high) {
            *x = x.clamp(*l, *h);
        }
    }

    fn clip_seq(&self, seq: &mut Array2<f64>) {
        for mut row in seq.rows_mut() {
            self.clip(row.as_slice_mut().unwrap());
        }
    }
}

/// Sampling distribution carried between planning calls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanState {
    /// `[H × d_a]`
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
}

impl PlanState {
    /// Zero mean with `fraction · (high − low) / 2` std.
    pub fn initial(horizon: usize, bounds: &ActionBounds, fraction: f64) -> Self {
        let da = bounds.dim();
        let mean = Array2::zeros((horizon, da));
        let std = Array2::from_shape_fn((horizon, da), |(_, j)| 0.5 * (bounds.high[j] - bounds.low[j]) * fraction);
        PlanState { mean, std }
    }

    pub fn horizon(&self) -> usize {
        self.mean.nrows()
    }

    /// Drops the first step and pads with a zero action.
    pub fn shifted(mean: &Array2<f64>, bounds: &ActionBounds, fraction: f64) -> Self {
        let mut s = PlanState::initial(mean.nrows(), bounds, fraction);
        let h = mean.nrows();
        if h > 1 {
            s.mean.slice_mut(ndarray::s![..h - 1, ..]).assign(&mean.slice(ndarray::s![1.., ..]));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct CemOutcome {
    /// Final distribution mean, clipped.
    pub plan: Array2<f64>,
    pub state: PlanState,
    /// Best candidate score seen up to and including each iteration.
    pub best_so_far: Vec<f64>,
    pub best_candidate: Array2<f64>,
    pub best_score: f64,
}

/// Maximizes `objective` over `[H × d_a]` sequences. The objective scores a
/// whole population at once. Draws are clipped to the bounds before scoring,
/// and the elite fit uses the clipped sequences.
pub fn cem_optimize<F, R>(
    mut objective: F,
    start: &PlanState,
    bounds: &ActionBounds,
    cfg: &CemConfig,
    rng: &mut R,
) -> Result<CemOutcome>
where
    F: FnMut(&[Array2<f64>]) -> Vec<f64>,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let (h, da) = start.mean.dim();
    if h == 0 {
        return Err(Error::config("planning horizon must be ≥ 1"));
    }
    if da != bounds.dim() || start.std.dim() != (h, da) {
        return Err(Error::config("plan state does not match the action dimension"));
    }
    let mut mean = start.mean.clone();
    let mut std = start.std.clone();
    let mut best_so_far = Vec::with_capacity(cfg.iterations);
    let mut best_score = f64::NEG_INFINITY;
    let mut best_candidate = mean.clone();
    bounds.clip_seq(&mut best_candidate);

    for _ in 0..cfg.iterations {
        let raw: Vec<Array2<f64>> = (0..cfg.population)
            .map(|_| {
                Array2::from_shape_fn((h, da), |(i, j)| {
                    let z: f64 = StandardNormal.sample(rng);
                    mean[[i, j]] + std[[i, j]] * z
                })
            })
            .collect();
        let population: Vec<Array2<f64>> = raw
            .iter()
            .map(|r| {
                let mut c = r.clone();
                bounds.clip_seq(&mut c);
                c
            })
            .collect();
        let scores = objective(&population);
        if scores.len() != population.len() {
            return Err(Error::Planning("objective returned the wrong number of scores".into()));
        }
        let scores: Vec<f64> = scores.into_iter().map(|s| if s.is_nan() { WORST_RETURN } else { s }).collect();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        if scores[order[0]] > best_score {
            best_score = scores[order[0]];
            best_candidate = population[order[0]].clone();
        }
        best_so_far.push(best_score);

        let elites = &order[..cfg.elites];
        let n = elites.len() as f64;
        let mut e_mean = Array2::<f64>::zeros((h, da));
        for &i in elites {
            e_mean += &population[i];
        }
        e_mean /= n;
        let mut e_var = Array2::<f64>::zeros((h, da));
        for &i in elites {
            let d = &population[i] - &e_mean;
            e_var += &(&d * &d);
        }
        e_var /= n;
        let a = cfg.alpha;
        Zip::from(&mut mean).and(&e_mean).for_each(|m, &e| *m = a * *m + (1.0 - a) * e);
        Zip::from(&mut std).and(&e_var).for_each(|s, &v| *s = a * *s + (1.0 - a) * v.sqrt());
    }

    let mut plan = mean.clone();
    bounds.clip_seq(&mut plan);
    Ok(CemOutcome {
        plan,
        state: PlanState { mean, std },
        best_so_far,
        best_candidate,
        best_score,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub particles: usize,
    pub propagation: PropagationMode,
    pub cem: CemConfig,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 25,
            particles: 4,
            propagation: PropagationMode::MeanOnly,
            cem: CemConfig::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("planner.horizon must be ≥ 1"));
        }
        if self.particles == 0 {
            return Err(Error::config("planner.particles must be ≥ 1"));
        }
        self.cem.validate()
    }
}

#[derive(Clone, Debug)]
pub struct MpcDecision {
    pub action: Vec<f64>,
    /// Warm start for the next call.
    pub next_state: PlanState,
    pub planned_return: f64,
    /// Planning failed and a fallback zero action was used.
    pub fallback: bool,
}

/// One receding-horizon step: optimize from `state`, apply the first action,
/// and return the shifted warm start.
pub fn mpc_act<M: ParticleModel + ?Sized>(
    model: &M,
    state: &[f64],
    warm: &PlanState,
    bounds: &ActionBounds,
    cfg: &MpcConfig,
    reward: RewardFn<'_>,
    rng: &mut dyn RngCore,
) -> Result<MpcDecision> {
    cfg.validate()?;
    if warm.horizon() != cfg.horizon {
        return Err(Error::config("warm-start horizon differs from planner.horizon"));
    }
    let bundle = init_bundle(model, state, cfg.particles, rng)?;
    let sample_seed = rng.next_u64();
    let objective = |cands: &[Array2<f64>]| candidate_returns(model, &bundle, cands, cfg.propagation, reward, sample_seed);
    let outcome = cem_optimize(objective, warm, bounds, &cfg.cem, rng)?;
    if outcome.best_score <= WORST_RETURN || !outcome.plan.iter().all(|v| v.is_finite()) {
        warn!("planning failed: every candidate diverged; applying zero action");
        let mut action = vec![0.0; bounds.dim()];
        bounds.clip(&mut action);
        return Ok(MpcDecision {
            action,
            next_state: PlanState::initial(cfg.horizon, bounds, cfg.cem.init_std_fraction),
            planned_return: WORST_RETURN,
            fallback: true,
        });
    }
    let action = outcome.plan.row(0).to_vec();
    Ok(MpcDecision {
        action,
        next_state: PlanState::shifted(&outcome.plan, bounds, cfg.cem.init_std_fraction),
        planned_return: outcome.best_score,
        fallback: false,
    })
}
