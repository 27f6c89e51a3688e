//! Particle propagation through a learned (or analytic) dynamics model.
//!
//! A bundle holds `B × P` particles. Particle `(b, p)` is advanced by member
//! `b` under a mask chosen once per planning call. In [`PropagationMode::MeanOnly`]
//! the next particle state is the predicted mean, so predicted variances
//! only enter the reward; [`PropagationMode::Sampled`] instead draws the next
//! state from the predicted Gaussian (trajectory sampling).

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::model::Ensemble;
use crate::nn::{BatchPrediction, GaussianPrediction, MaskSet};
use crate::probe::{site, Probe};
use crate::rng;

/// Return assigned to candidates whose propagation blew up.
pub const WORST_RETURN: f64 = -1e18;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMode {
    MeanOnly,
    Sampled,
}

/// Reward `R(next-state mean, next-state variance, action)`.
pub type RewardFn<'a> = &'a (dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Sync);

/// Anything that can predict per-member, per-mask Gaussian state deltas.
pub trait ParticleModel: Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn members(&self) -> usize;
    /// Masks for `count` particles of one member.
    fn particle_masks(&self, count: usize, rng: &mut dyn RngCore) -> Result<Vec<MaskSet>>;
    /// Predicted delta mean and log-variance for each row.
    fn predict(&self, member: usize, mask: &MaskSet, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> BatchPrediction;
    /// Prediction over equal row blocks, block `j` under `masks[j]`.
    fn predict_blocks(&self, member: usize, masks: &[&MaskSet], states: ArrayView2<f64>, actions: ArrayView2<f64>) -> BatchPrediction {
        let block = states.nrows() / masks.len();
        let parts: Vec<BatchPrediction> = masks
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let r = ndarray::s![j * block..(j + 1) * block, ..];
                self.predict(member, m, states.slice(r), actions.slice(r))
            })
            .collect();
        let means: Vec<_> = parts.iter().map(|p| p.mean.view()).collect();
        let logvars: Vec<_> = parts.iter().map(|p| p.logvar.view()).collect();
        BatchPrediction {
            mean: ndarray::concatenate(ndarray::Axis(0), &means).expect("equal widths"),
            logvar: ndarray::concatenate(ndarray::Axis(0), &logvars).expect("equal widths"),
        }
    }
    fn probe(&self) -> Option<&Probe> {
        None
    }
}

impl ParticleModel for Ensemble {
    fn state_dim(&self) -> usize {
        Ensemble::state_dim(self)
    }

    fn action_dim(&self) -> usize {
        Ensemble::action_dim(self)
    }

    fn members(&self) -> usize {
        self.members.len()
    }

    fn particle_masks(&self, count: usize, rng: &mut dyn RngCore) -> Result<Vec<MaskSet>> {
        Ensemble::particle_masks(self, count, rng)
    }

    fn predict(&self, member: usize, mask: &MaskSet, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> BatchPrediction {
        self.predict_member(member, mask, states, actions)
    }

    fn predict_blocks(&self, member: usize, masks: &[&MaskSet], states: ArrayView2<f64>, actions: ArrayView2<f64>) -> BatchPrediction {
        let x = self.input_map.inputs(states, actions);
        self.members[member].forward_blocks(x.view(), masks)
    }

    fn probe(&self) -> Option<&Probe> {
        Some(Ensemble::probe(self))
    }
}

/// The environment's exact dynamics as a single deterministic member with
/// zero predicted variance.
#[derive(Clone, Copy, Debug)]
pub struct TrueDynamics(pub EnvKind);

impl ParticleModel for TrueDynamics {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.0.action_dim()
    }

    fn members(&self) -> usize {
        1
    }

    fn particle_masks(&self, count: usize, _rng: &mut dyn RngCore) -> Result<Vec<MaskSet>> {
        Ok(vec![MaskSet::none(); count])
    }

    fn predict(&self, _member: usize, _mask: &MaskSet, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> BatchPrediction {
        let mut mean = Array2::zeros(states.raw_dim());
        for ((mut m, s), a) in mean.rows_mut().into_iter().zip(states.rows()).zip(actions.rows()) {
            let s = s.to_vec();
            let next = self.0.transition(&s, &a.to_vec());
            for i in 0..s.len() {
                m[i] = next[i] - s[i];
            }
        }
        BatchPrediction {
            logvar: Array2::from_elem(states.raw_dim(), f64::NEG_INFINITY),
            mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleBundle {
    /// `[B·P × d_s]`, particle `b·P + p` in row order.
    pub states: Array2<f64>,
    pub member_of: Vec<usize>,
    pub masks: Vec<MaskSet>,
    pub particles_per_member: usize,
    pub step: usize,
}

impl ParticleBundle {
    pub fn len(&self) -> usize {
        self.member_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_of.is_empty()
    }
}

/// `B × P` particles at `state`, each with its member and a mask drawn for
/// this planning call.
pub fn init_bundle<M: ParticleModel + ?Sized>(
    model: &M,
    state: &[f64],
    particles: usize,
    rng: &mut dyn RngCore,
) -> Result<ParticleBundle> {
    if state.len() != model.state_dim() {
        return Err(Error::config("initial state has the wrong dimension"));
    }
    if state.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite initial state"));
    }
    if particles == 0 {
        return Err(Error::config("particles per member P must be ≥ 1"));
    }
    let b = model.members();
    let mut masks = Vec::with_capacity(b * particles);
    let mut member_of = Vec::with_capacity(b * particles);
    for m in 0..b {
        masks.extend(model.particle_masks(particles, rng)?);
        member_of.extend(std::iter::repeat_n(m, particles));
    }
    let mut states = Array2::zeros((b * particles, state.len()));
    for mut row in states.rows_mut() {
        row.assign(&ndarray::aview1(state));
    }
    Ok(ParticleBundle {
        states,
        member_of,
        masks,
        particles_per_member: particles,
        step: 0,
    })
}

fn record_mode(model: &(impl ParticleModel + ?Sized), mode: PropagationMode) {
    if let Some(p) = model.probe() {
        p.hit(match mode {
            PropagationMode::MeanOnly => site::PROPAGATE_MEAN,
            PropagationMode::Sampled => site::PROPAGATE_SAMPLE,
        });
    }
}

/// Advances every particle one step under `action`. Returns the next bundle
/// and each particle's predicted next-state Gaussian.
pub fn step_bundle<M: ParticleModel + ?Sized>(
    model: &M,
    bundle: &ParticleBundle,
    action: &[f64],
    mode: PropagationMode,
    rng: &mut dyn RngCore,
) -> Result<(ParticleBundle, Vec<GaussianPrediction>)> {
    if action.len() != model.action_dim() || action.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("action has the wrong dimension or is non-finite"));
    }
    record_mode(model, mode);
    let a = Array2::from_shape_vec((1, action.len()), action.to_vec()).expect("action row");
    let mut next = bundle.clone();
    next.step += 1;
    let mut gaussians = Vec::with_capacity(bundle.len());
    for k in 0..bundle.len() {
        let s = bundle.states.slice(ndarray::s![k..k + 1, ..]);
        let p = model.predict(bundle.member_of[k], &bundle.masks[k], s, a.view());
        let mean: Array1<f64> = &s.row(0) + &p.mean.row(0);
        let variance = p.logvar.row(0).mapv(f64::exp);
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Planning(format!("particle {k} diverged at step {}", bundle.step)));
        }
        let new_state = match mode {
            PropagationMode::MeanOnly => mean.clone(),
            PropagationMode::Sampled => sample_gaussian(&mean, &variance, rng),
        };
        next.states.row_mut(k).assign(&new_state);
        gaussians.push(GaussianPrediction { mean, variance });
    }
    Ok((next, gaussians))
}

fn sample_gaussian(mean: &Array1<f64>, variance: &Array1<f64>, rng: &mut dyn RngCore) -> Array1<f64> {
    let mut out = mean.clone();
    for (o, v) in out.iter_mut().zip(variance) {
        let z: f64 = StandardNormal.sample(rng);
        *o += v.sqrt() * z;
    }
    out
}

/// `(1/BP) Σ_b Σ_p R(μ^{b,p}, Σ^{b,p}, a)`
pub fn expected_reward(gaussians: &[GaussianPrediction], action: &[f64], reward: RewardFn<'_>) -> f64 {
    let total: f64 = gaussians
        .iter()
        .map(|g| reward(g.mean.as_slice().unwrap(), g.variance.as_slice().unwrap(), action))
        .sum();
    total / gaussians.len() as f64
}

/// Undiscounted sum of expected rewards along `actions` (`[H × d_a]`),
/// starting from `bundle`. Blow-ups return [`WORST_RETURN`].
pub fn rollout_return<M: ParticleModel + ?Sized>(
    model: &M,
    bundle: &ParticleBundle,
    actions: ArrayView2<f64>,
    mode: PropagationMode,
    reward: RewardFn<'_>,
    rng: &mut dyn RngCore,
) -> f64 {
    let mut current = bundle.clone();
    let mut total = 0.0;
    for a in actions.rows() {
        let a = a.to_vec();
        match step_bundle(model, &current, &a, mode, rng) {
            Ok((next, g)) => {
                total += expected_reward(&g, &a, reward);
                current = next;
            }
            Err(_) => return WORST_RETURN,
        }
    }
    if total.is_finite() {
        total
    } else {
        WORST_RETURN
    }
}

/// Returns of many candidate sequences from the same starting bundle,
/// evaluated together. Candidate `c` uses the random stream `(seed, c)` when
/// sampling, so each return equals
/// `rollout_return(.., &mut rng::stream(seed, &[c]))`.
pub fn candidate_returns<M: ParticleModel + ?Sized>(
    model: &M,
    bundle: &ParticleBundle,
    candidates: &[Array2<f64>],
    mode: PropagationMode,
    reward: RewardFn<'_>,
    seed: u64,
) -> Vec<f64> {
    let c = candidates.len();
    if c == 0 {
        return Vec::new();
    }
    let horizon = candidates[0].nrows();
    let d = bundle.states.ncols();
    let da = model.action_dim();
    let k_total = bundle.len();
    let mut rngs: Vec<_> = match mode {
        PropagationMode::Sampled => (0..c).map(|i| rng::stream(seed, &[i as u64])).collect(),
        PropagationMode::MeanOnly => Vec::new(),
    };
    // per particle: [C × d] states
    let mut states: Vec<Array2<f64>> = (0..k_total)
        .map(|k| {
            let mut s = Array2::zeros((c, d));
            for mut row in s.rows_mut() {
                row.assign(&bundle.states.row(k));
            }
            s
        })
        .collect();
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (k, &m) in bundle.member_of.iter().enumerate() {
        match groups.iter_mut().find(|(g, _)| *g == m) {
            Some((_, ks)) => ks.push(k),
            None => groups.push((m, vec![k])),
        }
    }
    let mut totals = vec![0.0; c];
    let mut step_rewards = vec![0.0; c];
    let mut dead = vec![false; c];
    let mut actions = Array2::zeros((c, da));
    let mut logvars: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); k_total];
    let mut var = vec![0.0; d];
    for h in 0..horizon {
        record_mode(model, mode);
        for (i, cand) in candidates.iter().enumerate() {
            actions.row_mut(i).assign(&cand.row(h));
        }
        for (member, ks) in &groups {
            let stacked_s: Vec<_> = ks.iter().map(|&k| states[k].view()).collect();
            let stacked_s = ndarray::concatenate(ndarray::Axis(0), &stacked_s).expect("equal widths");
            let stacked_a: Vec<_> = ks.iter().map(|_| actions.view()).collect();
            let stacked_a = ndarray::concatenate(ndarray::Axis(0), &stacked_a).expect("equal widths");
            let masks: Vec<&MaskSet> = ks.iter().map(|&k| &bundle.masks[k]).collect();
            let p = model.predict_blocks(*member, &masks, stacked_s.view(), stacked_a.view());
            for (j, &k) in ks.iter().enumerate() {
                let r = ndarray::s![j * c..(j + 1) * c, ..];
                states[k] += &p.mean.slice(r);
                logvars[k] = p.logvar.slice(r).to_owned();
            }
        }
        step_rewards.iter_mut().for_each(|r| *r = 0.0);
        for k in 0..k_total {
            let next = &mut states[k];
            for i in 0..c {
                let mut mean = next.row_mut(i);
                if mean.iter().any(|v| !v.is_finite()) {
                    dead[i] = true;
                    continue;
                }
                for (v, lv) in var.iter_mut().zip(logvars[k].row(i)) {
                    *v = lv.exp();
                }
                step_rewards[i] += reward(mean.as_slice().expect("contiguous row"), &var, actions.row(i).as_slice().expect("contiguous row"));
                if mode == PropagationMode::Sampled {
                    for (o, v) in mean.iter_mut().zip(&var) {
                        let z: f64 = StandardNormal.sample(&mut rngs[i]);
                        *o += v.sqrt() * z;
                    }
                }
            }
        }
        for i in 0..c {
            totals[i] += step_rewards[i] / k_total as f64;
        }
    }
    totals
        .into_iter()
        .zip(dead)
        .map(|(t, d)| if d || !t.is_finite() { WORST_RETURN } else { t })
        .collect()
}

/// Mean Euclidean distance over all particle pairs.
pub fn mean_pairwise_distance(states: ArrayView2<f64>) -> f64 {
    let n = states.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = &states.row(i) - &states.row(j);
            total += d.dot(&d).sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Particle trajectories of one bundle along an action sequence:
/// element `h` holds the states after `h + 1` steps.
pub fn propagate_trajectory<M: ParticleModel + ?Sized>(
    model: &M,
    bundle: &ParticleBundle,
    actions: ArrayView2<f64>,
    mode: PropagationMode,
    rng: &mut impl Rng,
) -> Result<Vec<Array2<f64>>> {
    let mut current = bundle.clone();
    let mut out = Vec::with_capacity(actions.nrows());
    for a in actions.rows() {
        let (next, _) = step_bundle(model, &current, &a.to_vec(), mode, rng)?;
        out.push(next.states.clone());
        current = next;
    }
    Ok(out)
}
