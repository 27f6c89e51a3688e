//! Probabilistic dynamics model: an ensemble of heteroscedastic networks
//! sharing an episode-fixed family of dropout masks.
//!
//! Networks predict state *deltas*: for a transition `(s, a) -> s'` the
//! regression target is `s' - s`. Inputs are the encoded state concatenated
//! with the action, standardized with statistics of the training set.
//!
//! Training minimizes, per member and per mini-batch,
//!
//! ```text
//! (1/N) Σ_n Σ_q [ L(x_t, y_t; z^q) + L'(x̂_{t+1}^q, y_{t+1}; z̄^q) ]
//!   + λ Σ_l (‖W_l‖² + ‖b_l‖²) + c (Σ max_logvar - Σ min_logvar)
//! ```
//!
//! where `L = Eᵀ Σ⁻¹ E + log det Σ`, the Q masks `z^q` are drawn from the
//! family without replacement, and the second step is evaluated at the
//! model's own one-step mean so that compounding error is penalized.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Architecture, BatchPrediction, MaskSet, NetworkParams, Optimizer, OptimizerKind, ParamGrads};
use crate::probe::{site, Probe};
use crate::rng;

/// How dropout masks are chosen during training and prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    /// Q-of-M subsets of the episode-fixed mask family.
    Restrictive,
    /// Fresh Bernoulli masks on every call.
    Fresh,
    /// No dropout; diversity comes from the ensemble alone.
    Disabled,
}

/// Maps raw environment states to network features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateEncoding {
    Identity,
    /// State component 0 is an angle and is replaced by `(sin, cos)`.
    LeadingAngle,
}

impl StateEncoding {
    pub fn feature_dim(self, state_dim: usize) -> usize {
        match self {
            StateEncoding::Identity => state_dim,
            StateEncoding::LeadingAngle => state_dim + 1,
        }
    }

    pub fn encode(self, state: &[f64], out: &mut [f64]) {
        match self {
            StateEncoding::Identity => out.copy_from_slice(state),
            StateEncoding::LeadingAngle => {
                out[0] = state[0].sin();
                out[1] = state[0].cos();
                out[2..].copy_from_slice(&state[1..]);
            }
        }
    }

    /// Pulls a feature-space gradient back to state space.
    pub fn pullback(self, state: &[f64], d_features: &[f64], d_state: &mut [f64]) {
        match self {
            StateEncoding::Identity => d_state.copy_from_slice(d_features),
            StateEncoding::LeadingAngle => {
                d_state[0] = d_features[0] * state[0].cos() - d_features[1] * state[0].sin();
                d_state[1..].copy_from_slice(&d_features[2..]);
            }
        }
    }
}

/// Per-column standardization of network inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub const MIN_STD: f64 = 1e-8;

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(inputs: ArrayView2<f64>) -> Self {
        let n = inputs.nrows().max(1) as f64;
        let mean = inputs.sum_axis(Axis(0)) / n;
        let std = inputs
            .axis_iter(Axis(1))
            .zip(mean.iter())
            .map(|(col, m)| {
                let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                var.sqrt().max(Self::MIN_STD)
            })
            .collect();
        Self {
            mean: mean.to_vec(),
            std,
        }
    }

    pub fn apply(&self, inputs: &mut Array2<f64>) {
        for mut row in inputs.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Encoding plus normalization from `(state, action)` rows to network inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputMap {
    pub encoding: StateEncoding,
    pub state_dim: usize,
    pub action_dim: usize,
    pub normalizer: Normalizer,
}

impl InputMap {
    pub fn new(encoding: StateEncoding, state_dim: usize, action_dim: usize) -> Self {
        let dim = encoding.feature_dim(state_dim) + action_dim;
        Self {
            encoding,
            state_dim,
            action_dim,
            normalizer: Normalizer::identity(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoding.feature_dim(self.state_dim) + self.action_dim
    }

    pub fn raw(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
        let f = self.encoding.feature_dim(self.state_dim);
        let mut out = Array2::zeros((states.nrows(), self.input_dim()));
        for ((mut row, s), a) in out.rows_mut().into_iter().zip(states.rows()).zip(actions.rows()) {
            let row = row.as_slice_mut().expect("contiguous row");
            self.encoding.encode(&s.to_vec(), &mut row[..f]);
            for (dst, src) in row[f..].iter_mut().zip(a.iter()) {
                *dst = *src;
            }
        }
        out
    }

    pub fn inputs(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
        let mut x = self.raw(states, actions);
        self.normalizer.apply(&mut x);
        x
    }

    /// Gradient with respect to `states` given the gradient with respect to
    /// the normalized inputs built from them.
    pub fn state_pullback(&self, states: ArrayView2<f64>, d_inputs: ArrayView2<f64>) -> Array2<f64> {
        let f = self.encoding.feature_dim(self.state_dim);
        let mut out = Array2::zeros((states.nrows(), self.state_dim));
        let mut d_feat = vec![0.0; f];
        for ((mut d_s, s), d_x) in out.rows_mut().into_iter().zip(states.rows()).zip(d_inputs.rows()) {
            for (k, v) in d_feat.iter_mut().enumerate() {
                *v = d_x[k] / self.normalizer.std[k];
            }
            self.encoding
                .pullback(&s.to_vec(), &d_feat, d_s.as_slice_mut().expect("contiguous row"));
        }
        out
    }
}

/// One two-step training sample `{s_{t-1}, a_{t-1}, s_t, a_t, s_{t+1}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStepTransition {
    pub s_prev: Vec<f64>,
    pub a_prev: Vec<f64>,
    pub s_mid: Vec<f64>,
    pub a_mid: Vec<f64>,
    pub s_next: Vec<f64>,
    /// Rollout the sample came from.
    pub episode: u64,
}

impl TwoStepTransition {
    pub fn is_finite(&self) -> bool {
        [&self.s_prev, &self.a_prev, &self.s_mid, &self.a_mid, &self.s_next]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Column-stacked transitions.
#[derive(Clone, Debug)]
pub struct TransitionBatch {
    pub s_prev: Array2<f64>,
    pub a_prev: Array2<f64>,
    pub s_mid: Array2<f64>,
    pub a_mid: Array2<f64>,
    pub s_next: Array2<f64>,
}

impl TransitionBatch {
    pub fn gather(data: &[TwoStepTransition], idx: &[usize], state_dim: usize, action_dim: usize) -> Result<Self> {
        let n = idx.len();
        let mut b = Self {
            s_prev: Array2::zeros((n, state_dim)),
            a_prev: Array2::zeros((n, action_dim)),
            s_mid: Array2::zeros((n, state_dim)),
            a_mid: Array2::zeros((n, action_dim)),
            s_next: Array2::zeros((n, state_dim)),
        };
        for (r, &i) in idx.iter().enumerate() {
            let t = &data[i];
            if t.s_prev.len() != state_dim
                || t.s_mid.len() != state_dim
                || t.s_next.len() != state_dim
                || t.a_prev.len() != action_dim
                || t.a_mid.len() != action_dim
            {
                return Err(Error::input(format!("transition {i} has wrong dimensions")));
            }
            b.s_prev.row_mut(r).assign(&ndarray::aview1(&t.s_prev));
            b.a_prev.row_mut(r).assign(&ndarray::aview1(&t.a_prev));
            b.s_mid.row_mut(r).assign(&ndarray::aview1(&t.s_mid));
            b.a_mid.row_mut(r).assign(&ndarray::aview1(&t.a_mid));
            b.s_next.row_mut(r).assign(&ndarray::aview1(&t.s_next));
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.s_prev.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The M mask sets fixed for one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskFamily {
    pub sets: Vec<MaskSet>,
    pub episode_id: u64,
}

impl MaskFamily {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// Draws `m` independent Bernoulli(`keep_rate`) mask sets.
///
/// With `mask_input == false` the network input is never dropped; only
/// hidden-layer inputs are masked.
pub fn sample_mask_family<R: Rng + ?Sized>(
    m: usize,
    arch: &Architecture,
    keep_rate: f64,
    mask_input: bool,
    episode_id: u64,
    rng: &mut R,
) -> Result<MaskFamily> {
    if m < 2 {
        return Err(Error::config(format!(
            "mask family size M must be ≥ 2 so that 0.5M < Q < M is satisfiable, got {m}"
        )));
    }
    let sets = (0..m)
        .map(|_| sample_mask(arch, keep_rate, mask_input, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskFamily { sets, episode_id })
}

pub fn sample_mask<R: Rng + ?Sized>(arch: &Architecture, keep_rate: f64, mask_input: bool, rng: &mut R) -> Result<MaskSet> {
    let mut mask = MaskSet::sample(arch, keep_rate, rng)?;
    if !mask_input {
        mask.keep[0].fill(1.0);
    }
    Ok(mask)
}

/// Checks the restrictive subset constraint `0.5M < Q < M`.
pub fn validate_subset_size(m: usize, q: usize) -> Result<()> {
    if 2 * q <= m || q >= m {
        return Err(Error::config(format!(
            "subset size Q={q} violates 0.5M < Q < M with M={m}"
        )));
    }
    Ok(())
}

/// Q distinct family indices, uniformly without replacement.
pub fn draw_q_subset<R: Rng + ?Sized>(family: &MaskFamily, q: usize, rng: &mut R) -> Result<Vec<usize>> {
    validate_subset_size(family.len(), q)?;
    Ok(index::sample(rng, family.len(), q).into_vec())
}

/// For each `i` in `subset`, a different family index drawn uniformly.
fn draw_partners<R: Rng + ?Sized>(m: usize, subset: &[usize], rng: &mut R) -> Vec<usize> {
    subset
        .iter()
        .map(|&i| {
            if m < 2 {
                return i;
            }
            let j = rng.random_range(0..m - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect()
}

/// Per-row `Σ_i (e_i² / σ_i² + log σ_i²)`.
pub fn gaussian_nll_rows(mean: ArrayView2<f64>, logvar: ArrayView2<f64>, target: ArrayView2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(mean.nrows());
    for (r, o) in out.iter_mut().enumerate() {
        *o = (0..mean.ncols())
            .map(|i| {
                let e = mean[[r, i]] - target[[r, i]];
                e * e * (-logvar[[r, i]]).exp() + logvar[[r, i]]
            })
            .sum();
    }
    out
}

/// `(d/dmean, d/dlogvar)` of [`gaussian_nll_rows`], scaled by `scale`.
fn gaussian_nll_grads(pred: &BatchPrediction, error: &Array2<f64>, scale: f64) -> (Array2<f64>, Array2<f64>) {
    let inv_var = pred.logvar.mapv(|lv| (-lv).exp());
    let d_mean = error * &inv_var * (2.0 * scale);
    let d_logvar = (1.0 - &(error * error * &inv_var)) * scale;
    (d_mean, d_logvar)
}

fn first_nonfinite(rows: &Array1<f64>) -> Option<usize> {
    rows.iter().position(|v| !v.is_finite())
}

/// Loss value with its gradient for one network.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub value: f64,
    pub grads: ParamGrads,
}

/// Mask pairs for one mini-batch: first-step mask `z^q` and second-step mask `z̄^q`.
pub type MaskPairs = Vec<(MaskSet, MaskSet)>;

/// Batch mean over samples of `Σ_q (Eᵀ Σ⁻¹ E + log det Σ)` on plain
/// input/target pairs. `inputs` are already normalized.
pub fn nll_loss(
    member: &NetworkParams,
    masks: &[MaskSet],
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> Result<LossEval> {
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::Precondition("empty batch".into()));
    }
    let scale = 1.0 / n as f64;
    let mut grads = ParamGrads::zeros_like(member);
    let mut value = 0.0;
    for mask in masks {
        let tape = member.forward_train(inputs, mask);
        let pred = &tape.prediction;
        let rows = gaussian_nll_rows(pred.mean.view(), pred.logvar.view(), targets);
        if let Some(i) = first_nonfinite(&rows) {
            return Err(Error::Numerical {
                context: "one-step likelihood",
                index: i,
            });
        }
        value += rows.sum() * scale;
        let error = &pred.mean - &targets;
        let (dm, dl) = gaussian_nll_grads(pred, &error, scale);
        tape.backward(member, mask, dm.view(), dl.view(), &mut grads);
    }
    Ok(LossEval { value, grads })
}

/// Breakdown of the fitting-error-correction loss.
#[derive(Clone, Debug)]
pub struct FecEval {
    /// One-step term `L`, batch mean summed over masks.
    pub first: f64,
    /// Two-step term `L'`; zero when the second step is disabled.
    pub second: f64,
    pub grads: ParamGrads,
}

impl FecEval {
    pub fn value(&self) -> f64 {
        self.first + self.second
    }
}

/// Two-step loss over a transition batch. With `two_step == false` only the
/// one-step term is evaluated.
///
/// The second step feeds the predicted state `s_{t-1} + μ(x_{t-1}; z^q)`
/// together with `a_t` through the network under `z̄^q` and compares the
/// resulting two-step state with `s_{t+1}`; gradients flow through the
/// first-step mean.
pub fn fec_loss(
    member: &NetworkParams,
    input_map: &InputMap,
    pairs: &[(MaskSet, MaskSet)],
    batch: &TransitionBatch,
    two_step: bool,
) -> Result<FecEval> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Precondition("empty batch".into()));
    }
    let scale = 1.0 / n as f64;
    let x1 = input_map.inputs(batch.s_prev.view(), batch.a_prev.view());
    let y1 = &batch.s_mid - &batch.s_prev;
    let y2 = &batch.s_next - &batch.s_prev;
    let mut grads = ParamGrads::zeros_like(member);
    let (mut first, mut second) = (0.0, 0.0);

    for (z, z_bar) in pairs {
        let tape1 = member.forward_train(x1.view(), z);
        let p1 = &tape1.prediction;
        let rows1 = gaussian_nll_rows(p1.mean.view(), p1.logvar.view(), y1.view());
        if let Some(i) = first_nonfinite(&rows1) {
            return Err(Error::Numerical {
                context: "first-step likelihood",
                index: i,
            });
        }
        first += rows1.sum() * scale;
        let e1 = &p1.mean - &y1;
        let (mut d_mean1, d_lv1) = gaussian_nll_grads(p1, &e1, scale);

        if two_step {
            let s_hat = &batch.s_prev + &p1.mean;
            let x2 = input_map.inputs(s_hat.view(), batch.a_mid.view());
            let tape2 = member.forward_train(x2.view(), z_bar);
            let p2 = &tape2.prediction;
            // two-step state error: s_prev + μ1 + μ2 - s_next
            let e2 = &p1.mean + &p2.mean - &y2;
            let rows2 = gaussian_nll_rows(e2.view(), p2.logvar.view(), Array2::zeros(e2.raw_dim()).view());
            if let Some(i) = first_nonfinite(&rows2) {
                return Err(Error::Numerical {
                    context: "second-step likelihood",
                    index: i,
                });
            }
            second += rows2.sum() * scale;
            let (d_mean2, d_lv2) = gaussian_nll_grads(p2, &e2, scale);
            let d_x2 = tape2.backward(member, z_bar, d_mean2.view(), d_lv2.view(), &mut grads);
            let d_s_hat = input_map.state_pullback(s_hat.view(), d_x2.view());
            d_mean1 += &d_mean2;
            d_mean1 += &d_s_hat;
        }
        tape1.backward(member, z, d_mean1.view(), d_lv1.view(), &mut grads);
    }
    Ok(FecEval { first, second, grads })
}

/// Regularization and log-variance-bound coefficients of the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    /// λ, shared by all layers.
    pub weight_decay: f64,
    /// Coefficient of `Σ max_logvar - Σ min_logvar`.
    pub logvar_bound: f64,
}

impl Default for Penalties {
    fn default() -> Self {
        Self {
            weight_decay: 1e-4,
            logvar_bound: 0.01,
        }
    }
}

/// Adds the weight penalty and the bound term to a data loss.
pub fn add_penalties(member: &NetworkParams, penalties: Penalties, eval: &mut LossEval) {
    eval.value += penalties.weight_decay * member.weight_sq_norm()
        + penalties.logvar_bound * (member.max_logvar.sum() - member.min_logvar.sum());
    eval.grads.add_weight_decay(member, 2.0 * penalties.weight_decay);
    eval.grads.max_logvar += penalties.logvar_bound;
    eval.grads.min_logvar -= penalties.logvar_bound;
}

/// Full training objective for one member on one mini-batch.
pub fn total_loss(
    member: &NetworkParams,
    input_map: &InputMap,
    pairs: &[(MaskSet, MaskSet)],
    batch: &TransitionBatch,
    two_step: bool,
    penalties: Penalties,
) -> Result<LossEval> {
    let fec = fec_loss(member, input_map, pairs, batch, two_step)?;
    let mut eval = LossEval {
        value: fec.value(),
        grads: fec.grads,
    };
    add_penalties(member, penalties, &mut eval);
    Ok(eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    /// B
    pub ensemble_size: usize,
    /// M
    pub family_size: usize,
    /// Q
    pub subset_size: usize,
    pub keep_rate: f64,
    pub dropout: DropoutMode,
    /// Whether the network input itself is masked.
    pub mask_input: bool,
    pub two_step_loss: bool,
    /// Resample each member's epoch with replacement.
    pub bootstrap: bool,
    pub penalties: Penalties,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![200, 200, 200],
            ensemble_size: 5,
            family_size: 5,
            subset_size: 3,
            keep_rate: 0.9,
            dropout: DropoutMode::Restrictive,
            mask_input: false,
            two_step_loss: true,
            bootstrap: false,
            penalties: Penalties::default(),
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(Error::config("ensemble size B must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be ≥ 1"));
        }
        if !(self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            return Err(Error::config(format!("keep_rate must lie in (0, 1], got {}", self.keep_rate)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.penalties.weight_decay < 0.0 || self.penalties.logvar_bound < 0.0 {
            return Err(Error::config("penalty coefficients must be ≥ 0"));
        }
        match self.dropout {
            DropoutMode::Restrictive => validate_subset_size(self.family_size, self.subset_size)?,
            DropoutMode::Fresh => {
                if self.subset_size == 0 {
                    return Err(Error::config("subset size Q must be ≥ 1"));
                }
            }
            DropoutMode::Disabled => {}
        }
        if self.dropout != DropoutMode::Disabled && self.family_size < 2 {
            return Err(Error::config("mask family size M must be ≥ 2"));
        }
        Ok(())
    }
}

/// Per-member, per-epoch mean mini-batch loss.
pub type LossTrace = Vec<Vec<f64>>;

/// Summary of the ensemble's predictive distribution at one input.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSummary {
    pub mean: Array1<f64>,
    /// Std of the per-(member, mask) means.
    pub epistemic_std: Array1<f64>,
    /// Root of the average predicted variance.
    pub aleatoric_std: Array1<f64>,
}

impl PredictiveSummary {
    pub fn total_std(&self) -> Array1<f64> {
        (&self.epistemic_std * &self.epistemic_std + &self.aleatoric_std * &self.aleatoric_std).mapv(f64::sqrt)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Ensemble {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub input_map: InputMap,
    pub members: Vec<NetworkParams>,
    optimizers: Vec<Optimizer>,
    pub family: MaskFamily,
    #[serde(skip)]
    probe: Probe,
}

enum TrainData<'a> {
    Transitions(&'a [TwoStepTransition]),
    Regression {
        inputs: &'a Array2<f64>,
        targets: &'a Array2<f64>,
    },
}

impl TrainData<'_> {
    fn len(&self) -> usize {
        match self {
            TrainData::Transitions(d) => d.len(),
            TrainData::Regression { inputs, .. } => inputs.nrows(),
        }
    }
}

impl Ensemble {
    /// Independently initialized members and an initial mask family
    /// (episode 0).
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        encoding: StateEncoding,
        state_dim: usize,
        action_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let input_map = InputMap::new(encoding, state_dim, action_dim);
        let arch = Architecture::new(input_map.input_dim(), config.hidden.clone(), state_dim);
        let members = (0..config.ensemble_size)
            .map(|_| NetworkParams::init(&arch, rng))
            .collect::<Result<Vec<_>>>()?;
        let optimizers = (0..config.ensemble_size)
            .map(|_| Optimizer::new(config.optimizer, config.learning_rate))
            .collect();
        let mut ensemble = Self {
            family: MaskFamily {
                sets: Vec::new(),
                episode_id: 0,
            },
            config,
            arch,
            input_map,
            members,
            optimizers,
            probe: Probe::disabled(),
        };
        ensemble.resample_family(0, rng)?;
        Ok(ensemble)
    }

    pub fn set_probe(&mut self, probe: Probe) {
        self.probe = probe;
    }

    pub fn probe(&self) -> &Probe {
        &self.probe
    }

    pub fn state_dim(&self) -> usize {
        self.input_map.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.input_map.action_dim
    }

    /// Replaces the mask family. `episode_id` must strictly increase.
    pub fn resample_family<R: Rng + ?Sized>(&mut self, episode_id: u64, rng: &mut R) -> Result<()> {
        if !self.family.is_empty() && episode_id <= self.family.episode_id {
            return Err(Error::Precondition(format!(
                "mask family episode id must increase ({} -> {episode_id})",
                self.family.episode_id
            )));
        }
        self.family = match self.config.dropout {
            DropoutMode::Disabled => MaskFamily {
                sets: vec![MaskSet::ones(&self.arch)],
                episode_id,
            },
            _ => sample_mask_family(
                self.config.family_size,
                &self.arch,
                self.config.keep_rate,
                self.config.mask_input,
                episode_id,
                rng,
            )?,
        };
        Ok(())
    }

    /// Masks used for one prediction or one training batch.
    pub fn draw_masks<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<MaskSet>> {
        Ok(self.draw_mask_pairs(rng, false)?.into_iter().map(|(z, _)| z).collect())
    }

    fn draw_mask_pairs<R: Rng + ?Sized>(&self, rng: &mut R, partners: bool) -> Result<MaskPairs> {
        let cfg = &self.config;
        match cfg.dropout {
            DropoutMode::Restrictive => {
                self.probe.hit(site::MASKS_RESTRICTIVE);
                let subset = draw_q_subset(&self.family, cfg.subset_size, rng)?;
                let bars = if partners {
                    draw_partners(self.family.len(), &subset, rng)
                } else {
                    subset.clone()
                };
                Ok(subset
                    .into_iter()
                    .zip(bars)
                    .map(|(i, j)| (self.family.sets[i].clone(), self.family.sets[j].clone()))
                    .collect())
            }
            DropoutMode::Fresh => {
                self.probe.hit(site::MASKS_FRESH);
                (0..cfg.subset_size)
                    .map(|_| {
                        let z = sample_mask(&self.arch, cfg.keep_rate, cfg.mask_input, rng)?;
                        let z_bar = if partners {
                            sample_mask(&self.arch, cfg.keep_rate, cfg.mask_input, rng)?
                        } else {
                            z.clone()
                        };
                        Ok((z, z_bar))
                    })
                    .collect()
            }
            DropoutMode::Disabled => {
                self.probe.hit(site::MASKS_DISABLED);
                let ones = MaskSet::ones(&self.arch);
                Ok(vec![(ones.clone(), ones)])
            }
        }
    }

    /// Masks for `count` planning particles of one member: drawn with
    /// replacement from the family (restrictive), fresh (MC), or all-ones.
    pub fn particle_masks<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<MaskSet>> {
        match self.config.dropout {
            DropoutMode::Restrictive => Ok((0..count)
                .map(|_| self.family.sets[rng.random_range(0..self.family.len())].clone())
                .collect()),
            DropoutMode::Fresh => (0..count)
                .map(|_| sample_mask(&self.arch, self.config.keep_rate, self.config.mask_input, rng))
                .collect(),
            DropoutMode::Disabled => Ok(vec![MaskSet::ones(&self.arch); count]),
        }
    }

    /// Delta prediction of one member under one mask.
    pub fn predict_member(
        &self,
        member: usize,
        mask: &MaskSet,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> BatchPrediction {
        let x = self.input_map.inputs(states, actions);
        self.members[member].forward_batch(x.view(), mask)
    }

    /// Mean predicted delta for one `(state, action)`: the average over
    /// members of the average over each member's Q drawn masks.
    pub fn predict_mean<R: Rng + ?Sized>(&self, state: &[f64], action: &[f64], rng: &mut R) -> Result<Array1<f64>> {
        self.check_point(state, action)?;
        let s = Array2::from_shape_vec((1, state.len()), state.to_vec()).expect("state row");
        let a = Array2::from_shape_vec((1, action.len()), action.to_vec()).expect("action row");
        let mut acc = Array1::zeros(self.state_dim());
        let mut count = 0usize;
        for b in 0..self.members.len() {
            for mask in self.draw_masks(rng)? {
                acc += &self.predict_member(b, &mask, s.view(), a.view()).mean.row(0);
                count += 1;
            }
        }
        let out = acc / count as f64;
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                context: "predict_mean",
                index: i,
            });
        }
        Ok(out)
    }

    fn check_point(&self, state: &[f64], action: &[f64]) -> Result<()> {
        if state.len() != self.state_dim() || action.len() != self.action_dim() {
            return Err(Error::config("state/action dimension mismatch"));
        }
        if state.iter().chain(action).any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite state or action"));
        }
        Ok(())
    }

    /// Mean and spread over every (member, family mask) combination.
    pub fn predictive_summary(&self, state: &[f64], action: &[f64]) -> Result<PredictiveSummary> {
        self.check_point(state, action)?;
        let s = Array2::from_shape_vec((1, state.len()), state.to_vec()).expect("state row");
        let a = Array2::from_shape_vec((1, action.len()), action.to_vec()).expect("action row");
        let d = self.state_dim();
        let mut means = Vec::new();
        let mut var_acc = Array1::<f64>::zeros(d);
        for b in 0..self.members.len() {
            for mask in &self.family.sets {
                let p = self.predict_member(b, mask, s.view(), a.view());
                means.push(p.mean.row(0).to_owned());
                var_acc += &p.logvar.row(0).mapv(f64::exp);
            }
        }
        let k = means.len() as f64;
        let mean = means.iter().fold(Array1::zeros(d), |acc, m| acc + m) / k;
        let epistemic = means
            .iter()
            .fold(Array1::<f64>::zeros(d), |acc, m| acc + (m - &mean).mapv(|v| v * v))
            / k;
        Ok(PredictiveSummary {
            mean,
            epistemic_std: epistemic.mapv(f64::sqrt),
            aleatoric_std: (var_acc / k).mapv(f64::sqrt),
        })
    }

    /// Trains every member on the two-step dataset for `config.epochs`
    /// epochs after refreshing the input normalizer.
    pub fn train_on_dataset<R: RngCore + ?Sized>(&mut self, data: &[TwoStepTransition], rng: &mut R) -> Result<LossTrace> {
        if data.is_empty() {
            return Err(Error::Precondition("cannot train on an empty dataset".into()));
        }
        if let Some(i) = data.iter().position(|t| !t.is_finite()) {
            return Err(Error::input(format!("transition {i} contains non-finite values")));
        }
        let all: Vec<usize> = (0..data.len()).collect();
        let batch = TransitionBatch::gather(data, &all, self.state_dim(), self.action_dim())?;
        self.input_map.normalizer = Normalizer::fit(self.input_map.raw(batch.s_prev.view(), batch.a_prev.view()).view());
        self.train(TrainData::Transitions(data), rng)
    }

    /// Fits plain `(x, y)` pairs with the one-step likelihood. Requires an
    /// ensemble built with `action_dim == 0` and the identity encoding, so
    /// that states play the role of inputs.
    pub fn train_regression<R: RngCore + ?Sized>(
        &mut self,
        inputs: &Array2<f64>,
        targets: &Array2<f64>,
        rng: &mut R,
    ) -> Result<LossTrace> {
        if inputs.nrows() == 0 {
            return Err(Error::Precondition("cannot train on an empty dataset".into()));
        }
        if inputs.nrows() != targets.nrows()
            || inputs.ncols() != self.input_map.input_dim()
            || targets.ncols() != self.state_dim()
        {
            return Err(Error::config("regression data does not match the network shape"));
        }
        self.input_map.normalizer = Normalizer::fit(inputs.view());
        self.train(TrainData::Regression { inputs, targets }, rng)
    }

    fn train<R: RngCore + ?Sized>(&mut self, data: TrainData<'_>, rng: &mut R) -> Result<LossTrace> {
        let base = rng.next_u64();
        let cfg = self.config.clone();
        let n = data.len();
        let this = &*self;
        let results: Vec<Result<(NetworkParams, Optimizer, Vec<f64>)>> = (0..self.members.len())
            .into_par_iter()
            .map(|b| {
                let mut rng = rng::stream(base, &[b as u64]);
                let mut params = this.members[b].clone();
                let mut opt = this.optimizers[b].clone();
                let mut trace = Vec::with_capacity(cfg.epochs);
                let mut order: Vec<usize> = (0..n).collect();
                for _ in 0..cfg.epochs {
                    if cfg.bootstrap {
                        this.probe.hit(site::BOOTSTRAP);
                        order.iter_mut().for_each(|i| *i = rng.random_range(0..n));
                    } else {
                        order.shuffle(&mut rng);
                    }
                    let mut total = 0.0;
                    let mut batches = 0usize;
                    for chunk in order.chunks(cfg.batch_size) {
                        let eval = this.batch_loss(&params, &data, chunk, &mut rng)?;
                        opt.apply_update(&mut params, &eval.grads)?;
                        total += eval.value;
                        batches += 1;
                    }
                    trace.push(total / batches as f64);
                }
                if !params.is_finite() {
                    return Err(Error::Numerical {
                        context: "training diverged",
                        index: b,
                    });
                }
                Ok((params, opt, trace))
            })
            .collect();
        let mut traces = Vec::with_capacity(results.len());
        for (b, r) in results.into_iter().enumerate() {
            let (p, o, t) = r?;
            self.members[b] = p;
            self.optimizers[b] = o;
            traces.push(t);
        }
        Ok(traces)
    }

    fn batch_loss<R: Rng + ?Sized>(
        &self,
        params: &NetworkParams,
        data: &TrainData<'_>,
        idx: &[usize],
        rng: &mut R,
    ) -> Result<LossEval> {
        match data {
            TrainData::Transitions(d) => {
                let pairs = self.draw_mask_pairs(rng, self.config.two_step_loss)?;
                let batch = TransitionBatch::gather(d, idx, self.state_dim(), self.action_dim())?;
                self.probe.hit(if self.config.two_step_loss {
                    site::LOSS_TWO_STEP
                } else {
                    site::LOSS_ONE_STEP
                });
                total_loss(
                    params,
                    &self.input_map,
                    &pairs,
                    &batch,
                    self.config.two_step_loss,
                    self.config.penalties,
                )
            }
            TrainData::Regression { inputs, targets } => {
                let masks = self.draw_masks(rng)?;
                let mut x = inputs.select(Axis(0), idx);
                self.input_map.normalizer.apply(&mut x);
                let y = targets.select(Axis(0), idx);
                let mut eval = nll_loss(params, &masks, x.view(), y.view())?;
                add_penalties(params, self.config.penalties, &mut eval);
                Ok(eval)
            }
        }
    }

    /// One step of the deterministic mean model: next state averaged over
    /// every (member, family mask) combination.
    pub fn mean_model_step(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
        let mut acc = Array2::zeros(states.raw_dim());
        let mut count = 0usize;
        for b in 0..self.members.len() {
            for mask in &self.family.sets {
                acc += &self.predict_member(b, mask, states, actions).mean;
                count += 1;
            }
        }
        &states + &(acc / count as f64)
    }
}

/// Header names of the dataset CSV for the given dimension names.
pub fn dataset_header(state_names: &[&str], action_names: &[&str]) -> Vec<String> {
    let mut h = vec!["episode".to_string()];
    for (prefix, names) in [
        ("prev", state_names),
        ("prev", action_names),
        ("mid", state_names),
        ("mid", action_names),
        ("next", state_names),
    ] {
        h.extend(names.iter().map(|n| format!("{prefix}_{n}")));
    }
    h
}

/// Appends transitions to a CSV file, writing the header on creation.
pub fn append_dataset_csv(
    path: &Path,
    header: &[String],
    rows: &[TwoStepTransition],
) -> Result<()> {
    let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut out = String::new();
    if !exists {
        out.push_str(&header.join(","));
        out.push('\n');
    }
    for t in rows {
        let fields: Vec<String> = std::iter::once(t.episode.to_string())
            .chain(
                [&t.s_prev, &t.a_prev, &t.s_mid, &t.a_mid, &t.s_next]
                    .into_iter()
                    .flat_map(|v| v.iter().map(|x| format!("{x:?}"))),
            )
            .collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    file.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_dataset_csv(
    path: &Path,
    header: &[String],
    state_dim: usize,
    action_dim: usize,
) -> Result<Vec<TwoStepTransition>> {
    let mut reader = csv::Reader::from_path(path)?;
    let found: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::Checkpoint(format!("dataset header mismatch in {}", path.display())));
    }
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |_| Error::Checkpoint(format!("unparsable value in dataset row {}", line + 1));
        let episode: u64 = rec[0].parse().map_err(|_| Error::Checkpoint(format!("bad episode in row {}", line + 1)))?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|f| f.parse::<f64>().map_err(bad))
            .collect::<Result<Vec<_>>>()?;
        let mut it = vals.into_iter();
        let mut take = |k: usize| (&mut it).take(k).collect::<Vec<_>>();
        out.push(TwoStepTransition {
            s_prev: take(state_dim),
            a_prev: take(action_dim),
            s_mid: take(state_dim),
            a_mid: take(action_dim),
            s_next: take(state_dim),
            episode,
        });
    }
    Ok(out)
}

/// Stacks equal-length vectors into matrix rows.
pub fn stack_rows(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let mut out = Array2::zeros((rows.len(), d));
    for (mut r, v) in out.rows_mut().into_iter().zip(rows) {
        r.assign(&ndarray::aview1(v));
    }
    out
}
