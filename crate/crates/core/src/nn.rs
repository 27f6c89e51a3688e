//! Small differentiable feed-forward engine.
//!
//! Networks map an input row to a diagonal Gaussian: the linear output head
//! is split into a mean half and a raw log-variance half, and the raw half is
//! squashed between the learnable `min_logvar` / `max_logvar` bounds with two
//! softplus steps. Dropout masks multiply each layer's *input* before the
//! weight product; no inverted-dropout rescaling is applied.
//!
//! Gradients are computed by hand-written reverse mode over a [`Tape`]
//! recorded by [`NetworkParams::forward_train`]. The engine only covers what
//! the dynamics losses need: batched dense layers, a saturating hidden
//! activation, the bounded log-variance head, and gradients with respect to
//! both parameters and inputs.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Smallest allowed gap between `max_logvar` and `min_logvar`.
pub const MIN_LOGVAR_SEPARATION: f64 = 1e-2;

pub const INIT_MAX_LOGVAR: f64 = 0.5;
pub const INIT_MIN_LOGVAR: f64 = -10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - 2.0 / ((2.0 * x).exp() + 1.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Squashes a raw log-variance into the soft band `[min_lv, max_lv]`.
///
/// The lower bound is applied first, then the upper one, so the result never
/// exceeds `max_lv`; it can fall below `min_lv` by at most
/// `ln(1 + exp(-(max_lv - min_lv)))`.
#[inline]
pub fn bound_logvar(raw: f64, max_lv: f64, min_lv: f64) -> f64 {
    let lower = min_lv + softplus(raw - min_lv);
    max_lv - softplus(max_lv - lower)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub state_dim: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, state_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            state_dim,
            activation: Activation::Tanh,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.state_dim
    }

    /// `(in, out)` for every weight layer, head included.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden);
        widths.push(self.output_dim());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Input width of each layer; one dropout mask per entry.
    pub fn mask_widths(&self) -> Vec<usize> {
        self.layer_dims().into_iter().map(|(i, _)| i).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|(i, o)| i * o + o)
            .sum::<usize>()
            + 2 * self.state_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.state_dim == 0 {
            return Err(Error::config("network input and state dimensions must be ≥ 1"));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::config("hidden layer widths must be ≥ 1"));
        }
        Ok(())
    }
}

/// Binary keep vectors, one per layer input. An empty set means "no dropout".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub keep: Vec<Array1<f64>>,
    pub keep_rate: f64,
}

impl MaskSet {
    pub fn none() -> Self {
        Self {
            keep: Vec::new(),
            keep_rate: 1.0,
        }
    }

    pub fn ones(arch: &Architecture) -> Self {
        Self {
            keep: arch
                .mask_widths()
                .into_iter()
                .map(Array1::ones)
                .collect(),
            keep_rate: 1.0,
        }
    }

    /// Independent Bernoulli(`keep_rate`) entries for every layer input.
    pub fn sample<R: Rng + ?Sized>(arch: &Architecture, keep_rate: f64, rng: &mut R) -> Result<Self> {
        if !(keep_rate > 0.0 && keep_rate <= 1.0) {
            return Err(Error::config(format!("keep_rate must lie in (0, 1], got {keep_rate}")));
        }
        let keep = arch
            .mask_widths()
            .into_iter()
            .map(|w| {
                Array1::from_iter((0..w).map(|_| {
                    if keep_rate >= 1.0 || rng.random::<f64>() < keep_rate {
                        1.0
                    } else {
                        0.0
                    }
                }))
            })
            .collect();
        Ok(Self { keep, keep_rate })
    }

    pub fn is_none(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        if self.is_none() {
            return Ok(());
        }
        let widths = arch.mask_widths();
        if widths.len() != self.keep.len() {
            return Err(Error::config(format!(
                "mask has {} layers, network has {}",
                self.keep.len(),
                widths.len()
            )));
        }
        for (l, (z, &w)) in self.keep.iter().zip(&widths).enumerate() {
            if z.len() != w {
                return Err(Error::config(format!(
                    "mask for layer {l} has width {}, expected {w}",
                    z.len()
                )));
            }
            if z.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::config(format!("mask for layer {l} is not binary")));
            }
        }
        Ok(())
    }

    /// Fraction of kept entries over all layers.
    pub fn kept_fraction(&self) -> f64 {
        let (kept, total) = self
            .keep
            .iter()
            .fold((0.0, 0usize), |(k, n), z| (k + z.sum(), n + z.len()));
        if total == 0 {
            1.0
        } else {
            kept / total as f64
        }
    }
}

/// One diagonal Gaussian prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrediction {
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
}

/// Row-wise predictions for a batch of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPrediction {
    pub mean: Array2<f64>,
    pub logvar: Array2<f64>,
}

impl BatchPrediction {
    pub fn variance(&self) -> Array2<f64> {
        self.logvar.mapv(f64::exp)
    }

    pub fn row(&self, i: usize) -> GaussianPrediction {
        GaussianPrediction {
            mean: self.mean.row(i).to_owned(),
            variance: self.logvar.row(i).mapv(f64::exp),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[in × out]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub max_logvar: Array1<f64>,
    pub min_logvar: Array1<f64>,
}

/// Intermediate values of a batched forward pass, consumed by
/// [`Tape::backward`].
#[derive(Debug)]
pub struct Tape {
    /// Masked input of every layer (`ŷ_{l-1} ∘ z_l`).
    masked_inputs: Vec<Array2<f64>>,
    /// Post-activation outputs of hidden layers.
    hidden_outputs: Vec<Array2<f64>>,
    raw_logvar: Array2<f64>,
    lower_logvar: Array2<f64>,
    pub prediction: BatchPrediction,
}

impl NetworkParams {
    /// Random initialization: weights ~ N(0, 1/in), zero biases, log-variance
    /// bounds at their default band.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(i, o)| {
                let scale = (1.0 / i as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_simple_fn((i, o), || {
                        let z: f64 = StandardNormal.sample(rng);
                        z * scale
                    }),
                    bias: Array1::zeros(o),
                }
            })
            .collect();
        Ok(Self {
            layers,
            activation: arch.activation,
            max_logvar: Array1::from_elem(arch.state_dim, INIT_MAX_LOGVAR),
            min_logvar: Array1::from_elem(arch.state_dim, INIT_MIN_LOGVAR),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.max_logvar.len()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            hidden: self.layers[..self.layers.len() - 1]
                .iter()
                .map(|l| l.weight.ncols())
                .collect(),
            state_dim: self.state_dim(),
            activation: self.activation,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum::<usize>()
            + 2 * self.state_dim()
    }

    /// Single-input forward pass with full precondition checks.
    pub fn forward(&self, input: &[f64], mask: &MaskSet) -> Result<GaussianPrediction> {
        if input.len() != self.input_dim() {
            return Err(Error::config(format!(
                "input has {} entries, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite network input"));
        }
        mask.validate(&self.architecture())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row shape");
        Ok(self.forward_batch(x, mask).row(0))
    }

    /// Batched forward pass without recording intermediates.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>, mask: &MaskSet) -> BatchPrediction {
        self.forward_blocks(inputs, &[mask])
    }

    /// Forward pass over `masks.len()` equal row blocks, block `j` using
    /// `masks[j]`.
    pub fn forward_blocks(&self, inputs: ArrayView2<f64>, masks: &[&MaskSet]) -> BatchPrediction {
        let n = inputs.nrows();
        assert!(!masks.is_empty() && n % masks.len() == 0, "rows must split evenly into mask blocks");
        let block = n / masks.len();
        let last = self.layers.len() - 1;
        let mut y = inputs.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            for (j, m) in masks.iter().enumerate() {
                if let Some(z) = m.keep.get(l) {
                    let mut rows = y.slice_mut(ndarray::s![j * block..(j + 1) * block, ..]);
                    rows *= z;
                }
            }
            let mut a = y.dot(&layer.weight);
            a += &layer.bias;
            if l < last {
                let act = self.activation;
                a.mapv_inplace(|v| act.apply(v));
            }
            y = a;
        }
        let d = self.state_dim();
        let mean = y.slice(ndarray::s![.., ..d]).to_owned();
        let mut logvar = y.slice(ndarray::s![.., d..]).to_owned();
        for mut row in logvar.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = bound_logvar(*v, self.max_logvar[i], self.min_logvar[i]);
            }
        }
        BatchPrediction { mean, logvar }
    }

    /// Batched forward pass that records a [`Tape`] for gradients.
    pub fn forward_train(&self, inputs: ArrayView2<f64>, mask: &MaskSet) -> Tape {
        let last = self.layers.len() - 1;
        let mut masked_inputs = Vec::with_capacity(self.layers.len());
        let mut hidden_outputs = Vec::with_capacity(last);
        let mut y = inputs.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(z) = mask.keep.get(l) {
                y *= z;
            }
            let mut a = y.dot(&layer.weight);
            a += &layer.bias;
            masked_inputs.push(y);
            if l < last {
                let act = self.activation;
                a.mapv_inplace(|v| act.apply(v));
                hidden_outputs.push(a.clone());
            }
            y = a;
        }
        let d = self.state_dim();
        let n = y.nrows();
        let mean = y.slice(ndarray::s![.., ..d]).to_owned();
        let raw_logvar = y.slice(ndarray::s![.., d..]).to_owned();
        let mut lower_logvar = Array2::zeros((n, d));
        let mut logvar = Array2::zeros((n, d));
        for r in 0..n {
            for i in 0..d {
                let lower = self.min_logvar[i] + softplus(raw_logvar[[r, i]] - self.min_logvar[i]);
                lower_logvar[[r, i]] = lower;
                logvar[[r, i]] = self.max_logvar[i] - softplus(self.max_logvar[i] - lower);
            }
        }
        Tape {
            masked_inputs,
            hidden_outputs,
            raw_logvar,
            lower_logvar,
            prediction: BatchPrediction { mean, logvar },
        }
    }

    /// Flattened view: per layer the weight (row-major) then the bias, then
    /// `max_logvar`, then `min_logvar`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend(layer.weight.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out.extend(self.max_logvar.iter().copied());
        out.extend(self.min_logvar.iter().copied());
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::config(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut it = flat.iter().copied();
        for layer in &mut self.layers {
            layer.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            layer.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        self.max_logvar.iter_mut().for_each(|v| *v = it.next().unwrap());
        self.min_logvar.iter_mut().for_each(|v| *v = it.next().unwrap());
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// Σ_l (‖W_l‖² + ‖b_l‖²)
    pub fn weight_sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().map(|w| w * w).sum::<f64>() + l.bias.iter().map(|b| b * b).sum::<f64>())
            .sum()
    }

    /// Pushes the log-variance bounds apart where they are closer than
    /// [`MIN_LOGVAR_SEPARATION`], keeping their midpoint.
    pub fn reproject_bounds(&mut self) {
        for (hi, lo) in self.max_logvar.iter_mut().zip(self.min_logvar.iter_mut()) {
            if *hi - *lo < MIN_LOGVAR_SEPARATION {
                let mid = 0.5 * (*hi + *lo);
                *hi = mid + 0.5 * MIN_LOGVAR_SEPARATION;
                *lo = mid - 0.5 * MIN_LOGVAR_SEPARATION;
            }
        }
    }
}

impl Tape {
    /// Reverse pass. Accumulates parameter gradients into `grads` given the
    /// loss gradients with respect to the output means and the *bounded*
    /// log-variances, and returns the gradient with respect to the inputs.
    pub fn backward(
        &self,
        params: &NetworkParams,
        mask: &MaskSet,
        d_mean: ArrayView2<f64>,
        d_logvar: ArrayView2<f64>,
        grads: &mut ParamGrads,
    ) -> Array2<f64> {
        let n = d_mean.nrows();
        let d = params.state_dim();
        let mut d_out = Array2::zeros((n, 2 * d));
        d_out.slice_mut(ndarray::s![.., ..d]).assign(&d_mean);
        for r in 0..n {
            for i in 0..d {
                let g = d_logvar[[r, i]];
                if g == 0.0 {
                    continue;
                }
                let (hi, lo) = (params.max_logvar[i], params.min_logvar[i]);
                let lower = self.lower_logvar[[r, i]];
                // lv = hi - softplus(hi - lower)
                let s_hi = sigmoid(hi - lower);
                grads.max_logvar[i] += g * (1.0 - s_hi);
                let g_lower = g * s_hi;
                // lower = lo + softplus(raw - lo)
                let s_lo = sigmoid(self.raw_logvar[[r, i]] - lo);
                grads.min_logvar[i] += g_lower * (1.0 - s_lo);
                d_out[[r, d + i]] = g_lower * s_lo;
            }
        }

        let mut delta = d_out;
        for l in (0..params.layers.len()).rev() {
            let layer = &params.layers[l];
            let (gw, gb) = &mut grads.layers[l];
            *gw += &self.masked_inputs[l].t().dot(&delta);
            *gb += &delta.sum_axis(Axis(0));
            let mut d_in = delta.dot(&layer.weight.t());
            if let Some(z) = mask.keep.get(l) {
                d_in *= z;
            }
            if l > 0 {
                let act = params.activation;
                Zip::from(&mut d_in)
                    .and(&self.hidden_outputs[l - 1])
                    .for_each(|g, &y| *g *= act.derivative_at_output(y));
            }
            delta = d_in;
        }
        delta
    }
}

/// Gradient collection shaped like [`NetworkParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
    pub max_logvar: Array1<f64>,
    pub min_logvar: Array1<f64>,
}

impl ParamGrads {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
            max_logvar: Array1::zeros(params.state_dim()),
            min_logvar: Array1::zeros(params.state_dim()),
        }
    }

    /// Same ordering as [`NetworkParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out.extend(self.max_logvar.iter().copied());
        out.extend(self.min_logvar.iter().copied());
        out
    }

    pub fn scale(&mut self, c: f64) {
        for (w, b) in &mut self.layers {
            *w *= c;
            *b *= c;
        }
        self.max_logvar *= c;
        self.min_logvar *= c;
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
        self.max_logvar += &other.max_logvar;
        self.min_logvar += &other.min_logvar;
    }

    /// Adds `coeff * params` to every weight and bias gradient (gradient of
    /// `coeff / 2 · Σ‖W‖² + ‖b‖²`).
    pub fn add_weight_decay(&mut self, params: &NetworkParams, coeff: f64) {
        for ((w, b), layer) in self.layers.iter_mut().zip(&params.layers) {
            w.scaled_add(coeff, &layer.weight);
            b.scaled_add(coeff, &layer.bias);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    fn for_each_pair(&self, params: &mut NetworkParams, mut f: impl FnMut(usize, &mut f64, f64)) {
        let mut k = 0;
        for ((gw, gb), layer) in self.layers.iter().zip(params.layers.iter_mut()) {
            for (p, g) in layer.weight.iter_mut().zip(gw.iter()) {
                f(k, p, *g);
                k += 1;
            }
            for (p, g) in layer.bias.iter_mut().zip(gb.iter()) {
                f(k, p, *g);
                k += 1;
            }
        }
        for (p, g) in params.max_logvar.iter_mut().zip(self.max_logvar.iter()) {
            f(k, p, *g);
            k += 1;
        }
        for (p, g) in params.min_logvar.iter_mut().zip(self.min_logvar.iter()) {
            f(k, p, *g);
            k += 1;
        }
    }
}

/// A scalar loss whose value and parameter gradient can be evaluated at a
/// parameter point.
pub trait DifferentiableLoss {
    fn value_and_grad(&self, params: &NetworkParams) -> Result<(f64, ParamGrads)>;

    fn value(&self, params: &NetworkParams) -> Result<f64> {
        self.value_and_grad(params).map(|(v, _)| v)
    }
}

/// Exact gradient of `loss` at `params`.
pub fn gradients<L: DifferentiableLoss + ?Sized>(params: &NetworkParams, loss: &L) -> Result<ParamGrads> {
    let (value, grads) = loss.value_and_grad(params)?;
    if !value.is_finite() || !grads.is_finite() {
        return Err(Error::Numerical {
            context: "loss gradient",
            index: 0,
        });
    }
    Ok(grads)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// First-order optimizer with per-parameter moment estimates (Adam) or
/// plain gradient descent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl Optimizer {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(learning_rate)
        }
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Self::adam(learning_rate),
            OptimizerKind::Sgd => Self::sgd(learning_rate),
        }
    }

    /// Descends along `grads`, then re-projects the log-variance bounds.
    pub fn apply_update(&mut self, params: &mut NetworkParams, grads: &ParamGrads) -> Result<()> {
        let n = params.num_params();
        if grads.layers.len() != params.layers.len()
            || grads
                .layers
                .iter()
                .zip(&params.layers)
                .any(|((w, b), l)| w.raw_dim() != l.weight.raw_dim() || b.len() != l.bias.len())
            || grads.max_logvar.len() != params.state_dim()
            || grads.min_logvar.len() != params.state_dim()
        {
            return Err(Error::config("gradient shape does not match parameters"));
        }
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => grads.for_each_pair(params, |_, p, g| *p -= lr * g),
            OptimizerKind::Adam => {
                if self.first_moment.len() != n {
                    self.first_moment = vec![0.0; n];
                    self.second_moment = vec![0.0; n];
                    self.step = 0;
                }
                self.step += 1;
                let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                let c1 = 1.0 - b1.powf(self.step as f64);
                let c2 = 1.0 - b2.powf(self.step as f64);
                let (m, v) = (&mut self.first_moment, &mut self.second_moment);
                grads.for_each_pair(params, |k, p, g| {
                    m[k] = b1 * m[k] + (1.0 - b1) * g;
                    v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                    let m_hat = m[k] / c1;
                    let v_hat = v[k] / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
            }
        }
        params.reproject_bounds();
        Ok(())
    }
}

/// On-disk form of [`NetworkParams`]: explicit shape header plus row-major
/// values. Floats are written in shortest round-trip form, so save/load is
/// bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsCheckpoint {
    pub format_version: u32,
    pub activation: Activation,
    pub layer_shapes: Vec<[usize; 2]>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub max_logvar: Vec<f64>,
    pub min_logvar: Vec<f64>,
}

impl From<&NetworkParams> for ParamsCheckpoint {
    fn from(p: &NetworkParams) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            activation: p.activation,
            layer_shapes: p
                .layers
                .iter()
                .map(|l| [l.weight.nrows(), l.weight.ncols()])
                .collect(),
            weights: p.layers.iter().map(|l| l.weight.iter().copied().collect()).collect(),
            biases: p.layers.iter().map(|l| l.bias.to_vec()).collect(),
            max_logvar: p.max_logvar.to_vec(),
            min_logvar: p.min_logvar.to_vec(),
        }
    }
}

impl TryFrom<ParamsCheckpoint> for NetworkParams {
    type Error = Error;

    fn try_from(c: ParamsCheckpoint) -> Result<Self> {
        if c.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported parameter format version {}",
                c.format_version
            )));
        }
        let l = c.layer_shapes.len();
        if l == 0 || c.weights.len() != l || c.biases.len() != l {
            return Err(Error::Checkpoint("layer count mismatch".into()));
        }
        let mut layers = Vec::with_capacity(l);
        for (k, ((shape, w), b)) in c.layer_shapes.iter().zip(c.weights).zip(c.biases).enumerate() {
            if k > 0 && layers.last().map(|p: &Layer| p.weight.ncols()) != Some(shape[0]) {
                return Err(Error::Checkpoint(format!("layer {k} input width breaks the chain")));
            }
            if b.len() != shape[1] {
                return Err(Error::Checkpoint(format!("layer {k} bias length mismatch")));
            }
            let weight = Array2::from_shape_vec((shape[0], shape[1]), w)
                .map_err(|_| Error::Checkpoint(format!("layer {k} weight length mismatch")))?;
            layers.push(Layer {
                weight,
                bias: Array1::from(b),
            });
        }
        let out = layers.last().unwrap().weight.ncols();
        if out != 2 * c.max_logvar.len() || c.max_logvar.len() != c.min_logvar.len() {
            return Err(Error::Checkpoint("output head does not match log-variance bounds".into()));
        }
        let params = NetworkParams {
            layers,
            activation: c.activation,
            max_logvar: Array1::from(c.max_logvar),
            min_logvar: Array1::from(c.min_logvar),
        };
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(params)
    }
}

impl Serialize for NetworkParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamsCheckpoint::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for NetworkParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let c = ParamsCheckpoint::deserialize(d)?;
        NetworkParams::try_from(c).map_err(serde::de::Error::custom)
    }
}
