//! Input-dependent baselines for the likelihood-ratio estimator.
//!
//! The baseline of latent layer `k` is `c + C_k(input_k)`, where `c` is a
//! running estimate of the expected objective and `C_k` is a one-hidden-layer
//! tanh network fed with whatever layer `k` is conditioned on: the data for
//! `k == 0`, latent layer `k - 1` otherwise. Both pieces only see variables
//! sampled before layer `k`, so subtracting them keeps the estimator unbiased.

use ndarray::{Array1, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::net::{LayerParams, ParamKind, SampleState, Topology};

pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_HIDDEN: usize = 100;

/// `C(input) = w2 . tanh(W1 input + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Regressor {
    pub hidden: LayerParams,
    /// `[1 x hidden]`.
    pub output: LayerParams,
}

impl Regressor {
    fn zeros(fan_in: usize, hidden: usize) -> Self {
        Regressor { hidden: LayerParams::zeros(hidden, fan_in), output: LayerParams::zeros(1, hidden) }
    }

    fn activations(&self, input: ArrayView1<'_, f64>) -> Array1<f64> {
        (self.hidden.weight.dot(&input) + &self.hidden.bias).mapv(f64::tanh)
    }

    pub fn predict(&self, input: ArrayView1<'_, f64>) -> f64 {
        let h = self.activations(input);
        self.output.weight.row(0).dot(&h) + self.output.bias[0]
    }

    /// Adds `coeff * dC/dtheta` at `input` into `grad`.
    fn accumulate(&self, input: ArrayView1<'_, f64>, coeff: f64, grad: &mut Regressor) {
        let h = self.activations(input);
        grad.output.weight.row_mut(0).scaled_add(coeff, &h);
        grad.output.bias[0] += coeff;
        let back =
            ndarray::Zip::from(&h).and(self.output.weight.row(0)).map_collect(|&hv, &w| coeff * w * (1.0 - hv * hv));
        grad.hidden.add_outer(&back, input);
    }

    fn arrays(&self) -> [(ParamKind, &[f64]); 4] {
        [
            (ParamKind::Weight, self.hidden.weight.as_slice().expect("standard layout")),
            (ParamKind::Bias, self.hidden.bias.as_slice().expect("standard layout")),
            (ParamKind::Weight, self.output.weight.as_slice().expect("standard layout")),
            (ParamKind::Bias, self.output.bias.as_slice().expect("standard layout")),
        ]
    }

    fn arrays_mut(&mut self) -> [(ParamKind, &mut [f64]); 4] {
        [
            (ParamKind::Weight, self.hidden.weight.as_slice_mut().expect("standard layout")),
            (ParamKind::Bias, self.hidden.bias.as_slice_mut().expect("standard layout")),
            (ParamKind::Weight, self.output.weight.as_slice_mut().expect("standard layout")),
            (ParamKind::Bias, self.output.bias.as_slice_mut().expect("standard layout")),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    pub running_mean: f64,
    pub decay: f64,
    /// One per latent layer, or empty for an input-independent baseline.
    pub regressors: Vec<Regressor>,
}

/// Gradient of the baseline's squared-residual loss w.r.t. its regressors.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineGradient {
    pub regressors: Vec<Regressor>,
}

/// What [`crate::estimators::estimate_lr`] hands back for baseline learning.
#[derive(Clone, Debug)]
pub struct LearningSignals {
    pub f: f64,
    /// `f - c - C_k(input_k)` per latent layer.
    pub layer_signals: Vec<f64>,
    /// Regressor inputs per layer; empty when the baseline has no regressors.
    pub inputs: Vec<Array1<f64>>,
}

impl BaselineModel {
    /// Running mean plus one regressor per latent layer of `rec`.
    pub fn new(rec: &Topology, hidden: usize, decay: f64, init_scale: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("baseline decay must lie in [0, 1), got {decay}")));
        }
        if hidden == 0 || !(init_scale > 0.0) {
            return Err(Error::InvalidArgument("baseline needs hidden >= 1 and a positive init scale".into()));
        }
        let normal = Normal::new(0.0, init_scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let regressors = (0..rec.depth())
            .map(|k| {
                let fan_in = if k == 0 { rec.data_dim() } else { rec.latent_sizes()[k - 1] };
                let mut r = Regressor::zeros(fan_in, hidden);
                r.hidden.weight.mapv_inplace(|_| normal.sample(&mut rng));
                r
            })
            .collect();
        Ok(BaselineModel { running_mean: 0.0, decay, regressors })
    }

    /// Input-independent baseline fixed at `value`.
    pub fn constant(value: f64) -> Self {
        BaselineModel { running_mean: value, decay: DEFAULT_DECAY, regressors: Vec::new() }
    }

    pub fn zero() -> Self {
        BaselineModel::constant(0.0)
    }

    pub fn is_input_dependent(&self) -> bool {
        !self.regressors.is_empty()
    }

    pub(crate) fn check(&self, rec: &Topology) -> Result<()> {
        if self.regressors.is_empty() {
            return Ok(());
        }
        if self.regressors.len() != rec.depth() {
            return Err(Error::Shape(format!(
                "baseline has {} regressors for {} latent layers",
                self.regressors.len(),
                rec.depth()
            )));
        }
        for (k, r) in self.regressors.iter().enumerate() {
            let fan_in = if k == 0 { rec.data_dim() } else { rec.latent_sizes()[k - 1] };
            if r.hidden.fan_in() != fan_in || r.output.fan_out() != 1 || r.output.fan_in() != r.hidden.fan_out() {
                return Err(Error::Shape(format!("baseline regressor {k} does not fit its layer input")));
            }
        }
        Ok(())
    }

    /// Baseline value of layer `k` given its conditioning input.
    pub fn layer_value(&self, k: usize, input: ArrayView1<'_, f64>) -> f64 {
        self.running_mean + self.regressors.get(k).map_or(0.0, |r| r.predict(input))
    }

    /// Baseline of every layer for a sample: layer `k` sees `x` or `z_{k-1}`.
    pub fn values(&self, x: ArrayView1<'_, f64>, z: &SampleState) -> Vec<f64> {
        (0..z.layers.len())
            .map(|k| {
                let input = if k == 0 { x } else { z.layers[k - 1].view() };
                self.layer_value(k, input)
            })
            .collect()
    }

    /// Mean over `signals` of `d/dtheta 0.5 * (f - c - C_k)^2`, summed over layers.
    pub fn regressor_gradient(&self, signals: &[LearningSignals]) -> BaselineGradient {
        let mut grad = BaselineGradient {
            regressors: self
                .regressors
                .iter()
                .map(|r| Regressor::zeros(r.hidden.fan_in(), r.hidden.fan_out()))
                .collect(),
        };
        if signals.is_empty() {
            return grad;
        }
        let scale = 1.0 / signals.len() as f64;
        for s in signals {
            for (k, r) in self.regressors.iter().enumerate() {
                r.accumulate(s.inputs[k].view(), -s.layer_signals[k] * scale, &mut grad.regressors[k]);
            }
        }
        grad
    }

    /// `c <- decay * c + (1 - decay) * mean(f)`.
    pub fn update_running_mean(&mut self, signals: &[LearningSignals]) {
        if signals.is_empty() {
            return;
        }
        let mean_f = signals.iter().map(|s| s.f).sum::<f64>() / signals.len() as f64;
        self.running_mean = self.decay * self.running_mean + (1.0 - self.decay) * mean_f;
    }

    pub fn arrays_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        self.regressors.iter_mut().flat_map(|r| r.arrays_mut()).collect()
    }
}

impl BaselineGradient {
    pub fn arrays(&self) -> Vec<(ParamKind, &[f64])> {
        self.regressors.iter().flat_map(|r| r.arrays()).collect()
    }
}

/// One plain gradient step on the regressors and one running-mean update.
///
/// A zero `step_size` freezes the whole baseline, running mean included.
pub fn update_baseline(baseline: &mut BaselineModel, signals: &[LearningSignals], step_size: f64) {
    if step_size == 0.0 || signals.is_empty() {
        return;
    }
    let grad = baseline.regressor_gradient(signals);
    for ((_, p), (_, g)) in baseline.arrays_mut().into_iter().zip(grad.arrays()) {
        for (w, d) in p.iter_mut().zip(g) {
            *w -= step_size * d;
        }
    }
    baseline.update_running_mean(signals);
}
