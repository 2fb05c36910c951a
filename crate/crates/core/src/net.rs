//! Layered sigmoid belief networks.
//!
//! Latent layers are always indexed by *depth*: layer `0` sits next to the
//! data and layer `L - 1` is the deepest. A recognition network samples
//! depth `0, 1, ..., L - 1` from the data upward; a generative network
//! samples from its top-layer logits downward and finally emits the data.
//!
//! `layers[k]` of either network connects depth `k` with depth `k - 1`
//! (the data layer when `k == 0`):
//!
//! * recognition: `weight` is `[H_k x H_{k-1}]`, producing depth `k`;
//! * generative: `weight` is `[H_{k-1} x H_k]`, producing depth `k - 1`.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grad::GradientAccumulator;
use crate::math::{layer_log_prob, sigmoid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Generative,
    Recognition,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Generative => "generative",
            Direction::Recognition => "recognition",
        }
    }
}

/// Shape of an SBN: data width plus latent layer widths by depth.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Topology {
    data_dim: usize,
    latent: Vec<usize>,
    direction: Direction,
}

impl Topology {
    /// `latent_by_depth[0]` is the layer next to the data.
    pub fn new(data_dim: usize, latent_by_depth: Vec<usize>, direction: Direction) -> Result<Self> {
        if data_dim == 0 {
            return Err(Error::InvalidArgument("data dimension must be at least 1".into()));
        }
        if latent_by_depth.is_empty() || latent_by_depth.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "latent layer sizes must be non-empty and >= 1, got {latent_by_depth:?}"
            )));
        }
        Ok(Topology { data_dim, latent: latent_by_depth, direction })
    }

    /// Parses the `H_L-...-H_1` notation (deepest layer first), e.g. `"16-32"`.
    pub fn parse(data_dim: usize, architecture: &str, direction: Direction) -> Result<Self> {
        let mut sizes = architecture
            .split('-')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad architecture `{architecture}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        sizes.reverse();
        Topology::new(data_dim, sizes, direction)
    }

    /// Same layer sizes, opposite sampling direction.
    pub fn reversed(&self) -> Topology {
        let direction = match self.direction {
            Direction::Generative => Direction::Recognition,
            Direction::Recognition => Direction::Generative,
        };
        Topology { direction, ..self.clone() }
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    /// Latent widths indexed by depth.
    pub fn latent_sizes(&self) -> &[usize] {
        &self.latent
    }

    pub fn depth(&self) -> usize {
        self.latent.len()
    }

    /// Total number of latent units, `M`.
    pub fn num_latent(&self) -> usize {
        self.latent.iter().sum()
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Architecture string in `H_L-...-H_1` order.
    pub fn notation(&self) -> String {
        let parts: Vec<String> = self.latent.iter().rev().map(|h| h.to_string()).collect();
        parts.join("-")
    }

    /// `(fan_out, fan_in)` of `layers[k]`.
    pub fn layer_shape(&self, k: usize) -> (usize, usize) {
        let below = if k == 0 { self.data_dim } else { self.latent[k - 1] };
        match self.direction {
            Direction::Recognition => (self.latent[k], below),
            Direction::Generative => (below, self.latent[k]),
        }
    }

    /// Latent depths in the order this network samples them.
    pub fn sampling_order(&self) -> Vec<usize> {
        match self.direction {
            Direction::Recognition => (0..self.depth()).collect(),
            Direction::Generative => (0..self.depth()).rev().collect(),
        }
    }

    /// True when `unit` is downstream of `of` in this network's graph.
    pub fn is_descendant(&self, unit: UnitAddress, of: UnitAddress) -> bool {
        match self.direction {
            Direction::Recognition => unit.layer > of.layer,
            Direction::Generative => unit.layer < of.layer,
        }
    }

    /// All latent units, depth-major.
    pub fn units(&self) -> impl Iterator<Item = UnitAddress> + '_ {
        self.latent.iter().enumerate().flat_map(|(layer, &h)| (0..h).map(move |unit| UnitAddress { layer, unit }))
    }

    pub fn check_unit(&self, unit: UnitAddress) -> Result<()> {
        match self.latent.get(unit.layer) {
            Some(&h) if unit.unit < h => Ok(()),
            _ => Err(Error::UnitOutOfRange { layer: unit.layer, unit: unit.unit }),
        }
    }

    /// Whether `other` describes the same layer sizes (any direction).
    pub fn same_shape(&self, other: &Topology) -> bool {
        self.data_dim == other.data_dim && self.latent == other.latent
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SBN({}) {} over {} inputs", self.notation(), self.direction.as_str(), self.data_dim)
    }
}

/// Index of a latent unit: depth and position within the layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct UnitAddress {
    pub layer: usize,
    pub unit: usize,
}

impl UnitAddress {
    pub fn new(layer: usize, unit: usize) -> Self {
        UnitAddress { layer, unit }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `[fan_out x fan_in]`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerParams {
    pub fn zeros(fan_out: usize, fan_in: usize) -> Self {
        LayerParams { weight: Array2::zeros((fan_out, fan_in)), bias: Array1::zeros(fan_out) }
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    /// Pre-sigmoid activations `W parent + b`.
    pub fn logits(&self, parent: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if parent.len() != self.fan_in() {
            return Err(Error::Shape(format!("parent has {} entries, layer expects {}", parent.len(), self.fan_in())));
        }
        Ok(self.weight.dot(&parent) + &self.bias)
    }
}

/// Parameters of one SBN. `top_logits` is present exactly for generative nets.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub topology: Topology,
    pub layers: Vec<LayerParams>,
    pub top_logits: Option<Array1<f64>>,
}

/// Which role a parameter array plays; weight decay only touches `Weight`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    TopLogit,
}

impl ModelParams {
    pub fn zeros(topology: Topology) -> Self {
        let layers = (0..topology.depth())
            .map(|k| {
                let (out, inp) = topology.layer_shape(k);
                LayerParams::zeros(out, inp)
            })
            .collect();
        let top_logits = match topology.direction() {
            Direction::Generative => Some(Array1::zeros(topology.latent_sizes()[topology.depth() - 1])),
            Direction::Recognition => None,
        };
        ModelParams { topology, layers, top_logits }
    }

    pub fn direction(&self) -> Direction {
        self.topology.direction()
    }

    pub fn num_params(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// Parameter arrays in flat order: per layer weight then bias, then top logits.
    pub fn arrays(&self) -> Vec<(ParamKind, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for layer in &self.layers {
            out.push((ParamKind::Weight, layer.weight.as_slice().expect("standard layout")));
            out.push((ParamKind::Bias, layer.bias.as_slice().expect("standard layout")));
        }
        if let Some(top) = &self.top_logits {
            out.push((ParamKind::TopLogit, top.as_slice().expect("standard layout")));
        }
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for layer in &mut self.layers {
            out.push((ParamKind::Weight, layer.weight.as_slice_mut().expect("standard layout")));
            out.push((ParamKind::Bias, layer.bias.as_slice_mut().expect("standard layout")));
        }
        if let Some(top) = &mut self.top_logits {
            out.push((ParamKind::TopLogit, top.as_slice_mut().expect("standard layout")));
        }
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.arrays().into_iter().flat_map(|(_, a)| a.iter().copied()).collect()
    }

    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        let mut rest = index;
        for (_, a) in self.arrays_mut() {
            if rest < a.len() {
                return &mut a[rest];
            }
            rest -= a.len();
        }
        panic!("parameter index {index} out of range");
    }

    /// Human-readable name of flat coordinate `index`.
    pub fn coordinate_name(&self, index: usize) -> String {
        let mut rest = index;
        for (k, layer) in self.layers.iter().enumerate() {
            let n = layer.weight.len();
            if rest < n {
                return format!("layer{k}.weight[{},{}]", rest / layer.fan_in(), rest % layer.fan_in());
            }
            rest -= n;
            if rest < layer.bias.len() {
                return format!("layer{k}.bias[{rest}]");
            }
            rest -= layer.bias.len();
        }
        format!("top_logits[{rest}]")
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    fn expect_direction(&self, direction: Direction) -> Result<()> {
        if self.direction() != direction {
            return Err(Error::InvalidArgument(format!(
                "expected a {} network, got a {} one",
                direction.as_str(),
                self.direction().as_str()
            )));
        }
        Ok(())
    }

    /// Validates array shapes against the topology.
    pub fn validate(&self) -> Result<()> {
        let t = &self.topology;
        if self.layers.len() != t.depth() {
            return Err(Error::Shape(format!("{} layers for depth {}", self.layers.len(), t.depth())));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            let (out, inp) = t.layer_shape(k);
            if layer.weight.dim() != (out, inp) || layer.bias.len() != out {
                return Err(Error::Shape(format!(
                    "layer {k}: weight {:?}, bias {}; expected ({out}, {inp}), {out}",
                    layer.weight.dim(),
                    layer.bias.len()
                )));
            }
        }
        match (t.direction(), &self.top_logits) {
            (Direction::Generative, Some(top)) if top.len() == t.latent_sizes()[t.depth() - 1] => Ok(()),
            (Direction::Recognition, None) => Ok(()),
            _ => Err(Error::Shape("top logits must be present exactly for generative nets".into())),
        }
    }
}

/// Zero-mean Gaussian weights with standard deviation `scale`; zero biases and logits.
pub fn init_params(topology: Topology, scale: f64, seed: u64) -> Result<ModelParams> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("init scale must be positive, got {scale}")));
    }
    let normal = Normal::new(0.0, scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(topology);
    for layer in &mut params.layers {
        layer.weight.mapv_inplace(|_| normal.sample(&mut rng));
    }
    Ok(params)
}

/// Bernoulli means `sigmoid(W parent + b)` of one layer.
pub fn layer_means(layer: &LayerParams, parent: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    Ok(layer.logits(parent)?.mapv(sigmoid))
}

/// One uniform draw in `[0, 1)` per latent unit, laid out by depth.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseState {
    pub layers: Vec<Array1<f64>>,
}

impl NoiseState {
    pub fn sample<R: Rng + ?Sized>(topology: &Topology, rng: &mut R) -> Self {
        let layers =
            topology.latent_sizes().iter().map(|&h| Array1::from_shape_fn(h, |_| rng.random::<f64>())).collect();
        NoiseState { layers }
    }

    pub fn from_layers(layers: Vec<Array1<f64>>) -> Result<Self> {
        if layers.iter().flatten().any(|e| !(0.0..1.0).contains(e)) {
            return Err(Error::InvalidArgument("noise must lie in [0, 1)".into()));
        }
        Ok(NoiseState { layers })
    }

    pub fn get(&self, unit: UnitAddress) -> f64 {
        self.layers[unit.layer][unit.unit]
    }

    pub fn set(&mut self, unit: UnitAddress, value: f64) {
        self.layers[unit.layer][unit.unit] = value;
    }

    fn check(&self, topology: &Topology) -> Result<()> {
        let sizes: Vec<usize> = self.layers.iter().map(|l| l.len()).collect();
        if sizes != topology.latent_sizes() {
            return Err(Error::Shape(format!(
                "noise layers {sizes:?} do not cover latent layers {:?}",
                topology.latent_sizes()
            )));
        }
        Ok(())
    }
}

/// Binary latent configuration, laid out by depth. Entries are `0.0` or `1.0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleState {
    pub layers: Vec<Array1<f64>>,
}

impl SampleState {
    pub fn zeros(topology: &Topology) -> Self {
        SampleState { layers: topology.latent_sizes().iter().map(|&h| Array1::zeros(h)).collect() }
    }

    /// Configuration whose flat depth-major bits are the binary digits of `index`
    /// (bit `j` of `index` is flat unit `j`).
    pub fn from_index(topology: &Topology, index: u64) -> Self {
        let mut z = SampleState::zeros(topology);
        let mut j = 0;
        for layer in &mut z.layers {
            for v in layer.iter_mut() {
                *v = ((index >> j) & 1) as f64;
                j += 1;
            }
        }
        z
    }

    pub fn get(&self, unit: UnitAddress) -> f64 {
        self.layers[unit.layer][unit.unit]
    }

    pub fn set(&mut self, unit: UnitAddress, value: f64) {
        self.layers[unit.layer][unit.unit] = value;
    }

    pub fn is_binary(&self) -> bool {
        self.layers.iter().flatten().all(|&v| v == 0.0 || v == 1.0)
    }

    pub(crate) fn check(&self, topology: &Topology) -> Result<()> {
        let sizes: Vec<usize> = self.layers.iter().map(|l| l.len()).collect();
        if sizes != topology.latent_sizes() {
            return Err(Error::Shape(format!(
                "sample layers {sizes:?} do not match latent layers {:?}",
                topology.latent_sizes()
            )));
        }
        Ok(())
    }
}

/// A recognition forward pass with its intermediate logits and means.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub z: SampleState,
    pub logits: Vec<Array1<f64>>,
    pub means: Vec<Array1<f64>>,
}

impl ForwardTrace {
    pub fn mean(&self, unit: UnitAddress) -> f64 {
        self.means[unit.layer][unit.unit]
    }
}

fn check_input(topology: &Topology, x: ArrayView1<'_, f64>) -> Result<()> {
    if x.len() != topology.data_dim() {
        return Err(Error::Shape(format!("input has {} entries, model expects {}", x.len(), topology.data_dim())));
    }
    Ok(())
}

#[inline]
fn threshold(noise: f64, mean: f64) -> f64 {
    if noise < mean {
        1.0
    } else {
        0.0
    }
}

/// Ancestral reparameterized pass of a recognition net: `z_i = 1` iff `noise_i < mu_i`.
pub fn forward_trace(rec: &ModelParams, x: ArrayView1<'_, f64>, noise: &NoiseState) -> Result<ForwardTrace> {
    rec.expect_direction(Direction::Recognition)?;
    check_input(&rec.topology, x)?;
    noise.check(&rec.topology)?;
    let depth = rec.topology.depth();
    let mut logits = Vec::with_capacity(depth);
    let mut means: Vec<Array1<f64>> = Vec::with_capacity(depth);
    let mut bits: Vec<Array1<f64>> = Vec::with_capacity(depth);
    for (k, layer) in rec.layers.iter().enumerate() {
        let parent = if k == 0 { x } else { bits[k - 1].view() };
        let a = layer.logits(parent)?;
        let mu = a.mapv(sigmoid);
        let z = ndarray::Zip::from(&noise.layers[k]).and(&mu).map_collect(|&e, &m| threshold(e, m));
        logits.push(a);
        means.push(mu);
        bits.push(z);
    }
    Ok(ForwardTrace { z: SampleState { layers: bits }, logits, means })
}

pub fn reparam_forward(rec: &ModelParams, x: ArrayView1<'_, f64>, noise: &NoiseState) -> Result<SampleState> {
    Ok(forward_trace(rec, x, noise)?.z)
}

/// Re-simulates the descendants of `unit` with its value clamped, reusing every
/// non-descendant and the original noise. Descendant logits are updated by the
/// columns of the flipped parents rather than recomputed.
pub(crate) fn clamp_trace(
    rec: &ModelParams,
    base: &ForwardTrace,
    noise: &NoiseState,
    unit: UnitAddress,
    value: f64,
) -> SampleState {
    let mut z = base.z.clone();
    let old = z.get(unit);
    if old == value {
        return z;
    }
    z.set(unit, value);
    let mut changed: Vec<(usize, f64)> = vec![(unit.unit, value - old)];
    for k in unit.layer + 1..rec.topology.depth() {
        let w = &rec.layers[k].weight;
        let mut a = base.logits[k].clone();
        for &(j, delta) in &changed {
            a.scaled_add(delta, &w.column(j));
        }
        let mut next = Vec::new();
        for (u, &logit) in a.iter().enumerate() {
            let bit = threshold(noise.layers[k][u], sigmoid(logit));
            let prev = z.layers[k][u];
            if bit != prev {
                z.layers[k][u] = bit;
                next.push((u, bit - prev));
            }
        }
        if next.is_empty() {
            break;
        }
        changed = next;
    }
    z
}

/// `z_{\i} = g_{\i}(z_i, noise_{\i})`: the reparameterized sample with `unit` forced to `value`.
pub fn clamped_forward(
    rec: &ModelParams,
    x: ArrayView1<'_, f64>,
    noise: &NoiseState,
    unit: UnitAddress,
    value: f64,
) -> Result<SampleState> {
    rec.topology.check_unit(unit)?;
    if value != 0.0 && value != 1.0 {
        return Err(Error::InvalidArgument(format!("clamp value must be 0 or 1, got {value}")));
    }
    let base = forward_trace(rec, x, noise)?;
    Ok(clamp_trace(rec, &base, noise, unit, value))
}

/// `log q(z | x)` of a recognition net.
pub fn log_prob(rec: &ModelParams, x: ArrayView1<'_, f64>, z: &SampleState) -> Result<f64> {
    rec.expect_direction(Direction::Recognition)?;
    check_input(&rec.topology, x)?;
    z.check(&rec.topology)?;
    let mut total = 0.0;
    for (k, layer) in rec.layers.iter().enumerate() {
        let parent = if k == 0 { x } else { z.layers[k - 1].view() };
        let a = layer.logits(parent)?;
        total += layer_log_prob(z.layers[k].view(), a.view());
    }
    Ok(total)
}

/// `log q(z | x)` and its score `grad_phi log q(z | x)`.
///
/// For logistic units the score of unit `i` is `(z_i - mu_i) * [parent, 1]`.
pub fn log_prob_and_score(
    rec: &ModelParams,
    x: ArrayView1<'_, f64>,
    z: &SampleState,
) -> Result<(f64, GradientAccumulator)> {
    rec.expect_direction(Direction::Recognition)?;
    check_input(&rec.topology, x)?;
    z.check(&rec.topology)?;
    let mut score = GradientAccumulator::zeros_like(rec);
    let mut total = 0.0;
    for (k, layer) in rec.layers.iter().enumerate() {
        let parent = if k == 0 { x } else { z.layers[k - 1].view() };
        let a = layer.logits(parent)?;
        let bits = &z.layers[k];
        total += layer_log_prob(bits.view(), a.view());
        let residual = ndarray::Zip::from(bits).and(&a).map_collect(|&t, &l| t - sigmoid(l));
        score.layers[k].add_outer(&residual, parent);
    }
    Ok((total, score))
}

/// Ancestral sample `(x, z)` from a generative net.
pub fn sample_generative<R: Rng + ?Sized>(gen: &ModelParams, rng: &mut R) -> Result<(Array1<f64>, SampleState)> {
    gen.expect_direction(Direction::Generative)?;
    let t = &gen.topology;
    let mut z = SampleState::zeros(t);
    let top = gen.top_logits.as_ref().expect("generative nets carry top logits");
    let bern = |a: f64, rng: &mut R| threshold(rng.random::<f64>(), sigmoid(a));
    let deepest = t.depth() - 1;
    for (u, &a) in top.iter().enumerate() {
        z.layers[deepest][u] = bern(a, rng);
    }
    for k in (1..t.depth()).rev() {
        let a = gen.layers[k].logits(z.layers[k].view())?;
        for (u, &l) in a.iter().enumerate() {
            z.layers[k - 1][u] = bern(l, rng);
        }
    }
    let a = gen.layers[0].logits(z.layers[0].view())?;
    let x = a.mapv(|l| bern(l, rng));
    Ok((x, z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rec_2_3() -> Topology {
        Topology::new(2, vec![3], Direction::Recognition).unwrap()
    }

    fn random_rec(data: usize, latent: Vec<usize>, seed: u64) -> ModelParams {
        let mut p = init_params(Topology::new(data, latent, Direction::Recognition).unwrap(), 1.0, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for layer in &mut p.layers {
            layer.bias.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        p
    }

    #[test]
    fn architecture_notation_round_trips() {
        let t = Topology::parse(784, "200-100", Direction::Generative).unwrap();
        assert_eq!(t.latent_sizes(), &[100, 200]);
        assert_eq!(t.notation(), "200-100");
        assert_eq!(t.num_latent(), 300);
        assert_eq!(t.layer_shape(0), (784, 100));
        assert_eq!(t.layer_shape(1), (100, 200));
        let r = t.reversed();
        assert_eq!(r.layer_shape(0), (100, 784));
        assert_eq!(r.sampling_order(), vec![0, 1]);
        assert_eq!(t.sampling_order(), vec![1, 0]);
        assert!(Topology::parse(4, "3-0", Direction::Generative).is_err());
        assert!(Topology::parse(4, "a-3", Direction::Generative).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(rec_2_3(), 0.01, 7).unwrap();
        let b = init_params(rec_2_3(), 0.01, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.layers[0].bias.iter().all(|&v| v == 0.0));
        assert_ne!(a, init_params(rec_2_3(), 0.01, 8).unwrap());
    }

    #[test]
    fn init_rejects_non_positive_scale() {
        assert!(init_params(rec_2_3(), 0.0, 7).is_err());
        assert!(init_params(rec_2_3(), -1.0, 7).is_err());
    }

    #[test]
    fn init_weight_stddev_matches_scale() {
        // 6 weights per init; 10^4 inits give 6e4 draws.
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut n = 0.0;
        for seed in 0..10_000 {
            let p = init_params(rec_2_3(), 0.01, seed).unwrap();
            for &w in p.layers[0].weight.iter() {
                sum += w;
                sum_sq += w * w;
                n += 1.0;
            }
        }
        let var = sum_sq / n - (sum / n).powi(2);
        let sd = var.sqrt();
        // stderr of the sample sd for a Gaussian is sd / sqrt(2n)
        let se = 0.01 / (2.0 * n).sqrt();
        assert!((sd - 0.01).abs() < 3.0 * se, "sd {sd}, se {se}");
    }

    #[test]
    fn zero_params_give_half_means() {
        let layer = LayerParams::zeros(4, 3);
        let mu = layer_means(&layer, array![1.0, 0.0, 1.0].view()).unwrap();
        assert!(mu.iter().all(|&m| m == 0.5));
    }

    #[test]
    fn saturated_bias_gives_unit_mean() {
        let mut layer = LayerParams::zeros(2, 2);
        layer.bias.fill(20.0);
        let mu = layer_means(&layer, array![1.0, 1.0].view()).unwrap();
        assert!(mu.iter().all(|&m| (1.0 - m) < 1e-8));
    }

    #[test]
    fn layer_means_match_scalar_loop() {
        let p = random_rec(5, vec![4], 3);
        let parent = array![1.0, 0.0, 1.0, 1.0, 0.0];
        let mu = layer_means(&p.layers[0], parent.view()).unwrap();
        for u in 0..4 {
            let mut a = p.layers[0].bias[u];
            for j in 0..5 {
                a += p.layers[0].weight[[u, j]] * parent[j];
            }
            let expected = 1.0 / (1.0 + (-a).exp());
            assert!((mu[u] - expected).abs() < 1e-12);
        }
        assert!(layer_means(&p.layers[0], array![1.0].view()).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let mut p = ModelParams::zeros(Topology::new(1, vec![1], Direction::Recognition).unwrap());
        // logit of 0.3
        p.layers[0].bias[0] = (0.3f64 / 0.7).ln();
        let x = array![0.0];
        let mu = forward_trace(&p, x.view(), &NoiseState { layers: vec![array![0.0]] }).unwrap().means[0][0];
        let z = reparam_forward(&p, x.view(), &NoiseState { layers: vec![array![mu]] }).unwrap();
        assert_eq!(z.layers[0][0], 0.0);
        let z = reparam_forward(&p, x.view(), &NoiseState { layers: vec![array![mu - 1e-12]] }).unwrap();
        assert_eq!(z.layers[0][0], 1.0);
    }

    #[test]
    fn saturated_mean_always_fires() {
        let mut p = ModelParams::zeros(Topology::new(1, vec![2], Direction::Recognition).unwrap());
        p.layers[0].bias.fill(40.0);
        for &e in &[0.0, 0.5, 0.999_999, 1.0 - 1e-12 - 1e-13] {
            let noise = NoiseState { layers: vec![array![e, e]] };
            let z = reparam_forward(&p, array![1.0].view(), &noise).unwrap();
            assert_eq!(z.layers[0], array![1.0, 1.0]);
        }
    }

    #[test]
    fn empirical_first_layer_frequency_matches_mean() {
        let p = random_rec(3, vec![3, 2], 11);
        let x = array![1.0, 0.0, 1.0];
        let mu = layer_means(&p.layers[0], x.view()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut counts = [0.0; 3];
        for _ in 0..n {
            let noise = NoiseState::sample(&p.topology, &mut rng);
            let z = reparam_forward(&p, x.view(), &noise).unwrap();
            for u in 0..3 {
                counts[u] += z.layers[0][u];
            }
        }
        for u in 0..3 {
            let freq = counts[u] / n as f64;
            let se = (mu[u] * (1.0 - mu[u]) / n as f64).sqrt();
            assert!((freq - mu[u]).abs() < 4.0 * se, "unit {u}: {freq} vs {}", mu[u]);
        }
    }

    #[test]
    fn noise_shape_is_checked() {
        let p = random_rec(3, vec![3, 2], 1);
        let noise = NoiseState { layers: vec![Array1::zeros(3)] };
        assert!(reparam_forward(&p, array![0.0, 0.0, 0.0].view(), &noise).is_err());
        assert!(NoiseState::from_layers(vec![array![1.0]]).is_err());
    }

    #[test]
    fn clamp_to_sampled_value_is_a_no_op() {
        let p = random_rec(4, vec![3, 3, 2], 5);
        let x = array![1.0, 0.0, 0.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let noise = NoiseState::sample(&p.topology, &mut rng);
            let z = reparam_forward(&p, x.view(), &noise).unwrap();
            for unit in p.topology.units() {
                let c = clamped_forward(&p, x.view(), &noise, unit, z.get(unit)).unwrap();
                assert_eq!(c, z);
            }
        }
    }

    #[test]
    fn clamp_in_last_layer_changes_one_bit() {
        let p = random_rec(4, vec![3, 2], 6);
        let x = array![1.0, 1.0, 0.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = NoiseState::sample(&p.topology, &mut rng);
        let z = reparam_forward(&p, x.view(), &noise).unwrap();
        let unit = UnitAddress::new(1, 1);
        let c = clamped_forward(&p, x.view(), &noise, unit, 1.0 - z.get(unit)).unwrap();
        let diff: usize =
            z.layers.iter().zip(&c.layers).map(|(a, b)| a.iter().zip(b).filter(|(u, v)| u != v).count()).sum();
        assert_eq!(diff, 1);
    }

    #[test]
    fn clamp_rejects_bad_unit() {
        let p = random_rec(2, vec![2], 1);
        let noise = NoiseState { layers: vec![array![0.1, 0.2]] };
        let err = clamped_forward(&p, array![0.0, 1.0].view(), &noise, UnitAddress::new(0, 2), 1.0);
        assert!(matches!(err, Err(Error::UnitOutOfRange { .. })));
        let err = clamped_forward(&p, array![0.0, 1.0].view(), &noise, UnitAddress::new(1, 0), 1.0);
        assert!(matches!(err, Err(Error::UnitOutOfRange { .. })));
    }

    #[test]
    fn clamp_leaves_non_descendants_and_rethresholds_descendants() {
        let p = random_rec(3, vec![2, 3, 2], 8);
        let x = array![0.0, 1.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let noise = NoiseState::sample(&p.topology, &mut rng);
            let z = reparam_forward(&p, x.view(), &noise).unwrap();
            for unit in p.topology.units() {
                for value in [0.0, 1.0] {
                    let c = clamped_forward(&p, x.view(), &noise, unit, value).unwrap();
                    assert_eq!(c.get(unit), value);
                    for other in p.topology.units() {
                        if other != unit && !p.topology.is_descendant(other, unit) {
                            assert_eq!(c.get(other), z.get(other));
                        }
                    }
                    // descendants follow a full recomputation with the same noise
                    for k in unit.layer + 1..p.topology.depth() {
                        let mu = layer_means(&p.layers[k], c.layers[k - 1].view()).unwrap();
                        for u in 0..mu.len() {
                            let expected = if noise.layers[k][u] < mu[u] { 1.0 } else { 0.0 };
                            assert_eq!(c.layers[k][u], expected);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn log_prob_of_uniform_model() {
        let p = ModelParams::zeros(Topology::new(3, vec![2, 3], Direction::Recognition).unwrap());
        let z = SampleState::from_index(&p.topology, 0b10110);
        let (lq, _) = log_prob_and_score(&p, array![1.0, 0.0, 1.0].view(), &z).unwrap();
        assert!((lq + 5.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn score_matches_finite_differences() {
        let p = random_rec(4, vec![4, 3], 21);
        let x = array![1.0, 0.0, 1.0, 1.0];
        let z = SampleState::from_index(&p.topology, 0b1011001);
        let (_, score) = log_prob_and_score(&p, x.view(), &z).unwrap();
        let h = 1e-5;
        let flat = score.to_flat();
        for i in 0..p.num_params() {
            let mut plus = p.clone();
            *plus.param_mut(i) += h;
            let mut minus = p.clone();
            *minus.param_mut(i) -= h;
            let fd = (log_prob(&plus, x.view(), &z).unwrap() - log_prob(&minus, x.view(), &z).unwrap()) / (2.0 * h);
            let err = (fd - flat[i]).abs() / flat[i].abs().max(1e-3);
            assert!(err < 1e-6, "{}: fd {fd} vs {}", p.coordinate_name(i), flat[i]);
        }
    }

    #[test]
    fn score_has_zero_mean() {
        let p = random_rec(3, vec![2, 2], 30);
        let x = array![1.0, 1.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 100_000;
        let dim = p.num_params();
        let mut sum = vec![0.0; dim];
        let mut sum_sq = vec![0.0; dim];
        for _ in 0..n {
            let noise = NoiseState::sample(&p.topology, &mut rng);
            let z = reparam_forward(&p, x.view(), &noise).unwrap();
            let (_, s) = log_prob_and_score(&p, x.view(), &z).unwrap();
            for (i, v) in s.to_flat().into_iter().enumerate() {
                sum[i] += v;
                sum_sq[i] += v * v;
            }
        }
        for i in 0..dim {
            let mean = sum[i] / n as f64;
            let var = sum_sq[i] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!(mean.abs() <= 4.0 * se + 1e-12, "{}: mean {mean}, se {se}", p.coordinate_name(i));
        }
    }

    #[test]
    fn generative_sample_with_saturated_biases() {
        let mut g = ModelParams::zeros(Topology::new(3, vec![2], Direction::Generative).unwrap());
        g.layers[0].bias.fill(30.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (x, z) = sample_generative(&g, &mut rng).unwrap();
            assert_eq!(x, array![1.0, 1.0, 1.0]);
            assert!(z.is_binary());
        }
    }

    #[test]
    fn validate_catches_bad_shapes() {
        let mut p = ModelParams::zeros(Topology::new(3, vec![2], Direction::Generative).unwrap());
        assert!(p.validate().is_ok());
        p.top_logits = None;
        assert!(p.validate().is_err());
    }
}
