//! Gradient estimators for the recognition parameters.
//!
//! Both estimators are pure functions of `(objective, rec, x, noise)` (plus
//! baseline state for the likelihood-ratio one), so a fixed noise draw gives
//! a fixed estimate.
//!
//! The marginalized estimator differentiates the inner expectation over each
//! unit's own noise analytically. For a Bernoulli unit `i` with mean `mu_i`
//! that leaves
//!
//! ```text
//! Delta_i = sum_{z_i} f(x, z) grad q_i(z_i | pa_i) = (f_1 - f_0) grad mu_i
//! ```
//!
//! where `f_k` is the objective after clamping `z_i = k` and re-simulating the
//! descendants of `i` with the *same* noise. One of the two clamps always
//! reproduces the base sample, so each unit costs a single extra descendant
//! pass.

use ndarray::{Array1, ArrayView1};

use crate::baseline::{BaselineModel, LearningSignals};
use crate::error::Result;
use crate::grad::GradientAccumulator;
use crate::net::{clamp_trace, forward_trace, ForwardTrace, ModelParams, NoiseState, UnitAddress};
use crate::objective::Objective;

/// `(f_0, f_1)` for every latent unit of one noise draw.
#[derive(Clone, Debug)]
pub struct MarginalSample {
    pub trace: ForwardTrace,
    /// Objective at the unclamped sample.
    pub f: f64,
    /// Indexed like the latent layers.
    pub pairs: Vec<Vec<(f64, f64)>>,
}

impl MarginalSample {
    pub fn pair(&self, unit: UnitAddress) -> (f64, f64) {
        self.pairs[unit.layer][unit.unit]
    }
}

fn clamp_pair<O: Objective>(
    objective: &O,
    rec: &ModelParams,
    x: ArrayView1<'_, f64>,
    noise: &NoiseState,
    trace: &ForwardTrace,
    base_f: f64,
    ctx: &O::Context,
    unit: UnitAddress,
) -> (f64, f64) {
    let sampled = trace.z.get(unit);
    let other = clamp_trace(rec, trace, noise, unit, 1.0 - sampled);
    let f_other = objective.evaluate_near(rec, x, ctx, &other);
    if sampled == 1.0 {
        (f_other, base_f)
    } else {
        (base_f, f_other)
    }
}

/// Evaluates both clamped configurations of every latent unit.
pub fn marginal_pairs<O: Objective>(
    objective: &O,
    rec: &ModelParams,
    x: ArrayView1<'_, f64>,
    noise: &NoiseState,
) -> Result<MarginalSample> {
    let trace = forward_trace(rec, x, noise)?;
    let (f, ctx) = objective.evaluate_base(rec, x, &trace);
    let pairs = rec
        .topology
        .latent_sizes()
        .iter()
        .enumerate()
        .map(|(layer, &h)| {
            (0..h)
                .map(|unit| clamp_pair(objective, rec, x, noise, &trace, f, &ctx, UnitAddress { layer, unit }))
                .collect()
        })
        .collect();
    Ok(MarginalSample { trace, f, pairs })
}

/// The inner expectation's two terms for one unit, with everything else held
/// at the reparameterized sample: `mu f_1 + (1 - mu) f_0` is `E_{eps_i} f`.
pub fn inner_expectation<O: Objective>(
    objective: &O,
    rec: &ModelParams,
    x: ArrayView1<'_, f64>,
    noise: &NoiseState,
    unit: UnitAddress,
) -> Result<(f64, f64)> {
    rec.topology.check_unit(unit)?;
    let trace = forward_trace(rec, x, noise)?;
    let (f, ctx) = objective.evaluate_base(rec, x, &trace);
    Ok(clamp_pair(objective, rec, x, noise, &trace, f, &ctx, unit))
}

/// `Delta_i = (f_1 - f_0) mu_i (1 - mu_i) [pa_i, 1]` for every unit.
pub fn assemble_marginalized(
    rec: &ModelParams,
    x: ArrayView1<'_, f64>,
    trace: &ForwardTrace,
    pairs: &[Vec<(f64, f64)>],
) -> GradientAccumulator {
    let mut grad = GradientAccumulator::zeros_like(rec);
    for (k, layer_pairs) in pairs.iter().enumerate() {
        let coeff: Array1<f64> =
            layer_pairs.iter().zip(&trace.means[k]).map(|(&(f0, f1), &mu)| (f1 - f0) * mu * (1.0 - mu)).collect();
        let parent = if k == 0 { x } else { trace.z.layers[k - 1].view() };
        grad.layers[k].add_outer(&coeff, parent);
    }
    grad
}

/// Marginalized reparameterization estimate of `grad_phi E_q f`.
pub fn estimate_marginalized<O: Objective>(
    objective: &O,
    rec: &ModelParams,
    x: ArrayView1<'_, f64>,
    noise: &NoiseState,
) -> Result<GradientAccumulator> {
    let sample = marginal_pairs(objective, rec, x, noise)?;
    let mut grad = assemble_marginalized(rec, x, &sample.trace, &sample.pairs);
    if let Some(direct) = objective.direct_gradient(rec, x, &sample.trace.z) {
        grad.add_assign(&direct);
    }
    Ok(grad)
}

/// One reparameterized sample with its objective value and score.
#[derive(Clone, Debug)]
pub struct LrSample {
    pub trace: ForwardTrace,
    pub f: f64,
    pub score: GradientAccumulator,
}

/// Score coefficient `(z_i - mu_i) * weight_k` per unit, scattered onto `[pa, 1]`.
fn scaled_score(
    rec: &ModelParams,
    x: ArrayView1<'_, f64>,
    trace: &ForwardTrace,
    layer_weights: &[f64],
) -> GradientAccumulator {
    let mut grad = GradientAccumulator::zeros_like(rec);
    for (k, &w) in layer_weights.iter().enumerate() {
        let coeff = ndarray::Zip::from(&trace.z.layers[k]).and(&trace.means[k]).map_collect(|&z, &mu| w * (z - mu));
        let parent = if k == 0 { x } else { trace.z.layers[k - 1].view() };
        grad.layers[k].add_outer(&coeff, parent);
    }
    grad
}

pub fn lr_sample<O: Objective>(
    objective: &O,
    rec: &ModelParams,
    x: ArrayView1<'_, f64>,
    noise: &NoiseState,
) -> Result<LrSample> {
    let trace = forward_trace(rec, x, noise)?;
    let (f, _) = objective.evaluate_base(rec, x, &trace);
    let ones = vec![1.0; rec.topology.depth()];
    let score = scaled_score(rec, x, &trace, &ones);
    Ok(LrSample { trace, f, score })
}

/// Likelihood-ratio estimate `(f - b_k) grad log q_k` with a per-layer baseline.
pub fn estimate_lr<O: Objective>(
    objective: &O,
    rec: &ModelParams,
    baseline: &BaselineModel,
    x: ArrayView1<'_, f64>,
    noise: &NoiseState,
) -> Result<(GradientAccumulator, LearningSignals)> {
    baseline.check(&rec.topology)?;
    let trace = forward_trace(rec, x, noise)?;
    let (f, _) = objective.evaluate_base(rec, x, &trace);
    let layer_signals: Vec<f64> = baseline.values(x, &trace.z).into_iter().map(|b| f - b).collect();
    let mut grad = scaled_score(rec, x, &trace, &layer_signals);
    if let Some(direct) = objective.direct_gradient(rec, x, &trace.z) {
        grad.add_assign(&direct);
    }
    let inputs = if baseline.is_input_dependent() {
        (0..rec.topology.depth()).map(|k| if k == 0 { x.to_owned() } else { trace.z.layers[k - 1].clone() }).collect()
    } else {
        Vec::new()
    };
    Ok((grad, LearningSignals { f, layer_signals, inputs }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, Direction, SampleState, Topology};
    use crate::objective::{ElboObjective, FnObjective};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_unit(bias: f64) -> ModelParams {
        let mut rec = ModelParams::zeros(Topology::new(1, vec![1], Direction::Recognition).unwrap());
        rec.layers[0].bias[0] = bias;
        rec
    }

    fn random_pair(seed: u64) -> (ModelParams, ModelParams) {
        let t = Topology::new(3, vec![3, 2], Direction::Generative).unwrap();
        let mut gen = init_params(t.clone(), 1.0, seed).unwrap();
        let mut rec = init_params(t.reversed(), 1.0, seed + 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        for l in gen.layers.iter_mut().chain(rec.layers.iter_mut()) {
            l.bias.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        (gen, rec)
    }

    #[test]
    fn constant_objective_gives_exact_zero() {
        let (_, rec) = random_pair(1);
        let obj = FnObjective::new(|_: &ModelParams, _: ArrayView1<'_, f64>, _: &SampleState| 4.2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = array![1.0, 0.0, 1.0];
        for _ in 0..20 {
            let noise = NoiseState::sample(&rec.topology, &mut rng);
            let g = estimate_marginalized(&obj, &rec, x.view(), &noise).unwrap();
            assert!(g.to_flat().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_unit_identity_objective_is_exact() {
        let rec = single_unit(0.4);
        let obj = FnObjective::new(|_: &ModelParams, _: ArrayView1<'_, f64>, z: &SampleState| z.layers[0][0]);
        let mu = crate::math::sigmoid(0.4);
        let dmu = mu * (1.0 - mu);
        let x = array![1.0];
        for e in [0.01, 0.3, 0.7, 0.99] {
            let noise = NoiseState { layers: vec![array![e]] };
            let g = estimate_marginalized(&obj, &rec, x.view(), &noise).unwrap();
            assert!((g.layers[0].bias[0] - dmu).abs() < 1e-15);
            assert!((g.layers[0].weight[[0, 0]] - dmu).abs() < 1e-15);
        }
    }

    #[test]
    fn single_unit_lr_two_outcomes() {
        let rec = single_unit(0.0);
        let obj = FnObjective::new(|_: &ModelParams, _: ArrayView1<'_, f64>, z: &SampleState| z.layers[0][0]);
        let x = array![0.0];
        let dmu = 0.25;
        let on = NoiseState { layers: vec![array![0.2]] };
        let (g, _) = estimate_lr(&obj, &rec, &BaselineModel::zero(), x.view(), &on).unwrap();
        assert!((g.layers[0].bias[0] - 2.0 * dmu).abs() < 1e-15);
        let off = NoiseState { layers: vec![array![0.8]] };
        let (g, _) = estimate_lr(&obj, &rec, &BaselineModel::zero(), x.view(), &off).unwrap();
        assert_eq!(g.layers[0].bias[0], 0.0);
    }

    #[test]
    fn pairs_assemble_bit_exactly() {
        let (gen, rec) = random_pair(5);
        let obj = ElboObjective::new(&gen).unwrap();
        let x = array![0.0, 1.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let noise = NoiseState::sample(&rec.topology, &mut rng);
            let direct = estimate_marginalized(&obj, &rec, x.view(), &noise).unwrap();
            let trace = forward_trace(&rec, x.view(), &noise).unwrap();
            let pairs: Vec<Vec<(f64, f64)>> = rec
                .topology
                .latent_sizes()
                .iter()
                .enumerate()
                .map(|(layer, &h)| {
                    (0..h)
                        .map(|unit| {
                            inner_expectation(&obj, &rec, x.view(), &noise, UnitAddress { layer, unit }).unwrap()
                        })
                        .collect()
                })
                .collect();
            assert_eq!(assemble_marginalized(&rec, x.view(), &trace, &pairs), direct);
        }
    }

    #[test]
    fn leaf_unit_difference_is_a_single_bit_flip() {
        let (gen, rec) = random_pair(8);
        let obj = ElboObjective::new(&gen).unwrap();
        let x = array![1.0, 1.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = NoiseState::sample(&rec.topology, &mut rng);
        let z = crate::net::reparam_forward(&rec, x.view(), &noise).unwrap();
        let unit = UnitAddress::new(1, 0);
        let (f0, f1) = inner_expectation(&obj, &rec, x.view(), &noise, unit).unwrap();
        let mut z0 = z.clone();
        z0.set(unit, 0.0);
        let mut z1 = z;
        z1.set(unit, 1.0);
        let full = |z: &SampleState| obj.evaluate(&rec, x.view(), z);
        assert!((f1 - f0 - (full(&z1) - full(&z0))).abs() < 1e-12);
    }

    #[test]
    fn inner_expectation_does_not_depend_on_own_noise() {
        let (gen, rec) = random_pair(10);
        let obj = ElboObjective::new(&gen).unwrap();
        let x = array![0.0, 0.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = NoiseState::sample(&rec.topology, &mut rng);
        let unit = UnitAddress::new(0, 1);
        let reference = inner_expectation(&obj, &rec, x.view(), &noise, unit).unwrap();
        for _ in 0..50 {
            let mut n = noise.clone();
            n.set(unit, rng.random::<f64>());
            assert_eq!(inner_expectation(&obj, &rec, x.view(), &n, unit).unwrap(), reference);
        }
    }

    #[test]
    fn inner_expectation_matches_integral_over_own_noise() {
        // Integrate f over eps_i exactly: f is piecewise constant with a jump at mu_i.
        let (gen, rec) = random_pair(12);
        let obj = ElboObjective::new(&gen).unwrap();
        let x = array![1.0, 0.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let noise = NoiseState::sample(&rec.topology, &mut rng);
        for unit in rec.topology.units() {
            let (f0, f1) = inner_expectation(&obj, &rec, x.view(), &noise, unit).unwrap();
            let mu = forward_trace(&rec, x.view(), &noise).unwrap().mean(unit);
            let mut below = noise.clone();
            below.set(unit, mu * 0.5);
            let mut above = noise.clone();
            above.set(unit, mu + (1.0 - mu) * 0.5);
            let eval =
                |n: &NoiseState| obj.evaluate(&rec, x.view(), &crate::net::reparam_forward(&rec, x.view(), n).unwrap());
            let integral = mu * eval(&below) + (1.0 - mu) * eval(&above);
            assert!((mu * f1 + (1.0 - mu) * f0 - integral).abs() < 1e-10);
        }
    }

    #[test]
    fn lr_learning_signals_carry_inputs() {
        let (gen, rec) = random_pair(14);
        let obj = ElboObjective::new(&gen).unwrap();
        let baseline = BaselineModel::new(&rec.topology, 4, 0.9, 0.1, 3).unwrap();
        let x = array![1.0, 0.0, 0.0];
        let noise = NoiseState::sample(&rec.topology, &mut ChaCha8Rng::seed_from_u64(1));
        let (_, s) = estimate_lr(&obj, &rec, &baseline, x.view(), &noise).unwrap();
        assert_eq!(s.inputs.len(), 2);
        assert_eq!(s.inputs[0], x);
        let b = baseline.values(x.view(), &crate::net::reparam_forward(&rec, x.view(), &noise).unwrap());
        for k in 0..2 {
            assert!((s.layer_signals[k] - (s.f - b[k])).abs() < 1e-15);
        }
        let wrong =
            BaselineModel::new(&Topology::new(4, vec![3, 2], Direction::Recognition).unwrap(), 4, 0.9, 0.1, 3).unwrap();
        assert!(estimate_lr(&obj, &rec, &wrong, x.view(), &noise).is_err());
    }

    #[test]
    fn direct_term_is_minus_score() {
        let (gen, rec) = random_pair(15);
        let plain = ElboObjective::new(&gen).unwrap();
        let with = ElboObjective::new(&gen).unwrap().with_direct_term(true);
        let x = array![1.0, 1.0, 1.0];
        let noise = NoiseState::sample(&rec.topology, &mut ChaCha8Rng::seed_from_u64(2));
        let a = estimate_marginalized(&plain, &rec, x.view(), &noise).unwrap();
        let b = estimate_marginalized(&with, &rec, x.view(), &noise).unwrap();
        let z = crate::net::reparam_forward(&rec, x.view(), &noise).unwrap();
        let (_, score) = crate::net::log_prob_and_score(&rec, x.view(), &z).unwrap();
        for ((u, v), s) in a.to_flat().iter().zip(b.to_flat()).zip(score.to_flat()) {
            assert!((v - u + s).abs() < 1e-12);
        }
    }
}
