//! Exact ground truth for small models.
//!
//! Everything here enumerates all `2^M` latent configurations (or all trials
//! of a seeded Monte-Carlo run) and evaluates the objective from scratch, so
//! it shares no code path with the estimators beyond the network primitives.

use std::str::FromStr;

use ndarray::ArrayView1;
use rayon::prelude::*;

use crate::baseline::BaselineModel;
use crate::error::{Error, Result};
use crate::estimators::{estimate_lr, estimate_marginalized, lr_sample};
use crate::grad::GradientAccumulator;
use crate::net::{log_prob, log_prob_and_score, ModelParams, NoiseState, SampleState};
use crate::objective::Objective;
use crate::rng::{item_rng, STREAM_VERIFY};

/// Largest latent count accepted by the enumeration oracles.
pub const ENUMERATION_CAP: usize = 20;

const CHUNK: u64 = 1 << 12;

fn check_cap(rec: &ModelParams) -> Result<u64> {
    let m = rec.topology.num_latent();
    if m > ENUMERATION_CAP {
        return Err(Error::EnumerationCap { latent: m, cap: ENUMERATION_CAP });
    }
    Ok(1u64 << m)
}

/// Folds `visit` over all configurations in fixed-size chunks and combines the
/// chunk results in index order, so the result does not depend on threading.
fn enumerate_fold<T, V, C>(configs: u64, init: impl Fn() -> T + Sync, visit: V, combine: C) -> T
where
    T: Send,
    V: Fn(&mut T, u64) + Sync,
    C: Fn(&mut T, T),
{
    let chunks = configs.div_ceil(CHUNK);
    let partials: Vec<T> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for idx in c * CHUNK..((c + 1) * CHUNK).min(configs) {
                visit(&mut acc, idx);
            }
            acc
        })
        .collect();
    let mut total = init();
    for p in partials {
        combine(&mut total, p);
    }
    total
}

/// `F = sum_z q(z|x) f(x, z)`.
pub fn enumerate_expectation<O: Objective>(objective: &O, rec: &ModelParams, x: ArrayView1<'_, f64>) -> Result<f64> {
    let configs = check_cap(rec)?;
    log_prob(rec, x, &SampleState::zeros(&rec.topology))?;
    Ok(enumerate_fold(
        configs,
        || 0.0,
        |acc, idx| {
            let z = SampleState::from_index(&rec.topology, idx);
            let q = log_prob(rec, x, &z).expect("shapes checked").exp();
            *acc += q * objective.evaluate(rec, x, &z);
        },
        |a, b| *a += b,
    ))
}

/// `sum_z f(x, z) grad q(z|x)`, with `f` held fixed.
pub fn enumerate_gradient<O: Objective>(
    objective: &O,
    rec: &ModelParams,
    x: ArrayView1<'_, f64>,
) -> Result<GradientAccumulator> {
    let configs = check_cap(rec)?;
    log_prob(rec, x, &SampleState::zeros(&rec.topology))?;
    Ok(enumerate_fold(
        configs,
        || GradientAccumulator::zeros_like(rec),
        |acc, idx| {
            let z = SampleState::from_index(&rec.topology, idx);
            let (lq, score) = log_prob_and_score(rec, x, &z).expect("shapes checked");
            acc.add_scaled(lq.exp() * objective.evaluate(rec, x, &z), &score);
        },
        |a, b| a.add_assign(&b),
    ))
}

/// Central differences of [`enumerate_expectation`] in every recognition coordinate.
pub fn finite_diff_gradient<O: Objective>(
    objective: &O,
    rec: &ModelParams,
    x: ArrayView1<'_, f64>,
    h: f64,
) -> Result<GradientAccumulator> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!("finite-difference step must lie in [1e-7, 1e-3], got {h}")));
    }
    check_cap(rec)?;
    let mut grad = GradientAccumulator::zeros_like(rec);
    let mut flat = Vec::with_capacity(rec.num_params());
    for i in 0..rec.num_params() {
        let mut plus = rec.clone();
        *plus.param_mut(i) += h;
        let mut minus = rec.clone();
        *minus.param_mut(i) -= h;
        let up = enumerate_expectation(objective, &plus, x)?;
        let down = enumerate_expectation(objective, &minus, x)?;
        flat.push((up - down) / (2.0 * h));
    }
    let mut it = flat.into_iter();
    for layer in &mut grad.layers {
        layer.weight.iter_mut().chain(layer.bias.iter_mut()).for_each(|v| *v = it.next().unwrap());
    }
    Ok(grad)
}

/// Streaming central moments up to fourth order, per coordinate.
///
/// Updates and merges use the pairwise formulas of Pebay (2008), so chunked
/// accumulation combined in a fixed order is reproducible.
#[derive(Clone, Debug)]
pub struct MomentAccumulator {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    m3: Vec<f64>,
    m4: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        MomentAccumulator { n: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim], m3: vec![0.0; dim], m4: vec![0.0; dim] }
    }

    pub fn count(&self) -> usize {
        self.n as usize
    }

    pub fn push(&mut self, sample: &[f64]) {
        let n1 = self.n;
        self.n += 1.0;
        let n = self.n;
        for i in 0..sample.len() {
            let delta = sample[i] - self.mean[i];
            let dn = delta / n;
            let dn2 = dn * dn;
            let t1 = delta * dn * n1;
            self.mean[i] += dn;
            self.m4[i] += t1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2[i] - 4.0 * dn * self.m3[i];
            self.m3[i] += t1 * dn * (n - 2.0) - 3.0 * dn * self.m2[i];
            self.m2[i] += t1;
        }
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        if other.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.n, other.n);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            let (m2a, m3a, m4a) = (self.m2[i], self.m3[i], self.m4[i]);
            let (m2b, m3b, m4b) = (other.m2[i], other.m3[i], other.m4[i]);
            self.mean[i] += d * nb / n;
            self.m2[i] = m2a + m2b + d * d * na * nb / n;
            self.m3[i] = m3a + m3b + d.powi(3) * na * nb * (na - nb) / (n * n) + 3.0 * d * (na * m2b - nb * m2a) / n;
            self.m4[i] = m4a
                + m4b
                + d.powi(4) * na * nb * (na * na - na * nb + nb * nb) / n.powi(3)
                + 6.0 * d * d * (na * na * m2b + nb * nb * m2a) / (n * n)
                + 4.0 * d * (na * m3b - nb * m3a) / n;
        }
        self.n = n;
    }

    pub fn report(&self) -> MomentReport {
        let n = self.n;
        let dim = self.mean.len();
        let mut variance = vec![0.0; dim];
        let mut std_error = vec![0.0; dim];
        let mut variance_std_error = vec![0.0; dim];
        if n > 1.0 {
            for i in 0..dim {
                let var = (self.m2[i] / (n - 1.0)).max(0.0);
                variance[i] = var;
                std_error[i] = (var / n).sqrt();
                let sigma2 = self.m2[i] / n;
                let mu4 = self.m4[i] / n;
                variance_std_error[i] = ((mu4 - sigma2 * sigma2 * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt();
            }
        }
        MomentReport { trials: self.count(), mean: self.mean.clone(), variance, std_error, variance_std_error }
    }
}

/// Per-coordinate Monte-Carlo moments of an estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentReport {
    pub trials: usize,
    pub mean: Vec<f64>,
    /// Unbiased sample variance.
    pub variance: Vec<f64>,
    /// Standard error of `mean`.
    pub std_error: Vec<f64>,
    /// Large-sample standard error of `variance`.
    pub variance_std_error: Vec<f64>,
}

/// Baselines the harness can plug into the likelihood-ratio estimator.
#[derive(Clone, Debug)]
pub enum LrBaseline {
    /// Per-layer baseline from a (possibly input-dependent) model.
    Model(BaselineModel),
    /// One constant per flat recognition coordinate.
    PerCoordinate(Vec<f64>),
}

#[derive(Clone, Debug)]
pub enum EstimatorKind {
    Marginalized,
    LikelihoodRatio(LrBaseline),
}

impl FromStr for EstimatorKind {
    type Err = Error;

    /// `marginalized` or `lr` (zero baseline).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marginalized" => Ok(EstimatorKind::Marginalized),
            "lr" => Ok(EstimatorKind::LikelihoodRatio(LrBaseline::Model(BaselineModel::zero()))),
            other => Err(Error::UnknownEstimator(other.to_string())),
        }
    }
}

/// One estimate as a flat vector in parameter order.
pub fn estimate_flat<O: Objective>(
    kind: &EstimatorKind,
    objective: &O,
    rec: &ModelParams,
    x: ArrayView1<'_, f64>,
    noise: &NoiseState,
) -> Result<Vec<f64>> {
    match kind {
        EstimatorKind::Marginalized => Ok(estimate_marginalized(objective, rec, x, noise)?.to_flat()),
        EstimatorKind::LikelihoodRatio(LrBaseline::Model(b)) => {
            Ok(estimate_lr(objective, rec, b, x, noise)?.0.to_flat())
        }
        EstimatorKind::LikelihoodRatio(LrBaseline::PerCoordinate(b)) => {
            if b.len() != rec.num_params() {
                return Err(Error::Shape(format!("{} baselines for {} coordinates", b.len(), rec.num_params())));
            }
            let s = lr_sample(objective, rec, x, noise)?;
            Ok(s.score.to_flat().iter().zip(b).map(|(sc, bj)| (s.f - bj) * sc).collect())
        }
    }
}

/// Moments of an estimator over `trials` independent noise draws.
/// Trial `t` uses noise stream `t` of `seed`, whatever the thread count.
pub fn estimator_moments<O: Objective>(
    kind: &EstimatorKind,
    objective: &O,
    rec: &ModelParams,
    x: ArrayView1<'_, f64>,
    trials: usize,
    seed: u64,
) -> Result<MomentReport> {
    if trials < 1000 {
        return Err(Error::InvalidArgument(format!("need at least 1000 trials, got {trials}")));
    }
    let dim = rec.num_params();
    let chunk = 1024usize;
    let partials: Vec<MomentAccumulator> = (0..trials.div_ceil(chunk))
        .into_par_iter()
        .map(|c| -> Result<MomentAccumulator> {
            let mut acc = MomentAccumulator::new(dim);
            for t in c * chunk..((c + 1) * chunk).min(trials) {
                let mut rng = item_rng(seed, STREAM_VERIFY, t as u64);
                let noise = NoiseState::sample(&rec.topology, &mut rng);
                acc.push(&estimate_flat(kind, objective, rec, x, &noise)?);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = MomentAccumulator::new(dim);
    for p in &partials {
        total.merge(p);
    }
    Ok(total.report())
}

/// `(E[f s^2], E[s^2], E[f^2 s^2], E[f s])` for score coordinate `s`, by enumeration.
fn score_moments<O: Objective>(
    objective: &O,
    rec: &ModelParams,
    x: ArrayView1<'_, f64>,
    coordinate: usize,
) -> Result<[f64; 4]> {
    let configs = check_cap(rec)?;
    if coordinate >= rec.num_params() {
        return Err(Error::InvalidArgument(format!("coordinate {coordinate} out of range")));
    }
    log_prob(rec, x, &SampleState::zeros(&rec.topology))?;
    Ok(enumerate_fold(
        configs,
        || [0.0; 4],
        |acc, idx| {
            let z = SampleState::from_index(&rec.topology, idx);
            let (lq, score) = log_prob_and_score(rec, x, &z).expect("shapes checked");
            let s = score.to_flat()[coordinate];
            let q = lq.exp();
            let f = objective.evaluate(rec, x, &z);
            acc[0] += q * f * s * s;
            acc[1] += q * s * s;
            acc[2] += q * f * f * s * s;
            acc[3] += q * f * s;
        },
        |a, b| (0..4).for_each(|i| a[i] += b[i]),
    ))
}

/// Exact variance of the single-coordinate estimator `(f - b) s`.
pub fn lr_variance_enumerated<O: Objective>(
    objective: &O,
    rec: &ModelParams,
    x: ArrayView1<'_, f64>,
    coordinate: usize,
    b: f64,
) -> Result<f64> {
    let [efs2, es2, ef2s2, efs] = score_moments(objective, rec, x, coordinate)?;
    // E[(f - b)^2 s^2] - (E[(f - b) s])^2, with E[s] = 0
    Ok(ef2s2 - 2.0 * b * efs2 + b * b * es2 - efs * efs)
}

/// Variance-minimizing constant baseline `E[f s^2] / E[s^2]` for one coordinate.
pub fn optimal_baseline<O: Objective>(
    objective: &O,
    rec: &ModelParams,
    x: ArrayView1<'_, f64>,
    coordinate: usize,
) -> Result<f64> {
    let [efs2, es2, _, _] = score_moments(objective, rec, x, coordinate)?;
    if es2 <= 0.0 {
        return Err(Error::DegenerateCoordinate(coordinate));
    }
    Ok(efs2 / es2)
}

/// A finite joint distribution over `(X, Y)` with a value `h(x, y)` per cell.
#[derive(Clone, Debug)]
pub struct JointTable {
    /// `probs[x][y]`.
    pub probs: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

/// The two sides of `V h = E_X V_{Y|X} h + V_X E_{Y|X} h`.
#[derive(Clone, Copy, Debug)]
pub struct VariancePartition {
    pub total: f64,
    pub expected_conditional_variance: f64,
    pub variance_of_conditional_mean: f64,
}

impl JointTable {
    fn validate(&self) -> Result<()> {
        if self.probs.is_empty() || self.probs.len() != self.values.len() {
            return Err(Error::InvalidArgument("joint table needs matching, non-empty rows".into()));
        }
        let mut total = 0.0;
        for (p, v) in self.probs.iter().zip(&self.values) {
            if p.len() != v.len() || p.is_empty() {
                return Err(Error::InvalidArgument("joint table rows must match and be non-empty".into()));
            }
            if p.iter().any(|&q| !(q >= 0.0) || !q.is_finite()) || v.iter().any(|h| !h.is_finite()) {
                return Err(Error::InvalidArgument("joint table has negative or non-finite entries".into()));
            }
            total += p.iter().sum::<f64>();
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("joint probabilities sum to {total}")));
        }
        Ok(())
    }

    pub fn partition(&self) -> Result<VariancePartition> {
        self.validate()?;
        let cells = || self.probs.iter().flatten().zip(self.values.iter().flatten());
        let mean: f64 = cells().map(|(p, h)| p * h).sum();
        let total: f64 = cells().map(|(p, h)| p * (h - mean).powi(2)).sum();
        let mut expected_conditional_variance = 0.0;
        let mut variance_of_conditional_mean = 0.0;
        for (p, v) in self.probs.iter().zip(&self.values) {
            let px: f64 = p.iter().sum();
            if px == 0.0 {
                continue;
            }
            let cond_mean: f64 = p.iter().zip(v).map(|(q, h)| q * h).sum::<f64>() / px;
            let cond_var: f64 = p.iter().zip(v).map(|(q, h)| q * (h - cond_mean).powi(2)).sum::<f64>() / px;
            expected_conditional_variance += px * cond_var;
            variance_of_conditional_mean += px * (cond_mean - mean).powi(2);
        }
        Ok(VariancePartition { total, expected_conditional_variance, variance_of_conditional_mean })
    }
}

/// Whether the law of total variance holds on `table` to `1e-12`.
pub fn variance_partition_check(table: &JointTable) -> Result<bool> {
    let p = table.partition()?;
    let rhs = p.expected_conditional_variance + p.variance_of_conditional_mean;
    Ok((p.total - rhs).abs() <= 1e-12 * p.total.abs().max(1.0))
}
