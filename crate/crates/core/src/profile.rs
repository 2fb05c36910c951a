//! Layer-wise variance of per-unit gradient estimates.
//!
//! For every latent unit the profiler records one scalar per noise draw: the
//! estimator's gradient with respect to that unit's Bernoulli mean
//! (`f_1 - f_0` for the marginalized estimator, `(f - b)(z - mu) / (mu (1 -
//! mu))` for the likelihood-ratio one), or, in logit space, the same quantity
//! times `mu (1 - mu)`. Variances are pooled over all images and draws, then
//! averaged over the units of each layer.

use std::fmt;
use std::str::FromStr;

use crate::baseline::BaselineModel;
use crate::data::BinaryImages;
use crate::error::{Error, Result};
use crate::estimators::marginal_pairs;
use crate::grad::ordered_reduce;
use crate::net::{forward_trace, ModelParams, NoiseState};
use crate::objective::{ElboObjective, Objective};
use crate::oracle::MomentAccumulator;
use crate::rng::{item_rng, STREAM_PROFILE};

/// Parameterization the per-unit gradient is taken in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GradientSpace {
    /// With respect to the unit's mean `mu`.
    #[default]
    Mean,
    /// With respect to the unit's logit (its bias).
    Logit,
}

impl FromStr for GradientSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(GradientSpace::Mean),
            "logit" => Ok(GradientSpace::Logit),
            other => Err(Error::InvalidArgument(format!("unknown gradient space `{other}`"))),
        }
    }
}

/// An estimator as the profiler sees it.
#[derive(Clone, Debug)]
pub enum ProfiledEstimator {
    Marginalized,
    /// Likelihood ratio with the given per-layer baseline.
    LikelihoodRatio(BaselineModel),
}

impl ProfiledEstimator {
    pub fn name(&self) -> &'static str {
        match self {
            ProfiledEstimator::Marginalized => "marginalized",
            ProfiledEstimator::LikelihoodRatio(_) => "lr",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceReport {
    pub estimator: String,
    /// Mean per-unit variance, indexed by depth (0 is next to the data).
    pub layer_variance: Vec<f64>,
    /// Per-unit variances behind the layer means.
    pub unit_variance: Vec<Vec<f64>>,
    /// Noise draws per unit (images times samples per image).
    pub samples: usize,
}

impl fmt::Display for VarianceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} samples):", self.estimator, self.samples)?;
        for (k, v) in self.layer_variance.iter().enumerate() {
            write!(f, " layer{k}={v:.4e}")?;
        }
        Ok(())
    }
}

/// Per-unit values of every estimator for one noise draw, concatenated.
fn unit_values(
    estimators: &[ProfiledEstimator],
    objective: &ElboObjective<'_>,
    rec: &ModelParams,
    x: ndarray::ArrayView1<'_, f64>,
    noise: &NoiseState,
    space: GradientSpace,
) -> Result<Vec<f64>> {
    let m = rec.topology.num_latent();
    let mut out = Vec::with_capacity(m * estimators.len());
    let jacobian = |mu: f64| match space {
        GradientSpace::Mean => 1.0,
        GradientSpace::Logit => mu * (1.0 - mu),
    };
    for est in estimators {
        match est {
            ProfiledEstimator::Marginalized => {
                let s = marginal_pairs(objective, rec, x, noise)?;
                for (pairs, means) in s.pairs.iter().zip(&s.trace.means) {
                    out.extend(pairs.iter().zip(means).map(|(&(f0, f1), &mu)| (f1 - f0) * jacobian(mu)));
                }
            }
            ProfiledEstimator::LikelihoodRatio(baseline) => {
                let trace = forward_trace(rec, x, noise)?;
                let f = objective.evaluate(rec, x, &trace.z);
                let b = baseline.values(x, &trace.z);
                for (k, (z, means)) in trace.z.layers.iter().zip(&trace.means).enumerate() {
                    out.extend(z.iter().zip(means).map(|(&z, &mu)| {
                        let d = (f - b[k]) * (z - mu);
                        match space {
                            GradientSpace::Mean => d / (mu * (1.0 - mu)),
                            GradientSpace::Logit => d,
                        }
                    }));
                }
            }
        }
    }
    Ok(out)
}

/// Per-layer variance of each estimator's per-unit gradient.
///
/// All estimators see the same images and the same noise draws; draw `s` of
/// image `i` uses stream `i * samples_per_image + s` of `seed`.
pub fn profile_variance(
    gen: &ModelParams,
    rec: &ModelParams,
    images: &BinaryImages,
    samples_per_image: usize,
    estimators: &[ProfiledEstimator],
    space: GradientSpace,
    seed: u64,
) -> Result<Vec<VarianceReport>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("cannot profile on an empty dataset".into()));
    }
    if samples_per_image < 2 {
        return Err(Error::InvalidArgument("profiling needs at least two samples per image".into()));
    }
    for est in estimators {
        if let ProfiledEstimator::LikelihoodRatio(b) = est {
            b.check(&rec.topology)?;
        }
    }
    let objective = ElboObjective::new(gen)?;
    let m = rec.topology.num_latent();
    let dim = m * estimators.len();
    let draws: Vec<(usize, usize)> =
        (0..images.len()).flat_map(|i| (0..samples_per_image).map(move |s| (i, s))).collect();
    let moments = ordered_reduce(
        &draws,
        64,
        |&(i, s)| {
            let x = images.image(i);
            let mut rng = item_rng(seed, STREAM_PROFILE, (i * samples_per_image + s) as u64);
            let noise = NoiseState::sample(&rec.topology, &mut rng);
            let mut acc = MomentAccumulator::new(dim);
            acc.push(&unit_values(estimators, &objective, rec, x.view(), &noise, space)?);
            Ok(acc)
        },
        |a, b| a.merge(&b),
    )?
    .expect("non-empty draws")
    .report();

    let sizes = rec.topology.latent_sizes();
    Ok(estimators
        .iter()
        .enumerate()
        .map(|(e, est)| {
            let mut offset = e * m;
            let unit_variance: Vec<Vec<f64>> = sizes
                .iter()
                .map(|&h| {
                    let v = moments.variance[offset..offset + h].to_vec();
                    offset += h;
                    v
                })
                .collect();
            VarianceReport {
                estimator: est.name().to_string(),
                layer_variance: unit_variance.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect(),
                unit_variance,
                samples: draws.len(),
            }
        })
        .collect())
}
