//! The small-model oracle suite behind the `verify` command.
//!
//! Each random case is a generative/recognition pair with at most ten latent
//! units and one binary input. Every check becomes one record
//! `name,value,threshold,pass`.

use std::fmt::Write as _;

use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::baseline::BaselineModel;
use crate::error::{Error, Result};
use crate::estimators::marginal_pairs;
use crate::net::{Direction, ModelParams, NoiseState, Topology, UnitAddress};
use crate::objective::ElboObjective;
use crate::oracle::{
    enumerate_expectation, enumerate_gradient, estimator_moments, finite_diff_gradient, optimal_baseline,
    variance_partition_check, EstimatorKind, JointTable, LrBaseline, MomentReport,
};
use crate::rng::{derive_seed, item_rng, stream_rng, STREAM_VERIFY};

/// Largest latent count of a random verification case.
pub const MAX_CASE_LATENT: usize = 10;

/// Finite-difference step used by the suite.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the finite-difference relative error.
pub const FD_REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRecord {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl CheckRecord {
    /// Passes when `value <= threshold`.
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        CheckRecord { name: name.into(), value, threshold, pass: value <= threshold }
    }

    /// Passes when `value > threshold`.
    pub fn above(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        CheckRecord { name: name.into(), value, threshold, pass: value > threshold }
    }
}

pub fn report_csv(records: &[CheckRecord]) -> String {
    let mut out = String::from("name,value,threshold,pass\n");
    for r in records {
        let _ = writeln!(out, "{},{:e},{:e},{}", r.name, r.value, r.threshold, if r.pass { "pass" } else { "fail" });
    }
    out
}

/// A random model pair and one input image.
#[derive(Clone, Debug)]
pub struct VerifyCase {
    pub gen: ModelParams,
    pub rec: ModelParams,
    pub x: Array1<f64>,
}

impl VerifyCase {
    pub fn objective(&self) -> Result<ElboObjective<'_>> {
        ElboObjective::new(&self.gen)
    }
}

fn fill_normal(rng: &mut ChaCha8Rng, model: &mut ModelParams, weight_sd: f64, bias_sd: f64) {
    let w = Normal::new(0.0, weight_sd).expect("positive sd");
    let b = Normal::new(0.0, bias_sd).expect("positive sd");
    for layer in &mut model.layers {
        layer.weight.mapv_inplace(|_| w.sample(rng));
        layer.bias.mapv_inplace(|_| b.sample(rng));
    }
    if let Some(top) = &mut model.top_logits {
        top.mapv_inplace(|_| b.sample(rng));
    }
}

/// Case `index` of the suite rooted at `seed`: one to three latent layers of
/// one to four units (at most [`MAX_CASE_LATENT`] in total), Gaussian weights
/// and biases, and a random binary input of `data_dim` pixels.
pub fn random_case(seed: u64, index: u64, data_dim: usize) -> Result<VerifyCase> {
    let mut rng = item_rng(seed, STREAM_VERIFY, index);
    let depth = rng.random_range(1..=3usize);
    let mut latent: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=4usize)).collect();
    while latent.iter().sum::<usize>() > MAX_CASE_LATENT {
        let k = latent.iter().position(|&h| h > 1).expect("sum exceeds depth");
        latent[k] -= 1;
    }
    let topology = Topology::new(data_dim, latent, Direction::Generative)?;
    let mut gen = ModelParams::zeros(topology.clone());
    let mut rec = ModelParams::zeros(topology.reversed());
    fill_normal(&mut rng, &mut gen, 1.0, 1.0);
    fill_normal(&mut rng, &mut rec, 1.0, 1.0);
    let x = Array1::from_shape_fn(data_dim, |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    Ok(VerifyCase { gen, rec, x })
}

/// `max_i |a_i - b_i| / max(|b_i|, FD_REL_FLOOR)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(FD_REL_FLOOR)).fold(0.0, f64::max)
}

/// Largest `|mean_i - exact_i|` in units of the standard error. A tiny
/// absolute floor keeps zero-variance coordinates from dividing by zero.
pub fn max_z_score(report: &MomentReport, exact: &[f64]) -> f64 {
    report
        .mean
        .iter()
        .zip(&report.std_error)
        .zip(exact)
        .map(|((m, se), g)| (m - g).abs() / (se + 2.5e-10 * (1.0 + g.abs())))
        .fold(0.0, f64::max)
}

/// Largest `(Var_a - Var_b) / sqrt(se_a^2 + se_b^2)` over coordinates, where
/// `se` is the standard error of each variance estimate. Coordinates where
/// both variances vanish score zero.
pub fn max_variance_excess(a: &MomentReport, b: &MomentReport) -> f64 {
    (0..a.variance.len())
        .map(|i| {
            let diff = a.variance[i] - b.variance[i];
            let se = a.variance_std_error[i].hypot(b.variance_std_error[i]);
            if diff <= 0.0 {
                if se > 0.0 {
                    diff / se
                } else {
                    0.0
                }
            } else if se > 0.0 {
                diff / se
            } else {
                f64::INFINITY
            }
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Sample moments of `(f_0, f_1)` for one unit over fresh noise.
#[derive(Clone, Copy, Debug)]
pub struct CrnStatistics {
    pub var_f0: f64,
    pub var_f1: f64,
    pub cov: f64,
    /// Variance of `f_1 - f_0` computed from the differences directly.
    pub var_diff: f64,
    /// `|E f_0| + |E f_1|`.
    pub magnitude: f64,
}

impl CrnStatistics {
    /// `|Var(f1 - f0) - (Var f0 + Var f1 - 2 Cov)|` relative to the size of
    /// the terms being accumulated, `max(Var(f1 - f0), Var f0 + Var f1)`.
    ///
    /// When `f1 - f0` is nearly deterministic the right-hand side is a
    /// cancellation of two large numbers, and rounding error is proportional
    /// to `Var f0 + Var f1`, not to the tiny difference. When `f_0` and `f_1`
    /// themselves only vary in their last bits (a unit with no other noise
    /// upstream of `f`), the scale is floored at `(1e-6 * magnitude)^2`.
    pub fn identity_error(&self) -> f64 {
        let via = self.var_f0 + self.var_f1 - 2.0 * self.cov;
        let floor = (1e-6 * self.magnitude).powi(2);
        let scale = self.var_diff.abs().max(self.var_f0 + self.var_f1).max(floor);
        if scale == 0.0 {
            return 0.0;
        }
        (self.var_diff - via).abs() / scale
    }
}

/// `(f_0, f_1)` statistics of every latent unit from one shared set of draws.
pub fn crn_statistics(case: &VerifyCase, trials: usize, seed: u64) -> Result<Vec<(UnitAddress, CrnStatistics)>> {
    if trials < 2 {
        return Err(Error::InvalidArgument("need at least two trials".into()));
    }
    let objective = case.objective()?;
    let units: Vec<UnitAddress> = case.rec.topology.units().collect();
    let mut f0 = vec![Vec::with_capacity(trials); units.len()];
    let mut f1 = vec![Vec::with_capacity(trials); units.len()];
    for t in 0..trials {
        let noise = NoiseState::sample(&case.rec.topology, &mut item_rng(seed, STREAM_VERIFY, t as u64));
        let s = marginal_pairs(&objective, &case.rec, case.x.view(), &noise)?;
        for (j, &u) in units.iter().enumerate() {
            let (a, b) = s.pair(u);
            f0[j].push(a);
            f1[j].push(b);
        }
    }
    let n = trials as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    Ok(units
        .iter()
        .enumerate()
        .map(|(j, &u)| {
            let (a, b) = (&f0[j], &f1[j]);
            let (ma, mb) = (mean(a), mean(b));
            let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
            let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
            let stats = CrnStatistics {
                var_f0: var(a, ma),
                var_f1: var(b, mb),
                cov,
                var_diff: var(&d, mean(&d)),
                magnitude: ma.abs() + mb.abs(),
            };
            (u, stats)
        })
        .collect())
}

/// A random `rows x cols` joint table with Dirichlet-like weights and
/// Gaussian cell values.
pub fn random_joint_table(rng: &mut impl Rng, rows: usize, cols: usize) -> JointTable {
    let raw: Vec<Vec<f64>> =
        (0..rows).map(|_| (0..cols).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect()).collect();
    let total: f64 = raw.iter().flatten().sum();
    let normal = Normal::new(0.0, 3.0).expect("positive sd");
    JointTable {
        probs: raw.iter().map(|r| r.iter().map(|p| p / total).collect()).collect(),
        values: (0..rows).map(|_| (0..cols).map(|_| normal.sample(rng)).collect()).collect(),
    }
}

/// Moments of every estimator the suite compares on one case.
#[derive(Clone, Debug)]
pub struct CaseMoments {
    pub exact: Vec<f64>,
    pub marginalized: MomentReport,
    pub lr_zero: MomentReport,
    pub lr_mean: MomentReport,
    pub lr_optimal: MomentReport,
}

pub fn case_moments(case: &VerifyCase, trials: usize, seed: u64) -> Result<CaseMoments> {
    let objective = case.objective()?;
    let (rec, x) = (&case.rec, case.x.view());
    let exact = enumerate_gradient(&objective, rec, x)?.to_flat();
    let expected_f = enumerate_expectation(&objective, rec, x)?;
    let optimal = (0..rec.num_params())
        .map(|i| match optimal_baseline(&objective, rec, x, i) {
            Err(Error::DegenerateCoordinate(_)) => Ok(0.0),
            other => other,
        })
        .collect::<Result<Vec<_>>>()?;
    let run = |kind: EstimatorKind| estimator_moments(&kind, &objective, rec, x, trials, seed);
    Ok(CaseMoments {
        exact,
        marginalized: run(EstimatorKind::Marginalized)?,
        lr_zero: run(EstimatorKind::LikelihoodRatio(LrBaseline::Model(BaselineModel::zero())))?,
        lr_mean: run(EstimatorKind::LikelihoodRatio(LrBaseline::Model(BaselineModel::constant(expected_f))))?,
        lr_optimal: run(EstimatorKind::LikelihoodRatio(LrBaseline::PerCoordinate(optimal)))?,
    })
}

#[derive(Clone, Debug)]
pub struct VerifySettings {
    pub models: usize,
    pub trials: usize,
    pub data_dim: usize,
    pub seed: u64,
    pub joint_tables: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings { models: 20, trials: 100_000, data_dim: 4, seed: 1, joint_tables: 100 }
    }
}

/// Runs the suite. Every record is independent of thread count.
pub fn run_suite(settings: &VerifySettings) -> Result<Vec<CheckRecord>> {
    let mut records = Vec::new();
    let root = derive_seed(settings.seed, STREAM_VERIFY);
    for m in 0..settings.models {
        let case = random_case(root, m as u64, settings.data_dim)?;
        let name = |check: &str| format!("model{m:02}.{check}");
        let objective = case.objective()?;
        let exact = enumerate_gradient(&objective, &case.rec, case.x.view())?.to_flat();
        let fd = finite_diff_gradient(&objective, &case.rec, case.x.view(), FD_STEP)?.to_flat();
        records.push(CheckRecord::at_most(name("finite_difference_rel_error"), max_relative_error(&fd, &exact), 1e-6));

        let moments = case_moments(&case, settings.trials, derive_seed(root, 1000 + m as u64))?;
        records.push(CheckRecord::at_most(
            name("mean_z.marginalized"),
            max_z_score(&moments.marginalized, &exact),
            4.0,
        ));
        records.push(CheckRecord::at_most(name("mean_z.lr"), max_z_score(&moments.lr_zero, &exact), 4.0));
        for (label, lr) in [("zero", &moments.lr_zero), ("mean", &moments.lr_mean), ("optimal", &moments.lr_optimal)] {
            let excess = max_variance_excess(&moments.marginalized, lr);
            records.push(CheckRecord::at_most(name(&format!("variance_excess.baseline_{label}")), excess, 3.0));
        }

        let crn = crn_statistics(&case, settings.trials.min(20_000), derive_seed(root, 2000 + m as u64))?;
        let identity = crn.iter().map(|(_, s)| s.identity_error()).fold(0.0, f64::max);
        records.push(CheckRecord::at_most(name("crn_identity_rel_error"), identity, 1e-9));
        let with_descendants: Vec<f64> =
            crn.iter().filter(|(u, _)| u.layer + 1 < case.rec.topology.depth()).map(|(_, s)| s.cov).collect();
        if let Some(min_cov) = with_descendants.iter().copied().reduce(f64::min) {
            records.push(CheckRecord::above(name("crn_min_covariance"), min_cov, 0.0));
        }
    }

    let mut rng = stream_rng(root, 3);
    let mut failures = 0usize;
    for _ in 0..settings.joint_tables {
        if !variance_partition_check(&random_joint_table(&mut rng, 4, 4))? {
            failures += 1;
        }
    }
    records.push(CheckRecord::at_most("variance_partition_failures", failures as f64, 0.0));
    Ok(records)
}
