//! Per-layer variance of each estimator's per-unit gradient, with every
//! estimator fed the same images and noise draws.
//!
//! cargo run --release --example variance_profile

use sbn_grad::data::synthetic_splits;
use sbn_grad::profile::{profile_variance, GradientSpace, ProfiledEstimator};
use sbn_grad::{init_params, BaselineModel, Direction, Topology};

pub fn run_example(images: usize, samples: usize) -> sbn_grad::Result<()> {
    let data = synthetic_splits(images, 1, 1, 32, 3)?;
    let topology = Topology::parse(32, "8-16", Direction::Generative)?;
    let gen = init_params(topology.clone(), 0.5, 1)?;
    let rec = init_params(topology.reversed(), 0.5, 2)?;
    let estimators = [
        ProfiledEstimator::Marginalized,
        ProfiledEstimator::LikelihoodRatio(BaselineModel::zero()),
        ProfiledEstimator::LikelihoodRatio(BaselineModel::constant(-22.0)),
    ];
    for space in [GradientSpace::Mean, GradientSpace::Logit] {
        println!("{space:?} space:");
        for report in profile_variance(&gen, &rec, &data.train, samples, &estimators, space, 9)? {
            println!("  {report}");
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> sbn_grad::Result<()> {
    run_example(50, 100)
}
