//! Marginalized vs likelihood-ratio gradients on a model small enough to
//! enumerate. Both Monte Carlo means should sit within a few standard errors
//! of the exact gradient; the marginalized one with far smaller spread.
//!
//! cargo run --release --example estimator_comparison

use ndarray::Array1;
use sbn_grad::oracle::{enumerate_gradient, estimator_moments, EstimatorKind, LrBaseline};
use sbn_grad::{init_params, BaselineModel, Direction, ElboObjective, Topology};

pub fn run_example(trials: usize) -> sbn_grad::Result<()> {
    let topology = Topology::parse(6, "3-4", Direction::Generative)?;
    let gen = init_params(topology.clone(), 1.0, 11)?;
    let rec = init_params(topology.reversed(), 1.0, 12)?;
    let x = Array1::from(vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let objective = ElboObjective::new(&gen)?;

    let exact = enumerate_gradient(&objective, &rec, x.view())?.to_flat();
    let marginalized = estimator_moments(&EstimatorKind::Marginalized, &objective, &rec, x.view(), trials, 1)?;
    let lr = EstimatorKind::LikelihoodRatio(LrBaseline::Model(BaselineModel::zero()));
    let lr = estimator_moments(&lr, &objective, &rec, x.view(), trials, 1)?;

    println!("{:>16} {:>10} {:>21} {:>21}", "coordinate", "exact", "marginalized (sd)", "lr (sd)");
    for j in (0..exact.len()).filter(|&j| exact[j] != 0.0).take(12) {
        println!(
            "{:>16} {:>10.5} {:>10.5} ({:>8.4}) {:>10.5} ({:>8.4})",
            rec.coordinate_name(j),
            exact[j],
            marginalized.mean[j],
            marginalized.variance[j].sqrt(),
            lr.mean[j],
            lr.variance[j].sqrt(),
        );
    }
    let total = |v: &[f64]| v.iter().sum::<f64>();
    println!(
        "total variance over {} coordinates: marginalized {:.4e}, lr {:.4e}",
        exact.len(),
        total(&marginalized.variance),
        total(&lr.variance)
    );
    assert!(total(&marginalized.variance) < total(&lr.variance));
    Ok(())
}

#[allow(dead_code)]
fn main() -> sbn_grad::Result<()> {
    run_example(20_000)
}
