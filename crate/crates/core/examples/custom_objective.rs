//! The estimators accept any objective of the sampled latents, not only the
//! ELBO. Here `f(z)` counts matching bits against a target pattern, and the
//! estimate is checked against brute-force enumeration.
//!
//! cargo run --release --example custom_objective

use ndarray::Array1;
use sbn_grad::oracle::enumerate_gradient;
use sbn_grad::{estimate_marginalized, init_params, Direction, FnObjective, GradientAccumulator, NoiseState, Topology};

pub fn run_example(samples: usize) -> sbn_grad::Result<f64> {
    let topology = Topology::parse(4, "2-3", Direction::Recognition)?;
    let rec = init_params(topology, 0.8, 5)?;
    let x = Array1::from(vec![0.0, 1.0, 1.0, 0.0]);
    let target = [[1.0, 0.0, 1.0].as_slice(), [0.0, 1.0].as_slice()];
    let objective = FnObjective::new(
        |_rec: &sbn_grad::ModelParams, _x: ndarray::ArrayView1<'_, f64>, z: &sbn_grad::SampleState| {
            z.layers
                .iter()
                .zip(target)
                .flat_map(|(l, t)| l.iter().zip(t))
                .map(|(a, b)| if a == b { 1.0 } else { 0.0 })
                .sum()
        },
    );

    let exact = enumerate_gradient(&objective, &rec, x.view())?.to_flat();
    let mut mean = GradientAccumulator::zeros_like(&rec);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    for _ in 0..samples {
        let noise = NoiseState::sample(&rec.topology, &mut rng);
        mean.add_scaled(1.0 / samples as f64, &estimate_marginalized(&objective, &rec, x.view(), &noise)?);
    }
    let err = mean.to_flat().iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("{} coordinates, {samples} samples: max |estimate - exact| = {err:.4}", exact.len());
    Ok(err)
}

#[allow(dead_code)]
fn main() -> sbn_grad::Result<()> {
    run_example(20_000).map(|_| ())
}
