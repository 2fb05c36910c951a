//! Trains the same SBN twice on synthetic binary images, once per gradient
//! estimator, and reports validation ELBO and the test bound of the best
//! checkpoint. Pass an output directory to keep metrics and checkpoints.
//!
//! cargo run --release --example train_synthetic [-- OUT_DIR]

use std::path::Path;

use sbn_grad::config::{Config, EstimatorChoice};
use sbn_grad::train::{load_data, train, TrainConfig};

pub fn run_example(updates: usize, out_dir: Option<&Path>) -> sbn_grad::Result<Vec<(EstimatorChoice, f64)>> {
    let mut config = Config { seed: 7, ..Config::default() };
    config.architecture = "8-16".into();
    config.synthetic_dim = 32;
    config.synthetic_train = 500;
    config.synthetic_valid = 200;
    config.synthetic_test = 200;
    config.batch_size = 50;
    config.learning_rate = 0.003;
    config.max_updates = updates;
    config.epochs = updates.div_ceil(10);
    config.validation_interval = (updates / 4).max(1);
    let data = load_data(&config)?;
    println!(
        "data: {} ({} train / {} valid / {} test)",
        data.provenance.source,
        data.train.len(),
        data.valid.len(),
        data.test.len()
    );

    let mut results = Vec::new();
    for estimator in [EstimatorChoice::Marginalized, EstimatorChoice::Lr] {
        config.estimator = estimator;
        let dir = out_dir.map(|d| d.join(estimator.to_string()));
        let report = train(&TrainConfig::from(&config), &data, dir.as_deref())?;
        println!("{estimator}:");
        for (step, elbo) in &report.validations {
            println!("  step {step:>6}  valid ELBO {elbo:>9.3}");
        }
        println!("  best step {}, test bound {:.3} nats", report.best_step, report.test_bound);
        results.push((estimator, report.final_valid_elbo()));
    }
    Ok(results)
}

#[allow(dead_code)]
fn main() -> sbn_grad::Result<()> {
    let out = std::env::args().nth(1);
    run_example(2000, out.as_deref().map(Path::new)).map(|_| ())
}
