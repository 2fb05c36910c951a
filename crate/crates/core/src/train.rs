//! RMSprop training of a generative/recognition pair.
//!
//! Each update draws a minibatch, reparameterizes one latent sample per image
//! and follows three gradients: `grad log p(x, z)` for the generative net, the
//! chosen estimator for the recognition net, and (likelihood-ratio runs only)
//! the squared residual of the learned baseline. Parameters move by RMSprop on
//! the negated bound; weight decay touches weight matrices only.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::baseline::{BaselineModel, LearningSignals};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::{Config, DataSource, EstimatorChoice};
use crate::data::{load_mnist, synthetic_splits, BinaryDataset, BinaryImages};
use crate::error::{Error, Result};
use crate::estimators::{assemble_marginalized, estimate_lr, marginal_pairs};
use crate::grad::{ordered_reduce, GradientAccumulator};
use crate::net::{init_params, reparam_forward, Direction, ModelParams, NoiseState, ParamKind, Topology};
use crate::objective::{grad_generative, ElboObjective, Objective};
use crate::rng::{
    derive_seed, item_rng, STREAM_DATA, STREAM_EVAL_NOISE, STREAM_INIT_BASELINE, STREAM_INIT_GENERATIVE,
    STREAM_INIT_RECOGNITION, STREAM_SHUFFLE, STREAM_TRAIN_NOISE,
};

/// Images per parallel work unit; fixed so sums do not depend on thread count.
const CHUNK: usize = 10;

/// Squared-gradient accumulators for one set of parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropState {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    /// Lazily sized on the first step.
    pub accumulators: Vec<Vec<f64>>,
}

impl RmsPropState {
    pub fn new(learning_rate: f64, decay: f64, epsilon: f64) -> Self {
        RmsPropState { learning_rate, decay, epsilon, accumulators: Vec::new() }
    }

    /// Descends `loss_grads`; `weight_decay * w` is added to weight entries.
    pub fn apply(
        &mut self,
        params: Vec<(ParamKind, &mut [f64])>,
        loss_grads: Vec<(ParamKind, &[f64])>,
        weight_decay: f64,
    ) -> Result<()> {
        if params.len() != loss_grads.len() || params.iter().zip(&loss_grads).any(|(p, g)| p.1.len() != g.1.len()) {
            return Err(Error::Shape("gradient layout does not match parameters".into()));
        }
        if self.accumulators.is_empty() {
            self.accumulators = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        } else if self.accumulators.len() != params.len()
            || self.accumulators.iter().zip(&params).any(|(a, p)| a.len() != p.1.len())
        {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        let (rho, lr, eps) = (self.decay, self.learning_rate, self.epsilon);
        for (((kind, p), (_, g)), acc) in params.into_iter().zip(loss_grads).zip(&mut self.accumulators) {
            let wd = if kind == ParamKind::Weight { weight_decay } else { 0.0 };
            for ((w, &d), a) in p.iter_mut().zip(g).zip(acc.iter_mut()) {
                let g = d + wd * *w;
                *a = rho * *a + (1.0 - rho) * g * g;
                *w -= lr * g / (*a + eps).sqrt();
            }
        }
        Ok(())
    }
}

/// One RMSprop step on a network, descending `loss_grad`.
pub fn rmsprop_step(
    params: &mut ModelParams,
    loss_grad: &GradientAccumulator,
    state: &mut RmsPropState,
    weight_decay: f64,
) -> Result<()> {
    state.apply(params.arrays_mut(), loss_grad.arrays(), weight_decay)
}

/// Training hyperparameters, usually taken from a [`Config`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub architecture: String,
    pub estimator: EstimatorChoice,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub epochs: usize,
    pub max_updates: usize,
    pub validation_interval: usize,
    pub init_scale: f64,
    pub baseline_hidden: usize,
    pub baseline_decay: f64,
    pub baseline_init_scale: f64,
    pub include_direct_term: bool,
    pub valid_samples: usize,
    pub test_samples: usize,
}

impl From<&Config> for TrainConfig {
    fn from(c: &Config) -> Self {
        TrainConfig {
            seed: c.seed,
            architecture: c.architecture.clone(),
            estimator: c.estimator,
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            weight_decay: c.weight_decay,
            rmsprop_decay: c.rmsprop_decay,
            rmsprop_epsilon: c.rmsprop_epsilon,
            epochs: c.epochs,
            max_updates: c.max_updates,
            validation_interval: c.validation_interval,
            init_scale: c.init_scale,
            baseline_hidden: c.baseline_hidden,
            baseline_decay: c.baseline_decay,
            baseline_init_scale: c.baseline_init_scale,
            include_direct_term: c.include_direct_term,
            valid_samples: c.valid_samples,
            test_samples: c.test_samples,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::from(&Config::default())
    }
}

/// The dataset a configuration names; its seed derives from the root seed.
pub fn load_data(config: &Config) -> Result<BinaryDataset> {
    let seed = derive_seed(config.seed, STREAM_DATA);
    match config.data {
        DataSource::Synthetic => synthetic_splits(
            config.synthetic_train,
            config.synthetic_valid,
            config.synthetic_test,
            config.synthetic_dim,
            seed,
        ),
        DataSource::Mnist => {
            if config.mnist_dir.is_empty() {
                return Err(Error::Config("data = mnist needs mnist_dir".into()));
            }
            load_mnist(&config.mnist_dir, seed)
        }
    }
}

/// Evaluation noise seed for a split (0 validation, 1 test) under `root`.
pub fn eval_noise_seed(root: u64, split: u64) -> u64 {
    derive_seed(derive_seed(root, STREAM_EVAL_NOISE), split)
}

/// Mean over images of `-(1/S) sum_s f(x, z_s)`, in nats per image.
///
/// Sample `s` of image `i` uses noise stream `i * samples + s` of `seed`, so
/// repeated calls (and different models) see the same noise.
pub fn evaluate_bound(
    gen: &ModelParams,
    rec: &ModelParams,
    images: &BinaryImages,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate a bound on an empty dataset".into()));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("bound evaluation needs at least one sample".into()));
    }
    let objective = ElboObjective::new(gen)?;
    let indices: Vec<usize> = (0..images.len()).collect();
    let total = ordered_reduce(
        &indices,
        CHUNK,
        |&i| {
            let x = images.image(i);
            let mut sum = 0.0;
            for s in 0..samples {
                let mut rng = item_rng(seed, STREAM_EVAL_NOISE, (i * samples + s) as u64);
                let z = reparam_forward(rec, x.view(), &NoiseState::sample(&rec.topology, &mut rng))?;
                sum += objective.evaluate(rec, x.view(), &z);
            }
            Ok(sum / samples as f64)
        },
        |a: &mut f64, b| *a += b,
    )?
    .expect("non-empty dataset");
    Ok(-total / images.len() as f64)
}

/// One `step,split,metric,value` record.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    fn new(step: usize, split: &str, metric: &str, value: f64) -> Self {
        MetricRecord { step, split: split.into(), metric: metric.into(), value }
    }

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{:e}", self.step, self.split, self.metric, self.value)
    }
}

/// Per-minibatch totals, merged in image order.
struct BatchSum {
    rec: GradientAccumulator,
    gen: GradientAccumulator,
    f: f64,
    signals: Vec<LearningSignals>,
}

impl BatchSum {
    fn merge(&mut self, other: BatchSum) {
        self.rec.add_assign(&other.rec);
        self.gen.add_assign(&other.gen);
        self.f += other.f;
        self.signals.extend(other.signals);
    }
}

/// Mutable training state: both networks, the baseline and optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub gen: ModelParams,
    pub rec: ModelParams,
    /// Present for likelihood-ratio runs.
    pub baseline: Option<BaselineModel>,
    pub step: usize,
    gen_opt: RmsPropState,
    rec_opt: RmsPropState,
    baseline_opt: RmsPropState,
    order: Vec<usize>,
    epoch: usize,
    cursor: usize,
    /// Sum and count of minibatch mean `f` since the last validation.
    train_f: (f64, usize),
}

impl Trainer {
    pub fn new(config: TrainConfig, data_dim: usize) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let topology = Topology::parse(data_dim, &config.architecture, Direction::Generative)?;
        let gen = init_params(topology.clone(), config.init_scale, derive_seed(config.seed, STREAM_INIT_GENERATIVE))?;
        let rec =
            init_params(topology.reversed(), config.init_scale, derive_seed(config.seed, STREAM_INIT_RECOGNITION))?;
        let baseline = match config.estimator {
            EstimatorChoice::Marginalized => None,
            EstimatorChoice::Lr => Some(BaselineModel::new(
                &rec.topology,
                config.baseline_hidden,
                config.baseline_decay,
                config.baseline_init_scale,
                derive_seed(config.seed, STREAM_INIT_BASELINE),
            )?),
        };
        let opt = RmsPropState::new(config.learning_rate, config.rmsprop_decay, config.rmsprop_epsilon);
        Ok(Trainer {
            gen,
            rec,
            baseline,
            step: 0,
            gen_opt: opt.clone(),
            rec_opt: opt.clone(),
            baseline_opt: opt,
            order: Vec::new(),
            epoch: 0,
            cursor: 0,
            train_f: (0.0, 0),
            config,
        })
    }

    /// Full minibatches per pass over `n` images.
    pub fn updates_per_epoch(&self, n: usize) -> usize {
        n / self.config.batch_size
    }

    /// Updates a full run performs on `n` training images.
    pub fn planned_updates(&self, n: usize) -> usize {
        let total = self.config.epochs * self.updates_per_epoch(n);
        if self.config.max_updates > 0 {
            total.min(self.config.max_updates)
        } else {
            total
        }
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let b = self.config.batch_size;
        if self.order.is_empty() || self.cursor + b > self.order.len() {
            self.order = epoch_order(self.config.seed, self.epoch as u64, n);
            self.epoch += 1;
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        batch
    }

    fn example(
        &self,
        objective: &ElboObjective<'_>,
        images: &BinaryImages,
        slot: usize,
        image: usize,
    ) -> Result<BatchSum> {
        let x = images.image(image);
        let x = x.view();
        let index = (self.step * self.config.batch_size + slot) as u64;
        let mut rng = item_rng(self.config.seed, STREAM_TRAIN_NOISE, index);
        let noise = NoiseState::sample(&self.rec.topology, &mut rng);
        match &self.baseline {
            None => {
                let sample = marginal_pairs(objective, &self.rec, x, &noise)?;
                let mut rec = assemble_marginalized(&self.rec, x, &sample.trace, &sample.pairs);
                if let Some(direct) = objective.direct_gradient(&self.rec, x, &sample.trace.z) {
                    rec.add_assign(&direct);
                }
                let gen = grad_generative(&self.gen, x, &sample.trace.z)?;
                Ok(BatchSum { rec, gen, f: sample.f, signals: Vec::new() })
            }
            Some(baseline) => {
                let (rec, signals) = estimate_lr(objective, &self.rec, baseline, x, &noise)?;
                let z = reparam_forward(&self.rec, x, &noise)?;
                let gen = grad_generative(&self.gen, x, &z)?;
                Ok(BatchSum { rec, gen, f: signals.f, signals: vec![signals] })
            }
        }
    }

    /// One minibatch update. Returns the minibatch mean of `f`.
    pub fn step(&mut self, images: &BinaryImages) -> Result<f64> {
        if images.len() < self.config.batch_size {
            return Err(Error::InvalidArgument(format!(
                "{} training images cannot fill a batch of {}",
                images.len(),
                self.config.batch_size
            )));
        }
        let batch = self.next_batch(images.len());
        let slots: Vec<(usize, usize)> = batch.into_iter().enumerate().collect();
        let sum = {
            let objective = ElboObjective::new(&self.gen)?.with_direct_term(self.config.include_direct_term);
            ordered_reduce(&slots, CHUNK, |&(slot, i)| self.example(&objective, images, slot, i), BatchSum::merge)?
                .expect("batch is non-empty")
        };
        let scale = -1.0 / slots.len() as f64;
        let (mut rec_loss, mut gen_loss) = (sum.rec, sum.gen);
        rec_loss.scale(scale);
        gen_loss.scale(scale);
        rec_loss.ensure_finite(&self.rec, "recognition")?;
        gen_loss.ensure_finite(&self.gen, "generative")?;

        let wd = self.config.weight_decay;
        rmsprop_step(&mut self.gen, &gen_loss, &mut self.gen_opt, wd)?;
        rmsprop_step(&mut self.rec, &rec_loss, &mut self.rec_opt, wd)?;
        if let Some(baseline) = &mut self.baseline {
            let grad = baseline.regressor_gradient(&sum.signals);
            if let Some((i, v)) =
                grad.arrays().iter().flat_map(|(_, a)| a.iter()).enumerate().find(|(_, v)| !v.is_finite())
            {
                return Err(Error::NonFinite { coordinate: format!("baseline[{i}]"), value: *v });
            }
            self.baseline_opt.apply(baseline.arrays_mut(), grad.arrays(), 0.0)?;
            baseline.update_running_mean(&sum.signals);
        }
        self.step += 1;
        let mean_f = sum.f / slots.len() as f64;
        self.train_f.0 += mean_f;
        self.train_f.1 += 1;
        Ok(mean_f)
    }

    /// Validation ELBO (not the negated bound) under the fixed evaluation noise.
    pub fn validation_elbo(&self, valid: &BinaryImages) -> Result<f64> {
        Ok(-evaluate_bound(&self.gen, &self.rec, valid, self.config.valid_samples, self.eval_seed(0))?)
    }

    fn eval_seed(&self, split: u64) -> u64 {
        eval_noise_seed(self.config.seed, split)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            generative: self.gen.clone(),
            recognition: self.rec.clone(),
            baseline: self.baseline.clone(),
        }
    }

    /// Mean training `f` since the previous call.
    fn take_train_f(&mut self) -> Option<f64> {
        let (sum, n) = std::mem::take(&mut self.train_f);
        (n > 0).then(|| sum / n as f64)
    }
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainingReport {
    pub metrics: Vec<MetricRecord>,
    pub updates: usize,
    /// `(step, validation ELBO)` at every validation.
    pub validations: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_valid_elbo: f64,
    /// Test bound (nats per image) of the best checkpoint.
    pub test_bound: f64,
    pub best: Checkpoint,
    pub last: Checkpoint,
}

impl TrainingReport {
    pub fn initial_valid_elbo(&self) -> f64 {
        self.validations[0].1
    }

    pub fn final_valid_elbo(&self) -> f64 {
        self.validations.last().expect("validated at step 0").1
    }
}

/// Where [`train`] writes its files.
#[derive(Debug)]
struct Outputs {
    dir: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        let ckpt_dir = dir.join("checkpoints");
        std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
            Ok(w)
        };
        Ok(Outputs {
            metrics: open("metrics.csv", "step,split,metric,value")?,
            timing: open("timing.csv", "step,seconds")?,
            dir: dir.to_path_buf(),
        })
    }

    fn record(&mut self, records: &[MetricRecord], seconds: f64) -> Result<()> {
        let path = self.dir.join("metrics.csv");
        let io = |e| Error::io(&path, e);
        for r in records {
            writeln!(self.metrics, "{}", r.to_csv()).map_err(io)?;
        }
        self.metrics.flush().map_err(io)?;
        if let Some(r) = records.first() {
            writeln!(self.timing, "{},{seconds:.3}", r.step).map_err(io)?;
            self.timing.flush().map_err(io)?;
        }
        Ok(())
    }

    fn checkpoint(&self, ckpt: &Checkpoint) -> Result<String> {
        let name = format!("step-{:08}.ckpt", ckpt.step);
        save_checkpoint(self.dir.join("checkpoints").join(&name), ckpt)?;
        Ok(name)
    }

    fn best_index(&self, name: &str, step: usize, elbo: f64) -> Result<()> {
        let path = self.dir.join("best.index");
        let text = format!("checkpoint checkpoints/{name}\nstep {step}\nvalid_elbo {elbo:e}\n");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Runs the full protocol: validate at step 0 and every
/// `validation_interval` updates, keep the best-validation model, and report
/// its test bound. With `out_dir`, metrics, timings, a checkpoint per
/// validation and `best.index` are written there.
pub fn train(config: &TrainConfig, data: &BinaryDataset, out_dir: Option<&Path>) -> Result<TrainingReport> {
    let mut trainer = Trainer::new(config.clone(), data.dim())?;
    train_with(&mut trainer, data, out_dir, |_| Ok(()))
}

/// [`train`] on an existing trainer, calling `on_step` after every update.
pub fn train_with(
    trainer: &mut Trainer,
    data: &BinaryDataset,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&Trainer) -> Result<()>,
) -> Result<TrainingReport> {
    let start = Instant::now();
    let mut outputs = out_dir.map(Outputs::create).transpose()?;
    let total = trainer.planned_updates(data.train.len());
    let interval = trainer.config.validation_interval.max(1);
    let mut metrics = Vec::new();
    let mut validations = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;

    let mut validate = |trainer: &mut Trainer, metrics: &mut Vec<MetricRecord>| -> Result<()> {
        let step = trainer.step;
        let elbo = trainer.validation_elbo(&data.valid)?;
        let mut records = Vec::new();
        if let Some(f) = trainer.take_train_f() {
            records.push(MetricRecord::new(step, "train", "elbo", f));
        }
        records.push(MetricRecord::new(step, "valid", "elbo", elbo));
        let ckpt = trainer.checkpoint();
        let improved = best.as_ref().is_none_or(|(b, _)| elbo > *b);
        if let Some(out) = &mut outputs {
            out.record(&records, start.elapsed().as_secs_f64())?;
            let name = out.checkpoint(&ckpt)?;
            if improved {
                out.best_index(&name, step, elbo)?;
            }
        }
        if improved {
            best = Some((elbo, ckpt));
        }
        validations.push((step, elbo));
        metrics.extend(records);
        Ok(())
    };

    validate(trainer, &mut metrics)?;
    while trainer.step < total {
        trainer.step(&data.train)?;
        on_step(trainer)?;
        if trainer.step.is_multiple_of(interval) || trainer.step == total {
            validate(trainer, &mut metrics)?;
        }
    }

    let (best_valid_elbo, best) = best.expect("validated at step 0");
    let test_bound = evaluate_bound(
        &best.generative,
        &best.recognition,
        &data.test,
        trainer.config.test_samples,
        trainer.eval_seed(1),
    )?;
    let test_record = MetricRecord::new(best.step, "test", "bound", test_bound);
    if let Some(out) = &mut outputs {
        out.record(std::slice::from_ref(&test_record), start.elapsed().as_secs_f64())?;
    }
    metrics.push(test_record);
    Ok(TrainingReport {
        metrics,
        updates: trainer.step,
        validations,
        best_step: best.step,
        best_valid_elbo,
        test_bound,
        best,
        last: trainer.checkpoint(),
    })
}

/// Visiting order of the training images in epoch `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut item_rng(seed, STREAM_SHUFFLE, epoch));
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_splits;
    use crate::net::LayerParams;
    use crate::oracle::enumerate_expectation;
    use ndarray::array;
    use rand::Rng;

    fn tiny_data(seed: u64) -> BinaryDataset {
        synthetic_splits(200, 50, 50, 3, seed).unwrap()
    }

    fn tiny_config(seed: u64, estimator: EstimatorChoice) -> TrainConfig {
        TrainConfig {
            seed,
            architecture: "4".into(),
            estimator,
            learning_rate: 0.01,
            batch_size: 20,
            epochs: 20,
            validation_interval: 50,
            init_scale: 0.1,
            baseline_hidden: 8,
            valid_samples: 5,
            test_samples: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = ModelParams::zeros(Topology::parse(3, "2", Direction::Generative).unwrap());
        p.layers[0].weight.fill(0.5);
        let before = p.clone();
        let g = GradientAccumulator::zeros_like(&p);
        let mut state = RmsPropState::new(0.001, 0.9, 1e-8);
        rmsprop_step(&mut p, &g, &mut state, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_step_approaches_learning_rate() {
        let mut w = vec![0.0; 2];
        let mut state = RmsPropState::new(0.001, 0.9, 1e-8);
        let mut last = vec![0.0; 2];
        for _ in 0..200 {
            let before = w.clone();
            state.apply(vec![(ParamKind::Bias, &mut w[..])], vec![(ParamKind::Bias, &[3.0, -0.2][..])], 0.0).unwrap();
            last = w.iter().zip(&before).map(|(a, b)| a - b).collect();
        }
        assert!((last[0] + 0.001).abs() < 1e-6, "{last:?}");
        assert!((last[1] - 0.001).abs() < 1e-6, "{last:?}");
        assert!(state.accumulators.iter().flatten().all(|&a| a >= 0.0));
    }

    #[test]
    fn one_step_descends_a_quadratic_bowl() {
        let mut rng = rand::rng();
        for _ in 0..50 {
            let mut w: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let loss = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>();
            let before = loss(&w);
            let g: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
            RmsPropState::new(1e-3, 0.9, 1e-8)
                .apply(vec![(ParamKind::Weight, &mut w[..])], vec![(ParamKind::Weight, &g[..])], 0.0)
                .unwrap();
            assert!(loss(&w) < before);
        }
    }

    #[test]
    fn weight_decay_skips_biases_and_top_logits() {
        let t = Topology::parse(3, "2-2", Direction::Generative).unwrap();
        let mut p = ModelParams::zeros(t);
        for (_, a) in p.arrays_mut() {
            a.fill(1.0);
        }
        let before = p.clone();
        rmsprop_step(&mut p, &GradientAccumulator::zeros_like(&before), &mut RmsPropState::new(0.01, 0.9, 1e-8), 0.1)
            .unwrap();
        for ((kind, new), (_, old)) in p.arrays().into_iter().zip(before.arrays()) {
            let moved = new.iter().zip(old).map(|(a, b)| a != b).collect::<Vec<_>>();
            assert!(moved.iter().all(|&m| m == (kind == ParamKind::Weight)), "{kind:?}");
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut a = ModelParams::zeros(Topology::parse(3, "2", Direction::Generative).unwrap());
        let b = ModelParams::zeros(Topology::parse(3, "3", Direction::Generative).unwrap());
        let mut state = RmsPropState::new(0.01, 0.9, 1e-8);
        assert!(rmsprop_step(&mut a, &GradientAccumulator::zeros_like(&b), &mut state, 0.0).is_err());
        let ga = GradientAccumulator::zeros_like(&a);
        rmsprop_step(&mut a, &ga, &mut state, 0.0).unwrap();
        let mut c = ModelParams::zeros(Topology::parse(4, "2", Direction::Generative).unwrap());
        let gc = GradientAccumulator::zeros_like(&c);
        assert!(rmsprop_step(&mut c, &gc, &mut state, 0.0).is_err());
    }

    #[test]
    fn uniform_model_bound_is_d_log_two() {
        let t = Topology::parse(3, "2", Direction::Generative).unwrap();
        let gen = ModelParams::zeros(t.clone());
        let rec = ModelParams::zeros(t.reversed());
        let images = BinaryImages::from_bits(3, vec![1, 0, 1, 0, 0, 0, 1, 1, 1]).unwrap();
        let bound = evaluate_bound(&gen, &rec, &images, 3, 1).unwrap();
        let objective = ElboObjective::new(&gen).unwrap();
        let exact =
            (0..3).map(|i| -enumerate_expectation(&objective, &rec, images.image(i).view()).unwrap()).sum::<f64>()
                / 3.0;
        assert!((bound - 3.0 * 2f64.ln()).abs() < 1e-12);
        assert!((exact - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_image_bound_matches_direct_average() {
        let t = Topology::parse(3, "2", Direction::Generative).unwrap();
        let gen = init_params(t.clone(), 1.0, 5).unwrap();
        let rec = init_params(t.reversed(), 1.0, 6).unwrap();
        let images = BinaryImages::from_bits(3, vec![1, 0, 1]).unwrap();
        let bound = evaluate_bound(&gen, &rec, &images, 4, 9).unwrap();
        let objective = ElboObjective::new(&gen).unwrap();
        let x = images.image(0);
        let direct = -(0..4)
            .map(|s| {
                let noise = NoiseState::sample(&rec.topology, &mut item_rng(9, STREAM_EVAL_NOISE, s));
                objective.evaluate(&rec, x.view(), &reparam_forward(&rec, x.view(), &noise).unwrap())
            })
            .sum::<f64>()
            / 4.0;
        assert_eq!(bound, direct);
    }

    #[test]
    fn more_samples_agree_statistically() {
        let t = Topology::parse(3, "2-2", Direction::Generative).unwrap();
        let gen = init_params(t.clone(), 1.5, 1).unwrap();
        let rec = init_params(t.reversed(), 1.5, 2).unwrap();
        let images = tiny_data(3).train;
        let objective = ElboObjective::new(&gen).unwrap();
        let exact = (0..images.len())
            .map(|i| -enumerate_expectation(&objective, &rec, images.image(i).view()).unwrap())
            .sum::<f64>()
            / images.len() as f64;
        let one = evaluate_bound(&gen, &rec, &images, 1, 4).unwrap();
        let many = evaluate_bound(&gen, &rec, &images, 100, 4).unwrap();
        // per-image f has spread well under 10 nats here; 200 images
        let se_one = 10.0 / (images.len() as f64).sqrt();
        assert!(many <= one + 3.0 * se_one);
        assert!((many - exact).abs() < 3.0 * se_one / 10.0, "{many} vs {exact}");
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let t = Topology::parse(3, "2", Direction::Generative).unwrap();
        let gen = ModelParams::zeros(t.clone());
        let empty = BinaryImages::from_bits(3, vec![]).unwrap();
        assert!(evaluate_bound(&gen, &ModelParams::zeros(t.reversed()), &empty, 1, 1).is_err());
    }

    #[test]
    fn zero_epochs_only_validates_once() {
        let cfg = TrainConfig { epochs: 0, ..tiny_config(1, EstimatorChoice::Marginalized) };
        let report = train(&cfg, &tiny_data(1), None).unwrap();
        assert_eq!(report.updates, 0);
        assert_eq!(report.validations.len(), 1);
        assert_eq!(report.metrics.iter().filter(|m| m.split == "valid").count(), 1);
    }

    #[test]
    fn smoke_training_improves_validation_bound() {
        let mut improved = 0;
        for seed in 0..5 {
            let cfg = TrainConfig { max_updates: 200, ..tiny_config(seed, EstimatorChoice::Marginalized) };
            let report = train(&cfg, &tiny_data(100 + seed), None).unwrap();
            assert_eq!(report.updates, 200);
            if report.final_valid_elbo() > report.initial_valid_elbo() {
                improved += 1;
            }
        }
        assert!(improved >= 4, "{improved}/5");
    }

    #[test]
    fn replay_is_bit_identical() {
        for estimator in [EstimatorChoice::Marginalized, EstimatorChoice::Lr] {
            let cfg = TrainConfig { max_updates: 60, validation_interval: 20, ..tiny_config(3, estimator) };
            let data = tiny_data(3);
            let a = train(&cfg, &data, None).unwrap();
            let b = rayon::ThreadPoolBuilder::new()
                .num_threads(3)
                .build()
                .unwrap()
                .install(|| train(&cfg, &data, None))
                .unwrap();
            let bits =
                |r: &TrainingReport| r.metrics.iter().map(|m| (m.to_csv(), m.value.to_bits())).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
            assert_eq!(a.last, b.last);
        }
    }

    #[test]
    fn best_checkpoint_has_maximal_validation_elbo() {
        let cfg = TrainConfig { max_updates: 150, validation_interval: 25, ..tiny_config(7, EstimatorChoice::Lr) };
        let data = tiny_data(7);
        let report = train(&cfg, &data, None).unwrap();
        let max = report.validations.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(report.best_valid_elbo, max);
        let (step, _) = report.validations.iter().find(|v| v.1 == max).unwrap();
        assert_eq!(report.best_step, *step);
        let trainer = Trainer {
            gen: report.best.generative.clone(),
            rec: report.best.recognition.clone(),
            ..Trainer::new(cfg, 3).unwrap()
        };
        assert_eq!(trainer.validation_elbo(&data.valid).unwrap(), max);
    }

    #[test]
    fn non_finite_gradient_aborts_with_coordinate() {
        let mut trainer = Trainer::new(tiny_config(1, EstimatorChoice::Marginalized), 3).unwrap();
        trainer.gen.layers[0] = LayerParams {
            weight: array![[f64::NAN, 0.0, 0.0, 0.0], [0.0; 4], [0.0; 4]],
            ..trainer.gen.layers[0].clone()
        };
        let err = trainer.step(&tiny_data(1).train).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
        assert!(err.to_string().contains("layer0"), "{err}");
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { max_updates: 40, validation_interval: 20, ..tiny_config(2, EstimatorChoice::Lr) };
        train(&cfg, &tiny_data(2), Some(dir.path())).unwrap();
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("step,split,metric,value\n0,valid,elbo,"));
        assert!(metrics.contains("\n40,train,elbo,"));
        let index = std::fs::read_to_string(dir.path().join("best.index")).unwrap();
        let name = index.lines().next().unwrap().strip_prefix("checkpoint ").unwrap();
        let ckpt = crate::checkpoint::load_checkpoint(dir.path().join(name)).unwrap();
        assert!(ckpt.baseline.is_some());
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(1, 0, 50);
        assert_ne!(o, (0..50).collect::<Vec<_>>());
        o.sort();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }
}
