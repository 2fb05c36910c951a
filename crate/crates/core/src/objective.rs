//! The variational objective `f(x, z) = log p(x, z) - log q(z | x)`.
//!
//! Estimators only need `f` as a black box, so they are written against the
//! [`Objective`] trait. The ELBO implementation additionally supports cheap
//! re-evaluation at configurations that differ from a base sample in a few
//! bits: the logits of every layer are patched with the weight columns of
//! the flipped parents instead of being recomputed.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::grad::GradientAccumulator;
use crate::math::{layer_log_prob, sigmoid};
use crate::net::{log_prob_and_score, Direction, ForwardTrace, ModelParams, SampleState};

/// `f` together with its two components; `f == log_p - log_q`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub f: f64,
    pub log_p: f64,
    pub log_q: f64,
}

/// A function `f(x, z)` whose expectation under a recognition net is optimized.
///
/// The recognition parameters are passed in so that objectives such as the
/// ELBO, which contain `log q`, see the same parameters as the sampler.
pub trait Objective: Sync {
    /// State carried from a base evaluation to nearby ones.
    type Context: Send + Sync;

    fn evaluate(&self, rec: &ModelParams, x: ArrayView1<'_, f64>, z: &SampleState) -> f64;

    fn evaluate_base(&self, rec: &ModelParams, x: ArrayView1<'_, f64>, trace: &ForwardTrace) -> (f64, Self::Context);

    /// `f` at `z`, a configuration that differs from the base one in some bits.
    fn evaluate_near(&self, rec: &ModelParams, x: ArrayView1<'_, f64>, ctx: &Self::Context, z: &SampleState) -> f64;

    /// Per-sample gradient of `f` itself w.r.t. the recognition parameters, if requested.
    fn direct_gradient(
        &self,
        _rec: &ModelParams,
        _x: ArrayView1<'_, f64>,
        _z: &SampleState,
    ) -> Option<GradientAccumulator> {
        None
    }
}

/// Adapter for closures `f(rec, x, z)`; every evaluation is from scratch.
pub struct FnObjective<F>(F);

impl<F> FnObjective<F>
where
    F: Fn(&ModelParams, ArrayView1<'_, f64>, &SampleState) -> f64 + Sync,
{
    pub fn new(f: F) -> Self {
        FnObjective(f)
    }
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&ModelParams, ArrayView1<'_, f64>, &SampleState) -> f64 + Sync,
{
    type Context = ();

    fn evaluate(&self, rec: &ModelParams, x: ArrayView1<'_, f64>, z: &SampleState) -> f64 {
        (self.0)(rec, x, z)
    }

    fn evaluate_base(&self, rec: &ModelParams, x: ArrayView1<'_, f64>, trace: &ForwardTrace) -> (f64, ()) {
        ((self.0)(rec, x, &trace.z), ())
    }

    fn evaluate_near(&self, rec: &ModelParams, x: ArrayView1<'_, f64>, _: &(), z: &SampleState) -> f64 {
        (self.0)(rec, x, z)
    }
}

/// The evidence lower bound integrand for a generative net.
pub struct ElboObjective<'a> {
    gen: &'a ModelParams,
    /// Transposed generative weights; row `j` is the column for parent unit `j`.
    gen_columns: Vec<Array2<f64>>,
    log_p_offset: f64,
    include_direct_term: bool,
}

impl<'a> ElboObjective<'a> {
    pub fn new(gen: &'a ModelParams) -> Result<Self> {
        if gen.direction() != Direction::Generative {
            return Err(Error::InvalidArgument("ELBO needs a generative network".into()));
        }
        gen.validate()?;
        let gen_columns = gen.layers.iter().map(|l| l.weight.t().as_standard_layout().into_owned()).collect();
        Ok(ElboObjective { gen, gen_columns, log_p_offset: 0.0, include_direct_term: false })
    }

    /// Adds a constant to `log p`, as for an unnormalized model.
    pub fn with_log_p_offset(mut self, offset: f64) -> Self {
        self.log_p_offset = offset;
        self
    }

    /// Also report the `-grad log q(z|x)` term that comes from `f`'s own
    /// dependence on the recognition parameters. It has zero mean.
    pub fn with_direct_term(mut self, include: bool) -> Self {
        self.include_direct_term = include;
        self
    }

    pub fn generative(&self) -> &ModelParams {
        self.gen
    }

    pub fn value(&self, rec: &ModelParams, x: ArrayView1<'_, f64>, z: &SampleState) -> Result<ObjectiveValue> {
        let log_p = log_p_joint(self.gen, x, z)? + self.log_p_offset;
        let log_q = crate::net::log_prob(rec, x, z)?;
        Ok(ObjectiveValue { f: log_p - log_q, log_p, log_q })
    }

    fn check_pair(&self, rec: &ModelParams) {
        debug_assert!(self.gen.topology.same_shape(&rec.topology), "generative and recognition shapes differ");
    }
}

/// Cached per-layer logits and log-probability terms of a base sample.
pub struct ElboContext {
    z: SampleState,
    rec_logits: Vec<Array1<f64>>,
    rec_terms: Vec<f64>,
    data_logits: Array1<f64>,
    data_term: f64,
    /// Generative logits of each latent depth (top logits for the deepest).
    gen_logits: Vec<Array1<f64>>,
    gen_terms: Vec<f64>,
}

fn patched(base: &Array1<f64>, columns: &Array2<f64>, changed: &[(usize, f64)]) -> Array1<f64> {
    let mut a = base.clone();
    for &(j, delta) in changed {
        a.scaled_add(delta, &columns.row(j));
    }
    a
}

/// Change of `sum_j bit_j a_j - softplus(a_j)` when only bits move: the
/// softplus part depends on the logits alone and cancels.
fn own_bits_delta(logits: &Array1<f64>, changed: &[(usize, f64)]) -> f64 {
    changed.iter().map(|&(j, delta)| delta * logits[j]).sum()
}

impl Objective for ElboObjective<'_> {
    type Context = ElboContext;

    fn evaluate(&self, rec: &ModelParams, x: ArrayView1<'_, f64>, z: &SampleState) -> f64 {
        self.value(rec, x, z).expect("shapes checked by caller").f
    }

    fn evaluate_base(&self, rec: &ModelParams, x: ArrayView1<'_, f64>, trace: &ForwardTrace) -> (f64, ElboContext) {
        self.check_pair(rec);
        let z = &trace.z;
        let depth = z.layers.len();
        let rec_terms: Vec<f64> =
            (0..depth).map(|k| layer_log_prob(z.layers[k].view(), trace.logits[k].view())).collect();
        let data_logits = self.gen.layers[0].weight.dot(&z.layers[0]) + &self.gen.layers[0].bias;
        let data_term = layer_log_prob(x, data_logits.view());
        let mut gen_logits = Vec::with_capacity(depth);
        for k in 0..depth {
            let a = if k + 1 < depth {
                self.gen.layers[k + 1].weight.dot(&z.layers[k + 1]) + &self.gen.layers[k + 1].bias
            } else {
                self.gen.top_logits.clone().expect("generative nets carry top logits")
            };
            gen_logits.push(a);
        }
        let gen_terms: Vec<f64> =
            (0..depth).map(|k| layer_log_prob(z.layers[k].view(), gen_logits[k].view())).collect();
        let log_p = data_term + gen_terms.iter().sum::<f64>() + self.log_p_offset;
        let log_q: f64 = rec_terms.iter().sum();
        let ctx = ElboContext {
            z: z.clone(),
            rec_logits: trace.logits.clone(),
            rec_terms,
            data_logits,
            data_term,
            gen_logits,
            gen_terms,
        };
        (log_p - log_q, ctx)
    }

    fn evaluate_near(&self, rec: &ModelParams, x: ArrayView1<'_, f64>, ctx: &ElboContext, z: &SampleState) -> f64 {
        let depth = z.layers.len();
        let changed: Vec<Vec<(usize, f64)>> = z
            .layers
            .iter()
            .zip(&ctx.z.layers)
            .map(|(new, old)| {
                new.iter().zip(old).enumerate().filter(|(_, (a, b))| a != b).map(|(j, (a, b))| (j, a - b)).collect()
            })
            .collect();

        let mut log_q = 0.0;
        for k in 0..depth {
            let parent_changed = k > 0 && !changed[k - 1].is_empty();
            if parent_changed {
                let mut a = ctx.rec_logits[k].clone();
                let w = &rec.layers[k].weight;
                for &(j, delta) in &changed[k - 1] {
                    a.scaled_add(delta, &w.column(j));
                }
                log_q += layer_log_prob(z.layers[k].view(), a.view());
            } else {
                log_q += ctx.rec_terms[k] + own_bits_delta(&ctx.rec_logits[k], &changed[k]);
            }
        }

        let mut log_p = if changed[0].is_empty() {
            ctx.data_term
        } else {
            let a = patched(&ctx.data_logits, &self.gen_columns[0], &changed[0]);
            layer_log_prob(x, a.view())
        };
        for k in 0..depth {
            let parent_changed = k + 1 < depth && !changed[k + 1].is_empty();
            log_p += if parent_changed {
                let a = patched(&ctx.gen_logits[k], &self.gen_columns[k + 1], &changed[k + 1]);
                layer_log_prob(z.layers[k].view(), a.view())
            } else {
                ctx.gen_terms[k] + own_bits_delta(&ctx.gen_logits[k], &changed[k])
            };
        }
        log_p + self.log_p_offset - log_q
    }

    fn direct_gradient(
        &self,
        rec: &ModelParams,
        x: ArrayView1<'_, f64>,
        z: &SampleState,
    ) -> Option<GradientAccumulator> {
        if !self.include_direct_term {
            return None;
        }
        let (_, mut score) = log_prob_and_score(rec, x, z).expect("shapes checked by caller");
        score.scale(-1.0);
        Some(score)
    }
}

fn check_generative(gen: &ModelParams, x: ArrayView1<'_, f64>, z: &SampleState) -> Result<()> {
    if gen.direction() != Direction::Generative {
        return Err(Error::InvalidArgument("expected a generative network".into()));
    }
    if x.len() != gen.topology.data_dim() {
        return Err(Error::Shape(format!("input has {} entries, model expects {}", x.len(), gen.topology.data_dim())));
    }
    z.check(&gen.topology)
}

/// `log p(x, z)`: top-layer prior, every latent layer given the one above, and the data.
pub fn log_p_joint(gen: &ModelParams, x: ArrayView1<'_, f64>, z: &SampleState) -> Result<f64> {
    check_generative(gen, x, z)?;
    let depth = gen.topology.depth();
    let top = gen.top_logits.as_ref().ok_or_else(|| Error::Shape("missing top logits".into()))?;
    let mut total = layer_log_prob(z.layers[depth - 1].view(), top.view());
    for k in 1..depth {
        let a = gen.layers[k].logits(z.layers[k].view())?;
        total += layer_log_prob(z.layers[k - 1].view(), a.view());
    }
    let a = gen.layers[0].logits(z.layers[0].view())?;
    total += layer_log_prob(x, a.view());
    Ok(total)
}

/// `f(x, z) = log p(x, z) - log q(z | x)` with its components.
pub fn elbo_f(gen: &ModelParams, rec: &ModelParams, x: ArrayView1<'_, f64>, z: &SampleState) -> Result<ObjectiveValue> {
    if !gen.topology.same_shape(&rec.topology) {
        return Err(Error::Shape(format!("generative {} vs recognition {}", gen.topology, rec.topology)));
    }
    ElboObjective::new(gen)?.value(rec, x, z)
}

/// Analytic `grad_theta log p(x, z)` of the generative parameters.
pub fn grad_generative(gen: &ModelParams, x: ArrayView1<'_, f64>, z: &SampleState) -> Result<GradientAccumulator> {
    check_generative(gen, x, z)?;
    let depth = gen.topology.depth();
    let mut grad = GradientAccumulator::zeros_like(gen);
    let top = gen.top_logits.as_ref().ok_or_else(|| Error::Shape("missing top logits".into()))?;
    let top_grad = &z.layers[depth - 1] - &top.mapv(sigmoid);
    grad.top_logits = Some(top_grad);
    for k in 0..depth {
        let target = if k == 0 { x } else { z.layers[k - 1].view() };
        let a = gen.layers[k].logits(z.layers[k].view())?;
        let residual = ndarray::Zip::from(target).and(&a).map_collect(|&t, &l| t - sigmoid(l));
        grad.layers[k].add_outer(&residual, z.layers[k].view());
    }
    Ok(grad)
}
