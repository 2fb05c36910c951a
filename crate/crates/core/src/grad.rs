use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::net::{LayerParams, ModelParams, ParamKind};

/// Per-parameter gradient, shaped like the [`ModelParams`] it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientAccumulator {
    pub layers: Vec<LayerParams>,
    pub top_logits: Option<Array1<f64>>,
}

impl LayerParams {
    /// `weight += outer(row_coeffs, parent)`, `bias += row_coeffs`.
    pub(crate) fn add_outer(&mut self, row_coeffs: &Array1<f64>, parent: ArrayView1<'_, f64>) {
        for (u, &c) in row_coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            self.weight.row_mut(u).scaled_add(c, &parent);
            self.bias[u] += c;
        }
    }
}

impl GradientAccumulator {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradientAccumulator {
            layers: params.layers.iter().map(|l| LayerParams::zeros(l.fan_out(), l.fan_in())).collect(),
            top_logits: params.top_logits.as_ref().map(|t| Array1::zeros(t.len())),
        }
    }

    pub fn arrays(&self) -> Vec<(ParamKind, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for layer in &self.layers {
            out.push((ParamKind::Weight, layer.weight.as_slice().expect("standard layout")));
            out.push((ParamKind::Bias, layer.bias.as_slice().expect("standard layout")));
        }
        if let Some(top) = &self.top_logits {
            out.push((ParamKind::TopLogit, top.as_slice().expect("standard layout")));
        }
        out
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for layer in &mut self.layers {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        if let Some(top) = &mut self.top_logits {
            out.push(top.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.arrays().into_iter().flat_map(|(_, a)| a.iter().copied()).collect()
    }

    pub fn add_assign(&mut self, other: &GradientAccumulator) {
        for (a, b) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (x, y) in a.iter_mut().zip(b.1) {
                *x += y;
            }
        }
    }

    pub fn add_scaled(&mut self, scale: f64, other: &GradientAccumulator) {
        for (a, b) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (x, y) in a.iter_mut().zip(b.1) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.arrays_mut() {
            a.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// First non-finite entry, as `(flat index, value)`.
    pub fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.arrays().into_iter().flat_map(|(_, a)| a.iter().copied()).enumerate().find(|(_, v)| !v.is_finite())
    }

    /// Errors with the offending coordinate named after `params`.
    pub fn ensure_finite(&self, params: &ModelParams, label: &str) -> Result<()> {
        match self.first_non_finite() {
            Some((i, value)) => {
                Err(Error::NonFinite { coordinate: format!("{label}.{}", params.coordinate_name(i)), value })
            }
            None => Ok(()),
        }
    }
}

/// Evaluates `items` in fixed-size chunks (in parallel) and merges the
/// results in index order. The chunking does not depend on the thread count,
/// so floating-point sums come out identical however the work is scheduled.
pub(crate) fn ordered_reduce<T, A, E, M>(items: &[T], chunk: usize, eval: E, merge: M) -> Result<Option<A>>
where
    T: Sync,
    A: Send,
    E: Fn(&T) -> Result<A> + Sync,
    M: Fn(&mut A, A) + Sync,
{
    use rayon::prelude::*;
    let partials: Vec<Option<A>> = items
        .par_chunks(chunk.max(1))
        .map(|c| {
            let mut acc: Option<A> = None;
            for item in c {
                let value = eval(item)?;
                match &mut acc {
                    Some(a) => merge(a, value),
                    None => acc = Some(value),
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total: Option<A> = None;
    for p in partials.into_iter().flatten() {
        match &mut total {
            Some(t) => merge(t, p),
            None => total = Some(p),
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Direction, Topology};

    #[test]
    fn mirrors_parameter_layout() {
        let p = ModelParams::zeros(Topology::new(3, vec![2, 4], Direction::Generative).unwrap());
        let g = GradientAccumulator::zeros_like(&p);
        assert_eq!(g.len(), p.num_params());
        let kinds: Vec<_> = g.arrays().iter().map(|(k, _)| *k).collect();
        let expected: Vec<_> = p.arrays().iter().map(|(k, _)| *k).collect();
        assert_eq!(kinds, expected);
    }

    #[test]
    fn ordered_reduce_is_independent_of_thread_count() {
        let items: Vec<f64> = (0..1000).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let run =
            |threads| {
                rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
                    ordered_reduce(&items, 7, |&v| Ok(v * 1e-3), |a: &mut f64, b| *a += b).unwrap().unwrap()
                })
            };
        assert_eq!(run(1).to_bits(), run(4).to_bits());
        assert!(ordered_reduce(&[] as &[f64], 7, |&v| Ok(v), |a: &mut f64, b| *a += b).unwrap().is_none());
    }

    #[test]
    fn non_finite_entries_are_named() {
        let p = ModelParams::zeros(Topology::new(3, vec![2], Direction::Recognition).unwrap());
        let mut g = GradientAccumulator::zeros_like(&p);
        g.layers[0].bias[1] = f64::NAN;
        let err = g.ensure_finite(&p, "rec").unwrap_err();
        assert!(err.to_string().contains("rec.layer0.bias[1]"), "{err}");
    }
}
