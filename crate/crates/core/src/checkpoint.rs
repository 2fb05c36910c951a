//! Text checkpoints.
//!
//! ```text
//! sbn-grad checkpoint v1
//! step 5000
//! model generative
//! data_dim 64
//! latent 16-32
//! array layer0.weight 64 32
//! <one matrix row per line, space separated>
//! array layer0.bias 64
//! ...
//! end
//! model recognition
//! ...
//! end
//! baseline 2          # optional: number of regressors
//! running_mean <v>
//! decay <v>
//! array r0.hidden.weight ...
//! end
//! ```
//!
//! Floats are written in shortest round-trip exponent form, so a save/load
//! cycle reproduces every `f64` bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::baseline::{BaselineModel, Regressor};
use crate::error::{Error, Result};
use crate::net::{Direction, LayerParams, ModelParams, Topology};

const HEADER: &str = "sbn-grad checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub generative: ModelParams,
    pub recognition: ModelParams,
    pub baseline: Option<BaselineModel>,
}

fn write_matrix(out: &mut String, name: &str, m: &Array2<f64>) {
    let _ = writeln!(out, "array {name} {} {}", m.nrows(), m.ncols());
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

fn write_vector(out: &mut String, name: &str, v: &Array1<f64>) {
    let _ = writeln!(out, "array {name} {}", v.len());
    let line: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
    let _ = writeln!(out, "{}", line.join(" "));
}

fn write_layer(out: &mut String, prefix: &str, layer: &LayerParams) {
    write_matrix(out, &format!("{prefix}.weight"), &layer.weight);
    write_vector(out, &format!("{prefix}.bias"), &layer.bias);
}

fn write_model(out: &mut String, model: &ModelParams) {
    let t = &model.topology;
    let _ = writeln!(out, "model {}", t.direction().as_str());
    let _ = writeln!(out, "data_dim {}", t.data_dim());
    let _ = writeln!(out, "latent {}", t.notation());
    for (k, layer) in model.layers.iter().enumerate() {
        write_layer(out, &format!("layer{k}"), layer);
    }
    if let Some(top) = &model.top_logits {
        write_vector(out, "top_logits", top);
    }
    out.push_str("end\n");
}

fn write_baseline(out: &mut String, b: &BaselineModel) {
    let _ = writeln!(out, "baseline {}", b.regressors.len());
    let _ = writeln!(out, "running_mean {:e}", b.running_mean);
    let _ = writeln!(out, "decay {:e}", b.decay);
    for (k, r) in b.regressors.iter().enumerate() {
        write_layer(out, &format!("r{k}.hidden"), &r.hidden);
        write_layer(out, &format!("r{k}.output"), &r.output);
    }
    out.push_str("end\n");
}

/// A single network in the same format, without the step line.
pub fn model_to_text(model: &ModelParams) -> String {
    let mut out = format!("{HEADER}\n");
    write_model(&mut out, model);
    out
}

pub fn checkpoint_to_text(ckpt: &Checkpoint) -> String {
    let mut out = format!("{HEADER}\nstep {}\n", ckpt.step);
    write_model(&mut out, &ckpt.generative);
    write_model(&mut out, &ckpt.recognition);
    if let Some(b) = &ckpt.baseline {
        write_baseline(&mut out, b);
    }
    out
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Reader<'a> {
    fn err(line: usize, msg: impl std::fmt::Display) -> Error {
        Error::Format(format!("checkpoint line {}: {msg}", line + 1))
    }

    fn next(&mut self) -> Result<(usize, Vec<&'a str>)> {
        for (i, l) in self.lines.by_ref() {
            let tokens: Vec<&str> = l.split_whitespace().collect();
            if !tokens.is_empty() {
                return Ok((i, tokens));
            }
        }
        Err(Error::Format("checkpoint ends unexpectedly".into()))
    }

    fn peek_done(&self) -> bool {
        self.lines.clone().all(|(_, l)| l.trim().is_empty())
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (i, t) = self.next()?;
        if t[0] != key {
            return Err(Self::err(i, format!("expected `{key}`, found `{}`", t[0])));
        }
        Ok((i, t))
    }

    fn floats(&mut self, expected: usize) -> Result<Vec<f64>> {
        let (i, t) = self.next()?;
        if t.len() != expected {
            return Err(Self::err(i, format!("expected {expected} values, found {}", t.len())));
        }
        t.iter().map(|s| s.parse::<f64>().map_err(|e| Self::err(i, e))).collect()
    }

    fn parse_usize(i: usize, s: &str) -> Result<usize> {
        s.parse().map_err(|e| Self::err(i, e))
    }

    fn matrix(&mut self, name: &str) -> Result<Array2<f64>> {
        let (i, t) = self.keyed("array")?;
        if t.len() != 4 || t[1] != name {
            return Err(Self::err(i, format!("expected matrix `{name}`")));
        }
        let (rows, cols) = (Self::parse_usize(i, t[2])?, Self::parse_usize(i, t[3])?);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.floats(cols)?);
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("row count checked"))
    }

    fn vector(&mut self, name: &str) -> Result<Array1<f64>> {
        let (i, t) = self.keyed("array")?;
        if t.len() != 3 || t[1] != name {
            return Err(Self::err(i, format!("expected vector `{name}`")));
        }
        let n = Self::parse_usize(i, t[2])?;
        Ok(Array1::from(if n == 0 { Vec::new() } else { self.floats(n)? }))
    }

    fn layer(&mut self, prefix: &str) -> Result<LayerParams> {
        Ok(LayerParams {
            weight: self.matrix(&format!("{prefix}.weight"))?,
            bias: self.vector(&format!("{prefix}.bias"))?,
        })
    }

    fn model(&mut self) -> Result<ModelParams> {
        let (i, t) = self.keyed("model")?;
        let direction = match t.get(1) {
            Some(&"generative") => Direction::Generative,
            Some(&"recognition") => Direction::Recognition,
            _ => return Err(Self::err(i, "unknown model direction")),
        };
        let (i, t) = self.keyed("data_dim")?;
        let data_dim = Self::parse_usize(i, t.get(1).copied().unwrap_or(""))?;
        let (_, t) = self.keyed("latent")?;
        let topology = Topology::parse(data_dim, t.get(1).copied().unwrap_or(""), direction)?;
        let layers = (0..topology.depth()).map(|k| self.layer(&format!("layer{k}"))).collect::<Result<Vec<_>>>()?;
        let top_logits = match direction {
            Direction::Generative => Some(self.vector("top_logits")?),
            Direction::Recognition => None,
        };
        self.keyed("end")?;
        let model = ModelParams { topology, layers, top_logits };
        model.validate()?;
        Ok(model)
    }

    fn baseline(&mut self, count: usize) -> Result<BaselineModel> {
        let (i, t) = self.keyed("running_mean")?;
        let running_mean = t.get(1).unwrap_or(&"").parse().map_err(|e| Self::err(i, e))?;
        let (i, t) = self.keyed("decay")?;
        let decay = t.get(1).unwrap_or(&"").parse().map_err(|e| Self::err(i, e))?;
        let regressors = (0..count)
            .map(|k| {
                Ok(Regressor {
                    hidden: self.layer(&format!("r{k}.hidden"))?,
                    output: self.layer(&format!("r{k}.output"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.keyed("end")?;
        Ok(BaselineModel { running_mean, decay, regressors })
    }
}

fn reader(text: &str) -> Result<Reader<'_>> {
    let mut r = Reader { lines: text.lines().enumerate() };
    let (i, t) = r.next()?;
    if t.join(" ") != HEADER {
        return Err(Reader::err(i, format!("expected header `{HEADER}`")));
    }
    Ok(r)
}

pub fn model_from_text(text: &str) -> Result<ModelParams> {
    let mut r = reader(text)?;
    let m = r.model()?;
    if !r.peek_done() {
        return Err(Error::Format("trailing content after model".into()));
    }
    Ok(m)
}

pub fn checkpoint_from_text(text: &str) -> Result<Checkpoint> {
    let mut r = reader(text)?;
    let (i, t) = r.keyed("step")?;
    let step = Reader::parse_usize(i, t.get(1).copied().unwrap_or(""))?;
    let generative = r.model()?;
    let recognition = r.model()?;
    if generative.direction() != Direction::Generative || recognition.direction() != Direction::Recognition {
        return Err(Error::Format("checkpoint must hold a generative then a recognition model".into()));
    }
    if !generative.topology.same_shape(&recognition.topology) {
        return Err(Error::Format("checkpoint models have different shapes".into()));
    }
    let baseline = if r.peek_done() {
        None
    } else {
        let (i, t) = r.keyed("baseline")?;
        let count = Reader::parse_usize(i, t.get(1).copied().unwrap_or(""))?;
        let b = r.baseline(count)?;
        b.check(&recognition.topology)?;
        Some(b)
    };
    Ok(Checkpoint { step, generative, recognition, baseline })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_to_text(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;
    use proptest::prelude::*;

    fn pair(seed: u64) -> (ModelParams, ModelParams) {
        let t = Topology::parse(5, "2-3", Direction::Generative).unwrap();
        let mut gen = init_params(t.clone(), 0.7, seed).unwrap();
        gen.top_logits.as_mut().unwrap()[1] = -1.0 / 3.0;
        (gen, init_params(t.reversed(), 1e-3, seed + 1).unwrap())
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(seed in 0u64..1000, tiny in -1e-300f64..1e-300, big in -1e300f64..1e300) {
            let (mut gen, rec) = pair(seed);
            gen.layers[0].bias[0] = tiny;
            gen.layers[1].bias[1] = big;
            let baseline = BaselineModel::new(&rec.topology, 3, 0.9, 0.5, seed).unwrap();
            let ckpt = Checkpoint { step: seed as usize, generative: gen, recognition: rec, baseline: Some(baseline) };
            let back = checkpoint_from_text(&checkpoint_to_text(&ckpt)).unwrap();
            let bits = |c: &Checkpoint| -> Vec<u64> {
                c.generative.to_flat().into_iter().chain(c.recognition.to_flat()).map(f64::to_bits).collect()
            };
            prop_assert_eq!(bits(&back), bits(&ckpt));
            prop_assert_eq!(back, ckpt);
        }
    }

    #[test]
    fn single_model_round_trip() {
        let (gen, rec) = pair(3);
        assert_eq!(model_from_text(&model_to_text(&gen)).unwrap(), gen);
        assert_eq!(model_from_text(&model_to_text(&rec)).unwrap(), rec);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (gen, rec) = pair(4);
        let text = checkpoint_to_text(&Checkpoint { step: 1, generative: gen, recognition: rec, baseline: None });
        assert!(checkpoint_from_text(&text.replace("sbn-grad checkpoint v1", "other v9")).is_err());
        let truncated: String = text.lines().take(12).map(|l| format!("{l}\n")).collect();
        assert!(checkpoint_from_text(&truncated).is_err());
        assert!(checkpoint_from_text(&text.replacen("array layer0.bias 5", "array layer0.bias 4", 1)).is_err());
    }
}
