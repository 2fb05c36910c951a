//! File formats: writes a small IDX image file, reads it back, binarizes it,
//! and round-trips a model through the text checkpoint format.
//!
//! cargo run --release --example idx_and_checkpoints

use sbn_grad::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use sbn_grad::data::{binarize, load_idx, IdxTensor};
use sbn_grad::{init_params, Direction, Topology};

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

pub fn run_example(dir: &std::path::Path) -> AnyResult<()> {
    let raw = IdxTensor { dims: vec![3, 4, 4], data: (0..48).map(|i| (i * 37 % 256) as u8).collect() };
    let path = dir.join("tiny-images-idx3-ubyte");
    std::fs::write(&path, raw.to_bytes())?;
    let loaded = load_idx(&path)?;
    assert_eq!(loaded, raw);
    let images = binarize(&loaded, 42)?;
    println!("{} images of {} pixels, digest {}", images.len(), images.dim(), images.digest());
    for i in 0..images.len() {
        let row: String = images.row(i).iter().map(|&b| if b == 1 { '#' } else { '.' }).collect();
        println!("  {row}");
    }

    let topology = Topology::parse(images.dim(), "2-3", Direction::Generative)?;
    let ckpt = Checkpoint {
        step: 0,
        generative: init_params(topology.clone(), 0.1, 1)?,
        recognition: init_params(topology.reversed(), 0.1, 2)?,
        baseline: None,
    };
    let ckpt_path = dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &ckpt)?;
    let back = load_checkpoint(&ckpt_path)?;
    assert_eq!(back.generative.to_flat(), ckpt.generative.to_flat());
    println!("checkpoint {} restored bit-exactly", ckpt_path.display());
    Ok(())
}

#[allow(dead_code)]
fn main() -> AnyResult<()> {
    let dir = std::env::temp_dir().join("sbn-grad-formats");
    std::fs::create_dir_all(&dir)?;
    run_example(&dir)
}
