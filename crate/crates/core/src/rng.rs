//! Seed derivation.
//!
//! Every random stream is derived from one root seed: the stream for
//! subsystem `s` is `ChaCha8(derive_seed(root, s))`, and per-item streams
//! (minibatch elements, profiler trials) use the ChaCha stream id to index
//! the item. Stream ids are the `STREAM_*` constants below.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT_GENERATIVE: u64 = 1;
pub const STREAM_INIT_RECOGNITION: u64 = 2;
pub const STREAM_INIT_BASELINE: u64 = 3;
pub const STREAM_DATA: u64 = 4;
pub const STREAM_SHUFFLE: u64 = 5;
pub const STREAM_TRAIN_NOISE: u64 = 6;
pub const STREAM_EVAL_NOISE: u64 = 7;
pub const STREAM_PROFILE: u64 = 8;
pub const STREAM_VERIFY: u64 = 9;

/// SplitMix64 finalizer over `root ^ stream`-style mixing.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(root: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream))
}

/// Independent generator for item `index` of a derived stream.
pub fn item_rng(root: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = stream_rng(root, stream);
    rng.set_stream(index);
    rng
}
