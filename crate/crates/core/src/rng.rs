//! Seeded random streams.
//!
//! Every trial owns one seed. Each consumer draws from its own ChaCha stream
//! so that adding draws to one purpose never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fixed stream indices, one per randomness consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Substream {
    WorldLayout = 1,
    TaskSampling = 2,
    RenderNoise = 3,
    IrDropout = 4,
    Execution = 5,
    Calibration = 6,
    SegmentationCorruption = 7,
    PoseNoise = 8,
}

pub fn stream(seed: u64, substream: Substream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(substream as u64);
    rng
}

/// Stream for one indexed item (a frame, an image row) within a substream.
pub fn indexed_stream(seed: u64, substream: Substream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, index));
    rng.set_stream(substream as u64);
    rng
}

/// SplitMix64 finalizer over the pair.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
