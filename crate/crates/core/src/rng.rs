//! Deterministic random streams keyed by (seed, purpose, indices).
//!
//! Every stochastic component draws from its own stream so that, for
//! instance, the batch order of epoch 7 does not depend on how many
//! augmentation draws happened in epoch 6.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purposes of the independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Subset = 4,
    LabelPermutation = 5,
    NoisePairing = 6,
    NoiseData = 7,
    FisherInputs = 8,
    FisherLabels = 9,
    Variational = 10,
    GradStats = 11,
    Synthetic = 12,
    Arm = 13,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(stream as u64));
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    h
}

pub fn stream(seed: u64, stream: Stream, indices: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, stream, indices))
}
