//! Deterministic stream derivation.
//!
//! Every stochastic site in the pipeline draws from a generator seeded by
//! mixing the run seed with structural indices (epoch, example, user). Streams
//! therefore never depend on thread count or iteration interleaving.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// First label of the per-example training streams.
pub const TRAIN_STREAM: u64 = 1;
/// First label of the per-epoch batch-shuffling streams.
pub const BATCH_STREAM: u64 = 2;
/// First label of the per-user evaluation sampling streams.
pub const EVAL_STREAM: u64 = 3;
/// First label of the parameter initialization stream.
pub const INIT_STREAM: u64 = 4;

/// SplitMix64 finalizer; decorrelates consecutive seeds.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Mixes a base seed with a list of stream labels into a single derived seed.
pub fn mix(seed: u64, labels: &[u64]) -> u64 {
    let mut acc = splitmix64(seed);
    for &l in labels {
        acc = splitmix64(acc ^ splitmix64(l));
    }
    acc
}

/// Generator for the derived stream `labels` under `seed`.
pub fn stream(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, labels))
}
