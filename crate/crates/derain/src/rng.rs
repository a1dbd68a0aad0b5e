//! Seeded random streams.
//!
//! Everything random in this crate draws from ChaCha streams addressed by
//! (seed, stream id). Streams are independent, so consumers can be added,
//! reordered, or parallelized without perturbing each other's draws; this is
//! what makes dataset entries, per-sample inference noise, and weight
//! initialization individually reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A ChaCha generator positioned on `stream` of the keyspace of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids, kept in one place so no two consumers collide.
pub mod streams {
    /// Weight initialization (one stream for the whole parameter store).
    pub const INIT: u64 = 1;
    /// Training-loop draws: epoch shuffles and per-example latent noise.
    pub const TRAIN: u64 = 2;
    /// Public `reparameterize` entry point.
    pub const REPARAM: u64 = 3;
    /// Dataset entry `i` gets stream `DATASET_BASE + i`.
    pub const DATASET_BASE: u64 = 1 << 32;
    /// Inference noise for (channel c, sample j): `INFER_BASE + (c << 40) + j`.
    pub const INFER_BASE: u64 = 1 << 48;

    pub fn dataset_entry(index: u64) -> u64 {
        DATASET_BASE + index
    }

    pub fn inference_sample(channel: usize, sample: u64) -> u64 {
        INFER_BASE + ((channel as u64) << 40) + sample
    }

    /// Example ordering of one training epoch.
    pub fn epoch_shuffle(epoch: u64) -> u64 {
        (1 << 18) + epoch
    }

    /// Latent noise of one optimizer step and channel.
    pub fn train_noise(step: u64, channel: usize) -> u64 {
        (1 << 20) + step * 4 + channel as u64
    }
}
