//! Addressable random streams.
//!
//! Every random draw in the crate comes from an [`RngStream`], which is a
//! `(seed, stream)` pair. Identical addresses produce identical sequences, so
//! results never depend on thread scheduling: parallel work derives a child
//! stream from a fixed tag (σ index, trial id, data-point index) instead of
//! sharing a generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Child stream addressed by `tag`. Children of distinct parents or with
    /// distinct tags are distinct addresses.
    pub fn child(&self, tag: u64) -> Self {
        Self {
            seed: mix64(self.seed ^ mix64(self.stream)),
            stream: tag,
        }
    }

    /// Child addressed by a string label, for named purposes ("source", "target", ...).
    pub fn named(&self, label: &str) -> Self {
        let tag = label
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
        self.child(tag)
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}
