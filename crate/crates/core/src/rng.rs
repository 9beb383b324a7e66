//! Deterministic, splittable seeding.
//!
//! Every random stream in the crate is addressed by a path of integers below a
//! master seed, e.g. `(master, run, domain, node)`. A child key is derived from
//! its parent by one SplitMix64 finalization of `parent ^ golden * (index + 1)`,
//! so streams are independent of the order in which they are requested. Each
//! leaf key seeds a ChaCha8 generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A node in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedTree {
    key: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { key: seed }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Child stream `index`. `child(i)` and `child(j)` are unrelated for `i != j`.
    pub fn child(&self, index: u64) -> Self {
        Self {
            key: splitmix64(self.key ^ GOLDEN.wrapping_mul(index.wrapping_add(1))),
        }
    }

    /// Child addressed by a short text label, for named streams ("mixing", "weights", ...).
    pub fn named(&self, label: &str) -> Self {
        let index = label
            .bytes()
            .fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
                (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
            });
        self.child(index)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}
