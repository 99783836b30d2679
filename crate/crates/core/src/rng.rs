//! Deterministic, hierarchically keyed random streams.
//!
//! Every stochastic step (replication, client, round) draws from its own
//! stream derived from a root seed and a path of integer labels, so results
//! never depend on scheduling order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

/// A node in the seed tree. Children are derived by mixing a label into the
/// parent key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTree {
    key: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { key: splitmix(seed) }
    }

    pub fn child(&self, label: u64) -> Self {
        Self {
            key: splitmix(self.key ^ splitmix(label.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    pub fn path(&self, labels: &[u64]) -> Self {
        labels.iter().fold(*self, |node, &l| node.child(l))
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn rng(&self) -> StreamRng {
        StreamRng::seed_from_u64(self.key)
    }
}
