//! Named random sub-streams derived from one master seed.
//!
//! Every consumer of randomness (partitioning, weight init, batching,
//! institution sampling, ...) gets its own ChaCha stream so that changing how
//! much randomness one consumer draws never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, name: &str) -> Rng {
        self.indexed(name, 0)
    }

    pub fn indexed(&self, name: &str, index: u64) -> Rng {
        Rng::seed_from_u64(self.derive(name, index))
    }

    pub fn derive(&self, name: &str, index: u64) -> u64 {
        let mut h = splitmix(self.master ^ 0x5EED_5EED_5EED_5EED);
        for b in name.bytes() {
            h = splitmix(h ^ u64::from(b));
        }
        splitmix(h ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
