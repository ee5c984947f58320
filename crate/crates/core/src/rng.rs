//! Seeded random streams, split by purpose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

/// Independent seeds per pipeline stage, so changing one stage's seed leaves
/// the randomness of the others intact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub mask: u64,
    pub folds: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds {
            data: seed,
            init: seed,
            mask: seed,
            folds: seed,
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::all(0)
    }
}

/// A ChaCha stream for `seed`; distinct `stream` values never overlap.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
