//! Independent RNG streams keyed by purpose and integer ids, so work can run
//! in any order or in parallel and still draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Stream {
    Scenario = 1,
    Knobs = 2,
    Embedding = 3,
    Difficulty = 4,
    Labels = 5,
    Sampler = 6,
    Training = 7,
    Evaluation = 8,
    Split = 9,
}

pub fn stream_rng(stream: Stream, ids: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update([stream as u8]);
    for id in ids {
        h.update(id.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}
