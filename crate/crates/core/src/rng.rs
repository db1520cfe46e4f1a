//! Counter-based random streams.
//!
//! Every stochastic draw in the lab comes from a stream keyed by
//! `(master seed, iteration, index, slot)`. The key is used verbatim as the
//! 256-bit ChaCha key, so distinct keys give independent streams and the
//! draws for a given key never depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Reserved slot identifiers.
pub mod slot {
    /// Query selection for a group.
    pub const QUERY: u64 = 0;
    /// Responses within a group.
    pub const RESPONSES: u64 = 1;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub iteration: u64,
    pub index: u64,
    pub slot: u64,
}

impl StreamKey {
    pub fn new(iteration: u64, index: u64, slot: u64) -> Self {
        Self {
            iteration,
            index,
            slot,
        }
    }
}

/// Factory for named streams under one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    master: u64,
}

impl Streams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, key: StreamKey) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        for (chunk, word) in seed
            .chunks_exact_mut(8)
            .zip([self.master, key.iteration, key.index, key.slot])
        {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }

    pub fn at(&self, iteration: u64, index: u64, slot: u64) -> ChaCha8Rng {
        self.stream(StreamKey::new(iteration, index, slot))
    }
}
