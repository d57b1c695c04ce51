//! Counter-keyed random streams.
//!
//! Every draw is addressed by `(seed, run_id, chain, t, client)`. The first
//! three fields key a ChaCha8 cipher, the client selects the cipher stream and
//! the step selects the word position, so any draw can be regenerated in
//! isolation regardless of evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifies one independent family of noise draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub run_id: u64,
    /// Distinguishes chains inside one run (e.g. the two RR chains when
    /// they are not coupled).
    pub chain: u64,
}

impl StreamKey {
    pub fn new(seed: u64, run_id: u64) -> Self {
        Self {
            seed,
            run_id,
            chain: 0,
        }
    }

    pub fn with_chain(self, chain: u64) -> Self {
        Self { chain, ..self }
    }

    /// Generator for client `client` at step `t`.
    pub fn rng_at(&self, t: u64, client: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let words = [
            splitmix(self.seed),
            splitmix(self.run_id ^ 0x9e37_79b9_7f4a_7c15),
            splitmix(self.chain ^ 0xd1b5_4a32_d192_ed03),
            splitmix(self.seed.rotate_left(17) ^ self.run_id.rotate_left(41) ^ self.chain),
        ];
        for (dst, w) in key.chunks_exact_mut(8).zip(words) {
            dst.copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(client);
        rng.set_word_pos((t as u128) << 32);
        rng
    }
}

/// SplitMix64 finalizer.
pub fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic generator for one-off uses (dataset synthesis, test
/// instances) keyed by a seed and a purpose tag.
pub fn seeded(seed: u64, tag: u64) -> ChaCha8Rng {
    StreamKey::new(seed, tag).with_chain(u64::MAX).rng_at(0, 0)
}
