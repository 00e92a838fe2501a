//! Seeded, domain-separated random streams.
//!
//! Every random draw in the crate (weight init, dropout masks, shuffles,
//! random acquisition, oracle noise) comes from an [`RngStream`] keyed by a
//! seed and a stream id. Stream ids are built by folding tags (window id,
//! pass index, layer index, ...) so that results never depend on the order
//! in which windows are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

/// Tags keep independent uses of one seed apart.
pub mod domain {
    pub const INIT: u64 = 0x1001;
    pub const DROPOUT: u64 = 0x1002;
    pub const SHUFFLE: u64 = 0x1003;
    pub const RANDOM_SCORE: u64 = 0x1004;
    pub const SPLIT: u64 = 0x1005;
    pub const ORACLE: u64 = 0x1006;
    pub const SYNTHETIC: u64 = 0x1007;
    pub const MC: u64 = 0x1008;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Root stream of a seed for the given domain tag.
    pub fn root(seed: u64, domain: u64) -> Self {
        Self::new(seed, splitmix64(domain))
    }

    /// Child stream; distinct tags give unrelated sequences.
    pub fn derive(&self, tag: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: splitmix64(
                self.stream_id ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)),
            ),
        }
    }

    pub fn derive2(&self, a: u64, b: u64) -> Self {
        self.derive(a).derive(b)
    }

    /// ChaCha8 generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&splitmix64(self.seed).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream_id);
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_key_same_sequence() {
        let a: Vec<u64> = (0..8)
            .map(|_| 0)
            .scan(RngStream::new(7, 3).rng(), |r, _: u64| Some(r.random()))
            .collect();
        let b: Vec<u64> = (0..8)
            .map(|_| 0)
            .scan(RngStream::new(7, 3).rng(), |r, _: u64| Some(r.random()))
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn streams_differ() {
        let s = RngStream::root(7, domain::DROPOUT);
        let x: u64 = s.derive(1).rng().random();
        let y: u64 = s.derive(2).rng().random();
        let z: u64 = RngStream::new(8, s.derive(1).stream_id).rng().random();
        assert_ne!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn known_first_draw_is_stable() {
        // Pins the generator so that seeded results stay comparable across builds.
        let v: u64 = RngStream::new(0, 0).rng().random();
        assert_eq!(v, 2808895331991335779);
    }
}
