//! Seeded randomness. ChaCha8 keeps the stream identical across platforms and
//! releases for a fixed seed, which every determinism contract in this crate
//! relies on.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic random source: identical seed and call sequence produce an
/// identical stream. Single-owner by design; clone only to replay.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Derives an independent child stream, advancing this one.
    pub fn split(&mut self) -> Rng {
        Rng::seed_from_u64(self.0.next_u64())
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn identical_seed_identical_stream() {
        let mut a = Rng::seed_from_u64(7);
        let mut b = Rng::seed_from_u64(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_streams_diverge() {
        let mut a = Rng::seed_from_u64(7);
        let mut child = a.split();
        let x: f64 = a.gen();
        let y: f64 = child.gen();
        assert_ne!(x, y);
    }
}
