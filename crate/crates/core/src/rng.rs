//! Keyed deterministic random streams.
//!
//! Every stream is a ChaCha8 generator whose 256-bit seed is the SHA-256 of
//! its key, so draws depend only on the key and never on platform, thread
//! count or the order in which samples are visited.

use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Random stream for one sample in one epoch, keyed by
/// `(global_seed, image_id, epoch)`.
#[derive(Debug, Clone)]
pub struct SampleRng(ChaCha8Rng);

impl SampleRng {
    pub fn new(global_seed: u64, image_id: &str, epoch: u64) -> Self {
        SampleRng(keyed_rng(global_seed, "sample", image_id.as_bytes(), epoch))
    }

    pub fn from_rng(rng: ChaCha8Rng) -> Self {
        SampleRng(rng)
    }
}

impl RngCore for SampleRng {
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

impl CryptoRng for SampleRng {}

/// ChaCha8 stream for `(seed, purpose, name, index)`.
pub fn keyed_rng(seed: u64, purpose: &str, name: &[u8], index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name);
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
