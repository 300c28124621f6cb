//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream, identified
//! by a master seed, an index (usually the target) and a purpose. Changing
//! how many numbers one purpose consumes never shifts another purpose's
//! realisation, which keeps policy comparisons paired.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Input = 1,
    Process = 2,
    MeasurementNoise = 3,
    Channel = 4,
    Attempt = 5,
    Initial = 6,
    Policy = 7,
    Swarm = 8,
    Covariance = 9,
    Replicate = 10,
}

/// Independent stream for `(seed, index, purpose)`.
pub fn stream(seed: u64, index: u64, purpose: Purpose) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index << 8) | purpose as u64);
    rng
}

/// A child seed for `(seed, index)`, used where a whole sub-experiment needs
/// its own master seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    use rand::RngCore;
    stream(seed, index, Purpose::Replicate).next_u64()
}
