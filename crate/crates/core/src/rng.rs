//! Counter-based random streams.
//!
//! Every random draw in the crate is addressed by `(seed, purpose, step,
//! index)`. A [`StreamKey`] fixes the first three; per-weight draws then read
//! a fixed number of words at a position derived from the weight index, so
//! a weight's randomness never depends on how many other weights were
//! sampled before it or on which thread sampled them.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// ChaCha words reserved for each weight (four `u64` draws).
pub const WORDS_PER_WEIGHT: u128 = 8;

/// What a stream is used for. Distinct purposes never share words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Mask = 3,
    Slab = 4,
    Perturb = 5,
    MonteCarlo = 6,
    Scores = 7,
    Split = 8,
    Synth = 9,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    seed: u64,
    purpose: Purpose,
    step: u64,
}

impl StreamKey {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        Self {
            seed,
            purpose,
            step: 0,
        }
    }

    pub fn at_step(self, step: u64) -> Self {
        Self { step, ..self }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn stream_id(&self) -> u64 {
        splitmix(splitmix(self.purpose as u64) ^ self.step)
    }

    /// A sequential generator for this key (shuffles, initialization, data).
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id());
        rng
    }

    /// Per-weight uniforms starting at weight `first`.
    pub fn weights_from(&self, first: usize) -> WeightUniforms {
        let mut rng = self.rng();
        rng.set_word_pos(first as u128 * WORDS_PER_WEIGHT);
        WeightUniforms { rng }
    }
}

/// Yields four open-interval uniforms per weight, always consuming
/// [`WORDS_PER_WEIGHT`] words.
pub struct WeightUniforms {
    rng: ChaCha8Rng,
}

impl WeightUniforms {
    pub fn next_weight(&mut self) -> [f64; 4] {
        [
            open_unit(self.rng.next_u64()),
            open_unit(self.rng.next_u64()),
            open_unit(self.rng.next_u64()),
            open_unit(self.rng.next_u64()),
        ]
    }
}

/// Maps 52 random bits to the open interval (0, 1).
#[inline]
pub fn open_unit(bits: u64) -> f64 {
    ((bits >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

/// Standard normal from two open uniforms (Box-Muller, cosine branch).
#[inline]
pub fn std_normal(u1: f64, u2: f64) -> f64 {
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Independent child seed for a named sub-run.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix(seed ^ splitmix(tag.wrapping_add(0xA5A5_A5A5)))
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_draws_do_not_depend_on_start() {
        let key = StreamKey::new(42, Purpose::Mask).at_step(3);
        let mut all = key.weights_from(0);
        let seq: Vec<_> = (0..10).map(|_| all.next_weight()).collect();
        let mut tail = key.weights_from(7);
        assert_eq!(tail.next_weight(), seq[7]);
        assert_eq!(tail.next_weight(), seq[8]);
    }

    #[test]
    fn purposes_and_steps_are_distinct() {
        let a = StreamKey::new(1, Purpose::Mask).weights_from(0).next_weight();
        let b = StreamKey::new(1, Purpose::Slab).weights_from(0).next_weight();
        let c = StreamKey::new(1, Purpose::Mask)
            .at_step(1)
            .weights_from(0)
            .next_weight();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn open_unit_stays_inside() {
        assert!(open_unit(0) > 0.0);
        assert!(open_unit(u64::MAX) < 1.0);
    }
}
