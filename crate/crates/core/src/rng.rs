//! Counter-keyed random streams.
//!
//! Every random draw in a sampling run is addressed by `(level seed, step,
//! purpose)`, so the order in which levels are evaluated never changes the
//! numbers they see.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    InitialLatent = 1,
    StepNoise = 2,
}

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the chain at `level` within a run seeded with `seed`.
pub fn level_seed(seed: u64, level: usize) -> u64 {
    splitmix64(seed ^ splitmix64(level as u64 + 1))
}

pub fn stream(level_seed: u64, step: usize, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(level_seed);
    rng.set_stream(((purpose as u64) << 48) | step as u64);
    rng
}

pub fn gaussian_image(rng: &mut impl Rng, height: usize, width: usize, channels: usize) -> Image {
    Image::from_fn(height, width, channels, |_, _, _| rng.sample(StandardNormal))
}
