//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mirrornet_core::{Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1)`.
pub fn uniform(shape: Shape, seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_, _, _, _| r.random_range(-1.0..1.0))
}

/// `{0, 1}` mask of a centred square covering a quarter of the image.
pub fn square_mask(side: usize) -> Tensor<f32> {
    let (lo, hi) = (side / 4, side * 3 / 4);
    Tensor::from_fn(Shape::new(1, 1, side, side), |_, _, y, x| {
        if (lo..hi).contains(&y) && (lo..hi).contains(&x) {
            1.0
        } else {
            0.0
        }
    })
}
