//! Shared inputs for the kernel benchmarks.

use aggdet_core::rng::{self, DetRng};
use aggdet_core::{Box3D, Proposal, Tensor};

pub fn rng(seed: u64) -> DetRng {
    rng::seeded(seed)
}

/// Unit-variance activations of shape `[n, c, s, s, s]`.
pub fn activations(n: usize, c: usize, s: usize, seed: u64) -> Tensor<f32> {
    Tensor::randn(&[n, c, s, s, s], 1.0, &mut rng(seed))
}

/// `n` proposals scattered over a `side`³ volume with random scores.
pub fn proposals(n: usize, side: f64, seed: u64) -> Vec<Proposal> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let b = Box3D::new(
                rng::uniform(&mut r, 0.0, side),
                rng::uniform(&mut r, 0.0, side),
                rng::uniform(&mut r, 0.0, side),
                rng::uniform(&mut r, 3.0, 14.0),
            );
            Proposal::from_rpn(b, rng::uniform(&mut r, 0.0, 1.0), 4)
        })
        .collect()
}
