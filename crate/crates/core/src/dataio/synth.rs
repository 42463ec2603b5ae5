//! Deterministic synthetic datasets.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nngraph::Tensor;
use crate::rng::seeded;

/// Two interleaving half circles, balanced classes. Each point carries
/// `(x, y, z)` where `z` is a low-variance distractor feature.
pub fn two_moons(n: usize, noise: f64, seed: u64, split: Split) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::arg("two-moons needs at least one sample"));
    }
    if !(noise >= 0.0) {
        return Err(Error::arg(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = seeded(seed);
    let jitter = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let distractor = Normal::new(0.0, 0.1).expect("valid normal");
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t = rng.random_range(0.0..std::f64::consts::PI);
        let (x, y) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let (dx, dy) = if noise > 0.0 {
            (jitter.sample(&mut rng), jitter.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        let z = distractor.sample(&mut rng);
        inputs.push(Tensor::vector(vec![x + dx, y + dy, z]));
        labels.push(label);
    }
    Dataset::new(inputs, labels, 2, split)
}
