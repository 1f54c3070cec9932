//! Weight initialization.
//!
//! Projections and embeddings draw from a truncated normal (σ = 0.02,
//! resampled beyond ±2σ); biases start at zero, layer-norm scales at one.
//! All draws come from a seeded ChaCha stream in construction order, so two
//! builds with the same seed are bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub(crate) struct Initializer {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
    sigma: f64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        let sigma = 0.02;
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, sigma).expect("valid sigma"),
            sigma,
        }
    }

    pub fn trunc_normal(&mut self, shape: Vec<usize>) -> Tensor {
        let bound = 2.0 * self.sigma;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z = self.normal.sample(&mut self.rng);
                if z.abs() <= bound {
                    break z;
                }
            })
            .collect();
        Tensor::from_vec(shape, data).expect("shape/data agree")
    }
}
