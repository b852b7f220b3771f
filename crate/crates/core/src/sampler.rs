//! Noise shared by both backbones and the sampling interface used by
//! interventions.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::population::Population;
use crate::schema::AttributeSchema;

/// Every random input of one generation pass. Holding this fixed while the
/// embeddings change is the same-z protocol: the Gumbel noise of the
/// categorical heads is held fixed together with `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationNoise {
    pub z: Array2<f64>,
    /// Gumbel(0, 1) draws, one per encoded column (empty for backbones that
    /// decode categoricals by argmax).
    pub gumbel: Array2<f64>,
}

impl GenerationNoise {
    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn rows(&self, start: usize, end: usize) -> GenerationNoise {
        let g = if self.gumbel.nrows() == 0 {
            self.gumbel.clone()
        } else {
            self.gumbel.slice(ndarray::s![start..end, ..]).to_owned()
        };
        GenerationNoise {
            z: self.z.slice(ndarray::s![start..end, ..]).to_owned(),
            gumbel: g,
        }
    }
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

pub fn gumbel(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let u: f64 = rng.random::<f64>().clamp(1e-300, 1.0 - 1e-16);
        -(-u.ln()).ln()
    })
}

/// `z` first, then the Gumbel matrix, from one seeded stream.
pub fn draw_noise(n: usize, noise_dim: usize, gumbel_width: usize, seed: u64) -> GenerationNoise {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = standard_normal(n, noise_dim, &mut rng);
    let g = gumbel(if gumbel_width == 0 { 0 } else { n }, gumbel_width, &mut rng);
    GenerationNoise { z, gumbel: g }
}

/// A trained backbone that maps embeddings plus fixed noise to agents.
pub trait Sampler: Sync {
    fn schema(&self) -> &AttributeSchema;
    fn embedding_dim(&self) -> usize;
    fn draw_noise(&self, n: usize, seed: u64) -> GenerationNoise;
    /// Hard-decoded agents, one per embedding row.
    fn generate(&self, embeddings: &Array2<f64>, noise: &GenerationNoise) -> Result<Population>;

    fn sample(&self, embeddings: &Array2<f64>, seed: u64) -> Result<Population> {
        let noise = self.draw_noise(embeddings.nrows(), seed);
        self.generate(embeddings, &noise)
    }
}
