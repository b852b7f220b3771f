//! Shared fixtures for the benchmarks.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semapop_core::embedding::EmbeddingMatrix;
use semapop_core::marginal::MarginalSpec;
use semapop_core::persona::{mock_embed, template_personas, PersonaMode};
use semapop_core::sampler::standard_normal;
use semapop_core::{fit_schema_stats, AttributeSchema, Population, ToyJointSpec};

pub struct Toy {
    pub schema: AttributeSchema,
    pub pop: Population,
    pub emb: EmbeddingMatrix,
    pub spec: MarginalSpec,
}

/// The five-attribute toy population with mock persona embeddings.
pub fn toy(n: usize, dim: usize, seed: u64) -> Toy {
    let t = ToyJointSpec::mixed5();
    let pop = t.sample(n, seed).expect("toy sample");
    let schema = fit_schema_stats(&t.schema().expect("toy schema"), &pop)
        .expect("stats")
        .schema;
    let texts = template_personas(&pop, &schema, PersonaMode::Implicit).expect("personas");
    let emb = mock_embed(&texts, dim, seed).expect("embed");
    let spec = MarginalSpec::fit(&schema, &pop, 10).expect("spec");
    Toy { schema, pop, emb, spec }
}

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    standard_normal(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
}
