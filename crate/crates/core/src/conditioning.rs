//! Persona adapter and feature-wise linear modulation.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout_mask, Bound, Init, Linear, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub cond_dim: usize,
    pub dropout: f64,
}

impl AdapterConfig {
    pub fn new(embedding_dim: usize) -> Self {
        Self {
            embedding_dim,
            hidden_dim: 1024,
            cond_dim: 128,
            dropout: 0.1,
        }
    }
}

/// Two affine layers with a rectifier between them: `D_p → hidden → D_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub cfg: AdapterConfig,
    l1: Linear,
    l2: Linear,
}

impl Adapter {
    pub fn new(params: &mut ParamSet, prefix: &str, cfg: AdapterConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            l1: Linear::new(params, &format!("{prefix}.l1"), cfg.embedding_dim, cfg.hidden_dim, Init::Uniform, rng),
            l2: Linear::new(params, &format!("{prefix}.l2"), cfg.hidden_dim, cfg.cond_dim, Init::Uniform, rng),
            cfg,
        }
    }

    /// Rebuild the layer naming for parameters that already exist.
    pub fn attach(prefix: &str, cfg: AdapterConfig) -> Self {
        Self {
            l1: linear_ref(&format!("{prefix}.l1"), cfg.embedding_dim, cfg.hidden_dim),
            l2: linear_ref(&format!("{prefix}.l2"), cfg.hidden_dim, cfg.cond_dim),
            cfg,
        }
    }

    /// Dropout is applied to the hidden layer only when `dropout_rng` is given.
    pub fn forward<'t>(&self, p: &Bound<'t>, e: Var<'t>, dropout_rng: Option<&mut ChaCha8Rng>) -> Var<'t> {
        let h = self.l1.forward(p, e).relu();
        let h = match dropout_rng {
            Some(rng) if self.cfg.dropout > 0.0 => {
                let (r, c) = h.shape();
                h.mul_const(dropout_mask(r, c, self.cfg.dropout, rng))
            }
            _ => h,
        };
        self.l2.forward(p, h)
    }
}

/// Conditioning vectors for a batch of embeddings.
pub fn adapt(
    e: &Array2<f64>,
    adapter: &Adapter,
    params: &ParamSet,
    training: bool,
    seed: u64,
) -> Result<Array2<f64>> {
    if e.ncols() != adapter.cfg.embedding_dim {
        return Err(Error::Shape(format!(
            "embedding has {} dims, adapter expects {}",
            e.ncols(),
            adapter.cfg.embedding_dim
        )));
    }
    let tape = Tape::new();
    let bound = params.bind_const(&tape);
    let x = tape.constant(e.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = adapter.forward(&bound, x, training.then_some(&mut rng));
    Ok(out.value())
}

/// `h' = (1 + γ(c)) ⊙ h + β(c)`. Both maps start at exactly zero, so a fresh
/// layer is the identity on `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Film {
    gamma: Linear,
    beta: Linear,
}

impl Film {
    pub fn new(params: &mut ParamSet, prefix: &str, cond_dim: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            gamma: Linear::new(params, &format!("{prefix}.gamma"), cond_dim, feature_dim, Init::Zeros, rng),
            beta: Linear::new(params, &format!("{prefix}.beta"), cond_dim, feature_dim, Init::Zeros, rng),
        }
    }

    pub fn attach(prefix: &str, cond_dim: usize, feature_dim: usize) -> Self {
        Self {
            gamma: linear_ref(&format!("{prefix}.gamma"), cond_dim, feature_dim),
            beta: linear_ref(&format!("{prefix}.beta"), cond_dim, feature_dim),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.gamma.out_dim
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, h: Var<'t>, c: Var<'t>) -> Var<'t> {
        let gamma = self.gamma.forward(p, c);
        let beta = self.beta.forward(p, c);
        h + gamma * h + beta
    }
}

/// Single-row FiLM evaluation.
pub fn film(h: &[f64], c: &[f64], layer: &Film, params: &ParamSet) -> Result<Vec<f64>> {
    if h.len() != layer.feature_dim() || c.len() != layer.gamma.in_dim {
        return Err(Error::Shape(format!(
            "film expects h of {} and c of {}, got {} and {}",
            layer.feature_dim(),
            layer.gamma.in_dim,
            h.len(),
            c.len()
        )));
    }
    let c = Array2::from_shape_vec((1, c.len()), c.to_vec()).expect("row");
    let gamma = layer.gamma.eval(params, &c);
    let beta = layer.beta.eval(params, &c);
    Ok(h
        .iter()
        .enumerate()
        .map(|(i, &x)| (1.0 + gamma[[0, i]]) * x + beta[[0, i]])
        .collect())
}

/// `[z; c]`, noise first.
pub fn build_initial_hidden<'t>(z: Var<'t>, c: Var<'t>) -> Var<'t> {
    concat_cols(&[z, c])
}

pub(crate) fn linear_ref(name: &str, in_dim: usize, out_dim: usize) -> Linear {
    Linear {
        weight: format!("{name}.w"),
        bias: format!("{name}.b"),
        in_dim,
        out_dim,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_adapter(seed: u64) -> (Adapter, ParamSet) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Adapter::new(&mut ps, "adapter", AdapterConfig { embedding_dim: 6, ..AdapterConfig::new(6) }, &mut rng);
        (a, ps)
    }

    #[test]
    fn adapter_output_has_condition_dim_and_is_deterministic() {
        let (a, ps) = small_adapter(1);
        let e = Array2::from_shape_fn((3, 6), |(i, j)| (i * 6 + j) as f64 * 0.1 - 0.8);
        let c1 = adapt(&e, &a, &ps, false, 5).unwrap();
        let c2 = adapt(&e, &a, &ps, false, 99).unwrap();
        assert_eq!(c1.dim(), (3, 128));
        assert_eq!(c1, c2);
        let t1 = adapt(&e, &a, &ps, true, 5).unwrap();
        assert_eq!(t1, adapt(&e, &a, &ps, true, 5).unwrap());
        assert_ne!(t1, c1);
    }

    #[test]
    fn zero_adapter_gives_zero_condition() {
        let (a, mut ps) = small_adapter(2);
        let names: Vec<String> = ps.names().cloned().collect();
        for n in names {
            ps.get_mut(&n).unwrap().fill(0.0);
        }
        let e = Array2::from_elem((2, 6), 3.0);
        assert!(adapt(&e, &a, &ps, false, 0).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adapter_rejects_wrong_dimension() {
        let (a, ps) = small_adapter(3);
        assert!(adapt(&Array2::zeros((1, 5)), &a, &ps, false, 0).is_err());
    }

    #[test]
    fn adapter_outputs_bounded_on_bounded_inputs() {
        let (a, ps) = small_adapter(4);
        let e = Array2::from_shape_fn((50, 6), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.5 - 1.0);
        let c = adapt(&e, &a, &ps, false, 0).unwrap();
        // |x| <= 1 and U(-1/sqrt(fan_in), ..) weights bound each unit well below 10.
        assert!(c.iter().all(|x| x.abs() < 10.0));
    }

    fn film_layer(dim: usize) -> (Film, ParamSet) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = Film::new(&mut ps, "film", 3, dim, &mut rng);
        (f, ps)
    }

    #[test]
    fn fresh_film_is_identity() {
        let (f, ps) = film_layer(4);
        let h = [0.3, -1.7, 2.5, 1e-9];
        assert_eq!(film(&h, &[5.0, -2.0, 0.1], &f, &ps).unwrap(), h.to_vec());
    }

    #[test]
    fn film_doubles_with_unit_gamma() {
        let (f, mut ps) = film_layer(2);
        ps.insert("film.gamma.b", array![[1.0, 1.0]]);
        assert_eq!(film(&[2.0, 3.0], &[0.4, 0.2, 0.9], &f, &ps).unwrap(), vec![4.0, 6.0]);
        assert!(film(&[2.0], &[0.4, 0.2, 0.9], &f, &ps).is_err());
    }

    #[test]
    fn film_jacobian_matches_finite_differences() {
        let (f, mut ps) = film_layer(3);
        ps.insert("film.gamma.w", array![[0.2, -0.1, 0.4], [0.3, 0.5, -0.2], [0.1, 0.0, 0.6]]);
        ps.insert("film.beta.w", array![[0.7, 0.1, -0.3], [0.0, 0.2, 0.2], [0.4, -0.5, 0.1]]);
        let c = [0.5, -1.0, 2.0];
        let h = [1.0, -2.0, 0.5];
        let cr = array![[0.5, -1.0, 2.0]];
        let gamma = f.gamma.eval(&ps, &cr);
        let step = 1e-6;
        for j in 0..3 {
            let mut hp = h;
            hp[j] += step;
            let mut hm = h;
            hm[j] -= step;
            let up = film(&hp, &c, &f, &ps).unwrap();
            let dn = film(&hm, &c, &f, &ps).unwrap();
            for i in 0..3 {
                let fd = (up[i] - dn[i]) / (2.0 * step);
                let exact = if i == j { 1.0 + gamma[[0, i]] } else { 0.0 };
                assert!((fd - exact).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn film_minus_shift_is_linear_in_h() {
        let (f, mut ps) = film_layer(2);
        ps.insert("film.gamma.w", array![[0.3, -0.4], [0.1, 0.2], [0.5, 0.0]]);
        ps.insert("film.beta.b", array![[0.25, -0.75]]);
        let c = [1.0, 2.0, -1.0];
        let beta = f.beta.eval(&ps, &array![[1.0, 2.0, -1.0]]);
        let g = |h: &[f64]| -> Vec<f64> {
            film(h, &c, &f, &ps).unwrap().iter().enumerate().map(|(i, v)| v - beta[[0, i]]).collect()
        };
        let (h1, h2, a, b) = ([1.0, -3.0], [0.5, 2.0], 1.5, -0.7);
        let lhs = g(&[a * h1[0] + b * h2[0], a * h1[1] + b * h2[1]]);
        let (g1, g2) = (g(&h1), g(&h2));
        for i in 0..2 {
            assert!((lhs[i] - (a * g1[i] + b * g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn initial_hidden_concatenates_noise_first() {
        let tape = Tape::new();
        let z = tape.constant(array![[1.0]]);
        let c = tape.constant(array![[2.0, 3.0]]);
        assert_eq!(build_initial_hidden(z, c).value(), array![[1.0, 2.0, 3.0]]);
        let z = tape.constant(Array2::zeros((1, 128)));
        let c = tape.constant(Array2::zeros((1, 128)));
        assert_eq!(build_initial_hidden(z, c).shape(), (1, 256));
    }
}
