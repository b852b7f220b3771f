//! Persona-conditioned WGAN-GP with a projection critic.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, Tape, Var};
use crate::checkpoint::{BackboneKind, ModelCheckpoint};
use crate::conditioning::{linear_ref, Adapter, AdapterConfig, Film};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::marginal::{MarginalSpec, MarginalTargets, DEFAULT_BINS, DEFAULT_EPS};
use crate::nn::{AdamConfig, Adam, Bound, Init, Linear, ParamSet};
use crate::population::{decode, encode, EncodedBatch, Population};
use crate::sampler::{draw_noise, gumbel, standard_normal, GenerationNoise, Sampler};
use crate::schema::{AttributeKind, AttributeSchema, Block};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorConditioning {
    /// `[z; c]` input plus FiLM after every hidden layer.
    Film,
    /// `[z; c]` input only.
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticConditioning {
    Projection,
    Film,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilmPosition {
    /// Modulate the activated hidden features.
    After,
    Before,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanArchitecture {
    pub cond_dim: usize,
    pub adapter_hidden: usize,
    pub adapter_dropout: f64,
    pub generator_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub film_position: FilmPosition,
    /// Critic reuses the generator's adapter output instead of its own.
    pub shared_adapter: bool,
}

impl Default for GanArchitecture {
    fn default() -> Self {
        Self {
            cond_dim: 128,
            adapter_hidden: 1024,
            adapter_dropout: 0.1,
            generator_hidden: vec![256, 512, 256],
            critic_hidden: vec![256, 512, 256],
            leaky_slope: 0.2,
            film_position: FilmPosition::After,
            shared_adapter: false,
        }
    }
}

impl GanArchitecture {
    /// A narrow network for small toy populations.
    pub fn compact() -> Self {
        Self {
            cond_dim: 32,
            adapter_hidden: 64,
            generator_hidden: vec![64, 128, 64],
            critic_hidden: vec![64, 128, 64],
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanTrainingConfig {
    pub arch: GanArchitecture,
    pub lambda_gp: f64,
    pub lambda_m: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub n_critic: usize,
    pub noise_dim: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub gumbel_tau: f64,
    pub g_cond: GeneratorConditioning,
    pub d_cond: CriticConditioning,
    pub marg_reg: bool,
    /// Straight-through hard samples during training: one-hot categories and
    /// integer-valued columns snapped to their decoded values.
    pub train_hard: bool,
    pub bins: usize,
    pub marg_eps: f64,
    pub seed: u64,
    /// Generator steps between intermediate checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Decay of an exponential moving average of the generator weights;
    /// the average replaces them in checkpoints. 0 disables it.
    pub ema_decay: f64,
}

impl Default for GanTrainingConfig {
    fn default() -> Self {
        Self {
            arch: GanArchitecture::default(),
            lambda_gp: 10.0,
            lambda_m: 0.4,
            lr_g: 2e-5,
            lr_d: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            n_critic: 5,
            noise_dim: 128,
            batch_size: 512,
            steps: 20000,
            gumbel_tau: 0.66,
            g_cond: GeneratorConditioning::Film,
            d_cond: CriticConditioning::Projection,
            marg_reg: true,
            train_hard: false,
            bins: DEFAULT_BINS,
            marg_eps: DEFAULT_EPS,
            seed: 0,
            checkpoint_every: 0,
            ema_decay: 0.0,
        }
    }
}

impl GanTrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda_gp >= 0.0) {
            return bad("lambda_gp must be non-negative");
        }
        if !(self.lambda_m >= 0.0) {
            return bad("lambda_m must be non-negative");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if self.n_critic < 1 {
            return bad("n_critic must be at least 1");
        }
        if !(self.gumbel_tau > 0.0) {
            return bad("gumbel_tau must be positive");
        }
        if self.batch_size == 0 || self.noise_dim == 0 {
            return bad("batch_size and noise_dim must be positive");
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.arch.critic_hidden.is_empty() || self.arch.generator_hidden.is_empty() {
            return bad("hidden stacks must have at least one layer");
        }
        Ok(())
    }
}

fn hidden_act<'t>(x: Var<'t>, slope: f64) -> Var<'t> {
    x.leaky_relu(slope)
}

/// Raw-unit rounding and clipping of one integer-valued attribute, in
/// standardized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
struct IntegerGrid {
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
}

impl IntegerGrid {
    fn of(spec: &crate::schema::AttributeSpec) -> Option<Self> {
        if spec.kind != AttributeKind::Numerical || !spec.integer_valued {
            return None;
        }
        Some(Self {
            mean: spec.mean?,
            std: spec.std?,
            min: spec.min.unwrap_or(f64::NEG_INFINITY),
            max: spec.max.unwrap_or(f64::INFINITY),
        })
    }

    fn snap(&self, x: f64) -> f64 {
        let raw = (x * self.std + self.mean).round().clamp(self.min, self.max);
        (raw - self.mean) / self.std
    }
}

/// `G(z, c)`: hidden stack over `[z; c]`, one affine head covering every
/// attribute block (equivalent to one head per attribute).
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub adapter: Adapter,
    layers: Vec<Linear>,
    films: Vec<Film>,
    head: Linear,
    blocks: Vec<Block>,
    /// Decoded grid of each integer-valued numerical block.
    grids: Vec<Option<IntegerGrid>>,
    slope: f64,
    film_position: FilmPosition,
    noise_dim: usize,
}

impl Generator {
    fn layout(
        schema: &AttributeSchema,
        embedding_dim: usize,
        cfg: &GanTrainingConfig,
        mut params: Option<(&mut ParamSet, &mut ChaCha8Rng)>,
    ) -> Self {
        let a = &cfg.arch;
        let acfg = AdapterConfig {
            embedding_dim,
            hidden_dim: a.adapter_hidden,
            cond_dim: a.cond_dim,
            dropout: a.adapter_dropout,
        };
        let mut make = |name: &str, i: usize, o: usize, init: Init| match params.as_mut() {
            Some((ps, rng)) => Linear::new(ps, name, i, o, init, rng),
            None => linear_ref(name, i, o),
        };
        let mut layers = Vec::new();
        let mut films = Vec::new();
        let mut width = cfg.noise_dim + a.cond_dim;
        for (k, &h) in a.generator_hidden.iter().enumerate() {
            layers.push(make(&format!("g.l{k}"), width, h, Init::Uniform));
            if cfg.g_cond == GeneratorConditioning::Film {
                // Zero maps, exactly as Film::new builds them.
                make(&format!("g.film{k}.gamma"), a.cond_dim, h, Init::Zeros);
                make(&format!("g.film{k}.beta"), a.cond_dim, h, Init::Zeros);
                films.push(Film::attach(&format!("g.film{k}"), a.cond_dim, h));
            }
            width = h;
        }
        let head = make("g.head", width, schema.encoded_width(), Init::Uniform);
        let adapter = match params {
            Some((ps, rng)) => Adapter::new(ps, "g.adapter", acfg, rng),
            None => Adapter::attach("g.adapter", acfg),
        };
        Self {
            adapter,
            layers,
            films,
            head,
            blocks: schema.blocks(),
            grids: schema.blocks().iter().map(|b| IntegerGrid::of(schema.spec(b.attr))).collect(),
            slope: a.leaky_slope,
            film_position: a.film_position,
            noise_dim: cfg.noise_dim,
        }
    }

    pub fn condition<'t>(&self, p: &Bound<'t>, e: Var<'t>, dropout: Option<&mut ChaCha8Rng>) -> Var<'t> {
        self.adapter.forward(p, e, dropout)
    }

    /// Pre-activation head outputs. `modulate = false` bypasses every FiLM
    /// layer.
    pub fn logits<'t>(&self, p: &Bound<'t>, z: Var<'t>, c: Var<'t>, modulate: bool) -> Var<'t> {
        let mut h = concat_cols(&[z, c]);
        for (k, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(p, h);
            let film = self.films.get(k).filter(|_| modulate);
            h = match (film, self.film_position) {
                (Some(f), FilmPosition::After) => f.forward(p, hidden_act(pre, self.slope), c),
                (Some(f), FilmPosition::Before) => hidden_act(f.forward(p, pre, c), self.slope),
                (None, _) => hidden_act(pre, self.slope),
            };
        }
        self.head.forward(p, h)
    }

    /// Categorical blocks: Gumbel-softmax at temperature `tau` (straight-through
    /// one-hot when `hard`). Numerical columns: standardized values, snapped
    /// straight-through to the decoded integer grid when `hard`.
    pub fn activate<'t>(&self, logits: Var<'t>, gumbel: &Array2<f64>, tau: f64, hard: bool) -> Var<'t> {
        let tape = logits.tape();
        let parts: Vec<Var<'t>> = self
            .blocks
            .iter()
            .zip(&self.grids)
            .map(|(b, grid)| {
                let l = logits.slice_cols(b.start, b.start + b.width);
                match b.kind {
                    AttributeKind::Numerical => match grid {
                        Some(g) if hard => {
                            let snapped = l.with_value(|v| v.mapv(|x| g.snap(x)));
                            tape.constant(snapped) + (l - l.detach())
                        }
                        _ => l,
                    },
                    AttributeKind::Categorical => {
                        let g = gumbel.slice(ndarray::s![.., b.start..b.start + b.width]).to_owned();
                        let y = (l + tape.constant(g)).scale(1.0 / tau).softmax_rows();
                        if hard {
                            let one_hot = y.with_value(|v| argmax_one_hot(v));
                            // Value is exactly the one-hot; gradient is that of `y`.
                            tape.constant(one_hot) + (y - y.detach())
                        } else {
                            y
                        }
                    }
                }
            })
            .collect();
        concat_cols(&parts)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        z: Var<'t>,
        c: Var<'t>,
        gumbel: &Array2<f64>,
        tau: f64,
        hard: bool,
        modulate: bool,
    ) -> Var<'t> {
        self.activate(self.logits(p, z, c, modulate), gumbel, tau, hard)
    }
}

/// Row-wise one-hot of the maximum, lowest index on ties.
pub fn argmax_one_hot(v: ndarray::ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(v.dim());
    for (i, row) in v.axis_iter(Axis(0)).enumerate() {
        let mut best = 0;
        for (k, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = k;
            }
        }
        out[[i, best]] = 1.0;
    }
    out
}

/// `D(x, e) = h(φ(x)) + ⟨φ(x), ψ(c)⟩` (projection) or a FiLM-modulated trunk
/// with a scalar head.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub adapter: Option<Adapter>,
    layers: Vec<Linear>,
    films: Vec<Film>,
    head: Linear,
    psi: Option<Linear>,
    slope: f64,
    film_position: FilmPosition,
}

impl Critic {
    fn layout(
        schema: &AttributeSchema,
        embedding_dim: usize,
        cfg: &GanTrainingConfig,
        mut params: Option<(&mut ParamSet, &mut ChaCha8Rng)>,
    ) -> Self {
        let a = &cfg.arch;
        let mut make = |name: &str, i: usize, o: usize, init: Init| match params.as_mut() {
            Some((ps, rng)) => Linear::new(ps, name, i, o, init, rng),
            None => linear_ref(name, i, o),
        };
        let mut layers = Vec::new();
        let mut films = Vec::new();
        let mut width = schema.encoded_width();
        for (k, &h) in a.critic_hidden.iter().enumerate() {
            layers.push(make(&format!("d.l{k}"), width, h, Init::Uniform));
            if cfg.d_cond == CriticConditioning::Film {
                make(&format!("d.film{k}.gamma"), a.cond_dim, h, Init::Zeros);
                make(&format!("d.film{k}.beta"), a.cond_dim, h, Init::Zeros);
                films.push(Film::attach(&format!("d.film{k}"), a.cond_dim, h));
            }
            width = h;
        }
        let head = make("d.h", width, 1, Init::Uniform);
        let psi = (cfg.d_cond == CriticConditioning::Projection)
            .then(|| make("d.psi", a.cond_dim, width, Init::Uniform));
        let adapter = (!a.shared_adapter).then(|| {
            let acfg = AdapterConfig {
                embedding_dim,
                hidden_dim: a.adapter_hidden,
                cond_dim: a.cond_dim,
                dropout: a.adapter_dropout,
            };
            match params.as_mut() {
                Some((ps, rng)) => Adapter::new(ps, "d.adapter", acfg, rng),
                None => Adapter::attach("d.adapter", acfg),
            }
        });
        Self {
            adapter,
            layers,
            films,
            head,
            psi,
            slope: a.leaky_slope,
            film_position: a.film_position,
        }
    }

    /// Trunk features `φ(x)`, FiLM-modulated by `c` in film mode.
    pub fn features<'t>(&self, p: &Bound<'t>, x: Var<'t>, c: Var<'t>) -> Var<'t> {
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(p, h);
            h = match (self.films.get(k), self.film_position) {
                (Some(f), FilmPosition::After) => f.forward(p, hidden_act(pre, self.slope), c),
                (Some(f), FilmPosition::Before) => hidden_act(f.forward(p, pre, c), self.slope),
                (None, _) => hidden_act(pre, self.slope),
            };
        }
        h
    }

    /// One score per row, `(B, 1)`.
    pub fn score<'t>(&self, p: &Bound<'t>, x: Var<'t>, c: Var<'t>) -> Var<'t> {
        let f = self.features(p, x, c);
        let h = self.head.forward(p, f);
        match &self.psi {
            Some(psi) => h + (f * psi.forward(p, c)).sum_rows(),
            None => h,
        }
    }
}

/// Per-row interpolation weights `α ~ U(0, 1)`.
pub fn interpolation_weights(rows: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, 1), |_| rng.random::<f64>())
}

/// `mean_i (‖∇_x̃ D(x̃_i)‖₂ − 1)²` with `x̃ = α x + (1 − α) x̂`, on the tape so
/// that it can be differentiated with respect to the critic's parameters.
pub fn gradient_penalty_on<'t>(
    tape: &'t Tape,
    x_real: &Array2<f64>,
    x_fake: &Array2<f64>,
    alpha: &Array2<f64>,
    critic: impl Fn(Var<'t>) -> Var<'t>,
) -> Var<'t> {
    assert_eq!(x_real.dim(), x_fake.dim(), "real and fake batches differ in shape");
    let a = alpha.broadcast(x_real.dim()).expect("alpha is a column").to_owned();
    let mixed = &a * x_real + &(1.0 - &a) * x_fake;
    let x = tape.var(mixed);
    let score = critic(x).sum_all();
    let g = tape.grad(score, &[x]).remove(0);
    let norm = g.square().sum_rows().add_scalar(1e-12).sqrt();
    norm.add_scalar(-1.0).square().mean_all()
}

/// Gradient penalty of an arbitrary differentiable critic.
pub fn gradient_penalty(
    x_real: &Array2<f64>,
    x_fake: &Array2<f64>,
    seed: u64,
    critic: impl for<'t> Fn(Var<'t>) -> Var<'t>,
) -> Result<f64> {
    if x_real.dim() != x_fake.dim() {
        return Err(Error::Shape("real and fake batches must have equal shapes".into()));
    }
    let tape = Tape::new();
    let alpha = interpolation_weights(x_real.nrows(), seed);
    Ok(gradient_penalty_on(&tape, x_real, x_fake, &alpha, critic).item())
}

/// Loss terms of one evaluation of the critic and generator objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WganLosses {
    pub loss_d: f64,
    pub loss_g: f64,
    pub gp: f64,
    pub marginal: f64,
}

/// Trained (or freshly initialized) generator and critic.
#[derive(Clone, Debug)]
pub struct GanModel {
    pub schema: AttributeSchema,
    pub marginal_spec: MarginalSpec,
    pub cfg: GanTrainingConfig,
    pub embedding_dim: usize,
    pub params: ParamSet,
    pub generator: Generator,
    pub critic: Critic,
}

impl GanModel {
    pub fn init(
        schema: &AttributeSchema,
        marginal_spec: MarginalSpec,
        embedding_dim: usize,
        cfg: &GanTrainingConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if !schema.has_stats() {
            return Err(Error::Schema("schema statistics must be fitted before training".into()));
        }
        marginal_spec.check_schema(schema)?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let generator = Generator::layout(schema, embedding_dim, cfg, Some((&mut params, &mut rng)));
        let critic = Critic::layout(schema, embedding_dim, cfg, Some((&mut params, &mut rng)));
        Ok(Self {
            schema: schema.clone(),
            marginal_spec,
            cfg: cfg.clone(),
            embedding_dim,
            params,
            generator,
            critic,
        })
    }

    pub fn generator_params(&self) -> ParamSet {
        self.params.subset("g.")
    }

    fn split_params(&self) -> (ParamSet, ParamSet) {
        (self.params.subset("g."), self.params.subset("d."))
    }

    fn gumbel_width(&self) -> usize {
        self.schema.encoded_width()
    }

    /// Conditioning vectors for the critic.
    fn critic_condition<'t>(
        &self,
        gp: &Bound<'t>,
        dp: &Bound<'t>,
        e: Var<'t>,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Var<'t> {
        match &self.critic.adapter {
            Some(a) => a.forward(dp, e, dropout),
            None => self.generator.condition(gp, e, dropout).detach(),
        }
    }

    /// Encoded generator output for every embedding row, in chunks.
    pub fn generate_encoded(
        &self,
        embeddings: &Array2<f64>,
        noise: &GenerationNoise,
        hard: bool,
        modulate: bool,
    ) -> Result<EncodedBatch> {
        self.check_inputs(embeddings, noise)?;
        if !self.params.all_finite() {
            return Err(Error::Data("generator parameters are not finite".into()));
        }
        let (gps, _) = self.split_params();
        let n = embeddings.nrows();
        let mut out = Array2::zeros((n, self.schema.encoded_width()));
        const CHUNK: usize = 4096;
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let tape = Tape::new();
            let p = gps.bind_const(&tape);
            let e = tape.constant(embeddings.slice(ndarray::s![start..end, ..]).to_owned());
            let part = noise.rows(start, end);
            let c = self.generator.condition(&p, e, None);
            let z = tape.constant(part.z);
            let x = self
                .generator
                .forward(&p, z, c, &part.gumbel, self.cfg.gumbel_tau, hard, modulate);
            out.slice_mut(ndarray::s![start..end, ..]).assign(&x.value());
            start = end;
        }
        Ok(EncodedBatch { matrix: out })
    }

    fn check_inputs(&self, embeddings: &Array2<f64>, noise: &GenerationNoise) -> Result<()> {
        if embeddings.ncols() != self.embedding_dim {
            return Err(Error::Shape(format!(
                "embeddings have {} dims, model expects {}",
                embeddings.ncols(),
                self.embedding_dim
            )));
        }
        if noise.z.nrows() != embeddings.nrows()
            || noise.z.ncols() != self.cfg.noise_dim
            || noise.gumbel.dim() != (embeddings.nrows(), self.gumbel_width())
        {
            return Err(Error::Shape("noise does not match embeddings and model".into()));
        }
        Ok(())
    }

    /// Critic scores `(B, 1)` in inference mode.
    pub fn critic_scores(&self, x: &Array2<f64>, embeddings: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.schema.encoded_width() || embeddings.ncols() != self.embedding_dim {
            return Err(Error::Shape("critic inputs do not match the model".into()));
        }
        if x.nrows() != embeddings.nrows() {
            return Err(Error::Shape("critic inputs differ in row count".into()));
        }
        let (gps, dps) = self.split_params();
        let tape = Tape::new();
        let (gp, dp) = (gps.bind_const(&tape), dps.bind_const(&tape));
        let c = self.critic_condition(&gp, &dp, tape.constant(embeddings.clone()), None);
        Ok(self.critic.score(&dp, tape.constant(x.clone()), c).value())
    }

    /// Both objectives without dropout, for given real rows, embeddings and
    /// noise. The generator objective uses the same noise for `G(z, e)`.
    pub fn wgan_losses(
        &self,
        x_real: &Array2<f64>,
        embeddings: &Array2<f64>,
        noise: &GenerationNoise,
        gp_seed: u64,
    ) -> Result<WganLosses> {
        let hard = self.cfg.train_hard;
        let x_fake = self.generate_encoded(embeddings, noise, hard, true)?.matrix;
        let (gps, dps) = self.split_params();
        let targets = MarginalTargets::new(&self.schema, &self.marginal_spec, self.cfg.marg_eps)?;

        let tape = Tape::new();
        let (gp, dp) = (gps.bind_const(&tape), dps.bind_const(&tape));
        let e = tape.constant(embeddings.clone());
        let c_d = self.critic_condition(&gp, &dp, e, None);
        let d_real = self.critic.score(&dp, tape.constant(x_real.clone()), c_d).mean_all();
        let d_fake = self.critic.score(&dp, tape.constant(x_fake.clone()), c_d).mean_all();
        let alpha = interpolation_weights(x_real.nrows(), gp_seed);
        let pen = gradient_penalty_on(&tape, x_real, &x_fake, &alpha, |x| self.critic.score(&dp, x, c_d));
        let loss_d = critic_objective(d_real, d_fake, pen, self.cfg.lambda_gp);

        let z = tape.constant(noise.z.clone());
        let c_g = self.generator.condition(&gp, e, None);
        let x = self
            .generator
            .forward(&gp, z, c_g, &noise.gumbel, self.cfg.gumbel_tau, hard, true);
        let (cat, num) = targets.loss(x);
        let marg = cat + num;
        let adv = -self.critic.score(&dp, x, c_d).mean_all();
        let loss_g = generator_objective(adv, marg, self.cfg.marg_reg, self.cfg.lambda_m);
        Ok(WganLosses {
            loss_d: loss_d.item(),
            loss_g: loss_g.item(),
            gp: pen.item(),
            marginal: marg.item(),
        })
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        let mut flags = serde_json::Map::new();
        flags.insert("g_cond".into(), serde_json::to_value(self.cfg.g_cond)?);
        flags.insert("d_cond".into(), serde_json::to_value(self.cfg.d_cond)?);
        flags.insert("film_position".into(), serde_json::to_value(self.cfg.arch.film_position)?);
        flags.insert("shared_adapter".into(), self.cfg.arch.shared_adapter.into());
        Ok(ModelCheckpoint::new(
            BackboneKind::Gan,
            &self.schema,
            self.embedding_dim,
            self.marginal_spec.clone(),
            flags,
            serde_json::to_value(&self.cfg)?,
            self.params.clone(),
        ))
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        let m = &ckpt.manifest;
        if m.backbone != BackboneKind::Gan {
            return Err(Error::Checkpoint(format!("expected a gan checkpoint, found {}", m.backbone)));
        }
        let cfg: GanTrainingConfig = serde_json::from_value(m.config.clone())?;
        let generator = Generator::layout(&m.schema, m.embedding_dim, &cfg, None);
        let critic = Critic::layout(&m.schema, m.embedding_dim, &cfg, None);
        let model = Self {
            schema: m.schema.clone(),
            marginal_spec: m.marginal_spec.clone(),
            cfg,
            embedding_dim: m.embedding_dim,
            params: ckpt.params.clone(),
            generator,
            critic,
        };
        // Every tensor the layout refers to must be present with its shape.
        let mut expected = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Generator::layout(&model.schema, model.embedding_dim, &model.cfg, Some((&mut expected, &mut rng)));
        Critic::layout(&model.schema, model.embedding_dim, &model.cfg, Some((&mut expected, &mut rng)));
        for (name, t) in expected.iter() {
            match model.params.get(name) {
                Some(v) if v.dim() == t.dim() => {}
                _ => return Err(Error::Checkpoint(format!("tensor `{name}` missing or misshapen"))),
            }
        }
        Ok(model)
    }
}

/// `E[D(x̂)] − E[D(x)] + λ_gp · GP`.
pub fn critic_objective<'t>(d_real: Var<'t>, d_fake: Var<'t>, gp: Var<'t>, lambda_gp: f64) -> Var<'t> {
    d_fake - d_real + gp.scale(lambda_gp)
}

/// `−E[D(G(z, e))] + λ_m · L_marg`, the marginal term dropped when disabled.
pub fn generator_objective<'t>(adversarial: Var<'t>, marginal: Var<'t>, marg_reg: bool, lambda_m: f64) -> Var<'t> {
    if marg_reg {
        adversarial + marginal.scale(lambda_m)
    } else {
        adversarial
    }
}

impl Sampler for GanModel {
    fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    fn draw_noise(&self, n: usize, seed: u64) -> GenerationNoise {
        draw_noise(n, self.cfg.noise_dim, self.gumbel_width(), seed)
    }

    fn generate(&self, embeddings: &Array2<f64>, noise: &GenerationNoise) -> Result<Population> {
        let batch = self.generate_encoded(embeddings, noise, true, true)?;
        decode(&batch, &self.schema)
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GanLogRow {
    pub step: usize,
    #[serde(rename = "L_D")]
    pub loss_d: f64,
    #[serde(rename = "L_G")]
    pub loss_g: f64,
    #[serde(rename = "L_marg")]
    pub loss_marg: f64,
    pub gp: f64,
}

pub fn write_log_csv<T: Serialize>(rows: &[T], path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub struct TrainedGan {
    pub model: GanModel,
    pub log: Vec<GanLogRow>,
}

fn batch_indices(n: usize, b: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..n)).collect()
}

fn divergence(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("{what} became {v}"),
        })
    }
}

/// Alternating WGAN-GP training: `n_critic` critic updates per generator
/// update. `on_checkpoint` is called every `checkpoint_every` generator steps
/// and once at the end.
pub fn train_gan(
    train: &Population,
    embeddings: &EmbeddingMatrix,
    schema: &AttributeSchema,
    cfg: &GanTrainingConfig,
    mut on_checkpoint: impl FnMut(usize, &GanModel) -> Result<()>,
) -> Result<TrainedGan> {
    if train.len() != embeddings.len() {
        return Err(Error::Shape(format!(
            "{} agents but {} embedding rows",
            train.len(),
            embeddings.len()
        )));
    }
    if train.is_empty() {
        return Err(Error::Data("training population is empty".into()));
    }
    let spec = MarginalSpec::fit(schema, train, cfg.bins)?;
    let mut model = GanModel::init(schema, spec, embeddings.dim(), cfg)?;
    let x_all = encode(train, schema)?.matrix;
    let e_all = embeddings.to_f64();
    let targets = MarginalTargets::new(schema, &model.marginal_spec, cfg.marg_eps)?;

    let (mut gps, mut dps) = model.split_params();
    let mut opt_g = Adam::new(
        AdamConfig { lr: cfg.lr_g, beta1: cfg.beta1, beta2: cfg.beta2, ..AdamConfig::with_lr(cfg.lr_g) },
        &gps,
    );
    let mut opt_d = Adam::new(
        AdamConfig { lr: cfg.lr_d, beta1: cfg.beta1, beta2: cfg.beta2, ..AdamConfig::with_lr(cfg.lr_d) },
        &dps,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let n = train.len();
    let b = cfg.batch_size;
    let w = schema.encoded_width();
    let tau = cfg.gumbel_tau;
    let hard = cfg.train_hard;
    let mut log = Vec::with_capacity(cfg.steps);
    let mut ema = (cfg.ema_decay > 0.0).then(|| gps.clone());

    for step in 1..=cfg.steps {
        let mut last_d = 0.0;
        let mut last_gp = 0.0;
        for _ in 0..cfg.n_critic {
            let idx = batch_indices(n, b, &mut rng);
            let x_real = x_all.select(Axis(0), &idx);
            let e_b = e_all.select(Axis(0), &idx);
            let z = standard_normal(b, cfg.noise_dim, &mut rng);
            let g = gumbel(b, w, &mut rng);
            let x_fake = {
                let tape = Tape::new();
                let p = gps.bind_const(&tape);
                let c = model.generator.condition(&p, tape.constant(e_b.clone()), Some(&mut rng));
                model
                    .generator
                    .forward(&p, tape.constant(z), c, &g, tau, hard, true)
                    .value()
            };
            let alpha = Array2::from_shape_fn((b, 1), |_| rng.random::<f64>());
            let tape = Tape::new();
            let gp_b = gps.bind_const(&tape);
            let dp = dps.bind(&tape);
            let c_d = model.critic_condition(&gp_b, &dp, tape.constant(e_b), Some(&mut rng));
            let d_real = model.critic.score(&dp, tape.constant(x_real.clone()), c_d).mean_all();
            let d_fake = model.critic.score(&dp, tape.constant(x_fake.clone()), c_d).mean_all();
            let pen = gradient_penalty_on(&tape, &x_real, &x_fake, &alpha, |x| model.critic.score(&dp, x, c_d));
            let loss = critic_objective(d_real, d_fake, pen, cfg.lambda_gp);
            last_d = loss.item();
            last_gp = pen.item();
            divergence(step, "critic loss", last_d)?;
            let grads = dp.grads(loss);
            opt_d.step(&mut dps, &grads)?;
        }

        let idx = batch_indices(n, b, &mut rng);
        let e_b = e_all.select(Axis(0), &idx);
        let z = standard_normal(b, cfg.noise_dim, &mut rng);
        let g = gumbel(b, w, &mut rng);
        let tape = Tape::new();
        let gp_v = gps.bind(&tape);
        let dp = dps.bind_const(&tape);
        let e = tape.constant(e_b);
        let c = model.generator.condition(&gp_v, e, Some(&mut rng));
        let x = model.generator.forward(&gp_v, tape.constant(z), c, &g, tau, hard, true);
        let c_d = match &model.critic.adapter {
            Some(a) => a.forward(&dp, e, Some(&mut rng)),
            None => c.detach(),
        };
        let adv = -model.critic.score(&dp, x, c_d).mean_all();
        let (cat, num) = targets.loss(x);
        let marg = cat + num;
        let loss = generator_objective(adv, marg, cfg.marg_reg, cfg.lambda_m);
        let row = GanLogRow {
            step,
            loss_d: last_d,
            loss_g: loss.item(),
            loss_marg: marg.item(),
            gp: last_gp,
        };
        divergence(step, "generator loss", row.loss_g)?;
        let grads = gp_v.grads(loss);
        opt_g.step(&mut gps, &grads)?;
        if let Some(ema) = &mut ema {
            for (k, v) in gps.iter() {
                let a = ema.get_mut(k).expect("same names");
                a.zip_mut_with(v, |a, &x| *a = cfg.ema_decay * *a + (1.0 - cfg.ema_decay) * x);
            }
        }
        log.push(row);
        if !gps.all_finite() || !dps.all_finite() {
            return Err(Error::Divergence {
                step,
                detail: "parameters became non-finite".into(),
            });
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
            model.params = merged(ema.as_ref().unwrap_or(&gps), &dps);
            on_checkpoint(step, &model)?;
        }
    }
    let mut params = merged(ema.as_ref().unwrap_or(&gps), &dps);
    params.quantize_f32();
    model.params = params;
    on_checkpoint(cfg.steps, &model)?;
    Ok(TrainedGan { model, log })
}

fn merged(g: &ParamSet, d: &ParamSet) -> ParamSet {
    let mut p = ParamSet::new();
    for (k, v) in g.iter().chain(d.iter()) {
        p.insert(k.clone(), v.clone());
    }
    p
}

/// One agent per embedding row: `z ~ N(0, I)` under `seed`, hard samples,
/// decoded.
pub fn sample_population(model: &GanModel, embeddings: &EmbeddingMatrix, seed: u64) -> Result<Population> {
    model.sample(&embeddings.to_f64(), seed)
}
