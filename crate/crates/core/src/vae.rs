//! Prior-conditioned VAE: the encoder sees attributes only, the persona
//! conditions a learned Gaussian prior and FiLM layers in the decoder.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, Tape, Var};
use crate::checkpoint::{BackboneKind, ModelCheckpoint};
use crate::conditioning::{linear_ref, Adapter, AdapterConfig, Film};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::gan::argmax_one_hot;
use crate::marginal::{MarginalSpec, MarginalTargets, DEFAULT_BINS, DEFAULT_EPS};
use crate::nn::{dropout_mask, Adam, AdamConfig, Bound, Init, Linear, ParamSet};
use crate::population::{decode, encode, EncodedBatch, Population};
use crate::sampler::{draw_noise, standard_normal, GenerationNoise, Sampler};
use crate::schema::{AttributeKind, AttributeSchema, Block};

/// Bound on predicted log-variances in the continuous likelihood.
pub const LOGVAR_CLAMP: f64 = 7.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeArchitecture {
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub adapter_hidden: usize,
    pub adapter_dropout: f64,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub prior_hidden: usize,
    pub dropout: f64,
}

impl Default for VaeArchitecture {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            cond_dim: 128,
            adapter_hidden: 1024,
            adapter_dropout: 0.1,
            encoder_hidden: vec![512, 512],
            decoder_hidden: vec![512, 512],
            prior_hidden: 512,
            dropout: 0.1,
        }
    }
}

impl VaeArchitecture {
    pub fn compact() -> Self {
        Self {
            latent_dim: 16,
            cond_dim: 32,
            adapter_hidden: 64,
            encoder_hidden: vec![64, 64],
            decoder_hidden: vec![64, 64],
            prior_hidden: 64,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeTrainingConfig {
    pub arch: VaeArchitecture,
    pub beta: f64,
    pub lambda_m: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub marg_reg: bool,
    pub bins: usize,
    pub marg_eps: f64,
    pub seed: u64,
}

impl Default for VaeTrainingConfig {
    fn default() -> Self {
        Self {
            arch: VaeArchitecture::default(),
            beta: 1.0,
            lambda_m: 2.0,
            lr: 2e-4,
            batch_size: 512,
            epochs: 300,
            marg_reg: true,
            bins: DEFAULT_BINS,
            marg_eps: DEFAULT_EPS,
            seed: 0,
        }
    }
}

impl VaeTrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.beta >= 0.0) || !(self.lambda_m >= 0.0) {
            return bad("beta and lambda_m must be non-negative");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.arch.latent_dim == 0 {
            return bad("batch_size and latent_dim must be positive");
        }
        if self.arch.encoder_hidden.is_empty() || self.arch.decoder_hidden.is_empty() {
            return bad("encoder and decoder need at least one hidden layer");
        }
        Ok(())
    }
}

fn maybe_dropout<'t>(h: Var<'t>, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var<'t> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let (r, c) = h.shape();
            h.mul_const(dropout_mask(r, c, rate, rng))
        }
        _ => h,
    }
}

/// Layer names and shapes; parameters live in a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct VaeNetwork {
    pub adapter: Adapter,
    enc: Vec<Linear>,
    enc_mu: Linear,
    enc_logvar: Linear,
    prior: Linear,
    prior_mu: Linear,
    prior_logvar: Linear,
    dec: Vec<Linear>,
    films: Vec<Film>,
    dec_out: Linear,
    dec_logvar: Linear,
    blocks: Vec<Block>,
    dropout: f64,
}

impl VaeNetwork {
    fn layout(
        schema: &AttributeSchema,
        embedding_dim: usize,
        cfg: &VaeTrainingConfig,
        mut params: Option<(&mut ParamSet, &mut ChaCha8Rng)>,
    ) -> Self {
        let a = &cfg.arch;
        let mut make = |name: &str, i: usize, o: usize, init: Init| match params.as_mut() {
            Some((ps, rng)) => Linear::new(ps, name, i, o, init, rng),
            None => linear_ref(name, i, o),
        };
        let width = schema.encoded_width();
        let mut enc = Vec::new();
        let mut w = width;
        for (k, &h) in a.encoder_hidden.iter().enumerate() {
            enc.push(make(&format!("v.enc.l{k}"), w, h, Init::Uniform));
            w = h;
        }
        let enc_mu = make("v.enc.mu", w, a.latent_dim, Init::Uniform);
        let enc_logvar = make("v.enc.logvar", w, a.latent_dim, Init::Uniform);
        let prior = make("v.prior.l0", a.cond_dim, a.prior_hidden, Init::Uniform);
        // Zero heads: a fresh prior is exactly N(0, I).
        let prior_mu = make("v.prior.mu", a.prior_hidden, a.latent_dim, Init::Zeros);
        let prior_logvar = make("v.prior.logvar", a.prior_hidden, a.latent_dim, Init::Zeros);
        let mut dec = Vec::new();
        let mut films = Vec::new();
        let mut w = a.latent_dim;
        for (k, &h) in a.decoder_hidden.iter().enumerate() {
            dec.push(make(&format!("v.dec.l{k}"), w, h, Init::Uniform));
            make(&format!("v.dec.film{k}.gamma"), a.cond_dim, h, Init::Zeros);
            make(&format!("v.dec.film{k}.beta"), a.cond_dim, h, Init::Zeros);
            films.push(Film::attach(&format!("v.dec.film{k}"), a.cond_dim, h));
            w = h;
        }
        let dec_out = make("v.dec.out", w, width, Init::Uniform);
        let dec_logvar = make("v.dec.logvar", w, schema.numerical_count(), Init::Uniform);
        let acfg = AdapterConfig {
            embedding_dim,
            hidden_dim: a.adapter_hidden,
            cond_dim: a.cond_dim,
            dropout: a.adapter_dropout,
        };
        let adapter = match params {
            Some((ps, rng)) => Adapter::new(ps, "v.adapter", acfg, rng),
            None => Adapter::attach("v.adapter", acfg),
        };
        Self {
            adapter,
            enc,
            enc_mu,
            enc_logvar,
            prior,
            prior_mu,
            prior_logvar,
            dec,
            films,
            dec_out,
            dec_logvar,
            blocks: schema.blocks(),
            dropout: a.dropout,
        }
    }

    /// `q(z | x)`; the conditioning vector never enters here.
    pub fn encode_posterior<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> (Var<'t>, Var<'t>) {
        let mut h = x;
        for l in &self.enc {
            h = maybe_dropout(l.forward(p, h).relu(), self.dropout, dropout.as_deref_mut());
        }
        (self.enc_mu.forward(p, h), self.enc_logvar.forward(p, h))
    }

    /// `p(z | c)` as `(μ_p, log σ²_p)`.
    pub fn conditional_prior<'t>(&self, p: &Bound<'t>, c: Var<'t>) -> (Var<'t>, Var<'t>) {
        let h = self.prior.forward(p, c).relu();
        (self.prior_mu.forward(p, h), self.prior_logvar.forward(p, h))
    }

    /// Decoder heads: `(out, logvar)`, where `out` holds numerical means and
    /// categorical logits in encoded layout.
    pub fn decode_heads<'t>(
        &self,
        p: &Bound<'t>,
        z: Var<'t>,
        c: Var<'t>,
        modulate: bool,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> (Var<'t>, Var<'t>) {
        let mut h = z;
        for (l, f) in self.dec.iter().zip(&self.films) {
            h = l.forward(p, h).relu();
            if modulate {
                h = f.forward(p, h, c);
            }
            h = maybe_dropout(h, self.dropout, dropout.as_deref_mut());
        }
        (self.dec_out.forward(p, h), self.dec_logvar.forward(p, h))
    }

    /// Softmax over categorical logit blocks, numerical means untouched.
    fn soft_outputs<'t>(&self, out: Var<'t>) -> Var<'t> {
        let parts: Vec<Var<'t>> = self
            .blocks
            .iter()
            .map(|b| {
                let l = out.slice_cols(b.start, b.start + b.width);
                match b.kind {
                    AttributeKind::Numerical => l,
                    AttributeKind::Categorical => l.softmax_rows(),
                }
            })
            .collect();
        concat_cols(&parts)
    }

    /// `(continuous NLL, categorical cross-entropy)`, each averaged over its
    /// variables and over rows.
    fn reconstruction<'t>(&self, out: Var<'t>, logvar: Var<'t>, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let tape = out.tape();
        let rows = out.shape().0 as f64;
        let mut cont: Option<Var<'t>> = None;
        let mut cat: Option<Var<'t>> = None;
        let (mut n_num, mut n_cat) = (0usize, 0usize);
        let acc = |slot: &mut Option<Var<'t>>, v: Var<'t>| {
            *slot = Some(match *slot {
                Some(a) => a + v,
                None => v,
            })
        };
        for b in &self.blocks {
            let xb = x.slice_cols(b.start, b.start + b.width);
            let ob = out.slice_cols(b.start, b.start + b.width);
            match b.kind {
                AttributeKind::Numerical => {
                    let lv = logvar.slice_cols(n_num, n_num + 1).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
                    let r = (xb - ob).square() / lv.exp();
                    let nll = (lv + r).add_scalar((2.0 * std::f64::consts::PI).ln()).scale(0.5);
                    acc(&mut cont, nll.sum_all());
                    n_num += 1;
                }
                AttributeKind::Categorical => {
                    let ce = -(ob.log_softmax_rows() * xb).sum_all();
                    acc(&mut cat, ce);
                    n_cat += 1;
                }
            }
        }
        let avg = |v: Option<Var<'t>>, n: usize| match v {
            Some(v) => v.scale(1.0 / (n as f64 * rows)),
            None => tape.scalar(0.0),
        };
        (avg(cont, n_num), avg(cat, n_cat))
    }
}

/// Closed-form `KL(N(μ, σ²) ‖ N(μ_p, σ_p²))`, summed over dimensions and
/// averaged over rows.
pub fn gaussian_kl_on<'t>(mu: Var<'t>, logvar: Var<'t>, mu_p: Var<'t>, logvar_p: Var<'t>) -> Var<'t> {
    let rows = mu.shape().0 as f64;
    let d = mu - mu_p;
    let ratio = (logvar.exp() + d.square()) / logvar_p.exp();
    (logvar_p - logvar + ratio).add_scalar(-1.0).sum_all().scale(0.5 / rows)
}

pub fn gaussian_kl(
    mu: &Array2<f64>,
    logvar: &Array2<f64>,
    mu_p: &Array2<f64>,
    logvar_p: &Array2<f64>,
) -> Result<f64> {
    let dim = mu.dim();
    if logvar.dim() != dim || mu_p.dim() != dim || logvar_p.dim() != dim {
        return Err(Error::Shape("gaussian_kl arguments differ in shape".into()));
    }
    let tape = Tape::new();
    let c = |a: &Array2<f64>| tape.constant(a.clone());
    Ok(gaussian_kl_on(c(mu), c(logvar), c(mu_p), c(logvar_p)).item())
}

/// Every term of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VaeLoss {
    pub total: f64,
    pub cont_rec: f64,
    pub cat_rec: f64,
    pub kl: f64,
    pub cont_marg: f64,
    pub cat_marg: f64,
}

struct LossVars<'t> {
    total: Var<'t>,
    cont_rec: Var<'t>,
    cat_rec: Var<'t>,
    kl: Var<'t>,
    cont_marg: Var<'t>,
    cat_marg: Var<'t>,
}

impl LossVars<'_> {
    fn values(&self) -> VaeLoss {
        VaeLoss {
            total: self.total.item(),
            cont_rec: self.cont_rec.item(),
            cat_rec: self.cat_rec.item(),
            kl: self.kl.item(),
            cont_marg: self.cont_marg.item(),
            cat_marg: self.cat_marg.item(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VaeModel {
    pub schema: AttributeSchema,
    pub marginal_spec: MarginalSpec,
    pub cfg: VaeTrainingConfig,
    pub embedding_dim: usize,
    pub params: ParamSet,
    pub network: VaeNetwork,
}

impl VaeModel {
    pub fn init(
        schema: &AttributeSchema,
        marginal_spec: MarginalSpec,
        embedding_dim: usize,
        cfg: &VaeTrainingConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if !schema.has_stats() {
            return Err(Error::Schema("schema statistics must be fitted before training".into()));
        }
        marginal_spec.check_schema(schema)?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let network = VaeNetwork::layout(schema, embedding_dim, cfg, Some((&mut params, &mut rng)));
        Ok(Self {
            schema: schema.clone(),
            marginal_spec,
            cfg: cfg.clone(),
            embedding_dim,
            params,
            network,
        })
    }

    fn check_rows(&self, x: &Array2<f64>, embeddings: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.schema.encoded_width() {
            return Err(Error::Shape(format!(
                "batch width {} does not match schema width {}",
                x.ncols(),
                self.schema.encoded_width()
            )));
        }
        if embeddings.ncols() != self.embedding_dim || embeddings.nrows() != x.nrows() {
            return Err(Error::Shape("embeddings do not match the batch or the model".into()));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn loss_graph<'t>(
        &self,
        p: &Bound<'t>,
        x: &Array2<f64>,
        embeddings: &Array2<f64>,
        eps: &Array2<f64>,
        targets: &MarginalTargets,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> LossVars<'t> {
        let tape = p.get(&self.network.dec_out.weight).tape();
        let xv = tape.constant(x.clone());
        let c = self
            .network
            .adapter
            .forward(p, tape.constant(embeddings.clone()), dropout.as_deref_mut());
        let (mu, logvar) = self.network.encode_posterior(p, xv, dropout.as_deref_mut());
        let (mu_p, logvar_p) = self.network.conditional_prior(p, c);
        let z = mu + logvar.scale(0.5).exp() * tape.constant(eps.clone());
        let (out, dec_logvar) = self.network.decode_heads(p, z, c, true, dropout);
        let (cont_rec, cat_rec) = self.network.reconstruction(out, dec_logvar, xv);
        let kl = gaussian_kl_on(mu, logvar, mu_p, logvar_p);
        let (cat_marg, cont_marg) = targets.loss(self.network.soft_outputs(out));
        let mut total = cont_rec + cat_rec + kl.scale(self.cfg.beta);
        if self.cfg.marg_reg {
            total = total + (cont_marg + cat_marg).scale(self.cfg.lambda_m);
        }
        LossVars {
            total,
            cont_rec,
            cat_rec,
            kl,
            cont_marg,
            cat_marg,
        }
    }

    /// The objective on one batch without dropout; `seed` fixes the
    /// reparameterization noise.
    pub fn vae_loss(&self, x: &EncodedBatch, embeddings: &Array2<f64>, seed: u64) -> Result<VaeLoss> {
        self.check_rows(&x.matrix, embeddings)?;
        let targets = MarginalTargets::new(&self.schema, &self.marginal_spec, self.cfg.marg_eps)?;
        let eps = standard_normal(x.rows(), self.cfg.arch.latent_dim, &mut ChaCha8Rng::seed_from_u64(seed));
        let tape = Tape::new();
        let p = self.params.bind_const(&tape);
        Ok(self.loss_graph(&p, &x.matrix, embeddings, &eps, &targets, None).values())
    }

    /// Loss and its gradient in parameter order for fixed noise, without
    /// dropout.
    pub fn loss_and_grads(
        &self,
        x: &Array2<f64>,
        embeddings: &Array2<f64>,
        eps: &Array2<f64>,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        self.check_rows(x, embeddings)?;
        let targets = MarginalTargets::new(&self.schema, &self.marginal_spec, self.cfg.marg_eps)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let l = self.loss_graph(&p, x, embeddings, eps, &targets, None);
        Ok((l.total.item(), p.grads(l.total)))
    }

    /// Posterior parameters of encoded rows.
    pub fn encode_posterior(&self, x: &EncodedBatch) -> Result<(Array2<f64>, Array2<f64>)> {
        if x.matrix.ncols() != self.schema.encoded_width() {
            return Err(Error::Shape("batch width does not match the schema".into()));
        }
        let tape = Tape::new();
        let p = self.params.bind_const(&tape);
        let (mu, lv) = self.network.encode_posterior(&p, tape.constant(x.matrix.clone()), None);
        Ok((mu.value(), lv.value()))
    }

    /// Prior parameters for each embedding row.
    pub fn conditional_prior(&self, embeddings: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if embeddings.ncols() != self.embedding_dim {
            return Err(Error::Shape("embedding dimension does not match the model".into()));
        }
        let tape = Tape::new();
        let p = self.params.bind_const(&tape);
        let c = self.network.adapter.forward(&p, tape.constant(embeddings.clone()), None);
        let (mu, lv) = self.network.conditional_prior(&p, c);
        Ok((mu.value(), lv.value()))
    }

    /// Decoder head outputs for given latents, FiLM bypassed when
    /// `modulate` is false.
    pub fn decoder_outputs(&self, z: &Array2<f64>, embeddings: &Array2<f64>, modulate: bool) -> Result<Array2<f64>> {
        if z.ncols() != self.cfg.arch.latent_dim || embeddings.ncols() != self.embedding_dim || z.nrows() != embeddings.nrows() {
            return Err(Error::Shape("decoder inputs do not match the model".into()));
        }
        let tape = Tape::new();
        let p = self.params.bind_const(&tape);
        let c = self.network.adapter.forward(&p, tape.constant(embeddings.clone()), None);
        let (out, _) = self.network.decode_heads(&p, tape.constant(z.clone()), c, modulate, None);
        Ok(out.value())
    }

    /// Hard encoded agents: `z = μ_p + σ_p ε`, categorical argmax of logits,
    /// numerical predicted means.
    pub fn generate_encoded(&self, embeddings: &Array2<f64>, noise: &GenerationNoise) -> Result<EncodedBatch> {
        if embeddings.ncols() != self.embedding_dim {
            return Err(Error::Shape(format!(
                "embeddings have {} dims, model expects {}",
                embeddings.ncols(),
                self.embedding_dim
            )));
        }
        if noise.z.dim() != (embeddings.nrows(), self.cfg.arch.latent_dim) {
            return Err(Error::Shape("noise does not match embeddings and model".into()));
        }
        let n = embeddings.nrows();
        let mut out = Array2::zeros((n, self.schema.encoded_width()));
        const CHUNK: usize = 4096;
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let tape = Tape::new();
            let p = self.params.bind_const(&tape);
            let e = tape.constant(embeddings.slice(ndarray::s![start..end, ..]).to_owned());
            let c = self.network.adapter.forward(&p, e, None);
            let (mu_p, lv_p) = self.network.conditional_prior(&p, c);
            let eps = tape.constant(noise.z.slice(ndarray::s![start..end, ..]).to_owned());
            let z = mu_p + lv_p.scale(0.5).exp() * eps;
            let (o, _) = self.network.decode_heads(&p, z, c, true, None);
            let mut o = o.value();
            for b in self.network.blocks.iter().filter(|b| b.kind == AttributeKind::Categorical) {
                let one_hot = argmax_one_hot(o.slice(ndarray::s![.., b.start..b.start + b.width]));
                o.slice_mut(ndarray::s![.., b.start..b.start + b.width]).assign(&one_hot);
            }
            out.slice_mut(ndarray::s![start..end, ..]).assign(&o);
            start = end;
        }
        Ok(EncodedBatch { matrix: out })
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        let mut flags = serde_json::Map::new();
        flags.insert("decoder_film".into(), true.into());
        flags.insert("conditional_prior".into(), true.into());
        Ok(ModelCheckpoint::new(
            BackboneKind::Vae,
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
        if m.backbone != BackboneKind::Vae {
            return Err(Error::Checkpoint(format!("expected a vae checkpoint, found {}", m.backbone)));
        }
        let cfg: VaeTrainingConfig = serde_json::from_value(m.config.clone())?;
        let network = VaeNetwork::layout(&m.schema, m.embedding_dim, &cfg, None);
        let mut expected = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        VaeNetwork::layout(&m.schema, m.embedding_dim, &cfg, Some((&mut expected, &mut rng)));
        for (name, t) in expected.iter() {
            match ckpt.params.get(name) {
                Some(v) if v.dim() == t.dim() => {}
                _ => return Err(Error::Checkpoint(format!("tensor `{name}` missing or misshapen"))),
            }
        }
        Ok(Self {
            schema: m.schema.clone(),
            marginal_spec: m.marginal_spec.clone(),
            cfg,
            embedding_dim: m.embedding_dim,
            params: ckpt.params.clone(),
            network,
        })
    }
}

impl Sampler for VaeModel {
    fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    fn draw_noise(&self, n: usize, seed: u64) -> GenerationNoise {
        draw_noise(n, self.cfg.arch.latent_dim, 0, seed)
    }

    fn generate(&self, embeddings: &Array2<f64>, noise: &GenerationNoise) -> Result<Population> {
        decode(&self.generate_encoded(embeddings, noise)?, &self.schema)
    }
}

/// Mean of each term over the mini-batches of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VaeLogRow {
    pub epoch: usize,
    pub loss: f64,
    pub cont_rec: f64,
    pub cat_rec: f64,
    pub kl: f64,
    pub cont_marg: f64,
    pub cat_marg: f64,
}

pub struct TrainedVae {
    pub model: VaeModel,
    pub log: Vec<VaeLogRow>,
}

/// Epochs of shuffled mini-batches under Adam. `on_epoch` sees the model
/// after every epoch.
pub fn train_vae(
    train: &Population,
    embeddings: &EmbeddingMatrix,
    schema: &AttributeSchema,
    cfg: &VaeTrainingConfig,
    mut on_epoch: impl FnMut(usize, &VaeModel) -> Result<()>,
) -> Result<TrainedVae> {
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
    let mut model = VaeModel::init(schema, spec, embeddings.dim(), cfg)?;
    let targets = MarginalTargets::new(schema, &model.marginal_spec, cfg.marg_eps)?;
    let x_all = encode(train, schema)?.matrix;
    let e_all = embeddings.to_f64();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 6];
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let x = x_all.select(Axis(0), idx);
            let e = e_all.select(Axis(0), idx);
            let eps = standard_normal(idx.len(), cfg.arch.latent_dim, &mut rng);
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let l = model.loss_graph(&p, &x, &e, &eps, &targets, Some(&mut rng));
            let v = l.values();
            if !v.total.is_finite() {
                return Err(Error::Divergence {
                    step: epoch,
                    detail: format!("vae loss became {}", v.total),
                });
            }
            let grads = p.grads(l.total);
            opt.step(&mut model.params, &grads)?;
            for (s, x) in sums.iter_mut().zip([v.total, v.cont_rec, v.cat_rec, v.kl, v.cont_marg, v.cat_marg]) {
                *s += x;
            }
            batches += 1;
        }
        if !model.params.all_finite() {
            return Err(Error::Divergence {
                step: epoch,
                detail: "parameters became non-finite".into(),
            });
        }
        let k = batches as f64;
        log.push(VaeLogRow {
            epoch,
            loss: sums[0] / k,
            cont_rec: sums[1] / k,
            cat_rec: sums[2] / k,
            kl: sums[3] / k,
            cont_marg: sums[4] / k,
            cat_marg: sums[5] / k,
        });
        on_epoch(epoch, &model)?;
    }
    model.params.quantize_f32();
    Ok(TrainedVae { model, log })
}

pub fn sample_vae(model: &VaeModel, embeddings: &EmbeddingMatrix, seed: u64) -> Result<Population> {
    model.sample(&embeddings.to_f64(), seed)
}
