//! Interventions on trained backbones: probe directions in embedding space,
//! same-z sweeps along them, subgroup selection, and text-level edits.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, IoContext, Result};
use crate::persona::{generate_personas, LlmClientConfig, TextCache, TextClient};
use crate::population::{Column, Population};
use crate::sampler::{GenerationNoise, Sampler};
use crate::schema::{AttributeKind, AttributeSchema};

/// The intervention grid used when none is given.
pub const DEFAULT_ALPHAS: [f64; 7] = [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStandardizer {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl EmbeddingStandardizer {
    /// Column means and standard deviations (floored at 1e-8) of training
    /// embeddings, and the standardized matrix.
    pub fn fit(train: &Array2<f64>) -> Result<(Self, Array2<f64>)> {
        if train.nrows() < 2 {
            return Err(Error::InvalidArgument("standardizing needs at least two rows".into()));
        }
        let mu = train.mean_axis(Axis(0)).expect("non-empty");
        let sigma = train.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-8));
        let s = Self {
            mu: mu.to_vec(),
            sigma: sigma.to_vec(),
        };
        let z = s.apply(train)?;
        Ok((s, z))
    }

    pub fn apply(&self, e: &Array2<f64>) -> Result<Array2<f64>> {
        if e.ncols() != self.mu.len() {
            return Err(Error::Shape(format!(
                "embedding has {} dims, standardizer has {}",
                e.ncols(),
                self.mu.len()
            )));
        }
        let mu = Array1::from(self.mu.clone());
        let sigma = Array1::from(self.sigma.clone());
        Ok((e - &mu) / &sigma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionDirection {
    /// Unit vector in embedding space.
    pub d: Vec<f64>,
    pub probe_lambda: f64,
    pub target_label_def: String,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `Σ_i [log(1 + e^{t_i}) − y_i t_i] + λ‖w‖²` with `t = Xw + b`; the
/// intercept is not penalized.
fn probe_objective(x: &Array2<f64>, y: &[f64], w: &Array1<f64>, b: f64, lambda: f64) -> f64 {
    let t = x.dot(w) + b;
    let data: f64 = t
        .iter()
        .zip(y)
        .map(|(&t, &y)| {
            // log(1 + e^t) - y t, computed stably.
            let sp = if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
            sp - y * t
        })
        .sum();
    data + lambda * w.dot(w)
}

/// L2-regularized logistic probe on standardized embeddings, solved by
/// Newton steps whose systems are solved with conjugate gradients on
/// Hessian-vector products. Returns `d = w / ‖w‖`.
pub fn fit_direction(e_std: &Array2<f64>, labels: &[bool], lambda: f64) -> Result<InterventionDirection> {
    let (n, dim) = e_std.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument("probe lambda must be positive".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == n {
        return Err(Error::InvalidArgument("probe labels contain a single class".into()));
    }
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let x = e_std;
    let mut w = Array1::<f64>::zeros(dim);
    let mut b = 0.0;
    let mut converged = false;
    for _ in 0..200 {
        let t = x.dot(&w) + b;
        let p: Array1<f64> = t.mapv(sigmoid);
        let r: Array1<f64> = &p - &Array1::from(y.clone());
        let gw = x.t().dot(&r) + 2.0 * lambda * &w;
        let gb = r.sum();
        let gnorm = (gw.dot(&gw) + gb * gb).sqrt();
        if gnorm < 1e-6 {
            converged = true;
            break;
        }
        let s: Array1<f64> = p.mapv(|p| p * (1.0 - p));
        // Hessian-vector product on (v_w, v_b).
        let hv = |vw: &Array1<f64>, vb: f64| -> (Array1<f64>, f64) {
            let u = (x.dot(vw) + vb) * &s;
            (x.t().dot(&u) + 2.0 * lambda * vw, u.sum())
        };
        // Conjugate gradients for H [dw; db] = -[gw; gb].
        let mut dw = Array1::<f64>::zeros(dim);
        let mut db = 0.0;
        let mut rw = -&gw;
        let mut rb = -gb;
        let mut pw = rw.clone();
        let mut pb = rb;
        let mut rr = rw.dot(&rw) + rb * rb;
        let tol = (1e-3 * gnorm).min(1e-10_f64.max(gnorm * gnorm)).powi(2);
        for _ in 0..(dim + 1).max(10) * 2 {
            if rr <= tol {
                break;
            }
            let (qw, qb) = hv(&pw, pb);
            let curv = pw.dot(&qw) + pb * qb;
            if curv <= 0.0 {
                break;
            }
            let a = rr / curv;
            dw.scaled_add(a, &pw);
            db += a * pb;
            rw.scaled_add(-a, &qw);
            rb -= a * qb;
            let rr_new = rw.dot(&rw) + rb * rb;
            let beta = rr_new / rr;
            pw = &rw + &(beta * &pw);
            pb = rb + beta * pb;
            rr = rr_new;
        }
        // Backtracking line search on the objective.
        let f0 = probe_objective(x, &y, &w, b, lambda);
        let slope = gw.dot(&dw) + gb * db;
        let mut step = 1.0;
        loop {
            let w_new = &w + &(step * &dw);
            let b_new = b + step * db;
            let f = probe_objective(x, &y, &w_new, b_new, lambda);
            if f <= f0 + 1e-4 * step * slope || step < 1e-12 {
                w = w_new;
                b = b_new;
                break;
            }
            step *= 0.5;
        }
    }
    if !converged {
        log::warn!("probe stopped before the gradient norm reached 1e-6");
    }
    let norm = w.dot(&w).sqrt();
    if !(norm > 0.0) {
        return Err(Error::Data("probe weights are zero; labels carry no linear signal".into()));
    }
    Ok(InterventionDirection {
        d: (w / norm).to_vec(),
        probe_lambda: lambda,
        target_label_def: String::new(),
    })
}

/// `e0 + α d`, without projection or renormalization.
pub fn edit_embedding(e0: &[f64], dir: &InterventionDirection, alpha: f64) -> Result<Vec<f64>> {
    if e0.len() != dir.d.len() {
        return Err(Error::Shape(format!(
            "embedding has {} dims, direction has {}",
            e0.len(),
            dir.d.len()
        )));
    }
    Ok(e0.iter().zip(&dir.d).map(|(e, d)| e + alpha * d).collect())
}

/// [`edit_embedding`] on every row.
pub fn edit_embeddings(e0: &Array2<f64>, dir: &InterventionDirection, alpha: f64) -> Result<Array2<f64>> {
    if e0.ncols() != dir.d.len() {
        return Err(Error::Shape(format!(
            "embeddings have {} dims, direction has {}",
            e0.ncols(),
            dir.d.len()
        )));
    }
    let d = Array1::from(dir.d.clone());
    Ok(e0 + &(alpha * &d))
}

fn numeric_target(pop: &Population, schema: &AttributeSchema, target: &str) -> Result<Vec<f64>> {
    let j = schema.require_index(target)?;
    match pop.column(j) {
        Column::Numerical(v) => Ok(v.clone()),
        Column::Categorical(_) => Err(Error::InvalidArgument(format!("target `{target}` is not numerical"))),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Share of rows with a strictly positive value.
pub fn activation(v: &[f64]) -> f64 {
    v.iter().filter(|&&x| x > 0.0).count() as f64 / v.len() as f64
}

/// Mean `|edited − base|` of every numerical attribute other than `target`.
pub fn side_effects(
    base: &Population,
    edited: &Population,
    schema: &AttributeSchema,
    target: &str,
) -> Result<IndexMap<String, f64>> {
    if base.len() != edited.len() {
        return Err(Error::Shape(format!(
            "populations differ in length: {} vs {}",
            base.len(),
            edited.len()
        )));
    }
    base.validate(schema)?;
    edited.validate(schema)?;
    schema.require_index(target)?;
    let mut out = IndexMap::new();
    for (j, spec) in schema.specs().iter().enumerate() {
        if spec.kind != AttributeKind::Numerical || spec.name == target {
            continue;
        }
        let (a, b) = (base.numerical(j), edited.numerical(j));
        let m = if a.is_empty() {
            0.0
        } else {
            a.iter().zip(b).map(|(x, y)| (y - x).abs()).sum::<f64>() / a.len() as f64
        };
        out.insert(spec.name.clone(), m);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticSweepRow {
    pub alpha: f64,
    pub mean_target: f64,
    pub activation: f64,
    /// Relative to the unedited generation under the same noise.
    pub side_effects: IndexMap<String, f64>,
}

pub struct SemanticSweep {
    pub rows: Vec<SemanticSweepRow>,
    /// Unedited generation under the shared noise.
    pub baseline: Population,
    /// One generated population per α, in grid order.
    pub populations: Vec<Population>,
}

/// Generate from `e0 + α d` for each α with one noise draw shared by all
/// of them, so that differences come from the edit alone.
pub fn semantic_sweep<S: Sampler + ?Sized>(
    model: &S,
    e0: &Array2<f64>,
    dir: &InterventionDirection,
    alphas: &[f64],
    target: &str,
    seed: u64,
) -> Result<SemanticSweep> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("empty intervention grid".into()));
    }
    if alphas.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("intervention grid must be strictly ascending".into()));
    }
    let schema = model.schema();
    let j = schema.require_index(target)?;
    if schema.spec(j).kind != AttributeKind::Numerical {
        return Err(Error::InvalidArgument(format!("target `{target}` is not numerical")));
    }
    let noise = model.draw_noise(e0.nrows(), seed);
    let baseline = model.generate(e0, &noise)?;
    let populations = generate_many(model, alphas, &noise, |a| edit_embeddings(e0, dir, a))?;
    let rows = alphas
        .iter()
        .zip(&populations)
        .map(|(&alpha, pop)| {
            let v = numeric_target(pop, schema, target)?;
            Ok(SemanticSweepRow {
                alpha,
                mean_target: mean(&v),
                activation: activation(&v),
                side_effects: side_effects(&baseline, pop, schema, target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SemanticSweep {
        rows,
        baseline,
        populations,
    })
}

/// One generation per grid point, spread over the available cores.
fn generate_many<S: Sampler + ?Sized>(
    model: &S,
    alphas: &[f64],
    noise: &GenerationNoise,
    embed: impl Fn(f64) -> Result<Array2<f64>> + Sync,
) -> Result<Vec<Population>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(alphas.len());
    if workers <= 1 {
        return alphas.iter().map(|&a| model.generate(&embed(a)?, noise)).collect();
    }
    let mut slots: Vec<Option<Result<Population>>> = (0..alphas.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        for (chunk_alphas, chunk_slots) in alphas.chunks(alphas.len().div_ceil(workers)).zip(
            slots.chunks_mut(alphas.len().div_ceil(workers)),
        ) {
            let embed = &embed;
            s.spawn(move || {
                for (&a, slot) in chunk_alphas.iter().zip(chunk_slots) {
                    *slot = Some(embed(a).and_then(|e| model.generate(&e, noise)));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

pub fn write_semantic_sweep_csv(rows: &[SemanticSweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let extra: Vec<String> = rows.first().map(|r| r.side_effects.keys().cloned().collect()).unwrap_or_default();
    let mut header = vec!["alpha".to_string(), "mean_target".into(), "activation".into()];
    header.extend(extra.iter().cloned());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.alpha.to_string(), r.mean_target.to_string(), r.activation.to_string()];
        rec.extend(extra.iter().map(|k| r.side_effects.get(k).copied().unwrap_or(f64::NAN).to_string()));
        w.write_record(&rec)?;
    }
    w.flush().at(path)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgroups {
    pub high: Vec<usize>,
    pub low: Vec<usize>,
}

/// `high`: the top 10% of positive-target agents by value (ties by index).
/// `low`: 5% of the remaining positive agents plus 5% of the zero-target
/// agents, both drawn uniformly under `seed`. Counts round half away from
/// zero.
pub fn build_subgroups(pop: &Population, schema: &AttributeSchema, target: &str, seed: u64) -> Result<Subgroups> {
    let v = numeric_target(pop, schema, target)?;
    let mut positive: Vec<usize> = (0..v.len()).filter(|&i| v[i] > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::Data(format!("no agent has a positive `{target}`")));
    }
    let zero: Vec<usize> = (0..v.len()).filter(|&i| !(v[i] > 0.0)).collect();
    let share = |n: usize, f: f64| (n as f64 * f).round() as usize;
    positive.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    let n_high = share(positive.len(), 0.10);
    let mut high: Vec<usize> = positive[..n_high].to_vec();
    let rest: Vec<usize> = {
        let mut r = positive[n_high..].to_vec();
        r.sort_unstable();
        r
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut low: Vec<usize> = sample(&mut rng, rest.len(), share(positive.len(), 0.05).min(rest.len()))
        .into_iter()
        .map(|k| rest[k])
        .collect();
    low.extend(
        sample(&mut rng, zero.len(), share(zero.len(), 0.05).min(zero.len()))
            .into_iter()
            .map(|k| zero[k]),
    );
    high.sort_unstable();
    low.sort_unstable();
    Ok(Subgroups { high, low })
}

/// Percentile by linear interpolation at rank `q (n + 1)` (1-based), clamped
/// to the sample range. `q` in [0, 1].
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("quantile {q} outside [0, 1]")));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let h = q * (n as f64 + 1.0);
    if h <= 1.0 {
        return Ok(s[0]);
    }
    if h >= n as f64 {
        return Ok(s[n - 1]);
    }
    let lo = h.floor();
    let frac = h - lo;
    let i = lo as usize - 1;
    Ok(s[i] + frac * (s[i + 1] - s[i]))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal samples of size ≥ 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextEditVariant {
    /// Add a cue signalling the target behavior (low to high).
    Insertion,
    /// Delete cues signalling it (high to low).
    Removal,
    /// Reframe the description so the behavior reads as absent (high to low).
    Suppression,
}

impl TextEditVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            TextEditVariant::Insertion => "insertion",
            TextEditVariant::Removal => "removal",
            TextEditVariant::Suppression => "suppression",
        }
    }

    fn instruction(&self, cue: &str) -> String {
        match self {
            TextEditVariant::Insertion => format!(
                "Insert one short phrase stating that this person regularly uses {cue}. \
                 Leave every other sentence as it is."
            ),
            TextEditVariant::Removal => format!(
                "Delete every phrase that mentions or implies use of {cue}. \
                 Do not add anything new."
            ),
            TextEditVariant::Suppression => format!(
                "Rewrite only the parts that concern {cue} so that the person clearly does not use it. \
                 Keep the rest of the description intact."
            ),
        }
    }
}

/// Edit prompt for one persona. The persona follows the `PERSONA:` line.
pub fn edit_prompt(persona: &str, variant: TextEditVariant, cue: &str) -> String {
    format!(
        "You edit short first-person persona descriptions with minimal, local changes. \
         Keep the text grammatical and coherent and keep its length.\n\
         Task: {}\nReturn only the edited description.\nCUE: {cue}\nPERSONA:\n{persona}",
        variant.instruction(cue)
    )
}

/// One edited text per persona, via the same cached, retrying generation
/// path as persona writing. The variant and cue are part of the cache tag.
pub fn text_edit(
    personas: &[String],
    variant: TextEditVariant,
    cue: &str,
    client: &dyn TextClient,
    cfg: &LlmClientConfig,
    cache: Option<&TextCache>,
) -> Result<Vec<String>> {
    if personas.is_empty() {
        return Ok(Vec::new());
    }
    let prompts: Vec<String> = personas.iter().map(|p| edit_prompt(p, variant, cue)).collect();
    let tag = format!("edit:{}:{cue}", variant.as_str());
    let batch = generate_personas(&prompts, client, cfg, cache, &tag)?;
    if let Some(f) = batch.failures.first() {
        return Err(Error::Client(format!(
            "{} of {} edits failed; first at index {} after {} attempts: {}",
            batch.failures.len(),
            personas.len(),
            f.index,
            f.attempts,
            f.error
        )));
    }
    Ok(batch.texts.into_iter().map(|t| t.expect("no failures")).collect())
}

/// Rule-based stand-in for a language model on edit prompts, so that text
/// interventions run offline. Sentences are split on `.`; a sentence
/// mentions the cue when it contains the cue text (case-insensitive).
pub struct OfflineEditClient;

impl TextClient for OfflineEditClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let cue = prompt
            .lines()
            .find_map(|l| l.strip_prefix("CUE: "))
            .ok_or_else(|| Error::Client("edit prompt has no CUE line".into()))?;
        let persona = prompt
            .split_once("PERSONA:\n")
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Client("edit prompt has no PERSONA section".into()))?;
        let variant = if prompt.contains("Task: Insert") {
            TextEditVariant::Insertion
        } else if prompt.contains("Task: Delete") {
            TextEditVariant::Removal
        } else {
            TextEditVariant::Suppression
        };
        let lc = cue.to_lowercase();
        let sentences: Vec<&str> = persona.split('.').map(str::trim).filter(|s| !s.is_empty()).collect();
        let mentions = |s: &str| s.to_lowercase().contains(&lc);
        let kept: Vec<String> = match variant {
            TextEditVariant::Insertion => {
                let mut v: Vec<String> = sentences.iter().map(|s| s.to_string()).collect();
                v.push(format!("I regularly use {cue}"));
                v
            }
            TextEditVariant::Removal => sentences.iter().filter(|s| !mentions(s)).map(|s| s.to_string()).collect(),
            TextEditVariant::Suppression => {
                let mut v: Vec<String> = sentences.iter().filter(|s| !mentions(s)).map(|s| s.to_string()).collect();
                v.push(format!("I never use {cue}"));
                v
            }
        };
        Ok(kept.iter().map(|s| format!("{s}.")).collect::<Vec<_>>().join(" "))
    }

    fn model_name(&self) -> &str {
        "offline-edit"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextDeltaRow {
    pub variant: String,
    pub d_mean: f64,
    pub d_activation: f64,
    pub d_median: f64,
    pub d_p25: f64,
    pub d_p75: f64,
}

/// Re-embed base and edited texts with one embedder, generate all of them
/// with one shared noise draw, and report target deltas relative to the
/// base texts.
pub fn text_sweep<S: Sampler + ?Sized>(
    model: &S,
    base_texts: &[String],
    edited: &IndexMap<String, Vec<String>>,
    embed: impl Fn(&[String]) -> Result<EmbeddingMatrix>,
    seed: u64,
    target: &str,
) -> Result<Vec<TextDeltaRow>> {
    let schema = model.schema();
    let base_emb = embed(base_texts)?;
    let noise = model.draw_noise(base_texts.len(), seed);
    let base = numeric_target(&model.generate(&base_emb.to_f64(), &noise)?, schema, target)?;
    edited
        .iter()
        .map(|(variant, texts)| {
            if texts.len() != base_texts.len() {
                return Err(Error::Shape(format!(
                    "variant `{variant}` has {} texts, base has {}",
                    texts.len(),
                    base_texts.len()
                )));
            }
            let emb = embed(texts)?;
            if emb.dim() != base_emb.dim() || emb.provenance() != base_emb.provenance() {
                return Err(Error::InvalidArgument(format!(
                    "variant `{variant}` was embedded differently from the base texts"
                )));
            }
            let v = numeric_target(&model.generate(&emb.to_f64(), &noise)?, schema, target)?;
            let diffs: Vec<f64> = v.iter().zip(&base).map(|(a, b)| a - b).collect();
            Ok(TextDeltaRow {
                variant: variant.clone(),
                d_mean: mean(&v) - mean(&base),
                d_activation: activation(&v) - activation(&base),
                d_median: percentile(&diffs, 0.5)?,
                d_p25: percentile(&diffs, 0.25)?,
                d_p75: percentile(&diffs, 0.75)?,
            })
        })
        .collect()
}

pub fn write_text_deltas_csv(rows: &[TextDeltaRow], path: impl AsRef<Path>) -> Result<()> {
    crate::gan::write_log_csv(rows, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persona::mock_embed;
    use crate::schema::{fit_schema_stats, AttributeGroup, AttributeSpec};
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Two clusters along `u` with unit spread.
    fn clusters(n: usize, dim: usize, sep: f64, seed: u64) -> (Array2<f64>, Vec<bool>, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
        u /= u.dot(&u).sqrt();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let x = Array2::from_shape_fn((n, dim), |(i, k)| {
            let s = if labels[i] { 0.5 } else { -0.5 };
            rng.sample::<f64, _>(StandardNormal) + s * sep * u[k]
        });
        (x, labels, u)
    }

    #[test]
    fn standardizer_cases() {
        let e = ndarray::array![[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]];
        let (s, z) = EmbeddingStandardizer::fit(&e).unwrap();
        assert!(z.column(0).mean().unwrap().abs() < 1e-12);
        assert!((z.column(0).std(0.0) - 1.0).abs() < 1e-12);
        assert!(z.column(1).iter().all(|&v| v == 0.0));
        let held = s.apply(&ndarray::array![[7.0, 5.0]]).unwrap();
        assert!(held[[0, 0]] > 1.0);
        assert!(EmbeddingStandardizer::fit(&ndarray::array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn probe_recovers_planted_direction_and_flips() {
        let (x, labels, u) = clusters(400, 16, 5.0, 1);
        let (_, z) = EmbeddingStandardizer::fit(&x).unwrap();
        let d = fit_direction(&z, &labels, 1.0).unwrap();
        let dv = Array1::from(d.d.clone());
        assert!((dv.dot(&dv) - 1.0).abs() < 1e-9);
        // The direction lives in standardized coordinates; compare there.
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let f = Array1::from(fit_direction(&z, &flipped, 1.0).unwrap().d);
        assert!(dv.dot(&f) <= -0.999);
        assert!(dv.dot(&u).abs() >= 0.9, "{}", dv.dot(&u));
        assert!(fit_direction(&z, &vec![true; 400], 1.0).is_err());
    }

    #[test]
    fn edits_are_additive() {
        let dir = InterventionDirection {
            d: vec![0.6, 0.8],
            probe_lambda: 1.0,
            target_label_def: String::new(),
        };
        let e0 = [1.0, -2.0];
        assert_eq!(edit_embedding(&e0, &dir, 0.0).unwrap(), e0.to_vec());
        let z = edit_embedding(&[0.0, 0.0], &dir, 1.5).unwrap();
        assert!(((z[0] * z[0] + z[1] * z[1]).sqrt() - 1.5).abs() < 1e-12);
        let ab = edit_embedding(&edit_embedding(&e0, &dir, 0.5).unwrap(), &dir, 0.25).unwrap();
        let c = edit_embedding(&e0, &dir, 0.75).unwrap();
        assert!(ab.iter().zip(&c).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(edit_embedding(&[1.0], &dir, 1.0).is_err());
    }

    fn count_schema() -> AttributeSchema {
        AttributeSchema::new(vec![
            AttributeSpec::numerical("Trips", AttributeGroup::Behavioral, true),
            AttributeSpec::numerical("Cars", AttributeGroup::Household, true),
        ])
        .unwrap()
    }

    fn counts(trips: Vec<f64>, cars: Vec<f64>) -> Population {
        Population::new(&count_schema(), vec![Column::Numerical(trips), Column::Numerical(cars)]).unwrap()
    }

    #[test]
    fn side_effect_cases() {
        let s = count_schema();
        let a = counts(vec![1.0, 2.0, 0.0], vec![0.0, 1.0, 2.0]);
        let b = counts(vec![5.0, 2.0, 0.0], vec![2.0, 3.0, 4.0]);
        let same = side_effects(&a, &a, &s, "Trips").unwrap();
        assert_eq!(same.get("Cars"), Some(&0.0));
        assert!(!same.contains_key("Trips"));
        assert_eq!(side_effects(&a, &b, &s, "Trips").unwrap()["Cars"], 2.0);
        assert_eq!(side_effects(&b, &a, &s, "Trips").unwrap(), side_effects(&a, &b, &s, "Trips").unwrap());
        assert!(side_effects(&a, &counts(vec![1.0], vec![1.0]), &s, "Trips").is_err());
    }

    #[test]
    fn subgroups_are_disjoint_and_sized() {
        let s = count_schema();
        let pop = counts((0..100).map(|i| (i % 5 + 1) as f64).collect(), vec![0.0; 100]);
        let g = build_subgroups(&pop, &s, "Trips", 1).unwrap();
        assert_eq!(g.high.len(), 10);
        assert!(g.high.iter().all(|&i| pop.numerical(0)[i] == 5.0));
        assert!(g.high.iter().all(|i| !g.low.contains(i)));
        assert_eq!(g, build_subgroups(&pop, &s, "Trips", 1).unwrap());

        let trips: Vec<f64> = (0..200).map(|i| if i < 120 { 0.0 } else { (i % 4 + 1) as f64 }).collect();
        let pop = counts(trips, vec![0.0; 200]);
        let g = build_subgroups(&pop, &s, "Trips", 3).unwrap();
        assert_eq!(g.high.len(), 8);
        assert_eq!(g.low.len(), 4 + 6);
        assert!(g.high.iter().all(|i| !g.low.contains(i)));
        let none = counts(vec![0.0; 5], vec![0.0; 5]);
        assert!(build_subgroups(&none, &s, "Trips", 0).is_err());
    }

    #[test]
    fn percentile_rule_fixture() {
        let d = [-3.0, -2.0, -2.0, -1.0, 0.0];
        assert_eq!(percentile(&d, 0.5).unwrap(), -2.0);
        assert_eq!(percentile(&d, 0.25).unwrap(), -2.5);
        assert_eq!(percentile(&d, 0.75).unwrap(), -0.5);
        assert_eq!(percentile(&[4.0], 0.25).unwrap(), 4.0);
        assert!(percentile(&[], 0.5).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // Ties take average ranks.
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-12, "{r}");
    }

    struct Echo;
    impl TextClient for Echo {
        fn complete(&self, prompt: &str) -> Result<String> {
            Ok(prompt.split_once("PERSONA:\n").unwrap().1.to_string())
        }
        fn model_name(&self) -> &str {
            "echo"
        }
    }

    #[test]
    fn text_edit_pass_through_and_cache() {
        let cfg = LlmClientConfig {
            backoff_base_ms: 1,
            ..LlmClientConfig::default()
        };
        assert!(text_edit(&[], TextEditVariant::Removal, "bus", &Echo, &cfg, None).unwrap().is_empty());
        let texts = vec!["I take the bus. I like tea.".to_string(), "I walk.".to_string()];
        assert_eq!(text_edit(&texts, TextEditVariant::Removal, "bus", &Echo, &cfg, None).unwrap(), texts);

        let dir = tempfile::tempdir().unwrap();
        let cache = TextCache::open(dir.path()).unwrap();
        let a = text_edit(&texts, TextEditVariant::Removal, "bus", &OfflineEditClient, &cfg, Some(&cache)).unwrap();
        assert_eq!(a[0], "I like tea.");
        assert_eq!(cache.len(), 2);
        let again = text_edit(&texts, TextEditVariant::Removal, "bus", &OfflineEditClient, &cfg, Some(&cache)).unwrap();
        assert_eq!(a, again);
        assert_eq!(cache.len(), 2);
        let s = text_edit(&texts, TextEditVariant::Suppression, "bus", &OfflineEditClient, &cfg, Some(&cache)).unwrap();
        assert_eq!(s[0], "I like tea. I never use bus.");
        assert_eq!(cache.len(), 4);
        let ins = text_edit(&texts, TextEditVariant::Insertion, "bus", &OfflineEditClient, &cfg, None).unwrap();
        assert!(ins[1].ends_with("I regularly use bus."));
    }

    /// A sampler whose target is a fixed function of the first embedding
    /// column plus noise.
    struct Linear1 {
        schema: AttributeSchema,
    }

    impl Sampler for Linear1 {
        fn schema(&self) -> &AttributeSchema {
            &self.schema
        }
        fn embedding_dim(&self) -> usize {
            4
        }
        fn draw_noise(&self, n: usize, seed: u64) -> GenerationNoise {
            crate::sampler::draw_noise(n, 1, 0, seed)
        }
        fn generate(&self, e: &Array2<f64>, noise: &GenerationNoise) -> Result<Population> {
            let trips: Vec<f64> = (0..e.nrows())
                .map(|i| (2.0 * e[[i, 0]] + noise.z[[i, 0]]).round().max(0.0))
                .collect();
            let cars: Vec<f64> = (0..e.nrows()).map(|i| noise.z[[i, 0]].abs().round()).collect();
            Ok(counts(trips, cars))
        }
    }

    #[test]
    fn semantic_sweep_same_z() {
        let schema = fit_schema_stats(&count_schema(), &counts(vec![0.0, 4.0], vec![0.0, 3.0])).unwrap().schema;
        let m = Linear1 { schema };
        let e0 = Array2::from_shape_fn((300, 4), |(i, k)| ((i * 7 + k) % 5) as f64 * 0.3);
        let dir = InterventionDirection {
            d: vec![1.0, 0.0, 0.0, 0.0],
            probe_lambda: 1.0,
            target_label_def: "Trips > 0".into(),
        };
        let sw = semantic_sweep(&m, &e0, &dir, &DEFAULT_ALPHAS, "Trips", 9).unwrap();
        assert_eq!(sw.populations[3], sw.baseline);
        assert_eq!(sw.baseline, m.sample(&e0, 9).unwrap());
        let means: Vec<f64> = sw.rows.iter().map(|r| r.mean_target).collect();
        assert!(means.windows(2).all(|w| w[0] <= w[1]));
        assert!(sw.rows.iter().all(|r| r.side_effects["Cars"] == 0.0));
        assert!(semantic_sweep(&m, &e0, &dir, &[], "Trips", 9).is_err());

        let dir2 = tempfile::tempdir().unwrap();
        let p = dir2.path().join("sweep.csv");
        write_semantic_sweep_csv(&sw.rows, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("alpha,mean_target,activation,Cars\n"));
    }

    #[test]
    fn text_sweep_identity_has_zero_deltas() {
        let schema = fit_schema_stats(&count_schema(), &counts(vec![0.0, 4.0], vec![0.0, 3.0])).unwrap().schema;
        let m = Linear1 { schema };
        let base: Vec<String> = (0..50).map(|i| format!("persona {i} rides trains")).collect();
        let mut edited = IndexMap::new();
        edited.insert("same".to_string(), base.clone());
        let embed = |t: &[String]| mock_embed(t, 4, 0);
        let rows = text_sweep(&m, &base, &edited, embed, 1, "Trips").unwrap();
        let r = &rows[0];
        assert_eq!((r.d_mean, r.d_activation, r.d_median, r.d_p25, r.d_p75), (0.0, 0.0, 0.0, 0.0, 0.0));
        edited.insert("short".to_string(), base[..3].to_vec());
        assert!(text_sweep(&m, &base, &edited, embed, 1, "Trips").is_err());
    }
}
