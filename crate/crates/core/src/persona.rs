//! Persona prompts, language-model clients, hidden-state embedding and the
//! deterministic mock embedder.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{EmbeddingMatrix, Provenance};
use crate::error::{Error, IoContext, Result};
use crate::population::{format_number, Column, Population};
use crate::sampler::standard_normal;
use crate::schema::{AttributeSchema, AttributeSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonaMode {
    /// Qualitative descriptions derived from the agent's attributes.
    Implicit,
    /// Exact attribute values.
    Grounded,
    /// No agent information at all.
    Randomized,
    /// Zero embedding; there is no prompt.
    None,
}

impl PersonaMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PersonaMode::Implicit => "implicit",
            PersonaMode::Grounded => "grounded",
            PersonaMode::Randomized => "randomized",
            PersonaMode::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonaRecord {
    pub agent_index: usize,
    pub mode: PersonaMode,
    pub prompt: String,
    pub persona_text: String,
    pub embedding_ref: Option<usize>,
}

const INSTRUCTION: &str = "You write short first-person style persona descriptions of residents for a travel behaviour study. \
Write one paragraph of 3 to 5 sentences describing daily life, household and mobility.";

fn readable(name: &str) -> String {
    name.replace('_', " ").to_lowercase()
}

/// Qualitative level of a numerical value relative to its attribute range.
pub fn qualitative_level(spec: &AttributeSpec, x: f64) -> &'static str {
    if x == 0.0 && spec.min.is_some_and(|m| m >= 0.0) {
        return "none";
    }
    let (lo, hi) = match (spec.min, spec.max) {
        (Some(lo), Some(hi)) if hi > lo => (lo, hi),
        _ => return "some",
    };
    let t = (x - lo) / (hi - lo);
    if t < 1.0 / 3.0 {
        "low"
    } else if t < 2.0 / 3.0 {
        "moderate"
    } else {
        "high"
    }
}

fn qualitative_phrase(spec: &AttributeSpec, pop: &Population, schema: &AttributeSchema, row: usize, col: usize) -> String {
    match pop.column(col) {
        Column::Categorical(_) => format!("{}: {}", readable(&spec.name), readable(&pop.cell_text(schema, row, col))),
        Column::Numerical(v) => format!("{}: {}", readable(&spec.name), qualitative_level(spec, v[row])),
    }
}

/// Prompt for one agent. Mode `None` has no prompt and is an error.
pub fn render_prompt(pop: &Population, row: usize, schema: &AttributeSchema, mode: PersonaMode) -> Result<String> {
    if row >= pop.len() {
        return Err(Error::InvalidArgument(format!("agent index {row} out of range")));
    }
    match mode {
        PersonaMode::None => Err(Error::InvalidArgument("persona mode `none` has no prompt".into())),
        PersonaMode::Randomized => Ok(format!(
            "{INSTRUCTION}\nInvent a plausible resident of Sweden. No individual attributes are given."
        )),
        PersonaMode::Implicit => {
            let lines: Vec<String> = (0..schema.len())
                .map(|j| format!("- {}", qualitative_phrase(schema.spec(j), pop, schema, row, j)))
                .collect();
            Ok(format!(
                "{INSTRUCTION}\nUse abstract and qualitative descriptions rather than exact numerical values.\nAttributes:\n{}",
                lines.join("\n")
            ))
        }
        PersonaMode::Grounded => {
            let lines: Vec<String> = (0..schema.len())
                .map(|j| format!("- {}: {}", schema.spec(j).name, pop.cell_text(schema, row, j)))
                .collect();
            Ok(format!(
                "{INSTRUCTION}\nState every attribute value exactly as given.\nAttributes:\n{}",
                lines.join("\n")
            ))
        }
    }
}

/// Offline persona text: one sentence per attribute, no language model. Used
/// for toy runs and tests; the wording depends only on the rendered
/// attributes, as a model-written persona would.
pub fn template_persona(pop: &Population, row: usize, schema: &AttributeSchema, mode: PersonaMode) -> Result<String> {
    if row >= pop.len() {
        return Err(Error::InvalidArgument(format!("agent index {row} out of range")));
    }
    Ok(match mode {
        PersonaMode::None => String::new(),
        PersonaMode::Randomized => "I am a resident going about an ordinary week.".into(),
        PersonaMode::Implicit | PersonaMode::Grounded => {
            let parts: Vec<String> = schema
                .specs()
                .iter()
                .enumerate()
                .map(|(j, spec)| {
                    let value = match (mode, pop.column(j)) {
                        (_, Column::Categorical(_)) => readable(&pop.cell_text(schema, row, j)),
                        (PersonaMode::Grounded, Column::Numerical(v)) => format_number(v[row]),
                        (_, Column::Numerical(v)) => qualitative_level(spec, v[row]).to_string(),
                    };
                    format!("my {} is {}.", readable(&spec.name), value)
                })
                .collect();
            parts.join(" ")
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    pub endpoint: String,
    pub model_name: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub request_timeout_secs: u64,
    pub max_parallel: usize,
    pub max_attempts: usize,
    /// First retry delay; doubled after every failed attempt.
    pub backoff_base_ms: u64,
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model_name: "Qwen3-8B".into(),
            temperature: 0.9,
            top_p: 0.9,
            max_new_tokens: 512,
            request_timeout_secs: 120,
            max_parallel: 4,
            max_attempts: 3,
            backoff_base_ms: 1000,
            api_key: None,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("top_p must lie in (0, 1]".into()));
        }
        if self.max_parallel < 1 || self.max_attempts < 1 {
            return Err(Error::Config("max_parallel and max_attempts must be at least 1".into()));
        }
        Ok(())
    }

    /// Endpoint and key from `SEMAPOP_LLM_ENDPOINT` / `SEMAPOP_LLM_API_KEY`
    /// when set.
    pub fn with_env(mut self) -> Self {
        if let Ok(e) = std::env::var("SEMAPOP_LLM_ENDPOINT") {
            if !e.is_empty() {
                self.endpoint = e;
            }
        }
        if let Ok(k) = std::env::var("SEMAPOP_LLM_API_KEY") {
            if !k.is_empty() {
                self.api_key = Some(k);
            }
        }
        self
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(self.request_timeout_secs)))
            .build()
            .into()
    }
}

/// Chat-completion text generation. Implemented over HTTP by [`HttpChatClient`].
pub trait TextClient: Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
    /// Identifies the model in cache keys.
    fn model_name(&self) -> &str;
}

pub struct HttpChatClient {
    cfg: LlmClientConfig,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(cfg: LlmClientConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            agent: cfg.agent(),
            cfg,
        })
    }

    pub fn config(&self) -> &LlmClientConfig {
        &self.cfg
    }
}

impl TextClient for HttpChatClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
            "top_p": self.cfg.top_p,
            "max_tokens": self.cfg.max_new_tokens,
        });
        let mut req = self.agent.post(&self.cfg.endpoint);
        if let Some(k) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let resp = req.send_json(&body).map_err(|e| Error::Client(e.to_string()))?;
        let v: serde_json::Value = resp
            .into_body()
            .read_json()
            .map_err(|e| Error::Client(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_owned)
            .ok_or_else(|| Error::Client("response has no choices[0].message.content".into()))
    }

    fn model_name(&self) -> &str {
        &self.cfg.model_name
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedRequest {
    pub index: usize,
    pub attempts: usize,
    pub error: String,
}

/// Texts in prompt order (`None` where every attempt failed) and the failure
/// manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationBatch {
    pub texts: Vec<Option<String>>,
    pub failures: Vec<FailedRequest>,
}

/// Retry with exponential backoff.
pub fn with_retries<T>(attempts: usize, base: Duration, mut f: impl FnMut() -> Result<T>) -> (Result<T>, usize) {
    let mut delay = base;
    let mut last = None;
    for k in 1..=attempts.max(1) {
        match f() {
            Ok(v) => return (Ok(v), k),
            Err(e) => {
                log::warn!("attempt {k} failed: {e}");
                last = Some(e);
                if k < attempts {
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
    (Err(last.expect("at least one attempt")), attempts.max(1))
}

/// Run `prompts` through `client` with up to `max_parallel` requests in
/// flight. Cached prompts are not re-sent; new texts are written to the cache
/// before returning.
pub fn generate_personas(
    prompts: &[String],
    client: &dyn TextClient,
    cfg: &LlmClientConfig,
    cache: Option<&TextCache>,
    tag: &str,
) -> Result<GenerationBatch> {
    cfg.validate()?;
    let n = prompts.len();
    let keys: Vec<String> = prompts.iter().map(|p| text_key(client.model_name(), tag, p)).collect();
    let mut texts: Vec<Option<String>> = match cache {
        Some(c) => keys.iter().map(|k| c.get(k)).collect(),
        None => vec![None; n],
    };
    let todo: Vec<usize> = (0..n).filter(|&i| texts[i].is_none()).collect();
    let results: Mutex<Vec<(usize, Result<String>, usize)>> = Mutex::new(Vec::new());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let base = Duration::from_millis(cfg.backoff_base_ms);
    std::thread::scope(|s| {
        for _ in 0..cfg.max_parallel.min(todo.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(&i) = todo.get(k) else { break };
                let (r, attempts) = with_retries(cfg.max_attempts, base, || client.complete(&prompts[i]));
                results.lock().expect("results lock").push((i, r, attempts));
            });
        }
    });
    let mut failures = Vec::new();
    let mut fresh = Vec::new();
    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|r| r.0);
    for (i, r, attempts) in results {
        match r {
            Ok(t) => {
                fresh.push((keys[i].clone(), t.clone()));
                texts[i] = Some(t);
            }
            Err(e) => failures.push(FailedRequest {
                index: i,
                attempts,
                error: e.to_string(),
            }),
        }
    }
    if let Some(c) = cache {
        c.insert_all(fresh)?;
    }
    Ok(GenerationBatch { texts, failures })
}

pub fn text_key(model: &str, tag: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    for part in [model, tag, prompt] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Exclusive advisory lock held while the file `path` exists.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path, timeout: Duration) -> Result<Self> {
        std::fs::create_dir_all(dir).at(dir)?;
        let path = dir.join(".lock");
        let start = std::time::Instant::now();
        loop {
            match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    use std::io::Write;
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if start.elapsed() > timeout {
                        return Err(Error::Config(format!(
                            "{} is locked by another process; remove the lock file if it is stale",
                            dir.display()
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(Error::Io { path, source: e }),
            }
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Key/value text records in `texts.json` under a directory.
pub struct TextCache {
    dir: PathBuf,
}

impl TextCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).at(&dir)?;
        Ok(Self { dir })
    }

    fn file(&self) -> PathBuf {
        self.dir.join("texts.json")
    }

    fn read(&self) -> Result<BTreeMap<String, String>> {
        let f = self.file();
        if !f.exists() {
            return Ok(BTreeMap::new());
        }
        Ok(serde_json::from_slice(&std::fs::read(&f).at(&f)?)?)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.read().ok()?.get(key).cloned()
    }

    pub fn insert_all(&self, entries: Vec<(String, String)>) -> Result<()> {
        if entries.is_empty() {
            return Ok(());
        }
        let _lock = DirLock::acquire(&self.dir, Duration::from_secs(30))?;
        let mut all = self.read()?;
        all.extend(entries);
        let f = self.file();
        let tmp = self.dir.join("texts.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&all)?).at(&tmp)?;
        std::fs::rename(&tmp, &f).at(&f)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.read().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Zero mean, unit population variance, no learned affine. A constant row
/// maps to zeros.
pub fn layer_norm(row: &mut [f64]) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for x in row.iter_mut() {
        *x = if sd > 0.0 { (*x - mean) / sd } else { 0.0 };
    }
}

/// Per-token hidden states of one text: one `tokens × D` matrix per layer
/// (last layers last) and the attention mask.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub layers: Vec<Array2<f64>>,
    pub mask: Vec<bool>,
}

pub trait HiddenStateEncoder: Sync {
    fn hidden_states(&self, text: &str) -> Result<HiddenStates>;
    fn name(&self) -> &str;
}

/// Average the last `last_layers` layers, mean-pool unmasked tokens, then
/// layer-normalize.
pub fn pool_hidden_states(h: &HiddenStates, last_layers: usize) -> Result<Array1<f64>> {
    if h.layers.is_empty() || last_layers == 0 {
        return Err(Error::Shape("no hidden layers to pool".into()));
    }
    let l = last_layers.min(h.layers.len());
    let used = &h.layers[h.layers.len() - l..];
    let dim = used[0].dim();
    if used.iter().any(|m| m.dim() != dim) || h.mask.len() != dim.0 {
        return Err(Error::Shape("hidden state layers or mask disagree in shape".into()));
    }
    let mut mean = Array2::<f64>::zeros(dim);
    for m in used {
        mean += m;
    }
    mean /= l as f64;
    let kept: Vec<usize> = (0..dim.0).filter(|&t| h.mask[t]).collect();
    if kept.is_empty() {
        return Err(Error::Data("attention mask selects no tokens".into()));
    }
    let mut pooled = mean.select(Axis(0), &kept).mean_axis(Axis(0)).expect("non-empty");
    layer_norm(pooled.as_slice_mut().expect("contiguous"));
    Ok(pooled)
}

/// One pooled, normalized row per text, in input order.
pub fn embed_texts(texts: &[String], encoder: &dyn HiddenStateEncoder, last_layers: usize) -> Result<EmbeddingMatrix> {
    let rows: Vec<Array1<f64>> = texts
        .iter()
        .map(|t| pool_hidden_states(&encoder.hidden_states(t)?, last_layers))
        .collect::<Result<_>>()?;
    let dim = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Shape("embedder returned rows of different dimensions".into()));
    }
    let mut m = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    EmbeddingMatrix::from_f64(&m, Provenance::External)
}

/// Hidden states served over HTTP. Request `{"model", "text", "last_layers"}`;
/// response `{"hidden_states": [layer][token][dim], "attention_mask": [0|1]}`.
pub struct HttpHiddenStateEncoder {
    pub endpoint: String,
    pub model_name: String,
    pub last_layers: usize,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpHiddenStateEncoder {
    pub fn new(endpoint: &str, model_name: &str, last_layers: usize, timeout_secs: u64, api_key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            last_layers,
            api_key,
            agent: ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(timeout_secs)))
                .build()
                .into(),
        }
    }
}

#[derive(Deserialize)]
struct HiddenStateResponse {
    hidden_states: Vec<Vec<Vec<f64>>>,
    attention_mask: Vec<u8>,
}

impl HiddenStateEncoder for HttpHiddenStateEncoder {
    fn hidden_states(&self, text: &str) -> Result<HiddenStates> {
        let body = serde_json::json!({"model": self.model_name, "text": text, "last_layers": self.last_layers});
        let mut req = self.agent.post(&self.endpoint);
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let resp = req.send_json(&body).map_err(|e| Error::Client(e.to_string()))?;
        let r: HiddenStateResponse = resp
            .into_body()
            .read_json()
            .map_err(|e| Error::Client(e.to_string()))?;
        let layers = r
            .hidden_states
            .into_iter()
            .map(|layer| {
                let t = layer.len();
                let d = layer.first().map_or(0, Vec::len);
                if layer.iter().any(|row| row.len() != d) {
                    return Err(Error::Client("ragged hidden state layer".into()));
                }
                Ok(Array2::from_shape_vec((t, d), layer.concat()).expect("checked"))
            })
            .collect::<Result<_>>()?;
        Ok(HiddenStates {
            layers,
            mask: r.attention_mask.into_iter().map(|m| m != 0).collect(),
        })
    }

    fn name(&self) -> &str {
        &self.model_name
    }
}

fn token_seed(token: &str, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(token.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Tokens: lowercase, split on whitespace, surrounding punctuation removed.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Deterministic offline embedder: every distinct token owns a seeded Gaussian
/// row (a hashed bag of tokens times a fixed random projection); a text is the
/// layer-normalized sum of its token rows.
pub fn mock_embed(texts: &[String], dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    if dim < 2 {
        return Err(Error::InvalidArgument("mock embedding dimension must be at least 2".into()));
    }
    let mut table: BTreeMap<String, Array1<f64>> = BTreeMap::new();
    let mut m = Array2::zeros((texts.len(), dim));
    for (i, t) in texts.iter().enumerate() {
        let mut row = Array1::<f64>::zeros(dim);
        for tok in tokenize(t) {
            let v = table.entry(tok.clone()).or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(token_seed(&tok, seed));
                standard_normal(1, dim, &mut rng).row(0).to_owned()
            });
            row += &*v;
        }
        layer_norm(row.as_slice_mut().expect("contiguous"));
        m.row_mut(i).assign(&row);
    }
    EmbeddingMatrix::from_f64(&m, Provenance::Mock)
}

pub fn zero_embeddings(n: usize, dim: usize) -> Result<EmbeddingMatrix> {
    if n == 0 || dim == 0 {
        return Err(Error::InvalidArgument("zero embeddings need n, dim >= 1".into()));
    }
    Ok(EmbeddingMatrix::zeros(n, dim))
}

/// Persona texts for every agent without a language model.
pub fn template_personas(pop: &Population, schema: &AttributeSchema, mode: PersonaMode) -> Result<Vec<String>> {
    (0..pop.len()).map(|i| template_persona(pop, i, schema, mode)).collect()
}

/// A [`TextClient`] that answers locally: persona prompts become the prompt's
/// attribute lines joined into sentences. Lets the whole pipeline run offline.
pub struct OfflineClient;

impl TextClient for OfflineClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let lines: Vec<String> = prompt
            .lines()
            .filter_map(|l| l.strip_prefix("- "))
            .map(|l| match l.split_once(": ") {
                Some((k, v)) => format!("my {} is {}.", readable(k), readable(v)),
                None => format!("{l}."),
            })
            .collect();
        Ok(if lines.is_empty() {
            "I am a resident going about an ordinary week.".into()
        } else {
            lines.join(" ")
        })
    }

    fn model_name(&self) -> &str {
        "offline-template"
    }
}

/// Stable key of one agent row, for cache bookkeeping.
pub fn agent_hash(pop: &Population, schema: &AttributeSchema, row: usize) -> String {
    let mut h = Sha256::new();
    for j in 0..schema.len() {
        let t = pop.cell_text(schema, row, j);
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::fit_schema_stats;
    use crate::toy::ToyJointSpec;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn toy() -> (AttributeSchema, Population) {
        let t = ToyJointSpec::mixed5();
        let pop = t.sample(30, 2).unwrap();
        let schema = fit_schema_stats(&t.schema().unwrap(), &pop).unwrap().schema;
        (schema, pop)
    }

    #[test]
    fn prompts_follow_their_modes() {
        let (schema, pop) = toy();
        let a = render_prompt(&pop, 0, &schema, PersonaMode::Implicit).unwrap();
        assert_eq!(a, render_prompt(&pop, 0, &schema, PersonaMode::Implicit).unwrap());
        assert!(a.contains("abstract and qualitative descriptions rather than exact numerical values"));
        assert_eq!(
            render_prompt(&pop, 0, &schema, PersonaMode::Randomized).unwrap(),
            render_prompt(&pop, 1, &schema, PersonaMode::Randomized).unwrap()
        );
        let age = schema.index_of("Age").unwrap();
        let g = render_prompt(&pop, 3, &schema, PersonaMode::Grounded).unwrap();
        assert!(g.contains(&format!("Age: {}", format_number(pop.numerical(age)[3]))));
        assert!(render_prompt(&pop, 0, &schema, PersonaMode::None).is_err());
    }

    #[test]
    fn mock_rows_are_normalized_and_deterministic() {
        let texts = vec!["a quiet morning".to_string(), "Busy city LIFE!".into(), "a quiet morning".into()];
        let e = mock_embed(&texts, 16, 3).unwrap();
        assert_eq!(e, mock_embed(&texts, 16, 3).unwrap());
        assert_eq!(e.provenance(), Provenance::Mock);
        let m = e.to_f64();
        assert_eq!(m.row(0), m.row(2));
        for r in m.rows() {
            let mean = r.mean().unwrap();
            let var = r.mapv(|x| (x - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
        }
        assert!(mock_embed(&texts, 1, 0).is_err());
    }

    #[test]
    fn mock_disjoint_texts_are_nearly_orthogonal() {
        let texts = vec!["alpha beta gamma".to_string(), "delta epsilon zeta".into()];
        let mut big = 0;
        for seed in 0..1000 {
            let m = mock_embed(&texts, 64, seed).unwrap().to_f64();
            let (a, b) = (m.row(0), m.row(1));
            let cos = a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
            if cos.abs() >= 0.5 {
                big += 1;
            }
        }
        assert!(big <= 10, "{big} of 1000 seeds had |cos| >= 0.5");
    }

    #[test]
    fn mock_is_order_preserving() {
        let texts: Vec<String> = ["one two", "three", "four five six"].iter().map(|s| s.to_string()).collect();
        let rev: Vec<String> = texts.iter().rev().cloned().collect();
        let a = mock_embed(&texts, 8, 1).unwrap().to_f64();
        let b = mock_embed(&rev, 8, 1).unwrap().to_f64();
        assert_eq!(a.row(0), b.row(2));
        assert_eq!(a.row(2), b.row(0));
    }

    #[test]
    fn pooling_matches_hand_computation() {
        // Two tokens, three dims, two layers.
        let l1 = ndarray::array![[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]];
        let l2 = ndarray::array![[3.0, 4.0, 5.0], [1.0, 0.0, 3.0]];
        let h = HiddenStates {
            layers: vec![Array2::zeros((2, 3)), l1, l2],
            mask: vec![true, true],
        };
        let got = pool_hidden_states(&h, 2).unwrap();
        // layer mean [[2,3,4],[2,1,2]] → token mean [2,2,3] → mean 7/3, sd sqrt(2/9).
        let mean = 7.0 / 3.0;
        let sd = (2.0f64 / 9.0).sqrt();
        let want = [(2.0 - mean) / sd, (2.0 - mean) / sd, (3.0 - mean) / sd];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        let masked = HiddenStates {
            mask: vec![true, false],
            ..h.clone()
        };
        let m = pool_hidden_states(&masked, 2).unwrap();
        let mut first = vec![2.0, 3.0, 4.0];
        layer_norm(&mut first);
        assert_eq!(m.to_vec(), first);
    }

    #[test]
    fn zero_embeddings_are_zero() {
        let z = zero_embeddings(2, 3).unwrap();
        assert_eq!(z.to_f64(), Array2::<f64>::zeros((2, 3)));
        assert!(zero_embeddings(0, 3).is_err());
    }

    fn stub_server(reply: &'static str, requests: usize) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for stream in listener.incoming().take(requests) {
                let mut stream = stream.unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
                let prompt = req["messages"][0]["content"].as_str().unwrap().to_string();
                seen.push(prompt.clone());
                let content = format!("{reply} {prompt}");
                let out = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
                write!(stream, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}", out.len(), out).unwrap();
            }
            seen
        });
        (addr, handle)
    }

    #[test]
    fn stub_server_round_trip_in_order_and_cached() {
        let (endpoint, handle) = stub_server("persona for", 3);
        let cfg = LlmClientConfig {
            endpoint,
            max_parallel: 2,
            backoff_base_ms: 1,
            ..LlmClientConfig::default()
        };
        let client = HttpChatClient::new(cfg.clone()).unwrap();
        let prompts: Vec<String> = (0..3).map(|i| format!("agent {i}")).collect();
        let dir = tempfile::tempdir().unwrap();
        let cache = TextCache::open(dir.path()).unwrap();
        let out = generate_personas(&prompts, &client, &cfg, Some(&cache), "implicit").unwrap();
        assert!(out.failures.is_empty());
        let texts: Vec<String> = out.texts.into_iter().map(Option::unwrap).collect();
        assert_eq!(texts, vec!["persona for agent 0", "persona for agent 1", "persona for agent 2"]);
        handle.join().unwrap();
        assert_eq!(cache.len(), 3);
        // Served from cache: the server is gone.
        let again = generate_personas(&prompts, &client, &cfg, Some(&cache), "implicit").unwrap();
        assert_eq!(again.texts.into_iter().map(Option::unwrap).collect::<Vec<_>>(), texts);
    }

    #[test]
    fn unreachable_endpoint_fills_failure_manifest() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let cfg = LlmClientConfig {
            endpoint: format!("http://127.0.0.1:{port}/v1/chat/completions"),
            backoff_base_ms: 1,
            request_timeout_secs: 2,
            ..LlmClientConfig::default()
        };
        let client = HttpChatClient::new(cfg.clone()).unwrap();
        let prompts = vec!["a".to_string(), "b".into()];
        let out = generate_personas(&prompts, &client, &cfg, None, "x").unwrap();
        assert_eq!(out.texts, vec![None, None]);
        assert_eq!(out.failures.iter().map(|f| f.index).collect::<Vec<_>>(), vec![0, 1]);
        assert!(out.failures.iter().all(|f| f.attempts == 3));
        assert!(generate_personas(&[], &client, &cfg, None, "x").unwrap().texts.is_empty());
    }

    #[test]
    fn offline_client_turns_prompt_lines_into_sentences() {
        let (schema, pop) = toy();
        let p = render_prompt(&pop, 0, &schema, PersonaMode::Implicit).unwrap();
        let t = OfflineClient.complete(&p).unwrap();
        assert!(t.starts_with("my region is"));
    }

    #[test]
    fn config_validation() {
        assert!(LlmClientConfig { top_p: 0.0, ..Default::default() }.validate().is_err());
        assert!(LlmClientConfig { temperature: -1.0, ..Default::default() }.validate().is_err());
        assert!(LlmClientConfig::default().validate().is_ok());
    }
}
