//! Experiment configuration and the staged pipeline
//! prepare → personas → embed → train → generate → evaluate → calibrate →
//! intervene → report. Each stage reads its inputs from the output
//! directory, writes its artifacts under `<out>/<stage>/`, and leaves a
//! `provenance.json` there.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{
    calibration_sweep, rake, CalibrationTargets, RakeConfig, SweepRow, DEFAULT_CONSTRAINED, DEFAULT_LEVELS,
};
use crate::checkpoint::{load_checkpoint_for, save_checkpoint, BackboneKind};
use crate::counterfactual::{
    build_subgroups, fit_direction, semantic_sweep, text_edit, text_sweep, EmbeddingStandardizer,
    InterventionDirection, OfflineEditClient, SemanticSweepRow, TextDeltaRow, TextEditVariant, DEFAULT_ALPHAS,
};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, IoContext, Result};
use crate::gan::{train_gan, write_log_csv, GanModel, GanTrainingConfig};
use crate::metrics::{evaluate, MetricReport};
use crate::persona::{
    embed_texts, generate_personas, mock_embed, render_prompt, template_personas, zero_embeddings, DirLock,
    HttpChatClient, HttpHiddenStateEncoder, LlmClientConfig, OfflineClient, PersonaMode, TextCache, TextClient,
};
use crate::population::{load_population, split_population, Population};
use crate::sampler::Sampler;
use crate::schema::{fit_schema_stats, load_schema, AttributeKind, AttributeSchema};
use crate::toy::ToyJointSpec;
use crate::vae::{train_vae, VaeModel, VaeTrainingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prepare,
    Personas,
    Embed,
    Train,
    Generate,
    Evaluate,
    Calibrate,
    Intervene,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Prepare,
        Stage::Personas,
        Stage::Embed,
        Stage::Train,
        Stage::Generate,
        Stage::Evaluate,
        Stage::Calibrate,
        Stage::Intervene,
        Stage::Report,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Personas => "personas",
            Stage::Embed => "embed",
            Stage::Train => "train",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
            Stage::Calibrate => "calibrate",
            Stage::Intervene => "intervene",
            Stage::Report => "report",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A built-in toy population by name, or a full factorization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ToySource {
    Named(String),
    Inline(ToyJointSpec),
}

impl ToySource {
    pub fn resolve(&self) -> Result<ToyJointSpec> {
        match self {
            ToySource::Inline(s) => Ok(s.clone()),
            ToySource::Named(n) => match n.as_str() {
                "fair_coin" => Ok(ToyJointSpec::fair_coin()),
                "copy_pair" => Ok(ToyJointSpec::copy_pair()),
                "chain3" => Ok(ToyJointSpec::chain3()),
                "mixed5" => Ok(ToyJointSpec::mixed5()),
                other => Err(Error::Config(format!("unknown toy population `{other}`"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataConfig {
    Csv { schema: PathBuf, population: PathBuf },
    Toy { spec: ToySource, n: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonaClient {
    /// Fixed sentences per attribute, no model call.
    Template,
    /// Prompts answered by a local rule-based client.
    Offline,
    /// Prompts sent to a chat-completion endpoint.
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonaConfig {
    pub mode: PersonaMode,
    pub client: PersonaClient,
    pub llm: LlmClientConfig,
}

impl Default for PersonaConfig {
    fn default() -> Self {
        Self {
            mode: PersonaMode::Implicit,
            client: PersonaClient::Template,
            llm: LlmClientConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbedderConfig {
    Mock {
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    Zero {
        dim: usize,
    },
    External {
        endpoint: String,
        model_name: String,
        #[serde(default = "default_last_layers")]
        last_layers: usize,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_last_layers() -> usize {
    4
}

fn default_timeout() -> u64 {
    120
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Mock { dim: 64, seed: 0 }
    }
}

impl EmbedderConfig {
    /// Embed `texts`. Persona mode `none` always gives zeros.
    pub fn embed(&self, texts: &[String], mode: PersonaMode) -> Result<EmbeddingMatrix> {
        let zero_dim = match self {
            EmbedderConfig::Zero { dim } => Some(*dim),
            EmbedderConfig::Mock { dim, .. } if mode == PersonaMode::None => Some(*dim),
            _ => None,
        };
        if let Some(dim) = zero_dim {
            return zero_embeddings(texts.len(), dim);
        }
        match self {
            EmbedderConfig::Mock { dim, seed } => mock_embed(texts, *dim, *seed),
            EmbedderConfig::External {
                endpoint,
                model_name,
                last_layers,
                timeout_secs,
            } => {
                if mode == PersonaMode::None {
                    return Err(Error::Config(
                        "persona mode `none` needs a mock or zero embedder to know the dimension".into(),
                    ));
                }
                let key = std::env::var("SEMAPOP_LLM_API_KEY").ok().filter(|k| !k.is_empty());
                let enc = HttpHiddenStateEncoder::new(endpoint, model_name, *last_layers, *timeout_secs, key);
                embed_texts(texts, &enc, *last_layers)
            }
            EmbedderConfig::Zero { .. } => unreachable!(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneConfig {
    Gan(GanTrainingConfig),
    Vae(VaeTrainingConfig),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::Gan(GanTrainingConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Agents whose embeddings condition generation; also the evaluation
    /// reference.
    pub split: Split,
    /// Generated agents per conditioning agent.
    pub tile: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { split: Split::Test, tile: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Attributes forming the tuples for precision and recall; all when unset.
    pub tuple_attributes: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Target marginals file; derived from the evaluation reference when unset.
    pub targets: Option<PathBuf>,
    /// Constrained attributes for derived targets. Unset: the default set
    /// where the schema has it, otherwise every attribute.
    pub attributes: Option<Vec<String>>,
    pub levels: Vec<usize>,
    pub damping: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            targets: None,
            attributes: None,
            levels: DEFAULT_LEVELS.to_vec(),
            damping: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionConfig {
    /// Numerical attribute the direction should move.
    pub target: String,
    /// Probe label: `target > label_threshold`.
    pub label_threshold: f64,
    pub probe_lambda: f64,
    pub alphas: Vec<f64>,
    pub subgroups: bool,
    pub text_variants: Vec<TextEditVariant>,
    /// Phrase naming the behavior in text edits.
    pub cue: String,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            target: "Trips_of_PublicTransport".into(),
            label_threshold: 0.0,
            probe_lambda: 1.0,
            alphas: DEFAULT_ALPHAS.to_vec(),
            subgroups: true,
            text_variants: vec![
                TextEditVariant::Insertion,
                TextEditVariant::Removal,
                TextEditVariant::Suppression,
            ],
            cue: "public transport".into(),
        }
    }
}

/// One JSON file with a section per stage. Relative paths are resolved
/// against the directory of the config file. The top-level `seed` replaces
/// the backbone's own seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub personas: PersonaConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub generate: GenerateConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub intervention: InterventionConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse and resolve relative paths against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let DataConfig::Csv { schema, population } = &mut self.data {
            absolutize(base, schema);
            absolutize(base, population);
        }
        if let Some(t) = &mut self.calibration.targets {
            absolutize(base, t);
        }
        absolutize(base, &mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = &self.split;
        if !(s.train > 0.0 && s.val >= 0.0 && s.train + s.val <= 1.0) {
            return bad(format!("invalid split fractions train={} val={}", s.train, s.val));
        }
        if let DataConfig::Toy { n, spec, .. } = &self.data {
            if *n < 2 {
                return bad("toy population needs at least two agents".into());
            }
            spec.resolve()?.validate()?;
        }
        match &self.backbone {
            BackboneConfig::Gan(c) => c.validate()?,
            BackboneConfig::Vae(c) => c.validate()?,
        }
        if self.generate.tile == 0 {
            return bad("generate.tile must be at least 1".into());
        }
        if let EmbedderConfig::Mock { dim, .. } | EmbedderConfig::Zero { dim } = &self.embedder {
            if *dim < 2 {
                return bad("embedding dimension must be at least 2".into());
            }
        }
        if self.calibration.levels.first() != Some(&0) || self.calibration.levels.windows(2).any(|w| w[0] > w[1]) {
            return bad("calibration levels must be ascending and start at 0".into());
        }
        let iv = &self.intervention;
        if iv.alphas.is_empty() || iv.alphas.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("intervention alphas must be non-empty and strictly ascending".into());
        }
        if !(iv.probe_lambda > 0.0) {
            return bad("probe_lambda must be positive".into());
        }
        if self.personas.client == PersonaClient::Http {
            self.personas.llm.validate()?;
        }
        Ok(())
    }

    fn backbone_seeded(&self) -> BackboneConfig {
        match &self.backbone {
            BackboneConfig::Gan(c) => BackboneConfig::Gan(GanTrainingConfig { seed: self.seed, ..c.clone() }),
            BackboneConfig::Vae(c) => BackboneConfig::Vae(VaeTrainingConfig { seed: self.seed, ..c.clone() }),
        }
    }
}

/// Record left by every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    pub seed: u64,
    /// The resolved configuration the stage ran with.
    pub config: ExperimentConfig,
    /// SHA-256 of each input and output file, keyed by path relative to the
    /// output directory.
    pub inputs: IndexMap<String, String>,
    pub outputs: IndexMap<String, String>,
    pub elapsed_secs: f64,
    pub version: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).at(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(path).at(path)? {
        let p = entry.at(path)?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name == "provenance.json" || name.starts_with('.') {
            continue;
        }
        out.extend(files_under(&p)?);
    }
    out.sort();
    Ok(out)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).at(path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path).at(path)?)?)
}

/// A trained backbone of either kind.
pub enum Backbone {
    Gan(GanModel),
    Vae(VaeModel),
}

impl Backbone {
    pub fn sampler(&self) -> &dyn Sampler {
        match self {
            Backbone::Gan(m) => m,
            Backbone::Vae(m) => m,
        }
    }

    pub fn marginal_spec(&self) -> &crate::marginal::MarginalSpec {
        match self {
            Backbone::Gan(m) => &m.marginal_spec,
            Backbone::Vae(m) => &m.marginal_spec,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EmbedKey {
    key: String,
}

/// Flattened report line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub table: String,
    pub key: String,
    pub metric: String,
    pub value: f64,
}

pub struct Pipeline {
    cfg: ExperimentConfig,
}

struct StageIo {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl StageIo {
    fn new() -> Self {
        Self {
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }
}

fn missing(what: &str, stage: Stage) -> Error {
    Error::MissingArtifact(format!("missing {what}; run `{stage}` first"))
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn out(&self) -> &Path {
        &self.cfg.output_dir
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out().join(stage.as_str())
    }

    /// Re-run a stage from its provenance record alone.
    pub fn replay(provenance: impl AsRef<Path>) -> Result<Provenance> {
        let p: Provenance = read_json(provenance.as_ref())?;
        Pipeline::new(p.config)?.run(p.stage)
    }

    /// Run one stage under the output directory's advisory lock.
    pub fn run(&self, stage: Stage) -> Result<Provenance> {
        let _lock = DirLock::acquire(self.out(), Duration::from_secs(10))?;
        let start = Instant::now();
        let dir = self.stage_dir(stage);
        let mut io = StageIo::new();
        match stage {
            Stage::Prepare => self.prepare(&dir, &mut io)?,
            Stage::Personas => self.personas(&dir, &mut io)?,
            Stage::Embed => self.embed(&dir, &mut io)?,
            Stage::Train => self.train(&dir, &mut io)?,
            Stage::Generate => self.generate(&dir, &mut io)?,
            Stage::Evaluate => self.evaluate(&dir, &mut io)?,
            Stage::Calibrate => self.calibrate(&dir, &mut io)?,
            Stage::Intervene => self.intervene(&dir, &mut io)?,
            Stage::Report => self.report(&dir, &mut io)?,
        }
        let hashes = |paths: &[PathBuf]| -> Result<IndexMap<String, String>> {
            let mut m = IndexMap::new();
            for p in paths {
                for f in files_under(p)? {
                    let rel = f.strip_prefix(self.out()).unwrap_or(&f).to_string_lossy().replace('\\', "/");
                    m.insert(rel, sha256_file(&f)?);
                }
            }
            Ok(m)
        };
        let prov = Provenance {
            stage,
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            inputs: hashes(&io.inputs)?,
            outputs: hashes(&io.outputs)?,
            elapsed_secs: start.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").into(),
        };
        write_json(&dir.join("provenance.json"), &prov)?;
        log::info!("{stage} finished in {:.1}s", prov.elapsed_secs);
        Ok(prov)
    }

    /// Run stages in order, stopping at the first error.
    pub fn run_all(&self, stages: &[Stage]) -> Result<Vec<Provenance>> {
        stages.iter().map(|&s| self.run(s)).collect()
    }

    fn fresh_dir(&self, dir: &Path) -> Result<()> {
        if dir.exists() {
            std::fs::remove_dir_all(dir).at(dir)?;
        }
        std::fs::create_dir_all(dir).at(dir)
    }

    fn schema(&self, io: &mut StageIo) -> Result<AttributeSchema> {
        let p = self.stage_dir(Stage::Prepare).join("schema.json");
        if !p.exists() {
            return Err(missing("prepared data", Stage::Prepare));
        }
        io.inputs.push(p.clone());
        load_schema(&p)
    }

    fn split_population(&self, split: Split, schema: &AttributeSchema, io: &mut StageIo) -> Result<Population> {
        let p = self.stage_dir(Stage::Prepare).join(format!("{}.csv", split.as_str()));
        if !p.exists() {
            return Err(missing("prepared data", Stage::Prepare));
        }
        io.inputs.push(p.clone());
        load_population(&p, schema)
    }

    fn persona_texts(&self, split: Split, io: &mut StageIo) -> Result<Vec<String>> {
        let p = self.stage_dir(Stage::Personas).join(format!("{}.json", split.as_str()));
        if !p.exists() {
            return Err(missing("persona texts", Stage::Personas));
        }
        io.inputs.push(p.clone());
        read_json(&p)
    }

    fn embeddings(&self, split: Split, io: &mut StageIo) -> Result<EmbeddingMatrix> {
        let dir = self.stage_dir(Stage::Embed);
        let json = dir.join(format!("{}.json", split.as_str()));
        if !json.exists() {
            return Err(missing("embeddings", Stage::Embed));
        }
        io.inputs.push(json);
        io.inputs.push(dir.join(format!("{}.bin", split.as_str())));
        EmbeddingMatrix::load(&dir, split.as_str())
    }

    fn backbone(&self, schema: &AttributeSchema, io: &mut StageIo) -> Result<Backbone> {
        let dir = self.stage_dir(Stage::Train).join("checkpoint");
        if !dir.join("manifest.json").exists() {
            return Err(missing("trained model", Stage::Train));
        }
        io.inputs.push(dir.clone());
        let ckpt = load_checkpoint_for(&dir, schema)?;
        Ok(match ckpt.manifest.backbone {
            BackboneKind::Gan => Backbone::Gan(GanModel::from_checkpoint(&ckpt)?),
            BackboneKind::Vae => Backbone::Vae(VaeModel::from_checkpoint(&ckpt)?),
        })
    }

    fn generated(&self, schema: &AttributeSchema, io: &mut StageIo) -> Result<Population> {
        let p = self.stage_dir(Stage::Generate).join("population.csv");
        if !p.exists() {
            return Err(missing("generated population", Stage::Generate));
        }
        io.inputs.push(p.clone());
        load_population(&p, schema)
    }

    fn text_client(&self) -> Result<Box<dyn TextClient>> {
        Ok(match self.cfg.personas.client {
            PersonaClient::Template | PersonaClient::Offline => Box::new(OfflineClient),
            PersonaClient::Http => Box::new(HttpChatClient::new(self.cfg.personas.llm.clone().with_env())?),
        })
    }

    fn prepare(&self, dir: &Path, io: &mut StageIo) -> Result<()> {
        let (schema, pop) = match &self.cfg.data {
            DataConfig::Csv { schema, population } => {
                io.inputs.push(schema.clone());
                io.inputs.push(population.clone());
                let s = load_schema(schema)?;
                let p = load_population(population, &s)?;
                (s, p)
            }
            DataConfig::Toy { spec, n, seed } => {
                let spec = spec.resolve()?;
                (spec.schema()?, spec.sample(*n, *seed)?)
            }
        };
        let (train, val, test) = split_population(&pop, self.cfg.split.train, self.cfg.split.val, self.cfg.seed)?;
        let fitted = fit_schema_stats(&schema, &train)?;
        for w in &fitted.warnings {
            log::warn!("{w}");
        }
        let schema = fitted.schema;
        self.fresh_dir(dir)?;
        schema.save(dir.join("schema.json"))?;
        io.outputs.push(dir.join("schema.json"));
        for (split, p) in Split::ALL.iter().zip([&train, &val, &test]) {
            let path = dir.join(format!("{}.csv", split.as_str()));
            p.write_csv(&schema, &path)?;
            io.outputs.push(path);
        }
        log::info!("prepared {} / {} / {} agents", train.len(), val.len(), test.len());
        Ok(())
    }

    fn personas(&self, dir: &Path, io: &mut StageIo) -> Result<()> {
        let schema = self.schema(io)?;
        let pc = &self.cfg.personas;
        let cache = match pc.client {
            PersonaClient::Template => None,
            _ => Some(TextCache::open(self.out().join("cache"))?),
        };
        let client = self.text_client()?;
        let mut all = Vec::new();
        for split in Split::ALL {
            let pop = self.split_population(split, &schema, io)?;
            let texts = match (pc.mode, pc.client) {
                (PersonaMode::None, _) | (_, PersonaClient::Template) => template_personas(&pop, &schema, pc.mode)?,
                _ => {
                    let prompts: Vec<String> = (0..pop.len())
                        .map(|i| render_prompt(&pop, i, &schema, pc.mode))
                        .collect::<Result<_>>()?;
                    let batch = generate_personas(&prompts, client.as_ref(), &pc.llm, cache.as_ref(), pc.mode.as_str())?;
                    if let Some(f) = batch.failures.first() {
                        return Err(Error::Client(format!(
                            "{} of {} personas failed; first at index {}: {}",
                            batch.failures.len(),
                            prompts.len(),
                            f.index,
                            f.error
                        )));
                    }
                    batch.texts.into_iter().map(|t| t.expect("no failures")).collect()
                }
            };
            all.push((split, texts));
        }
        self.fresh_dir(dir)?;
        for (split, texts) in all {
            let path = dir.join(format!("{}.json", split.as_str()));
            write_json(&path, &texts)?;
            io.outputs.push(path);
        }
        Ok(())
    }

    fn embed_key(&self, texts: &[(Split, Vec<String>)]) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.cfg.embedder)?);
        h.update(self.cfg.personas.mode.as_str().as_bytes());
        for (split, t) in texts {
            h.update(split.as_str().as_bytes());
            h.update(serde_json::to_vec(t)?);
        }
        Ok(hex::encode(h.finalize()))
    }

    fn embed(&self, dir: &Path, io: &mut StageIo) -> Result<()> {
        let texts: Vec<(Split, Vec<String>)> = Split::ALL
            .iter()
            .map(|&s| Ok((s, self.persona_texts(s, io)?)))
            .collect::<Result<_>>()?;
        let key = self.embed_key(&texts)?;
        let key_path = dir.join("key.json");
        let cached = key_path.exists()
            && read_json::<EmbedKey>(&key_path).is_ok_and(|k| k.key == key)
            && Split::ALL.iter().all(|s| EmbeddingMatrix::load(dir, s.as_str()).is_ok());
        if cached {
            log::info!("reusing cached embeddings");
        } else {
            let mats: Vec<(Split, EmbeddingMatrix)> = texts
                .iter()
                .map(|(s, t)| Ok((*s, self.cfg.embedder.embed(t, self.cfg.personas.mode)?)))
                .collect::<Result<_>>()?;
            self.fresh_dir(dir)?;
            for (s, m) in &mats {
                m.save(dir, s.as_str())?;
            }
            write_json(&key_path, &EmbedKey { key })?;
        }
        for s in Split::ALL {
            io.outputs.push(dir.join(format!("{}.bin", s.as_str())));
            io.outputs.push(dir.join(format!("{}.json", s.as_str())));
        }
        io.outputs.push(key_path);
        Ok(())
    }

    fn train(&self, dir: &Path, io: &mut StageIo) -> Result<()> {
        let schema = self.schema(io)?;
        let train = self.split_population(Split::Train, &schema, io)?;
        let emb = self.embeddings(Split::Train, io)?;
        let (ckpt, log_path) = match self.cfg.backbone_seeded() {
            BackboneConfig::Gan(cfg) => {
                let t = train_gan(&train, &emb, &schema, &cfg, |_, _| Ok(()))?;
                self.fresh_dir(dir)?;
                let p = dir.join("log.csv");
                write_log_csv(&t.log, &p)?;
                write_json(&dir.join("log.json"), &t.log)?;
                (t.model.to_checkpoint()?, p)
            }
            BackboneConfig::Vae(cfg) => {
                let t = train_vae(&train, &emb, &schema, &cfg, |_, _| Ok(()))?;
                self.fresh_dir(dir)?;
                let p = dir.join("log.csv");
                write_log_csv(&t.log, &p)?;
                write_json(&dir.join("log.json"), &t.log)?;
                (t.model.to_checkpoint()?, p)
            }
        };
        save_checkpoint(&ckpt, dir.join("checkpoint"))?;
        io.outputs.push(log_path);
        io.outputs.push(dir.join("log.json"));
        io.outputs.push(dir.join("checkpoint"));
        Ok(())
    }

    fn generation_seed(&self) -> u64 {
        self.cfg.seed.wrapping_add(1)
    }

    fn generate(&self, dir: &Path, io: &mut StageIo) -> Result<()> {
        let schema = self.schema(io)?;
        let model = self.backbone(&schema, io)?;
        let split = self.cfg.generate.split;
        let emb = self.embeddings(split, io)?.tile(self.cfg.generate.tile);
        let pop = model.sampler().sample(&emb.to_f64(), self.generation_seed())?;
        self.fresh_dir(dir)?;
        let p = dir.join("population.csv");
        pop.write_csv(&schema, &p)?;
        io.outputs.push(p);
        log::info!("generated {} agents conditioned on the {} split", pop.len(), split.as_str());
        Ok(())
    }

    fn tuple_indices(&self, schema: &AttributeSchema) -> Result<Option<Vec<usize>>> {
        self.cfg
            .evaluate
            .tuple_attributes
            .as_ref()
            .map(|names| names.iter().map(|n| schema.require_index(n)).collect())
            .transpose()
    }

    fn evaluate(&self, dir: &Path, io: &mut StageIo) -> Result<()> {
        let schema = self.schema(io)?;
        let gen = self.generated(&schema, io)?;
        let model = self.backbone(&schema, io)?;
        let reference = self.split_population(self.cfg.generate.split, &schema, io)?;
        let tuples = self.tuple_indices(&schema)?;
        let report = evaluate(&gen, &reference, &schema, model.marginal_spec(), None, tuples.as_deref())?;
        self.fresh_dir(dir)?;
        report.write_csv(dir.join("metrics.csv"))?;
        write_json(&dir.join("metrics.json"), &report)?;
        write_log_csv(&report.per_variable, dir.join("per_variable.csv"))?;
        write_log_csv(&report.per_pair, dir.join("per_pair.csv"))?;
        for f in ["metrics.csv", "metrics.json", "per_variable.csv", "per_pair.csv"] {
            io.outputs.push(dir.join(f));
        }
        log::info!(
            "SRMSE-M {:.4} SRMSE-B {:.4} precision {:.2} recall {:.2} F1 {:.2}",
            report.srmse_m,
            report.srmse_b,
            report.precision,
            report.recall,
            report.f1
        );
        Ok(())
    }

    fn calibration_targets(
        &self,
        schema: &AttributeSchema,
        reference: &Population,
        spec: &crate::marginal::MarginalSpec,
        io: &mut StageIo,
    ) -> Result<CalibrationTargets> {
        if let Some(p) = &self.cfg.calibration.targets {
            io.inputs.push(p.clone());
            return CalibrationTargets::load(p);
        }
        let names: Vec<String> = match &self.cfg.calibration.attributes {
            Some(a) => a.clone(),
            None => {
                let defaults: Vec<String> = DEFAULT_CONSTRAINED
                    .iter()
                    .filter(|n| schema.index_of(n).is_some())
                    .map(|n| n.to_string())
                    .collect();
                if defaults.len() == DEFAULT_CONSTRAINED.len() {
                    defaults
                } else {
                    schema.names()
                }
            }
        };
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        CalibrationTargets::from_reference(reference, schema, spec, &refs)
    }

    fn calibrate(&self, dir: &Path, io: &mut StageIo) -> Result<()> {
        let schema = self.schema(io)?;
        let gen = self.generated(&schema, io)?;
        let model = self.backbone(&schema, io)?;
        let spec = model.marginal_spec();
        let reference = self.split_population(self.cfg.generate.split, &schema, io)?;
        let targets = self.calibration_targets(&schema, &reference, spec, io)?;
        let cc = &self.cfg.calibration;
        let rc = RakeConfig {
            damping: cc.damping,
            ..RakeConfig::default()
        };
        let rows = calibration_sweep(&gen, &reference, &schema, spec, &targets, &cc.levels, rc)?;
        let last = *cc.levels.last().expect("validated non-empty");
        let final_w = rake(&gen, &schema, spec, &targets, last, rc)?;
        for w in &final_w.warnings {
            log::warn!("{w}");
        }
        self.fresh_dir(dir)?;
        targets.save(dir.join("targets.json"))?;
        write_log_csv(&rows, dir.join("sweep.csv"))?;
        write_json(&dir.join("sweep.json"), &rows)?;
        #[derive(Serialize)]
        struct WeightRow {
            agent: usize,
            weight: f64,
        }
        let wrows: Vec<WeightRow> = final_w
            .weights
            .iter()
            .enumerate()
            .map(|(agent, &weight)| WeightRow { agent, weight })
            .collect();
        write_log_csv(&wrows, dir.join("weights.csv"))?;
        for f in ["targets.json", "sweep.csv", "sweep.json", "weights.csv"] {
            io.outputs.push(dir.join(f));
        }
        Ok(())
    }

    fn intervene(&self, dir: &Path, io: &mut StageIo) -> Result<()> {
        let iv = &self.cfg.intervention;
        let schema = self.schema(io)?;
        let j = schema.require_index(&iv.target)?;
        if schema.spec(j).kind != AttributeKind::Numerical {
            return Err(Error::Config(format!("intervention target `{}` is not numerical", iv.target)));
        }
        let model = self.backbone(&schema, io)?;
        let sampler = model.sampler();
        let train = self.split_population(Split::Train, &schema, io)?;
        let train_emb = self.embeddings(Split::Train, io)?;
        let labels: Vec<bool> = train.numerical(j).iter().map(|&v| v > iv.label_threshold).collect();
        let (_, e_std) = EmbeddingStandardizer::fit(&train_emb.to_f64())?;
        let mut direction = fit_direction(&e_std, &labels, iv.probe_lambda)?;
        direction.target_label_def = format!("{} > {}", iv.target, iv.label_threshold);

        let split = self.cfg.generate.split;
        let observed = self.split_population(split, &schema, io)?;
        let e0 = self.embeddings(split, io)?.to_f64();
        let seed = self.cfg.seed.wrapping_add(3);
        let sweep = semantic_sweep(sampler, &e0, &direction, &iv.alphas, &iv.target, seed)?;

        self.fresh_dir(dir)?;
        write_json(&dir.join("direction.json"), &direction)?;
        io.outputs.push(dir.join("direction.json"));
        let mut put_sweep = |name: &str, rows: &[SemanticSweepRow]| -> Result<()> {
            let csv = dir.join(format!("{name}.csv"));
            crate::counterfactual::write_semantic_sweep_csv(rows, &csv)?;
            write_json(&dir.join(format!("{name}.json")), rows)?;
            io.outputs.push(csv);
            io.outputs.push(dir.join(format!("{name}.json")));
            Ok(())
        };
        put_sweep("semantic", &sweep.rows)?;

        if iv.subgroups {
            let groups = build_subgroups(&observed, &schema, &iv.target, self.cfg.seed.wrapping_add(2))?;
            write_json(&dir.join("subgroups.json"), &groups)?;
            // For high users the effective direction is reversed: −α on d.
            let reversed = InterventionDirection {
                d: direction.d.iter().map(|x| -x).collect(),
                ..direction.clone()
            };
            let mut subgroup_rows = Vec::new();
            for (name, idx, dir_used) in [("low", &groups.low, &direction), ("high", &groups.high, &reversed)] {
                if idx.is_empty() {
                    log::warn!("subgroup `{name}` is empty; skipped");
                    continue;
                }
                let e = e0.select(ndarray::Axis(0), idx);
                let s = semantic_sweep(sampler, &e, dir_used, &iv.alphas, &iv.target, seed)?;
                subgroup_rows.push((name, s.rows));
            }
            for (name, rows) in &subgroup_rows {
                put_sweep(&format!("semantic_{name}"), rows)?;
            }
            io.outputs.push(dir.join("subgroups.json"));

            let mode = self.cfg.personas.mode;
            if !iv.text_variants.is_empty() && mode != PersonaMode::None {
                let texts = self.persona_texts(split, io)?;
                let deltas = self.text_interventions(sampler, &texts, &groups, seed)?;
                let csv = dir.join("text_deltas.csv");
                crate::counterfactual::write_text_deltas_csv(&deltas, &csv)?;
                write_json(&dir.join("text_deltas.json"), &deltas)?;
                io.outputs.push(csv);
                io.outputs.push(dir.join("text_deltas.json"));
            }
        }
        Ok(())
    }

    /// Insertion edits the low group; removal and suppression edit the
    /// high group. Deltas are relative to each group's unedited texts.
    fn text_interventions(
        &self,
        sampler: &dyn Sampler,
        texts: &[String],
        groups: &crate::counterfactual::Subgroups,
        seed: u64,
    ) -> Result<Vec<TextDeltaRow>> {
        let iv = &self.cfg.intervention;
        let pc = &self.cfg.personas;
        let client: Box<dyn TextClient> = match pc.client {
            PersonaClient::Template | PersonaClient::Offline => Box::new(OfflineEditClient),
            PersonaClient::Http => Box::new(HttpChatClient::new(pc.llm.clone().with_env())?),
        };
        let cache = TextCache::open(self.out().join("cache"))?;
        let embed = |t: &[String]| self.cfg.embedder.embed(t, pc.mode);
        let mut rows = Vec::new();
        for &variant in &iv.text_variants {
            let idx = match variant {
                TextEditVariant::Insertion => &groups.low,
                TextEditVariant::Removal | TextEditVariant::Suppression => &groups.high,
            };
            if idx.is_empty() {
                continue;
            }
            let base: Vec<String> = idx.iter().map(|&i| texts[i].clone()).collect();
            let edited = text_edit(&base, variant, &iv.cue, client.as_ref(), &pc.llm, Some(&cache))?;
            let mut m = IndexMap::new();
            m.insert(variant.as_str().to_string(), edited);
            rows.extend(text_sweep(sampler, &base, &m, embed, seed, &iv.target)?);
        }
        Ok(rows)
    }

    fn report(&self, dir: &Path, io: &mut StageIo) -> Result<()> {
        let metrics_path = self.stage_dir(Stage::Evaluate).join("metrics.json");
        if !metrics_path.exists() {
            return Err(missing("evaluation metrics", Stage::Evaluate));
        }
        io.inputs.push(metrics_path.clone());
        let m: MetricReport = read_json(&metrics_path)?;
        let mut rows = Vec::new();
        let mut push = |table: &str, key: &str, metric: &str, value: f64| {
            rows.push(ReportRow {
                table: table.into(),
                key: key.into(),
                metric: metric.into(),
                value,
            })
        };
        for (k, v) in [
            ("srmse_m", m.srmse_m),
            ("srmse_b", m.srmse_b),
            ("precision", m.precision),
            ("recall", m.recall),
            ("f1", m.f1),
        ] {
            push("metrics", "all", k, v);
        }
        for v in &m.per_variable {
            push("metrics", &v.attribute, "srmse", v.srmse);
        }

        let sweep_path = self.stage_dir(Stage::Calibrate).join("sweep.json");
        if sweep_path.exists() {
            io.inputs.push(sweep_path.clone());
            let sweep: Vec<SweepRow> = read_json(&sweep_path)?;
            for r in &sweep {
                push("calibration", &r.level, "iterations", r.iterations as f64);
                push("calibration", &r.level, "srmse_m_weighted", r.srmse_m_weighted);
                push("calibration", &r.level, "srmse_b_weighted", r.srmse_b_weighted);
                push("calibration", &r.level, "ess", r.ess);
            }
        } else {
            log::info!("no calibration results; run `calibrate` to include them");
        }

        let iv_dir = self.stage_dir(Stage::Intervene);
        let mut any_intervention = false;
        for name in ["semantic", "semantic_low", "semantic_high"] {
            let p = iv_dir.join(format!("{name}.json"));
            if !p.exists() {
                continue;
            }
            any_intervention = true;
            io.inputs.push(p.clone());
            let sweep: Vec<SemanticSweepRow> = read_json(&p)?;
            for r in &sweep {
                let key = format!("alpha={}", r.alpha);
                push(name, &key, "mean_target", r.mean_target);
                push(name, &key, "activation", r.activation);
                for (attr, v) in &r.side_effects {
                    push(name, &key, &format!("side_effect:{attr}"), *v);
                }
            }
        }
        let p = iv_dir.join("text_deltas.json");
        if p.exists() {
            io.inputs.push(p.clone());
            let deltas: Vec<TextDeltaRow> = read_json(&p)?;
            for r in &deltas {
                for (k, v) in [
                    ("d_mean", r.d_mean),
                    ("d_activation", r.d_activation),
                    ("d_median", r.d_median),
                    ("d_p25", r.d_p25),
                    ("d_p75", r.d_p75),
                ] {
                    push("text", &r.variant, k, v);
                }
            }
        }
        if !any_intervention {
            log::info!("no intervention results; run `intervene` to include them");
        }

        self.fresh_dir(dir)?;
        write_log_csv(&rows, dir.join("report.csv"))?;
        write_json(&dir.join("report.json"), &rows)?;
        io.outputs.push(dir.join("report.csv"));
        io.outputs.push(dir.join("report.json"));
        Ok(())
    }
}
