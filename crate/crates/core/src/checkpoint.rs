//! Self-describing model checkpoints: a JSON manifest plus one little-endian
//! `f32` file per parameter tensor, each with a JSON shape sidecar.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::f32_matrix;
use crate::error::{Error, IoContext, Result};
use crate::marginal::MarginalSpec;
use crate::nn::ParamSet;
use crate::schema::AttributeSchema;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Gan,
    Vae,
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackboneKind::Gan => "gan",
            BackboneKind::Vae => "vae",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub backbone: BackboneKind,
    pub schema: AttributeSchema,
    pub schema_hash: String,
    pub embedding_dim: usize,
    pub marginal_spec: MarginalSpec,
    /// Conditioning switches, e.g. `g_cond`, `d_cond`, `film_position`.
    pub flags: serde_json::Map<String, serde_json::Value>,
    /// The full training configuration as it was used.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamSet,
}

impl ModelCheckpoint {
    /// Parameters are rounded to `f32`, the storage precision, so that a
    /// saved and reloaded checkpoint equals this one exactly.
    pub fn new(
        backbone: BackboneKind,
        schema: &AttributeSchema,
        embedding_dim: usize,
        marginal_spec: MarginalSpec,
        flags: serde_json::Map<String, serde_json::Value>,
        config: serde_json::Value,
        mut params: ParamSet,
    ) -> Self {
        params.quantize_f32();
        let tensors = params
            .iter()
            .map(|(k, v)| TensorEntry {
                name: k.clone(),
                rows: v.nrows(),
                cols: v.ncols(),
            })
            .collect();
        Self {
            manifest: CheckpointManifest {
                format_version: FORMAT_VERSION,
                backbone,
                schema: schema.clone(),
                schema_hash: schema.hash_hex(),
                embedding_dim,
                marginal_spec,
                flags,
                config,
                tensors,
            },
            params,
        }
    }

    pub fn check_schema(&self, schema: &AttributeSchema) -> Result<()> {
        let h = schema.hash_hex();
        if h != self.manifest.schema_hash {
            return Err(Error::Checkpoint(format!(
                "schema hash mismatch: checkpoint {} vs provided {}",
                self.manifest.schema_hash, h
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ShapeSidecar {
    name: String,
    shape: [usize; 2],
    dtype: String,
}

fn tensor_stem(index: usize) -> String {
    format!("{index:04}")
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let tdir = dir.join("tensors");
    std::fs::create_dir_all(&tdir).at(&tdir)?;
    if !ckpt.params.all_finite() {
        return Err(Error::Checkpoint("refusing to save non-finite parameters".into()));
    }
    for (i, (name, t)) in ckpt.params.iter().enumerate() {
        let stem = tensor_stem(i);
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for &x in t.iter() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        let bin = tdir.join(format!("{stem}.bin"));
        std::fs::write(&bin, bytes).at(&bin)?;
        let side = ShapeSidecar {
            name: name.clone(),
            shape: [t.nrows(), t.ncols()],
            dtype: "f32le".into(),
        };
        let js = tdir.join(format!("{stem}.json"));
        std::fs::write(&js, serde_json::to_vec_pretty(&side)?).at(&js)?;
    }
    let mpath = dir.join("manifest.json");
    std::fs::write(&mpath, serde_json::to_vec_pretty(&ckpt.manifest)?).at(&mpath)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let raw: serde_json::Value = serde_json::from_slice(&std::fs::read(&mpath).at(&mpath)?)?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version:?}, expected {FORMAT_VERSION}"
        )));
    }
    let manifest: CheckpointManifest = serde_json::from_value(raw)?;
    if manifest.schema.hash_hex() != manifest.schema_hash {
        return Err(Error::Checkpoint("manifest schema does not match its recorded hash".into()));
    }
    let tdir = dir.join("tensors");
    let mut params = ParamSet::new();
    for (i, entry) in manifest.tensors.iter().enumerate() {
        let stem = tensor_stem(i);
        let js = tdir.join(format!("{stem}.json"));
        let side: ShapeSidecar = serde_json::from_slice(&std::fs::read(&js).at(&js)?)?;
        if side.name != entry.name || side.shape != [entry.rows, entry.cols] || side.dtype != "f32le" {
            return Err(Error::Checkpoint(format!(
                "tensor `{}`: sidecar disagrees with manifest",
                entry.name
            )));
        }
        let bin = tdir.join(format!("{stem}.bin"));
        let bytes = std::fs::read(&bin).at(&bin)?;
        let m = f32_matrix(&bytes, entry.rows, entry.cols)
            .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", entry.name)))?;
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor `{}` has non-finite values", entry.name)));
        }
        params.insert(entry.name.clone(), m.mapv(f64::from));
    }
    Ok(ModelCheckpoint { manifest, params })
}

/// Load and require that the checkpoint was trained with `schema`.
pub fn load_checkpoint_for(dir: impl AsRef<Path>, schema: &AttributeSchema) -> Result<ModelCheckpoint> {
    let ckpt = load_checkpoint(dir)?;
    ckpt.check_schema(schema)?;
    Ok(ckpt)
}
