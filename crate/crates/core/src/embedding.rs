//! Per-agent persona embeddings and their on-disk form.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    External,
    Mock,
    Zero,
}

/// `n × D_p` embeddings stored as `f32`, one row per agent.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    matrix: Array2<f32>,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    rows: usize,
    cols: usize,
    provenance: Provenance,
    dtype: String,
}

impl EmbeddingMatrix {
    pub fn new(matrix: Array2<f32>, provenance: Provenance) -> Result<Self> {
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("embedding matrix has non-finite entries".into()));
        }
        if provenance == Provenance::Zero && matrix.iter().any(|&x| x != 0.0) {
            return Err(Error::Data("zero-provenance embeddings must be all zeros".into()));
        }
        Ok(Self { matrix, provenance })
    }

    pub fn from_f64(matrix: &Array2<f64>, provenance: Provenance) -> Result<Self> {
        Self::new(matrix.mapv(|x| x as f32), provenance)
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        Self {
            matrix: Array2::zeros((n, dim)),
            provenance: Provenance::Zero,
        }
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn matrix(&self) -> &Array2<f32> {
        &self.matrix
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.matrix.mapv(f64::from)
    }

    pub fn select(&self, rows: &[usize]) -> EmbeddingMatrix {
        Self {
            matrix: self.matrix.select(ndarray::Axis(0), rows),
            provenance: self.provenance,
        }
    }

    /// Repeat the rows `times` times in order: rows 0..n, 0..n, ...
    pub fn tile(&self, times: usize) -> EmbeddingMatrix {
        let rows: Vec<usize> = (0..times).flat_map(|_| 0..self.len()).collect();
        self.select(&rows)
    }

    /// Writes `<stem>.bin` (little-endian f32, row-major) and `<stem>.json`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).at(dir)?;
        let bin = dir.join(format!("{stem}.bin"));
        let mut bytes = Vec::with_capacity(self.matrix.len() * 4);
        for x in self.matrix.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        std::fs::write(&bin, bytes).at(&bin)?;
        let side = Sidecar {
            rows: self.matrix.nrows(),
            cols: self.matrix.ncols(),
            provenance: self.provenance,
            dtype: "f32le".into(),
        };
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_vec_pretty(&side)?).at(&json)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let json = dir.join(format!("{stem}.json"));
        let side: Sidecar = serde_json::from_slice(&std::fs::read(&json).at(&json)?)?;
        if side.dtype != "f32le" {
            return Err(Error::Data(format!("unsupported embedding dtype `{}`", side.dtype)));
        }
        let bin = dir.join(format!("{stem}.bin"));
        let bytes = std::fs::read(&bin).at(&bin)?;
        let matrix = f32_matrix(&bytes, side.rows, side.cols)
            .map_err(|e| Error::Data(format!("{}: {e}", bin.display())))?;
        Self::new(matrix, side.provenance)
    }
}

/// Decode a row-major little-endian f32 buffer.
pub(crate) fn f32_matrix(bytes: &[u8], rows: usize, cols: usize) -> std::result::Result<Array2<f32>, String> {
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes, found {}", bytes.len()));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}
