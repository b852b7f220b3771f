//! Agent tables: CSV I/O, one-hot/standardized encoding, decoding,
//! stratified subsampling and splits.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, IoContext, Result};
use crate::schema::{AttributeKind, AttributeSchema};

#[derive(Clone, Debug, PartialEq)]
pub enum Column {
    /// Category indices into the attribute's category list.
    Categorical(Vec<usize>),
    Numerical(Vec<f64>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Categorical(v) => v.len(),
            Column::Numerical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Categorical(v) => Column::Categorical(rows.iter().map(|&i| v[i]).collect()),
            Column::Numerical(v) => Column::Numerical(rows.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// A table of agents stored column-wise, aligned with an [`AttributeSchema`].
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    columns: Vec<Column>,
    n: usize,
}

impl Population {
    pub fn new(schema: &AttributeSchema, columns: Vec<Column>) -> Result<Self> {
        let n = columns.first().map_or(0, Column::len);
        let pop = Self { columns, n };
        pop.validate(schema)?;
        Ok(pop)
    }

    /// Check column count, kinds, lengths and cell validity against `schema`.
    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        if self.columns.len() != schema.len() {
            return Err(Error::Data(format!(
                "population has {} columns, schema has {}",
                self.columns.len(),
                schema.len()
            )));
        }
        for (j, (col, spec)) in self.columns.iter().zip(schema.specs()).enumerate() {
            if col.len() != self.n {
                return Err(Error::Data(format!(
                    "column `{}` has {} rows, expected {}",
                    spec.name,
                    col.len(),
                    self.n
                )));
            }
            match (col, spec.kind) {
                (Column::Categorical(v), AttributeKind::Categorical) => {
                    if let Some((i, &k)) =
                        v.iter().enumerate().find(|(_, &k)| k >= spec.categories.len())
                    {
                        return Err(Error::Data(format!(
                            "row {i}, column `{}`: category index {k} out of range",
                            spec.name
                        )));
                    }
                }
                (Column::Numerical(v), AttributeKind::Numerical) => {
                    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !x.is_finite()) {
                        return Err(Error::Data(format!(
                            "row {i}, column `{}`: non-finite value {x}",
                            spec.name
                        )));
                    }
                }
                _ => {
                    return Err(Error::Data(format!(
                        "column {j} (`{}`) has the wrong kind",
                        spec.name
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, j: usize) -> &Column {
        &self.columns[j]
    }

    pub fn column_mut(&mut self, j: usize) -> &mut Column {
        &mut self.columns[j]
    }

    pub fn categorical(&self, j: usize) -> &[usize] {
        match &self.columns[j] {
            Column::Categorical(v) => v,
            Column::Numerical(_) => panic!("column {j} is numerical"),
        }
    }

    pub fn numerical(&self, j: usize) -> &[f64] {
        match &self.columns[j] {
            Column::Numerical(v) => v,
            Column::Categorical(_) => panic!("column {j} is categorical"),
        }
    }

    /// Rows at `rows`, in that order.
    pub fn select(&self, rows: &[usize]) -> Population {
        Population {
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            n: rows.len(),
        }
    }

    /// Row-wise concatenation.
    pub fn concat(&self, other: &Population) -> Result<Population> {
        if self.columns.len() != other.columns.len() {
            return Err(Error::Data("cannot concatenate populations of different width".into()));
        }
        let columns = self
            .columns
            .iter()
            .zip(&other.columns)
            .map(|(a, b)| match (a, b) {
                (Column::Categorical(x), Column::Categorical(y)) => {
                    Ok(Column::Categorical(x.iter().chain(y).copied().collect()))
                }
                (Column::Numerical(x), Column::Numerical(y)) => {
                    Ok(Column::Numerical(x.iter().chain(y).copied().collect()))
                }
                _ => Err(Error::Data("column kinds differ".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Population {
            columns,
            n: self.n + other.n,
        })
    }

    /// Cell rendered as its CSV text.
    pub fn cell_text(&self, schema: &AttributeSchema, row: usize, col: usize) -> String {
        match &self.columns[col] {
            Column::Categorical(v) => schema.spec(col).categories[v[row]].clone(),
            Column::Numerical(v) => format_number(v[row]),
        }
    }

    pub fn write_csv(&self, schema: &AttributeSchema, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).at(path)?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        w.write_record(schema.names())?;
        for i in 0..self.n {
            let row: Vec<String> = (0..schema.len())
                .map(|j| self.cell_text(schema, i, j))
                .collect();
            w.write_record(&row)?;
        }
        w.flush().at(path)?;
        Ok(())
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_number(x: f64) -> String {
    if x == 0.0 {
        // Avoid "-0".
        return "0".into();
    }
    format!("{x}")
}

/// Read a CSV whose header names the schema's attributes.
pub fn load_population(path: impl AsRef<Path>, schema: &AttributeSchema) -> Result<Population> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).at(path)?;
    read_population(std::io::BufReader::new(file), schema)
}

pub fn read_population(reader: impl std::io::Read, schema: &AttributeSchema) -> Result<Population> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let positions: Vec<usize> = schema
        .specs()
        .iter()
        .map(|spec| {
            header
                .iter()
                .position(|h| h.trim() == spec.name)
                .ok_or_else(|| Error::Data(format!("missing column `{}`", spec.name)))
        })
        .collect::<Result<_>>()?;
    let mut columns: Vec<Column> = schema
        .specs()
        .iter()
        .map(|s| match s.kind {
            AttributeKind::Categorical => Column::Categorical(Vec::new()),
            AttributeKind::Numerical => Column::Numerical(Vec::new()),
        })
        .collect();
    for (row, record) in r.records().enumerate() {
        let record = record?;
        for (j, spec) in schema.specs().iter().enumerate() {
            let raw = record.get(positions[j]).unwrap_or("").trim();
            match &mut columns[j] {
                Column::Categorical(v) => {
                    let k = spec.category_index(raw).ok_or_else(|| {
                        Error::Data(format!(
                            "row {row}, column `{}`: unknown category `{raw}`",
                            spec.name
                        ))
                    })?;
                    v.push(k);
                }
                Column::Numerical(v) => {
                    let x: f64 = raw.parse().map_err(|_| {
                        Error::Data(format!(
                            "row {row}, column `{}`: non-numeric value `{raw}`",
                            spec.name
                        ))
                    })?;
                    if !x.is_finite() {
                        return Err(Error::Data(format!(
                            "row {row}, column `{}`: non-finite value `{raw}`",
                            spec.name
                        )));
                    }
                    v.push(x);
                }
            }
        }
    }
    Population::new(schema, columns)
}

/// Encoded rows: one-hot (or soft) blocks for categorical attributes,
/// standardized scalars for numerical ones, in schema order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub matrix: Array2<f64>,
}

impl EncodedBatch {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    /// Every categorical block is non-negative and sums to 1 within `tol`.
    pub fn blocks_on_simplex(&self, schema: &AttributeSchema, tol: f64) -> bool {
        schema
            .blocks()
            .iter()
            .filter(|b| b.kind == AttributeKind::Categorical)
            .all(|b| {
                self.matrix.rows().into_iter().all(|row| {
                    let block = &row.as_slice().expect("standard layout")[b.start..b.start + b.width];
                    block.iter().all(|&x| x >= -tol) && (block.iter().sum::<f64>() - 1.0).abs() <= tol
                })
            })
    }
}

pub fn encode(pop: &Population, schema: &AttributeSchema) -> Result<EncodedBatch> {
    if !schema.has_stats() {
        return Err(Error::Schema(
            "standardization statistics not fitted; call fit_schema_stats first".into(),
        ));
    }
    pop.validate(schema)?;
    let mut m = Array2::zeros((pop.len(), schema.encoded_width()));
    for b in schema.blocks() {
        let spec = schema.spec(b.attr);
        match pop.column(b.attr) {
            Column::Categorical(v) => {
                for (i, &k) in v.iter().enumerate() {
                    m[[i, b.start + k]] = 1.0;
                }
            }
            Column::Numerical(v) => {
                let (mean, std) = (spec.mean.unwrap(), spec.std.unwrap());
                for (i, &x) in v.iter().enumerate() {
                    m[[i, b.start]] = (x - mean) / std;
                }
            }
        }
    }
    Ok(EncodedBatch { matrix: m })
}

/// Inverse of [`encode`]: argmax over categorical blocks (ties to the lowest
/// index), de-standardize numerical columns, round integer-valued ones and
/// clip to the training range.
pub fn decode(batch: &EncodedBatch, schema: &AttributeSchema) -> Result<Population> {
    if batch.matrix.ncols() != schema.encoded_width() {
        return Err(Error::Shape(format!(
            "batch width {} does not match schema width {}",
            batch.matrix.ncols(),
            schema.encoded_width()
        )));
    }
    if !schema.has_stats() {
        return Err(Error::Schema("standardization statistics not fitted".into()));
    }
    if let Some(x) = batch.matrix.iter().find(|x| !x.is_finite()) {
        return Err(Error::Data(format!("cannot decode non-finite value {x}")));
    }
    let n = batch.rows();
    let columns = schema
        .blocks()
        .iter()
        .map(|b| {
            let spec = schema.spec(b.attr);
            match b.kind {
                AttributeKind::Categorical => Column::Categorical(
                    (0..n)
                        .map(|i| {
                            let mut best = 0;
                            for k in 1..b.width {
                                if batch.matrix[[i, b.start + k]] > batch.matrix[[i, b.start + best]] {
                                    best = k;
                                }
                            }
                            best
                        })
                        .collect(),
                ),
                AttributeKind::Numerical => {
                    let (mean, std) = (spec.mean.unwrap(), spec.std.unwrap());
                    Column::Numerical(
                        (0..n)
                            .map(|i| {
                                let mut x = batch.matrix[[i, b.start]] * std + mean;
                                if spec.integer_valued {
                                    x = x.round();
                                }
                                if let Some(lo) = spec.min {
                                    x = x.max(lo);
                                }
                                if let Some(hi) = spec.max {
                                    x = x.min(hi);
                                }
                                x
                            })
                            .collect(),
                    )
                }
            }
        })
        .collect();
    Population::new(schema, columns)
}

/// `round` with ties away from zero, independent of platform rounding mode.
pub fn round_half_away(x: f64) -> usize {
    x.round().max(0.0) as usize
}

/// Per stratum `s`, exactly `round(n_s * fraction)` agents drawn uniformly
/// without replacement. Output keeps the original relative row order.
pub fn stratified_sample(
    pop: &Population,
    schema: &AttributeSchema,
    stratum_attr: &str,
    fraction: f64,
    seed: u64,
) -> Result<Population> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let j = schema.require_index(stratum_attr)?;
    if !schema.spec(j).is_categorical() {
        return Err(Error::InvalidArgument(format!(
            "stratum attribute `{stratum_attr}` must be categorical"
        )));
    }
    let codes = pop.categorical(j);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for k in 0..schema.spec(j).categories.len() {
        let mut members: Vec<usize> = (0..pop.len()).filter(|&i| codes[i] == k).collect();
        let take = round_half_away(members.len() as f64 * fraction).min(members.len());
        let (picked, _) = members.partial_shuffle(&mut rng, take);
        chosen.extend_from_slice(picked);
    }
    chosen.sort_unstable();
    Ok(pop.select(&chosen))
}

/// Shuffled train/validation/test split. Sizes are `round(n * f)` for the
/// first two parts; the test part takes the remainder.
pub fn split_population(
    pop: &Population,
    train_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<(Population, Population, Population)> {
    if train_fraction <= 0.0 || val_fraction < 0.0 || train_fraction + val_fraction > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "invalid split fractions train={train_fraction} val={val_fraction}"
        )));
    }
    let n = pop.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = round_half_away(n as f64 * train_fraction).min(n);
    let n_val = round_half_away(n as f64 * val_fraction).min(n - n_train);
    let mut train: Vec<usize> = idx[..n_train].to_vec();
    let mut val: Vec<usize> = idx[n_train..n_train + n_val].to_vec();
    let mut test: Vec<usize> = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok((pop.select(&train), pop.select(&val), pop.select(&test)))
}
