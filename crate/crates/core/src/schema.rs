//! Attribute schema: which columns an agent has, their types, and the
//! standardization statistics fitted on the training split.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::population::{Column, Population};

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Categorical,
    Numerical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeGroup {
    Demographic,
    Household,
    Behavioral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub kind: AttributeKind,
    pub group: AttributeGroup,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub integer_valued: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    /// Training range, used to clip decoded values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

impl AttributeSpec {
    pub fn categorical(name: &str, group: AttributeGroup, categories: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: AttributeKind::Categorical,
            group,
            categories: categories.iter().map(|c| c.to_string()).collect(),
            integer_valued: false,
            mean: None,
            std: None,
            min: None,
            max: None,
        }
    }

    pub fn numerical(name: &str, group: AttributeGroup, integer_valued: bool) -> Self {
        Self {
            name: name.to_string(),
            kind: AttributeKind::Numerical,
            group,
            categories: Vec::new(),
            integer_valued,
            mean: None,
            std: None,
            min: None,
            max: None,
        }
    }

    pub fn is_categorical(&self) -> bool {
        self.kind == AttributeKind::Categorical
    }

    /// Width of this attribute's block in the encoded representation.
    pub fn encoded_width(&self) -> usize {
        match self.kind {
            AttributeKind::Categorical => self.categories.len(),
            AttributeKind::Numerical => 1,
        }
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == label)
    }
}

/// Position of one attribute inside an encoded row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub attr: usize,
    pub start: usize,
    pub width: usize,
    pub kind: AttributeKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    #[serde(rename = "attributes")]
    specs: Vec<AttributeSpec>,
}

impl AttributeSchema {
    pub fn new(specs: Vec<AttributeSpec>) -> Result<Self> {
        let schema = Self { specs };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        if self.specs.is_empty() {
            return Err(Error::Schema(
                "schema must contain at least one attribute".into(),
            ));
        }
        let mut seen = HashSet::new();
        for spec in &self.specs {
            if spec.name.is_empty() {
                return Err(Error::Schema("attribute with empty name".into()));
            }
            if !seen.insert(spec.name.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate attribute name `{}`",
                    spec.name
                )));
            }
            match spec.kind {
                AttributeKind::Categorical => {
                    if spec.categories.len() < 2 {
                        return Err(Error::Schema(format!(
                            "categorical attribute `{}` needs at least 2 categories, has {}",
                            spec.name,
                            spec.categories.len()
                        )));
                    }
                    let distinct: HashSet<_> = spec.categories.iter().collect();
                    if distinct.len() != spec.categories.len() {
                        return Err(Error::Schema(format!(
                            "categorical attribute `{}` repeats a category label",
                            spec.name
                        )));
                    }
                }
                AttributeKind::Numerical => {
                    if !spec.categories.is_empty() {
                        return Err(Error::Schema(format!(
                            "numerical attribute `{}` must not list categories",
                            spec.name
                        )));
                    }
                    if let Some(std) = spec.std {
                        if !(std > 0.0 && std.is_finite()) {
                            return Err(Error::Schema(format!(
                                "attribute `{}` has non-positive std {std}",
                                spec.name
                            )));
                        }
                    }
                    if let Some(mean) = spec.mean {
                        if !mean.is_finite() {
                            return Err(Error::Schema(format!(
                                "attribute `{}` has non-finite mean",
                                spec.name
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// The 23-attribute schema of individual-level agent attributes.
    pub fn default_swedish() -> Self {
        serde_json::from_str::<Self>(include_str!("../data/default_schema.json"))
            .ok()
            .filter(|s| s.validate().is_ok())
            .expect("bundled schema is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Self = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).at(path)
    }

    pub fn specs(&self) -> &[AttributeSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn spec(&self, index: usize) -> &AttributeSpec {
        &self.specs[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn require_index(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attribute `{name}`")))
    }

    pub fn names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    /// Σ|categories| over categorical attributes plus the numerical count.
    pub fn encoded_width(&self) -> usize {
        self.specs.iter().map(AttributeSpec::encoded_width).sum()
    }

    pub fn blocks(&self) -> Vec<Block> {
        let mut start = 0;
        self.specs
            .iter()
            .enumerate()
            .map(|(attr, s)| {
                let b = Block {
                    attr,
                    start,
                    width: s.encoded_width(),
                    kind: s.kind,
                };
                start += b.width;
                b
            })
            .collect()
    }

    pub fn categorical_count(&self) -> usize {
        self.specs.iter().filter(|s| s.is_categorical()).count()
    }

    pub fn numerical_count(&self) -> usize {
        self.len() - self.categorical_count()
    }

    pub fn has_stats(&self) -> bool {
        self.specs
            .iter()
            .filter(|s| !s.is_categorical())
            .all(|s| s.mean.is_some() && s.std.is_some())
    }

    /// Stable content hash; changes whenever any field (stats included) changes.
    pub fn hash_hex(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<AttributeSchema> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).at(path)?;
    AttributeSchema::from_json(&text)
}

/// Result of fitting standardization statistics.
#[derive(Clone, Debug)]
pub struct FittedSchema {
    pub schema: AttributeSchema,
    pub warnings: Vec<String>,
}

/// Fit mean, population std (floored at [`STD_FLOOR`]) and range of every
/// numerical attribute on `train`.
pub fn fit_schema_stats(schema: &AttributeSchema, train: &Population) -> Result<FittedSchema> {
    if train.is_empty() {
        return Err(Error::Data(
            "cannot fit statistics on an empty population".into(),
        ));
    }
    train.validate(schema)?;
    let mut specs = schema.specs.clone();
    let mut warnings = Vec::new();
    for (j, spec) in specs.iter_mut().enumerate() {
        let Column::Numerical(values) = train.column(j) else {
            continue;
        };
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let mut std = var.sqrt();
        if std < STD_FLOOR {
            let msg = format!(
                "attribute `{}` is constant on the training split; std floored at {STD_FLOOR}",
                spec.name
            );
            log::warn!("{msg}");
            warnings.push(msg);
            std = STD_FLOOR;
        }
        spec.mean = Some(mean);
        spec.std = Some(std);
        spec.min = values.iter().copied().reduce(f64::min);
        spec.max = values.iter().copied().reduce(f64::max);
    }
    Ok(FittedSchema {
        schema: AttributeSchema::new(specs)?,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::Column;

    fn one_numeric(values: Vec<f64>) -> (AttributeSchema, Population) {
        let schema = AttributeSchema::new(vec![AttributeSpec::numerical(
            "x",
            AttributeGroup::Behavioral,
            false,
        )])
        .unwrap();
        let pop = Population::new(&schema, vec![Column::Numerical(values)]).unwrap();
        (schema, pop)
    }

    #[test]
    fn bundled_schema_matches_attribute_table() {
        let s = AttributeSchema::default_swedish();
        assert_eq!(s.len(), 23);
        assert_eq!(s.categorical_count(), 7);
        assert_eq!(s.numerical_count(), 16);
        assert_eq!(s.spec(0).categories.len(), 10);
        assert_eq!(s.spec(6).categories.len(), 5);
        // 10 + 2 + 3 + 2 + 2 + 5 + 3 categories, 16 numerical columns.
        assert_eq!(s.encoded_width(), 27 + 16);
    }

    #[test]
    fn empty_schema_rejected() {
        let err = AttributeSchema::from_json(r#"{"attributes":[]}"#).unwrap_err();
        assert!(err
            .to_string()
            .contains("schema must contain at least one attribute"));
    }

    #[test]
    fn duplicate_and_degenerate_rejected() {
        let dup = r#"{"attributes":[
            {"name":"a","kind":"numerical","group":"behavioral"},
            {"name":"a","kind":"numerical","group":"behavioral"}]}"#;
        assert!(AttributeSchema::from_json(dup).is_err());
        let one_cat = r#"{"attributes":[
            {"name":"a","kind":"categorical","group":"demographic","categories":["x"]}]}"#;
        assert!(AttributeSchema::from_json(one_cat).is_err());
        assert!(AttributeSchema::from_json("{not json").is_err());
    }

    #[test]
    fn schema_file_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("schema.json");
        std::fs::write(
            &path,
            r#"{"attributes":[
                {"name":"Gender","kind":"categorical","group":"demographic","categories":["M","F"]},
                {"name":"Age","kind":"numerical","group":"demographic","integer_valued":true},
                {"name":"Trips","kind":"numerical","group":"behavioral","integer_valued":true}]}"#,
        )
        .unwrap();
        let s = load_schema(&path).unwrap();
        assert_eq!(s.names(), vec!["Gender", "Age", "Trips"]);
        assert!(s.spec(1).integer_valued);
        assert_eq!(s.encoded_width(), 4);
    }

    #[test]
    fn fits_population_std() {
        let (schema, pop) = one_numeric(vec![0.0, 2.0, 4.0]);
        let fitted = fit_schema_stats(&schema, &pop).unwrap();
        let spec = fitted.schema.spec(0);
        assert_eq!(spec.mean, Some(2.0));
        assert!((spec.std.unwrap() - (8.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(fitted.warnings.is_empty());
        assert_eq!((spec.min, spec.max), (Some(0.0), Some(4.0)));
    }

    #[test]
    fn constant_column_floors_std_with_warning() {
        let (schema, pop) = one_numeric(vec![5.0, 5.0]);
        let fitted = fit_schema_stats(&schema, &pop).unwrap();
        assert_eq!(fitted.schema.spec(0).mean, Some(5.0));
        assert_eq!(fitted.schema.spec(0).std, Some(1e-6));
        assert_eq!(fitted.warnings.len(), 1);
    }

    #[test]
    fn empty_train_rejected() {
        let (schema, pop) = one_numeric(vec![]);
        assert!(fit_schema_stats(&schema, &pop).is_err());
    }

    #[test]
    fn hash_tracks_stats() {
        let (schema, pop) = one_numeric(vec![1.0, 3.0]);
        let fitted = fit_schema_stats(&schema, &pop).unwrap().schema;
        assert_ne!(schema.hash_hex(), fitted.hash_hex());
        assert_eq!(fitted.hash_hex(), fitted.clone().hash_hex());
    }
}
