//! Post-hoc raking of generated agents toward target marginals, and the
//! calibration-strength sweep.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::marginal::MarginalSpec;
use crate::metrics::{discretize, distribution, ess, srmse_b_coded, srmse_m_coded, Discretized};
use crate::population::Population;
use crate::schema::AttributeSchema;

/// Iteration counts of the five calibration levels L0..L4.
pub const DEFAULT_LEVELS: [usize; 5] = [0, 5, 10, 20, 40];

/// Attributes constrained by default when the full schema is in use.
pub const DEFAULT_CONSTRAINED: [&str; 5] = [
    "Age",
    "Income_class",
    "Household_Type",
    "Number_of_cars_of_household",
    "Trips_of_PublicTransport",
];

/// Target distributions over categories or spec bins, applied in insertion
/// order. Serialized as a JSON object whose key order is the pass order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CalibrationTargets {
    targets: IndexMap<String, Vec<f64>>,
}

impl CalibrationTargets {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut targets = IndexMap::new();
        for (name, p) in entries {
            if targets.contains_key(&name) {
                return Err(Error::InvalidArgument(format!("attribute `{name}` constrained twice")));
            }
            targets.insert(name, p);
        }
        let t = Self { targets };
        t.check_sums()?;
        Ok(t)
    }

    fn check_sums(&self) -> Result<()> {
        for (name, p) in &self.targets {
            let s: f64 = p.iter().sum();
            if p.is_empty() || p.iter().any(|&x| !(x >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "target for `{name}` must be non-negative and sum to 1 (sum {s})"
                )));
            }
        }
        Ok(())
    }

    /// Marginals of `reference` for the named attributes.
    pub fn from_reference(
        reference: &Population,
        schema: &AttributeSchema,
        spec: &MarginalSpec,
        attributes: &[&str],
    ) -> Result<Self> {
        let d = discretize(reference, schema, spec)?;
        let entries = attributes
            .iter()
            .map(|&a| {
                let j = schema.require_index(a)?;
                Ok((a.to_string(), distribution(&d.codes[j], d.supports[j], None)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn attributes(&self) -> impl Iterator<Item = &String> {
        self.targets.keys()
    }

    pub fn get(&self, attribute: &str) -> Option<&[f64]> {
        self.targets.get(attribute).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.targets.iter()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Resolve each target to a schema column and check its support size.
    fn resolve(&self, schema: &AttributeSchema, spec: &MarginalSpec) -> Result<Vec<(usize, &[f64])>> {
        spec.check_schema(schema)?;
        self.targets
            .iter()
            .map(|(name, p)| {
                let j = schema.require_index(name)?;
                let k = spec.variables[j].support();
                if p.len() != k {
                    return Err(Error::Shape(format!(
                        "target for `{name}` has {} entries, support has {k}",
                        p.len()
                    )));
                }
                Ok((j, p.as_slice()))
            })
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let t: Self = serde_json::from_slice(&std::fs::read(path).at(path)?)?;
        t.check_sums()?;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(self)?).at(path)
    }
}

/// `p̂_w(k) = Σ_i w_i 1[x_i = k]` over categories or spec bins.
pub fn weighted_marginal(
    pop: &Population,
    weights: &[f64],
    attribute: &str,
    schema: &AttributeSchema,
    spec: &MarginalSpec,
) -> Result<Vec<f64>> {
    if weights.len() != pop.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} agents",
            weights.len(),
            pop.len()
        )));
    }
    let j = schema.require_index(attribute)?;
    let d = discretize(pop, schema, spec)?;
    Ok(distribution(&d.codes[j], d.supports[j], Some(weights)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RakeConfig {
    /// Exponent on each ratio, in (0, 1].
    pub damping: f64,
    pub eps: f64,
}

impl Default for RakeConfig {
    fn default() -> Self {
        Self {
            damping: 1.0,
            eps: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RakeResult {
    pub weights: Vec<f64>,
    pub warnings: Vec<String>,
}

fn normalize(w: &mut [f64]) {
    let s: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= s;
    }
}

/// Raking on already discretized codes.
pub fn rake_coded(
    d: &Discretized,
    constraints: &[(usize, &[f64])],
    iterations: usize,
    cfg: RakeConfig,
) -> Result<RakeResult> {
    if !(cfg.damping > 0.0 && cfg.damping <= 1.0) {
        return Err(Error::InvalidArgument(format!("damping must be in (0, 1], got {}", cfg.damping)));
    }
    if d.n == 0 {
        return Err(Error::Data("cannot rake an empty population".into()));
    }
    let mut w = vec![1.0 / d.n as f64; d.n];
    let mut warnings = Vec::new();
    for &(j, target) in constraints {
        let present = distribution(&d.codes[j], d.supports[j], None);
        for (k, (&t, &p)) in target.iter().zip(&present).enumerate() {
            if t > 0.0 && p == 0.0 {
                warnings.push(format!("attribute {j}: target cell {k} has mass {t} but no agents"));
            }
        }
    }
    for _ in 0..iterations {
        for &(j, target) in constraints {
            let p = distribution(&d.codes[j], d.supports[j], Some(&w));
            let ratio: Vec<f64> = target
                .iter()
                .zip(&p)
                .map(|(&t, &q)| ((t + cfg.eps) / (q + cfg.eps)).powf(cfg.damping))
                .collect();
            for (wi, &k) in w.iter_mut().zip(&d.codes[j]) {
                *wi *= ratio[k];
            }
            normalize(&mut w);
        }
    }
    Ok(RakeResult { weights: w, warnings })
}

/// Damped raking from uniform weights, one multiplicative pass per
/// constrained attribute per iteration, renormalizing after every pass.
pub fn rake(
    pop: &Population,
    schema: &AttributeSchema,
    spec: &MarginalSpec,
    targets: &CalibrationTargets,
    iterations: usize,
    cfg: RakeConfig,
) -> Result<RakeResult> {
    let constraints = targets.resolve(schema, spec)?;
    let d = discretize(pop, schema, spec)?;
    let mut r = rake_coded(&d, &constraints, iterations, cfg)?;
    for msg in &mut r.warnings {
        for &(j, _) in &constraints {
            let prefix = format!("attribute {j}:");
            if msg.starts_with(&prefix) {
                *msg = msg.replacen(&prefix, &format!("attribute `{}`:", schema.spec(j).name), 1);
            }
        }
    }
    Ok(r)
}

/// Largest absolute gap between weighted and target marginals.
pub fn max_constrained_deviation(
    pop: &Population,
    weights: &[f64],
    schema: &AttributeSchema,
    spec: &MarginalSpec,
    targets: &CalibrationTargets,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (name, t) in targets.iter() {
        let p = weighted_marginal(pop, weights, name, schema, spec)?;
        if p.len() != t.len() {
            return Err(Error::Shape(format!("target for `{name}` does not match its support")));
        }
        for (a, b) in p.iter().zip(t) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub level: String,
    pub iterations: usize,
    pub srmse_m_weighted: f64,
    pub srmse_b_weighted: f64,
    pub ess: f64,
}

/// Rake at each level and score the weighted population against
/// `reference`. Bivariate tables of every pair share the same global
/// weights.
pub fn calibration_sweep(
    gen: &Population,
    reference: &Population,
    schema: &AttributeSchema,
    spec: &MarginalSpec,
    targets: &CalibrationTargets,
    levels: &[usize],
    cfg: RakeConfig,
) -> Result<Vec<SweepRow>> {
    if levels.first() != Some(&0) || levels.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument(
            "levels must be ascending and start at 0".into(),
        ));
    }
    let constraints = targets.resolve(schema, spec)?;
    let dg = discretize(gen, schema, spec)?;
    let dr = discretize(reference, schema, spec)?;
    levels
        .iter()
        .enumerate()
        .map(|(i, &iters)| {
            let w = rake_coded(&dg, &constraints, iters, cfg)?.weights;
            let (m, _) = srmse_m_coded(&dg, &dr, Some(&w))?;
            let (b, _) = srmse_b_coded(&dg, &dr, Some(&w))?;
            Ok(SweepRow {
                level: format!("L{i}"),
                iterations: iters,
                srmse_m_weighted: m,
                srmse_b_weighted: b,
                ess: ess(&w)?,
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    crate::gan::write_log_csv(rows, path)
}
