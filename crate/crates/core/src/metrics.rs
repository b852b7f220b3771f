//! Distributional fidelity metrics: SRMSE over univariate and bivariate
//! tables, tuple-membership precision/recall/F1, and effective sample size.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marginal::MarginalSpec;
use crate::population::{Column, Population};
use crate::schema::AttributeSchema;

/// `sqrt(mean_k (p̂_k − p_k)²) / mean_k p_k`.
pub fn srmse(p_hat: &[f64], p: &[f64]) -> Result<f64> {
    if p_hat.len() != p.len() || p.is_empty() {
        return Err(Error::Shape(format!(
            "srmse needs equal non-empty supports, got {} and {}",
            p_hat.len(),
            p.len()
        )));
    }
    let n = p.len() as f64;
    let denom = p.iter().sum::<f64>() / n;
    if denom <= 0.0 {
        return Err(Error::InvalidArgument("reference distribution has zero mass".into()));
    }
    let mse = p_hat.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    Ok(mse.sqrt() / denom)
}

/// Each attribute as small integer codes: category index, or nearest-bin
/// index of the raw value for numerical attributes.
#[derive(Clone, Debug)]
pub struct Discretized {
    pub codes: Vec<Vec<usize>>,
    pub supports: Vec<usize>,
    pub n: usize,
}

pub fn discretize(pop: &Population, schema: &AttributeSchema, spec: &MarginalSpec) -> Result<Discretized> {
    spec.check_schema(schema)?;
    pop.validate(schema)?;
    let codes = spec
        .variables
        .iter()
        .enumerate()
        .map(|(j, v)| match pop.column(j) {
            Column::Categorical(c) => c.clone(),
            Column::Numerical(x) => x.iter().map(|&x| v.bin_of(x)).collect(),
        })
        .collect();
    Ok(Discretized {
        codes,
        supports: spec.variables.iter().map(|v| v.support()).collect(),
        n: pop.len(),
    })
}

fn check_weights(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::Shape(format!("{} weights for {n} rows", w.len())));
    }
    if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("weights sum to {s}, expected 1")));
    }
    Ok(())
}

/// Empirical (or weighted) distribution of one coded attribute.
pub fn distribution(codes: &[usize], support: usize, weights: Option<&[f64]>) -> Vec<f64> {
    let mut p = vec![0.0; support];
    match weights {
        Some(w) => {
            for (&k, &wi) in codes.iter().zip(w) {
                p[k] += wi;
            }
        }
        None => {
            let inv = 1.0 / codes.len() as f64;
            for &k in codes {
                p[k] += 1.0;
            }
            p.iter_mut().for_each(|x| *x *= inv);
        }
    }
    p
}

/// Joint distribution of two coded attributes, flattened row-major (a, b).
pub fn joint_distribution(a: &[usize], ka: usize, b: &[usize], kb: usize, weights: Option<&[f64]>) -> Vec<f64> {
    let mut p = vec![0.0; ka * kb];
    match weights {
        Some(w) => {
            for ((&x, &y), &wi) in a.iter().zip(b).zip(w) {
                p[x * kb + y] += wi;
            }
        }
        None => {
            for (&x, &y) in a.iter().zip(b) {
                p[x * kb + y] += 1.0;
            }
            let inv = 1.0 / a.len() as f64;
            p.iter_mut().for_each(|x| *x *= inv);
        }
    }
    p
}

fn non_empty(gen: &Discretized, reference: &Discretized) -> Result<()> {
    if gen.n == 0 || reference.n == 0 {
        return Err(Error::Data("populations must be non-empty".into()));
    }
    Ok(())
}

/// Mean SRMSE over attributes, plus the per-attribute values. `weights`
/// reweights the generated rows.
pub fn srmse_m_coded(gen: &Discretized, reference: &Discretized, weights: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
    non_empty(gen, reference)?;
    if let Some(w) = weights {
        check_weights(w, gen.n)?;
    }
    let per: Vec<f64> = (0..gen.codes.len())
        .map(|j| {
            let k = gen.supports[j];
            srmse(
                &distribution(&gen.codes[j], k, weights),
                &distribution(&reference.codes[j], k, None),
            )
        })
        .collect::<Result<_>>()?;
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

/// Mean SRMSE over all unordered attribute pairs, plus `(a, b, value)` per pair.
#[allow(clippy::type_complexity)]
pub fn srmse_b_coded(
    gen: &Discretized,
    reference: &Discretized,
    weights: Option<&[f64]>,
) -> Result<(f64, Vec<(usize, usize, f64)>)> {
    non_empty(gen, reference)?;
    let m = gen.codes.len();
    if m < 2 {
        return Err(Error::InvalidArgument("bivariate SRMSE needs at least two attributes".into()));
    }
    if let Some(w) = weights {
        check_weights(w, gen.n)?;
    }
    let mut per = Vec::with_capacity(m * (m - 1) / 2);
    for a in 0..m {
        for b in a + 1..m {
            let (ka, kb) = (gen.supports[a], gen.supports[b]);
            let ph = joint_distribution(&gen.codes[a], ka, &gen.codes[b], kb, weights);
            let p = joint_distribution(&reference.codes[a], ka, &reference.codes[b], kb, None);
            per.push((a, b, srmse(&ph, &p)?));
        }
    }
    let mean = per.iter().map(|t| t.2).sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

pub fn srmse_m(gen: &Population, reference: &Population, schema: &AttributeSchema, spec: &MarginalSpec) -> Result<f64> {
    Ok(srmse_m_coded(&discretize(gen, schema, spec)?, &discretize(reference, schema, spec)?, None)?.0)
}

pub fn srmse_b(gen: &Population, reference: &Population, schema: &AttributeSchema, spec: &MarginalSpec) -> Result<f64> {
    Ok(srmse_b_coded(&discretize(gen, schema, spec)?, &discretize(reference, schema, spec)?, None)?.0)
}

fn tuples(d: &Discretized, attrs: &[usize]) -> Vec<Vec<usize>> {
    (0..d.n).map(|i| attrs.iter().map(|&j| d.codes[j][i]).collect()).collect()
}

/// Percentages `(precision, recall, f1)` of discretized attribute tuples over
/// `attrs` (all attributes when `None`).
pub fn precision_recall_f1_coded(
    gen: &Discretized,
    reference: &Discretized,
    attrs: Option<&[usize]>,
) -> Result<(f64, f64, f64)> {
    non_empty(gen, reference)?;
    let all: Vec<usize> = (0..gen.codes.len()).collect();
    let attrs = attrs.unwrap_or(&all);
    if let Some(&j) = attrs.iter().find(|&&j| j >= gen.codes.len()) {
        return Err(Error::InvalidArgument(format!("attribute index {j} out of range")));
    }
    let tg = tuples(gen, attrs);
    let tr = tuples(reference, attrs);
    let sg: HashSet<&Vec<usize>> = tg.iter().collect();
    let sr: HashSet<&Vec<usize>> = tr.iter().collect();
    let precision = 100.0 * tg.iter().filter(|t| sr.contains(t)).count() as f64 / tg.len() as f64;
    let recall = 100.0 * tr.iter().filter(|t| sg.contains(t)).count() as f64 / tr.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f1))
}

pub fn precision_recall_f1(
    gen: &Population,
    reference: &Population,
    schema: &AttributeSchema,
    spec: &MarginalSpec,
) -> Result<(f64, f64, f64)> {
    precision_recall_f1_coded(&discretize(gen, schema, spec)?, &discretize(reference, schema, spec)?, None)
}

/// `1 / Σ w_i²` for normalized non-negative weights.
pub fn ess(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("empty weight vector".into()));
    }
    check_weights(weights, weights.len())?;
    if weights.iter().all(|&w| w == weights[0]) {
        // Uniform weights: exactly n, free of rounding in the sum of squares.
        return Ok(weights.len() as f64);
    }
    Ok(1.0 / weights.iter().map(|w| w * w).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableScore {
    pub attribute: String,
    pub srmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub a: String,
    pub b: String,
    pub srmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub srmse_m: f64,
    pub srmse_b: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ess: Option<f64>,
    pub per_variable: Vec<VariableScore>,
    pub per_pair: Vec<PairScore>,
}

impl MetricReport {
    pub const CSV_HEADER: [&'static str; 6] = ["srmse_m", "srmse_b", "precision", "recall", "f1", "ess"];

    pub fn csv_row(&self) -> Vec<String> {
        let f = |x: f64| format!("{x}");
        vec![
            f(self.srmse_m),
            f(self.srmse_b),
            f(self.precision),
            f(self.recall),
            f(self.f1),
            self.ess.map(f).unwrap_or_default(),
        ]
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(Self::CSV_HEADER)?;
        w.write_record(self.csv_row())?;
        w.flush().map_err(|e| Error::Io {
            path: path.as_ref().to_path_buf(),
            source: e,
        })?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Every metric of a generated population against a reference. `weights`
/// (over generated rows) enter SRMSE and ESS; tuple membership ignores them.
pub fn evaluate(
    gen: &Population,
    reference: &Population,
    schema: &AttributeSchema,
    spec: &MarginalSpec,
    weights: Option<&[f64]>,
    tuple_attrs: Option<&[usize]>,
) -> Result<MetricReport> {
    let g = discretize(gen, schema, spec)?;
    let r = discretize(reference, schema, spec)?;
    let (m, per_v) = srmse_m_coded(&g, &r, weights)?;
    let (b, per_p) = if schema.len() >= 2 {
        srmse_b_coded(&g, &r, weights)?
    } else {
        (0.0, Vec::new())
    };
    let (precision, recall, f1) = precision_recall_f1_coded(&g, &r, tuple_attrs)?;
    let names = schema.names();
    Ok(MetricReport {
        srmse_m: m,
        srmse_b: b,
        precision,
        recall,
        f1,
        ess: weights.map(ess).transpose()?,
        per_variable: names
            .iter()
            .zip(per_v)
            .map(|(n, s)| VariableScore {
                attribute: n.clone(),
                srmse: s,
            })
            .collect(),
        per_pair: per_p
            .into_iter()
            .map(|(a, b, s)| PairScore {
                a: names[a].clone(),
                b: names[b].clone(),
                srmse: s,
            })
            .collect(),
    })
}
