//! Differentiable univariate marginal estimators and the marginal
//! regularization loss.
//!
//! Categorical marginals are column means of (soft) one-hot blocks.
//! Numerical marginals use a Gaussian-kernel soft histogram over fixed bin
//! centers fitted on reference data. Bin centers are stored in raw attribute
//! units; the training-time loss converts them to the standardized space the
//! generators emit.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::population::{Column, Population};
use crate::schema::{AttributeKind, AttributeSchema};

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Bin layout and reference distribution of one attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableMarginal {
    pub name: String,
    pub kind: AttributeKind,
    /// Reference probabilities over categories or bins.
    pub reference: Vec<f64>,
    /// Sorted bin centers (numerical attributes only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub centers: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    pub weight: f64,
}

impl VariableMarginal {
    /// Number of categories or bins.
    pub fn support(&self) -> usize {
        self.reference.len()
    }

    /// Index of the nearest bin center; ties go to the lower index.
    pub fn bin_of(&self, x: f64) -> usize {
        nearest_center(&self.centers, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalSpec {
    pub variables: Vec<VariableMarginal>,
}

/// Bin centers and bandwidth.
#[derive(Clone, Debug, PartialEq)]
pub struct Bins {
    pub centers: Vec<f64>,
    pub sigma: f64,
    pub warnings: Vec<String>,
}

impl MarginalSpec {
    /// Fit bins and reference marginals on `reference` (the training split).
    pub fn fit(schema: &AttributeSchema, reference: &Population, bins: usize) -> Result<Self> {
        reference.validate(schema)?;
        if reference.is_empty() {
            return Err(Error::Data("reference population is empty".into()));
        }
        let variables = schema
            .specs()
            .iter()
            .enumerate()
            .map(|(j, spec)| match reference.column(j) {
                Column::Categorical(codes) => {
                    let mut p = vec![0.0; spec.categories.len()];
                    for &k in codes {
                        p[k] += 1.0;
                    }
                    let n = codes.len() as f64;
                    p.iter_mut().for_each(|x| *x /= n);
                    Ok(VariableMarginal {
                        name: spec.name.clone(),
                        kind: AttributeKind::Categorical,
                        reference: p,
                        centers: Vec::new(),
                        sigma: None,
                        weight: 1.0,
                    })
                }
                Column::Numerical(values) => {
                    let b = fit_bins(values, bins).map_err(|e| match e {
                        Error::Data(msg) => Error::Data(format!("attribute `{}`: {msg}", spec.name)),
                        other => other,
                    })?;
                    for w in &b.warnings {
                        log::warn!("attribute `{}`: {w}", spec.name);
                    }
                    let reference = soft_histogram(values, &b.centers, b.sigma);
                    Ok(VariableMarginal {
                        name: spec.name.clone(),
                        kind: AttributeKind::Numerical,
                        reference,
                        centers: b.centers,
                        sigma: Some(b.sigma),
                        weight: 1.0,
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { variables })
    }

    pub fn variable(&self, name: &str) -> Option<&VariableMarginal> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn check_schema(&self, schema: &AttributeSchema) -> Result<()> {
        if self.variables.len() != schema.len() {
            return Err(Error::Shape(format!(
                "marginal spec covers {} variables, schema has {}",
                self.variables.len(),
                schema.len()
            )));
        }
        for (v, s) in self.variables.iter().zip(schema.specs()) {
            if v.name != s.name || v.kind != s.kind {
                return Err(Error::Shape(format!(
                    "marginal spec variable `{}` does not match schema attribute `{}`",
                    v.name, s.name
                )));
            }
            if s.is_categorical() && v.support() != s.categories.len() {
                return Err(Error::Shape(format!(
                    "marginal spec for `{}` has {} categories, schema has {}",
                    v.name,
                    v.support(),
                    s.categories.len()
                )));
            }
        }
        Ok(())
    }
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Centers at the midpoints of `k` equal-mass quantile intervals and a
/// bandwidth of half the mean adjacent spacing. Duplicate centers are merged.
pub fn fit_bins(values: &[f64], k: usize) -> Result<Bins> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {k}")));
    }
    if values.is_empty() {
        return Err(Error::Data("cannot fit bins on an empty sample".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::Data("degenerate continuous variable".into()));
    }
    let edges: Vec<f64> = (0..=k).map(|i| quantile_sorted(&sorted, i as f64 / k as f64)).collect();
    let raw: Vec<f64> = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let mut centers: Vec<f64> = Vec::with_capacity(k);
    for c in raw {
        if centers.last().is_none_or(|&last| c > last) {
            centers.push(c);
        }
    }
    let mut warnings = Vec::new();
    if centers.len() < k {
        warnings.push(format!(
            "collapsed duplicate bin centers: {k} requested, {} kept",
            centers.len()
        ));
    }
    let spacing = (centers[centers.len() - 1] - centers[0]) / (centers.len() - 1) as f64;
    Ok(Bins {
        sigma: 0.5 * spacing,
        centers,
        warnings,
    })
}

pub fn nearest_center(centers: &[f64], x: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, &c) in centers.iter().enumerate() {
        let d = (x - c).abs();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Column means of simplex rows.
pub fn categorical_marginal(block: ArrayView2<f64>) -> Result<Vec<f64>> {
    const TOL: f64 = 1e-5;
    if block.nrows() == 0 {
        return Err(Error::InvalidArgument("empty block".into()));
    }
    for (i, row) in block.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if row.iter().any(|&x| x < -TOL) || (sum - 1.0).abs() > TOL {
            return Err(Error::InvalidArgument(format!(
                "row {i} is not on the probability simplex (sum {sum})"
            )));
        }
    }
    let n = block.nrows() as f64;
    Ok(block.columns().into_iter().map(|c| c.sum() / n).collect())
}

/// Kernel weights of one value over the centers, normalized to sum to 1.
fn soft_assign(x: f64, centers: &[f64], sigma: f64) -> Vec<f64> {
    let logits: Vec<f64> = centers
        .iter()
        .map(|c| -(x - c).powi(2) / (2.0 * sigma * sigma))
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Batch average of per-value Gaussian-kernel softmax assignments.
pub fn soft_histogram(values: &[f64], centers: &[f64], sigma: f64) -> Vec<f64> {
    let mut p = vec![0.0; centers.len()];
    for &x in values {
        for (acc, w) in p.iter_mut().zip(soft_assign(x, centers, sigma)) {
            *acc += w;
        }
    }
    let n = values.len().max(1) as f64;
    p.iter_mut().for_each(|x| *x /= n);
    p
}

/// Hard nearest-center histogram.
pub fn hard_histogram(values: &[f64], centers: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; centers.len()];
    for &x in values {
        p[nearest_center(centers, x)] += 1.0;
    }
    let n = values.len().max(1) as f64;
    p.iter_mut().for_each(|x| *x /= n);
    p
}

/// Per-variable losses and their aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalLoss {
    pub total: f64,
    pub categorical: f64,
    pub numerical: f64,
    pub per_variable: Vec<f64>,
}

fn variable_term(p_hat: &[f64], p: &[f64], eps: f64) -> Result<f64> {
    if p_hat.len() != p.len() {
        return Err(Error::Shape(format!(
            "support size mismatch: generated {} vs reference {}",
            p_hat.len(),
            p.len()
        )));
    }
    Ok((p_hat.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + eps).sqrt())
}

/// Generated marginals of every variable from an encoded (soft) batch.
pub fn batch_marginals(
    batch: ArrayView2<f64>,
    schema: &AttributeSchema,
    spec: &MarginalSpec,
) -> Result<Vec<Vec<f64>>> {
    spec.check_schema(schema)?;
    if batch.ncols() != schema.encoded_width() {
        return Err(Error::Shape("batch width does not match schema".into()));
    }
    schema
        .blocks()
        .iter()
        .zip(&spec.variables)
        .map(|(b, v)| {
            let cols = batch.slice(ndarray::s![.., b.start..b.start + b.width]);
            match b.kind {
                AttributeKind::Categorical => categorical_marginal(cols),
                AttributeKind::Numerical => {
                    let (centers, sigma) = standardized_bins(schema, b.attr, v)?;
                    let values: Vec<f64> = cols.column(0).to_vec();
                    Ok(soft_histogram(&values, &centers, sigma))
                }
            }
        })
        .collect()
}

fn standardized_bins(
    schema: &AttributeSchema,
    attr: usize,
    v: &VariableMarginal,
) -> Result<(Vec<f64>, f64)> {
    let s = schema.spec(attr);
    let (Some(mean), Some(std)) = (s.mean, s.std) else {
        return Err(Error::Schema(format!("attribute `{}` has no fitted statistics", s.name)));
    };
    let sigma = v
        .sigma
        .ok_or_else(|| Error::Shape(format!("variable `{}` has no bandwidth", v.name)))?;
    Ok((v.centers.iter().map(|c| (c - mean) / std).collect(), sigma / std))
}

/// `mean_j w_j sqrt(Σ_k (p̂_jk − p_jk)² + eps)` over an encoded batch.
pub fn marginal_loss(
    batch: ArrayView2<f64>,
    schema: &AttributeSchema,
    spec: &MarginalSpec,
    eps: f64,
) -> Result<MarginalLoss> {
    let p_hat = batch_marginals(batch, schema, spec)?;
    let nvar = spec.variables.len() as f64;
    let mut out = MarginalLoss {
        total: 0.0,
        categorical: 0.0,
        numerical: 0.0,
        per_variable: Vec::with_capacity(p_hat.len()),
    };
    for (ph, v) in p_hat.iter().zip(&spec.variables) {
        let term = variable_term(ph, &v.reference, eps)?;
        let weighted = v.weight * term / nvar;
        match v.kind {
            AttributeKind::Categorical => out.categorical += weighted,
            AttributeKind::Numerical => out.numerical += weighted,
        }
        out.per_variable.push(term);
    }
    out.total = out.categorical + out.numerical;
    Ok(out)
}

/// Constant pieces of the loss graph for one schema, prepared once per run.
#[derive(Clone, Debug)]
pub struct MarginalTargets {
    terms: Vec<TargetTerm>,
    nvar: f64,
    eps: f64,
}

#[derive(Clone, Debug)]
struct TargetTerm {
    start: usize,
    width: usize,
    kind: AttributeKind,
    weight: f64,
    reference: Array2<f64>,
    centers: Array2<f64>,
    inv_two_sigma2: f64,
}

impl MarginalTargets {
    pub fn new(schema: &AttributeSchema, spec: &MarginalSpec, eps: f64) -> Result<Self> {
        spec.check_schema(schema)?;
        let terms = schema
            .blocks()
            .iter()
            .zip(&spec.variables)
            .map(|(b, v)| {
                let reference = Array2::from_shape_vec((1, v.support()), v.reference.clone())
                    .expect("row vector");
                Ok(match b.kind {
                    AttributeKind::Categorical => TargetTerm {
                        start: b.start,
                        width: b.width,
                        kind: b.kind,
                        weight: v.weight,
                        reference,
                        centers: Array2::zeros((1, 0)),
                        inv_two_sigma2: 0.0,
                    },
                    AttributeKind::Numerical => {
                        let (centers, sigma) = standardized_bins(schema, b.attr, v)?;
                        TargetTerm {
                            start: b.start,
                            width: 1,
                            kind: b.kind,
                            weight: v.weight,
                            centers: Array2::from_shape_vec((1, centers.len()), centers)
                                .expect("row vector"),
                            reference,
                            inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                        }
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            terms,
            nvar: spec.variables.len() as f64,
            eps,
        })
    }

    /// Differentiable loss of an encoded batch on a tape. Returns
    /// `(categorical part, numerical part)`; their sum is the full loss.
    pub fn loss<'t>(&self, batch: Var<'t>) -> (Var<'t>, Var<'t>) {
        let tape: &'t Tape = batch.tape();
        let rows = batch.shape().0;
        let mut cat: Option<Var<'t>> = None;
        let mut num: Option<Var<'t>> = None;
        for t in &self.terms {
            let cols = batch.slice_cols(t.start, t.start + t.width);
            let p_hat = match t.kind {
                AttributeKind::Categorical => cols.mean_cols(),
                AttributeKind::Numerical => {
                    let k = t.centers.ncols();
                    let c = tape.constant(t.centers.clone()).broadcast_rows(rows);
                    let d = cols.broadcast_cols(k) - c;
                    d.square().scale(-t.inv_two_sigma2).softmax_rows().mean_cols()
                }
            };
            let diff = p_hat - tape.constant(t.reference.clone());
            let term = diff.square().sum_all().add_scalar(self.eps).sqrt().scale(t.weight / self.nvar);
            let slot = match t.kind {
                AttributeKind::Categorical => &mut cat,
                AttributeKind::Numerical => &mut num,
            };
            *slot = Some(match *slot {
                Some(acc) => acc + term,
                None => term,
            });
        }
        (
            cat.unwrap_or_else(|| tape.scalar(0.0)),
            num.unwrap_or_else(|| tape.scalar(0.0)),
        )
    }
}
