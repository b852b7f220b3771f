//! Small populations drawn from a known discrete Bayesian factorization.
//!
//! Every node is either categorical or a count over a finite support, and
//! parents must be earlier categorical nodes, so all marginals and pairwise
//! tables can be computed exactly by enumeration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::{Column, Population};
use crate::schema::{AttributeGroup, AttributeSchema, AttributeSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ToyKind {
    Categorical { categories: Vec<String> },
    /// Numerical attribute over a finite set of values.
    Count { values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyNode {
    pub name: String,
    pub group: AttributeGroup,
    pub kind: ToyKind,
    #[serde(default)]
    pub parents: Vec<String>,
    /// One probability row per parent configuration (mixed radix, first
    /// parent most significant).
    pub table: Vec<Vec<f64>>,
}

impl ToyNode {
    fn support(&self) -> usize {
        match &self.kind {
            ToyKind::Categorical { categories } => categories.len(),
            ToyKind::Count { values } => values.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyJointSpec {
    pub nodes: Vec<ToyNode>,
}

impl ToyJointSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("toy spec has no nodes".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let mut configs = 1usize;
            for p in &node.parents {
                let pi = self.nodes[..i]
                    .iter()
                    .position(|n| &n.name == p)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "node `{}`: parent `{p}` must be an earlier node",
                            node.name
                        ))
                    })?;
                match &self.nodes[pi].kind {
                    ToyKind::Categorical { categories } => configs *= categories.len(),
                    ToyKind::Count { .. } => {
                        return Err(Error::InvalidArgument(format!(
                            "node `{}`: parent `{p}` must be categorical",
                            node.name
                        )))
                    }
                }
            }
            if node.table.len() != configs {
                return Err(Error::InvalidArgument(format!(
                    "node `{}`: expected {configs} table rows, found {}",
                    node.name,
                    node.table.len()
                )));
            }
            for (r, row) in node.table.iter().enumerate() {
                if row.len() != node.support() {
                    return Err(Error::InvalidArgument(format!(
                        "node `{}` row {r}: expected {} probabilities",
                        node.name,
                        node.support()
                    )));
                }
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "node `{}` row {r}: probabilities must be non-negative and sum to 1 (sum {sum})",
                        node.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<AttributeSchema> {
        AttributeSchema::new(
            self.nodes
                .iter()
                .map(|n| match &n.kind {
                    ToyKind::Categorical { categories } => {
                        let refs: Vec<&str> = categories.iter().map(String::as_str).collect();
                        AttributeSpec::categorical(&n.name, n.group, &refs)
                    }
                    ToyKind::Count { values } => AttributeSpec::numerical(
                        &n.name,
                        n.group,
                        values.iter().all(|v| v.fract() == 0.0),
                    ),
                })
                .collect(),
        )
    }

    fn parent_indices(&self, node: &ToyNode) -> Vec<usize> {
        node.parents
            .iter()
            .map(|p| self.nodes.iter().position(|n| &n.name == p).unwrap())
            .collect()
    }

    fn config_row(&self, parents: &[usize], assignment: &[usize]) -> usize {
        parents.iter().fold(0, |acc, &p| acc * self.nodes[p].support() + assignment[p])
    }

    /// `n` i.i.d. agents.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Population> {
        self.validate()?;
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        let schema = self.schema()?;
        let parents: Vec<Vec<usize>> = self.nodes.iter().map(|nd| self.parent_indices(nd)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut codes = vec![vec![0usize; n]; self.nodes.len()];
        let mut assignment = vec![0usize; self.nodes.len()];
        for i in 0..n {
            for (j, node) in self.nodes.iter().enumerate() {
                let row = &node.table[self.config_row(&parents[j], &assignment)];
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = row.len() - 1;
                for (idx, &p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        k = idx;
                        break;
                    }
                }
                assignment[j] = k;
                codes[j][i] = k;
            }
        }
        let columns = self
            .nodes
            .iter()
            .zip(codes)
            .map(|(node, c)| match &node.kind {
                ToyKind::Categorical { .. } => Column::Categorical(c),
                ToyKind::Count { values } => Column::Numerical(c.into_iter().map(|k| values[k]).collect()),
            })
            .collect();
        Population::new(&schema, columns)
    }

    /// Every full assignment with its probability.
    pub fn enumerate(&self) -> Vec<(Vec<usize>, f64)> {
        let parents: Vec<Vec<usize>> = self.nodes.iter().map(|nd| self.parent_indices(nd)).collect();
        let mut out = vec![(Vec::new(), 1.0)];
        for (j, node) in self.nodes.iter().enumerate() {
            let mut next = Vec::new();
            for (assign, p) in &out {
                let mut padded = assign.clone();
                padded.resize(self.nodes.len(), 0);
                let row = &node.table[self.config_row(&parents[j], &padded)];
                for (k, &pk) in row.iter().enumerate() {
                    if pk > 0.0 {
                        let mut a = assign.clone();
                        a.push(k);
                        next.push((a, p * pk));
                    }
                }
            }
            out = next;
        }
        out
    }

    /// Exact marginal of node `name` over its support order.
    pub fn marginal(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.index(name)?;
        let mut m = vec![0.0; self.nodes[j].support()];
        for (a, p) in self.enumerate() {
            m[a[j]] += p;
        }
        Ok(m)
    }

    /// Exact joint of two nodes as a `support(a) × support(b)` table.
    pub fn joint(&self, a: &str, b: &str) -> Result<Vec<Vec<f64>>> {
        let (ja, jb) = (self.index(a)?, self.index(b)?);
        let mut t = vec![vec![0.0; self.nodes[jb].support()]; self.nodes[ja].support()];
        for (asg, p) in self.enumerate() {
            t[asg[ja]][asg[jb]] += p;
        }
        Ok(t)
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown toy node `{name}`")))
    }

    /// One fair binary attribute.
    pub fn fair_coin() -> Self {
        Self {
            nodes: vec![cat("Coin", AttributeGroup::Demographic, &["Heads", "Tails"], &[], vec![vec![0.5, 0.5]])],
        }
    }

    /// `B` is an exact copy of `A`.
    pub fn copy_pair() -> Self {
        Self {
            nodes: vec![
                cat("A", AttributeGroup::Demographic, &["x", "y", "z"], &[], vec![vec![0.2, 0.5, 0.3]]),
                cat(
                    "B",
                    AttributeGroup::Demographic,
                    &["x", "y", "z"],
                    &["A"],
                    vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
                ),
            ],
        }
    }

    /// Three categorical attributes in a chain A → B → C.
    pub fn chain3() -> Self {
        Self {
            nodes: vec![
                cat("Region", AttributeGroup::Demographic, &["Urban", "Suburban", "Rural"], &[], vec![vec![0.5, 0.3, 0.2]]),
                cat(
                    "Employment",
                    AttributeGroup::Demographic,
                    &["Employed", "Not_employed"],
                    &["Region"],
                    vec![vec![0.8, 0.2], vec![0.65, 0.35], vec![0.5, 0.5]],
                ),
                cat(
                    "Income",
                    AttributeGroup::Demographic,
                    &["Low", "Medium", "High"],
                    &["Employment"],
                    vec![vec![0.2, 0.5, 0.3], vec![0.7, 0.25, 0.05]],
                ),
            ],
        }
    }

    /// Three categorical and two count attributes with dependence between
    /// them; `Trips_of_PublicTransport` is zero-inflated.
    pub fn mixed5() -> Self {
        let mut spec = Self::chain3();
        let ages: Vec<f64> = (18..=77).map(f64::from).collect();
        // Employed: ages concentrated in 25..64; not employed: young and old.
        let employed: Vec<f64> = ages
            .iter()
            .map(|&a| if (25.0..65.0).contains(&a) { 3.0 } else { 1.0 })
            .collect();
        let not_employed: Vec<f64> = ages
            .iter()
            .map(|&a| if a < 25.0 || a >= 65.0 { 3.0 } else { 0.5 })
            .collect();
        spec.nodes.push(ToyNode {
            name: "Age".into(),
            group: AttributeGroup::Demographic,
            kind: ToyKind::Count { values: ages },
            parents: vec!["Employment".into()],
            table: vec![normalize(employed), normalize(not_employed)],
        });
        spec.nodes.push(ToyNode {
            name: "Trips_of_PublicTransport".into(),
            group: AttributeGroup::Behavioral,
            kind: ToyKind::Count {
                values: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            },
            parents: vec!["Region".into(), "Employment".into()],
            table: vec![
                vec![0.35, 0.10, 0.35, 0.12, 0.08],
                vec![0.60, 0.10, 0.20, 0.07, 0.03],
                vec![0.55, 0.10, 0.25, 0.06, 0.04],
                vec![0.75, 0.08, 0.12, 0.03, 0.02],
                vec![0.85, 0.05, 0.08, 0.01, 0.01],
                vec![0.90, 0.04, 0.05, 0.01, 0.00],
            ],
        });
        spec
    }
}

fn cat(name: &str, group: AttributeGroup, categories: &[&str], parents: &[&str], table: Vec<Vec<f64>>) -> ToyNode {
    ToyNode {
        name: name.into(),
        group,
        kind: ToyKind::Categorical {
            categories: categories.iter().map(|c| c.to_string()).collect(),
        },
        parents: parents.iter().map(|p| p.to_string()).collect(),
        table,
    }
}

fn normalize(w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

pub fn make_toy_population(spec: &ToyJointSpec, n: usize, seed: u64) -> Result<Population> {
    spec.sample(n, seed)
}
