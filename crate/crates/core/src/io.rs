//! Dataset ingestion and the synthetic ground-truth generator.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::StructuralBasis;
use crate::error::{Error, Result};
use crate::graph::{self, CausalGraph, GraphSpec};
use crate::linalg;

/// Column-role binding for a CSV file. `features` maps graph node names to columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub protected: String,
    pub target: String,
    pub features: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub protected_name: String,
    pub target_name: String,
    /// Feature names in graph feature order.
    pub feature_names: Vec<String>,
    pub protected: Vec<f64>,
    /// Row-major `n x m` feature values.
    pub features: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    /// Statistics used for z-scoring, per feature; `None` when values are raw.
    pub feature_stats: Option<Vec<ColumnStats>>,
    pub dropped_rows: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.protected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protected.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Rows selected by `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            protected_name: self.protected_name.clone(),
            target_name: self.target_name.clone(),
            feature_names: self.feature_names.clone(),
            protected: idx.iter().map(|&i| self.protected[i]).collect(),
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            target: idx.iter().map(|&i| self.target[i]).collect(),
            feature_stats: self.feature_stats.clone(),
            dropped_rows: 0,
        }
    }

    pub fn with_protected_flipped(&self) -> Dataset {
        let mut out = self.clone();
        for a in &mut out.protected {
            *a = 1.0 - *a;
        }
        out
    }

    /// Z-scores each feature column (population standard deviation). Columns with
    /// zero spread are only centred.
    pub fn standardized(&self) -> Dataset {
        let n = self.len() as f64;
        let m = self.num_features();
        let stats: Vec<ColumnStats> = (0..m)
            .map(|j| {
                let mean = self.features.iter().map(|r| r[j]).sum::<f64>() / n;
                let var = self.features.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
                let std = if var > 0.0 { var.sqrt() } else { 1.0 };
                ColumnStats { mean, std }
            })
            .collect();
        let mut out = self.clone();
        for row in &mut out.features {
            for (v, s) in row.iter_mut().zip(&stats) {
                *v = (*v - s.mean) / s.std;
            }
        }
        out.feature_stats = Some(stats);
        out
    }

    /// Writes `protected, features..., target` with a header, using the shortest
    /// representation that parses back to the same `f64`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![self.protected_name.clone()];
        header.extend(self.feature_names.iter().cloned());
        header.push(self.target_name.clone());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.protected[i].to_string()];
            rec.extend(self.features[i].iter().map(|v| v.to_string()));
            rec.push(self.target[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Schema matching the layout produced by [`Dataset::write_csv`].
    pub fn identity_schema(&self) -> Schema {
        Schema {
            protected: self.protected_name.clone(),
            target: self.target_name.clone(),
            features: self
                .feature_names
                .iter()
                .map(|n| (n.clone(), n.clone()))
                .collect(),
        }
    }
}

fn parse_cell(raw: &str) -> Option<f64> {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Loads a CSV with a header row. Rows with a missing or unparseable value in any
/// bound column are dropped; the count is kept in `dropped_rows`.
pub fn load_csv(
    path: impl AsRef<Path>,
    schema: &Schema,
    graph: &CausalGraph,
    standardize: bool,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let a_col = column(&schema.protected)?;
    let y_col = column(&schema.target)?;
    let mut x_cols = Vec::with_capacity(graph.num_features());
    for node in graph.features() {
        let col_name = schema
            .features
            .get(node)
            .ok_or_else(|| Error::config(format!("schema.features.{node}"), "no column bound"))?;
        x_cols.push(column(col_name)?);
    }

    let mut protected = Vec::new();
    let mut features = Vec::new();
    let mut target = Vec::new();
    let mut dropped = 0;
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let get = |c: usize| rec.get(c).and_then(parse_cell);
        let (Some(a), Some(y)) = (get(a_col), get(y_col)) else {
            dropped += 1;
            continue;
        };
        let xs: Option<Vec<f64>> = x_cols.iter().map(|&c| get(c)).collect();
        let Some(xs) = xs else {
            dropped += 1;
            continue;
        };
        if a != 0.0 && a != 1.0 {
            return Err(Error::NonBinaryProtected {
                column: schema.protected.clone(),
                row: row + 1,
                value: a,
            });
        }
        protected.push(a);
        features.push(xs);
        target.push(y);
    }
    if protected.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }
    let data = Dataset {
        protected_name: schema.protected.clone(),
        target_name: schema.target.clone(),
        feature_names: graph.features().to_vec(),
        protected,
        features,
        target,
        feature_stats: None,
        dropped_rows: dropped,
    };
    Ok(if standardize {
        Dataset {
            dropped_rows: dropped,
            ..data.standardized()
        }
    } else {
        data
    })
}

/// Linear outcome model `y = intercept + protected * a + sum_j features_j * x_j + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub intercept: f64,
    pub protected: f64,
    pub features: Vec<f64>,
    pub noise_sd: f64,
}

/// Ground truth for a synthetic additive noise model with correlated errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub graph: GraphSpec,
    /// Polynomial degree of each structural equation, in feature order.
    pub degrees: Vec<usize>,
    /// Stacked structural weights in the layout of [`StructuralBasis`].
    pub weights: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Row-major `m x m` error correlation matrix.
    pub correlation: Vec<Vec<f64>>,
    pub target: TargetSpec,
    pub n: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Law-school shaped fixture: `A -> G`, `A -> L`, `G -> L`, linear equations,
    /// error correlation `p`.
    pub fn law_school(n: usize, p: f64, seed: u64) -> Self {
        SyntheticSpec {
            graph: GraphSpec::new("A", &["G", "L"], &["A->G", "A->L", "G->L"]),
            degrees: vec![1, 1],
            weights: vec![0.5, -1.0, 0.0, -0.8, 0.7],
            sigmas: vec![1.0, 0.8],
            correlation: vec![vec![1.0, p], vec![p, 1.0]],
            target: TargetSpec {
                intercept: 0.3,
                protected: 0.0,
                features: vec![0.6, 0.5],
                noise_sd: 0.5,
            },
            n,
            seed,
        }
    }

    /// Staff-survey shaped fixture: `O -> M -> J` with `A` feeding all three and every
    /// pair of errors correlated at `p`.
    pub fn nhs(n: usize, p: f64, seed: u64) -> Self {
        SyntheticSpec {
            graph: GraphSpec::new(
                "A",
                &["O", "M", "J"],
                &["A->O", "A->M", "A->J", "O->M", "O->J", "M->J"],
            ),
            degrees: vec![1, 1, 1],
            weights: vec![0.2, -0.7, 0.0, -0.5, 0.6, 0.1, -0.4, 0.3, 0.5],
            sigmas: vec![1.0, 0.9, 0.8],
            correlation: vec![vec![1.0, p, p], vec![p, 1.0, p], vec![p, p, 1.0]],
            target: TargetSpec {
                intercept: 0.0,
                protected: 0.0,
                features: vec![0.4, 0.3, 0.5],
                noise_sd: 0.5,
            },
            n,
            seed,
        }
    }
}

/// Samples a dataset from the ground-truth model. Values are left unstandardized.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n == 0 {
        return Err(Error::InvalidConfig("synthetic n must be positive".into()));
    }
    let graph = graph::validate(&spec.graph)?;
    let m = graph.num_features();
    let basis = StructuralBasis::new(&graph, &spec.degrees, true)?;
    let check = |what: &str, expected: usize, got: usize| {
        if expected == got {
            Ok(())
        } else {
            Err(Error::config(
                format!("synthetic.{what}"),
                format!("expected {expected} entries, got {got}"),
            ))
        }
    };
    check("weights", basis.dim(), spec.weights.len())?;
    check("sigmas", m, spec.sigmas.len())?;
    check("correlation", m, spec.correlation.len())?;
    check("target.features", m, spec.target.features.len())?;
    for row in &spec.correlation {
        check("correlation row", m, row.len())?;
    }
    if spec.sigmas.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::config("synthetic.sigmas", "must be non-negative"));
    }
    let p_true = DMatrix::from_fn(m, m, |r, c| spec.correlation[r][c]);
    let report = crate::correlation::psd_check(&p_true)?;
    if !report.is_psd {
        return Err(Error::NotPositiveDefinite { jitter: 0.0 });
    }
    let chol = linalg::cholesky_with_jitter(&p_true)?;
    let lower = chol.factor.l();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut protected = Vec::with_capacity(spec.n);
    let mut features = Vec::with_capacity(spec.n);
    let mut target = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let a = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let z: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let mut x = vec![0.0; m];
        for j in 0..m {
            let corr: f64 = (0..=j).map(|k| lower[(j, k)] * z[k]).sum();
            let eps = spec.sigmas[j] * corr;
            let phi = basis.node_features(j, a, &x);
            let mean: f64 = phi
                .iter()
                .zip(&spec.weights[basis.block(j)])
                .map(|(p, w)| p * w)
                .sum();
            x[j] = mean + eps;
        }
        let noise: f64 = rng.sample(StandardNormal);
        let y = spec.target.intercept
            + spec.target.protected * a
            + x.iter().zip(&spec.target.features).map(|(v, b)| v * b).sum::<f64>()
            + spec.target.noise_sd * noise;
        protected.push(a);
        features.push(x);
        target.push(y);
    }
    Ok(Dataset {
        protected_name: graph.protected().to_string(),
        target_name: "Y".to_string(),
        feature_names: graph.features().to_vec(),
        protected,
        features,
        target,
        feature_stats: None,
        dropped_rows: 0,
    })
}
