//! Declarative run configuration.
//!
//! A run is described by one JSON document. Every optional field has a default, and
//! the parsed value (with defaults filled in) is what gets written back into the run
//! summary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphSpec, PathSpecMask};
use crate::gridtool::SweepMode;
use crate::io::{Schema, SyntheticSpec};
use crate::maxcfu::OptimizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        schema: Schema,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Tool {
    Grid,
    Maxcfu,
    Baselines,
    #[default]
    All,
}

impl Tool {
    pub fn runs_grid(self) -> bool {
        matches!(self, Tool::Grid | Tool::All)
    }

    pub fn runs_maxcfu(self) -> bool {
        matches!(self, Tool::Maxcfu | Tool::All)
    }
}

/// Candidate grids for cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub folds: usize,
    pub degree_grid: Vec<usize>,
    pub lambda_grid: Vec<f64>,
    pub predictor_degree_grid: Vec<usize>,
    pub predictor_lambda_grid: Vec<f64>,
    pub baseline_degree_grid: Vec<usize>,
    pub baseline_lambda_grid: Vec<f64>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        let lambdas = vec![0.01, 0.1, 1.0, 10.0];
        SelectionConfig {
            folds: 5,
            degree_grid: vec![1, 2, 3],
            lambda_grid: lambdas.clone(),
            predictor_degree_grid: vec![1, 2, 3],
            predictor_lambda_grid: lambdas.clone(),
            baseline_degree_grid: vec![1, 2, 3],
            baseline_lambda_grid: lambdas,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub p_grid: Vec<f64>,
    pub mode: SweepMode,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            p_grid: crate::gridtool::default_grid(),
            mode: SweepMode::Warm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaxCfuConfig {
    /// Ascending.
    pub budgets: Vec<f64>,
    /// Start each budget from the previous budget's factor.
    pub warm_start: bool,
    pub optimizer: OptimizerConfig,
    /// Groups of feature names whose errors may correlate; all pairs when absent.
    pub cliques: Option<Vec<Vec<String>>>,
}

impl Default for MaxCfuConfig {
    fn default() -> Self {
        MaxCfuConfig {
            budgets: linspace_budgets(),
            warm_start: true,
            optimizer: OptimizerConfig::default(),
            cliques: None,
        }
    }
}

fn linspace_budgets() -> Vec<f64> {
    crate::gridtool::linspace(0.1, 0.9, 9)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    /// Required for CSV data; defaults to the generator's graph for synthetic data.
    #[serde(default)]
    pub graph: Option<GraphSpec>,
    /// z-score features before fitting.
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub tool: Tool,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub maxcfu: MaxCfuConfig,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub path_mask: Option<PathSpecMask>,
    /// Worker threads; all available cores when absent.
    #[serde(default)]
    pub threads: Option<usize>,
}

fn yes() -> bool {
    true
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn graph_spec(&self) -> Result<GraphSpec> {
        match (&self.graph, &self.data) {
            (Some(g), _) => Ok(g.clone()),
            (None, DataSource::Synthetic(s)) => Ok(s.graph.clone()),
            (None, DataSource::Csv { .. }) => Err(Error::config("graph", "required for csv data")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.selection;
        if s.folds < 2 {
            return Err(Error::config("selection.folds", "must be at least 2"));
        }
        for (name, grid) in [
            ("selection.degree_grid", &s.degree_grid),
            ("selection.predictor_degree_grid", &s.predictor_degree_grid),
            ("selection.baseline_degree_grid", &s.baseline_degree_grid),
        ] {
            if grid.is_empty() || grid.contains(&0) {
                return Err(Error::config(name, "must be nonempty with degrees >= 1"));
            }
        }
        for (name, grid) in [
            ("selection.lambda_grid", &s.lambda_grid),
            ("selection.predictor_lambda_grid", &s.predictor_lambda_grid),
            ("selection.baseline_lambda_grid", &s.baseline_lambda_grid),
        ] {
            if grid.is_empty() || grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
                return Err(Error::config(name, "must be nonempty with positive values"));
            }
        }
        if self.tool.runs_grid() && self.grid.p_grid.iter().any(|p| !(p.abs() < 1.0)) {
            return Err(Error::config("grid.p_grid", "values must lie in (-1, 1)"));
        }
        if self.tool.runs_maxcfu() {
            let b = &self.maxcfu.budgets;
            if b.is_empty() || b.iter().any(|p| !(0.0..1.0).contains(p)) {
                return Err(Error::config("maxcfu.budgets", "must be nonempty with values in [0, 1)"));
            }
            if b.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::config("maxcfu.budgets", "must be sorted ascending"));
            }
            let o = &self.maxcfu.optimizer;
            if !(o.learning_rate > 0.0) {
                return Err(Error::config("maxcfu.optimizer.learning_rate", "must be positive"));
            }
            if o.iterations == 0 {
                return Err(Error::config("maxcfu.optimizer.iterations", "must be at least 1"));
            }
            if o.batch_size == Some(0) {
                return Err(Error::config("maxcfu.optimizer.batch_size", "must be at least 1"));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads", "must be at least 1"));
        }
        self.graph_spec().map(|_| ())
    }
}

/// Parses `lo:hi:count` into `count` evenly spaced values.
pub fn parse_range(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::InvalidConfig(format!("expected lo:hi:count, got `{text}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if count == 0 || !lo.is_finite() || !hi.is_finite() || lo > hi {
        return Err(bad());
    }
    Ok(crate::gridtool::linspace(lo, hi, count))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "data": {"synthetic": {
            "graph": {"protected": "A", "features": ["G", "L"], "edges": ["A->G", "A->L", "G->L"]},
            "degrees": [1, 1],
            "weights": [0.5, -1.0, 0.0, -0.8, 0.7],
            "sigmas": [1.0, 0.8],
            "correlation": [[1.0, 0.5], [0.5, 1.0]],
            "target": {"intercept": 0.3, "protected": 0.0, "features": [0.6, 0.5], "noise_sd": 0.5},
            "n": 200, "seed": 1
        }},
        "seed": 7
    }"#;

    #[test]
    fn defaults_materialize() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.tool, Tool::All);
        assert_eq!(c.grid.p_grid.len(), 41);
        assert_eq!(c.maxcfu.budgets.len(), 9);
        assert_eq!(c.maxcfu.optimizer.learning_rate, 0.05);
        assert_eq!(c.selection.folds, 5);
        assert!(c.standardize);
        let round: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn errors_carry_field_paths() {
        let text = MINIMAL.replace("\"seed\": 7", "\"seed\": 7, \"selection\": {\"folds\": \"five\"}");
        match RunConfig::from_json(&text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "selection.folds"),
            other => panic!("{other:?}"),
        }
        let text = MINIMAL.replace("\"seed\": 7", "\"seed\": 7, \"maxcfu\": {\"budgets\": [0.5, 0.2]}");
        match RunConfig::from_json(&text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "maxcfu.budgets"),
            other => panic!("{other:?}"),
        }
        let text = MINIMAL.replace("\"seed\": 7", "\"seeed\": 7");
        assert!(RunConfig::from_json(&text).is_err());
    }

    #[test]
    fn csv_requires_graph() {
        let text = r#"{"data": {"csv": {"path": "x.csv", "schema": {"protected": "a", "target": "y", "features": {}}}}, "seed": 1}"#;
        assert!(matches!(RunConfig::from_json(text), Err(Error::Config { .. })));
    }

    #[test]
    fn ranges() {
        assert_eq!(parse_range("0.1:0.9:9").unwrap().len(), 9);
        assert_eq!(parse_range("0:0:1").unwrap(), vec![0.0]);
        assert!(parse_range("0.1:0.9").is_err());
        assert!(parse_range("0.9:0.1:3").is_err());
        assert!(parse_range("a:b:c").is_err());
    }
}
