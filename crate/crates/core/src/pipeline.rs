//! End-to-end run: ingest, select hyperparameters, fit, run the sensitivity tools and
//! write artifacts.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::basis::StructuralBasis;
use crate::cfu::ModelAArtifacts;
use crate::config::{DataSource, RunConfig};
use crate::correlation::materialize;
use crate::error::{Error, Result};
use crate::graph::{self, CausalGraph};
use crate::gridtool::{self, SensitivityCurve};
use crate::io::{self, Dataset};
use crate::maxcfu::{self, BudgetRun, OptimizerConfig};
use crate::modelsel::{self, CvPlan, Selection};
use crate::predictor::{self, BaselineKind, BaselinePredictor};

#[derive(Debug, Clone, Serialize)]
pub struct DatasetInfo {
    pub n: usize,
    pub dropped_rows: usize,
    pub protected: String,
    pub target: String,
    pub features: Vec<String>,
    pub standardized: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionInfo {
    pub structural: Selection,
    pub predictor: Selection,
    pub baseline_uc: Selection,
    pub baseline_buc: Selection,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelASummary {
    pub degree: usize,
    pub lambda: f64,
    pub objective: f64,
    pub sigmas: Vec<f64>,
    pub max_iterations_warning: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictorSummary {
    pub degree: usize,
    pub lambda: f64,
    pub theta: Vec<f64>,
    /// Per feature: `true` when its residual feeds the predictor.
    pub unfair: Vec<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineSummary {
    pub unfairness_uc: f64,
    pub unfairness_buc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSummary {
    pub curve: SensitivityCurve,
    /// Every curve point lies below both baseline unfairness values.
    pub below_baselines: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetSummary {
    pub budget: f64,
    pub cfu_final: Option<f64>,
    pub correlation: Vec<Vec<f64>>,
    pub factor: Vec<Vec<f64>>,
    pub min_eig: Option<f64>,
    pub is_psd: Option<bool>,
    pub gradient_check_error: Option<f64>,
    pub stationarity: Option<f64>,
    pub infeasible_steps: usize,
    /// CFU fell below the previous budget's.
    pub decreased: bool,
    pub below_baselines: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub dataset: DatasetInfo,
    pub selection: SelectionInfo,
    pub model_a: ModelASummary,
    pub predictor: PredictorSummary,
    pub baselines: BaselineSummary,
    pub grid: Option<GridSummary>,
    pub maxcfu: Option<Vec<BudgetSummary>>,
    pub notes: Vec<String>,
    pub errors: Vec<String>,
}

impl RunSummary {
    pub fn succeeded(&self) -> bool {
        self.errors.is_empty()
    }

    /// Plain-text digest of the run.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let d = &self.dataset;
        s.push_str(&format!(
            "data: n = {} ({} rows dropped), protected {}, target {}, features {}\n",
            d.n,
            d.dropped_rows,
            d.protected,
            d.target,
            d.features.join(", ")
        ));
        s.push_str(&format!(
            "structural equations: degree {}, lambda {}\n",
            self.model_a.degree, self.model_a.lambda
        ));
        s.push_str(&format!(
            "fair predictor: degree {}, lambda {}\n",
            self.predictor.degree, self.predictor.lambda
        ));
        s.push_str(&format!(
            "baseline unfairness: unconstrained {:.6e}, blind {:.6e}\n",
            self.baselines.unfairness_uc, self.baselines.unfairness_buc
        ));
        if let Some(g) = &self.grid {
            s.push_str("grid:\n");
            for pt in &g.curve.points {
                s.push_str(&format!("  p = {:+.4}  CFU = {:.6e}\n", pt.p, pt.cfu));
            }
        }
        if let Some(runs) = &self.maxcfu {
            s.push_str("maxcfu:\n");
            for r in runs {
                match r.cfu_final {
                    Some(c) => s.push_str(&format!("  budget {:.4}  CFU = {:.6e}\n", r.budget, c)),
                    None => s.push_str(&format!("  budget {:.4}  failed\n", r.budget)),
                }
            }
        }
        for n in &self.notes {
            s.push_str(&format!("note: {n}\n"));
        }
        for e in &self.errors {
            s.push_str(&format!("error: {e}\n"));
        }
        s
    }
}

/// Structural weights grouped by node, for `model_a.json`.
#[derive(Debug, Clone, Serialize)]
pub struct NodeEquation {
    pub node: String,
    pub parents: Vec<String>,
    pub degree: usize,
    /// One exponent vector per weight, aligned with `parents`.
    pub exponents: Vec<Vec<u32>>,
    pub weights: Vec<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelAFile {
    pub graph: graph::GraphSpec,
    pub lambda: f64,
    pub objective: f64,
    pub include_bias: bool,
    pub equations: Vec<NodeEquation>,
    pub feature_stats: Option<Vec<io::ColumnStats>>,
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn load_data(config: &RunConfig, graph: &CausalGraph) -> Result<Dataset> {
    let data = match &config.data {
        DataSource::Csv { path, schema } => return io::load_csv(path, schema, graph, config.standardize),
        DataSource::Synthetic(spec) => io::generate(spec)?,
    };
    if data.feature_names != graph.features() {
        return Err(Error::config(
            "graph.features",
            "must match the synthetic generator's features in order",
        ));
    }
    Ok(if config.standardize { data.standardized() } else { data })
}

/// Runs the configured pipeline inside a pool of `config.threads` workers.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = config.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| run_inner(config))
}

fn run_inner(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let graph = graph::validate(&config.graph_spec()?)?;
    let data = load_data(config, &graph)?;
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    let sel = &config.selection;
    let plan = |degrees: &[usize], lambdas: &[f64]| {
        CvPlan::new(data.len(), sel.folds, degrees.to_vec(), lambdas.to_vec(), config.seed)
    };

    let structural = modelsel::select_structural(&data, &graph, &plan(&sel.degree_grid, &sel.lambda_grid)?)?;
    let basis = StructuralBasis::uniform(&graph, structural.degree)?;
    let design = crate::anm::Design::new(&basis, &data)?;
    let model_a = crate::anm::fit_model_a(&design, structural.lambda)?;
    let residuals = design.residuals(&model_a.weights);
    let unfair = predictor::resolve_mask(&graph, config.path_mask.as_ref())?;
    let predictor_sel = modelsel::select_cf_predictor(
        &residuals,
        &design.x,
        &data.target,
        &unfair,
        &plan(&sel.predictor_degree_grid, &sel.predictor_lambda_grid)?,
    )?;
    let cf = predictor::fit_cf(
        &residuals,
        &design.x,
        &data.target,
        predictor_sel.degree,
        predictor_sel.lambda,
        unfair.clone(),
        config.path_mask.clone(),
    )?;
    let art = ModelAArtifacts::new(design, model_a, cf);

    let baseline_plan = plan(&sel.baseline_degree_grid, &sel.baseline_lambda_grid)?;
    let fit_kind = |kind| -> Result<(Selection, BaselinePredictor)> {
        let s = modelsel::select_baseline(&data, kind, &baseline_plan)?;
        let b = predictor::fit_baseline(&data, kind, s.degree, s.lambda)?;
        Ok((s, b))
    };
    let (uc_sel, uc) = fit_kind(BaselineKind::Unconstrained)?;
    let (buc_sel, buc) = fit_kind(BaselineKind::BlindUnconstrained)?;
    let unfairness_uc = predictor::baseline_unfairness(&art.predictor, &uc, &data, &art.residuals);
    let unfairness_buc = predictor::baseline_unfairness(&art.predictor, &buc, &data, &art.residuals);
    let baseline_floor = unfairness_uc.min(unfairness_buc);

    write_model_a(out.join("model_a.json"), &graph, &art, &data)?;
    write_predictions(out.join("predictions.csv"), &data, &art, &uc, &buc)?;

    let mut notes = Vec::new();
    let mut errors = Vec::new();

    let grid = if config.tool.runs_grid() {
        if graph.num_features() != 2 {
            let msg = format!("grid tool skipped: graph has {} features", graph.num_features());
            if config.tool == crate::config::Tool::Grid {
                errors.push(msg);
            } else {
                notes.push(msg);
            }
            None
        } else {
            match gridtool::sweep(&art, &config.grid.p_grid, &config.maxcfu.optimizer.inner, config.grid.mode) {
                Ok(curve) => {
                    let curve = curve.with_baselines(unfairness_uc, unfairness_buc);
                    curve.write_csv(out.join("curve.csv"))?;
                    let below = curve.points.iter().all(|p| p.cfu < baseline_floor);
                    if !below {
                        notes.push("some grid points reach a baseline's unfairness".into());
                    }
                    for s in &curve.skipped {
                        notes.push(format!("grid point p = {} skipped: {}", s.p, s.reason));
                    }
                    Some(GridSummary {
                        curve,
                        below_baselines: below,
                    })
                }
                Err(e) => {
                    errors.push(format!("grid: {e}"));
                    None
                }
            }
        }
    } else {
        None
    };

    let maxcfu = if config.tool.runs_maxcfu() {
        let cliques = match &config.maxcfu.cliques {
            Some(groups) => Some(
                groups
                    .iter()
                    .map(|g| {
                        g.iter()
                            .map(|name| match graph.node_index(name)? {
                                0 => Err(Error::config("maxcfu.cliques", "protected attribute cannot be in a clique")),
                                i => Ok(i - 1),
                            })
                            .collect::<Result<Vec<usize>>>()
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let optimizer = OptimizerConfig {
            cliques,
            seed: config.seed,
            ..config.maxcfu.optimizer.clone()
        };
        let runs = if config.maxcfu.warm_start {
            maxcfu::budget_sweep(&art, &config.maxcfu.budgets, &optimizer)?
        } else {
            maxcfu::budget_sweep_cold(&art, &config.maxcfu.budgets, &optimizer)?
        };
        let mut summaries = Vec::new();
        for run in runs {
            summaries.push(summarize_budget(&run, baseline_floor, out, &mut notes, &mut errors)?);
        }
        Some(summaries)
    } else {
        None
    };

    let summary = RunSummary {
        config: config.clone(),
        dataset: DatasetInfo {
            n: data.len(),
            dropped_rows: data.dropped_rows,
            protected: data.protected_name.clone(),
            target: data.target_name.clone(),
            features: data.feature_names.clone(),
            standardized: data.feature_stats.is_some(),
        },
        selection: SelectionInfo {
            structural: structural.clone(),
            predictor: predictor_sel.clone(),
            baseline_uc: uc_sel,
            baseline_buc: buc_sel,
        },
        model_a: ModelASummary {
            degree: structural.degree,
            lambda: structural.lambda,
            objective: art.model_a.objective,
            sigmas: art.model_a.sigmas.clone(),
            max_iterations_warning: art.model_a.warnings.max_iterations,
        },
        predictor: PredictorSummary {
            degree: predictor_sel.degree,
            lambda: predictor_sel.lambda,
            theta: art.predictor.theta.clone(),
            unfair,
        },
        baselines: BaselineSummary {
            unfairness_uc,
            unfairness_buc,
        },
        grid,
        maxcfu,
        notes,
        errors,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(out.join("summary.json"), text)?;
    fs::write(out.join("report.txt"), summary.report())?;
    Ok(summary)
}

fn budget_label(budget: f64) -> String {
    format!("{budget}")
}

fn summarize_budget(
    run: &BudgetRun,
    baseline_floor: f64,
    out: &Path,
    notes: &mut Vec<String>,
    errors: &mut Vec<String>,
) -> Result<BudgetSummary> {
    match &run.result {
        Ok(r) => {
            let mut w = csv::Writer::from_path(out.join(format!("trace_{}.csv", budget_label(run.budget))))?;
            w.write_record(["iter", "cfu", "grad_norm", "min_eig"])?;
            for row in &r.trace {
                w.write_record([
                    row.iter.to_string(),
                    row.cfu.to_string(),
                    row.grad_norm.to_string(),
                    row.min_eig.to_string(),
                ])?;
            }
            w.flush()?;
            if run.decreased {
                notes.push(format!("CFU decreased at budget {}", run.budget));
            }
            let below = r.cfu_final < baseline_floor;
            if !below {
                notes.push(format!("budget {}: CFU reaches a baseline's unfairness", run.budget));
            }
            Ok(BudgetSummary {
                budget: run.budget,
                cfu_final: Some(r.cfu_final),
                correlation: matrix_rows(&materialize(&r.params)),
                factor: matrix_rows(&r.params.factor),
                min_eig: Some(r.psd.min_eig),
                is_psd: Some(r.psd.is_psd),
                gradient_check_error: r.gradient_check.as_ref().map(|g| g.max_relative_error),
                stationarity: Some(r.stationarity),
                infeasible_steps: r.infeasible_steps,
                decreased: run.decreased,
                below_baselines: Some(below),
                error: None,
            })
        }
        Err(e) => {
            errors.push(format!("maxcfu budget {}: {e}", run.budget));
            Ok(BudgetSummary {
                budget: run.budget,
                cfu_final: None,
                correlation: Vec::new(),
                factor: Vec::new(),
                min_eig: None,
                is_psd: None,
                gradient_check_error: None,
                stationarity: None,
                infeasible_steps: 0,
                decreased: false,
                below_baselines: None,
                error: Some(e.clone()),
            })
        }
    }
}

fn write_model_a(path: impl AsRef<Path>, graph: &CausalGraph, art: &ModelAArtifacts, data: &Dataset) -> Result<()> {
    let basis = &art.design.basis;
    let names = graph.nodes();
    let equations = (0..basis.num_features())
        .map(|j| NodeEquation {
            node: names[j + 1].clone(),
            parents: basis.node_parents(j).iter().map(|&p| names[p].clone()).collect(),
            degree: basis.node_basis(j).spec().degree,
            exponents: basis.node_basis(j).exponents().to_vec(),
            weights: art.model_a.weights[basis.block(j)].to_vec(),
            sigma: art.model_a.sigmas[j],
        })
        .collect();
    let file = ModelAFile {
        graph: graph.to_spec(),
        lambda: art.model_a.lambda,
        objective: art.model_a.objective,
        include_bias: art.model_a.include_bias,
        equations,
        feature_stats: data.feature_stats.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_predictions(
    path: impl AsRef<Path>,
    data: &Dataset,
    art: &ModelAArtifacts,
    uc: &BaselinePredictor,
    buc: &BaselinePredictor,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "y", "ŷ_cf", "ŷ_uc", "ŷ_buc"])?;
    for i in 0..data.len() {
        let (a, x) = (data.protected[i], &data.features[i]);
        w.write_record([
            i.to_string(),
            data.target[i].to_string(),
            art.factual_predictions()[i].to_string(),
            uc.predict(a, x).to_string(),
            buc.predict(a, x).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
