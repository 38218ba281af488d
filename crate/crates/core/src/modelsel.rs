//! K-fold cross-validation over polynomial degree and ridge strength.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anm::{fit_model_a, Design};
use crate::basis::StructuralBasis;
use crate::error::{Error, Result};
use crate::graph::CausalGraph;
use crate::io::Dataset;
use crate::predictor::{fit_baseline, fit_cf, BaselineKind};

pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    /// Disjoint, nonempty, covering `0..n`.
    pub folds: Vec<Vec<usize>>,
    pub degree_grid: Vec<usize>,
    pub lambda_grid: Vec<f64>,
    pub seed: u64,
}

impl CvPlan {
    /// Shuffles `0..n` with `seed` and cuts it into `k` near-equal folds (fewer when `n < k`).
    pub fn new(n: usize, k: usize, degree_grid: Vec<usize>, lambda_grid: Vec<f64>, seed: u64) -> Result<Self> {
        if degree_grid.is_empty() || lambda_grid.is_empty() {
            return Err(Error::InvalidConfig("candidate grids must be nonempty".into()));
        }
        if degree_grid.contains(&0) {
            return Err(Error::InvalidConfig("degrees must be at least 1".into()));
        }
        if lambda_grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidConfig("ridge strengths must be positive".into()));
        }
        if n < 2 || k < 2 {
            return Err(Error::InvalidConfig(format!(
                "cross-validation needs at least two samples and two folds (n = {n}, k = {k})"
            )));
        }
        let k = k.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let folds = (0..k)
            .map(|f| {
                let lo = f * n / k;
                let hi = (f + 1) * n / k;
                let mut fold = idx[lo..hi].to_vec();
                fold.sort_unstable();
                fold
            })
            .collect();
        Ok(CvPlan {
            folds,
            degree_grid,
            lambda_grid,
            seed,
        })
    }

    pub fn train(&self, fold: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub degree: usize,
    pub lambda: f64,
    /// Mean held-out MSE over folds; `None` when any fold failed.
    pub mse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub degree: usize,
    pub lambda: f64,
    pub mse: f64,
    pub scores: Vec<CandidateScore>,
}

/// Scores every `(degree, λ)` pair with `eval(degree, λ, train, test)` averaged over
/// folds and returns the lowest. Ties go to the smaller degree, then the larger `λ`.
pub fn select<F>(plan: &CvPlan, eval: F) -> Result<Selection>
where
    F: Fn(usize, f64, &[usize], &[usize]) -> Result<f64> + Sync,
{
    let mut cells: Vec<(usize, f64)> = Vec::new();
    for &d in &plan.degree_grid {
        for &l in &plan.lambda_grid {
            cells.push((d, l));
        }
    }
    cells.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
    cells.dedup();
    let scores: Vec<CandidateScore> = cells
        .par_iter()
        .map(|&(degree, lambda)| {
            let mut total = 0.0;
            for (f, test) in plan.folds.iter().enumerate() {
                match eval(degree, lambda, &plan.train(f), test) {
                    Ok(v) if v.is_finite() => total += v,
                    Ok(v) => {
                        return CandidateScore {
                            degree,
                            lambda,
                            mse: None,
                            error: Some(format!("non-finite held-out error {v}")),
                        }
                    }
                    Err(e) => {
                        return CandidateScore {
                            degree,
                            lambda,
                            mse: None,
                            error: Some(e.to_string()),
                        }
                    }
                }
            }
            CandidateScore {
                degree,
                lambda,
                mse: Some(total / plan.folds.len() as f64),
                error: None,
            }
        })
        .collect();
    let mut best: Option<&CandidateScore> = None;
    for s in &scores {
        if let Some(m) = s.mse {
            if best.is_none_or(|b| m < b.mse.unwrap()) {
                best = Some(s);
            }
        }
    }
    let best = best.ok_or(Error::AllCandidatesFailed)?;
    Ok(Selection {
        degree: best.degree,
        lambda: best.lambda,
        mse: best.mse.unwrap(),
        scores: scores.clone(),
    })
}

fn mean_square(values: impl Iterator<Item = f64>, count: usize) -> f64 {
    values.map(|v| v * v).sum::<f64>() / count.max(1) as f64
}

/// Structural equations: held-out residual MSE summed over features.
pub fn select_structural(data: &Dataset, graph: &CausalGraph, plan: &CvPlan) -> Result<Selection> {
    select(plan, |degree, lambda, train, test| {
        let basis = StructuralBasis::uniform(graph, degree)?;
        let fit = fit_model_a(&Design::new(&basis, &data.subset(train))?, lambda)?;
        let held = Design::new(&basis, &data.subset(test))?;
        let r = held.residuals(&fit.weights);
        Ok((0..r.ncols())
            .map(|j| mean_square(r.column(j).iter().copied(), test.len()))
            .sum())
    })
}

/// Fair predictor on fixed inputs: held-out target MSE.
pub fn select_cf_predictor(
    residuals: &DMatrix<f64>,
    raw: &DMatrix<f64>,
    target: &[f64],
    unfair: &[bool],
    plan: &CvPlan,
) -> Result<Selection> {
    select(plan, |degree, lambda, train, test| {
        let y: Vec<f64> = train.iter().map(|&i| target[i]).collect();
        let p = fit_cf(
            &residuals.select_rows(train),
            &raw.select_rows(train),
            &y,
            degree,
            lambda,
            unfair.to_vec(),
            None,
        )?;
        Ok(mean_square(
            test.iter().map(|&i| {
                let r: Vec<f64> = residuals.row(i).iter().copied().collect();
                let x: Vec<f64> = raw.row(i).iter().copied().collect();
                target[i] - p.predict(0.0, &r, &x)
            }),
            test.len(),
        ))
    })
}

pub fn select_baseline(data: &Dataset, kind: BaselineKind, plan: &CvPlan) -> Result<Selection> {
    select(plan, |degree, lambda, train, test| {
        let b = fit_baseline(&data.subset(train), kind, degree, lambda)?;
        Ok(mean_square(
            test.iter()
                .map(|&i| data.target[i] - b.predict(data.protected[i], &data.features[i])),
            test.len(),
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphSpec;
    use crate::io::{generate, SyntheticSpec};

    fn quadratic_law(n: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            degrees: vec![2, 2],
            // G: (1, a, a²); L: (1, a, g, a², ag, g²).
            weights: vec![0.5, -1.0, 0.0, 0.0, -0.8, 0.7, 0.0, 0.3, 0.6],
            ..SyntheticSpec::law_school(n, 0.0, seed)
        }
    }

    #[test]
    fn folds_partition_indices() {
        let plan = CvPlan::new(23, 5, vec![1], vec![1.0], 4).unwrap();
        assert_eq!(plan.folds.len(), 5);
        let mut all: Vec<usize> = plan.folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(plan.folds.iter().all(|f| !f.is_empty()));
        assert_eq!(plan, CvPlan::new(23, 5, vec![1], vec![1.0], 4).unwrap());
        assert_eq!(CvPlan::new(3, 5, vec![1], vec![1.0], 0).unwrap().folds.len(), 3);
        assert!(CvPlan::new(10, 5, vec![], vec![1.0], 0).is_err());
        assert!(CvPlan::new(10, 5, vec![1], vec![0.0], 0).is_err());
    }

    #[test]
    fn linear_truth_selects_degree_one() {
        let data = generate(&SyntheticSpec::law_school(2000, 0.0, 8)).unwrap();
        let plan = CvPlan::new(data.len(), 5, vec![1, 2, 3], vec![0.1], 1).unwrap();
        let sel = select_structural(&data, &CausalGraph::law_school(), &plan).unwrap();
        assert_eq!(sel.degree, 1);
    }

    #[test]
    fn quadratic_truth_selects_degree_two() {
        let data = generate(&quadratic_law(1000, 2)).unwrap();
        let plan = CvPlan::new(data.len(), 5, vec![1, 2], vec![0.1], 1).unwrap();
        let sel = select_structural(&data, &CausalGraph::law_school(), &plan).unwrap();
        assert_eq!(sel.degree, 2);
    }

    #[test]
    fn single_candidate_returned() {
        let data = generate(&SyntheticSpec::law_school(100, 0.0, 8)).unwrap();
        let plan = CvPlan::new(data.len(), 5, vec![2], vec![0.7], 1).unwrap();
        let sel = select_baseline(&data, BaselineKind::Unconstrained, &plan).unwrap();
        assert_eq!((sel.degree, sel.lambda), (2, 0.7));
    }

    #[test]
    fn ties_prefer_small_degree_then_large_lambda() {
        let plan = CvPlan::new(10, 5, vec![3, 1, 2], vec![0.1, 10.0, 1.0], 0).unwrap();
        let sel = select(&plan, |_, _, _, _| Ok(1.0)).unwrap();
        assert_eq!((sel.degree, sel.lambda), (1, 10.0));
        let sel = select(&plan, |d, _, _, _| Ok(if d == 1 { 2.0 } else { 1.0 })).unwrap();
        assert_eq!((sel.degree, sel.lambda), (2, 10.0));
    }

    #[test]
    fn all_failures_reported() {
        let plan = CvPlan::new(10, 5, vec![1, 2], vec![1.0], 0).unwrap();
        let out = select(&plan, |_, _, _, _| Err(Error::SingularNormalEquations));
        assert!(matches!(out, Err(Error::AllCandidatesFailed)));
        let out = select(&plan, |d, _, _, _| if d == 1 { Err(Error::SingularNormalEquations) } else { Ok(3.0) }).unwrap();
        assert_eq!(out.degree, 2);
        assert!(out.scores.iter().any(|s| s.error.is_some()));
    }

    #[test]
    fn predictor_selection_runs() {
        let data = generate(&SyntheticSpec::law_school(300, 0.0, 8)).unwrap();
        let graph = crate::graph::validate(&GraphSpec::new("A", &["G", "L"], &["A->G", "A->L", "G->L"])).unwrap();
        let basis = StructuralBasis::uniform(&graph, 1).unwrap();
        let design = Design::new(&basis, &data).unwrap();
        let fit = fit_model_a(&design, 0.1).unwrap();
        let r = design.residuals(&fit.weights);
        let plan = CvPlan::new(300, 5, vec![1, 2], vec![0.1, 1.0], 3).unwrap();
        let sel = select_cf_predictor(&r, &design.x, &data.target, &[true, true], &plan).unwrap();
        assert_eq!(sel.scores.len(), 4);
        assert!(sel.mse > 0.0);
    }
}
