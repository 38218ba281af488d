//! CFU as a function of the error correlation `p` for graphs with two features.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anm::{fit_model_b, FitControls, FitWarnings, WarmStart};
use crate::cfu::{counterfactual_unfairness, ModelAArtifacts};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub p: f64,
    pub cfu: f64,
    pub objective: f64,
    pub warnings: FitWarnings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPoint {
    pub p: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    /// Sorted by `p`.
    pub points: Vec<CurvePoint>,
    pub skipped: Vec<SkippedPoint>,
    pub baseline_uc: Option<f64>,
    pub baseline_buc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Sequential, each fit started from its neighbour's solution.
    #[default]
    Warm,
    /// Independent cold fits evaluated in parallel.
    Parallel,
}

/// `count` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|k| {
                if k == count - 1 {
                    hi
                } else {
                    lo + (hi - lo) * k as f64 / (count - 1) as f64
                }
            })
            .collect(),
    }
}

/// 41 points from -0.99 to 0.99.
pub fn default_grid() -> Vec<f64> {
    linspace(-0.99, 0.99, 41)
}

fn bivariate(p: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[1.0, p, p, 1.0])
}

/// Refits the confounded model at `P = [[1, p], [p, 1]]` on all samples and measures CFU.
pub fn evaluate_point(
    art: &ModelAArtifacts,
    p: f64,
    controls: &FitControls,
    warm: Option<&WarmStart>,
) -> Result<(CurvePoint, WarmStart)> {
    let fit = fit_model_b(&art.design, art.lambda(), &bivariate(p), controls, warm)?;
    let all: Vec<usize> = (0..art.n()).collect();
    let cfu = counterfactual_unfairness(art, &all, &fit.weights);
    Ok((
        CurvePoint {
            p,
            cfu,
            objective: fit.objective,
            warnings: fit.warnings,
        },
        WarmStart::from(&fit),
    ))
}

pub fn sweep(
    art: &ModelAArtifacts,
    grid: &[f64],
    controls: &FitControls,
    mode: SweepMode,
) -> Result<SensitivityCurve> {
    if art.design.m() != 2 {
        return Err(Error::NotBivariate(art.design.m()));
    }
    if let Some(p) = grid.iter().find(|p| !(p.abs() < 1.0)) {
        return Err(Error::InvalidConfig(format!("grid value {p} outside (-1, 1)")));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let outcomes: Vec<Result<CurvePoint>> = match mode {
        SweepMode::Parallel => grid
            .par_iter()
            .map(|&p| evaluate_point(art, p, controls, None).map(|(pt, _)| pt))
            .collect(),
        SweepMode::Warm => {
            // Walk outward from the point closest to zero, where Model A is the natural start.
            let mut out: Vec<Option<Result<CurvePoint>>> = grid.iter().map(|_| None).collect();
            let centre = (0..grid.len())
                .min_by(|&a, &b| grid[a].abs().total_cmp(&grid[b].abs()))
                .unwrap_or(0);
            let start = WarmStart::from(&art.model_a);
            let upward: Vec<usize> = (centre..grid.len()).collect();
            let downward: Vec<usize> = (0..centre).rev().collect();
            let mut centre_warm = None;
            for (k, order) in [upward, downward].into_iter().enumerate() {
                let mut warm = if k == 0 { Some(start.clone()) } else { centre_warm.clone() };
                for i in order {
                    match evaluate_point(art, grid[i], controls, warm.as_ref()) {
                        Ok((pt, ws)) => {
                            if i == centre {
                                centre_warm = Some(ws.clone());
                            }
                            warm = Some(ws);
                            out[i] = Some(Ok(pt));
                        }
                        Err(e) => out[i] = Some(Err(e)),
                    }
                }
            }
            out.into_iter().map(|o| o.expect("every index visited")).collect()
        }
    };

    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for (p, outcome) in grid.iter().zip(outcomes) {
        match outcome {
            Ok(pt) => points.push(pt),
            Err(e) => skipped.push(SkippedPoint {
                p: *p,
                reason: e.to_string(),
            }),
        }
    }
    Ok(SensitivityCurve {
        points,
        skipped,
        baseline_uc: None,
        baseline_buc: None,
    })
}

impl SensitivityCurve {
    pub fn with_baselines(mut self, uc: f64, buc: f64) -> Self {
        self.baseline_uc = Some(uc);
        self.baseline_buc = Some(buc);
        self
    }

    pub fn max_cfu(&self) -> Option<f64> {
        self.points.iter().map(|p| p.cfu).reduce(f64::max)
    }

    pub fn cfu_at(&self, p: f64) -> Option<f64> {
        self.points.iter().find(|pt| pt.p == p).map(|pt| pt.cfu)
    }

    /// `p,cfu,objective,warn`, where `warn` is `jitter`, `max_iter`, both joined by `|`, or empty.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["p", "cfu", "objective", "warn"])?;
        for pt in &self.points {
            let mut flags = Vec::new();
            if pt.warnings.jittered {
                flags.push("jitter");
            }
            if pt.warnings.max_iterations {
                flags.push("max_iter");
            }
            w.write_record([
                pt.p.to_string(),
                pt.cfu.to_string(),
                pt.objective.to_string(),
                flags.join("|"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
