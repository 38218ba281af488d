//! Built-in numerical checks behind `cfsense selftest`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anm::{counterfactual, fit_model_a, fit_model_b, Design, FitControls};
use crate::basis::StructuralBasis;
use crate::cfu::ModelAArtifacts;
use crate::correlation::{materialize, psd_check, star_matrix, CorrelationParams};
use crate::error::Result;
use crate::graph::CausalGraph;
use crate::gridtool;
use crate::io::{generate, SyntheticSpec};
use crate::maxcfu::{self, OptimizerConfig};
use crate::predictor::resolve_mask;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: impl Into<String>, check: Result<(bool, String)>) -> CheckOutcome {
    let (passed, detail) = check.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
    }
}

fn law_fixture() -> Result<ModelAArtifacts> {
    let graph = CausalGraph::law_school();
    let data = generate(&SyntheticSpec::law_school(400, 0.5, 3))?.standardized();
    let basis = StructuralBasis::uniform(&graph, 1)?;
    ModelAArtifacts::fit(&basis, &data, 0.1, 1, 0.1, resolve_mask(&graph, None)?, None)
}

fn nhs_fixture() -> Result<ModelAArtifacts> {
    let graph = CausalGraph::nhs();
    let data = generate(&SyntheticSpec::nhs(300, 0.5, 4))?.standardized();
    let basis = StructuralBasis::uniform(&graph, 2)?;
    ModelAArtifacts::fit(&basis, &data, 0.1, 2, 0.1, resolve_mask(&graph, None)?, None)
}

fn star_check(n: usize) -> Result<(bool, String)> {
    let edge = 1.0 / ((n - 1) as f64).sqrt();
    let inside = psd_check(&star_matrix(n, edge - 1e-3))?;
    let outside = psd_check(&star_matrix(n, edge + 1e-3))?;
    let expected = 1.0 - ((n - 1) as f64).sqrt() * (edge + 1e-3);
    let ok = inside.is_psd && !outside.is_psd && (outside.min_eig - expected).abs() <= 1e-10;
    Ok((ok, format!("boundary {edge:.4}, min eig past it {:.3e}", outside.min_eig)))
}

fn budget_check() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for m in 2..=6 {
        let mut params = CorrelationParams::dense(m, 0.6, m as u64)?;
        for _ in 0..20 {
            let factor = DMatrix::from_fn(m, m, |r, c| if c <= r { rng.random_range(-3.0..3.0) } else { 0.0 });
            params = params.with_factor(factor)?;
            let p = materialize(&params);
            for r in 0..m {
                ok &= p[(r, r)] == 1.0;
                for c in 0..m {
                    ok &= p[(r, c)] == p[(c, r)];
                    if r != c {
                        worst = worst.max(p[(r, c)].abs());
                    }
                }
            }
        }
    }
    Ok((ok && worst <= 0.6, format!("largest |P_ij| {worst:.6} for budget 0.6")))
}

fn identity_counterfactual() -> Result<(bool, String)> {
    let art = law_fixture()?;
    let basis = &art.design.basis;
    let mut ok = true;
    for i in 0..art.n() {
        let a = art.design.a[i];
        let x: Vec<f64> = art.design.x.row(i).iter().copied().collect();
        ok &= counterfactual(basis, &art.model_a.weights, a, &x, a) == x;
    }
    Ok((ok, format!("{} samples", art.n())))
}

fn model_b_at_identity() -> Result<(bool, String)> {
    let graph = CausalGraph::nhs();
    let data = generate(&SyntheticSpec::nhs(300, 0.3, 6))?;
    let basis = StructuralBasis::uniform(&graph, 2)?;
    let design = Design::new(&basis, &data)?;
    let a = fit_model_a(&design, 0.5)?;
    let b = fit_model_b(&design, 0.5, &DMatrix::identity(3, 3), &FitControls::default(), None)?;
    let dw = a.weights.iter().zip(&b.weights).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let ds = a.sigmas.iter().zip(&b.sigmas).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok((dw <= 1e-6 && ds <= 1e-6, format!("max weight gap {dw:.2e}, sigma gap {ds:.2e}")))
}

fn grid_zero() -> Result<(bool, String)> {
    let art = law_fixture()?;
    let curve = gridtool::sweep(&art, &[0.0], &FitControls::default(), gridtool::SweepMode::Warm)?;
    let cfu = curve.cfu_at(0.0).unwrap_or(f64::INFINITY);
    Ok((cfu <= 1e-8, format!("CFU {cfu:.2e}")))
}

fn maxcfu_zero_budget() -> Result<(bool, String)> {
    let art = nhs_fixture()?;
    let cfg = OptimizerConfig {
        p_max: 0.0,
        iterations: 3,
        gradient_check_samples: 0,
        ..OptimizerConfig::default()
    };
    let r = maxcfu::maximize(&art, &cfg)?;
    Ok((r.cfu_final <= 1e-8, format!("CFU {:.2e}", r.cfu_final)))
}

fn gradient() -> Result<(bool, String)> {
    let art = nhs_fixture()?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for draw in 0..3 {
        let factor = DMatrix::from_fn(3, 3, |r, c| if c <= r { rng.random_range(-1.0..1.0) } else { 0.0 });
        let params = CorrelationParams::dense(3, 0.6, draw)?.with_factor(factor)?;
        let mut idx = rand::seq::index::sample(&mut rng, art.n(), 32).into_vec();
        idx.sort_unstable();
        let check = maxcfu::gradient_check(&art, &params, &idx, &FitControls::default(), 1e-5)?;
        worst = worst.max(check.max_relative_error);
    }
    Ok((worst <= 1e-3, format!("max relative error {worst:.2e}")))
}

/// Runs every check. Failures are reported, never panicked.
pub fn run_all() -> Vec<CheckOutcome> {
    let mut out: Vec<CheckOutcome> = [3, 4, 5, 8]
        .into_iter()
        .map(|n| outcome(format!("star matrix PSD boundary n={n}"), star_check(n)))
        .collect();
    out.push(outcome("budgeted correlation: symmetric, unit diagonal, within budget", budget_check()));
    out.push(outcome("counterfactual with unchanged A is the identity", identity_counterfactual()));
    out.push(outcome("confounded fit at P = I matches Model A", model_b_at_identity()));
    out.push(outcome("grid CFU at p = 0", grid_zero()));
    out.push(outcome("maxcfu CFU at zero budget", maxcfu_zero_budget()));
    out.push(outcome("factor gradient vs finite differences", gradient()));
    out
}

/// Fixed-width table, one row per check.
pub fn format_table(results: &[CheckOutcome]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  {:<6}  {}\n", "check", "result", "detail");
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        s.push_str(&format!("{:<width$}  {:<6}  {}\n", r.name, status, r.detail));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let results = run_all();
        let table = format_table(&results);
        assert!(results.iter().all(|r| r.passed), "{table}");
        assert_eq!(table.lines().count(), results.len() + 1);
    }
}
