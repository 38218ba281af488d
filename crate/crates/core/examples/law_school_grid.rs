//! Sensitivity curve for a two-feature graph: CFU as the error correlation between
//! the two features sweeps from -0.99 to 0.99, next to the baselines' unfairness.
//!
//! cargo run --release --example law_school_grid

use cfsense::anm::FitControls;
use cfsense::basis::StructuralBasis;
use cfsense::cfu::ModelAArtifacts;
use cfsense::graph::CausalGraph;
use cfsense::gridtool::{self, SweepMode};
use cfsense::io::{generate, SyntheticSpec};
use cfsense::predictor::{self, resolve_mask, BaselineKind};

fn main() -> cfsense::Result<()> {
    let graph = CausalGraph::law_school();
    let data = generate(&SyntheticSpec::law_school(1000, 0.5, 7))?.standardized();
    let basis = StructuralBasis::uniform(&graph, 1)?;
    let art = ModelAArtifacts::fit(&basis, &data, 1.0, 1, 0.1, resolve_mask(&graph, None)?, None)?;

    let uc = predictor::fit_baseline(&data, BaselineKind::Unconstrained, 1, 0.1)?;
    let buc = predictor::fit_baseline(&data, BaselineKind::BlindUnconstrained, 1, 0.1)?;
    let uc_gap = predictor::baseline_unfairness(&art.predictor, &uc, &data, &art.residuals);
    let buc_gap = predictor::baseline_unfairness(&art.predictor, &buc, &data, &art.residuals);

    let curve = gridtool::sweep(&art, &gridtool::default_grid(), &FitControls::default(), SweepMode::Warm)?
        .with_baselines(uc_gap, buc_gap);
    println!("{:>7}  {:>12}", "p", "CFU");
    for pt in &curve.points {
        println!("{:>7.3}  {:>12.4e}", pt.p, pt.cfu);
    }
    println!("unconstrained baseline {uc_gap:.4}, blind baseline {buc_gap:.4}");
    println!("largest CFU on the grid {:.4e}", curve.max_cfu().unwrap_or(f64::NAN));
    Ok(())
}
