//! Choosing polynomial degree and ridge strength by k-fold cross-validation, for the
//! structural equations, the fair predictor and a baseline.
//!
//! cargo run --release --example cross_validation

use cfsense::anm::{fit_model_a, Design};
use cfsense::basis::StructuralBasis;
use cfsense::graph::CausalGraph;
use cfsense::io::{generate, SyntheticSpec};
use cfsense::modelsel::{self, CvPlan};
use cfsense::predictor::{resolve_mask, BaselineKind};

fn main() -> cfsense::Result<()> {
    let graph = CausalGraph::nhs();
    let data = generate(&SyntheticSpec::nhs(800, 0.3, 5))?.standardized();
    let plan = CvPlan::new(data.len(), 5, vec![1, 2, 3], vec![0.01, 0.1, 1.0, 10.0], 0)?;

    let structural = modelsel::select_structural(&data, &graph, &plan)?;
    println!("structural equations: degree {}, lambda {}", structural.degree, structural.lambda);
    for s in &structural.scores {
        println!("  degree {} lambda {:>5}: {:?}", s.degree, s.lambda, s.mse);
    }

    let design = Design::new(&StructuralBasis::uniform(&graph, structural.degree)?, &data)?;
    let fit = fit_model_a(&design, structural.lambda)?;
    let residuals = design.residuals(&fit.weights);
    let unfair = resolve_mask(&graph, None)?;
    let predictor = modelsel::select_cf_predictor(&residuals, &design.x, &data.target, &unfair, &plan)?;
    println!("fair predictor: degree {}, lambda {}, MSE {:.4}", predictor.degree, predictor.lambda, predictor.mse);

    let baseline = modelsel::select_baseline(&data, BaselineKind::Unconstrained, &plan)?;
    println!("unconstrained baseline: degree {}, lambda {}, MSE {:.4}", baseline.degree, baseline.lambda, baseline.mse);
    Ok(())
}
