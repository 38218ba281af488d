//! Counterfactual features: abduct each sample's errors under the fitted equations,
//! flip the protected attribute and recompute features in topological order.
//!
//! cargo run --example counterfactuals

use cfsense::anm::{counterfactual, fit_model_a, Design};
use cfsense::basis::StructuralBasis;
use cfsense::graph::CausalGraph;
use cfsense::io::{generate, SyntheticSpec};

fn main() -> cfsense::Result<()> {
    let graph = CausalGraph::law_school();
    let data = generate(&SyntheticSpec::law_school(500, 0.0, 1))?;
    let basis = StructuralBasis::uniform(&graph, 2)?;
    let design = Design::new(&basis, &data)?;
    let fit = fit_model_a(&design, 0.1)?;
    for i in 0..5 {
        let a = data.protected[i];
        let x = &data.features[i];
        let x_cf = counterfactual(&basis, &fit.weights, a, x, 1.0 - a);
        let back = counterfactual(&basis, &fit.weights, 1.0 - a, &x_cf, a);
        println!("a = {a}: x = {x:.3?} -> x' = {x_cf:.3?} -> back {back:.3?}");
    }
    Ok(())
}
