//! Path-specific fairness: features on fair paths enter the predictor as raw values,
//! so only the residuals of unfair features are exposed to confounding.
//!
//! cargo run --release --example path_specific

use nalgebra::DMatrix;

use cfsense::basis::StructuralBasis;
use cfsense::cfu::ModelAArtifacts;
use cfsense::correlation::CorrelationParams;
use cfsense::graph::{CausalGraph, PathSpecMask};
use cfsense::io::{generate, SyntheticSpec};
use cfsense::maxcfu::cfu_forward;
use cfsense::predictor::resolve_mask;

fn main() -> cfsense::Result<()> {
    let graph = CausalGraph::nhs();
    let data = generate(&SyntheticSpec::nhs(600, 0.4, 9))?.standardized();
    let basis = StructuralBasis::uniform(&graph, 1)?;
    let params = CorrelationParams::dense(3, 0.6, 0)?
        .with_factor(DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.8, 0.6, 0.0, -0.5, 0.4, 0.7]))?;
    let all: Vec<usize> = (0..data.len()).collect();

    let masks = [
        None,
        Some(PathSpecMask {
            unfair_nodes: vec!["O".into(), "M".into()],
            fair_nodes: vec!["J".into()],
        }),
        Some(PathSpecMask {
            unfair_nodes: vec!["J".into()],
            fair_nodes: vec!["O".into(), "M".into()],
        }),
    ];
    for mask in masks {
        let unfair = resolve_mask(&graph, mask.as_ref())?;
        let art = ModelAArtifacts::fit(&basis, &data, 0.5, 1, 0.1, unfair.clone(), mask)?;
        let fwd = cfu_forward(&art, &params, &all, &Default::default(), None)?;
        println!("unfair features {unfair:?}: CFU {:.4e}", fwd.cfu);
    }
    Ok(())
}
