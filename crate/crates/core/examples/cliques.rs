//! Restricting which error pairs may correlate. Features that share no clique keep
//! an exact zero correlation, and the optimizer searches only the allowed pairs.
//!
//! The graph here has no `O -> J` edge, so a correlated `O, J` error pair changes the
//! refitted equations in a way abduction does not undo. CFU is not concave in the
//! correlation, so the ascent is restarted from both signs and the larger result kept.
//!
//! cargo run --release --example cliques

use cfsense::basis::StructuralBasis;
use cfsense::cfu::ModelAArtifacts;
use nalgebra::DMatrix;

use cfsense::correlation::{materialize, CorrelationParams};
use cfsense::graph::{validate, GraphSpec};
use cfsense::io::{generate, SyntheticSpec, TargetSpec};
use cfsense::maxcfu::{self, OptimizerConfig, StepRule};
use cfsense::predictor::resolve_mask;

fn main() -> cfsense::Result<()> {
    let spec = GraphSpec::new("A", &["O", "M", "J"], &["A->O", "A->M", "O->M", "M->J"]);
    let graph = validate(&spec)?;
    let synthetic = SyntheticSpec {
        graph: spec,
        degrees: vec![1, 1, 1],
        // O: (1, a); M: (1, a, o); J: (1, m).
        weights: vec![0.2, -0.8, 0.0, -0.5, 0.6, 0.1, 0.7],
        sigmas: vec![1.0, 0.9, 0.8],
        correlation: vec![vec![1.0, 0.0, 0.5], vec![0.0, 1.0, 0.0], vec![0.5, 0.0, 1.0]],
        target: TargetSpec {
            intercept: 0.0,
            protected: 0.0,
            features: vec![0.4, 0.3, 0.5],
            noise_sd: 0.5,
        },
        n: 1000,
        seed: 4,
    };
    let data = generate(&synthetic)?.standardized();
    let basis = StructuralBasis::uniform(&graph, 1)?;
    let art = ModelAArtifacts::fit(&basis, &data, 0.1, 1, 0.1, resolve_mask(&graph, None)?, None)?;

    let cliques = vec![vec![0, 2]];
    let start = CorrelationParams::cliques(3, &cliques, 0.5, 0)?;
    println!("allowed pairs {:?}", start.allowed_pairs());

    let mut best = None;
    for sign in [1.0, -1.0] {
        let config = OptimizerConfig {
            p_max: 0.5,
            iterations: 200,
            batch_size: Some(art.n()),
            step_rule: StepRule::Normalized,
            step_decay: true,
            cliques: Some(cliques.clone()),
            warm_start_factor: Some(DMatrix::from_column_slice(3, 1, &[0.5 * sign, 0.0, 0.5])),
            ..OptimizerConfig::default()
        };
        let r = maxcfu::maximize(&art, &config)?;
        println!("start sign {sign:+}: CFU {:.4e}, P[O][J] {:+.3}", r.cfu_final, r.correlation[(0, 2)]);
        if best.as_ref().is_none_or(|b: &maxcfu::MaxCfuResult| r.cfu_final > b.cfu_final) {
            best = Some(r);
        }
    }
    let best = best.expect("two starts ran");
    println!("worst-case CFU {:.4e}", best.cfu_final);
    println!("correlation{:.3}", materialize(&best.params));
    Ok(())
}
