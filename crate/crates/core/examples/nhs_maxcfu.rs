//! Worst-case CFU over all error correlation matrices within a budget, for a
//! three-feature graph, swept over increasing budgets.
//!
//! cargo run --release --example nhs_maxcfu

use cfsense::basis::StructuralBasis;
use cfsense::cfu::ModelAArtifacts;
use cfsense::graph::CausalGraph;
use cfsense::io::{generate, SyntheticSpec};
use cfsense::maxcfu::{self, OptimizerConfig, StepRule};
use cfsense::predictor::resolve_mask;

fn main() -> cfsense::Result<()> {
    let graph = CausalGraph::nhs();
    let data = generate(&SyntheticSpec::nhs(1000, 0.5, 11))?.standardized();
    let basis = StructuralBasis::uniform(&graph, 2)?;
    let art = ModelAArtifacts::fit(&basis, &data, 1.0, 2, 0.1, resolve_mask(&graph, None)?, None)?;

    let config = OptimizerConfig {
        iterations: 150,
        step_rule: StepRule::Normalized,
        step_decay: true,
        ..OptimizerConfig::default()
    };
    let budgets = [0.1, 0.3, 0.5, 0.7];
    for run in maxcfu::budget_sweep(&art, &budgets, &config)? {
        match run.result {
            Ok(r) => println!(
                "budget {:.1}: CFU {:.4e}, min eigenvalue {:.3}, gradient check {:.1e}{}",
                run.budget,
                r.cfu_final,
                r.psd.min_eig,
                r.gradient_check.map_or(f64::NAN, |g| g.max_relative_error),
                if run.decreased { " (decreased)" } else { "" }
            ),
            Err(e) => println!("budget {:.1}: failed: {e}", run.budget),
        }
    }
    Ok(())
}
