//! The full pipeline from a configuration built in code: hyperparameter selection,
//! fitting, both sensitivity tools and every output file.
//!
//! cargo run --release --example end_to_end [OUT_DIR]

use cfsense::config::{RunConfig, Tool};
use cfsense::io::SyntheticSpec;
use cfsense::pipeline;

fn main() -> cfsense::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/end_to_end".into());
    let text = serde_json::json!({
        "data": {"synthetic": SyntheticSpec::law_school(800, 0.5, 2)},
        "tool": Tool::All,
        "maxcfu": {"budgets": [0.25, 0.5], "optimizer": {"iterations": 60}},
        "output_dir": out,
        "seed": 0,
    })
    .to_string();
    let config = RunConfig::from_json(&text)?;
    let summary = pipeline::run(&config)?;
    print!("{}", summary.report());
    println!("artifacts in {}", config.output_dir.display());
    Ok(())
}
