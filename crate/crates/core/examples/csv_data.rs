//! Loading a dataset from CSV with a column-role schema. Rows with missing values are
//! dropped and counted; features are z-scored.
//!
//! cargo run --example csv_data

use std::io::Write;

use cfsense::graph::CausalGraph;
use cfsense::io::{load_csv, Schema};

fn main() -> cfsense::Result<()> {
    let dir = std::env::temp_dir().join("cfsense_csv_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("students.csv");
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "race,ugpa,lsat,zfya")?;
    for (a, g, l, y) in [(0, 3.1, 38.0, 0.2), (1, 2.9, 33.0, -0.4), (0, 3.6, 41.0, 0.9), (1, 3.3, 36.0, 0.1)] {
        writeln!(f, "{a},{g},{l},{y}")?;
    }
    writeln!(f, "1,,30,0.0")?;

    let schema = Schema {
        protected: "race".into(),
        target: "zfya".into(),
        features: [("G".to_string(), "ugpa".to_string()), ("L".to_string(), "lsat".to_string())]
            .into_iter()
            .collect(),
    };
    let data = load_csv(&path, &schema, &CausalGraph::law_school(), true)?;
    println!("{} rows kept, {} dropped", data.len(), data.dropped_rows);
    println!("features {:?}, scaling {:?}", data.feature_names, data.feature_stats);
    for i in 0..data.len() {
        println!("  a = {} x = {:.3?} y = {}", data.protected[i], data.features[i], data.target[i]);
    }
    Ok(())
}
