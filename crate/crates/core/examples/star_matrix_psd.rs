//! A budget alone does not make a correlation matrix valid: the star pattern, one
//! hub correlated with every other node, loses positive semi-definiteness once the
//! correlation passes 1 / sqrt(n - 1).
//!
//! cargo run --example star_matrix_psd

use cfsense::correlation::{psd_check, star_matrix};

fn main() -> cfsense::Result<()> {
    for n in [3, 4, 5, 8] {
        let threshold = 1.0 / ((n - 1) as f64).sqrt();
        println!("n = {n}, threshold {threshold:.4}");
        for p in [0.3, 0.45, 0.55, 0.65, 0.75] {
            let report = psd_check(&star_matrix(n, p))?;
            println!(
                "  p = {p:.2}: min eigenvalue {:+.4} -> {}",
                report.min_eig,
                if report.is_psd { "valid" } else { "not PSD" }
            );
        }
    }
    Ok(())
}
