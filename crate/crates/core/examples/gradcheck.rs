//! Finite-difference check of tap gradients on random networks.
//!
//! cargo run --example gradcheck -- [seed] [graphs]

use gaia::gradcheck::{run, GradcheckConfig};

fn main() -> gaia::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let graphs = args.next().map_or(20, |s| s.parse().expect("graph count"));
    let report = run(&GradcheckConfig { seed, graphs, ..Default::default() })?;
    println!(
        "{} graphs, {} elements checked, {} kinks skipped, max relative error {:.2e}",
        report.graphs, report.checked, report.skipped_kinks, report.max_rel_error
    );
    for m in &report.mismatches {
        println!("  graph {} tap {} ({}) [{}]: analytic {:e} numeric {:e}", m.graph, m.tap, m.op, m.index, m.analytic, m.numeric);
    }
    println!("{}", if report.passed() { "PASS" } else { "FAIL" });
    Ok(())
}
