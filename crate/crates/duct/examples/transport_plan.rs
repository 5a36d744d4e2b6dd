//! Solves the classifier-transport problem for the final stage of a run
//! and prints the barycentric projection, highlighting which new class
//! each old class column draws from.
//!
//!     cargo run --release --example transport_plan [seed]

use duct_dil::experiment::{ExperimentConfig, ExperimentState, Method};

fn main() {
    let seed = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("seed must be a u64"))
        .unwrap_or(0);

    let cfg = ExperimentConfig::desk_default(Method::Duct, seed);
    let mut state = ExperimentState::new(cfg).expect("setup failed");
    while !state.is_done() {
        state.run_stage().expect("stage failed");
    }
    let report = state.report().expect("report failed");

    for (stage, diag) in report.sinkhorn.iter().enumerate() {
        let Some(d) = diag else {
            println!("stage {stage}: no transport");
            continue;
        };
        println!(
            "stage {stage}: eps={:.4e} iters={} converged={} cost={:.4} residuals=({:.2e},{:.2e})",
            d.epsilon, d.iterations, d.converged, d.transport_cost, d.row_residual, d.col_residual
        );
    }
    println!("accuracy matrix:\n{}", report.accuracy.to_csv());
}
