//! End-to-end run of the full dual-consolidation method on the built-in
//! synthetic benchmark: pretrain, then per stage fine-tune, merge the task
//! vector into the backbone, retrain the new classifier block, and transport
//! it onto the old blocks. Prints the per-stage step log, the lower-triangular
//! accuracy matrix, and the summary metrics.
//!
//!     cargo run --release --example full_pipeline [seed]

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
        println!("stage {}/{} done", state.stages_done(), state.num_stages());
    }
    let report = state.report().expect("report failed");

    for (stage, steps) in report.stage_steps.iter().enumerate() {
        let names: Vec<String> = steps.iter().map(|s| format!("{s:?}")).collect();
        println!("stage {stage} steps: {}", names.join(" -> "));
    }
    println!("\naccuracy matrix (row = stage, column = domain):");
    for row in report.accuracy.rows() {
        let cells: Vec<String> = row.iter().map(|a| format!("{a:.3}")).collect();
        println!("  {}", cells.join(" "));
    }
    let m = &report.metrics;
    println!(
        "\navg_acc={:.4} last_acc={:.4} forgetting={}",
        m.average_accuracy,
        m.last_accuracy,
        m.forgetting.map_or("-".to_string(), |f| format!("{f:.4}")),
    );
    println!("per-stage task similarities: {:?}", report.similarities);
}
