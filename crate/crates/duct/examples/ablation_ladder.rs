//! Runs every method on the same synthetic benchmark and prints the
//! summary metrics side by side, sequential fine-tuning included.
//!
//!     cargo run --release --example ablation_ladder [seed]

use duct_dil::experiment::{run_experiment, ExperimentConfig, Method};

fn main() {
    let seed = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("seed must be a u64"))
        .unwrap_or(0);

    println!(
        "{:<18} {:>8} {:>8} {:>10}",
        "method", "avg", "last", "forgetting"
    );
    for method in Method::ALL {
        let cfg = ExperimentConfig::desk_default(method, seed);
        let report = run_experiment(cfg).expect("run failed");
        let m = &report.metrics;
        println!(
            "{:<18} {:>8.4} {:>8.4} {:>10}",
            method.name(),
            m.average_accuracy,
            m.last_accuracy,
            m.forgetting.map_or("-".to_string(), |f| format!("{f:.4}")),
        );
    }
}
