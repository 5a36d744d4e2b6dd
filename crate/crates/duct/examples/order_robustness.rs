//! Runs the same benchmark under several shuffled domain orders and
//! compares how stable the final average accuracy is for sequential
//! fine-tuning versus the full dual-consolidation method.
//!
//!     cargo run --release --example order_robustness [num_orders]

use duct_dil::experiment::{run_orders, ExperimentConfig, Method};
use duct_dil::numkit::Rng;

fn main() {
    let num_orders: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("num_orders must be a usize"))
        .unwrap_or(5);

    let mut rng = Rng::derive(7, 0x6f726472);
    let orders: Vec<Vec<usize>> = (0..num_orders)
        .map(|_| {
            let mut order: Vec<usize> = (0..5).collect();
            rng.shuffle(&mut order);
            order
        })
        .collect();
    println!("orders: {orders:?}");

    for method in [Method::Finetune, Method::Duct] {
        let cfg = ExperimentConfig::desk_default(method, 3);
        let agg = run_orders(&cfg, &orders).expect("orders run failed");
        println!(
            "{:<10} last_acc = {:.4} ± {:.4}   avg_acc = {:.4} ± {:.4}",
            method.name(),
            agg.mean_last_accuracy,
            agg.std_last_accuracy,
            agg.mean_average_accuracy,
            agg.std_average_accuracy
        );
    }
}
