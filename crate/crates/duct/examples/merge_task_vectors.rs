//! Demonstrates the task-vector arithmetic behind representation merging:
//! a single fine-tune merged back with full weight reproduces the fine-tuned
//! network exactly, and absorbing task vectors one at a time matches the
//! closed-form weighted sum.
//!
//!     cargo run --release --example merge_task_vectors

use duct_dil::consolidate::{task_vector, MergeState};
use duct_dil::model::{Backbone, WeightMap};
use duct_dil::numkit::Rng;

fn random_backbone(rng: &mut Rng) -> Backbone {
    Backbone::mlp(8, 8, rng).expect("backbone init failed")
}

fn perturbed(base: &Backbone, rng: &mut Rng, scale: f64) -> Backbone {
    let mut w = WeightMap::new();
    for (name, m) in base.weights().entries() {
        let mut out = m.clone();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                out.set(i, j, out.get(i, j) + scale * rng.normal());
            }
        }
        w.insert(name, out).expect("insert failed");
    }
    base.with_weights(w).expect("weights failed")
}

fn main() {
    let mut rng = Rng::derive(7, 0x6d657267);
    let base = random_backbone(&mut rng);

    // Single task, full merge weight: merged == fine-tuned, to rounding.
    let ft = perturbed(&base, &mut rng, 0.1);
    let tv = task_vector(ft.weights(), base.weights(), 0).expect("task vector");
    let merged = MergeState::new(base.weights().clone(), 1.0)
        .merge_incremental(&tv, 1.0)
        .expect("merge failed");
    let diff = merged.merged().max_abs_diff(ft.weights());
    println!("single-task identity: max |merged - finetuned| = {diff:.3e}");

    // Incremental absorption equals the batch weighted sum.
    let alpha = 0.5;
    let sims = [0.93, 0.88, 0.97];
    let mut inc = MergeState::new(base.weights().clone(), alpha);
    let mut batch = base.weights().clone();
    for (i, &sim) in sims.iter().enumerate() {
        let ft_i = perturbed(&base, &mut rng, 0.1);
        let tv_i = task_vector(ft_i.weights(), base.weights(), i).expect("task vector");
        inc = inc.merge_incremental(&tv_i, sim).expect("merge failed");
        batch = batch
            .add_scaled(&tv_i.delta, alpha * sim)
            .expect("sum failed");
    }
    let diff = inc.merged().max_abs_diff(&batch);
    println!("incremental vs batch sum: max diff = {diff:.3e}");
}
