//! Interrupts a run halfway, saves a checkpoint, reloads it into a fresh
//! state, and finishes. The resumed run's report must match an
//! uninterrupted run byte for byte.
//!
//!     cargo run --release --example checkpoint_resume

use duct_dil::experiment::{ExperimentConfig, ExperimentState, Method};

fn main() {
    let cfg = ExperimentConfig::desk_default(Method::Duct, 0);
    let dir = tempdir();
    let ckpt = dir.join("checkpoint.duct");

    // Uninterrupted reference run.
    let mut full = ExperimentState::new(cfg.clone()).expect("setup failed");
    full.run_to_completion().expect("run failed");
    let reference = full.report().expect("report failed").reproducible_json();

    // Interrupted run: two stages, save, drop, reload, finish.
    let mut first = ExperimentState::new(cfg.clone()).expect("setup failed");
    first.run_stage().expect("stage failed");
    first.run_stage().expect("stage failed");
    first.save(&ckpt).expect("save failed");
    drop(first);

    let mut resumed = ExperimentState::load(&ckpt, cfg).expect("load failed");
    println!(
        "resumed at stage {}/{}",
        resumed.stages_done(),
        resumed.num_stages()
    );
    resumed.run_to_completion().expect("run failed");
    let report = resumed.report().expect("report failed").reproducible_json();

    assert_eq!(reference, report, "resumed report differs from reference");
    println!("resumed report matches the uninterrupted run byte for byte");
    std::fs::remove_dir_all(&dir).ok();
}

fn tempdir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("duct_resume_{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("mkdir failed");
    dir
}
