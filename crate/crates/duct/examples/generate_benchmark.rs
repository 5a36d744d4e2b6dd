//! Generates the synthetic multi-domain benchmark, saves every domain to
//! disk, reloads one to show the round-trip, and quantifies the domain
//! shift: a backbone trained on the clean pretraining domain loses accuracy
//! on each shifted domain.
//!
//!     cargo run --release --example generate_benchmark [out_dir]

use duct_dil::consolidate::class_centers;
use duct_dil::data::{
    generate, load_dataset, pretrain_backbone, pretraining_dataset, save_dataset, BenchmarkSpec,
};
use duct_dil::eval::accuracy;
use duct_dil::model::CosineClassifier;
use duct_dil::numkit::Matrix;
use duct_dil::train::TrainConfig;

fn main() {
    let out_dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "target/benchmark_demo".to_string());
    let spec = BenchmarkSpec::desk_default(0);
    let datasets = generate(&spec).expect("generation failed");

    std::fs::create_dir_all(&out_dir).expect("mkdir failed");
    for ds in &datasets {
        let stem = std::path::Path::new(&out_dir).join(format!("domain{}", ds.domain_index));
        save_dataset(&stem, ds, spec.num_classes).expect("save failed");
    }
    let reloaded =
        load_dataset(&std::path::Path::new(&out_dir).join("domain0"), 0).expect("load failed");
    assert_eq!(reloaded.train.len(), datasets[0].train.len());
    println!(
        "saved {} domains to {out_dir}, round-trip verified",
        datasets.len()
    );

    // Train once on the clean pretraining domain, then measure how far
    // accuracy falls on each shifted domain with the same frozen model.
    let (backbone, centers) =
        pretrain_backbone(&spec, &TrainConfig::desk(0)).expect("pretraining failed");
    let mut head = CosineClassifier::new(
        Matrix::zeros(backbone.embed_dim(), spec.num_classes),
        spec.num_classes,
        CosineClassifier::DEFAULT_SCALE,
    )
    .expect("classifier failed");
    head.set_block(0, &centers.centers.transpose())
        .expect("block failed");
    // Refresh centers on training data so the head matches the backbone.
    let pre = pretraining_dataset(&spec).expect("pretraining data failed");
    let refreshed = class_centers(&backbone, &pre.train, spec.num_classes, 0).expect("centers");
    head.set_block(0, &refreshed.centers.transpose())
        .expect("block failed");

    let base_acc = accuracy(&backbone, &head, &pre.test).expect("eval failed");
    println!("pretraining-domain accuracy: {base_acc:.3}");
    for ds in &datasets {
        let acc = accuracy(&backbone, &head, &ds.test).expect("eval failed");
        println!(
            "domain {} accuracy: {acc:.3} (drop {:+.3})",
            ds.domain_index,
            acc - base_acc
        );
    }
}
