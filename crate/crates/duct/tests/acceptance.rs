//! Acceptance suite: one test per release gate, each ending in a single
//! PASS line (run with `--nocapture` to see them). The gates cover solver
//! correctness against an exact oracle, gradient fidelity, merge identities,
//! the headline forgetting-reduction and ablation-ladder comparisons, order
//! robustness, infrastructure round-trips, and exact metric fixtures.

mod common;

use std::time::Instant;

use duct_dil::consolidate::{task_vector, MergeState};
use duct_dil::data::{generate, load_dataset, save_dataset, BenchmarkSpec};
use duct_dil::eval::{forgetting_measure, summarize, AccuracyMatrix};
use duct_dil::experiment::{run_experiment, run_orders, ExperimentConfig, ExperimentState, Method};
use duct_dil::model::{Backbone, CosineClassifier, WeightMap};
use duct_dil::numkit::{Matrix, Rng};
use duct_dil::train::{loss_gradients, mean_loss, LabeledBatch, TrainableBlock};
use duct_dil::transport::{sinkhorn, uniform_marginal, CostMatrix};

use common::exact_transport_cost;

#[test]
fn criterion_1_sinkhorn_matches_exact_lp() {
    let start = Instant::now();
    let mut rng = Rng::derive(11, 0x6c700000);
    for case in 0..50 {
        let m = 2 + rng.next_below(4); // 2..=5
        let n = 2 + rng.next_below(4);
        let q = Matrix::new(m, n, (0..m * n).map(|_| 0.5 + rng.next_f64()).collect()).unwrap();
        let lp = exact_transport_cost(&q);

        let cost = CostMatrix { q: q.clone() };
        let plan = sinkhorn(
            &cost,
            &uniform_marginal(m),
            &uniform_marginal(n),
            1e-3,
            500_000,
            1e-9,
        )
        .unwrap();
        let (row_res, col_res) = plan.marginal_residuals();
        assert!(
            row_res <= 1e-6 && col_res <= 1e-6,
            "case {case}: residuals {row_res:.2e}/{col_res:.2e} above 1e-6"
        );
        let entropic = plan.cost(&q);
        assert!(
            (entropic - lp).abs() <= 0.01 * lp,
            "case {case}: entropic {entropic:.6} vs exact {lp:.6}"
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        elapsed < 10.0,
        "solver comparison took {elapsed:.1}s, budget 10s"
    );
    println!("criterion 1 (entropic solver vs exact LP, 50 cases): PASS");
}

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = Rng::derive(13, 0x67726164);
    let backbone = Backbone::mlp(6, 8, &mut rng).unwrap();
    let num_classes = 4;
    let clf = {
        let w = Matrix::new(
            8,
            2 * num_classes,
            (0..8 * 2 * num_classes)
                .map(|_| rng.uniform(-1.0, 1.0))
                .collect(),
        )
        .unwrap();
        CosineClassifier::new(w, num_classes, CosineClassifier::DEFAULT_SCALE).unwrap()
    };
    let batch = {
        let n = 24;
        let inputs = Matrix::new(n, 6, (0..n * 6).map(|_| rng.normal()).collect()).unwrap();
        let labels = (0..n).map(|_| rng.next_below(num_classes)).collect();
        LabeledBatch::new(inputs, labels).unwrap()
    };
    let block = TrainableBlock { domain: 1 };
    let (_, gw, _, gclf) = loss_gradients(&backbone, &clf, &batch, block).unwrap();

    let h = 1e-6;
    let mut checked = 0;
    let check = |fd: f64, g: f64, what: &str| {
        let denom = g.abs().max(fd.abs()).max(1e-12);
        assert!(
            (fd - g).abs() < 1e-8 || (fd - g).abs() / denom < 1e-4,
            "{what}: fd {fd:.3e} vs analytic {g:.3e}"
        );
    };

    // Joint loss: every weight of every backbone layer.
    #[allow(clippy::needless_range_loop)]
    for l in 0..backbone.num_layers() {
        let (w, _) = backbone.layer(l);
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                let eval = |delta: f64| {
                    let mut wm = WeightMap::new();
                    for (name, m) in backbone.weights().entries() {
                        let mut m2 = m.clone();
                        if name == &format!("layer{l}/weight") {
                            m2.set(i, j, m2.get(i, j) + delta);
                        }
                        wm.insert(name, m2).unwrap();
                    }
                    let bb = backbone.with_weights(wm).unwrap();
                    joint_loss(&bb, &clf, &batch, block)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                check(fd, gw[l].get(i, j), "backbone weight");
                checked += 1;
            }
        }
    }

    // Head-only loss on frozen embeddings: the trainable block's columns.
    let (bs, be) = clf.block_range(block.domain);
    for i in 0..clf.embed_dim() {
        for c in bs..be {
            let eval = |delta: f64| {
                let mut clf2 = clf.clone();
                let w = clf2.weights_mut();
                w.set(i, c, w.get(i, c) + delta);
                joint_loss(&backbone, &clf2, &batch, block)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            check(fd, gclf.get(i, c), "classifier weight");
            checked += 1;
        }
    }

    assert!(checked >= 100, "only {checked} parameters checked");
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        elapsed < 10.0,
        "gradient check took {elapsed:.1}s, budget 10s"
    );
    println!("criterion 2 (finite-difference gradient fidelity, {checked} params): PASS");
}

fn joint_loss(
    backbone: &Backbone,
    clf: &CosineClassifier,
    batch: &LabeledBatch,
    block: TrainableBlock,
) -> f64 {
    mean_loss(backbone, clf, batch, block.domain).unwrap()
}

#[test]
fn criterion_3_merge_identities() {
    let mut rng = Rng::derive(17, 0x6d657267);
    let base = Backbone::mlp(8, 8, &mut rng).unwrap();

    // (a) single task, full weight: merged forward == fine-tuned forward.
    let ft = perturb(&base, &mut rng, 0.2);
    let tv = task_vector(ft.weights(), base.weights(), 0).unwrap();
    let merged = MergeState::new(base.weights().clone(), 1.0)
        .merge_incremental(&tv, 1.0)
        .unwrap();
    let merged_bb = base.with_weights(merged.merged().clone()).unwrap();
    for _ in 0..20 {
        let x: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let a = merged_bb.forward(&x).unwrap();
        let b = ft.forward(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-12, "forward mismatch {u} vs {v}");
        }
    }

    // (b) incremental merge equals the batch weighted sum, 5 random runs.
    for run in 0..5 {
        let alpha = 0.25 + 0.15 * run as f64;
        let num_tasks = 2 + run % 4;
        let mut inc = MergeState::new(base.weights().clone(), alpha);
        let mut batch_sum = base.weights().clone();
        for t in 0..num_tasks {
            let ft_t = perturb(&base, &mut rng, 0.2);
            let tv_t = task_vector(ft_t.weights(), base.weights(), t).unwrap();
            let sim = 0.8 + 0.2 * rng.next_f64();
            inc = inc.merge_incremental(&tv_t, sim).unwrap();
            batch_sum = batch_sum.add_scaled(&tv_t.delta, alpha * sim).unwrap();
        }
        let diff = inc.merged().max_abs_diff(&batch_sum);
        assert!(
            diff <= 1e-12,
            "run {run}: incremental vs batch diff {diff:.3e}"
        );
    }
    println!("criterion 3 (task-vector merge identities): PASS");
}

fn perturb(base: &Backbone, rng: &mut Rng, scale: f64) -> Backbone {
    let mut w = WeightMap::new();
    for (name, m) in base.weights().entries() {
        let mut out = m.clone();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                out.set(i, j, out.get(i, j) + scale * rng.normal());
            }
        }
        w.insert(name, out).unwrap();
    }
    base.with_weights(w).unwrap()
}

#[test]
fn criterion_4_forgetting_reduction_over_finetune() {
    let start = Instant::now();
    let mut gap_sum = 0.0;
    let mut ft_fgt = 0.0;
    let mut duct_fgt = 0.0;
    let seeds = 5;
    for seed in 0..seeds {
        let ft = run_experiment(ExperimentConfig::desk_default(Method::Finetune, seed)).unwrap();
        let duct = run_experiment(ExperimentConfig::desk_default(Method::Duct, seed)).unwrap();
        gap_sum += duct.metrics.average_accuracy - ft.metrics.average_accuracy;
        ft_fgt += ft.metrics.forgetting.unwrap();
        duct_fgt += duct.metrics.forgetting.unwrap();
    }
    let elapsed = start.elapsed().as_secs_f64();
    let gap = gap_sum / seeds as f64;
    assert!(
        duct_fgt <= 0.5 * ft_fgt,
        "forgetting {:.4} above half of sequential fine-tuning's {:.4}",
        duct_fgt / seeds as f64,
        ft_fgt / seeds as f64
    );
    assert!(gap >= 0.05, "average-accuracy gap {gap:.4} below 5 points");
    assert!(
        elapsed < 240.0,
        "paired runs took {elapsed:.0}s, budget 240s"
    );
    println!(
        "criterion 4 (forgetting reduction: gap {gap:.3}, forgetting ratio {:.2}, {elapsed:.0}s): PASS",
        duct_fgt / ft_fgt
    );
}

#[test]
fn criterion_5_ablation_ladder_monotone() {
    let mut holds = 0;
    for seed in 0..5 {
        let avg = |method: Method| {
            run_experiment(ExperimentConfig::desk_default(method, seed))
                .unwrap()
                .metrics
                .average_accuracy
        };
        let bc = avg(Method::BaselineCenters);
        let v1 = avg(Method::Variation1);
        let v3 = avg(Method::Variation3);
        let full = avg(Method::Duct);
        if full >= v3 && v3 >= v1 && v1 >= bc {
            holds += 1;
        }
    }
    assert!(holds >= 4, "ladder ordering held on only {holds}/5 seeds");
    println!("criterion 5 (ablation ladder monotone on {holds}/5 seeds): PASS");
}

#[test]
fn criterion_6_order_robustness() {
    let mut rng = Rng::derive(7, 0x6f726472);
    let orders: Vec<Vec<usize>> = (0..5)
        .map(|_| {
            let mut order: Vec<usize> = (0..5).collect();
            rng.shuffle(&mut order);
            order
        })
        .collect();
    let std_of = |method: Method| {
        run_orders(&ExperimentConfig::desk_default(method, 3), &orders)
            .unwrap()
            .std_last_accuracy
    };
    let duct_std = std_of(Method::Duct);
    let ft_std = std_of(Method::Finetune);
    assert!(
        duct_std <= ft_std,
        "final-accuracy std {duct_std:.4} above sequential fine-tuning's {ft_std:.4}"
    );
    println!("criterion 6 (order robustness: std {duct_std:.4} <= {ft_std:.4}): PASS");
}

#[test]
fn criterion_7_infrastructure_round_trips() {
    let dir = tempfile::tempdir().unwrap();

    // Dataset files round-trip bit-exactly.
    let spec = BenchmarkSpec::desk_default(0);
    let datasets = generate(&spec).unwrap();
    let stem = dir.path().join("domain0");
    save_dataset(&stem, &datasets[0], spec.num_classes).unwrap();
    let loaded = load_dataset(&stem, 0).unwrap();
    assert_eq!(loaded.train.labels, datasets[0].train.labels);
    assert_eq!(loaded.train.inputs.data(), datasets[0].train.inputs.data());
    assert_eq!(loaded.test.inputs.data(), datasets[0].test.inputs.data());

    // Checkpoint files round-trip bit-exactly (save -> load -> save).
    let cfg = ExperimentConfig::desk_default(Method::Duct, 0);
    let mut state = ExperimentState::new(cfg.clone()).unwrap();
    state.run_stage().unwrap();
    state.run_stage().unwrap();
    let ckpt_a = dir.path().join("a.duct");
    let ckpt_b = dir.path().join("b.duct");
    state.save(&ckpt_a).unwrap();
    let reloaded = ExperimentState::load(&ckpt_a, cfg.clone()).unwrap();
    reloaded.save(&ckpt_b).unwrap();
    assert_eq!(
        std::fs::read(&ckpt_a).unwrap(),
        std::fs::read(&ckpt_b).unwrap(),
        "checkpoint bytes changed across load/save"
    );

    // Mid-run resume reproduces the uninterrupted report bit-exactly.
    let mut full = ExperimentState::new(cfg.clone()).unwrap();
    full.run_to_completion().unwrap();
    let reference = full.report().unwrap().reproducible_json();
    let mut resumed = ExperimentState::load(&ckpt_a, cfg).unwrap();
    resumed.run_to_completion().unwrap();
    assert_eq!(reference, resumed.report().unwrap().reproducible_json());

    // Exemplar-free audit on every method: training data is only ever read
    // for the stage currently being learned.
    for method in Method::ALL {
        let report = run_experiment(ExperimentConfig::desk_default(method, 1)).unwrap();
        for read in &report.train_reads {
            assert!(
                read.stage >= read.position,
                "{}: stage-{} data read at position {}",
                method.name(),
                read.stage,
                read.position
            );
        }
    }
    println!("criterion 7 (round-trips, resume, exemplar-free audit): PASS");
}

#[test]
fn criterion_8_metric_fixtures_exact() {
    // Single stage: both summary accuracies equal the lone entry, and the
    // forgetting measure is absent.
    let single = AccuracyMatrix::from_rows(vec![vec![0.8]]).unwrap();
    let m = summarize(&single).unwrap();
    assert_eq!(m.average_accuracy, 0.8);
    assert_eq!(m.last_accuracy, 0.8);
    assert!(m.forgetting.is_none());

    // Two stages with known arithmetic.
    let two = AccuracyMatrix::from_rows(vec![vec![1.0], vec![0.5, 0.5]]).unwrap();
    let m = summarize(&two).unwrap();
    assert_eq!(m.per_stage_accuracy, vec![1.0, 0.5]);
    assert_eq!(m.average_accuracy, 0.75);
    assert_eq!(m.last_accuracy, 0.5);

    // Forgetting: max drop on the old domain.
    let drop = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.7, 0.8]]).unwrap();
    assert_eq!(forgetting_measure(&drop).unwrap(), 0.9 - 0.7);

    // Constant matrix: no forgetting.
    let flat =
        AccuracyMatrix::from_rows(vec![vec![0.6], vec![0.6, 0.6], vec![0.6, 0.6, 0.6]]).unwrap();
    assert_eq!(forgetting_measure(&flat).unwrap(), 0.0);
    println!("criterion 8 (exact metric fixtures): PASS");
}
