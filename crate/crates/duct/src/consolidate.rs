//! Representation consolidation: task vectors, class centers, task
//! similarity, and the similarity-weighted incremental merge. The merge
//! state holds exactly two full weight maps (base and merged) no matter how
//! many tasks have been absorbed.

use crate::error::{DuctError, Result};
use crate::model::{Backbone, WeightMap};
use crate::numkit::{cosine_sim, Matrix, EPS};
use crate::train::LabeledBatch;

/// Relative weight change of one fine-tuned model against the base.
#[derive(Debug, Clone)]
pub struct TaskVector {
    pub delta: WeightMap,
    pub domain_index: usize,
}

/// Element-wise difference `finetuned - base`, name-aligned.
pub fn task_vector(
    finetuned: &WeightMap,
    base: &WeightMap,
    domain_index: usize,
) -> Result<TaskVector> {
    Ok(TaskVector {
        delta: finetuned.sub(base)?,
        domain_index,
    })
}

/// Per-class mean embeddings for one (backbone, domain) pair. Rows with
/// count 0 mark classes absent from the source data.
#[derive(Debug, Clone)]
pub struct ClassCenterTable {
    pub centers: Matrix,
    pub counts: Vec<usize>,
    pub domain_index: usize,
}

impl ClassCenterTable {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn present(&self, class: usize) -> bool {
        self.counts[class] > 0
    }
}

/// Mean embedding per class under a fixed backbone.
pub fn class_centers(
    backbone: &Backbone,
    data: &LabeledBatch,
    num_classes: usize,
    domain_index: usize,
) -> Result<ClassCenterTable> {
    let d = backbone.embed_dim();
    let mut sums = Matrix::zeros(num_classes, d);
    let mut counts = vec![0usize; num_classes];
    for i in 0..data.len() {
        let label = data.labels[i];
        if label >= num_classes {
            return Err(DuctError::Domain(format!(
                "label {label} >= |Y|={num_classes}"
            )));
        }
        let emb = backbone.forward(data.inputs.row(i))?;
        for (j, v) in emb.iter().enumerate() {
            sums.set(label, j, sums.get(label, j) + v);
        }
        counts[label] += 1;
    }
    for p in 0..num_classes {
        if counts[p] > 0 {
            let inv = 1.0 / counts[p] as f64;
            for j in 0..d {
                sums.set(p, j, sums.get(p, j) * inv);
            }
        }
    }
    Ok(ClassCenterTable {
        centers: sums,
        counts,
        domain_index,
    })
}

/// Mean cosine similarity between matching class centers of two tables.
/// Classes absent from either table are excluded from the mean.
pub fn task_similarity(
    centers_base: &ClassCenterTable,
    centers_ft: &ClassCenterTable,
) -> Result<f64> {
    if centers_base.num_classes() != centers_ft.num_classes()
        || centers_base.centers.cols() != centers_ft.centers.cols()
    {
        return Err(DuctError::Shape(
            "center tables disagree on |Y| or d".into(),
        ));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for p in 0..centers_base.num_classes() {
        if centers_base.present(p) && centers_ft.present(p) {
            total += cosine_sim(centers_base.centers.row(p), centers_ft.centers.row(p), EPS)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(DuctError::Precondition(
            "no overlapping classes between tables".into(),
        ));
    }
    Ok(total / n as f64)
}

/// Running merge over task vectors. Keeps exactly the base and the merged
/// weight maps; absorbed similarities are recorded for reporting and
/// checkpointing.
#[derive(Debug, Clone)]
pub struct MergeState {
    base: WeightMap,
    merged: WeightMap,
    pub alpha_phi: f64,
    pub applied_similarities: Vec<f64>,
}

impl MergeState {
    pub fn new(base: WeightMap, alpha_phi: f64) -> Self {
        let merged = base.clone();
        Self {
            base,
            merged,
            alpha_phi,
            applied_similarities: Vec::new(),
        }
    }

    pub fn restore(
        base: WeightMap,
        merged: WeightMap,
        alpha_phi: f64,
        applied_similarities: Vec<f64>,
    ) -> Result<Self> {
        if !base.compatible(&merged) {
            return Err(DuctError::Shape(
                "base/merged weight maps incompatible".into(),
            ));
        }
        Ok(Self {
            base,
            merged,
            alpha_phi,
            applied_similarities,
        })
    }

    pub fn base(&self) -> &WeightMap {
        &self.base
    }

    pub fn merged(&self) -> &WeightMap {
        &self.merged
    }

    /// merged <- merged + alpha_phi * sim * delta.
    pub fn merge_incremental(&self, tv: &TaskVector, sim: f64) -> Result<MergeState> {
        if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&sim) {
            return Err(DuctError::Precondition(format!(
                "similarity {sim} outside [-1, 1]"
            )));
        }
        let merged = self.merged.add_scaled(&tv.delta, self.alpha_phi * sim)?;
        let mut sims = self.applied_similarities.clone();
        sims.push(sim);
        Ok(MergeState {
            base: self.base.clone(),
            merged,
            alpha_phi: self.alpha_phi,
            applied_similarities: sims,
        })
    }

    /// Unweighted variant: similarity pinned at 1.
    pub fn merge_unweighted(&self, tv: &TaskVector) -> Result<MergeState> {
        self.merge_incremental(tv, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn random_map(rng: &mut Rng) -> WeightMap {
        let mut m = WeightMap::new();
        m.insert(
            "a",
            Matrix::new(2, 3, (0..6).map(|_| rng.normal()).collect()).unwrap(),
        )
        .unwrap();
        m.insert(
            "b",
            Matrix::new(3, 1, (0..3).map(|_| rng.normal()).collect()).unwrap(),
        )
        .unwrap();
        m
    }

    #[test]
    fn task_vector_of_identical_maps_is_zero() {
        let mut rng = Rng::new(1);
        let m = random_map(&mut rng);
        let tv = task_vector(&m, &m, 0).unwrap();
        for (_, t) in tv.delta.entries() {
            assert!(t.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn task_vector_inverts() {
        let mut rng = Rng::new(2);
        let base = random_map(&mut rng);
        let ft = random_map(&mut rng);
        let tv = task_vector(&ft, &base, 0).unwrap();
        let back = base.add_scaled(&tv.delta, 1.0).unwrap();
        assert!(back.max_abs_diff(&ft) < 1e-15);
    }

    #[test]
    fn task_vector_matches_per_entry_oracle() {
        let mut rng = Rng::new(3);
        let base = random_map(&mut rng);
        let ft = random_map(&mut rng);
        let tv = task_vector(&ft, &base, 0).unwrap();
        for (i, (name, t)) in tv.delta.entries().iter().enumerate() {
            let b = &base.entries()[i].1;
            let f = ft.get(name).unwrap();
            for k in 0..t.data().len() {
                assert_eq!(t.data()[k], f.data()[k] - b.data()[k]);
            }
        }
    }

    #[test]
    fn task_vector_incompatible_maps_rejected() {
        let mut rng = Rng::new(4);
        let a = random_map(&mut rng);
        let mut b = WeightMap::new();
        b.insert("a", Matrix::zeros(2, 2)).unwrap();
        assert!(task_vector(&a, &b, 0).is_err());
    }

    fn identity_backbone(d: usize) -> Backbone {
        let mut w = WeightMap::new();
        w.insert("layer0/weight", Matrix::identity(d)).unwrap();
        w.insert("layer0/bias", Matrix::zeros(d, 1)).unwrap();
        Backbone::from_weights(w, vec![d, d]).unwrap()
    }

    #[test]
    fn centers_are_means() {
        // tanh is monotone; use atanh-ed targets so embeddings hit [1,1] and [3,3] scaled down.
        let bb = identity_backbone(2);
        let x1 = [0.1f64, 0.1];
        let x2 = [0.3f64, 0.3];
        let data = LabeledBatch::new(
            Matrix::from_rows(&[x1.to_vec(), x2.to_vec()]).unwrap(),
            vec![0, 0],
        )
        .unwrap();
        let table = class_centers(&bb, &data, 1, 0).unwrap();
        let want = (x1[0].tanh() + x2[0].tanh()) / 2.0;
        assert!((table.centers.get(0, 0) - want).abs() < 1e-15);
        assert_eq!(table.counts[0], 2);
    }

    #[test]
    fn centers_order_invariant() {
        let mut rng = Rng::new(5);
        let bb = identity_backbone(3);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let data = LabeledBatch::new(Matrix::from_rows(&rows).unwrap(), labels.clone()).unwrap();

        let mut perm: Vec<usize> = (0..12).collect();
        rng.shuffle(&mut perm);
        let rows2: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let labels2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let data2 = LabeledBatch::new(Matrix::from_rows(&rows2).unwrap(), labels2).unwrap();

        let a = class_centers(&bb, &data, 3, 0).unwrap();
        let b = class_centers(&bb, &data2, 3, 0).unwrap();
        assert!(a.centers.max_abs_diff(&b.centers) < 1e-12);
    }

    #[test]
    fn centers_match_accumulate_divide_oracle() {
        let mut rng = Rng::new(6);
        let bb = identity_backbone(3);
        let rows: Vec<Vec<f64>> = (0..15)
            .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..15).map(|i| i % 3).collect();
        let data = LabeledBatch::new(Matrix::from_rows(&rows).unwrap(), labels.clone()).unwrap();
        let table = class_centers(&bb, &data, 3, 0).unwrap();

        for p in 0..3 {
            let mut acc = [0.0; 3];
            let mut n = 0;
            for (i, row) in rows.iter().enumerate() {
                if labels[i] == p {
                    for (j, v) in row.iter().enumerate() {
                        acc[j] += v.tanh();
                    }
                    n += 1;
                }
            }
            for j in 0..3 {
                assert!((table.centers.get(p, j) - acc[j] / n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_identical_tables_is_one() {
        let centers = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let t = ClassCenterTable {
            centers,
            counts: vec![3, 3],
            domain_index: 0,
        };
        assert!((task_similarity(&t, &t).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_orthogonal_tables_is_zero() {
        let a = ClassCenterTable {
            centers: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            counts: vec![1, 1],
            domain_index: 0,
        };
        let b = ClassCenterTable {
            centers: Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
            counts: vec![1, 1],
            domain_index: 0,
        };
        assert!(task_similarity(&a, &b).unwrap().abs() < 1e-12);
    }

    #[test]
    fn similarity_is_mean_of_per_class_cosines() {
        // class 0: identical rows (cos 1), class 1: orthogonal rows (cos 0).
        let a = ClassCenterTable {
            centers: Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0]]).unwrap(),
            counts: vec![1, 1],
            domain_index: 0,
        };
        let b = ClassCenterTable {
            centers: Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap(),
            counts: vec![1, 1],
            domain_index: 0,
        };
        assert!((task_similarity(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn similarity_skips_absent_classes_and_rejects_empty_overlap() {
        let a = ClassCenterTable {
            centers: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap(),
            counts: vec![1, 0],
            domain_index: 0,
        };
        let b = ClassCenterTable {
            centers: Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap(),
            counts: vec![1, 5],
            domain_index: 0,
        };
        assert!((task_similarity(&a, &b).unwrap() - 1.0).abs() < 1e-12);

        let none = ClassCenterTable {
            centers: Matrix::zeros(2, 2),
            counts: vec![0, 0],
            domain_index: 0,
        };
        assert!(task_similarity(&none, &b).is_err());
    }

    #[test]
    fn merge_with_zero_similarity_is_identity() {
        let mut rng = Rng::new(7);
        let base = random_map(&mut rng);
        let ft = random_map(&mut rng);
        let state = MergeState::new(base, 0.5);
        let tv = task_vector(&ft, state.base(), 0).unwrap();
        let next = state.merge_incremental(&tv, 0.0).unwrap();
        assert_eq!(next.merged(), state.merged());
        assert_eq!(next.applied_similarities, vec![0.0]);
    }

    #[test]
    fn single_task_full_merge_recovers_finetuned() {
        let mut rng = Rng::new(8);
        let base = random_map(&mut rng);
        let ft = random_map(&mut rng);
        let state = MergeState::new(base.clone(), 1.0);
        let tv = task_vector(&ft, &base, 0).unwrap();
        let next = state.merge_incremental(&tv, 1.0).unwrap();
        assert!(next.merged().max_abs_diff(&ft) < 1e-15);
    }

    #[test]
    fn incremental_equals_batch_sum() {
        let mut rng = Rng::new(9);
        let base = random_map(&mut rng);
        let alpha = 0.5;
        let mut state = MergeState::new(base.clone(), alpha);
        let mut batch = base.clone();
        for k in 0..4 {
            let ft = random_map(&mut rng);
            let sim = rng.uniform(-1.0, 1.0);
            let tv = task_vector(&ft, &base, k).unwrap();
            state = state.merge_incremental(&tv, sim).unwrap();
            batch = batch.add_scaled(&tv.delta, alpha * sim).unwrap();
        }
        assert!(state.merged().max_abs_diff(&batch) < 1e-12);
    }

    #[test]
    fn unweighted_merge_matches_sim_one_and_commutes() {
        let mut rng = Rng::new(10);
        let base = random_map(&mut rng);
        let ft1 = random_map(&mut rng);
        let ft2 = random_map(&mut rng);
        let tv1 = task_vector(&ft1, &base, 0).unwrap();
        let tv2 = task_vector(&ft2, &base, 1).unwrap();

        let state = MergeState::new(base.clone(), 0.7);
        let a = state.merge_unweighted(&tv1).unwrap();
        let b = state.merge_incremental(&tv1, 1.0).unwrap();
        assert_eq!(a.merged(), b.merged());

        let order1 = state
            .merge_unweighted(&tv1)
            .unwrap()
            .merge_unweighted(&tv2)
            .unwrap();
        let order2 = state
            .merge_unweighted(&tv2)
            .unwrap()
            .merge_unweighted(&tv1)
            .unwrap();
        assert!(order1.merged().max_abs_diff(order2.merged()) < 1e-12);
    }

    #[test]
    fn zero_alpha_merge_stays_at_base() {
        let mut rng = Rng::new(11);
        let base = random_map(&mut rng);
        let mut state = MergeState::new(base.clone(), 0.0);
        for k in 0..3 {
            let ft = random_map(&mut rng);
            let tv = task_vector(&ft, &base, k).unwrap();
            state = state.merge_unweighted(&tv).unwrap();
        }
        assert_eq!(state.merged(), &base);
    }
}
