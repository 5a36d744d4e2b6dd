//! Classifier consolidation: squared-Euclidean cost between class centers,
//! entropic optimal transport via log-domain Sinkhorn, barycentric column
//! normalization of the plan, and the old-classifier interpolation.

use serde::{Deserialize, Serialize};

use crate::consolidate::ClassCenterTable;
use crate::error::{DuctError, Result};
use crate::numkit::{mat_mul, pairwise_sq_dist, Matrix};

/// Nonnegative beta x gamma transportation cost. Rows are current-domain
/// classes, columns are all old-domain classes concatenated in domain order.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub q: Matrix,
}

impl CostMatrix {
    pub fn mean(&self) -> f64 {
        let n = self.q.data().len();
        self.q.data().iter().sum::<f64>() / n as f64
    }
}

/// Squared Euclidean distances between current-domain centers and the
/// concatenation of all old-domain center tables.
pub fn build_cost(current: &ClassCenterTable, old: &[&ClassCenterTable]) -> Result<CostMatrix> {
    if old.is_empty() {
        return Err(DuctError::Precondition(
            "no old-domain center tables".into(),
        ));
    }
    let d = current.centers.cols();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for table in old {
        if table.centers.cols() != d {
            return Err(DuctError::Shape(
                "center tables disagree on embedding dim".into(),
            ));
        }
        for p in 0..table.num_classes() {
            rows.push(table.centers.row(p).to_vec());
        }
    }
    let old_stack = Matrix::from_rows(&rows)?;
    let q = pairwise_sq_dist(&current.centers, &old_stack)?;
    Ok(CostMatrix { q })
}

/// Sinkhorn solver settings. Epsilon is taken as `epsilon_scale * mean(Q)`
/// unless an absolute epsilon is given.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon_scale: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon_scale: 0.05,
            max_iters: 5000,
            tol: 1e-9,
        }
    }
}

/// Entropic coupling of two discrete marginals.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub t: Matrix,
    pub mu1: Vec<f64>,
    pub mu2: Vec<f64>,
    pub epsilon: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

impl TransportPlan {
    /// Linear transport cost <T, Q>.
    pub fn cost(&self, q: &Matrix) -> f64 {
        self.t.data().iter().zip(q.data()).map(|(t, c)| t * c).sum()
    }

    /// Max violation of the row and column marginal constraints.
    pub fn marginal_residuals(&self) -> (f64, f64) {
        let (rows, cols) = (self.t.rows(), self.t.cols());
        let mut row_res: f64 = 0.0;
        for i in 0..rows {
            let s: f64 = self.t.row(i).iter().sum();
            row_res = row_res.max((s - self.mu1[i]).abs());
        }
        let mut col_res: f64 = 0.0;
        for j in 0..cols {
            let s: f64 = (0..rows).map(|i| self.t.get(i, j)).sum();
            col_res = col_res.max((s - self.mu2[j]).abs());
        }
        (row_res, col_res)
    }
}

pub fn uniform_marginal(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn iteration for the entropically regularized
/// transportation problem. Alternating dual updates on f and g until the
/// marginal residuals fall below `tol` or `max_iters` is hit.
pub fn sinkhorn(
    cost: &CostMatrix,
    mu1: &[f64],
    mu2: &[f64],
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Result<TransportPlan> {
    let (beta, gamma) = (cost.q.rows(), cost.q.cols());
    if mu1.len() != beta || mu2.len() != gamma {
        return Err(DuctError::Shape(
            "marginal lengths do not match cost".into(),
        ));
    }
    for mu in [mu1, mu2] {
        if mu.iter().any(|v| *v < 0.0) {
            return Err(DuctError::Precondition("negative marginal entry".into()));
        }
        let s: f64 = mu.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(DuctError::Precondition(format!(
                "marginal sums to {s}, not 1"
            )));
        }
    }
    if epsilon <= 0.0 {
        return Err(DuctError::Precondition("epsilon must be positive".into()));
    }

    let log_mu1: Vec<f64> = mu1.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let log_mu2: Vec<f64> = mu2.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    // Dual potentials, scaled by 1/epsilon.
    let mut f = vec![0.0; beta];
    let mut g = vec![0.0; gamma];

    let plan_entry =
        |f: &[f64], g: &[f64], i: usize, j: usize| (f[i] + g[j] - cost.q.get(i, j) / epsilon).exp();

    let mut converged = false;
    let mut iterations_used = max_iters;
    for iter in 0..max_iters {
        for (i, fi) in f.iter_mut().enumerate() {
            let lse = log_sum_exp((0..gamma).map(|j| g[j] - cost.q.get(i, j) / epsilon));
            *fi = log_mu1[i] - lse;
        }
        for (j, gj) in g.iter_mut().enumerate() {
            let lse = log_sum_exp((0..beta).map(|i| f[i] - cost.q.get(i, j) / epsilon));
            *gj = log_mu2[j] - lse;
        }
        // After a g-update the column constraints hold exactly; check rows.
        let mut row_res: f64 = 0.0;
        for i in 0..beta {
            let s: f64 = (0..gamma).map(|j| plan_entry(&f, &g, i, j)).sum();
            row_res = row_res.max((s - mu1[i]).abs());
        }
        if row_res <= tol {
            converged = true;
            iterations_used = iter + 1;
            break;
        }
    }

    let mut t = Matrix::zeros(beta, gamma);
    for i in 0..beta {
        for j in 0..gamma {
            t.set(i, j, plan_entry(&f, &g, i, j));
        }
    }
    Ok(TransportPlan {
        t,
        mu1: mu1.to_vec(),
        mu2: mu2.to_vec(),
        epsilon,
        iterations_used,
        converged,
    })
}

/// Column-normalize a plan so each column is a convex-combination weight
/// vector over the new classes. Entropic plans have strictly positive
/// columns; an (impossible) zero column is reported as a numeric error.
pub fn barycentric_project(plan: &TransportPlan) -> Result<Matrix> {
    let (beta, gamma) = (plan.t.rows(), plan.t.cols());
    let mut out = Matrix::zeros(beta, gamma);
    for j in 0..gamma {
        let colsum: f64 = (0..beta).map(|i| plan.t.get(i, j)).sum();
        if colsum <= 0.0 || !colsum.is_finite() {
            return Err(DuctError::Numeric(format!("degenerate plan column {j}")));
        }
        for i in 0..beta {
            out.set(i, j, plan.t.get(i, j) / colsum);
        }
    }
    Ok(out)
}

/// Estimated old classifier: each column of `W_n * T_bar` is a convex
/// combination of new-classifier columns.
pub fn transport_classifier(w_new: &Matrix, t_bar: &Matrix) -> Result<Matrix> {
    mat_mul(w_new, t_bar)
}

/// Interpolated old classifier.
#[derive(Debug, Clone)]
pub struct ConsolidatedClassifier {
    pub weights: Matrix,
    pub alpha_w: f64,
}

/// Element-wise convex combination `(1 - alpha_w) * W_o + alpha_w * W_hat`.
pub fn consolidate_old(
    w_old: &Matrix,
    w_hat: &Matrix,
    alpha_w: f64,
) -> Result<ConsolidatedClassifier> {
    if !w_old.same_shape(w_hat) {
        return Err(DuctError::Shape(
            "old and transported classifiers differ in shape".into(),
        ));
    }
    if !(0.0..=1.0).contains(&alpha_w) {
        return Err(DuctError::Precondition(format!(
            "alpha_w {alpha_w} outside [0, 1]"
        )));
    }
    let weights = w_old.scale(1.0 - alpha_w).add_scaled(w_hat, alpha_w)?;
    Ok(ConsolidatedClassifier { weights, alpha_w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn table(rows: &[Vec<f64>]) -> ClassCenterTable {
        ClassCenterTable {
            centers: Matrix::from_rows(rows).unwrap(),
            counts: vec![1; rows.len()],
            domain_index: 0,
        }
    }

    #[test]
    fn cost_345() {
        let cur = table(&[vec![0.0, 0.0]]);
        let old = table(&[vec![3.0, 4.0]]);
        let q = build_cost(&cur, &[&old]).unwrap();
        assert!((q.q.get(0, 0) - 25.0).abs() < 1e-12);
    }

    #[test]
    fn cost_zero_blocks_for_identical_tables() {
        let cur = table(&[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let q = build_cost(&cur, &[&cur.clone()]).unwrap();
        assert_eq!(q.q.get(0, 0), 0.0);
        assert_eq!(q.q.get(1, 1), 0.0);
    }

    #[test]
    fn cost_matches_pairwise_oracle_over_concatenated_domains() {
        let mut rng = Rng::new(1);
        let mk = |rng: &mut Rng, n: usize| {
            table(
                &(0..n)
                    .map(|_| (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect())
                    .collect::<Vec<_>>(),
            )
        };
        let cur = mk(&mut rng, 3);
        let old1 = mk(&mut rng, 3);
        let old2 = mk(&mut rng, 3);
        let q = build_cost(&cur, &[&old1, &old2]).unwrap();
        assert_eq!(q.q.cols(), 6);
        for i in 0..3 {
            for (j, src) in [(0usize, &old1), (1, &old2)] {
                for p in 0..3 {
                    let want: f64 = cur
                        .centers
                        .row(i)
                        .iter()
                        .zip(src.centers.row(p))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum();
                    assert!((q.q.get(i, j * 3 + p) - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn sinkhorn_constant_cost_gives_uniform_plan() {
        let q = CostMatrix {
            q: Matrix::new(2, 2, vec![3.0; 4]).unwrap(),
        };
        let plan = sinkhorn(
            &q,
            &uniform_marginal(2),
            &uniform_marginal(2),
            0.1,
            5000,
            1e-10,
        )
        .unwrap();
        for v in plan.t.data() {
            assert!((v - 0.25).abs() < 1e-8);
        }
        assert!(plan.converged);
    }

    #[test]
    fn sinkhorn_small_epsilon_recovers_permutation() {
        let q = CostMatrix {
            q: Matrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
        };
        let plan = sinkhorn(
            &q,
            &uniform_marginal(2),
            &uniform_marginal(2),
            1e-3,
            20000,
            1e-10,
        )
        .unwrap();
        assert!((plan.t.get(0, 0) - 0.5).abs() < 1e-3);
        assert!(plan.t.get(0, 1).abs() < 1e-3);
        assert!(plan.t.get(1, 0).abs() < 1e-3);
        assert!((plan.t.get(1, 1) - 0.5).abs() < 1e-3);
    }

    #[test]
    fn sinkhorn_marginals_and_positivity() {
        let mut rng = Rng::new(2);
        let q = CostMatrix {
            q: Matrix::new(4, 5, (0..20).map(|_| rng.uniform(0.0, 3.0)).collect()).unwrap(),
        };
        let plan = sinkhorn(
            &q,
            &uniform_marginal(4),
            &uniform_marginal(5),
            0.05,
            5000,
            1e-9,
        )
        .unwrap();
        assert!(plan.converged);
        let (r, c) = plan.marginal_residuals();
        assert!(r <= 1e-6 && c <= 1e-6, "residuals {r} {c}");
        assert!(plan.t.data().iter().all(|v| *v > 0.0));
        let total: f64 = plan.t.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sinkhorn_monotone_in_epsilon() {
        let mut rng = Rng::new(3);
        for _ in 0..5 {
            let q = CostMatrix {
                q: Matrix::new(3, 4, (0..12).map(|_| rng.uniform(0.0, 2.0)).collect()).unwrap(),
            };
            let lo = sinkhorn(
                &q,
                &uniform_marginal(3),
                &uniform_marginal(4),
                0.01,
                20000,
                1e-10,
            )
            .unwrap();
            let hi = sinkhorn(
                &q,
                &uniform_marginal(3),
                &uniform_marginal(4),
                0.5,
                20000,
                1e-10,
            )
            .unwrap();
            assert!(lo.cost(&q.q) <= hi.cost(&q.q) + 1e-9);
        }
    }

    #[test]
    fn sinkhorn_rejects_bad_marginals() {
        let q = CostMatrix {
            q: Matrix::zeros(2, 2),
        };
        assert!(sinkhorn(&q, &[0.6, 0.6], &uniform_marginal(2), 0.1, 100, 1e-6).is_err());
        assert!(sinkhorn(&q, &[-0.5, 1.5], &uniform_marginal(2), 0.1, 100, 1e-6).is_err());
        assert!(sinkhorn(
            &q,
            &uniform_marginal(2),
            &uniform_marginal(2),
            0.0,
            100,
            1e-6
        )
        .is_err());
    }

    #[test]
    fn barycentric_uniform_plan() {
        let plan = TransportPlan {
            t: Matrix::new(2, 2, vec![0.25; 4]).unwrap(),
            mu1: uniform_marginal(2),
            mu2: uniform_marginal(2),
            epsilon: 0.1,
            iterations_used: 1,
            converged: true,
        };
        let tb = barycentric_project(&plan).unwrap();
        for v in tb.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn barycentric_columns_sum_to_one() {
        let mut rng = Rng::new(4);
        let q = CostMatrix {
            q: Matrix::new(3, 5, (0..15).map(|_| rng.uniform(0.0, 2.0)).collect()).unwrap(),
        };
        let plan = sinkhorn(
            &q,
            &uniform_marginal(3),
            &uniform_marginal(5),
            0.05,
            5000,
            1e-9,
        )
        .unwrap();
        let tb = barycentric_project(&plan).unwrap();
        for j in 0..5 {
            let s: f64 = (0..3).map(|i| tb.get(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
            for i in 0..3 {
                assert!(tb.get(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn transport_with_identity_and_one_hot_columns() {
        let mut rng = Rng::new(5);
        let w = Matrix::new(3, 2, (0..6).map(|_| rng.normal()).collect()).unwrap();
        let id = Matrix::identity(2);
        assert_eq!(transport_classifier(&w, &id).unwrap(), w);

        let one_hot = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let out = transport_classifier(&w, &one_hot).unwrap();
        for i in 0..3 {
            assert_eq!(out.get(i, 0), w.get(i, 1));
        }
    }

    #[test]
    fn consolidate_old_endpoints_and_midpoint() {
        let mut rng = Rng::new(6);
        let a = Matrix::new(2, 3, (0..6).map(|_| rng.normal()).collect()).unwrap();
        let b = Matrix::new(2, 3, (0..6).map(|_| rng.normal()).collect()).unwrap();
        assert_eq!(consolidate_old(&a, &b, 0.0).unwrap().weights, a);
        assert_eq!(consolidate_old(&a, &b, 1.0).unwrap().weights, b);
        let mid = consolidate_old(&a, &b, 0.5).unwrap().weights;
        for k in 0..6 {
            let want = 0.5 * a.data()[k] + 0.5 * b.data()[k];
            assert!((mid.data()[k] - want).abs() < 1e-15);
        }
        assert!(consolidate_old(&a, &b, 1.5).is_err());
    }
}
