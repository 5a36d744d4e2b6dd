//! Shared test helpers, including an exact solver for small transportation
//! problems used as the ground-truth oracle against the Sinkhorn solver.

use duct_dil::numkit::Matrix;

/// Exact optimum of the discrete transportation LP
///   min <T, Q>  s.t.  T 1 = mu1,  T' 1 = mu2,  T >= 0
/// for uniform marginals mu1 = 1/m, mu2 = 1/n, solved as integer min-cost
/// flow after scaling by lcm(m, n). Successive shortest paths with
/// Bellman-Ford; exact for these tiny instances.
pub fn exact_transport_cost(q: &Matrix) -> f64 {
    let (m, n) = (q.rows(), q.cols());
    let l = lcm(m, n);
    let supply = l / m; // units per source
    let demand = l / n; // units per sink

    // Node layout: 0 = source, 1..=m rows, m+1..=m+n cols, m+n+1 = sink.
    let num_nodes = m + n + 2;
    let source = 0;
    let sink = m + n + 1;

    // Edge list with residuals: (to, capacity, cost, index of reverse edge).
    let mut graph: Vec<Vec<(usize, i64, f64, usize)>> = vec![Vec::new(); num_nodes];
    let add_edge = |graph: &mut Vec<Vec<(usize, i64, f64, usize)>>,
                    u: usize,
                    v: usize,
                    cap: i64,
                    cost: f64| {
        let ru = graph[v].len();
        let rv = graph[u].len();
        graph[u].push((v, cap, cost, ru));
        graph[v].push((u, 0, -cost, rv));
    };
    for i in 0..m {
        add_edge(&mut graph, source, 1 + i, supply as i64, 0.0);
    }
    for j in 0..n {
        add_edge(&mut graph, 1 + m + j, sink, demand as i64, 0.0);
    }
    for i in 0..m {
        for j in 0..n {
            add_edge(&mut graph, 1 + i, 1 + m + j, l as i64, q.get(i, j));
        }
    }

    let mut flow_left = l as i64;
    let mut total_cost = 0.0;
    while flow_left > 0 {
        // Bellman-Ford shortest path from source by cost over residual edges.
        let mut dist = vec![f64::INFINITY; num_nodes];
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; num_nodes];
        dist[source] = 0.0;
        for _ in 0..num_nodes {
            let mut changed = false;
            for u in 0..num_nodes {
                if !dist[u].is_finite() {
                    continue;
                }
                for (e, &(v, cap, cost, _)) in graph[u].iter().enumerate() {
                    if cap > 0 && dist[u] + cost < dist[v] - 1e-15 {
                        dist[v] = dist[u] + cost;
                        prev[v] = Some((u, e));
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        assert!(
            dist[sink].is_finite(),
            "transportation network disconnected"
        );

        // Bottleneck along the path, then augment.
        let mut bottleneck = flow_left;
        let mut v = sink;
        while let Some((u, e)) = prev[v] {
            bottleneck = bottleneck.min(graph[u][e].1);
            v = u;
        }
        let mut v = sink;
        while let Some((u, e)) = prev[v] {
            graph[u][e].1 -= bottleneck;
            let rev = graph[u][e].3;
            graph[v][rev].1 += bottleneck;
            total_cost += bottleneck as f64 * graph[u][e].2;
            v = u;
        }
        flow_left -= bottleneck;
    }
    total_cost / l as f64
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

#[cfg(test)]
mod oracle_tests {
    use super::*;

    #[test]
    fn identity_cost_prefers_diagonal() {
        // 2x2 with cheap diagonal: optimum puts all mass on it.
        let q = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(exact_transport_cost(&q).abs() < 1e-12);
    }

    #[test]
    fn constant_cost_is_that_constant() {
        let q = Matrix::from_rows(&[vec![0.7, 0.7, 0.7], vec![0.7, 0.7, 0.7]]).unwrap();
        assert!((exact_transport_cost(&q) - 0.7).abs() < 1e-12);
    }
}
