use proptest::prelude::*;
use simmatch_core::graph::{
    affinity_matrix, edges, lu_solve, propagate_closed, propagate_iterative, propagated_pseudo_label, topn_select,
};
use simmatch_core::{AffinityMatrix, GraphNode, NodeBank, ProbDist, Tensor};

fn unit_rows(raw: &[Vec<f64>]) -> Option<Tensor> {
    let mut rows = Vec::new();
    for r in raw {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-3 {
            return None;
        }
        rows.push(r.iter().map(|v| v / n).collect::<Vec<_>>());
    }
    Some(Tensor::from_rows(&rows).unwrap())
}

fn stochastic(raw: &[Vec<f64>]) -> Tensor {
    let rows: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn graph_inputs() -> impl Strategy<Value = (Tensor, Tensor)> {
    (2usize..10, 2usize..6, 2usize..5).prop_flat_map(|(n, d, c)| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n),
            prop::collection::vec(prop::collection::vec(0.01f64..1.0, c), n),
        )
            .prop_filter_map("non-degenerate embeddings", |(z, y)| {
                unit_rows(&z).map(|z| (z, stochastic(&y)))
            })
    })
}

fn max_row_drift(y: &Tensor) -> f64 {
    y.row_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn closed_form_matches_long_iteration((z, y0) in graph_inputs(), t in 0.05f64..1.0) {
        let a = affinity_matrix(&z, t).unwrap();
        for alpha in [0.1, 0.3, 0.5] {
            let closed = propagate_closed(&a, &y0, alpha).unwrap();
            let iterated = propagate_iterative(&a, &y0, alpha, 500).unwrap();
            prop_assert!(closed.max_abs_diff(&iterated) < 1e-8);
            prop_assert!(max_row_drift(&closed) <= 1e-9);
            prop_assert!(max_row_drift(&iterated) <= 1e-9);
        }
    }

    #[test]
    fn affinity_is_hollow_and_row_stochastic((z, _) in graph_inputs(), t in 0.05f64..1.0) {
        let a = affinity_matrix(&z, t).unwrap();
        let m = a.as_tensor();
        for i in 0..a.size() {
            prop_assert_eq!(m.get(i, i), 0.0);
            prop_assert!(m.row_slice(i).iter().all(|v| *v >= 0.0));
        }
        prop_assert!(max_row_drift(m) <= 1e-12);
    }

    #[test]
    fn one_full_step_is_the_edge_weighted_label((z, y0) in graph_inputs(), t in 0.05f64..1.0) {
        // Row 0 of A·Y0 against an oracle built from query-to-bank edges.
        let a = affinity_matrix(&z, t).unwrap();
        let y1 = propagate_iterative(&a, &y0, 1.0, 1).unwrap();
        let mut bank = NodeBank::new(z.rows()).unwrap();
        for j in 1..z.rows() {
            let label = ProbDist::normalized(y0.row_slice(j).to_vec()).unwrap();
            bank.insert(GraphNode::new(z.row_slice(j).to_vec(), label).unwrap()).unwrap();
        }
        let e = edges(z.row_slice(0), &bank, t).unwrap();
        for c in 0..y0.cols() {
            let expected: f64 = (1..z.rows()).map(|j| e.as_slice()[j - 1] * y0.get(j, c)).sum();
            prop_assert!((y1.get(0, c) - expected).abs() < 1e-14, "{} vs {}", y1.get(0, c), expected);
        }
    }

    #[test]
    fn lu_solution_has_small_residual(
        raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 5),
        rhs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 5),
    ) {
        // diagonally dominant, hence well conditioned
        let m = Tensor::from_fn(5, 5, |i, j| raw[i][j] + if i == j { 6.0 } else { 0.0 });
        let b = Tensor::from_rows(&rhs).unwrap();
        let x = lu_solve(&m, &b).unwrap();
        prop_assert!(m.matmul(&x).unwrap().max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn propagated_pseudo_labels_are_distributions(
        (z, y0) in graph_inputs(),
        n in 1usize..12,
        alpha in 0.01f64..0.99,
        t in 0.05f64..1.0,
    ) {
        let mut bank = NodeBank::new(z.rows()).unwrap();
        for j in 1..z.rows() {
            let label = ProbDist::normalized(y0.row_slice(j).to_vec()).unwrap();
            bank.store(j - 1, GraphNode::new(z.row_slice(j).to_vec(), label).unwrap()).unwrap();
        }
        let p_w = ProbDist::normalized(y0.row_slice(0).to_vec()).unwrap();
        let y = propagated_pseudo_label(z.row_slice(0), &p_w, &bank, n, alpha, t).unwrap();
        let s: f64 = y.as_slice().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-9);
        prop_assert!(y.as_slice().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn top_n_picks_the_most_similar((z, y0) in graph_inputs(), n in 1usize..12) {
        let mut bank = NodeBank::new(z.rows()).unwrap();
        for j in 0..z.rows() {
            let label = ProbDist::normalized(y0.row_slice(j).to_vec()).unwrap();
            bank.insert(GraphNode::new(z.row_slice(j).to_vec(), label).unwrap()).unwrap();
        }
        let q = z.row_slice(0);
        let hood = topn_select(q, &bank, n).unwrap();
        prop_assert_eq!(hood.indices.len(), n.min(z.rows()));
        let sim = |j: usize| z.row_slice(j).iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
        let worst_kept = hood.indices.iter().map(|&j| sim(j)).fold(f64::INFINITY, f64::min);
        for j in (0..z.rows()).filter(|j| !hood.indices.contains(j)) {
            prop_assert!(sim(j) <= worst_kept);
        }
    }
}

#[test]
fn two_node_closed_form() {
    // For A = [[0,1],[1,0]], (I − αA)⁻¹ = [[1, α],[α, 1]] / (1 − α²).
    let a = AffinityMatrix::new(Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap()).unwrap();
    let y0 = Tensor::identity(2);
    let y = propagate_closed(&a, &y0, 0.5).unwrap();
    let expected = [[2.0 / 3.0, 1.0 / 3.0], [1.0 / 3.0, 2.0 / 3.0]];
    for i in 0..2 {
        for j in 0..2 {
            assert!((y.get(i, j) - expected[i][j]).abs() < 1e-12);
        }
    }
    for alpha in [0.1, 0.3, 0.9] {
        let y = propagate_closed(&a, &y0, alpha).unwrap();
        let d = 1.0 - alpha * alpha;
        assert!((y.get(0, 0) - (1.0 - alpha) / d).abs() < 1e-12);
        assert!((y.get(0, 1) - (1.0 - alpha) * alpha / d).abs() < 1e-12);
    }
}

#[test]
fn iteration_approaches_the_fixed_point_geometrically() {
    let z = Tensor::from_rows(&[[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [-0.6, 0.8]]).unwrap();
    let a = affinity_matrix(&z, 0.5).unwrap();
    let y0 = Tensor::from_rows(&[[1.0, 0.0], [0.5, 0.5], [0.0, 1.0], [0.2, 0.8]]).unwrap();
    let alpha: f64 = 0.5;
    let fixed = propagate_closed(&a, &y0, alpha).unwrap();
    let mut previous = f64::INFINITY;
    for phi in [1, 2, 4, 8, 16, 32] {
        let err = propagate_iterative(&a, &y0, alpha, phi).unwrap().max_abs_diff(&fixed);
        assert!(err <= alpha.powi(phi as i32) * 2.0 + 1e-15, "phi {phi}: {err}");
        assert!(err < previous);
        previous = err;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn slow_mixing_iteration_still_reaches_the_closed_form((z, y0) in graph_inputs(), t in 0.05f64..1.0) {
        let a = affinity_matrix(&z, t).unwrap();
        let closed = propagate_closed(&a, &y0, 0.1).unwrap();
        let iterated = propagate_iterative(&a, &y0, 0.1, 1000).unwrap();
        prop_assert!(closed.max_abs_diff(&iterated) < 1e-10);
    }

    #[test]
    fn edges_follow_a_permutation_of_the_bank(
        (z, y0) in graph_inputs(),
        t in 0.05f64..1.0,
        shift in 1usize..10,
    ) {
        // node 0 is the query; the rest form the bank in two orders
        let n = z.rows();
        prop_assume!(n >= 3);
        let order: Vec<usize> = (1..n).collect();
        let rotated: Vec<usize> = (0..n - 1).map(|k| order[(k + shift) % (n - 1)]).collect();
        let bank_from = |idx: &[usize]| {
            let mut bank = NodeBank::new(idx.len()).unwrap();
            for &j in idx {
                let label = ProbDist::normalized(y0.row_slice(j).to_vec()).unwrap();
                bank.insert(GraphNode::new(z.row_slice(j).to_vec(), label).unwrap()).unwrap();
            }
            bank
        };
        let e = edges(z.row_slice(0), &bank_from(&order), t).unwrap();
        let e_rot = edges(z.row_slice(0), &bank_from(&rotated), t).unwrap();
        for (k, &j) in rotated.iter().enumerate() {
            prop_assert!((e_rot.as_slice()[k] - e.as_slice()[j - 1]).abs() <= 1e-15);
        }
    }
}
