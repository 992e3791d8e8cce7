use cablelab_core::graph::{DomainMask, WeightedGraph};
use cablelab_core::percolation::{arcsin_validation, monotone_coupling_check, one_arm_estimate, truncated_two_point, Window};
use proptest::prelude::*;

fn path(n: usize) -> WeightedGraph {
    let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 1.0)).collect();
    WeightedGraph::from_edges(n, &edges).unwrap()
}

#[test]
fn arcsin_on_the_two_vertex_path() {
    let g = path(4);
    let u = DomainMask::new(&g, &[1, 2]).unwrap();
    let w = Window::new(g, u, 1).unwrap();
    let row = &arcsin_validation(&w, &[(1, 2)], 40_000, 8, 2).unwrap()[0];
    assert!((row.green_ratio - 0.5).abs() < 1e-12);
    assert!((row.target - 1.0 / 6.0).abs() < 1e-12);
    assert!(row.z.abs() < 4.0, "{row:?}");
}

#[test]
fn estimates_do_not_depend_on_the_worker_count() {
    let w = Window::lattice(3, 10).unwrap();
    let a = one_arm_estimate(&w, &[0.0, 0.4], &[1, 2, 3], 300, 5, 1).unwrap();
    let b = one_arm_estimate(&w, &[0.0, 0.4], &[1, 2, 3], 300, 5, 4).unwrap();
    for (x, y) in a.iter().zip(&b) {
        for (r, s) in x.rows.iter().zip(&y.rows) {
            assert_eq!(r.estimate, s.estimate);
        }
    }
}

#[test]
fn one_arm_decreases_in_radius_and_level() {
    let w = Window::lattice(3, 15).unwrap();
    let res = one_arm_estimate(&w, &[-0.3, 0.0, 0.3], &[1, 2, 4, 6], 1500, 2, 2).unwrap();
    for level in &res {
        for pair in level.rows.windows(2) {
            assert!(pair[1].estimate.estimate <= pair[0].estimate.estimate);
        }
    }
    for (lo, hi) in res.iter().zip(res.iter().skip(1)) {
        for (a, b) in lo.rows.iter().zip(&hi.rows) {
            assert!(b.estimate.estimate <= a.estimate.estimate);
        }
    }
}

#[test]
fn truncated_connection_is_below_connection() {
    let w = Window::lattice(2, 12).unwrap();
    let x = w.base;
    let res = truncated_two_point(&w, &[-0.5, 0.0], x, x + 2, 1000, 3, 2).unwrap();
    for r in &res {
        assert!(r.truncated.estimate <= r.connected.estimate);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn coupled_levels_are_monotone_on_small_boxes(
        dim in 2usize..4,
        mut levels in proptest::collection::vec(-1.0..1.0f64, 2..5),
        seed in 0u64..10_000,
    ) {
        levels.dedup();
        let side = if dim == 2 { 11 } else { 7 };
        let w = Window::lattice(dim, side).unwrap();
        let far = w.graph.vertex_count() - 1;
        let rep = monotone_coupling_check(&w, &levels, &[1, 2], &[(w.base, far), (0, w.base)], 60, seed, 1).unwrap();
        prop_assert!(rep.holds(), "{:?}", rep);
    }
}
