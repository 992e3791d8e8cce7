use cablelab_core::graph::{build_lattice_box, DomainMask, WeightedGraph};
use cablelab_core::loopsoup::{
    crossing_frequency, loop_connection_check, loop_count_check, loop_mass_crossing, loop_mass_crossing_green,
    restriction_property_test, LoopDomain,
};
use cablelab_core::potential::GreenOperator;

fn path(n: usize) -> WeightedGraph {
    let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 1.0)).collect();
    WeightedGraph::from_edges(n, &edges).unwrap()
}

/// `tr(P^n) / n` by repeated dense multiplication.
fn trace_masses(graph: &WeightedGraph, members: &[usize], n_max: usize) -> Vec<f64> {
    let m = members.len();
    let p: Vec<Vec<f64>> = members
        .iter()
        .map(|&x| members.iter().map(|&y| graph.edge_between(x, y).map_or(0.0, |e| graph.edge(e).weight / graph.mass(x))).collect())
        .collect();
    let mut power = p.clone();
    let mut out = vec![0.0, 0.0];
    for n in 2..=n_max {
        power = (0..m).map(|i| (0..m).map(|j| (0..m).map(|k| power[i][k] * p[k][j]).sum()).collect()).collect();
        out.push((0..m).map(|i| power[i][i]).sum::<f64>() / n as f64);
    }
    out
}

fn weighted_ring() -> (WeightedGraph, DomainMask) {
    // a 7-cycle with a chord and one killed vertex
    let edges = [(0, 1, 1.0), (1, 2, 2.0), (2, 3, 0.5), (3, 4, 1.5), (4, 5, 1.0), (5, 6, 3.0), (6, 0, 1.0), (1, 4, 0.7)];
    let g = WeightedGraph::from_edges(7, &edges).unwrap();
    let u = DomainMask::new(&g, &[1, 2, 3, 4, 5, 6]).unwrap();
    (g, u)
}

#[test]
fn masses_match_dense_traces() {
    let (g, u) = weighted_ring();
    let d = LoopDomain::new(&g, u.clone(), 30).unwrap();
    let oracle = trace_masses(&g, u.members(), 30);
    for n in 2..=30 {
        assert!((d.masses().by_length[n] - oracle[n]).abs() < 1e-12, "n = {n}");
    }
    assert!((d.masses().total - d.total_from_spectrum()).abs() < 1e-10);
    assert!((d.masses().partial + d.masses().tail - d.masses().total).abs() < 1e-12);
}

#[test]
fn weighted_counts_follow_poisson_laws() {
    let (g, u) = weighted_ring();
    let d = LoopDomain::with_tail_fraction(&g, u, 1e-3).unwrap();
    let r = loop_count_check(&d, 0.5, 8, 20_000, 11, 2).unwrap();
    for row in &r.rows {
        assert!(row.z_mean.abs() < 4.0 && row.z_variance.abs() < 4.0, "{row:?}");
    }
    assert!(r.total_z.abs() < 4.0);
}

#[test]
fn path_length_two_mean_is_one_eighth() {
    let g = path(4);
    let d = LoopDomain::new(&g, DomainMask::new(&g, &[1, 2]).unwrap(), 40).unwrap();
    let r = loop_count_check(&d, 0.5, 4, 40_000, 3, 1).unwrap();
    assert!((r.rows[0].expected - 0.125).abs() < 1e-15);
    assert!((r.rows[0].mean - 0.125).abs() < 4.0 * (0.125f64 / 40_000.0).sqrt());
}

#[test]
fn restriction_on_the_path() {
    let g = path(5);
    let u = DomainMask::new(&g, &[1, 2, 3]).unwrap();
    let sub = DomainMask::new(&g, &[1, 2]).unwrap();
    let r = restriction_property_test(&g, &u, &sub, 0.5, 6, 40_000, 5, 2).unwrap();
    // P on {1, 2} has off-diagonal 1/2
    assert!((r.rows[0].analytic - 0.5 * 0.25).abs() < 1e-15);
    assert!(r.max_abs_z() < 4.0, "{r:?}");
}

#[test]
fn crossing_frequencies_follow_the_log_det_masses() {
    let (g, u) = build_lattice_box(2, 4).unwrap();
    let configs = vec![
        (vec![5], vec![6]),
        (vec![5], vec![10]),
        (vec![0], vec![15]),
        (vec![0, 1, 2, 3], vec![12, 13, 14, 15]),
    ];
    let d = LoopDomain::with_tail_fraction(&g, u.clone(), 1e-4).unwrap();
    let rows = crossing_frequency(&d, 0.5, &configs, 20_000, 2, 2).unwrap();
    let op = GreenOperator::new(&g, u.clone()).unwrap();
    for (row, (k, m)) in rows.iter().zip(&configs) {
        assert!(row.z.abs() < 4.0, "{row:?}");
        assert!(row.truncated_mass <= row.exact_mass + 1e-12);
        assert!((loop_mass_crossing_green(&op, k, m).unwrap() - row.exact_mass).abs() < 1e-10);
    }
}

#[test]
fn unreachable_sets_carry_no_crossing_mass() {
    // 0-1-2-3-4 with U = {0, 1, 3, 4}: K = {0} and M = {4} are in different components
    let g = path(5);
    let u = DomainMask::new(&g, &[0, 1, 3, 4]).unwrap();
    assert!(loop_mass_crossing(&g, &u, &[0], &[4]).unwrap().abs() < 1e-12);
}

#[test]
fn loop_clusters_under_connect() {
    let (g, u) = build_lattice_box(2, 6).unwrap();
    let shape = *g.lattice().unwrap();
    let c = shape.center();
    let pairs: Vec<(usize, usize)> =
        [[0, 1], [1, 1], [0, 2], [2, 2]].iter().map(|o| (c, shape.offset_from_center(o).unwrap())).collect();
    let d = LoopDomain::with_tail_fraction(&g, u, 1e-3).unwrap();
    let rows = loop_connection_check(&d, 0.5, &pairs, 5_000, 9, 2).unwrap();
    for row in &rows {
        assert!(row.within_bound, "{row:?}");
        assert!(row.target > 0.0 && row.target < 1.0);
    }
    assert!(rows[0].estimate.estimate > 0.0);
}

#[test]
fn crossing_mass_decays_like_inverse_radius_in_three_dimensions() {
    let (g, u) = build_lattice_box(3, 40).unwrap();
    let c = g.lattice().unwrap().center();
    let k = g.ball(c, 2).unwrap();
    let op = GreenOperator::new(&g, u.clone()).unwrap();
    let mass = |rho: usize| {
        let inner = g.ball(c, rho).unwrap();
        let m: Vec<usize> = u.members().iter().copied().filter(|x| inner.binary_search(x).is_err()).collect();
        loop_mass_crossing_green(&op, &k, &m).unwrap()
    };
    let masses: Vec<f64> = [4, 8, 16].iter().map(|&r| mass(r)).collect();
    for w in masses.windows(2) {
        let ratio = w[1] / w[0];
        assert!((0.25..=1.0).contains(&ratio), "{masses:?}");
    }
}
