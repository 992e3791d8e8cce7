use cablelab_core::graph::{build_lattice_box, build_packing, DomainMask, WeightedGraph};
use cablelab_core::potential::GreenOperator;
use proptest::prelude::*;

/// A connected weighted graph, a domain `U` (the first `killed` vertices are
/// outside) and a nonempty `K ⊆ U`.
#[derive(Debug, Clone)]
struct Instance {
    graph: WeightedGraph,
    domain: Vec<usize>,
    k: Vec<usize>,
    extra: Vec<usize>,
}

fn instance() -> impl Strategy<Value = Instance> {
    (3usize..40)
        .prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec((0.0..1.0f64, 0.2..5.0f64), n - 1),
                proptest::collection::vec((0..n, 0..n, 0.2..5.0f64), 0..n),
                1..=(n / 3).max(1),
                proptest::collection::vec(0u8..4, n),
            )
        })
        .prop_map(|(n, tree, extra_edges, killed, tags)| {
            let mut edges = Vec::new();
            let mut seen = std::collections::HashSet::new();
            for (v, &(f, w)) in (1..n).zip(&tree) {
                let u = ((f * v as f64) as usize).min(v - 1);
                seen.insert((u, v));
                edges.push((u, v, w));
            }
            for &(a, b, w) in &extra_edges {
                let (u, v) = (a.min(b), a.max(b));
                if u != v && seen.insert((u, v)) {
                    edges.push((u, v, w));
                }
            }
            let graph = WeightedGraph::from_edges(n, &edges).unwrap();
            let domain: Vec<usize> = (killed..n).collect();
            let mut k: Vec<usize> = domain.iter().copied().filter(|&x| tags[x] == 0).collect();
            if k.is_empty() {
                k.push(domain[0]);
            }
            let extra = domain.iter().copied().filter(|&x| tags[x] == 1).collect();
            Instance { graph, domain, k, extra }
        })
}

fn op(inst: &Instance) -> GreenOperator<'_> {
    GreenOperator::new(&inst.graph, DomainMask::new(&inst.graph, &inst.domain).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn variational_and_equilibrium_capacities_agree(inst in instance()) {
        let op = op(&inst);
        let eq = op.equilibrium_measure(&inst.k).unwrap();
        let var = op.capacity_variational(&inst.k).unwrap();
        prop_assert!((eq.capacity - var).abs() <= 1e-8 * var, "{} vs {}", eq.capacity, var);
        prop_assert!(eq.masses.iter().all(|&m| m >= 0.0));
    }

    #[test]
    fn last_exit_identity_holds_everywhere(inst in instance()) {
        prop_assert!(op(&inst).last_exit_residual(&inst.k).unwrap() < 1e-9);
    }

    #[test]
    fn hitting_probabilities_are_probabilities(inst in instance()) {
        let op = op(&inst);
        let h = op.hitting_probabilities(&inst.k).unwrap();
        for (i, &x) in inst.domain.iter().enumerate() {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&h[i]));
            if inst.k.contains(&x) {
                prop_assert_eq!(h[i], 1.0);
            }
        }
    }

    #[test]
    fn capacity_is_monotone_and_subadditive(inst in instance()) {
        let op = op(&inst);
        let cap = |s: &[usize]| op.equilibrium_measure(s).unwrap().capacity;
        let mut union: Vec<usize> = inst.k.iter().chain(&inst.extra).copied().collect();
        union.sort_unstable();
        union.dedup();
        let (ck, cu) = (cap(&inst.k), cap(&union));
        prop_assert!(ck <= cu * (1.0 + 1e-9));
        if !inst.extra.is_empty() {
            prop_assert!(cu <= (ck + cap(&inst.extra)) * (1.0 + 1e-9));
        }
    }

    #[test]
    fn shrinking_the_domain_lowers_green_and_raises_capacity(inst in instance()) {
        let big = op(&inst);
        let keep: Vec<usize> = inst.domain.iter().copied().filter(|x| inst.k.contains(x) || !inst.extra.contains(x)).collect();
        let small = GreenOperator::new(&inst.graph, DomainMask::new(&inst.graph, &keep).unwrap()).unwrap();
        let x = inst.k[0];
        prop_assert!(small.green(x, x).unwrap() <= big.green(x, x).unwrap() * (1.0 + 1e-9));
        let cb = big.equilibrium_measure(&inst.k).unwrap().capacity;
        let cs = small.equilibrium_measure(&inst.k).unwrap().capacity;
        prop_assert!(cs >= cb * (1.0 - 1e-9));
    }

    #[test]
    fn green_matrix_is_symmetric(inst in instance()) {
        let op = op(&inst);
        let g = op.green_matrix(&inst.domain).unwrap();
        for i in 0..g.nrows() {
            for j in 0..i {
                prop_assert!((g[(i, j)] - g[(j, i)]).abs() <= 1e-9 * g[(i, i)].max(g[(j, j)]));
            }
        }
    }

    #[test]
    fn packings_cover_and_stay_disjoint(dim in 1usize..4, side in 2usize..9, scale in 1usize..5) {
        let (g, _) = build_lattice_box(dim, side).unwrap();
        let base = g.lattice().unwrap().center();
        let p = build_packing(&g, scale, base).unwrap();
        prop_assert!(p.verify(&g).is_ok());
        prop_assert_eq!(p.sites[p.base_index()], base);
        for (i, adj) in p.adjacency.iter().enumerate() {
            for &j in adj {
                prop_assert!(p.adjacency[j].contains(&i));
                prop_assert!(g.graph_distance(p.sites[i], p.sites[j]).unwrap() <= 2 * scale + 1);
            }
        }
    }
}

#[test]
fn point_capacity_is_inverse_green_diagonal() {
    let (g, u) = build_lattice_box(3, 9).unwrap();
    let op = GreenOperator::new(&g, u).unwrap();
    let c = g.lattice().unwrap().center();
    let cap = op.equilibrium_measure(&[c]).unwrap().capacity;
    assert!((cap * op.green(c, c).unwrap() - 1.0).abs() < 1e-9);
}
