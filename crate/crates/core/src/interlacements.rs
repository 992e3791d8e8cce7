//! Random interlacements seen from a finite window, and good obstacle sets.
//!
//! Escape to infinity is replaced by leaving a halo `H ⊋ W`: the trajectories
//! meeting `W` are `Poisson(u · cap_H(W))` walks started from the normalized
//! equilibrium measure of `W` in `H` and run until they leave `H`. Inside that
//! model the vacancy law `P(ℐ^u ∩ K = ∅) = exp(-u · cap_H(K))` holds exactly for
//! `K ⊆ W`; the halo only biases `cap_H` against the infinite-volume capacity.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_lattice_box, DomainMask, PackingLattice, WeightedGraph, UNREACHED};
use crate::potential::{EquilibriumMeasure, GreenOperator};
use crate::replica::run_replicas;
use crate::rng::{uniform, Purpose, StreamKey};
use crate::stats::{ObservableEstimate, Tally};

/// One step of the walk killed outside `domain`; `None` once it is killed.
fn step<R: Rng>(graph: &WeightedGraph, domain: &DomainMask, x: usize, rng: &mut R) -> Option<usize> {
    let u = uniform(rng) * graph.mass(x);
    let mut acc = 0.0;
    for nb in graph.neighbors(x) {
        acc += graph.edge(nb.edge as usize).weight;
        if u < acc {
            let y = nb.vertex as usize;
            return domain.contains(y).then_some(y);
        }
    }
    None
}

/// Graph distance from `set` to the first point where a walk can be killed:
/// a vertex outside `domain`, or one step past a vertex with killing.
pub fn distance_to_exit(graph: &WeightedGraph, domain: &DomainMask, set: &[usize]) -> usize {
    let dist = graph.distances_from_set(set, UNREACHED);
    let mut best = UNREACHED;
    for x in 0..graph.vertex_count() {
        if dist[x] == UNREACHED {
            continue;
        }
        if !domain.contains(x) {
            best = best.min(dist[x]);
        } else if graph.killing(x) > 0.0 {
            best = best.min(dist[x] + 1);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fragment {
    pub entry: usize,
    /// Visits to `W` in order, starting with the entry point.
    pub visits: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterlacementSample {
    pub level: f64,
    pub fragments: Vec<Fragment>,
    /// `ℐ^u ∩ W`, sorted.
    pub occupied: Vec<usize>,
}

impl InterlacementSample {
    pub fn trajectories(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_vacant(&self, k: &[usize]) -> bool {
        k.iter().all(|x| self.occupied.binary_search(x).is_err())
    }
}

/// Window `W` inside the halo `H`, with the equilibrium measure of `W` in `H`.
pub struct InterlacementWindow<'g> {
    graph: &'g WeightedGraph,
    halo: DomainMask,
    window: DomainMask,
    equilibrium: EquilibriumMeasure,
    cumulative: Vec<f64>,
    margin: usize,
}

impl<'g> InterlacementWindow<'g> {
    /// Requires the distance from `W` to the exit of `H` to be at least the diameter of `W`.
    pub fn new(graph: &'g WeightedGraph, halo: DomainMask, window: &[usize]) -> Result<Self> {
        halo.require_all(window)?;
        let window = DomainMask::new(graph, window)?;
        let margin = distance_to_exit(graph, &halo, window.members());
        let diameter = graph.diameter_of(window.members());
        if margin < diameter.max(1) {
            return Err(Error::Margin(format!("window sits {margin} steps from the halo exit, below its diameter {diameter}")));
        }
        let op = GreenOperator::new(graph, halo.clone())?;
        let equilibrium = op.equilibrium_measure(window.members())?;
        let mut acc = 0.0;
        let cumulative = equilibrium
            .masses
            .iter()
            .map(|m| {
                acc += m;
                acc
            })
            .collect();
        Ok(Self { graph, halo, window, equilibrium, cumulative, margin })
    }

    pub fn graph(&self) -> &'g WeightedGraph {
        self.graph
    }

    pub fn halo(&self) -> &DomainMask {
        &self.halo
    }

    pub fn window(&self) -> &DomainMask {
        &self.window
    }

    /// `cap_H(W)`.
    pub fn capacity(&self) -> f64 {
        self.equilibrium.capacity
    }

    pub fn equilibrium(&self) -> &EquilibriumMeasure {
        &self.equilibrium
    }

    pub fn margin(&self) -> usize {
        self.margin
    }

    pub fn sample(&self, level: f64, key: StreamKey) -> Result<InterlacementSample> {
        if !(level >= 0.0 && level.is_finite()) {
            return Err(Error::InvalidArgument(format!("level must be finite and nonnegative, got {level}")));
        }
        let mut rng = key.rng();
        let mean = level * self.capacity();
        let count = if mean > 0.0 {
            Poisson::new(mean).map_err(|e| Error::InvalidArgument(format!("poisson mean {mean}: {e}")))?.sample(&mut rng) as usize
        } else {
            0
        };
        let total = self.cumulative.last().copied().unwrap_or(0.0);
        let mut fragments = Vec::with_capacity(count);
        let mut occupied = Vec::new();
        for _ in 0..count {
            let u = uniform(&mut rng) * total;
            let i = self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1);
            let entry = self.equilibrium.support[i];
            let mut visits = vec![entry];
            let mut x = entry;
            while let Some(y) = step(self.graph, &self.halo, x, &mut rng) {
                x = y;
                if self.window.contains(x) {
                    visits.push(x);
                }
            }
            occupied.extend_from_slice(&visits);
            fragments.push(Fragment { entry, visits });
        }
        occupied.sort_unstable();
        occupied.dedup();
        Ok(InterlacementSample { level, fragments, occupied })
    }
}

pub fn interlacement_key(seed: u64, replica: u64) -> StreamKey {
    StreamKey::new(seed, replica, Purpose::Interlacement)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VacancyRow {
    pub level: f64,
    pub set_size: usize,
    /// `cap_H(K)`.
    pub capacity: f64,
    /// `exp(-u · cap_H(K))`.
    pub target: f64,
    pub estimate: ObservableEstimate,
    pub z: f64,
    /// `|exp(-u cap_H(K)) - exp(-u cap_{H'}(K))|` against a larger halo, when one is given.
    pub halo_bias: f64,
    /// `|estimate - target| <= 3σ + halo_bias`.
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryCountRow {
    pub level: f64,
    pub expected: f64,
    pub mean: f64,
    pub variance: f64,
    pub z_mean: f64,
    pub z_variance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VacancyReport {
    pub window_capacity: f64,
    pub samples: u64,
    pub rows: Vec<VacancyRow>,
    pub counts: Vec<TrajectoryCountRow>,
}

/// Vacancy frequencies of each `K ⊆ W` and trajectory-count laws, per level.
/// `reference_capacities[j]`, when given, is `cap(K_j)` in a larger halo.
pub fn vacancy_check(
    iw: &InterlacementWindow,
    sets: &[Vec<usize>],
    levels: &[f64],
    reference_capacities: Option<&[f64]>,
    samples: u64,
    seed: u64,
    workers: usize,
) -> Result<VacancyReport> {
    let op = GreenOperator::new(iw.graph, iw.halo.clone())?;
    let mut caps = Vec::with_capacity(sets.len());
    for k in sets {
        iw.window.require_all(k)?;
        caps.push(op.equilibrium_measure(k)?.capacity);
    }
    let nl = levels.len() as u64;
    let out = run_replicas(&(), 0..samples, workers, |_, r| {
        levels
            .iter()
            .enumerate()
            .map(|(j, &u)| {
                let s = iw.sample(u, interlacement_key(seed, r * nl + j as u64))?;
                Ok((s.trajectories(), sets.iter().map(|k| s.is_vacant(k)).collect::<Vec<bool>>()))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut rows = Vec::new();
    let mut counts = Vec::new();
    for (j, &u) in levels.iter().enumerate() {
        let mut tc = Tally::default();
        for o in &out {
            tc.push(o[j].0 as f64);
        }
        let expected = u * iw.capacity();
        counts.push(TrajectoryCountRow {
            level: u,
            expected,
            mean: tc.mean(),
            variance: tc.variance(),
            z_mean: tc.poisson_mean_z(expected),
            z_variance: tc.poisson_variance_z(expected),
        });
        for (i, k) in sets.iter().enumerate() {
            let mut t = Tally::default();
            for o in &out {
                t.push_bool(o[j].1[i]);
            }
            let estimate = t.estimate(seed);
            let target = (-u * caps[i]).exp();
            let halo_bias = reference_capacities.map_or(0.0, |rc| (target - (-u * rc[i]).exp()).abs());
            let sd = (target * (1.0 - target) / samples as f64).sqrt();
            rows.push(VacancyRow {
                level: u,
                set_size: k.len(),
                capacity: caps[i],
                target,
                estimate,
                z: estimate.binomial_z(target),
                halo_bias,
                pass: (estimate.estimate - target).abs() <= 3.0 * sd + halo_bias,
            });
        }
    }
    Ok(VacancyReport { window_capacity: iw.capacity(), samples, rows, counts })
}

/// Lattice version: halo box of side `halo_side`, centered cube window of side
/// `window_side`, centered balls of the given radii, bias against a halo of side
/// `2 · halo_side + 1`.
pub fn lattice_vacancy(
    dim: usize,
    halo_side: usize,
    window_side: usize,
    radii: &[usize],
    levels: &[f64],
    samples: u64,
    seed: u64,
    workers: usize,
) -> Result<VacancyReport> {
    let (g, halo) = build_lattice_box(dim, halo_side)?;
    let shape = g.lattice().expect("lattice box").clone();
    let window = shape.centered_cube(window_side);
    let sets = radii.iter().map(|&r| g.ball(shape.center(), r)).collect::<Result<Vec<_>>>()?;
    for k in &sets {
        if let Some(&x) = k.iter().find(|&&x| window.binary_search(&x).is_err()) {
            return Err(Error::Margin(format!("ball vertex {x} lies outside the window")));
        }
    }
    let iw = InterlacementWindow::new(&g, halo, &window)?;
    let (big, big_halo) = build_lattice_box(dim, 2 * halo_side + 1)?;
    let big_shape = big.lattice().expect("lattice box").clone();
    let big_op = GreenOperator::new(&big, big_halo)?;
    let reference = radii
        .iter()
        .map(|&r| Ok(big_op.equilibrium_measure(&big.ball(big_shape.center(), r)?)?.capacity))
        .collect::<Result<Vec<f64>>>()?;
    vacancy_check(&iw, &sets, levels, Some(&reference), samples, seed, workers)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObstacleReport {
    pub scale: usize,
    pub radius: usize,
    pub n: usize,
    pub kappa: f64,
    /// `cap(𝒪 ∩ B(y, L))` per packing site; `NaN` outside `B_R`.
    pub capacities: Vec<f64>,
    /// Goodness bit per packing site (false outside `B_R`).
    pub good: Vec<bool>,
    /// Least number of good sites in `B_R` on a `Λ(L)`-path from the base out of
    /// `B_R`; `None` when no such path exists.
    pub min_count: Option<usize>,
    /// `min_count >= n`, and vacuously true when no path leaves `B_R`.
    pub verdict: bool,
}

/// Sites of `packing` inside the closed ball `B_R` around its base.
pub fn sites_inside(graph: &WeightedGraph, packing: &PackingLattice, radius: usize) -> Vec<bool> {
    let dist = graph.distances_from(packing.base);
    packing.sites.iter().map(|&y| dist[y] <= radius).collect()
}

/// Least `Σ_{y ∈ π, y ∈ B_R} good(y)` over `Λ(L)`-paths `π` from the base to the
/// first site outside `B_R`, by 0-1 breadth-first search on site weights.
pub fn min_good_count(packing: &PackingLattice, good: &[bool], inside: &[bool]) -> Option<usize> {
    let n = packing.len();
    let cost = |i: usize| usize::from(inside[i] && good[i]);
    let base = packing.base_index();
    let mut best = vec![UNREACHED; n];
    let mut deque = VecDeque::new();
    best[base] = cost(base);
    deque.push_back(base);
    let mut answer: Option<usize> = None;
    while let Some(i) = deque.pop_front() {
        if !inside[i] {
            answer = Some(answer.map_or(best[i], |a| a.min(best[i])));
            continue;
        }
        for &j in &packing.adjacency[i] {
            let d = best[i] + cost(j);
            if d < best[j] {
                best[j] = d;
                if cost(j) == 0 {
                    deque.push_front(j);
                } else {
                    deque.push_back(j);
                }
            }
        }
    }
    answer
}

/// Same minimum by enumerating every simple path; exponential, for small instances.
pub fn min_good_count_exhaustive(packing: &PackingLattice, good: &[bool], inside: &[bool]) -> Option<usize> {
    fn dfs(p: &PackingLattice, good: &[bool], inside: &[bool], i: usize, count: usize, on_path: &mut Vec<bool>, best: &mut Option<usize>) {
        if !inside[i] {
            *best = Some(best.map_or(count, |b| b.min(count)));
            return;
        }
        for &j in &p.adjacency[i] {
            if on_path[j] {
                continue;
            }
            on_path[j] = true;
            dfs(p, good, inside, j, count + usize::from(inside[j] && good[j]), on_path, best);
            on_path[j] = false;
        }
    }
    let base = packing.base_index();
    let mut on_path = vec![false; packing.len()];
    on_path[base] = true;
    let mut best = None;
    dfs(packing, good, inside, base, usize::from(inside[base] && good[base]), &mut on_path, &mut best);
    best
}

/// Decides whether `obstacle` is an `(L, R, n, κ)`-good obstacle set, with
/// capacities taken in the domain of `op`.
pub fn good_obstacle_check(op: &GreenOperator, packing: &PackingLattice, obstacle: &[usize], radius: usize, n: usize, kappa: f64) -> Result<ObstacleReport> {
    let graph = op.graph();
    op.domain().require_all(obstacle)?;
    let mut marked = vec![false; graph.vertex_count()];
    for &x in obstacle {
        marked[x] = true;
    }
    let inside = sites_inside(graph, packing, radius);
    let mut capacities = vec![f64::NAN; packing.len()];
    let mut good = vec![false; packing.len()];
    for (i, &y) in packing.sites.iter().enumerate() {
        if !inside[i] {
            continue;
        }
        let piece: Vec<usize> = graph.ball(y, packing.scale)?.into_iter().filter(|&x| marked[x]).collect();
        let cap = if piece.is_empty() { 0.0 } else { op.capacity_variational(&piece)? };
        capacities[i] = cap;
        good[i] = cap >= kappa;
    }
    let min_count = min_good_count(packing, &good, &inside);
    Ok(ObstacleReport {
        scale: packing.scale,
        radius,
        n,
        kappa,
        capacities,
        good,
        min_count,
        verdict: min_count.is_none_or(|m| m >= n),
    })
}

pub fn walk_key(seed: u64, replica: u64) -> StreamKey {
    StreamKey::new(seed, replica, Purpose::Walks)
}

/// Monte Carlo `P_start(H_x < H_𝒪 ∧ T_U)` for each obstacle, all obstacles read
/// off the same walks, so the estimates are pathwise ordered under inclusion.
pub fn avoidance_probe(
    graph: &WeightedGraph,
    domain: &DomainMask,
    obstacles: &[Vec<usize>],
    start: usize,
    target: usize,
    walks: u64,
    seed: u64,
    workers: usize,
) -> Result<Vec<ObservableEstimate>> {
    domain.require(start)?;
    domain.require(target)?;
    let mut masks = Vec::with_capacity(obstacles.len());
    for o in obstacles {
        if o.contains(&target) {
            return Err(Error::Overlap(target));
        }
        let mut m = vec![false; graph.vertex_count()];
        for &x in o {
            graph.check_vertex(x)?;
            m[x] = true;
        }
        masks.push(m);
    }
    let out = run_replicas(&(), 0..walks, workers, |_, r| {
        let mut rng = walk_key(seed, r).rng();
        // first time the walk meets each obstacle; the walk stops at the target
        let mut first_hit: Vec<Option<usize>> = vec![None; masks.len()];
        let mut x = start;
        let mut t = 0usize;
        let reached = loop {
            for (h, m) in first_hit.iter_mut().zip(&masks) {
                if h.is_none() && m[x] {
                    *h = Some(t);
                }
            }
            if x == target {
                break true;
            }
            if first_hit.iter().all(|h| h.is_some()) {
                break false;
            }
            match step(graph, domain, x, &mut rng) {
                Some(y) => {
                    x = y;
                    t += 1;
                }
                None => break false,
            }
        };
        Ok(first_hit.iter().map(|h| reached && h.is_none()).collect::<Vec<bool>>())
    })?;
    Ok((0..obstacles.len())
        .map(|i| {
            let mut t = Tally::default();
            for o in &out {
                t.push_bool(o[i]);
            }
            t.estimate(seed)
        })
        .collect())
}

/// `d^{-ν} · exp(-c κ n / L^ν)`, the decay shape of the avoidance probability.
pub fn avoidance_shape(distance: f64, nu: f64, kappa: f64, n: usize, scale: usize, c: f64) -> f64 {
    distance.powf(-nu) * (-c * kappa * n as f64 / (scale as f64).powf(nu)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_packing;
    use rand::SeedableRng;

    #[test]
    fn zero_level_is_empty() {
        let (g, h) = build_lattice_box(3, 15).unwrap();
        let w = g.lattice().unwrap().centered_cube(3);
        let iw = InterlacementWindow::new(&g, h, &w).unwrap();
        let s = iw.sample(0.0, interlacement_key(1, 0)).unwrap();
        assert!(s.occupied.is_empty());
        assert!(iw.sample(-1.0, interlacement_key(1, 0)).is_err());
    }

    #[test]
    fn margin_is_enforced() {
        let (g, h) = build_lattice_box(3, 9).unwrap();
        let w = g.lattice().unwrap().centered_cube(5);
        assert!(matches!(InterlacementWindow::new(&g, h, &w), Err(Error::Margin(_))));
    }

    #[test]
    fn fragments_start_on_the_window_boundary_and_cover_the_occupied_set() {
        let (g, h) = build_lattice_box(3, 15).unwrap();
        let w = g.lattice().unwrap().centered_cube(3);
        let iw = InterlacementWindow::new(&g, h, &w).unwrap();
        let support: Vec<usize> =
            iw.equilibrium().support.iter().zip(&iw.equilibrium().masses).filter(|(_, &m)| m > 0.0).map(|(&x, _)| x).collect();
        for r in 0..30 {
            let s = iw.sample(2.0, interlacement_key(3, r)).unwrap();
            let mut union: Vec<usize> = s.fragments.iter().flat_map(|f| f.visits.iter().copied()).collect();
            union.sort_unstable();
            union.dedup();
            assert_eq!(union, s.occupied);
            for f in &s.fragments {
                assert!(support.contains(&f.entry));
                assert!(f.visits.iter().all(|&x| iw.window().contains(x)));
            }
        }
    }

    #[test]
    fn vacancy_matches_the_capacity_law() {
        let (g, h) = build_lattice_box(3, 15).unwrap();
        let shape = g.lattice().unwrap().clone();
        let w = shape.centered_cube(3);
        let iw = InterlacementWindow::new(&g, h, &w).unwrap();
        let k = vec![vec![shape.center()], g.ball(shape.center(), 1).unwrap()];
        let rep = vacancy_check(&iw, &k, &[0.1, 0.4], None, 4000, 11, 2).unwrap();
        for row in &rep.rows {
            assert!(row.z.abs() < 4.0, "{row:?}");
        }
        for c in &rep.counts {
            assert!(c.z_mean.abs() < 4.0 && c.z_variance.abs() < 4.0, "{c:?}");
        }
    }

    fn grid_packing(side: usize, scale: usize) -> (WeightedGraph, PackingLattice) {
        let (g, _) = build_lattice_box(2, side).unwrap();
        let base = g.lattice().unwrap().center();
        let p = build_packing(&g, scale, base).unwrap();
        (g, p)
    }

    #[test]
    fn empty_obstacle_has_count_zero() {
        let (g, p) = grid_packing(9, 2);
        let op = GreenOperator::new(&g, DomainMask::full(&g)).unwrap();
        let rep = good_obstacle_check(&op, &p, &[], 3, 1, 0.5).unwrap();
        assert_eq!(rep.min_count, Some(0));
        assert!(!rep.verdict);
    }

    #[test]
    fn all_good_counts_sites_on_shortest_path() {
        let (g, p) = grid_packing(11, 2);
        let inside = sites_inside(&g, &p, 4);
        let good = vec![true; p.len()];
        // oracle: hop distance in Λ from the base to the nearest outside site equals
        // the number of inside sites on a shortest path
        let base = p.base_index();
        let mut hops = vec![UNREACHED; p.len()];
        hops[base] = 0;
        let mut q = VecDeque::from([base]);
        while let Some(i) = q.pop_front() {
            for &j in &p.adjacency[i] {
                if hops[j] == UNREACHED {
                    hops[j] = hops[i] + 1;
                    q.push_back(j);
                }
            }
        }
        let expected = (0..p.len()).filter(|&i| !inside[i]).map(|i| hops[i]).min().unwrap();
        assert_eq!(min_good_count(&p, &good, &inside), Some(expected));
    }

    #[test]
    fn shortest_path_matches_enumeration() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for (side, scale, radius) in [(5, 2, 1), (6, 2, 2), (7, 2, 2), (7, 3, 3), (7, 2, 4)] {
            let (g, p) = grid_packing(side, scale);
            assert!(p.len() <= 12, "{} sites", p.len());
            let inside = sites_inside(&g, &p, radius);
            for _ in 0..50 {
                let good: Vec<bool> = (0..p.len()).map(|_| rng.random_bool(0.5)).collect();
                assert_eq!(min_good_count(&p, &good, &inside), min_good_count_exhaustive(&p, &good, &inside));
            }
        }
    }

    #[test]
    fn avoidance_probe_cases() {
        let (g, u) = build_lattice_box(2, 9).unwrap();
        let shape = g.lattice().unwrap().clone();
        let start = shape.center();
        let x = shape.offset_from_center(&[2, 1]).unwrap();
        let ring: Vec<usize> = g.neighbors(start).iter().map(|nb| nb.vertex as usize).collect();
        let partial = vec![shape.offset_from_center(&[1, 1]).unwrap(), shape.offset_from_center(&[2, 0]).unwrap()];
        let mut bigger = partial.clone();
        bigger.push(shape.offset_from_center(&[0, 1]).unwrap());
        let est = avoidance_probe(&g, &u, &[vec![], partial, bigger, ring], start, x, 20_000, 5, 2).unwrap();
        let exact = GreenOperator::new(&g, u).unwrap().hitting_probability(&[x], start).unwrap();
        assert!(est[0].z_score(exact).abs() < 4.0, "{} vs {exact}", est[0].estimate);
        assert!(est[1].estimate <= est[0].estimate);
        assert!(est[2].estimate <= est[1].estimate);
        assert_eq!(est[3].estimate, 0.0);
    }
}
