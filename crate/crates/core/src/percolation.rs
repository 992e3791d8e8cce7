//! Clusters of bond configurations and the percolation observables built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gff::{bond_config_with_uniforms, edge_open, BondConfig, FieldSampler};
use crate::graph::{build_lattice_box, DomainMask, LatticeShape, WeightedGraph, UNREACHED};
use crate::linalg::SolverChoice;
use crate::potential::GreenOperator;
use crate::replica::run_replicas;
use crate::rng::{materialize_edge_uniforms, EdgeUniformSource, LazyEdgeUniforms, Purpose, StreamKey};
use crate::stats::{fit_exponent, ExponentFit, ObservableEstimate, Tally};

pub struct UnionFind {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self { parent: (0..n as u32).collect(), rank: vec![0; n] }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] as usize != x {
            let p = self.parent[x] as usize;
            self.parent[x] = self.parent[p];
            x = p;
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb as u32,
            std::cmp::Ordering::Greater => self.parent[rb] = ra as u32,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra as u32;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Component labels numbered in order of their smallest vertex.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterLabels {
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
}

impl ClusterLabels {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn connected(&self, x: usize, y: usize) -> bool {
        self.labels[x] == self.labels[y]
    }

    pub fn size_of(&self, x: usize) -> usize {
        self.sizes[self.labels[x] as usize]
    }

    pub fn members(&self, label: u32) -> Vec<usize> {
        (0..self.labels.len()).filter(|&x| self.labels[x] == label).collect()
    }

    pub fn from_union_find(mut uf: UnionFind, n: usize) -> Self {
        let mut root_label = vec![u32::MAX; n];
        let mut labels = vec![0; n];
        let mut sizes = Vec::new();
        for x in 0..n {
            let r = uf.find(x);
            if root_label[r] == u32::MAX {
                root_label[r] = sizes.len() as u32;
                sizes.push(0);
            }
            labels[x] = root_label[r];
            sizes[root_label[r] as usize] += 1;
        }
        Self { labels, sizes }
    }
}

/// Union-find labeling of the open edges.
pub fn clusters(graph: &WeightedGraph, config: &BondConfig) -> ClusterLabels {
    let n = graph.vertex_count();
    let mut uf = UnionFind::new(n);
    for (e, &open) in config.open.iter().enumerate() {
        if open {
            let (u, v) = graph.edge(e).endpoints();
            uf.union(u, v);
        }
    }
    ClusterLabels::from_union_find(uf, n)
}

/// A killed domain with a base point, plus the lookups the estimators share.
#[derive(Clone, Debug)]
pub struct Window {
    pub graph: WeightedGraph,
    pub domain: DomainMask,
    pub base: usize,
    dist_from_base: Vec<u32>,
    boundary: Vec<bool>,
}

impl Window {
    pub fn new(graph: WeightedGraph, domain: DomainMask, base: usize) -> Result<Self> {
        domain.require(base)?;
        domain.check_transient(&graph)?;
        let dist_from_base =
            graph.distances_from(base).into_iter().map(|d| if d == UNREACHED { u32::MAX } else { d as u32 }).collect();
        let mut boundary = vec![false; graph.vertex_count()];
        for x in domain.inner_boundary(&graph) {
            boundary[x] = true;
        }
        Ok(Self { graph, domain, base, dist_from_base, boundary })
    }

    /// The `s^d` box with base point at its center.
    pub fn lattice(dim: usize, side: usize) -> Result<Self> {
        let (graph, domain) = build_lattice_box(dim, side)?;
        let base = graph.lattice().unwrap().center();
        Self::new(graph, domain, base)
    }

    pub fn shape(&self) -> Option<&LatticeShape> {
        self.graph.lattice()
    }

    #[inline]
    pub fn distance_from_base(&self, x: usize) -> usize {
        self.dist_from_base[x] as usize
    }

    #[inline]
    pub fn is_boundary(&self, x: usize) -> bool {
        self.boundary[x]
    }

    /// Graph distance from `x` to the outside of the domain.
    pub fn distance_to_outside(&self, x: usize) -> usize {
        let sources: Vec<usize> = (0..self.graph.vertex_count()).filter(|&v| self.boundary[v]).collect();
        let d = self.graph.distances_from_set(&sources, UNREACHED);
        d[x].saturating_add(1)
    }

    /// `cap_U(U) = Σ_y (λ_y - Σ_{z ∈ U} λ_yz)`, the largest capacity any subset can have.
    pub fn domain_capacity(&self) -> f64 {
        self.domain
            .members()
            .iter()
            .map(|&y| {
                let inside: f64 = self
                    .graph
                    .neighbors(y)
                    .iter()
                    .filter(|nb| self.domain.contains(nb.vertex as usize))
                    .map(|nb| self.graph.edge(nb.edge as usize).weight)
                    .sum();
                self.graph.mass(y) - inside
            })
            .sum()
    }

    pub fn sampler(&self) -> Result<FieldSampler> {
        FieldSampler::new(&self.graph, &self.domain)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Exploration {
    /// Vertices of the open cluster, in discovery order; empty if the start is below the level.
    pub vertices: Vec<usize>,
    /// Largest graph distance from the window base among explored vertices.
    pub max_distance: usize,
    pub touches_boundary: bool,
    /// False if the search stopped early at the requested distance.
    pub complete: bool,
}

/// Breadth-first cluster search that draws edge uniforms only where it looks.
#[derive(Clone, Debug)]
pub struct ClusterExplorer {
    stamp: Vec<u32>,
    generation: u32,
}

impl ClusterExplorer {
    pub fn new(n: usize) -> Self {
        Self { stamp: vec![0; n], generation: 0 }
    }

    pub fn explore(
        &mut self,
        window: &Window,
        field: &[f64],
        a: f64,
        start: usize,
        uniforms: &mut impl EdgeUniformSource,
        stop_at_distance: Option<usize>,
    ) -> Exploration {
        let mut out = Exploration { complete: true, ..Default::default() };
        let Some(i) = window.domain.local(start) else {
            return out;
        };
        if field[i] < a {
            return out;
        }
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.generation = 1;
        }
        let g = self.generation;
        self.stamp[start] = g;
        out.vertices.push(start);
        let mut head = 0;
        while head < out.vertices.len() {
            let x = out.vertices[head];
            head += 1;
            out.max_distance = out.max_distance.max(window.distance_from_base(x));
            out.touches_boundary |= window.is_boundary(x);
            if stop_at_distance.is_some_and(|d| out.max_distance >= d) {
                out.complete = false;
                return out;
            }
            for nb in window.graph.neighbors(x) {
                let y = nb.vertex as usize;
                if self.stamp[y] == g {
                    continue;
                }
                if edge_open(&window.graph, &window.domain, field, a, nb.edge as usize, uniforms) {
                    self.stamp[y] = g;
                    out.vertices.push(y);
                }
            }
        }
        out
    }
}

/// Per-worker sampling state.
#[derive(Clone)]
pub struct Sampling {
    pub sampler: FieldSampler,
    pub explorer: ClusterExplorer,
}

impl Sampling {
    pub fn new(window: &Window) -> Result<Self> {
        Ok(Self { sampler: window.sampler()?, explorer: ClusterExplorer::new(window.graph.vertex_count()) })
    }
}

pub fn field_key(seed: u64, replica: u64) -> StreamKey {
    StreamKey::new(seed, replica, Purpose::Field)
}

pub fn edge_key(seed: u64, replica: u64) -> StreamKey {
    StreamKey::new(seed, replica, Purpose::Edges)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RadiusEstimate {
    pub radius: usize,
    pub estimate: ObservableEstimate,
    /// No successes: excluded from the fit.
    pub flagged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OneArmResult {
    pub level: f64,
    pub rows: Vec<RadiusEstimate>,
    /// Fit of `ln P` on `ln R`; the one-arm exponent is `-slope`.
    pub fit: Option<ExponentFit>,
}

fn check_radii(window: &Window, radii: &[usize]) -> Result<usize> {
    let max_r = *radii.iter().max().ok_or(Error::EmptySet)?;
    let reach = window.distance_to_outside(window.base);
    if max_r + 1 >= reach {
        return Err(Error::Margin(format!(
            "radius {max_r}: B(0, R+1) must stay inside the window (distance to outside is {reach})"
        )));
    }
    Ok(max_r)
}

/// `1{0 ↔ B(0, R)^c}` for each level and radius, from one field and one set of edge uniforms.
pub fn one_arm_replica(window: &Window, state: &mut Sampling, levels: &[f64], radii: &[usize], seed: u64, replica: u64) -> Vec<Vec<bool>> {
    let field = state.sampler.sample(field_key(seed, replica));
    let max_r = radii.iter().copied().max().unwrap_or(0);
    let mut uniforms = LazyEdgeUniforms::new(edge_key(seed, replica));
    levels
        .iter()
        .map(|&a| {
            let ex = state.explorer.explore(window, &field.values, a, window.base, &mut uniforms, Some(max_r + 1));
            radii.iter().map(|&r| ex.max_distance > r).collect()
        })
        .collect()
}

pub fn one_arm_estimate(
    window: &Window,
    levels: &[f64],
    radii: &[usize],
    samples: u64,
    seed: u64,
    workers: usize,
) -> Result<Vec<OneArmResult>> {
    check_radii(window, radii)?;
    let state = Sampling::new(window)?;
    let hits = run_replicas(&state, 0..samples, workers, |s, r| Ok(one_arm_replica(window, s, levels, radii, seed, r)))?;
    let mut out = Vec::with_capacity(levels.len());
    for (li, &level) in levels.iter().enumerate() {
        let rows: Vec<RadiusEstimate> = radii
            .iter()
            .enumerate()
            .map(|(ri, &radius)| {
                let mut t = Tally::default();
                for h in &hits {
                    t.push_bool(h[li][ri]);
                }
                RadiusEstimate { radius, estimate: t.estimate(seed), flagged: t.sum == 0.0 }
            })
            .collect();
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.radius as f64, r.estimate.estimate)).collect();
        let fit = fit_exponent(&pts).ok();
        out.push(OneArmResult { level, rows, fit });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoPointOutcome {
    /// `x ↔ y` inside the window.
    pub connected: bool,
    /// `x ↔ y` and the cluster avoids the vertices next to the outside.
    pub truncated: bool,
}

pub fn two_point_replica(
    window: &Window,
    state: &mut Sampling,
    levels: &[f64],
    pairs: &[(usize, usize)],
    seed: u64,
    replica: u64,
) -> Vec<Vec<TwoPointOutcome>> {
    let field = state.sampler.sample(field_key(seed, replica));
    let mut uniforms = LazyEdgeUniforms::new(edge_key(seed, replica));
    levels
        .iter()
        .map(|&a| {
            pairs
                .iter()
                .map(|&(x, y)| {
                    let ex = state.explorer.explore(window, &field.values, a, x, &mut uniforms, None);
                    let connected = ex.vertices.contains(&y);
                    TwoPointOutcome { connected, truncated: connected && !ex.touches_boundary }
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TwoPointResult {
    pub level: f64,
    pub truncated: ObservableEstimate,
    pub connected: ObservableEstimate,
}

pub fn truncated_two_point(
    window: &Window,
    levels: &[f64],
    x: usize,
    y: usize,
    samples: u64,
    seed: u64,
    workers: usize,
) -> Result<Vec<TwoPointResult>> {
    window.domain.require(x)?;
    window.domain.require(y)?;
    let sep = window.graph.graph_distance(x, y)?;
    let margin = window.distance_to_outside(x).min(window.distance_to_outside(y));
    if margin < sep.max(1) {
        return Err(Error::Margin(format!("points at distance {sep} sit {margin} from the outside")));
    }
    let state = Sampling::new(window)?;
    let out = run_replicas(&state, 0..samples, workers, |s, r| Ok(two_point_replica(window, s, levels, &[(x, y)], seed, r)))?;
    Ok(levels
        .iter()
        .enumerate()
        .map(|(li, &level)| {
            let (mut t, mut c) = (Tally::default(), Tally::default());
            for o in &out {
                t.push_bool(o[li][0].truncated);
                c.push_bool(o[li][0].connected);
            }
            TwoPointResult { level, truncated: t.estimate(seed), connected: c.estimate(seed) }
        })
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TwoPointBias {
    pub side: usize,
    pub estimate: ObservableEstimate,
    pub doubled: ObservableEstimate,
    /// `estimate - doubled`.
    pub bias: f64,
}

/// Truncated two-point function for two offsets from the center of `Z^d` boxes
/// of side `s` and `2s`, same stream keys.
pub fn two_point_window_bias(
    dim: usize,
    side: usize,
    level: f64,
    x: &[i64],
    y: &[i64],
    samples: u64,
    seed: u64,
    workers: usize,
) -> Result<TwoPointBias> {
    let run = |s: usize| -> Result<ObservableEstimate> {
        let w = Window::lattice(dim, s)?;
        let shape = *w.shape().unwrap();
        let px = shape.offset_from_center(x).ok_or(Error::Margin("offset leaves the window".into()))?;
        let py = shape.offset_from_center(y).ok_or(Error::Margin("offset leaves the window".into()))?;
        Ok(truncated_two_point(&w, &[level], px, py, samples, seed, workers)?[0].truncated)
    };
    let estimate = run(side)?;
    let doubled = run(2 * side)?;
    Ok(TwoPointBias { side, estimate, doubled, bias: estimate.estimate - doubled.estimate })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub samples: u64,
    pub level_pairs: usize,
    /// Samples where `E^{≥a'} ⊄ E^{≥a}` for some `a' > a`.
    pub edge_violations: u64,
    /// Base clusters that grow with the level.
    pub cluster_violations: u64,
    /// Pair connections that appear as the level rises.
    pub connection_violations: u64,
    /// One-arm indicators that rise with the level or with the radius.
    pub one_arm_violations: u64,
    /// Lazy exploration disagreeing with union-find on the base cluster.
    pub exploration_mismatches: u64,
}

impl MonotonicityReport {
    pub fn holds(&self) -> bool {
        self.edge_violations + self.cluster_violations + self.connection_violations + self.one_arm_violations + self.exploration_mismatches
            == 0
    }
}

/// Coupled configurations at every level from one field and one set of uniforms,
/// checked for edge-exact inclusion and for monotone estimators.
pub fn monotone_coupling_check(
    window: &Window,
    levels: &[f64],
    radii: &[usize],
    pairs: &[(usize, usize)],
    samples: u64,
    seed: u64,
    workers: usize,
) -> Result<MonotonicityReport> {
    let mut levels = levels.to_vec();
    levels.sort_by(f64::total_cmp);
    check_radii(window, radii)?;
    for &(x, y) in pairs {
        window.domain.require(x)?;
        window.domain.require(y)?;
    }
    let g = &window.graph;
    let state = Sampling::new(window)?;
    let out = run_replicas(&state, 0..samples, workers, |s, r| {
        let mut rep = MonotonicityReport::default();
        let field = s.sampler.sample(field_key(seed, r));
        let uniforms = materialize_edge_uniforms(edge_key(seed, r), g.edge_count());
        let configs: Vec<BondConfig> =
            levels.iter().map(|&a| bond_config_with_uniforms(g, &window.domain, &field, a, uniforms.clone())).collect();
        let labels: Vec<ClusterLabels> = configs.iter().map(|c| clusters(g, c)).collect();
        let base_cluster: Vec<Vec<usize>> = levels
            .iter()
            .zip(&labels)
            .map(|(&a, l)| {
                if field.values[window.domain.local(window.base).unwrap()] < a {
                    Vec::new()
                } else {
                    l.members(l.labels[window.base])
                }
            })
            .collect();
        for i in 0..levels.len() {
            let ex = s.explorer.explore(window, &field.values, levels[i], window.base, &mut uniforms.as_slice(), None);
            let mut seen = ex.vertices.clone();
            seen.sort_unstable();
            rep.exploration_mismatches += u64::from(seen != base_cluster[i]);
            for j in i + 1..levels.len() {
                rep.edge_violations += u64::from(!configs[j].is_subset_of(&configs[i]));
                rep.cluster_violations += u64::from(!base_cluster[j].iter().all(|x| base_cluster[i].binary_search(x).is_ok()));
                rep.connection_violations +=
                    pairs.iter().filter(|&&(x, y)| labels[j].connected(x, y) && !labels[i].connected(x, y)).count() as u64;
            }
        }
        let arms = one_arm_replica(window, s, &levels, radii, seed, r);
        let mut sorted_radii: Vec<usize> = (0..radii.len()).collect();
        sorted_radii.sort_by_key(|&k| radii[k]);
        for i in 0..levels.len() {
            for w in sorted_radii.windows(2) {
                rep.one_arm_violations += u64::from(arms[i][w[1]] && !arms[i][w[0]]);
            }
            for j in i + 1..levels.len() {
                rep.one_arm_violations += (0..radii.len()).filter(|&k| arms[j][k] && !arms[i][k]).count() as u64;
            }
        }
        Ok(rep)
    })?;
    let mut total = MonotonicityReport { samples, level_pairs: levels.len() * levels.len().saturating_sub(1) / 2, ..Default::default() };
    for rep in out {
        total.edge_violations += rep.edge_violations;
        total.cluster_violations += rep.cluster_violations;
        total.connection_violations += rep.connection_violations;
        total.one_arm_violations += rep.one_arm_violations;
        total.exploration_mismatches += rep.exploration_mismatches;
    }
    Ok(total)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArcsinRow {
    pub x: usize,
    pub y: usize,
    pub green_ratio: f64,
    /// `(1/π) arcsin(g(x,y) / sqrt(g(x,x) g(y,y)))`.
    pub target: f64,
    pub estimate: ObservableEstimate,
    pub z: f64,
}

/// `(1/π) arcsin(g(x,y) / sqrt(g(x,x) g(y,y)))` for each pair.
pub fn arcsin_targets(window: &Window, pairs: &[(usize, usize)]) -> Result<Vec<(f64, f64)>> {
    let op = GreenOperator::with_solver(&window.graph, window.domain.clone(), SolverChoice::Auto, 1e-12)?;
    pairs
        .iter()
        .map(|&(x, y)| {
            let gx = op.green_column(x)?;
            let gy = op.green_column(y)?;
            let (ix, iy) = (window.domain.require(x)?, window.domain.require(y)?);
            let ratio = (gx[iy] / (gx[ix] * gy[iy]).sqrt()).clamp(-1.0, 1.0);
            Ok((ratio, ratio.asin() / std::f64::consts::PI))
        })
        .collect()
}

/// Monte Carlo `P(x ↔ y in E^{≥0})` against the arcsin formula, per pair.
pub fn arcsin_validation(window: &Window, pairs: &[(usize, usize)], samples: u64, seed: u64, workers: usize) -> Result<Vec<ArcsinRow>> {
    let targets = arcsin_targets(window, pairs)?;
    let state = Sampling::new(window)?;
    let out = run_replicas(&state, 0..samples, workers, |s, r| Ok(two_point_replica(window, s, &[0.0], pairs, seed, r)))?;
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let mut t = Tally::default();
            for o in &out {
                t.push_bool(o[0][i].connected);
            }
            let estimate = t.estimate(seed);
            let (green_ratio, target) = targets[i];
            ArcsinRow { x, y, green_ratio, target, estimate, z: estimate.binomial_z(target) }
        })
        .collect())
}

/// `Σ_{y ∈ K} (λ_y - Σ_{z ∈ K} λ_yz - Σ_{z ∈ U∖K} λ_yz P_z(first step into K))`,
/// an upper bound on `cap_U(K)` from one-step returns.
pub fn capacity_upper_bound(window: &Window, cluster: &[usize], in_cluster: &dyn Fn(usize) -> bool) -> f64 {
    let g = &window.graph;
    cluster
        .iter()
        .map(|&y| {
            let mut e = g.mass(y);
            for nb in g.neighbors(y) {
                let z = nb.vertex as usize;
                let w = g.edge(nb.edge as usize).weight;
                if in_cluster(z) {
                    e -= w;
                } else if window.domain.contains(z) {
                    let into: f64 = g
                        .neighbors(z)
                        .iter()
                        .filter(|m| in_cluster(m.vertex as usize))
                        .map(|m| g.edge(m.edge as usize).weight)
                        .sum();
                    e -= w * into / g.mass(z);
                }
            }
            e.max(0.0)
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CapacitySample {
    /// `φ_0 < a`: empty cluster, capacity 0.
    Empty,
    /// Cluster touches the window boundary; its capacity is right-censored.
    Censored,
    /// Only an upper bound was needed: the capacity is below every threshold.
    Below(f64),
    Exact(f64),
}

impl CapacitySample {
    /// Whether `cap ≥ t`; censored clusters exceed every `t` up to `cap_U(U)`.
    pub fn at_least(&self, t: f64, window_capacity: f64) -> bool {
        match *self {
            CapacitySample::Empty => t <= 0.0,
            CapacitySample::Censored => t <= window_capacity,
            CapacitySample::Below(ub) => t <= 0.0 || ub >= t,
            CapacitySample::Exact(c) => c >= t,
        }
    }
}

pub fn capacity_tail_replica(
    window: &Window,
    state: &mut Sampling,
    level: f64,
    t_min: f64,
    tol: f64,
    seed: u64,
    replica: u64,
) -> Result<CapacitySample> {
    let field = state.sampler.sample(field_key(seed, replica));
    let mut uniforms = LazyEdgeUniforms::new(edge_key(seed, replica));
    let ex = state.explorer.explore(window, &field.values, level, window.base, &mut uniforms, None);
    if ex.vertices.is_empty() {
        return Ok(CapacitySample::Empty);
    }
    if ex.touches_boundary {
        return Ok(CapacitySample::Censored);
    }
    let mut members = ex.vertices.clone();
    members.sort_unstable();
    let ub = capacity_upper_bound(window, &members, &|z| members.binary_search(&z).is_ok());
    if ub < t_min {
        return Ok(CapacitySample::Below(ub));
    }
    let op = GreenOperator::with_solver(&window.graph, window.domain.clone(), SolverChoice::Auto, tol)?;
    Ok(CapacitySample::Exact(op.equilibrium_measure(&members)?.capacity))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TailRow {
    pub threshold: f64,
    pub estimate: ObservableEstimate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CapacityTail {
    pub level: f64,
    pub rows: Vec<TailRow>,
    pub fit: Option<ExponentFit>,
    pub censored: u64,
    pub exact_solves: u64,
    pub window_capacity: f64,
}

/// Empirical `P(cap(𝒦) ≥ t)` for the cluster of the window base.
pub fn cluster_capacity_tail(
    window: &Window,
    level: f64,
    thresholds: &[f64],
    samples: u64,
    seed: u64,
    workers: usize,
    tol: f64,
) -> Result<CapacityTail> {
    if thresholds.is_empty() {
        return Err(Error::EmptySet);
    }
    let positive: Vec<f64> = thresholds.iter().copied().filter(|&t| t > 0.0).collect();
    let t_min = positive.iter().copied().fold(f64::INFINITY, f64::min);
    let state = Sampling::new(window)?;
    let caps = run_replicas(&state, 0..samples, workers, |s, r| capacity_tail_replica(window, s, level, t_min, tol, seed, r))?;
    let window_capacity = window.domain_capacity();
    let rows: Vec<TailRow> = thresholds
        .iter()
        .map(|&t| {
            let mut tally = Tally::default();
            for c in &caps {
                tally.push_bool(c.at_least(t, window_capacity));
            }
            TailRow { threshold: t, estimate: tally.estimate(seed) }
        })
        .collect();
    let pts: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.threshold > 0.0).map(|r| (r.threshold, r.estimate.estimate)).collect();
    Ok(CapacityTail {
        level,
        fit: fit_exponent(&pts).ok(),
        censored: caps.iter().filter(|c| matches!(c, CapacitySample::Censored)).count() as u64,
        exact_solves: caps.iter().filter(|c| matches!(c, CapacitySample::Exact(_))).count() as u64,
        rows,
        window_capacity,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryPredictions {
    pub nu: f64,
    pub alpha: f64,
    pub a: f64,
    pub radius: f64,
    /// `|a|^{-2/ν}`, infinite at `a = 0`.
    pub xi: f64,
    pub q: f64,
    pub b1: u8,
    pub b2: u8,
    /// `R^{-ν/2}`, the lower-bound shape of the critical one-arm probability.
    pub one_arm_lower: f64,
    /// `q(R) R^{-ν/2}`.
    pub one_arm_upper: f64,
    /// Shape of the bound on `τ_a^tr(x, y) / τ_0^tr(x, y)` at `d(x, y) = R`, constants set to 1.
    pub two_point_ratio_upper: f64,
}

fn validate_exponents(nu: f64, alpha: f64) -> Result<()> {
    if !(1.0..=alpha / 2.0).contains(&nu) {
        return Err(Error::InvalidArgument(format!("need 1 <= ν <= α/2, got ν={nu}, α={alpha}")));
    }
    Ok(())
}

/// The logarithmic correction in the critical one-arm bound.
pub fn one_arm_correction(radius: f64, nu: f64, alpha: f64) -> Result<f64> {
    validate_exponents(nu, alpha)?;
    if !(radius >= 3.0) {
        return Err(Error::InvalidArgument(format!("q(R) needs R >= 3, got {radius}")));
    }
    let (l, ll) = (radius.ln(), radius.ln().ln());
    Ok(if nu == 1.0 {
        ll
    } else if nu < alpha / 2.0 {
        l.powf((nu - 1.0) / 2.0) * ll.powf(nu)
    } else {
        l.powf(nu) * ll.powf(nu)
    })
}

pub fn correlation_length(a: f64, nu: f64) -> f64 {
    if a == 0.0 {
        f64::INFINITY
    } else {
        a.abs().powf(-2.0 / nu)
    }
}

pub fn two_point_ratio_shape(a: f64, distance: f64, nu: f64, alpha: f64) -> Result<f64> {
    validate_exponents(nu, alpha)?;
    let s = a.abs().powf(2.0 / nu) * distance;
    Ok(if nu == 1.0 {
        (-s / s.ln().max(1.0)).exp()
    } else if nu < alpha / 2.0 {
        (-s).exp()
    } else {
        (-s / (1.0 / a.abs()).ln().max(1.0)).exp()
    })
}

pub fn theory_predictions(a: f64, radius: f64, nu: f64, alpha: f64) -> Result<TheoryPredictions> {
    let q = one_arm_correction(radius, nu, alpha)?;
    let lower = radius.powf(-nu / 2.0);
    Ok(TheoryPredictions {
        nu,
        alpha,
        a,
        radius,
        xi: correlation_length(a, nu),
        q,
        b1: u8::from(nu == 1.0),
        b2: u8::from(alpha == 2.0 * nu),
        one_arm_lower: lower,
        one_arm_upper: q * lower,
        two_point_ratio_upper: two_point_ratio_shape(a, radius, nu, alpha)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gff::{bond_config, bond_config_with_uniforms, FieldSample};
    use crate::rng::materialize_edge_uniforms;

    fn path(n: usize) -> WeightedGraph {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 1.0)).collect();
        WeightedGraph::from_edges(n, &edges).unwrap()
    }

    #[test]
    fn cluster_examples() {
        let g = path(3);
        let closed = BondConfig { level: 0.0, open: vec![false, false], uniforms: vec![] };
        assert_eq!(clusters(&g, &closed).count(), 3);
        let all = BondConfig { level: 0.0, open: vec![true, true], uniforms: vec![] };
        assert_eq!(clusters(&g, &all).count(), 1);
        let first = BondConfig { level: 0.0, open: vec![true, false], uniforms: vec![] };
        let c = clusters(&g, &first);
        assert_eq!(c.members(c.labels[0]), vec![0, 1]);
        assert_eq!(c.members(c.labels[2]), vec![2]);
    }

    #[test]
    fn lazy_exploration_matches_union_find() {
        let w = Window::lattice(3, 7).unwrap();
        let mut state = Sampling::new(&w).unwrap();
        for r in 0..30 {
            let f = state.sampler.sample(field_key(1, r));
            let all = materialize_edge_uniforms(edge_key(1, r), w.graph.edge_count());
            let conf = bond_config_with_uniforms(&w.graph, &w.domain, &f, -0.2, all);
            let labels = clusters(&w.graph, &conf);
            let mut lazy = LazyEdgeUniforms::new(edge_key(1, r));
            let ex = state.explorer.explore(&w, &f.values, -0.2, w.base, &mut lazy, None);
            if f.values[w.base] < -0.2 {
                assert!(ex.vertices.is_empty());
                continue;
            }
            let mut got = ex.vertices.clone();
            got.sort_unstable();
            assert_eq!(got, labels.members(labels.labels[w.base]));
        }
    }

    #[test]
    fn coupled_levels_are_monotone() {
        let w = Window::lattice(3, 9).unwrap();
        let pairs = [(w.base, w.base + 1), (0, w.graph.vertex_count() - 1), (w.base, w.base + 10)];
        let rep = monotone_coupling_check(&w, &[0.5, -0.5, 0.0, 1.0], &[1, 2, 3], &pairs, 40, 7, 2).unwrap();
        assert_eq!(rep.samples, 40);
        assert_eq!(rep.level_pairs, 6);
        assert!(rep.holds(), "{rep:?}");
        assert!(matches!(monotone_coupling_check(&w, &[0.0], &[4], &pairs, 1, 0, 1), Err(Error::Margin(_))));
    }

    #[test]
    fn very_high_level_kills_the_one_arm() {
        let w = Window::lattice(3, 12).unwrap();
        let res = one_arm_estimate(&w, &[50.0], &[1, 2, 3], 20, 4, 1).unwrap();
        assert!(res[0].rows.iter().all(|r| r.estimate.estimate == 0.0 && r.flagged));
        assert!(res[0].fit.is_none());
        assert!(matches!(one_arm_estimate(&w, &[0.0], &[5], 1, 0, 1), Err(Error::Margin(_))));
    }

    #[test]
    fn arcsin_targets_on_the_path() {
        let g = path(4);
        let u = DomainMask::new(&g, &[1, 2]).unwrap();
        let w = Window::new(g, u, 1).unwrap();
        let t = arcsin_targets(&w, &[(1, 2), (1, 1)]).unwrap();
        assert!((t[0].1 - 1.0 / 6.0).abs() < 1e-14);
        assert!((t[1].1 - 0.5).abs() < 1e-14);
        // disconnected in U: g = 0
        let g = path(5);
        let u = DomainMask::new(&g, &[1, 3]).unwrap();
        let w = Window::new(g, u, 1).unwrap();
        assert_eq!(arcsin_targets(&w, &[(1, 3)]).unwrap()[0].1, 0.0);
    }

    #[test]
    fn two_point_self_pair_and_margin() {
        let w = Window::lattice(3, 9).unwrap();
        let r = truncated_two_point(&w, &[0.0, 30.0], w.base, w.base, 400, 2, 1).unwrap();
        assert!(r[0].truncated.estimate > 0.0);
        assert!(r[0].truncated.estimate <= r[0].connected.estimate);
        assert_eq!(r[1].connected.estimate, 0.0);
        let shape = *w.shape().unwrap();
        let far = shape.offset_from_center(&[4, 0, 0]).unwrap();
        assert!(matches!(truncated_two_point(&w, &[0.0], w.base, far, 1, 0, 1), Err(Error::Margin(_))));
    }

    #[test]
    fn capacity_upper_bound_dominates_exact() {
        let w = Window::lattice(3, 9).unwrap();
        let op = GreenOperator::new(&w.graph, w.domain.clone()).unwrap();
        let mut state = Sampling::new(&w).unwrap();
        for r in 0..40 {
            let f = state.sampler.sample(field_key(9, r));
            let mut lazy = LazyEdgeUniforms::new(edge_key(9, r));
            let ex = state.explorer.explore(&w, &f.values, -0.3, w.base, &mut lazy, None);
            if ex.vertices.is_empty() {
                continue;
            }
            let mut k = ex.vertices.clone();
            k.sort_unstable();
            let exact = op.equilibrium_measure(&k).unwrap().capacity;
            let ub = capacity_upper_bound(&w, &k, &|z| k.binary_search(&z).is_ok());
            assert!(ub >= exact - 1e-9, "{ub} < {exact}");
        }
    }

    #[test]
    fn capacity_tail_edges() {
        let w = Window::lattice(3, 8).unwrap();
        let cap_window = w.domain_capacity();
        assert_eq!(cap_window, 6.0 * 64.0);
        let tail = cluster_capacity_tail(&w, 0.0, &[0.0, 5.0, cap_window * 1.01], 50, 3, 1, 1e-8).unwrap();
        assert_eq!(tail.rows[0].estimate.estimate, 1.0);
        assert_eq!(tail.rows[2].estimate.estimate, 0.0);
    }

    #[test]
    fn theory_examples() {
        let p = theory_predictions(0.0, 100.0, 1.0, 3.0).unwrap();
        assert_eq!(p.xi, f64::INFINITY);
        assert!((p.q - 100f64.ln().ln()).abs() < 1e-15);
        assert_eq!((p.b1, p.b2), (1, 0));
        let p = theory_predictions(0.1, 100.0, 2.0, 4.0).unwrap();
        let (l, ll) = (100f64.ln(), 100f64.ln().ln());
        assert!((p.q - l * l * ll * ll).abs() < 1e-12);
        assert_eq!((p.b1, p.b2), (0, 1));
        assert!((p.xi - 10.0).abs() < 1e-12);
        assert!(theory_predictions(0.0, 2.0, 1.0, 3.0).is_err());
        assert!(theory_predictions(0.0, 10.0, 2.0, 3.0).is_err());
        let mid = one_arm_correction(100.0, 1.5, 4.0).unwrap();
        assert!((mid - l.powf(0.25) * ll.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn brute_force_connectivity_on_small_boxes() {
        let w = Window::lattice(3, 5).unwrap();
        let mut state = Sampling::new(&w).unwrap();
        for r in 0..10 {
            let f: FieldSample = state.sampler.sample(field_key(21, r));
            let conf = bond_config(&w.graph, &w.domain, &f, -0.1, edge_key(21, r));
            let labels = clusters(&w.graph, &conf);
            // depth-first search over open edges from every vertex
            for x in 0..w.graph.vertex_count() {
                let mut seen = vec![false; w.graph.vertex_count()];
                let mut stack = vec![x];
                seen[x] = true;
                while let Some(v) = stack.pop() {
                    for nb in w.graph.neighbors(v) {
                        let y = nb.vertex as usize;
                        if conf.open[nb.edge as usize] && !seen[y] {
                            seen[y] = true;
                            stack.push(y);
                        }
                    }
                }
                for y in 0..w.graph.vertex_count() {
                    assert_eq!(seen[y], labels.connected(x, y));
                }
            }
        }
    }
}
