//! Discrete Markovian loop soups on a killed domain `U`.
//!
//! The rooted loop measure gives a length-`n` loop `x_0 → … → x_{n-1} → x_0` the
//! weight `P(x_0, x_1) ⋯ P(x_{n-1}, x_0) / n`, so the total mass of length `n` is
//! `m_n = tr(P_U^n) / n` and all lengths together carry `-log det(I - P_U)`.
//! A soup of intensity `α` is a Poisson process with `α` times this measure.
//!
//! Sampling draws a Poisson count per length, a root with probability
//! `(P^n)_{xx} / tr(P^n)` and then the bridge back to the root step by step,
//! using the columns `P^r e_x`. Everything spectral goes through the symmetric
//! matrix `S = D^{-1/2} W D^{-1/2}`, which has the same spectrum as `P_U`.
//!
//! Only the discrete skeleton is modeled: loops that meet inside a cable are not
//! connected here, so loop clusters under-connect compared to the cable system.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_packing, DomainMask, WeightedGraph, UNREACHED};
use crate::linalg::{KilledLaplacian, DENSE_LIMIT};
use crate::percolation::UnionFind;
use crate::potential::GreenOperator;
use crate::replica::run_replicas;
use crate::rng::{uniform, Purpose, StreamKey};
use crate::stats::{two_sample_z, ObservableEstimate, Tally};

/// Largest domain whose transition matrix is diagonalized.
pub const LOOP_DENSE_LIMIT: usize = 2500;
/// Spectral radii at or above `1 - RECURRENCE_MARGIN` are rejected.
pub const RECURRENCE_MARGIN: f64 = 1e-12;
pub const DEFAULT_TAIL_FRACTION: f64 = 1e-3;
const MAX_AUTO_LENGTH: usize = 200_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopMasses {
    /// `m_n` at index `n`, for `n <= n_max`; entries 0 and 1 are zero.
    pub by_length: Vec<f64>,
    /// `Σ_{n <= n_max} m_n`.
    pub partial: f64,
    /// `-log det(I - P_U)` from a Cholesky factor of `L_U`.
    pub total: f64,
    /// `total - partial`.
    pub tail: f64,
}

/// `-log det(I - P_V) = Σ_{x ∈ V} log λ_x - log det L_V`, zero for empty `V`.
pub fn log_det_mass(graph: &WeightedGraph, members: &[usize]) -> Result<f64> {
    if members.is_empty() {
        return Ok(0.0);
    }
    if members.len() > DENSE_LIMIT {
        return Err(Error::TooLarge { what: "log-det domain", size: members.len(), limit: DENSE_LIMIT });
    }
    let mask = DomainMask::new(graph, members)?;
    mask.check_transient(graph)?;
    let l = KilledLaplacian::new(graph, &mask).to_dense();
    let chol = l.cholesky().ok_or_else(|| Error::IllConditioned { residual: f64::NAN })?;
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let log_lambda: f64 = mask.members().iter().map(|&x| graph.mass(x).ln()).sum();
    Ok(log_lambda - log_det)
}

/// `D^{-1/2} W D^{-1/2}` restricted to `members` (local order).
fn symmetric_transition(graph: &WeightedGraph, mask: &DomainMask) -> DMatrix<f64> {
    let n = mask.len();
    let mut s = DMatrix::zeros(n, n);
    for (i, &x) in mask.members().iter().enumerate() {
        for nb in graph.neighbors(x) {
            if let Some(j) = mask.local(nb.vertex as usize) {
                let w = graph.edge(nb.edge as usize).weight;
                s[(i, j)] = w / (graph.mass(x) * graph.mass(nb.vertex as usize)).sqrt();
            }
        }
    }
    s
}

fn transition_eigenvalues(graph: &WeightedGraph, members: &[usize]) -> Result<Vec<f64>> {
    if members.is_empty() {
        return Ok(Vec::new());
    }
    if members.len() > LOOP_DENSE_LIMIT {
        return Err(Error::TooLarge { what: "loop domain", size: members.len(), limit: LOOP_DENSE_LIMIT });
    }
    let mask = DomainMask::new(graph, members)?;
    Ok(symmetric_transition(graph, &mask).symmetric_eigenvalues().iter().copied().collect())
}

fn check_radius(theta: &[f64]) -> Result<()> {
    let rho = theta.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    if rho >= 1.0 - RECURRENCE_MARGIN {
        return Err(Error::Recurrence(rho));
    }
    Ok(())
}

/// `Σ_{2 <= n <= n_max} tr(P^n) / n` from a spectrum, clamping rounding noise at zero per length.
fn truncated_spectral_mass(theta: &[f64], n_max: usize) -> f64 {
    let mut pow: Vec<f64> = theta.to_vec();
    let mut total = 0.0;
    for n in 2..=n_max {
        let mut tr = 0.0;
        for (p, &t) in pow.iter_mut().zip(theta) {
            *p *= t;
            tr += *p;
        }
        total += trace_mass(tr, n, theta.len());
    }
    total
}

fn trace_mass(trace: f64, n: usize, dim: usize) -> f64 {
    // odd lengths on bipartite domains have trace 0 up to rounding
    if trace <= 1e-14 * dim.max(1) as f64 {
        0.0
    } else {
        trace / n as f64
    }
}

/// Spectral data of `P_U` and the per-length loop masses.
pub struct LoopDomain<'g> {
    graph: &'g WeightedGraph,
    domain: DomainMask,
    lambda: Vec<f64>,
    // in-domain adjacency in local indices: targets and edge weights
    offsets: Vec<usize>,
    targets: Vec<u32>,
    weights: Vec<f64>,
    theta: Vec<f64>,
    vectors: DMatrix<f64>,
    n_max: usize,
    masses: LoopMasses,
}

impl<'g> LoopDomain<'g> {
    pub fn new(graph: &'g WeightedGraph, domain: DomainMask, n_max: usize) -> Result<Self> {
        if n_max < 2 {
            return Err(Error::InvalidArgument(format!("n_max must be at least 2, got {n_max}")));
        }
        let mut d = Self::spectral(graph, domain)?;
        d.set_length(n_max);
        Ok(d)
    }

    /// Chooses the smallest `n_max` whose tail is at most `fraction` of the total mass.
    pub fn with_tail_fraction(graph: &'g WeightedGraph, domain: DomainMask, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("tail fraction must lie in (0, 1), got {fraction}")));
        }
        let mut d = Self::spectral(graph, domain)?;
        let budget = fraction * d.masses.total;
        let mut pow = d.theta.clone();
        let mut partial = 0.0;
        let mut n = 1;
        while n < MAX_AUTO_LENGTH {
            n += 1;
            let mut tr = 0.0;
            for (p, &t) in pow.iter_mut().zip(&d.theta) {
                *p *= t;
                tr += *p;
            }
            partial += trace_mass(tr, n, d.theta.len());
            if d.masses.total - partial <= budget {
                break;
            }
        }
        d.set_length(n);
        Ok(d)
    }

    fn spectral(graph: &'g WeightedGraph, domain: DomainMask) -> Result<Self> {
        let n = domain.len();
        if n > LOOP_DENSE_LIMIT {
            return Err(Error::TooLarge { what: "loop domain", size: n, limit: LOOP_DENSE_LIMIT });
        }
        let eig = symmetric_transition(graph, &domain).symmetric_eigen();
        let theta: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        check_radius(&theta)?;
        let total = log_det_mass(graph, domain.members())?;
        let lambda: Vec<f64> = domain.members().iter().map(|&x| graph.mass(x)).collect();
        let mut offsets = vec![0];
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for &x in domain.members() {
            for nb in graph.neighbors(x) {
                if let Some(j) = domain.local(nb.vertex as usize) {
                    targets.push(j as u32);
                    weights.push(graph.edge(nb.edge as usize).weight);
                }
            }
            offsets.push(targets.len());
        }
        let masses = LoopMasses { by_length: Vec::new(), partial: 0.0, total, tail: total };
        Ok(Self { graph, domain, lambda, offsets, targets, weights, theta, vectors: eig.eigenvectors, n_max: 0, masses })
    }

    fn set_length(&mut self, n_max: usize) {
        let dim = self.theta.len();
        let mut by_length = vec![0.0; n_max + 1];
        let mut pow = self.theta.clone();
        for (n, slot) in by_length.iter_mut().enumerate().skip(2) {
            let mut tr = 0.0;
            for (p, &t) in pow.iter_mut().zip(&self.theta) {
                *p *= t;
                tr += *p;
            }
            *slot = trace_mass(tr, n, dim);
        }
        let partial: f64 = by_length.iter().sum();
        self.n_max = n_max;
        self.masses = LoopMasses { by_length, partial, total: self.masses.total, tail: self.masses.total - partial };
    }

    pub fn graph(&self) -> &'g WeightedGraph {
        self.graph
    }

    pub fn domain(&self) -> &DomainMask {
        &self.domain
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn masses(&self) -> &LoopMasses {
        &self.masses
    }

    /// Eigenvalues of `P_U`, ascending.
    pub fn spectrum(&self) -> &[f64] {
        &self.theta
    }

    pub fn spectral_radius(&self) -> f64 {
        self.theta.iter().fold(0.0f64, |m, t| m.max(t.abs()))
    }

    /// `-Σ_k log(1 - θ_k)`, the total mass by the spectral route.
    pub fn total_from_spectrum(&self) -> f64 {
        -self.theta.iter().map(|t| (1.0 - t).ln()).sum::<f64>()
    }

    fn neighbors_local(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[i]..self.offsets[i + 1];
        self.targets[range.clone()].iter().zip(&self.weights[range]).map(|(&j, &w)| (j as usize, w))
    }

    /// `α Σ_{2 <= n <= n_max} (P^n)_{xx}`, the mean number of visits to each vertex (local order).
    pub fn expected_vertex_visits(&self, alpha: f64) -> Vec<f64> {
        let s: Vec<f64> = self.theta.iter().map(|&t| power_sum(t, 2, self.n_max)).collect();
        (0..self.domain.len())
            .map(|i| alpha * (0..s.len()).map(|k| self.vectors[(i, k)].powi(2) * s[k]).sum::<f64>())
            .collect()
    }

    /// `α Σ_{2 <= n <= n_max} P(x, y) (P^{n-1})(y, x)`, the mean number of steps `x → y`.
    pub fn expected_edge_traversals(&self, alpha: f64, x: usize, y: usize) -> Result<f64> {
        let i = self.domain.require(x)?;
        let j = self.domain.require(y)?;
        let Some(e) = self.graph.edge_between(x, y) else {
            return Ok(0.0);
        };
        let p_xy = self.graph.edge(e).weight / self.lambda[i];
        let mut sum = 0.0;
        for (k, &t) in self.theta.iter().enumerate() {
            sum += self.vectors[(j, k)] * self.vectors[(i, k)] * power_sum(t, 1, self.n_max - 1);
        }
        Ok(alpha * p_xy * (self.lambda[i] / self.lambda[j]).sqrt() * sum)
    }

    fn root_weights(&self, n: usize) -> Vec<f64> {
        let pow: Vec<f64> = self.theta.iter().map(|t| t.powi(n as i32)).collect();
        let mut acc = 0.0;
        (0..self.domain.len())
            .map(|i| {
                let w: f64 = (0..pow.len()).map(|k| self.vectors[(i, k)].powi(2) * pow[k]).sum();
                acc += w.max(0.0);
                acc
            })
            .collect()
    }
}

/// `Σ_{lo <= n <= hi} t^n`.
fn power_sum(t: f64, lo: usize, hi: usize) -> f64 {
    if hi < lo {
        return 0.0;
    }
    let mut p = t.powi(lo as i32);
    let mut s = 0.0;
    for _ in lo..=hi {
        s += p;
        p *= t;
    }
    s
}

/// `m_n` for `2 <= n <= n_max`, with the log-det total and the truncation tail.
pub fn loop_mass_by_length(graph: &WeightedGraph, domain: DomainMask, n_max: usize) -> Result<LoopMasses> {
    Ok(LoopDomain::new(graph, domain, n_max)?.masses.clone())
}

/// Cyclic vertex sequence; the step from the last vertex back to the first closes it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteLoop {
    vertices: Vec<usize>,
}

impl DiscreteLoop {
    pub fn new(vertices: Vec<usize>) -> Result<Self> {
        if vertices.len() < 2 {
            return Err(Error::InvalidArgument(format!("a loop needs at least 2 steps, got {}", vertices.len())));
        }
        Ok(Self { vertices })
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn root(&self) -> usize {
        self.vertices[0]
    }

    pub fn vertices(&self) -> &[usize] {
        &self.vertices
    }

    /// Visited vertices, sorted and deduplicated.
    pub fn range(&self) -> Vec<usize> {
        let mut r = self.vertices.clone();
        r.sort_unstable();
        r.dedup();
        r
    }

    /// Directed steps, including the closing one.
    pub fn steps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn visits(&self, x: usize) -> usize {
        self.vertices.iter().filter(|&&v| v == x).count()
    }

    /// Edge ids traversed, one entry per step.
    pub fn traversals(&self, graph: &WeightedGraph) -> Result<Vec<usize>> {
        self.steps()
            .map(|(a, b)| graph.edge_between(a, b).ok_or_else(|| Error::InvalidArgument(format!("loop steps across non-edge ({a}, {b})"))))
            .collect()
    }

    /// Consecutive vertices adjacent and every vertex inside `domain`.
    pub fn is_valid(&self, graph: &WeightedGraph, domain: &DomainMask) -> bool {
        self.vertices.iter().all(|&v| domain.contains(v)) && self.steps().all(|(a, b)| graph.edge_between(a, b).is_some())
    }

    pub fn meets(&self, set: &DomainMask) -> bool {
        self.vertices.iter().any(|&v| set.contains(v))
    }

    pub fn inside(&self, set: &DomainMask) -> bool {
        self.vertices.iter().all(|&v| set.contains(v))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopSoupSample {
    pub alpha: f64,
    pub n_max: usize,
    pub loops: Vec<DiscreteLoop>,
    /// Number of loops of length `n` at index `n`.
    pub counts: Vec<u64>,
}

impl LoopSoupSample {
    pub fn from_loops(alpha: f64, n_max: usize, loops: Vec<DiscreteLoop>) -> Result<Self> {
        let mut counts = vec![0; n_max + 1];
        for l in &loops {
            if l.len() > n_max {
                return Err(Error::InvalidArgument(format!("loop of length {} exceeds n_max = {n_max}", l.len())));
            }
            counts[l.len()] += 1;
        }
        Ok(Self { alpha, n_max, loops, counts })
    }

    pub fn len(&self) -> usize {
        self.loops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loops.is_empty()
    }

    pub fn vertex_visits(&self, x: usize) -> usize {
        self.loops.iter().map(|l| l.visits(x)).sum()
    }

    /// Number of directed steps `x → y` over all loops.
    pub fn edge_traversals(&self, x: usize, y: usize) -> usize {
        self.loops.iter().map(|l| l.steps().filter(|&s| s == (x, y)).count()).sum()
    }

    /// Per-length counts of the loops that stay inside `set`.
    pub fn confined_counts(&self, set: &DomainMask) -> Vec<u64> {
        let mut c = vec![0; self.n_max + 1];
        for l in self.loops.iter().filter(|l| l.inside(set)) {
            c[l.len()] += 1;
        }
        c
    }
}

/// Per-worker sampling state: cached root laws and bridge columns.
#[derive(Clone)]
pub struct LoopSampler<'a, 'g> {
    domain: &'a LoopDomain<'g>,
    alpha: f64,
    roots: HashMap<usize, Vec<f64>>,
    columns: Vec<Vec<f64>>,
    supports: Vec<Vec<u32>>,
}

impl<'a, 'g> LoopSampler<'a, 'g> {
    /// Fails when the mass beyond `n_max` exceeds `tail_budget`.
    pub fn new(domain: &'a LoopDomain<'g>, alpha: f64, tail_budget: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("intensity must be finite and nonnegative, got {alpha}")));
        }
        if domain.masses.tail > tail_budget {
            return Err(Error::TailBudget { tail: domain.masses.tail, budget: tail_budget });
        }
        Ok(Self { domain, alpha, roots: HashMap::new(), columns: Vec::new(), supports: Vec::new() })
    }

    pub fn domain(&self) -> &'a LoopDomain<'g> {
        self.domain
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sample(&mut self, key: StreamKey) -> Result<LoopSoupSample> {
        let d = self.domain;
        let mut rng = key.rng();
        let mut loops = Vec::new();
        let mut counts = vec![0u64; d.n_max + 1];
        if self.alpha > 0.0 {
            for n in 2..=d.n_max {
                let mean = self.alpha * d.masses.by_length[n];
                if mean <= 0.0 {
                    continue;
                }
                let poisson = Poisson::new(mean).map_err(|e| Error::InvalidArgument(format!("poisson mean {mean}: {e}")))?;
                let k = poisson.sample(&mut rng) as u64;
                counts[n] = k;
                for _ in 0..k {
                    let root = self.draw_root(n, &mut rng);
                    loops.push(self.bridge(root, n, &mut rng)?);
                }
            }
        }
        Ok(LoopSoupSample { alpha: self.alpha, n_max: d.n_max, loops, counts })
    }

    fn draw_root<R: Rng>(&mut self, n: usize, rng: &mut R) -> usize {
        let d = self.domain;
        let cum = self.roots.entry(n).or_insert_with(|| d.root_weights(n));
        let u = uniform(rng) * cum[cum.len() - 1];
        cum.partition_point(|&c| c <= u).min(cum.len() - 1)
    }

    /// Loop of length `n` rooted at local index `root`, drawn from the bridge law.
    fn bridge<R: Rng>(&mut self, root: usize, n: usize, rng: &mut R) -> Result<DiscreteLoop> {
        let d = self.domain;
        let dim = d.domain.len();
        while self.columns.len() < n {
            self.columns.push(vec![0.0; dim]);
            self.supports.push(Vec::new());
        }
        self.columns[0][root] = 1.0;
        self.supports[0].push(root as u32);
        // columns[r][y] = (P^r)(y, root)
        for r in 1..n {
            let (prev, cur) = self.columns.split_at_mut(r);
            let (prev, cur) = (&prev[r - 1], &mut cur[0]);
            let (sprev, scur) = self.supports.split_at_mut(r);
            let (sprev, scur) = (&sprev[r - 1], &mut scur[0]);
            for &y in sprev {
                let cy = prev[y as usize];
                for (z, w) in d.neighbors_local(y as usize) {
                    let v = w / d.lambda[z] * cy;
                    if v > 0.0 {
                        if cur[z] == 0.0 {
                            scur.push(z as u32);
                        }
                        cur[z] += v;
                    }
                }
            }
        }
        let mut vertices = Vec::with_capacity(n);
        vertices.push(d.domain.members()[root]);
        let mut z = root;
        let mut failed = false;
        for remaining in (2..=n).rev() {
            let col = &self.columns[remaining - 1];
            let total: f64 = d.neighbors_local(z).map(|(y, w)| w * col[y]).sum();
            if !(total > 0.0) {
                failed = true;
                break;
            }
            let u = uniform(rng) * total;
            let mut acc = 0.0;
            let mut next = None;
            for (y, w) in d.neighbors_local(z) {
                let p = w * col[y];
                if p > 0.0 {
                    next = Some(y);
                    acc += p;
                    if u < acc {
                        break;
                    }
                }
            }
            z = next.expect("positive total has a positive term");
            vertices.push(d.domain.members()[z]);
        }
        for r in 0..n {
            for &y in &self.supports[r] {
                self.columns[r][y as usize] = 0.0;
            }
            self.supports[r].clear();
        }
        if failed {
            return Err(Error::IllConditioned { residual: f64::NAN });
        }
        DiscreteLoop::new(vertices)
    }
}

/// One soup drawn from the stream `key`.
pub fn sample_loop_soup(domain: &LoopDomain, alpha: f64, tail_budget: f64, key: StreamKey) -> Result<LoopSoupSample> {
    LoopSampler::new(domain, alpha, tail_budget)?.sample(key)
}

pub fn loop_key(seed: u64, replica: u64) -> StreamKey {
    StreamKey::new(seed, replica, Purpose::Loops)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CountRow {
    pub length: usize,
    pub expected: f64,
    pub mean: f64,
    pub variance: f64,
    pub z_mean: f64,
    pub z_variance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoopCountReport {
    pub alpha: f64,
    pub n_max: usize,
    pub soups: u64,
    pub rows: Vec<CountRow>,
    /// `α · (total - tail)`.
    pub total_expected: f64,
    pub total: ObservableEstimate,
    pub total_z: f64,
    pub tail: f64,
}

/// Per-length count laws for `2 <= n <= max_length` and the total count, over `soups` soups.
pub fn loop_count_check(domain: &LoopDomain, alpha: f64, max_length: usize, soups: u64, seed: u64, workers: usize) -> Result<LoopCountReport> {
    let sampler = LoopSampler::new(domain, alpha, f64::INFINITY)?;
    let counts = run_replicas(&sampler, 0..soups, workers, |s, r| Ok(s.sample(loop_key(seed, r))?.counts))?;
    let top = max_length.min(domain.n_max);
    let mut per_length = vec![Tally::default(); top + 1];
    let mut total = Tally::default();
    for c in &counts {
        for (n, t) in per_length.iter_mut().enumerate().skip(2) {
            t.push(c[n] as f64);
        }
        total.push(c.iter().sum::<u64>() as f64);
    }
    let rows = (2..=top)
        .map(|n| {
            let t = &per_length[n];
            let expected = alpha * domain.masses.by_length[n];
            CountRow {
                length: n,
                expected,
                mean: t.mean(),
                variance: t.variance(),
                z_mean: t.poisson_mean_z(expected),
                z_variance: t.poisson_variance_z(expected),
            }
        })
        .collect();
    let total_expected = alpha * domain.masses.partial;
    Ok(LoopCountReport {
        alpha,
        n_max: domain.n_max,
        soups,
        rows,
        total_expected,
        total: total.estimate(seed),
        total_z: total.poisson_mean_z(total_expected),
        tail: domain.masses.tail,
    })
}

fn check_disjoint_subsets(domain: &DomainMask, k: &[usize], m: &[usize]) -> Result<()> {
    if k.is_empty() || m.is_empty() {
        return Err(Error::EmptySet);
    }
    domain.require_all(k)?;
    domain.require_all(m)?;
    if let Some(&x) = k.iter().find(|x| m.contains(x)) {
        return Err(Error::Overlap(x));
    }
    Ok(())
}

fn four_domains(domain: &DomainMask, k: &[usize], m: &[usize]) -> [Vec<usize>; 4] {
    let minus = |drop: &[&[usize]]| -> Vec<usize> {
        domain.members().iter().copied().filter(|x| drop.iter().all(|d| !d.contains(x))).collect()
    };
    [domain.members().to_vec(), minus(&[k]), minus(&[m]), minus(&[k, m])]
}

/// Mass of the loops meeting both `K` and `M`:
/// `F(U) - F(U∖K) - F(U∖M) + F(U∖(K∪M))` with `F(V) = -log det(I - P_V)`.
pub fn loop_mass_crossing(graph: &WeightedGraph, domain: &DomainMask, k: &[usize], m: &[usize]) -> Result<f64> {
    check_disjoint_subsets(domain, k, m)?;
    let [u, uk, um, ukm] = four_domains(domain, k, m);
    Ok(log_det_mass(graph, &u)? - log_det_mass(graph, &uk)? - log_det_mass(graph, &um)? + log_det_mass(graph, &ukm)?)
}

/// Same mass through Green's functions:
/// `log det g_U[K, K] - log det g_{U∖M}[K, K]`. Needs only `|K|` solves per domain.
pub fn loop_mass_crossing_green(op: &GreenOperator, k: &[usize], m: &[usize]) -> Result<f64> {
    check_disjoint_subsets(op.domain(), k, m)?;
    let rest = op.domain().without(op.graph(), m)?;
    let inner = GreenOperator::with_solver(op.graph(), rest, crate::linalg::SolverChoice::Auto, op.tolerance())?;
    let log_det = |g: DMatrix<f64>| -> Result<f64> {
        let chol = g.cholesky().ok_or_else(|| Error::IllConditioned { residual: f64::NAN })?;
        Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    };
    Ok(log_det(op.green_matrix(k)?)? - log_det(inner.green_matrix(k)?)?)
}

/// Crossing mass restricted to loop lengths `<= n_max`, from the four spectra.
pub fn loop_mass_crossing_truncated(graph: &WeightedGraph, domain: &DomainMask, k: &[usize], m: &[usize], n_max: usize) -> Result<f64> {
    check_disjoint_subsets(domain, k, m)?;
    let sets = four_domains(domain, k, m);
    let mut parts = [0.0; 4];
    for (p, set) in parts.iter_mut().zip(&sets) {
        *p = truncated_spectral_mass(&transition_eigenvalues(graph, set)?, n_max);
    }
    Ok(parts[0] - parts[1] - parts[2] + parts[3])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossingRow {
    pub k: Vec<usize>,
    pub m: Vec<usize>,
    /// All lengths, by inclusion–exclusion of log-dets.
    pub exact_mass: f64,
    /// Lengths `<= n_max` only.
    pub truncated_mass: f64,
    /// `1 - exp(-α · truncated_mass)`.
    pub target: f64,
    pub estimate: ObservableEstimate,
    pub z: f64,
}

/// Fraction of soups holding a loop that meets both sets, per `(K, M)` configuration.
pub fn crossing_frequency(
    domain: &LoopDomain,
    alpha: f64,
    configs: &[(Vec<usize>, Vec<usize>)],
    soups: u64,
    seed: u64,
    workers: usize,
) -> Result<Vec<CrossingRow>> {
    let g = domain.graph;
    let masks: Vec<(DomainMask, DomainMask)> =
        configs.iter().map(|(k, m)| Ok((DomainMask::new(g, k)?, DomainMask::new(g, m)?))).collect::<Result<_>>()?;
    let mut rows: Vec<CrossingRow> = Vec::with_capacity(configs.len());
    for (k, m) in configs {
        let exact_mass = loop_mass_crossing(g, &domain.domain, k, m)?;
        let truncated_mass = loop_mass_crossing_truncated(g, &domain.domain, k, m, domain.n_max)?;
        rows.push(CrossingRow {
            k: k.clone(),
            m: m.clone(),
            exact_mass,
            truncated_mass,
            target: 1.0 - (-alpha * truncated_mass).exp(),
            estimate: Tally::default().estimate(seed),
            z: 0.0,
        });
    }
    let sampler = LoopSampler::new(domain, alpha, f64::INFINITY)?;
    let hits = run_replicas(&sampler, 0..soups, workers, |s, r| {
        let soup = s.sample(loop_key(seed, r))?;
        Ok(masks.iter().map(|(k, m)| soup.loops.iter().any(|l| l.meets(k) && l.meets(m))).collect::<Vec<bool>>())
    })?;
    for (i, row) in rows.iter_mut().enumerate() {
        let mut t = Tally::default();
        for h in &hits {
            t.push_bool(h[i]);
        }
        row.estimate = t.estimate(seed);
        row.z = row.estimate.binomial_z(row.target);
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RestrictionRow {
    pub length: usize,
    /// `α tr(P_{U'}^n) / n`.
    pub analytic: f64,
    pub confined: ObservableEstimate,
    pub direct: ObservableEstimate,
    pub z_confined: f64,
    pub z_direct: f64,
    /// Two-sample z-score between confined and direct counts.
    pub z_between: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RestrictionReport {
    pub alpha: f64,
    pub n_max: usize,
    pub soups: u64,
    pub rows: Vec<RestrictionRow>,
}

impl RestrictionReport {
    pub fn max_abs_z(&self) -> f64 {
        self.rows.iter().flat_map(|r| [r.z_confined, r.z_direct, r.z_between]).fold(0.0, |m, z| m.max(z.abs()))
    }
}

/// Loops of the soup on `U` that stay in `U'` against the analytic masses of `U'`
/// and against soups sampled directly on `U'`.
pub fn restriction_property_test(
    graph: &WeightedGraph,
    domain: &DomainMask,
    sub: &DomainMask,
    alpha: f64,
    n_max: usize,
    soups: u64,
    seed: u64,
    workers: usize,
) -> Result<RestrictionReport> {
    if !sub.is_subset_of(domain) {
        return Err(Error::InvalidArgument("subdomain is not contained in the domain".into()));
    }
    let big = LoopDomain::new(graph, domain.clone(), n_max)?;
    let small = LoopDomain::new(graph, sub.clone(), n_max)?;
    let big_sampler = LoopSampler::new(&big, alpha, f64::INFINITY)?;
    let small_sampler = LoopSampler::new(&small, alpha, f64::INFINITY)?;
    let confined = run_replicas(&big_sampler, 0..soups, workers, |s, r| Ok(s.sample(loop_key(seed, r))?.confined_counts(sub)))?;
    let direct = run_replicas(&small_sampler, 0..soups, workers, |s, r| {
        Ok(s.sample(StreamKey::new(seed, r, Purpose::Aux))?.counts)
    })?;
    let rows = (2..=n_max)
        .map(|n| {
            let (mut tc, mut td) = (Tally::default(), Tally::default());
            for c in &confined {
                tc.push(c[n] as f64);
            }
            for c in &direct {
                td.push(c[n] as f64);
            }
            let analytic = alpha * small.masses.by_length[n];
            let (ec, ed) = (tc.estimate(seed), td.estimate(seed));
            RestrictionRow {
                length: n,
                analytic,
                confined: ec,
                direct: ed,
                z_confined: tc.poisson_mean_z(analytic),
                z_direct: td.poisson_mean_z(analytic),
                z_between: if ec.stderr == 0.0 && ed.stderr == 0.0 && ec.estimate == ed.estimate { 0.0 } else { two_sample_z(&ec, &ed) },
            }
        })
        .collect();
    Ok(RestrictionReport { alpha, n_max, soups, rows })
}

/// Cluster of loops containing the base: loops sharing a vertex are merged.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopCluster {
    /// Indices into the sample's loop list.
    pub loops: Vec<usize>,
    /// Union of the ranges, sorted.
    pub vertices: Vec<usize>,
}

fn loop_union_find(sample: &LoopSoupSample) -> (UnionFind, HashMap<usize, usize>) {
    let mut uf = UnionFind::new(sample.loops.len());
    let mut owner: HashMap<usize, usize> = HashMap::new();
    for (i, l) in sample.loops.iter().enumerate() {
        for &v in l.vertices() {
            match owner.get(&v) {
                Some(&j) => {
                    uf.union(i, j);
                }
                None => {
                    owner.insert(v, i);
                }
            }
        }
    }
    (uf, owner)
}

/// Discrete loop cluster of `base`; empty when no loop visits `base`.
pub fn loop_clusters(sample: &LoopSoupSample, base: usize) -> LoopCluster {
    let (mut uf, owner) = loop_union_find(sample);
    let Some(&start) = owner.get(&base) else {
        return LoopCluster::default();
    };
    let root = uf.find(start);
    let loops: Vec<usize> = (0..sample.loops.len()).filter(|&i| uf.find(i) == root).collect();
    let mut vertices: Vec<usize> = loops.iter().flat_map(|&i| sample.loops[i].vertices().iter().copied()).collect();
    vertices.sort_unstable();
    vertices.dedup();
    LoopCluster { loops, vertices }
}

/// Whether `x` and `y` lie in one discrete loop cluster.
pub fn loop_connected(sample: &LoopSoupSample, x: usize, y: usize) -> bool {
    let (mut uf, owner) = loop_union_find(sample);
    match (owner.get(&x), owner.get(&y)) {
        (Some(&i), Some(&j)) => uf.find(i) == uf.find(j),
        _ => false,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoopConnectionRow {
    pub x: usize,
    pub y: usize,
    /// `(2/π) arcsin(g(x,y) / sqrt(g(x,x) g(y,y)))`, the sign-cluster connection probability.
    pub target: f64,
    pub estimate: ObservableEstimate,
    pub z: f64,
    /// `estimate <= target + 3σ`.
    pub within_bound: bool,
}

/// Loop-cluster connection frequencies against the sign-cluster law, which they
/// can only undershoot since cable-interior contacts are not modeled.
pub fn loop_connection_check(domain: &LoopDomain, alpha: f64, pairs: &[(usize, usize)], soups: u64, seed: u64, workers: usize) -> Result<Vec<LoopConnectionRow>> {
    let op = GreenOperator::new(domain.graph, domain.domain.clone())?;
    let mut targets = Vec::with_capacity(pairs.len());
    for &(x, y) in pairs {
        let gxy = op.green(x, y)?;
        let ratio = (gxy / (op.green(x, x)? * op.green(y, y)?).sqrt()).clamp(-1.0, 1.0);
        targets.push(2.0 / std::f64::consts::PI * ratio.asin());
    }
    let sampler = LoopSampler::new(domain, alpha, f64::INFINITY)?;
    let hits = run_replicas(&sampler, 0..soups, workers, |s, r| {
        let soup = s.sample(loop_key(seed, r))?;
        Ok(pairs.iter().map(|&(x, y)| loop_connected(&soup, x, y)).collect::<Vec<bool>>())
    })?;
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let mut t = Tally::default();
            for h in &hits {
                t.push_bool(h[i]);
            }
            let estimate = t.estimate(seed);
            let target = targets[i];
            let sd = (target * (1.0 - target) / soups as f64).sqrt();
            LoopConnectionRow { x, y, target, estimate, z: estimate.binomial_z(target), within_bound: estimate.estimate <= target + 3.0 * sd }
        })
        .collect())
}

/// Scales `R = C(ℓ+1)L`, sites `𝒜_k` of `Λ(L)` whose `L`-balls meet the sphere of
/// radius `CkL` around the base, and annuli `𝔸_k` (union of those balls), `1 <= k <= ℓ`.
#[derive(Clone, Debug)]
pub struct AnnuliSchema {
    pub ell: usize,
    pub scale: usize,
    pub constant: usize,
    pub base: usize,
    pub radius: usize,
    /// `sites[k - 1]` is `𝒜_k`.
    pub sites: Vec<Vec<usize>>,
    /// `annuli[k - 1]` is `𝔸_k`, sorted.
    pub annuli: Vec<Vec<usize>>,
    site_balls: Vec<Vec<Vec<usize>>>,
    dist: Vec<usize>,
}

pub const DEFAULT_ANNULI_CONSTANT: usize = 5;

impl AnnuliSchema {
    pub fn new(graph: &WeightedGraph, base: usize, ell: usize, scale: usize, constant: usize) -> Result<Self> {
        graph.check_vertex(base)?;
        if ell < 2 || scale < 2 || constant < 1 {
            return Err(Error::InvalidArgument(format!("need ℓ, L >= 2 and C >= 1, got ℓ = {ell}, L = {scale}, C = {constant}")));
        }
        let radius = constant * (ell + 1) * scale;
        let dist = graph.distances_from(base);
        if !dist.iter().any(|&d| d != UNREACHED && d > radius) {
            return Err(Error::Margin(format!("no vertex beyond radius R = {radius} from the base")));
        }
        let packing = build_packing(graph, scale, base)?;
        let mut sites = Vec::with_capacity(ell);
        let mut annuli = Vec::with_capacity(ell);
        let mut site_balls = Vec::with_capacity(ell);
        for k in 1..=ell {
            let r = constant * k * scale;
            let sphere: Vec<usize> = (0..graph.vertex_count()).filter(|&x| dist[x] == r).collect();
            let near = graph.distances_from_set(&sphere, scale);
            let s: Vec<usize> = packing.sites.iter().copied().filter(|&x| near[x] <= scale).collect();
            let reach = graph.distances_from_set(&s, scale);
            let a: Vec<usize> = (0..graph.vertex_count()).filter(|&x| reach[x] <= scale).collect();
            let balls = s.iter().map(|&x| graph.ball(x, scale)).collect::<Result<Vec<_>>>()?;
            sites.push(s);
            annuli.push(a);
            site_balls.push(balls);
        }
        let schema = Self { ell, scale, constant, base, radius, sites, annuli, site_balls, dist };
        schema.verify(graph)?;
        Ok(schema)
    }

    /// Exhaustive check of `𝔸_k ⊆ B_R` and `d(𝔸_k, 𝔸_{k'}) >= |k - k'| L`.
    pub fn verify(&self, graph: &WeightedGraph) -> Result<()> {
        for (k, a) in self.annuli.iter().enumerate() {
            if let Some(&x) = a.iter().find(|&&x| self.dist[x] > self.radius) {
                return Err(Error::Margin(format!("annulus {} leaves B_R at vertex {x}", k + 1)));
            }
        }
        for i in 0..self.ell {
            for j in i + 1..self.ell {
                let d = graph.set_distance(&self.annuli[i], &self.annuli[j]);
                if d < (j - i) * self.scale {
                    return Err(Error::Margin(format!("annuli {} and {} are {d} apart, need {}", i + 1, j + 1, (j - i) * self.scale)));
                }
            }
        }
        Ok(())
    }

    pub fn distance_from_base(&self, x: usize) -> usize {
        self.dist[x]
    }

    /// Outside the closed ball `B_R`.
    pub fn beyond_radius(&self, x: usize) -> bool {
        self.dist[x] > self.radius
    }

    /// Whether `range` (sorted) fits in `B(x, L)` for some `x ∈ 𝒜_k`.
    pub fn fits_in_site_ball(&self, k: usize, range: &[usize]) -> bool {
        self.site_balls[k - 1].iter().any(|ball| range.iter().all(|v| ball.binary_search(v).is_ok()))
    }
}

/// Loops are big when the capacity of their range is at least `δ L^ν (log L)^{-b₂}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BigLoopRule {
    pub delta: f64,
    pub scale: usize,
    pub nu: f64,
    pub b2: f64,
}

impl BigLoopRule {
    pub fn threshold(&self) -> f64 {
        let l = self.scale as f64;
        self.delta * l.powf(self.nu) * l.ln().powf(-self.b2)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoopClassification {
    pub threshold: f64,
    pub big: Vec<bool>,
    /// Exact range capacity where it was needed to decide.
    pub capacities: Vec<Option<f64>>,
    /// `filtered[k - 1]`: indices of big loops fitting in some `B(x, L)`, `x ∈ 𝒜_k`.
    pub filtered: Vec<Vec<usize>>,
}

/// `Σ_{y ∈ A} (λ_y - Σ_{z ∈ A} λ_yz)`, an upper bound on `cap(A)`.
fn one_step_capacity_bound(graph: &WeightedGraph, set: &[usize]) -> f64 {
    set.iter()
        .map(|&y| {
            let inside: f64 = graph
                .neighbors(y)
                .iter()
                .filter(|nb| set.binary_search(&(nb.vertex as usize)).is_ok())
                .map(|nb| graph.edge(nb.edge as usize).weight)
                .sum();
            graph.mass(y) - inside
        })
        .sum()
}

/// Big/small split of every loop (capacities in `op`'s domain) and the filtered families.
pub fn classify_loops(op: &GreenOperator, sample: &LoopSoupSample, rule: &BigLoopRule, schema: &AnnuliSchema) -> Result<LoopClassification> {
    let threshold = rule.threshold();
    let mut big = Vec::with_capacity(sample.loops.len());
    let mut capacities = Vec::with_capacity(sample.loops.len());
    let mut ranges = Vec::with_capacity(sample.loops.len());
    for l in &sample.loops {
        let range = l.range();
        let (is_big, cap) = if threshold <= 0.0 {
            (true, None)
        } else if one_step_capacity_bound(op.graph(), &range) < threshold {
            (false, None)
        } else {
            let c = op.capacity_variational(&range)?;
            (c >= threshold, Some(c))
        };
        big.push(is_big);
        capacities.push(cap);
        ranges.push(range);
    }
    let filtered = (1..=schema.ell)
        .map(|k| (0..sample.loops.len()).filter(|&i| big[i] && schema.fits_in_site_ball(k, &ranges[i])).collect())
        .collect();
    Ok(LoopClassification { threshold, big, capacities, filtered })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BadAnnuli {
    /// `N = #{k : the cluster reaches beyond B_R and contains no loop of ℒ_k^b}`.
    pub count: usize,
    pub crossing: bool,
    pub bad: Vec<bool>,
}

pub fn bad_annuli_count(sample: &LoopSoupSample, schema: &AnnuliSchema, classes: &LoopClassification) -> BadAnnuli {
    let cluster = loop_clusters(sample, schema.base);
    let crossing = cluster.vertices.iter().any(|&x| schema.beyond_radius(x));
    let bad: Vec<bool> = classes
        .filtered
        .iter()
        .map(|family| crossing && !family.iter().any(|i| cluster.loops.binary_search(i).is_ok()))
        .collect();
    BadAnnuli { count: bad.iter().filter(|&&b| b).count(), crossing, bad }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BadAnnuliSummary {
    pub threshold: f64,
    pub radius: usize,
    pub soups: u64,
    /// `histogram[j]` soups had `N = j`.
    pub histogram: Vec<u64>,
    pub crossing: ObservableEstimate,
}

/// Distribution of `N` over `soups` soups.
pub fn bad_annuli_experiment(
    domain: &LoopDomain,
    schema: &AnnuliSchema,
    rule: &BigLoopRule,
    alpha: f64,
    soups: u64,
    seed: u64,
    workers: usize,
) -> Result<BadAnnuliSummary> {
    let op = GreenOperator::new(domain.graph, domain.domain.clone())?;
    let sampler = LoopSampler::new(domain, alpha, f64::INFINITY)?;
    let out = run_replicas(&sampler, 0..soups, workers, |s, r| {
        let soup = s.sample(loop_key(seed, r))?;
        let classes = classify_loops(&op, &soup, rule, schema)?;
        Ok(bad_annuli_count(&soup, schema, &classes))
    })?;
    let mut histogram = vec![0; schema.ell + 1];
    let mut crossing = Tally::default();
    for b in &out {
        histogram[b.count] += 1;
        crossing.push_bool(b.crossing);
    }
    Ok(BadAnnuliSummary { threshold: rule.threshold(), radius: schema.radius, soups, histogram, crossing: crossing.estimate(seed) })
}
