use std::collections::VecDeque;

use super::{WeightedGraph, UNREACHED};
use crate::error::{Error, Result};

/// Coarse lattice `Λ(L)`: sites whose `⌊L/2⌋`-balls are disjoint and whose
/// `L`-balls cover the graph. Sites `y, y'` are adjacent when some `x ∈ B(y, L)`
/// and `x' ∈ B(y', L)` are neighbors, i.e. when `d(y, y') <= 2L + 1`.
#[derive(Clone, Debug)]
pub struct PackingLattice {
    pub scale: usize,
    pub base: usize,
    pub sites: Vec<usize>,
    pub adjacency: Vec<Vec<usize>>,
    site_of: Vec<u32>,
}

impl PackingLattice {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Index into `sites` of vertex `x`, if it is a site.
    pub fn site_index(&self, x: usize) -> Option<usize> {
        match self.site_of.get(x) {
            Some(&i) if i != u32::MAX => Some(i as usize),
            _ => None,
        }
    }

    pub fn base_index(&self) -> usize {
        self.site_index(self.base).expect("base is always a site")
    }

    /// Exhaustive check of disjointness of `B(y, ⌊L/2⌋)` and of the cover by `B(y, L)`.
    pub fn verify(&self, graph: &WeightedGraph) -> Result<()> {
        if self.site_index(self.base).is_none() {
            return Err(Error::BaseNotSite(self.base));
        }
        let half = self.scale / 2;
        let mut owner = vec![u32::MAX; graph.vertex_count()];
        for (i, &y) in self.sites.iter().enumerate() {
            for (x, &d) in graph.distances_from_set(&[y], half).iter().enumerate() {
                if d <= half {
                    if owner[x] != u32::MAX {
                        return Err(Error::Overlap(x));
                    }
                    owner[x] = i as u32;
                }
            }
        }
        let cover = graph.distances_from_set(&self.sites, self.scale);
        if let Some(x) = cover.iter().position(|&d| d > self.scale) {
            return Err(Error::InvalidArgument(format!("vertex {x} is not covered by any B(y, L)")));
        }
        Ok(())
    }

    /// `|Λ(L) ∩ B(x, r)|`, for the cardinality-growth report.
    pub fn sites_within(&self, graph: &WeightedGraph, x: usize, r: usize) -> usize {
        let d = graph.distances_from_set(&[x], r);
        self.sites.iter().filter(|&&y| d[y] <= r).count()
    }
}

/// Greedy maximal packing seeded at `base`, then scanning vertices in index order.
/// Candidates must be at distance `>= 2⌊L/2⌋ + 1` from every earlier site.
pub fn build_packing(graph: &WeightedGraph, scale: usize, base: usize) -> Result<PackingLattice> {
    if scale == 0 {
        return Err(Error::InvalidArgument("packing scale L must be >= 1".into()));
    }
    graph.check_vertex(base)?;
    let n = graph.vertex_count();
    let block_radius = 2 * (scale / 2);
    let mut blocked = vec![false; n];
    let mut sites = Vec::new();
    let mut dist = vec![UNREACHED; n];
    let mut touched = Vec::new();
    let mut queue = VecDeque::new();
    for candidate in std::iter::once(base).chain(0..n) {
        if blocked[candidate] {
            continue;
        }
        sites.push(candidate);
        // mark the closed ball of radius 2⌊L/2⌋
        dist[candidate] = 0;
        touched.push(candidate);
        queue.push_back(candidate);
        while let Some(x) = queue.pop_front() {
            blocked[x] = true;
            if dist[x] == block_radius {
                continue;
            }
            for nb in graph.neighbors(x) {
                let y = nb.vertex as usize;
                if dist[y] == UNREACHED {
                    dist[y] = dist[x] + 1;
                    touched.push(y);
                    queue.push_back(y);
                }
            }
        }
        for x in touched.drain(..) {
            dist[x] = UNREACHED;
        }
    }
    let mut site_of = vec![u32::MAX; n];
    for (i, &y) in sites.iter().enumerate() {
        site_of[y] = i as u32;
    }
    let reach = 2 * scale + 1;
    let adjacency = sites
        .iter()
        .map(|&y| {
            let d = graph.distances_from_set(&[y], reach);
            sites.iter().enumerate().filter(|&(_, &z)| z != y && d[z] <= reach).map(|(j, _)| j).collect()
        })
        .collect();
    Ok(PackingLattice { scale, base, sites, adjacency, site_of })
}
