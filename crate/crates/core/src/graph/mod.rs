//! Weighted graphs, lattice boxes, killed domains and the packing lattice.

mod domain;
mod lattice;
mod packing;

pub use domain::DomainMask;
pub use lattice::{build_lattice_box, LatticeShape};
pub use packing::{build_packing, PackingLattice};

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use crate::error::{Error, Result};

pub const UNREACHED: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub u: u32,
    pub v: u32,
    pub weight: f64,
}

impl Edge {
    pub fn endpoints(&self) -> (usize, usize) {
        (self.u as usize, self.v as usize)
    }

    pub fn other(&self, x: usize) -> usize {
        if self.u as usize == x {
            self.v as usize
        } else {
            self.u as usize
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Neighbor {
    pub vertex: u32,
    pub edge: u32,
}

/// Symmetric weighted graph `(G, λ)`.
///
/// `mass(x) = Σ_y λ_xy + killing(x)`. Killing is zero for graphs read from
/// edge lists and encodes the absorbed Dirichlet halo of lattice boxes.
#[derive(Clone, Debug)]
pub struct WeightedGraph {
    edges: Vec<Edge>,
    offsets: Vec<usize>,
    neighbors: Vec<Neighbor>,
    killing: Vec<f64>,
    mass: Vec<f64>,
    lattice: Option<LatticeShape>,
}

impl WeightedGraph {
    /// Validates and builds a graph from `(u, v, weight)` triples.
    pub fn from_edges(vertex_count: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        Self::build(vertex_count, edges, None, None)
    }

    pub(crate) fn build(
        vertex_count: usize,
        raw: &[(usize, usize, f64)],
        killing: Option<Vec<f64>>,
        lattice: Option<LatticeShape>,
    ) -> Result<Self> {
        if vertex_count == 0 {
            return Err(Error::EmptyDomain);
        }
        if vertex_count > u32::MAX as usize || raw.len() > u32::MAX as usize {
            return Err(Error::TooLarge { what: "graph", size: vertex_count, limit: u32::MAX as usize });
        }
        let mut seen: HashMap<(usize, usize), usize> = HashMap::with_capacity(if lattice.is_some() { 0 } else { raw.len() });
        let mut edges = Vec::with_capacity(raw.len());
        let mut degree = vec![0usize; vertex_count];
        for (i, &(u, v, w)) in raw.iter().enumerate() {
            let line = i + 1;
            if u >= vertex_count {
                return Err(Error::VertexOutOfRange(u));
            }
            if v >= vertex_count {
                return Err(Error::VertexOutOfRange(v));
            }
            if u == v {
                return Err(Error::SelfEdge { line, vertex: u });
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::NonPositiveWeight { line, weight: w });
            }
            // Lattice constructors produce unique edges by construction.
            if lattice.is_none() {
                let key = (u.min(v), u.max(v));
                if let Some(&j) = seen.get(&key) {
                    return Err(Error::DuplicateEdge { line, u: raw[j].0, v: raw[j].1 });
                }
                seen.insert(key, i);
            }
            degree[u] += 1;
            degree[v] += 1;
            edges.push(Edge { u: u as u32, v: v as u32, weight: w });
        }
        let mut offsets = Vec::with_capacity(vertex_count + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets.clone();
        let mut neighbors = vec![Neighbor { vertex: 0, edge: 0 }; offsets[vertex_count]];
        for (e, edge) in edges.iter().enumerate() {
            let (u, v) = edge.endpoints();
            neighbors[fill[u]] = Neighbor { vertex: v as u32, edge: e as u32 };
            fill[u] += 1;
            neighbors[fill[v]] = Neighbor { vertex: u as u32, edge: e as u32 };
            fill[v] += 1;
        }
        let killing = killing.unwrap_or_else(|| vec![0.0; vertex_count]);
        if killing.len() != vertex_count || killing.iter().any(|k| !(*k >= 0.0)) {
            return Err(Error::InvalidArgument("killing must be nonnegative, one per vertex".into()));
        }
        let mut mass = killing.clone();
        for edge in &edges {
            mass[edge.u as usize] += edge.weight;
            mass[edge.v as usize] += edge.weight;
        }
        let graph = Self { edges, offsets, neighbors, killing, mass, lattice };
        let components = graph.component_count();
        if components != 1 {
            return Err(Error::Disconnected { components });
        }
        Ok(graph)
    }

    pub fn vertex_count(&self) -> usize {
        self.mass.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, e: usize) -> &Edge {
        &self.edges[e]
    }

    #[inline]
    pub fn neighbors(&self, x: usize) -> &[Neighbor] {
        &self.neighbors[self.offsets[x]..self.offsets[x + 1]]
    }

    pub fn degree(&self, x: usize) -> usize {
        self.offsets[x + 1] - self.offsets[x]
    }

    /// `λ_x`, including killing.
    #[inline]
    pub fn mass(&self, x: usize) -> f64 {
        self.mass[x]
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    #[inline]
    pub fn killing(&self, x: usize) -> f64 {
        self.killing[x]
    }

    pub fn lattice(&self) -> Option<&LatticeShape> {
        self.lattice.as_ref()
    }

    pub fn edge_between(&self, x: usize, y: usize) -> Option<usize> {
        self.neighbors(x).iter().find(|n| n.vertex as usize == y).map(|n| n.edge as usize)
    }

    pub fn check_vertex(&self, x: usize) -> Result<()> {
        if x < self.vertex_count() {
            Ok(())
        } else {
            Err(Error::VertexOutOfRange(x))
        }
    }

    /// `min_{x, y~x} λ_xy / λ_x`, the controlled-weights constant.
    pub fn controlled_weights_ratio(&self) -> f64 {
        let mut ratio = f64::INFINITY;
        for edge in &self.edges {
            let (u, v) = edge.endpoints();
            ratio = ratio.min(edge.weight / self.mass[u]).min(edge.weight / self.mass[v]);
        }
        ratio
    }

    fn component_count(&self) -> usize {
        let n = self.vertex_count();
        let mut seen = vec![false; n];
        let mut components = 0;
        let mut queue = VecDeque::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(x) = queue.pop_front() {
                for nb in self.neighbors(x) {
                    let y = nb.vertex as usize;
                    if !seen[y] {
                        seen[y] = true;
                        queue.push_back(y);
                    }
                }
            }
        }
        components
    }

    /// Graph distances from a set of sources, cut off beyond `max_radius`.
    pub fn distances_from_set(&self, sources: &[usize], max_radius: usize) -> Vec<usize> {
        let mut dist = vec![UNREACHED; self.vertex_count()];
        let mut queue = VecDeque::new();
        for &s in sources {
            if dist[s] != 0 {
                dist[s] = 0;
                queue.push_back(s);
            }
        }
        while let Some(x) = queue.pop_front() {
            let d = dist[x];
            if d >= max_radius {
                continue;
            }
            for nb in self.neighbors(x) {
                let y = nb.vertex as usize;
                if dist[y] == UNREACHED {
                    dist[y] = d + 1;
                    queue.push_back(y);
                }
            }
        }
        dist
    }

    pub fn distances_from(&self, x: usize) -> Vec<usize> {
        self.distances_from_set(&[x], UNREACHED)
    }

    /// Closed graph-distance ball `B(x, r)`, sorted by vertex index.
    pub fn ball(&self, x: usize, r: usize) -> Result<Vec<usize>> {
        self.check_vertex(x)?;
        let mut members = vec![x];
        let mut dist = HashMap::new();
        dist.insert(x, 0usize);
        let mut head = 0;
        while head < members.len() {
            let y = members[head];
            head += 1;
            let d = dist[&y];
            if d == r {
                continue;
            }
            for nb in self.neighbors(y) {
                let z = nb.vertex as usize;
                if let std::collections::hash_map::Entry::Vacant(slot) = dist.entry(z) {
                    slot.insert(d + 1);
                    members.push(z);
                }
            }
        }
        members.sort_unstable();
        Ok(members)
    }

    pub fn graph_distance(&self, x: usize, y: usize) -> Result<usize> {
        self.check_vertex(x)?;
        self.check_vertex(y)?;
        if x == y {
            return Ok(0);
        }
        let dist = self.distances_from(x);
        Ok(dist[y])
    }

    /// Distance between two vertex sets (`UNREACHED` if either is empty).
    pub fn set_distance(&self, a: &[usize], b: &[usize]) -> usize {
        if a.is_empty() || b.is_empty() {
            return UNREACHED;
        }
        let dist = self.distances_from_set(a, UNREACHED);
        b.iter().map(|&y| dist[y]).min().unwrap_or(UNREACHED)
    }

    /// Largest pairwise graph distance within `set`, measured in the whole graph.
    pub fn diameter_of(&self, set: &[usize]) -> usize {
        let mut diam = 0;
        for &x in set {
            let dist = self.distances_from(x);
            for &y in set {
                diam = diam.max(dist[y]);
            }
        }
        diam
    }
}

/// Parses the edge-list text format: one `u v w` per line, `#` comments.
pub fn parse_edge_list(text: &str) -> Result<WeightedGraph> {
    let mut raw: Vec<(usize, usize, f64)> = Vec::new();
    let mut lines_of: Vec<usize> = Vec::new();
    let mut first_seen: HashMap<(usize, usize), (usize, usize, f64, usize)> = HashMap::new();
    let mut max_vertex = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse { line: line_no, message: format!("expected 3 fields, got {}", fields.len()) });
        }
        let parse_id = |s: &str| {
            s.parse::<usize>().map_err(|e| Error::Parse { line: line_no, message: format!("vertex id {s:?}: {e}") })
        };
        let u = parse_id(fields[0])?;
        let v = parse_id(fields[1])?;
        let w: f64 = fields[2]
            .parse()
            .map_err(|e| Error::Parse { line: line_no, message: format!("weight {:?}: {e}", fields[2]) })?;
        if u == v {
            return Err(Error::SelfEdge { line: line_no, vertex: u });
        }
        if !(w > 0.0) || !w.is_finite() {
            return Err(Error::NonPositiveWeight { line: line_no, weight: w });
        }
        let key = (u.min(v), u.max(v));
        if let Some(&(fu, fv, fw, _)) = first_seen.get(&key) {
            if (fu, fv) == (u, v) {
                return Err(Error::DuplicateEdge { line: line_no, u, v });
            }
            if fw != w {
                return Err(Error::NonSymmetric { line: line_no, u, v, first: fw, second: w });
            }
            // reverse listing with matching weight: the symmetric form of an edge already read
            continue;
        }
        first_seen.insert(key, (u, v, w, line_no));
        max_vertex = max_vertex.max(u).max(v);
        raw.push((u, v, w));
        lines_of.push(line_no);
    }
    if raw.is_empty() {
        return Err(Error::EmptyDomain);
    }
    WeightedGraph::from_edges(max_vertex + 1, &raw).map_err(|e| match e {
        Error::DuplicateEdge { line, u, v } => Error::DuplicateEdge { line: lines_of[line - 1], u, v },
        other => other,
    })
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<WeightedGraph> {
    let text = std::fs::read_to_string(path)?;
    parse_edge_list(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> WeightedGraph {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 1.0)).collect();
        WeightedGraph::from_edges(n, &edges).unwrap()
    }

    #[test]
    fn parses_path() {
        let g = parse_edge_list("0 1 1\n1 2 1\n").unwrap();
        assert_eq!(g.vertex_count(), 3);
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.mass(1), 2.0);
        assert_eq!(g.mass(0), 1.0);
    }

    #[test]
    fn comments_and_reverse_listing() {
        let g = parse_edge_list("# a path\n0 1 2.5\n\n1 0 2.5\n1 2 1\n").unwrap();
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.mass(1), 3.5);
    }

    #[test]
    fn load_errors_have_distinct_codes() {
        let self_edge = parse_edge_list("0 0 1\n").unwrap_err();
        assert!(matches!(self_edge, Error::SelfEdge { line: 1, vertex: 0 }));
        let disconnected = parse_edge_list("0 1 1\n2 3 1\n").unwrap_err();
        assert_eq!(disconnected, Error::Disconnected { components: 2 });
        let nonpos = parse_edge_list("0 1 0\n").unwrap_err();
        let asym = parse_edge_list("0 1 1\n1 0 2\n").unwrap_err();
        let dup = parse_edge_list("0 1 1\n1 2 1\n0 1 1\n").unwrap_err();
        assert!(matches!(dup, Error::DuplicateEdge { line: 3, .. }));
        let codes = [self_edge.code(), disconnected.code(), nonpos.code(), asym.code(), dup.code()];
        let mut unique = codes.to_vec();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), codes.len());
    }

    #[test]
    fn parse_failure_reports_line() {
        let err = parse_edge_list("0 1 1\n1 x 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn ball_and_distance() {
        let g = path(3);
        assert_eq!(g.ball(1, 0).unwrap(), vec![1]);
        assert_eq!(g.graph_distance(0, 2).unwrap(), 2);
        assert_eq!(g.ball(0, 1).unwrap(), vec![0, 1]);
        assert!(g.ball(5, 1).is_err());
    }

    #[test]
    fn ball_in_cube() {
        let (g, _) = build_lattice_box(3, 5).unwrap();
        let center = g.lattice().unwrap().center();
        assert_eq!(g.ball(center, 1).unwrap().len(), 7);
        // |B(0,2)| in Z^3 is 25
        assert_eq!(g.ball(center, 2).unwrap().len(), 25);
    }

    #[test]
    fn masses_sum_edge_weights() {
        let g = WeightedGraph::from_edges(4, &[(0, 1, 0.5), (1, 2, 2.0), (2, 3, 1.5), (3, 0, 1.0)]).unwrap();
        for x in 0..4 {
            let s: f64 = g.neighbors(x).iter().map(|n| g.edge(n.edge as usize).weight).sum();
            assert_eq!(g.mass(x), s);
        }
        assert!((g.controlled_weights_ratio() - 0.5 / 2.5).abs() < 1e-15);
    }

    #[test]
    fn set_distance_and_diameter() {
        let g = path(6);
        assert_eq!(g.set_distance(&[0, 1], &[4, 5]), 3);
        assert_eq!(g.diameter_of(&[1, 2, 4]), 3);
    }
}
