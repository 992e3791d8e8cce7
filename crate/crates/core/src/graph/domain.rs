use super::WeightedGraph;
use crate::error::{Error, Result};

const OUTSIDE: u32 = u32::MAX;

/// Interior set `U`. Vertices outside `U` act as an absorbing boundary; interior
/// vertices keep their full masses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainMask {
    members: Vec<usize>,
    local: Vec<u32>,
}

impl DomainMask {
    pub fn new(graph: &WeightedGraph, members: &[usize]) -> Result<Self> {
        let n = graph.vertex_count();
        let mut sorted = members.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() {
            return Err(Error::EmptyDomain);
        }
        if let Some(&x) = sorted.iter().find(|&&x| x >= n) {
            return Err(Error::VertexOutOfRange(x));
        }
        let mut local = vec![OUTSIDE; n];
        for (i, &x) in sorted.iter().enumerate() {
            local[x] = i as u32;
        }
        Ok(Self { members: sorted, local })
    }

    pub fn full(graph: &WeightedGraph) -> Self {
        let n = graph.vertex_count();
        Self { members: (0..n).collect(), local: (0..n as u32).collect() }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    #[inline]
    pub fn contains(&self, x: usize) -> bool {
        self.local.get(x).is_some_and(|&l| l != OUTSIDE)
    }

    /// Position of `x` in the sorted member list.
    #[inline]
    pub fn local(&self, x: usize) -> Option<usize> {
        match self.local.get(x) {
            Some(&l) if l != OUTSIDE => Some(l as usize),
            _ => None,
        }
    }

    pub fn require(&self, x: usize) -> Result<usize> {
        self.local(x).ok_or(Error::NotInDomain(x))
    }

    pub fn require_all(&self, set: &[usize]) -> Result<()> {
        for &x in set {
            self.require(x)?;
        }
        Ok(())
    }

    /// `U` minus `removed`.
    pub fn without(&self, graph: &WeightedGraph, removed: &[usize]) -> Result<Self> {
        let mut drop = vec![false; self.local.len()];
        for &x in removed {
            if x < drop.len() {
                drop[x] = true;
            }
        }
        let kept: Vec<usize> = self.members.iter().copied().filter(|&x| !drop[x]).collect();
        Self::new(graph, &kept)
    }

    pub fn intersect(&self, graph: &WeightedGraph, other: &[usize]) -> Result<Self> {
        let kept: Vec<usize> = other.iter().copied().filter(|&x| self.contains(x)).collect();
        Self::new(graph, &kept)
    }

    pub fn is_subset_of(&self, other: &DomainMask) -> bool {
        self.members.iter().all(|&x| other.contains(x))
    }

    /// Interior vertices with a neighbor outside `U` or positive killing.
    pub fn inner_boundary(&self, graph: &WeightedGraph) -> Vec<usize> {
        self.members
            .iter()
            .copied()
            .filter(|&x| graph.killing(x) > 0.0 || graph.neighbors(x).iter().any(|nb| !self.contains(nb.vertex as usize)))
            .collect()
    }

    /// Checks every component of `U` can be left, so that `L_U` is nonsingular.
    pub fn check_transient(&self, graph: &WeightedGraph) -> Result<()> {
        let mut seen = vec![false; self.members.len()];
        let mut stack = Vec::new();
        for start in 0..self.members.len() {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            let mut escapes = false;
            while let Some(i) = stack.pop() {
                let x = self.members[i];
                if graph.killing(x) > 0.0 {
                    escapes = true;
                }
                for nb in graph.neighbors(x) {
                    match self.local(nb.vertex as usize) {
                        Some(j) if !seen[j] => {
                            seen[j] = true;
                            stack.push(j);
                        }
                        Some(_) => {}
                        None => escapes = true,
                    }
                }
            }
            if !escapes {
                return Err(Error::RecurrentDomain { vertex: self.members[start] });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_indices_follow_sorted_order() {
        let g = WeightedGraph::from_edges(4, &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)]).unwrap();
        let u = DomainMask::new(&g, &[2, 1, 2]).unwrap();
        assert_eq!(u.members(), &[1, 2]);
        assert_eq!(u.local(2), Some(1));
        assert_eq!(u.local(0), None);
        assert!(u.check_transient(&g).is_ok());
        assert_eq!(DomainMask::new(&g, &[]), Err(Error::EmptyDomain));
    }

    #[test]
    fn whole_edge_list_graph_is_recurrent() {
        let g = WeightedGraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let u = DomainMask::full(&g);
        assert_eq!(u.check_transient(&g), Err(Error::RecurrentDomain { vertex: 0 }));
    }
}
