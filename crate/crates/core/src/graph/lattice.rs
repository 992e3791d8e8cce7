use serde::{Deserialize, Serialize};

use super::{DomainMask, WeightedGraph};
use crate::error::{Error, Result};

/// Geometry of an `s^d` box. Vertices are numbered row-major, last coordinate fastest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeShape {
    pub dim: usize,
    pub side: usize,
}

impl LatticeShape {
    pub fn new(dim: usize, side: usize) -> Result<Self> {
        if dim == 0 || side == 0 {
            return Err(Error::InvalidArgument(format!("lattice needs d >= 1 and s >= 1, got d={dim}, s={side}")));
        }
        let mut n: usize = 1;
        for _ in 0..dim {
            n = n.checked_mul(side).ok_or(Error::IndexOverflow { dim, side })?;
        }
        if n > u32::MAX as usize || n.checked_mul(dim).is_none_or(|e| e > u32::MAX as usize) {
            return Err(Error::IndexOverflow { dim, side });
        }
        Ok(Self { dim, side })
    }

    pub fn vertex_count(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    pub fn coords(&self, mut x: usize) -> Vec<usize> {
        let mut c = vec![0; self.dim];
        for i in (0..self.dim).rev() {
            c[i] = x % self.side;
            x /= self.side;
        }
        c
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords.iter().fold(0, |acc, &c| acc * self.side + c)
    }

    /// Index of the point with coordinates `⌊s/2⌋` on every axis.
    pub fn center(&self) -> usize {
        self.index(&vec![self.side / 2; self.dim])
    }

    /// Index of `center + offset`, if it lies in the box.
    pub fn offset_from_center(&self, offset: &[i64]) -> Option<usize> {
        let c = self.side as i64 / 2;
        let mut coords = Vec::with_capacity(self.dim);
        for &o in offset {
            let v = c + o;
            if v < 0 || v >= self.side as i64 {
                return None;
            }
            coords.push(v as usize);
        }
        Some(self.index(&coords))
    }

    pub fn l1_distance(&self, x: usize, y: usize) -> usize {
        self.coords(x).iter().zip(self.coords(y)).map(|(a, b)| a.abs_diff(b)).sum()
    }

    pub fn euclidean_distance(&self, x: usize, y: usize) -> f64 {
        self.coords(x)
            .iter()
            .zip(self.coords(y))
            .map(|(&a, b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Distance from `x` to the absorbed halo, i.e. to the nearest point outside the box.
    pub fn distance_to_halo(&self, x: usize) -> usize {
        self.coords(x).iter().map(|&c| (c + 1).min(self.side - c)).min().unwrap()
    }

    /// Vertices of the sub-box `lo[i] <= c_i < hi[i]`.
    pub fn sub_box(&self, lo: &[usize], hi: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut c = lo.to_vec();
        if lo.iter().zip(hi).any(|(l, h)| l >= h) {
            return out;
        }
        loop {
            out.push(self.index(&c));
            let mut i = self.dim;
            loop {
                if i == 0 {
                    out.sort_unstable();
                    return out;
                }
                i -= 1;
                c[i] += 1;
                if c[i] < hi[i] {
                    break;
                }
                c[i] = lo[i];
            }
        }
    }

    /// The centered cube of side `side`, clipped to the box.
    pub fn centered_cube(&self, side: usize) -> Vec<usize> {
        let c = self.side / 2;
        let lo: Vec<usize> = vec![c.saturating_sub(side / 2); self.dim];
        let hi: Vec<usize> = lo.iter().map(|l| (l + side).min(self.side)).collect();
        self.sub_box(&lo, &hi)
    }
}

/// The `s^d` box of `Z^d` with unit weights and a one-layer Dirichlet halo
/// absorbed as killing, so every vertex has mass `2d`.
pub fn build_lattice_box(dim: usize, side: usize) -> Result<(WeightedGraph, DomainMask)> {
    let shape = LatticeShape::new(dim, side)?;
    let n = shape.vertex_count();
    let mut edges = Vec::with_capacity(dim * n);
    let mut stride = 1;
    let mut strides = vec![0; dim];
    for i in (0..dim).rev() {
        strides[i] = stride;
        stride *= side;
    }
    for x in 0..n {
        for &st in &strides {
            // coordinate along this axis
            if (x / st) % side + 1 < side {
                edges.push((x, x + st, 1.0));
            }
        }
    }
    let mut degree = vec![0usize; n];
    for &(u, v, _) in &edges {
        degree[u] += 1;
        degree[v] += 1;
    }
    let killing = degree.iter().map(|&d| (2 * dim - d) as f64).collect();
    let graph = WeightedGraph::build(n, &edges, Some(killing), Some(shape))?;
    let domain = DomainMask::full(&graph);
    Ok((graph, domain))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_edge_counts() {
        let (g, _) = build_lattice_box(1, 3).unwrap();
        assert_eq!((g.vertex_count(), g.edge_count()), (3, 2));
        let (g, _) = build_lattice_box(3, 2).unwrap();
        assert_eq!((g.vertex_count(), g.edge_count()), (8, 12));
        let (g, _) = build_lattice_box(2, 3).unwrap();
        assert_eq!((g.vertex_count(), g.edge_count()), (9, 12));
    }

    #[test]
    fn masses_are_2d() {
        let (g, domain) = build_lattice_box(3, 4).unwrap();
        assert_eq!(domain.len(), 64);
        for x in 0..g.vertex_count() {
            assert_eq!(g.mass(x), 6.0);
        }
        let (g, _) = build_lattice_box(1, 1).unwrap();
        assert_eq!(g.mass(0), 2.0);
    }

    #[test]
    fn rejects_degenerate_and_overflow() {
        assert!(matches!(build_lattice_box(0, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_lattice_box(2, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(LatticeShape::new(10, 100), Err(Error::IndexOverflow { .. })));
        assert!(matches!(LatticeShape::new(64, 2), Err(Error::IndexOverflow { .. })));
    }

    #[test]
    fn coords_round_trip() {
        let shape = LatticeShape::new(3, 5).unwrap();
        for x in 0..shape.vertex_count() {
            assert_eq!(shape.index(&shape.coords(x)), x);
        }
        assert_eq!(shape.coords(shape.center()), vec![2, 2, 2]);
        assert_eq!(shape.distance_to_halo(shape.center()), 3);
        assert_eq!(shape.distance_to_halo(0), 1);
        assert_eq!(shape.sub_box(&[1, 1, 1], &[3, 3, 3]).len(), 8);
    }

    #[test]
    fn l1_matches_graph_distance() {
        let (g, _) = build_lattice_box(2, 6).unwrap();
        let shape = *g.lattice().unwrap();
        let d = g.distances_from(7);
        for y in 0..g.vertex_count() {
            assert_eq!(d[y], shape.l1_distance(7, y));
        }
    }
}
