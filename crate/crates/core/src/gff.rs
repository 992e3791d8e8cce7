//! Exact Gaussian free field samplers and the metric-graph bond configuration.
//!
//! Excursion sets of the field on the cable system are never built. Their
//! vertex connectivity equals that of the bond model: edge `{x, y}` is open with
//! probability `1 - exp(-2 λ_xy (φ_x - a)_+ (φ_y - a)_+)`, decided by one
//! persistent uniform per edge so that levels are coupled.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dst::SineTransform;
use crate::error::{Error, Result};
use crate::graph::{DomainMask, WeightedGraph};
use crate::linalg::{KilledSystem, SolverChoice, DEFAULT_TOLERANCE, DENSE_LIMIT};
use crate::rng::{materialize_edge_uniforms, EdgeUniformSource, StreamKey};

/// One field realization; `values[i]` belongs to the `i`-th member of the domain.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub values: Vec<f64>,
    pub key: StreamKey,
}

/// Dense sampler: with `L_U = C Cᵀ`, `φ = C^{-T} ξ` has covariance `L_U^{-1}`.
#[derive(Clone)]
pub struct DenseSampler {
    upper: DMatrix<f64>,
}

impl DenseSampler {
    pub fn new(graph: &WeightedGraph, domain: &DomainMask) -> Result<Self> {
        if domain.len() > DENSE_LIMIT {
            return Err(Error::TooLarge { what: "dense sampler", size: domain.len(), limit: DENSE_LIMIT });
        }
        let system = KilledSystem::new(graph, domain, SolverChoice::Dense, DEFAULT_TOLERANCE)?;
        let upper = system.dense_factor().expect("dense backend").transpose();
        Ok(Self { upper })
    }

    pub fn sample(&self, key: StreamKey) -> FieldSample {
        let mut rng = key.rng();
        let xi = DVector::from_fn(self.upper.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let phi = self.upper.solve_upper_triangular(&xi).expect("positive diagonal");
        FieldSample { values: phi.as_slice().to_vec(), key }
    }
}

/// Sine-basis sampler for a unit-weight box with its Dirichlet halo.
#[derive(Clone)]
pub struct SpectralSampler {
    transform: SineTransform,
    amplitudes: Vec<f64>,
}

impl SpectralSampler {
    pub fn new(graph: &WeightedGraph, domain: &DomainMask) -> Result<Self> {
        let shape = *graph.lattice().ok_or(Error::NotLattice)?;
        if graph.edges().iter().any(|e| e.weight != 1.0) || graph.masses().iter().any(|&m| m != (2 * shape.dim) as f64) {
            return Err(Error::NonUnitWeights);
        }
        if domain.len() != graph.vertex_count() {
            return Err(Error::InvalidArgument("spectral sampler needs the whole box as domain".into()));
        }
        let s = shape.side;
        let modes: Vec<f64> =
            (1..=s).map(|k| 2.0 - 2.0 * (k as f64 * std::f64::consts::PI / (s + 1) as f64).cos()).collect();
        let amplitudes = (0..shape.vertex_count())
            .map(|i| {
                let eig: f64 = shape.coords(i).iter().map(|&k| modes[k]).sum();
                1.0 / eig.sqrt()
            })
            .collect();
        Ok(Self { transform: SineTransform::new(s, shape.dim), amplitudes })
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    /// Field with spectral coefficients `coefficients` (already scaled by the amplitudes).
    pub fn synthesize(&mut self, coefficients: &[f64]) -> Vec<f64> {
        let mut data = coefficients.to_vec();
        self.transform.apply(&mut data);
        data
    }

    pub fn sample(&mut self, key: StreamKey) -> FieldSample {
        let mut rng = key.rng();
        let coefficients: Vec<f64> =
            self.amplitudes.iter().map(|a| a * rng.sample::<f64, _>(StandardNormal)).collect();
        FieldSample { values: self.synthesize(&coefficients), key }
    }
}

/// Dispatches to the spectral sampler for whole boxes and the dense one otherwise.
#[derive(Clone)]
pub enum FieldSampler {
    Spectral(Box<SpectralSampler>),
    Dense(DenseSampler),
}

impl FieldSampler {
    pub fn new(graph: &WeightedGraph, domain: &DomainMask) -> Result<Self> {
        match SpectralSampler::new(graph, domain) {
            Ok(s) => Ok(Self::Spectral(Box::new(s))),
            Err(_) => Ok(Self::Dense(DenseSampler::new(graph, domain)?)),
        }
    }

    pub fn sample(&mut self, key: StreamKey) -> FieldSample {
        match self {
            Self::Spectral(s) => s.sample(key),
            Self::Dense(s) => s.sample(key),
        }
    }
}

/// `1 - exp(-2 λ (φ_x - a)_+ (φ_y - a)_+)`.
#[inline]
pub fn open_probability(weight: f64, phi_x: f64, phi_y: f64, a: f64) -> f64 {
    let t = (phi_x - a).max(0.0) * (phi_y - a).max(0.0);
    -(-2.0 * weight * t).exp_m1()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BondConfig {
    pub level: f64,
    /// Per graph edge; edges leaving the domain are always closed.
    pub open: Vec<bool>,
    pub uniforms: Vec<f64>,
}

impl BondConfig {
    pub fn open_count(&self) -> usize {
        self.open.iter().filter(|&&o| o).count()
    }

    /// `self ⊆ other` as edge sets.
    pub fn is_subset_of(&self, other: &BondConfig) -> bool {
        self.open.iter().zip(&other.open).all(|(&a, &b)| !a || b)
    }
}

/// Whether edge `e` is open at level `a`, given a uniform source.
#[inline]
pub fn edge_open(
    graph: &WeightedGraph,
    domain: &DomainMask,
    field: &[f64],
    a: f64,
    e: usize,
    uniforms: &mut impl EdgeUniformSource,
) -> bool {
    let edge = graph.edge(e);
    let (u, v) = edge.endpoints();
    let (Some(i), Some(j)) = (domain.local(u), domain.local(v)) else {
        return false;
    };
    let (pu, pv) = (field[i], field[j]);
    if pu < a || pv < a {
        return false;
    }
    uniforms.uniform(e) < open_probability(edge.weight, pu, pv, a)
}

/// Bond configuration from explicit per-edge uniforms.
pub fn bond_config_with_uniforms(
    graph: &WeightedGraph,
    domain: &DomainMask,
    field: &FieldSample,
    a: f64,
    uniforms: Vec<f64>,
) -> BondConfig {
    let mut src = uniforms;
    let open = (0..graph.edge_count()).map(|e| edge_open(graph, domain, &field.values, a, e, &mut src)).collect();
    BondConfig { level: a, open, uniforms: src }
}

/// Bond configuration at level `a`, uniforms drawn from the `key` stream.
pub fn bond_config(graph: &WeightedGraph, domain: &DomainMask, field: &FieldSample, a: f64, key: StreamKey) -> BondConfig {
    let uniforms = materialize_edge_uniforms(key, graph.edge_count());
    bond_config_with_uniforms(graph, domain, field, a, uniforms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_lattice_box;
    use crate::potential::GreenOperator;
    use crate::rng::Purpose;
    use crate::stats::Tally;

    fn path(n: usize) -> WeightedGraph {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 1.0)).collect();
        WeightedGraph::from_edges(n, &edges).unwrap()
    }

    #[test]
    fn open_probability_examples() {
        assert!((open_probability(1.0, 0.5, 0.5, 0.0) - 0.3934693402873666).abs() < 1e-15);
        assert_eq!(open_probability(1.0, -0.1, 3.0, 0.0), 0.0);
        assert!(open_probability(1.0, 0.2, 0.3, -1e6) > 1.0 - 1e-12);
    }

    #[test]
    fn dense_sampler_variance_single_vertex() {
        let (g, _) = build_lattice_box(3, 3).unwrap();
        let c = g.lattice().unwrap().center();
        let sampler = DenseSampler::new(&g, &DomainMask::new(&g, &[c]).unwrap()).unwrap();
        assert!((sampler.upper[(0, 0)] - 6f64.sqrt()).abs() < 1e-15);
        let mut t = Tally::default();
        for r in 0..20000 {
            t.push(sampler.sample(StreamKey::new(3, r, Purpose::Field)).values[0].powi(2));
        }
        let sd = (2.0 / 36.0 / 20000f64).sqrt();
        assert!((t.mean() - 1.0 / 6.0).abs() < 4.0 * sd);
    }

    #[test]
    fn dense_factor_inverts_to_green() {
        let g = path(4);
        let u = DomainMask::new(&g, &[1, 2]).unwrap();
        let s = DenseSampler::new(&g, &u).unwrap();
        // covariance = (Uᵀ U)^{-1}
        let cov = (s.upper.transpose() * &s.upper).try_inverse().unwrap();
        assert!((cov[(0, 0)] - 2.0 / 3.0).abs() < 1e-14);
        assert!((cov[(0, 1)] - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn spectral_amplitudes_invert_the_laplacian() {
        let (g, u) = build_lattice_box(1, 1).unwrap();
        let s = SpectralSampler::new(&g, &u).unwrap();
        assert!((s.amplitudes()[0].powi(2) - 0.5).abs() < 1e-15);
        // exact covariance of the spectral map equals the Green matrix
        for (d, side) in [(1, 6), (2, 4), (3, 3)] {
            let (g, u) = build_lattice_box(d, side).unwrap();
            let mut s = SpectralSampler::new(&g, &u).unwrap();
            let n = g.vertex_count();
            let op = GreenOperator::new(&g, u).unwrap();
            let amps = s.amplitudes().to_vec();
            // columns of the synthesis map
            let mut cols = Vec::new();
            for k in 0..n {
                let mut e = vec![0.0; n];
                e[k] = amps[k];
                cols.push(s.synthesize(&e));
            }
            for x in 0..n {
                let gx = op.green_column(x).unwrap();
                for y in 0..n {
                    let c: f64 = cols.iter().map(|col| col[x] * col[y]).sum();
                    assert!((c - gx[y]).abs() < 1e-12, "d={d} s={side} x={x} y={y}");
                }
            }
        }
    }

    #[test]
    fn spectral_sampler_is_linear_in_amplitudes() {
        let (g, u) = build_lattice_box(2, 7).unwrap();
        let mut s = SpectralSampler::new(&g, &u).unwrap();
        let key = StreamKey::new(11, 0, Purpose::Field);
        let base = s.sample(key).values;
        s.amplitudes.iter_mut().for_each(|a| *a *= 2.5);
        let scaled = s.sample(key).values;
        for (a, b) in base.iter().zip(&scaled) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_rejects_other_graphs() {
        let g = path(4);
        assert!(matches!(SpectralSampler::new(&g, &DomainMask::full(&g)), Err(Error::NotLattice)));
        let (g, _) = build_lattice_box(2, 3).unwrap();
        let shape = *g.lattice().unwrap();
        let heavy: Vec<_> = g.edges().iter().map(|e| (e.u as usize, e.v as usize, 2.0)).collect();
        let killing = (0..9).map(|x| 4.0 - g.degree(x) as f64).collect();
        let heavy = WeightedGraph::build(9, &heavy, Some(killing), Some(shape)).unwrap();
        assert!(matches!(SpectralSampler::new(&heavy, &DomainMask::full(&heavy)), Err(Error::NonUnitWeights)));
    }

    #[test]
    fn open_edges_have_both_ends_above_level_and_are_nested() {
        let (g, u) = build_lattice_box(3, 6).unwrap();
        let mut sampler = FieldSampler::new(&g, &u).unwrap();
        for r in 0..20 {
            let f = sampler.sample(StreamKey::new(5, r, Purpose::Field));
            let key = StreamKey::new(5, r, Purpose::Edges);
            let configs: Vec<_> = [-0.5, 0.0, 0.5].iter().map(|&a| bond_config(&g, &u, &f, a, key)).collect();
            for c in &configs {
                for (e, &open) in c.open.iter().enumerate() {
                    if open {
                        let (x, y) = g.edge(e).endpoints();
                        assert!(f.values[x] >= c.level && f.values[y] >= c.level);
                    }
                }
            }
            assert!(configs[2].is_subset_of(&configs[1]) && configs[1].is_subset_of(&configs[0]));
        }
    }

    #[test]
    fn edges_leaving_the_domain_stay_closed() {
        let g = path(4);
        let u = DomainMask::new(&g, &[1, 2]).unwrap();
        let f = FieldSample { values: vec![5.0, 5.0], key: StreamKey::new(0, 0, Purpose::Field) };
        let c = bond_config_with_uniforms(&g, &u, &f, -10.0, vec![0.0; 3]);
        assert_eq!(c.open, vec![false, true, false]);
    }
}
