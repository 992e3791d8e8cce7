//! Killed Green's functions, hitting probabilities, equilibrium measures and capacities.
//!
//! Convention: `g_U = L_U^{-1}` with `L_U` the killed precision form (diagonal
//! `λ_x`, off-diagonal `-λ_xy`), i.e. expected visits to `y` divided by `λ_y`.
//! Then `P_x(H_K < T_U) = Σ_y g_U(x, y) e_K(y)` and `cap({x}) = 1 / g_U(x, x)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_lattice_box, DomainMask, WeightedGraph};
use crate::linalg::{KilledSystem, SolverChoice, DEFAULT_TOLERANCE};
use crate::stats::{fit_exponent, ExponentFit};

pub struct GreenOperator<'g> {
    graph: &'g WeightedGraph,
    domain: DomainMask,
    system: KilledSystem,
    choice: SolverChoice,
    tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumMeasure {
    /// Sorted target set `K`.
    pub support: Vec<usize>,
    pub masses: Vec<f64>,
    pub capacity: f64,
}

impl EquilibriumMeasure {
    /// `e_K / cap(K)`.
    pub fn normalized(&self) -> Vec<f64> {
        self.masses.iter().map(|m| m / self.capacity).collect()
    }
}

fn sorted_set(set: &[usize]) -> Vec<usize> {
    let mut s = set.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

impl<'g> GreenOperator<'g> {
    pub fn new(graph: &'g WeightedGraph, domain: DomainMask) -> Result<Self> {
        Self::with_solver(graph, domain, SolverChoice::Auto, DEFAULT_TOLERANCE)
    }

    pub fn with_solver(graph: &'g WeightedGraph, domain: DomainMask, choice: SolverChoice, tol: f64) -> Result<Self> {
        if !(tol > 0.0) {
            return Err(Error::InvalidArgument(format!("solver tolerance must be positive, got {tol}")));
        }
        let system = KilledSystem::new(graph, &domain, choice, tol)?;
        Ok(Self { graph, domain, system, choice, tol })
    }

    pub fn graph(&self) -> &'g WeightedGraph {
        self.graph
    }

    pub fn domain(&self) -> &DomainMask {
        &self.domain
    }

    pub fn system(&self) -> &KilledSystem {
        &self.system
    }

    pub fn tolerance(&self) -> f64 {
        self.tol
    }

    /// Solves `L_U w = b` for `b` indexed by local positions in `U`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.system.solve(b)
    }

    /// `y ↦ g_U(·, y)` over local indices.
    pub fn green_column(&self, y: usize) -> Result<Vec<f64>> {
        let j = self.domain.require(y)?;
        let mut b = vec![0.0; self.domain.len()];
        b[j] = 1.0;
        self.solve(&b)
    }

    pub fn green(&self, x: usize, y: usize) -> Result<f64> {
        let i = self.domain.require(x)?;
        Ok(self.green_column(y)?[i])
    }

    /// `[g_U(a, b)]_{a, b ∈ set}` in the given order, symmetrized.
    pub fn green_matrix(&self, set: &[usize]) -> Result<DMatrix<f64>> {
        let n = self.domain.len();
        let mut rhs = DMatrix::zeros(n, set.len());
        let mut rows = Vec::with_capacity(set.len());
        for (j, &y) in set.iter().enumerate() {
            let i = self.domain.require(y)?;
            rhs[(i, j)] = 1.0;
            rows.push(i);
        }
        let cols = self.system.solve_many(&rhs)?;
        let k = set.len();
        let mut g = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in 0..k {
                g[(a, b)] = 0.5 * (cols[(rows[a], b)] + cols[(rows[b], a)]);
            }
        }
        Ok(g)
    }

    fn check_target(&self, set: &[usize]) -> Result<Vec<usize>> {
        if set.is_empty() {
            return Err(Error::EmptySet);
        }
        let k = sorted_set(set);
        self.domain.require_all(&k)?;
        Ok(k)
    }

    /// `x ↦ P_x(H_K < T_U)` over local indices, from the harmonic system on `U \ K`.
    pub fn hitting_probabilities(&self, k: &[usize]) -> Result<Vec<f64>> {
        let k = self.check_target(k)?;
        let n = self.domain.len();
        let mut h = vec![0.0; n];
        let mut in_k = vec![false; n];
        for &y in &k {
            let j = self.domain.local(y).unwrap();
            h[j] = 1.0;
            in_k[j] = true;
        }
        if k.len() == n {
            return Ok(h);
        }
        // U \ K is transient whenever U is: each of its components borders K or escapes U.
        let rest = self.domain.without(self.graph, &k)?;
        let system = KilledSystem::new(self.graph, &rest, self.choice, self.tol)?;
        let mut b = vec![0.0; rest.len()];
        for (i, &x) in rest.members().iter().enumerate() {
            for nb in self.graph.neighbors(x) {
                if self.domain.local(nb.vertex as usize).is_some_and(|j| in_k[j]) {
                    b[i] += self.graph.edge(nb.edge as usize).weight;
                }
            }
        }
        let sol = system.solve(&b)?;
        for (i, &x) in rest.members().iter().enumerate() {
            h[self.domain.local(x).unwrap()] = sol[i];
        }
        Ok(h)
    }

    pub fn hitting_probability(&self, k: &[usize], x: usize) -> Result<f64> {
        let i = self.domain.require(x)?;
        Ok(self.hitting_probabilities(k)?[i])
    }

    /// `e_K(y) = λ_y P_y(H̃_K > T_U)` for `y ∈ K`.
    pub fn equilibrium_measure(&self, k: &[usize]) -> Result<EquilibriumMeasure> {
        let support = self.check_target(k)?;
        let h = self.hitting_probabilities(&support)?;
        let masses = self.escape_masses(&support, &h);
        let capacity = masses.iter().sum();
        Ok(EquilibriumMeasure { support, masses, capacity })
    }

    fn escape_masses(&self, support: &[usize], h: &[f64]) -> Vec<f64> {
        support
            .iter()
            .map(|&y| {
                let mut returned = 0.0;
                for nb in self.graph.neighbors(y) {
                    if let Some(j) = self.domain.local(nb.vertex as usize) {
                        returned += self.graph.edge(nb.edge as usize).weight * h[j];
                    }
                }
                (self.graph.mass(y) - returned).max(0.0)
            })
            .collect()
    }

    /// `max_x |P_x(H_K < T_U) - Σ_y g_U(x, y) e_K(y)|` over `U`.
    pub fn last_exit_residual(&self, k: &[usize]) -> Result<f64> {
        let support = self.check_target(k)?;
        let h = self.hitting_probabilities(&support)?;
        let masses = self.escape_masses(&support, &h);
        let mut rhs = vec![0.0; self.domain.len()];
        for (&y, &m) in support.iter().zip(&masses) {
            rhs[self.domain.local(y).unwrap()] = m;
        }
        let ge = self.solve(&rhs)?;
        Ok(h.iter().zip(&ge).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// `1 / min_ν νᵀ G_KK ν` over probability measures on `K`, by an active-set solve.
    pub fn capacity_variational(&self, k: &[usize]) -> Result<f64> {
        let support = self.check_target(k)?;
        let g = self.green_matrix(&support)?;
        Ok(capacity_from_green_matrix(&g)?.0)
    }

    /// Quadratic form `μᵀ G μ` at the uniform mixture of normalized equilibrium measures.
    pub fn mixture_capacity_bound(&self, sets: &[Vec<usize>]) -> Result<f64> {
        if sets.is_empty() {
            return Err(Error::EmptySet);
        }
        let m = sets.len() as f64;
        let mut mu = vec![0.0; self.domain.len()];
        for set in sets {
            let eq = self.equilibrium_measure(set)?;
            for (&y, w) in eq.support.iter().zip(eq.normalized()) {
                mu[self.domain.local(y).unwrap()] += w / m;
            }
        }
        let g_mu = self.solve(&mu)?;
        Ok(mu.iter().zip(&g_mu).map(|(a, b)| a * b).sum())
    }
}

/// Active-set minimization of `μᵀ G μ - 2·1ᵀμ` over `μ >= 0`; returns
/// `(1ᵀμ, μ)`, which is the capacity and the equilibrium measure.
pub fn capacity_from_green_matrix(g: &DMatrix<f64>) -> Result<(f64, Vec<f64>)> {
    let k = g.nrows();
    let mut active: Vec<bool> = vec![true; k];
    let mut mu = vec![0.0; k];
    for _ in 0..(4 * k + 4) {
        let idx: Vec<usize> = (0..k).filter(|&i| active[i]).collect();
        let a = idx.len();
        let gaa = DMatrix::from_fn(a, a, |i, j| g[(idx[i], idx[j])]);
        let ones = DVector::from_element(a, 1.0);
        let sol = match gaa.clone().cholesky() {
            Some(ch) => ch.solve(&ones),
            None => gaa.clone().lu().solve(&ones).ok_or(Error::IllConditioned { residual: f64::INFINITY })?,
        };
        let residual = (&gaa * &sol - &ones).amax();
        if !(residual <= 1e-6) {
            return Err(Error::IllConditioned { residual });
        }
        if let Some(worst) = (0..a).filter(|&i| sol[i] < 0.0).min_by(|&i, &j| sol[i].total_cmp(&sol[j])) {
            active[idx[worst]] = false;
            continue;
        }
        mu.iter_mut().for_each(|m| *m = 0.0);
        for (i, &v) in idx.iter().enumerate() {
            mu[v] = sol[i];
        }
        // KKT: every dropped coordinate must have (Gμ)_j >= 1
        let g_mu = g * DVector::from_column_slice(&mu);
        let violator = (0..k).filter(|&j| !active[j] && g_mu[j] < 1.0 - 1e-12).min_by(|&i, &j| g_mu[i].total_cmp(&g_mu[j]));
        match violator {
            Some(j) => active[j] = true,
            None => return Ok((mu.iter().sum(), mu)),
        }
    }
    Err(Error::IllConditioned { residual: f64::NAN })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingRow {
    pub radius: usize,
    pub ball_size: usize,
    pub capacity: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingScan {
    pub dim: usize,
    pub side: usize,
    pub rows: Vec<ScalingRow>,
    /// Log-log fit of capacity against radius over `R >= 1`, when at least three such radii exist.
    pub fit: Option<ExponentFit>,
    /// Capacity of the largest ball in a window of twice the side.
    pub doubled_capacity: Option<f64>,
    pub boundary_effect: Option<f64>,
    pub window_too_small: bool,
}

fn centered_ball(graph: &WeightedGraph, radius: usize) -> Result<Vec<usize>> {
    let center = graph.lattice().ok_or(Error::NotLattice)?.center();
    graph.ball(center, radius)
}

fn ball_capacity(dim: usize, side: usize, radius: usize, tol: f64) -> Result<(usize, f64)> {
    let (graph, domain) = build_lattice_box(dim, side)?;
    let ball = centered_ball(&graph, radius)?;
    let op = GreenOperator::with_solver(&graph, domain, SolverChoice::Auto, tol)?;
    Ok((ball.len(), op.equilibrium_measure(&ball)?.capacity))
}

/// Capacities of centered graph-distance balls in a `Z^d` window of the given side,
/// with a doubled-window check at the largest radius.
pub fn capacity_scaling_scan(dim: usize, side: usize, radii: &[usize], check_doubling: bool) -> Result<ScalingScan> {
    if radii.is_empty() {
        return Err(Error::EmptySet);
    }
    let max_r = *radii.iter().max().unwrap();
    if side < 8 * max_r {
        return Err(Error::Margin(format!("window side {side} is below 8 x max radius {max_r}")));
    }
    let (graph, domain) = build_lattice_box(dim, side)?;
    let op = GreenOperator::new(&graph, domain)?;
    let mut rows = Vec::with_capacity(radii.len());
    for &r in radii {
        let ball = centered_ball(&graph, r)?;
        let capacity = op.equilibrium_measure(&ball)?.capacity;
        rows.push(ScalingRow { radius: r, ball_size: ball.len(), capacity });
    }
    let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.radius > 0).map(|r| (r.radius as f64, r.capacity)).collect();
    let fit = if pts.len() >= 3 { Some(fit_exponent(&pts)?) } else { None };
    let mut scan = ScalingScan { dim, side, rows, fit, doubled_capacity: None, boundary_effect: None, window_too_small: false };
    if check_doubling {
        let base = scan.rows.iter().find(|r| r.radius == max_r).unwrap().capacity;
        let (_, doubled) = ball_capacity(dim, 2 * side, max_r, DEFAULT_TOLERANCE)?;
        let effect = (base - doubled).abs() / doubled;
        scan.doubled_capacity = Some(doubled);
        scan.boundary_effect = Some(effect);
        scan.window_too_small = effect > 0.10;
    }
    Ok(scan)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TubeReport {
    pub length: usize,
    pub spacing: usize,
    pub ball_radius: f64,
    pub side: usize,
    pub vertices: usize,
    pub capacity: f64,
    /// Capacity divided by `2d`, i.e. for the walk with unit vertex masses.
    pub normalized_capacity: f64,
    /// `πR / (3 log(R/ℓ))`.
    pub asymptotic: f64,
    pub ratio: f64,
}

/// Vertices of `∪_i B((iℓ/2) e_1, Cℓ)` in Euclidean distance, `i = 0..=⌈2R/ℓ⌉`,
/// with the axis segment centered in the box.
pub fn tube_set(graph: &WeightedGraph, length: usize, spacing: usize, ball_ratio: f64) -> Result<Vec<usize>> {
    let shape = graph.lattice().ok_or(Error::NotLattice)?;
    if spacing == 0 || length == 0 {
        return Err(Error::InvalidArgument("tube needs R >= 1 and ℓ >= 1".into()));
    }
    let rad = ball_ratio * spacing as f64;
    let count = (2 * length).div_ceil(spacing);
    let c = (shape.side / 2) as f64;
    let start = c - length as f64 / 2.0;
    let centers: Vec<f64> = (0..=count).map(|i| start + i as f64 * spacing as f64 / 2.0).collect();
    let reach = rad.ceil() as i64;
    let mut set = Vec::new();
    let lo = (start - rad).floor().max(0.0) as i64;
    let hi = ((centers.last().unwrap() + rad).ceil() as i64).min(shape.side as i64 - 1);
    let mut coords = vec![0usize; shape.dim];
    for x0 in lo..=hi {
        let mut offsets = vec![-reach; shape.dim - 1];
        loop {
            let r2: f64 = offsets.iter().map(|&o| (o * o) as f64).sum();
            let inside_box = offsets.iter().all(|&o| {
                let v = c as i64 + o;
                v >= 0 && v < shape.side as i64
            });
            if inside_box && centers.iter().any(|&cx| (x0 as f64 - cx).powi(2) + r2 <= rad * rad) {
                coords[0] = x0 as usize;
                for (i, &o) in offsets.iter().enumerate() {
                    coords[i + 1] = (c as i64 + o) as usize;
                }
                set.push(shape.index(&coords));
            }
            let mut i = 0;
            while i < offsets.len() {
                offsets[i] += 1;
                if offsets[i] <= reach {
                    break;
                }
                offsets[i] = -reach;
                i += 1;
            }
            if i == offsets.len() {
                break;
            }
        }
    }
    set.sort_unstable();
    Ok(set)
}

/// Capacity of the tube of length `R` built from balls of radius `Cℓ`
/// spaced `ℓ/2` apart, in a `Z^d` window of the given side.
pub fn tube_capacity(dim: usize, side: usize, length: usize, spacing: usize, ball_ratio: f64, tol: f64) -> Result<TubeReport> {
    if dim < 2 {
        return Err(Error::InvalidArgument("tube needs d >= 2".into()));
    }
    let (graph, domain) = build_lattice_box(dim, side)?;
    // axis segment is [c - R/2, c + R/2]; its distance to the halo must be >= R
    let c = side / 2;
    let margin_axis = (c as i64 - (length as i64 + 1) / 2 + 1).min(side as i64 - (c + length.div_ceil(2)) as i64);
    if margin_axis < length as i64 {
        return Err(Error::Margin(format!(
            "tube of length {length} leaves margin {margin_axis} < {length} in a window of side {side}"
        )));
    }
    let tube = tube_set(&graph, length, spacing, ball_ratio)?;
    let op = GreenOperator::with_solver(&graph, domain, SolverChoice::Auto, tol)?;
    let capacity = op.equilibrium_measure(&tube)?.capacity;
    let normalized_capacity = capacity / (2 * dim) as f64;
    let asymptotic = std::f64::consts::PI * length as f64 / (3.0 * (length as f64 / spacing as f64).ln());
    Ok(TubeReport {
        length,
        spacing,
        ball_radius: ball_ratio * spacing as f64,
        side,
        vertices: tube.len(),
        capacity,
        normalized_capacity,
        asymptotic,
        ratio: normalized_capacity / asymptotic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> WeightedGraph {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 1.0)).collect();
        WeightedGraph::from_edges(n, &edges).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn path_three_single_interior() {
        let g = path(3);
        let u = DomainMask::new(&g, &[1]).unwrap();
        let op = GreenOperator::new(&g, u).unwrap();
        assert!(close(op.green(1, 1).unwrap(), 0.5, 1e-15));
    }

    #[test]
    fn path_four_two_interior() {
        let g = path(4);
        let op = GreenOperator::new(&g, DomainMask::new(&g, &[1, 2]).unwrap()).unwrap();
        assert!(close(op.green(1, 1).unwrap(), 2.0 / 3.0, 1e-14));
        assert!(close(op.green(1, 2).unwrap(), 1.0 / 3.0, 1e-14));
        assert!(close(op.green(2, 1).unwrap(), 1.0 / 3.0, 1e-14));
        assert!(close(op.hitting_probability(&[1], 2).unwrap(), 0.5, 1e-14));
        assert_eq!(op.hitting_probability(&[1], 1).unwrap(), 1.0);
        let eq = op.equilibrium_measure(&[1, 2]).unwrap();
        assert!(close(eq.masses[0], 1.0, 1e-14) && close(eq.masses[1], 1.0, 1e-14));
        assert!(close(eq.capacity, 2.0, 1e-14));
        assert!(close(op.capacity_variational(&[1, 2]).unwrap(), 2.0, 1e-12));
        assert_eq!(op.hitting_probabilities(&[1, 2]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn isolated_interior_vertex_is_killed_at_once() {
        let (g, _) = build_lattice_box(3, 5).unwrap();
        let center = g.lattice().unwrap().center();
        let op = GreenOperator::new(&g, DomainMask::new(&g, &[center]).unwrap()).unwrap();
        assert!(close(op.green(center, center).unwrap(), 1.0 / 6.0, 1e-15));
        assert!(close(op.equilibrium_measure(&[center]).unwrap().capacity, 6.0, 1e-14));
    }

    #[test]
    fn singleton_capacity_is_inverse_green() {
        let (g, u) = build_lattice_box(3, 7).unwrap();
        let op = GreenOperator::new(&g, u).unwrap();
        let x = 100;
        let gxx = op.green(x, x).unwrap();
        assert!(close(op.equilibrium_measure(&[x]).unwrap().capacity, 1.0 / gxx, 1e-10));
        assert!(close(op.capacity_variational(&[x]).unwrap(), 1.0 / gxx, 1e-10));
        assert!(close(op.mixture_capacity_bound(&[vec![x]]).unwrap(), gxx, 1e-12));
    }

    #[test]
    fn errors() {
        let g = path(4);
        let op = GreenOperator::new(&g, DomainMask::new(&g, &[1, 2]).unwrap()).unwrap();
        assert_eq!(op.hitting_probabilities(&[]), Err(Error::EmptySet));
        assert_eq!(op.green(0, 1).unwrap_err(), Error::NotInDomain(0));
        let whole = DomainMask::full(&g);
        assert!(matches!(GreenOperator::new(&g, whole), Err(Error::RecurrentDomain { .. })));
    }

    #[test]
    fn mixture_of_distant_singletons_expands_by_hand() {
        let (g, u) = build_lattice_box(3, 11).unwrap();
        let shape = *g.lattice().unwrap();
        let xs = [shape.offset_from_center(&[-3, 0, 0]).unwrap(), shape.offset_from_center(&[3, 0, 0]).unwrap()];
        let op = GreenOperator::new(&g, u).unwrap();
        let gm = op.green_matrix(&xs).unwrap();
        let hand = 0.25 * (gm[(0, 0)] + gm[(1, 1)] + 2.0 * gm[(0, 1)]);
        let bound = op.mixture_capacity_bound(&[vec![xs[0]], vec![xs[1]]]).unwrap();
        assert!(close(bound, hand, 1e-12));
        let cap = op.equilibrium_measure(&xs).unwrap().capacity;
        assert!(bound >= 1.0 / cap - 1e-12);
    }

    #[test]
    fn target_splitting_the_domain() {
        let g = WeightedGraph::from_edges(5, &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (3, 4, 1.0)]).unwrap();
        let op = GreenOperator::new(&g, DomainMask::new(&g, &[1, 2, 3]).unwrap()).unwrap();
        let h = op.hitting_probabilities(&[2]).unwrap();
        assert!(close(h[0], 0.5, 1e-14) && close(h[2], 0.5, 1e-14));
    }

    #[test]
    fn scaling_scan_at_zero_radius() {
        let scan = capacity_scaling_scan(3, 16, &[0, 1, 2], false).unwrap();
        let (g, u) = build_lattice_box(3, 16).unwrap();
        let center = g.lattice().unwrap().center();
        let op = GreenOperator::new(&g, u).unwrap();
        assert!(close(scan.rows[0].capacity, 1.0 / op.green(center, center).unwrap(), 1e-8));
        assert_eq!(scan.rows[1].ball_size, 7);
        assert!(scan.fit.is_none());
        assert!(capacity_scaling_scan(3, 16, &[3], false).is_err());
    }

    #[test]
    fn tube_is_monotone_in_spacing_and_degenerates_to_a_ball() {
        let (g, _) = build_lattice_box(3, 48).unwrap();
        let a = tube_set(&g, 8, 2, 0.5).unwrap();
        let b = tube_set(&g, 8, 4, 0.5).unwrap();
        assert!(a.iter().all(|x| b.binary_search(x).is_ok()));
        let thin = tube_capacity(3, 48, 8, 2, 0.5, 1e-10).unwrap();
        let thick = tube_capacity(3, 48, 8, 4, 0.5, 1e-10).unwrap();
        assert!(thick.capacity >= thin.capacity - 1e-8);
        // ℓ >= 2R: a couple of balls of radius Cℓ
        let fat = tube_capacity(3, 48, 4, 8, 0.5, 1e-10).unwrap();
        let (graph, domain) = build_lattice_box(3, 48).unwrap();
        let shape = *graph.lattice().unwrap();
        let c = shape.center();
        let ball: Vec<usize> = (0..graph.vertex_count()).filter(|&x| shape.euclidean_distance(x, c) <= 4.0).collect();
        let op = GreenOperator::new(&graph, domain).unwrap();
        let cap_ball = op.equilibrium_measure(&ball).unwrap().capacity;
        assert!(fat.capacity <= 2.0 * cap_ball && fat.capacity >= 0.5 * cap_ball);
        assert!(matches!(tube_capacity(3, 20, 12, 4, 0.5, 1e-10), Err(Error::Margin(_))));
    }
}
