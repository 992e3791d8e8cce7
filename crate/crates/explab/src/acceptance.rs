//! The acceptance suite: twelve criteria, each at its stated tolerance.

use std::time::Instant;

use anyhow::{ensure, Result};
use cablelab_core::graph::{build_lattice_box, build_packing, DomainMask, LatticeShape, WeightedGraph};
use cablelab_core::interlacements::{
    avoidance_probe, good_obstacle_check, lattice_vacancy, min_good_count, min_good_count_exhaustive, sites_inside,
};
use cablelab_core::loopsoup::{
    crossing_frequency, loop_count_check, loop_mass_crossing, loop_mass_crossing_green, restriction_property_test, LoopDomain,
};
use cablelab_core::percolation::{
    arcsin_validation, cluster_capacity_tail, monotone_coupling_check, one_arm_estimate, theory_predictions, Window,
};
use cablelab_core::potential::{capacity_scaling_scan, GreenOperator};
use cablelab_core::rng::{Purpose, StreamKey};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const CRITERIA: [(u8, &str); 12] = [
    (1, "arcsin identity"),
    (2, "capacity consistency"),
    (3, "ball-capacity scaling"),
    (4, "one-arm exponent"),
    (5, "loop-count laws"),
    (6, "restriction property"),
    (7, "crossing-mass oracle"),
    (8, "interlacement vacancy"),
    (9, "obstacle checker exactness"),
    (10, "monotone coupling"),
    (11, "cluster-capacity tail"),
    (12, "declared non-reproducible"),
];

/// Samples per criterion; `full()` is the acceptance setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub path_fields: u64,
    pub box_fields: u64,
    pub one_arm_fields: u64,
    pub soups: u64,
    pub crossing_soups: u64,
    pub interlacement_samples: u64,
    pub coupled_samples: u64,
    pub tail_fields: u64,
}

impl Budget {
    pub fn full() -> Self {
        Self {
            path_fields: 100_000,
            box_fields: 20_000,
            one_arm_fields: 20_000,
            soups: 100_000,
            crossing_soups: 20_000,
            interlacement_samples: 20_000,
            coupled_samples: 1_000,
            tail_fields: 4_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub id: u8,
    pub title: String,
    pub pass: bool,
    /// Declared criteria pass when their substitute checks do.
    pub declared: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Verdict {
    pub fn line(&self) -> String {
        let tag = match (self.pass, self.declared) {
            (true, false) => "PASS",
            (true, true) => "DECLARED",
            (false, _) => "FAIL",
        };
        format!("criterion {:>2} {:<8} {} ({:.1}s): {}", self.id, tag, self.title, self.seconds, self.detail)
    }
}

pub fn evaluate(id: u8, seed: u64, workers: usize, budget: &Budget) -> Verdict {
    let title = CRITERIA.iter().find(|c| c.0 == id).map_or("unknown criterion", |c| c.1);
    let started = Instant::now();
    let result = match id {
        1 => arcsin_identity(seed, workers, budget),
        2 => capacity_consistency(seed),
        3 => ball_capacity_scaling(),
        4 => one_arm_exponent(seed, workers, budget),
        5 => loop_count_laws(seed, workers, budget),
        6 => restriction(seed, workers, budget),
        7 => crossing_mass(seed, workers, budget),
        8 => vacancy(seed, workers, budget),
        9 => obstacle_exactness(seed),
        10 => monotone_coupling(seed, workers, budget),
        11 => capacity_tail(seed, workers, budget),
        12 => declared_substitutes(seed, workers),
        _ => Err(anyhow::anyhow!("no criterion {id}")),
    };
    let (pass, detail) = match result {
        Ok(c) => c,
        Err(e) => (false, format!("error: {e:#}")),
    };
    Verdict { id, title: title.to_string(), pass, declared: id == 12, detail, seconds: started.elapsed().as_secs_f64() }
}

type Check = Result<(bool, String)>;

fn path(n: usize) -> Result<WeightedGraph> {
    let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 1.0)).collect();
    Ok(WeightedGraph::from_edges(n, &edges)?)
}

fn offset(shape: &LatticeShape, o: &[i64]) -> Result<usize> {
    shape.offset_from_center(o).ok_or_else(|| anyhow::anyhow!("offset {o:?} leaves the box"))
}

fn max_abs(z: impl IntoIterator<Item = f64>) -> f64 {
    z.into_iter().fold(0.0, |m, z: f64| if z.is_nan() { f64::INFINITY } else { m.max(z.abs()) })
}

fn arcsin_identity(seed: u64, workers: usize, b: &Budget) -> Check {
    let g = path(4)?;
    let u = DomainMask::new(&g, &[1, 2])?;
    let w = Window::new(g, u, 1)?;
    let row = &arcsin_validation(&w, &[(1, 2)], b.path_fields, seed, workers)?[0];
    ensure!((row.target - 1.0 / 6.0).abs() < 1e-12, "path target {} is not 1/6", row.target);
    let z_path = row.estimate.binomial_z(1.0 / 6.0);
    let w = Window::lattice(3, 16)?;
    let shape = *w.shape().unwrap();
    let offsets: [[i64; 3]; 5] = [[1, 0, 0], [1, 1, 0], [2, 1, 0], [2, 1, 1], [3, 2, 1]];
    let pairs = offsets.iter().map(|o| Ok((w.base, offset(&shape, o)?))).collect::<Result<Vec<_>>>()?;
    let rows = arcsin_validation(&w, &pairs, b.box_fields, seed, workers)?;
    let zs: Vec<f64> = rows.iter().map(|r| r.z).collect();
    let worst = max_abs(zs.iter().copied());
    Ok((
        z_path.abs() <= 3.0 && worst <= 3.0,
        format!("path P={:.5} vs 1/6, z={z_path:.2}; box z at distances 1,2,3,4,6 = {zs:.2?}", row.estimate.estimate),
    ))
}

/// Random connected weighted graph on `n` vertices: a random tree plus extra edges.
fn random_graph(rng: &mut impl Rng, n: usize) -> Result<WeightedGraph> {
    let mut edges = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for v in 1..n {
        let u = rng.random_range(0..v);
        seen.insert((u, v));
        edges.push((u, v, rng.random_range(0.2..5.0)));
    }
    for _ in 0..n / 2 {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        let (u, v) = (a.min(b), a.max(b));
        if u != v && seen.insert((u, v)) {
            edges.push((u, v, rng.random_range(0.2..5.0)));
        }
    }
    Ok(WeightedGraph::from_edges(n, &edges)?)
}

fn capacity_consistency(seed: u64) -> Check {
    let (mut worst_rel, mut worst_res) = (0.0f64, 0.0f64);
    for i in 0..50 {
        let mut rng = StreamKey::new(seed, i, Purpose::Aux).rng();
        let n = rng.random_range(3..=200);
        let g = random_graph(&mut rng, n)?;
        let killed = rng.random_range(1..=(n / 5).max(1));
        let mut order: Vec<usize> = (0..n).collect();
        for j in (1..n).rev() {
            order.swap(j, rng.random_range(0..=j));
        }
        let inside = &order[killed..];
        let u = DomainMask::new(&g, inside)?;
        let k_size = rng.random_range(1..=inside.len().min(12));
        let k = &inside[..k_size];
        let op = GreenOperator::new(&g, u)?;
        let eq = op.equilibrium_measure(k)?.capacity;
        let var = op.capacity_variational(k)?;
        worst_rel = worst_rel.max((eq - var).abs() / var);
        worst_res = worst_res.max(op.last_exit_residual(k)?);
    }
    Ok((
        worst_rel <= 1e-6 && worst_res < 1e-8,
        format!("50 graphs: max relative capacity gap {worst_rel:.2e}, max last-exit residual {worst_res:.2e}"),
    ))
}

fn ball_capacity_scaling() -> Check {
    let scan = capacity_scaling_scan(3, 64, &[2, 3, 4, 6, 8], false)?;
    let fit = scan.fit.ok_or_else(|| anyhow::anyhow!("no fit"))?;
    Ok(((0.8..=1.2).contains(&fit.slope), format!("slope {:.4} (band {:.3}..{:.3}), target 1", fit.slope, fit.band.0, fit.band.1)))
}

fn one_arm_exponent(seed: u64, workers: usize, b: &Budget) -> Check {
    let w = Window::lattice(3, 64)?;
    let res = &one_arm_estimate(&w, &[0.0], &[4, 8, 16, 24], b.one_arm_fields, seed, workers)?[0];
    let fit = res.fit.as_ref().ok_or_else(|| anyhow::anyhow!("no fit"))?;
    let exponent = -fit.slope;
    let probs: Vec<f64> = res.rows.iter().map(|r| r.estimate.estimate).collect();
    Ok((
        (0.40..=0.65).contains(&exponent),
        format!("exponent {exponent:.4} ± {:.4} from P = {probs:.4?} at R = 4, 8, 16, 24", fit.slope_stderr),
    ))
}

fn count_laws(d: &LoopDomain, seed: u64, workers: usize, soups: u64) -> Result<(bool, String)> {
    let r = loop_count_check(d, 0.5, 8, soups, seed, workers)?;
    let zs = max_abs(r.rows.iter().flat_map(|row| [row.z_mean, row.z_variance]));
    let routes = (d.masses().total - d.total_from_spectrum()).abs();
    let ok = zs <= 3.0 && r.total_z.abs() <= 3.0 && routes < 1e-9;
    Ok((
        ok,
        format!(
            "max |z| per length {zs:.2}, total {:.4} vs {:.4} (z={:.2}, tail {:.2e}), log-det vs spectrum {routes:.1e}",
            r.total.estimate, r.total_expected, r.total_z, r.tail
        ),
    ))
}

fn loop_count_laws(seed: u64, workers: usize, b: &Budget) -> Check {
    let g = path(4)?;
    let two = LoopDomain::with_tail_fraction(&g, DomainMask::new(&g, &[1, 2])?, 1e-3)?;
    let (ok_two, d_two) = count_laws(&two, seed, workers, b.soups)?;
    let (bx, u) = build_lattice_box(2, 5)?;
    let grid = LoopDomain::with_tail_fraction(&bx, u, 1e-3)?;
    let (ok_grid, d_grid) = count_laws(&grid, seed, workers, b.soups)?;
    Ok((ok_two && ok_grid, format!("2-state: {d_two}; 5x5: {d_grid}")))
}

fn restriction(seed: u64, workers: usize, b: &Budget) -> Check {
    let (g, u) = build_lattice_box(2, 5)?;
    let shape = *g.lattice().unwrap();
    let sub = DomainMask::new(&g, &shape.sub_box(&[0, 0], &[4, 2]))?;
    let r = restriction_property_test(&g, &u, &sub, 0.5, 8, b.soups, seed, workers)?;
    let z = r.max_abs_z();
    Ok((z <= 3.0, format!("max |z| {z:.2} over lengths 2..8 (confined, direct, between), sub-box of {} vertices", sub.len())))
}

fn crossing_configs(shape: &LatticeShape) -> Vec<(Vec<usize>, Vec<usize>)> {
    let at = |x: usize, y: usize| shape.index(&[x, y]);
    vec![
        (vec![at(2, 2)], vec![at(2, 3)]),
        (vec![at(2, 2)], vec![at(3, 3)]),
        (vec![at(1, 1)], vec![at(4, 4)]),
        (vec![at(0, 0)], vec![at(5, 5)]),
        (vec![at(2, 2)], vec![at(2, 4)]),
        (vec![at(2, 2), at(2, 3)], vec![at(3, 2), at(3, 3)]),
        (vec![at(0, 2), at(0, 3)], vec![at(5, 2), at(5, 3)]),
        ((0..6).map(|y| at(1, y)).collect(), (0..6).map(|y| at(4, y)).collect()),
        (vec![at(2, 2)], vec![at(1, 2), at(3, 2), at(2, 1), at(2, 3)]),
        (vec![at(0, 0), at(5, 5)], vec![at(0, 5), at(5, 0)]),
        ((0..3).map(|y| at(0, y)).collect(), vec![at(3, 3)]),
    ]
}

fn crossing_mass(seed: u64, workers: usize, b: &Budget) -> Check {
    let (g, u) = build_lattice_box(2, 6)?;
    let shape = *g.lattice().unwrap();
    let configs = crossing_configs(&shape);
    let d = LoopDomain::with_tail_fraction(&g, u.clone(), 1e-4)?;
    let rows = crossing_frequency(&d, 0.5, &configs, b.crossing_soups, seed, workers)?;
    let op = GreenOperator::new(&g, u.clone())?;
    let mut routes = 0.0f64;
    for (k, m) in &configs {
        routes = routes.max((loop_mass_crossing(&g, &u, k, m)? - loop_mass_crossing_green(&op, k, m)?).abs());
    }
    let zs: Vec<f64> = rows.iter().map(|r| r.z).collect();
    let worst = max_abs(zs.iter().copied());
    let trunc = rows.iter().map(|r| r.exact_mass - r.truncated_mass).fold(0.0, f64::max);
    Ok((
        worst <= 3.0 && routes < 1e-8,
        format!(
            "{} configurations, z = {zs:.2?}; log-det vs Green route {routes:.1e}; mass beyond n_max={} at most {trunc:.1e}",
            rows.len(),
            d.n_max()
        ),
    ))
}

fn vacancy(seed: u64, workers: usize, b: &Budget) -> Check {
    let r = lattice_vacancy(3, 17, 3, &[0, 1], &[0.05, 0.1, 0.2], b.interlacement_samples, seed, workers)?;
    let failing = r.rows.iter().filter(|row| !row.pass).count();
    let counts = max_abs(r.counts.iter().flat_map(|c| [c.z_mean, c.z_variance]));
    let zs: Vec<f64> = r.rows.iter().map(|row| row.z).collect();
    let bias = r.rows.iter().map(|row| row.halo_bias).fold(0.0, f64::max);
    Ok((
        failing == 0 && counts <= 3.0,
        format!("vacancy z = {zs:.2?} (max halo bias {bias:.1e}), trajectory-count max |z| {counts:.2}"),
    ))
}

fn obstacle_exactness(seed: u64) -> Check {
    // (side, L, R) on Z^2 boxes, each with at most 12 packing sites
    let instances = [(5, 2, 1), (6, 2, 2), (7, 2, 2), (7, 3, 3), (7, 2, 4)];
    let mut checked = 0;
    let mut mismatches = 0;
    let mut max_sites = 0;
    for p in 0..100u64 {
        let (side, scale, radius) = instances[p as usize % instances.len()];
        let (g, u) = build_lattice_box(2, side)?;
        let base = g.lattice().unwrap().center();
        let packing = build_packing(&g, scale, base)?;
        ensure!(packing.len() <= 12, "instance ({side}, {scale}) has {} sites", packing.len());
        max_sites = max_sites.max(packing.len());
        let mut rng = StreamKey::new(seed, p, Purpose::Obstacle).rng();
        let density = rng.random_range(0.1..0.6);
        let obstacle: Vec<usize> = (0..g.vertex_count()).filter(|_| rng.random_bool(density)).collect();
        let kappa = rng.random_range(0.5..4.0);
        let n = rng.random_range(1..=3);
        let op = GreenOperator::new(&g, u)?;
        let report = good_obstacle_check(&op, &packing, &obstacle, radius, n, kappa)?;
        let inside = sites_inside(&g, &packing, radius);
        let exhaustive = min_good_count_exhaustive(&packing, &report.good, &inside);
        let verdict = exhaustive.is_none_or(|m| m >= n);
        // the search on an independent random goodness pattern as well
        let good: Vec<bool> = (0..packing.len()).map(|_| rng.random_bool(0.5)).collect();
        let same = min_good_count(&packing, &good, &inside) == min_good_count_exhaustive(&packing, &good, &inside);
        mismatches += usize::from(report.min_count != exhaustive || report.verdict != verdict || !same);
        checked += 2;
    }
    Ok((mismatches == 0, format!("{checked} minima over 100 patterns ({max_sites} sites at most), {mismatches} mismatches")))
}

fn monotone_coupling(seed: u64, workers: usize, b: &Budget) -> Check {
    let w = Window::lattice(3, 12)?;
    let shape = *w.shape().unwrap();
    let pairs = [[1, 0, 0], [2, 1, 0], [3, 3, 0], [-4, 2, 1]]
        .iter()
        .map(|o| Ok((w.base, offset(&shape, o)?)))
        .collect::<Result<Vec<_>>>()?;
    let r = monotone_coupling_check(&w, &[-0.5, 0.0, 0.5], &[1, 2, 3, 4], &pairs, b.coupled_samples, seed, workers)?;
    Ok((
        r.holds() && r.samples == b.coupled_samples,
        format!(
            "{} samples x {} level pairs: edge {}, cluster {}, connection {}, one-arm {}, exploration {} violations",
            r.samples,
            r.level_pairs,
            r.edge_violations,
            r.cluster_violations,
            r.connection_violations,
            r.one_arm_violations,
            r.exploration_mismatches
        ),
    ))
}

/// Seven thresholds evenly spaced in `log t` over `[8, 80]`.
pub fn tail_thresholds() -> Vec<f64> {
    (0..7).map(|i| 8.0 * 10f64.powf(i as f64 / 6.0)).collect()
}

fn capacity_tail(seed: u64, workers: usize, b: &Budget) -> Check {
    let w = Window::lattice(3, 48)?;
    let tail = cluster_capacity_tail(&w, 0.0, &tail_thresholds(), b.tail_fields, seed, workers, 1e-8)?;
    let fit = tail.fit.as_ref().ok_or_else(|| anyhow::anyhow!("no fit"))?;
    let probs: Vec<f64> = tail.rows.iter().map(|r| r.estimate.estimate).collect();
    Ok((
        (-0.70..=-0.35).contains(&fit.slope),
        format!(
            "slope {:.4} ± {:.4} over t in [8, 80], P = {probs:.4?}, {} censored, {} exact solves",
            fit.slope, fit.slope_stderr, tail.censored, tail.exact_solves
        ),
    ))
}

/// Substitutes: the shape predictions are internally consistent and the
/// avoidance probe is monotone under inclusion of obstacles.
fn declared_substitutes(seed: u64, workers: usize) -> Check {
    let (nu, alpha) = (1.0, 3.0);
    let radii = [8.0, 16.0, 32.0, 64.0, 128.0];
    let preds = radii.iter().map(|&r| theory_predictions(0.0, r, nu, alpha)).collect::<Result<Vec<_>, _>>()?;
    // at criticality: R^{-ν/2} decays while the log correction q(R) grows
    let ordered = preds.iter().all(|p| p.xi.is_infinite())
        && preds.windows(2).all(|w| w[1].one_arm_lower < w[0].one_arm_lower && w[1].q > w[0].q);
    let ratios = [0.05, 0.1, 0.2, 0.4]
        .iter()
        .map(|&a| Ok(theory_predictions(a, 64.0, nu, alpha)?.two_point_ratio_upper))
        .collect::<Result<Vec<f64>>>()?;
    let decaying = ratios.windows(2).all(|w| w[1] <= w[0]);
    let (g, u) = build_lattice_box(2, 11)?;
    let shape = *g.lattice().unwrap();
    let ring = |r: i64| -> Vec<usize> {
        (-r..=r).flat_map(|i| [[i, r], [i, -r], [r, i], [-r, i]]).filter_map(|o| shape.offset_from_center(&o)).collect()
    };
    let sparse: Vec<usize> = ring(2).into_iter().step_by(3).collect();
    let obstacles = vec![Vec::new(), sparse, ring(2)];
    let target = offset(&shape, &[4, 0])?;
    let probe = avoidance_probe(&g, &u, &obstacles, shape.center(), target, 4000, seed, workers)?;
    let p: Vec<f64> = probe.iter().map(|e| e.estimate).collect();
    let monotone = p.windows(2).all(|w| w[1] <= w[0]);
    Ok((
        ordered && decaying && monotone,
        format!(
            "near-critical constants and exponents are not reproduced at desk scale; \
             substitutes: one-arm shape ordered {ordered}, two-point ratio decaying {decaying}, \
             avoidance probabilities {p:.3?} monotone {monotone}"
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds_span_one_decade() {
        let t = tail_thresholds();
        assert_eq!(t.len(), 7);
        assert!((t[6] / t[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn random_graphs_are_connected() {
        let mut rng = StreamKey::new(3, 0, Purpose::Aux).rng();
        for n in [2, 3, 50, 200] {
            let g = random_graph(&mut rng, n).unwrap();
            assert!(g.distances_from(0).iter().all(|&d| d < n));
        }
    }

    #[test]
    fn fast_criteria_pass() {
        for id in [2, 9, 12] {
            let v = evaluate(id, 1, 1, &Budget::full());
            assert!(v.pass, "{}", v.line());
        }
    }

    #[test]
    fn unknown_criterion_fails() {
        assert!(!evaluate(13, 1, 1, &Budget::full()).pass);
    }
}
