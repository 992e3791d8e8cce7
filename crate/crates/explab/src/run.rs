//! Dispatch of a validated config to the estimators, and persistence of the
//! results as `results.csv` plus `manifest.json`.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use cablelab_core::gff::FieldSampler;
use cablelab_core::graph::{build_packing, DomainMask};
use cablelab_core::interlacements::{avoidance_probe, good_obstacle_check, lattice_vacancy};
use cablelab_core::linalg::{AUTO_DENSE_LIMIT, DEFAULT_TOLERANCE, DENSE_LIMIT};
use cablelab_core::loopsoup::{
    crossing_frequency, loop_connection_check, loop_count_check, restriction_property_test, LoopDomain, LOOP_DENSE_LIMIT,
};
use cablelab_core::percolation::{
    arcsin_validation, cluster_capacity_tail, field_key, monotone_coupling_check, one_arm_estimate, truncated_two_point, Window,
};
use cablelab_core::potential::{capacity_scaling_scan, GreenOperator};
use cablelab_core::replica::run_replicas;
use cablelab_core::stats::{ObservableEstimate, Tally};
use cablelab_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Experiment, ExperimentConfig, GraphSpec};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        Ok(w.into_inner()?)
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn est(e: &ObservableEstimate) -> [String; 3] {
    [num(e.estimate), num(e.stderr), e.n.to_string()]
}

/// Every replica `r` of a run draws from the streams `(seed, r, purpose)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaSeeds {
    pub seed: u64,
    pub replicas: u64,
    pub streams: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub tolerance: f64,
    pub auto_dense_limit: usize,
    pub dense_limit: usize,
    pub loop_dense_limit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub n_max: usize,
    /// Loop mass beyond `n_max`, not sampled.
    pub tail_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub config: ExperimentConfig,
    pub seeds: ReplicaSeeds,
    pub workers: usize,
    pub solver: SolverSettings,
    pub truncation: Option<Truncation>,
    pub wall_clock_seconds: f64,
    pub rows: usize,
    /// Fits and aggregate checks that do not fit the row format.
    pub summary: Value,
}

pub struct RunOutput {
    pub table: Table,
    pub manifest: RunManifest,
}

/// Adds the seed and failing replica to a module error.
fn surface(seed: u64) -> impl Fn(Error) -> anyhow::Error {
    move |e| {
        let msg = match &e {
            Error::Replica { replica, .. } => format!("replica {replica} of seed {seed} failed"),
            _ => format!("run with seed {seed} failed"),
        };
        anyhow::Error::new(e).context(msg)
    }
}

struct Outcome {
    table: Table,
    streams: Vec<&'static str>,
    tolerance: f64,
    truncation: Option<Truncation>,
    summary: Value,
}

impl Outcome {
    fn new(table: Table, streams: &[&'static str]) -> Self {
        Self { table, streams: streams.to_vec(), tolerance: DEFAULT_TOLERANCE, truncation: None, summary: Value::Null }
    }
}

pub fn run(config: &ExperimentConfig, workers: usize) -> Result<RunOutput> {
    config.validate()?;
    let started = Instant::now();
    let out = dispatch(config, workers.max(1))?;
    let manifest = RunManifest {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        seeds: ReplicaSeeds {
            seed: config.seed,
            replicas: config.samples,
            streams: out.streams.iter().map(|s| s.to_string()).collect(),
        },
        workers: workers.max(1),
        solver: SolverSettings {
            tolerance: out.tolerance,
            auto_dense_limit: AUTO_DENSE_LIMIT,
            dense_limit: DENSE_LIMIT,
            loop_dense_limit: LOOP_DENSE_LIMIT,
        },
        truncation: out.truncation,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        rows: out.table.rows.len(),
        summary: out.summary,
    };
    Ok(RunOutput { table: out.table, manifest })
}

/// Writes `results.csv` and `manifest.json` into `dir`.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("results.csv"), out.table.to_csv()?)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&out.manifest)? + "\n")?;
    Ok(())
}

fn dispatch(config: &ExperimentConfig, workers: usize) -> Result<Outcome> {
    let seed = config.seed;
    let samples = config.samples;
    let err = surface(seed);
    let g = config.graph.build()?;
    let window = || Window::new(g.graph.clone(), g.domain.clone(), g.base).map_err(&err);
    Ok(match &config.experiment {
        Experiment::FieldVariance { sites } => {
            let xs = g.sites(sites)?;
            let locals = xs.iter().map(|&x| g.domain.require(x)).collect::<Result<Vec<_>, _>>().map_err(&err)?;
            let op = GreenOperator::new(&g.graph, g.domain.clone()).map_err(&err)?;
            let sampler = FieldSampler::new(&g.graph, &g.domain).map_err(&err)?;
            let values = run_replicas(&sampler, 0..samples, workers, |s, r| {
                let f = s.sample(field_key(seed, r));
                Ok(locals.iter().map(|&i| f.values[i]).collect::<Vec<f64>>())
            })
            .map_err(&err)?;
            let mut t = Table::new(&["vertex", "green", "variance", "stderr", "z"]);
            if samples >= 2 {
                for (i, &x) in xs.iter().enumerate() {
                    let mut tally = Tally::default();
                    for v in &values {
                        tally.push(v[i]);
                    }
                    let green = op.green(x, x).map_err(&err)?;
                    // the field is centered: E φ² is the variance
                    let var = tally.sumsq / tally.n as f64;
                    let se = green * (2.0 / tally.n as f64).sqrt();
                    t.push(vec![x.to_string(), num(green), num(var), num(se), num((var - green) / se)]);
                }
            }
            Outcome::new(t, &["field"])
        }
        Experiment::Arcsin { pairs } => {
            let pairs = g.pairs(pairs)?;
            let mut t = Table::new(&["x", "y", "green_ratio", "target", "estimate", "stderr", "n", "z"]);
            if samples > 0 {
                for row in arcsin_validation(&window()?, &pairs, samples, seed, workers).map_err(&err)? {
                    let [e, s, n] = est(&row.estimate);
                    t.push(vec![row.x.to_string(), row.y.to_string(), num(row.green_ratio), num(row.target), e, s, n, num(row.z)]);
                }
            }
            Outcome::new(t, &["field", "edges"])
        }
        Experiment::OneArm { levels, radii } => {
            let mut t = Table::new(&["level", "radius", "estimate", "stderr", "n", "flagged"]);
            let mut fits = Vec::new();
            if samples > 0 {
                for res in one_arm_estimate(&window()?, levels, radii, samples, seed, workers).map_err(&err)? {
                    for row in &res.rows {
                        let [e, s, n] = est(&row.estimate);
                        t.push(vec![num(res.level), row.radius.to_string(), e, s, n, row.flagged.to_string()]);
                    }
                    fits.push(json!({ "level": res.level, "fit": res.fit }));
                }
            }
            let mut o = Outcome::new(t, &["field", "edges"]);
            o.summary = json!({ "fits": fits });
            o
        }
        Experiment::TwoPoint { levels, x, y } => {
            let (x, y) = (g.site(x)?, g.site(y)?);
            let mut t =
                Table::new(&["level", "truncated", "truncated_stderr", "connected", "connected_stderr", "n"]);
            if samples > 0 {
                for row in truncated_two_point(&window()?, levels, x, y, samples, seed, workers).map_err(&err)? {
                    let [te, ts, n] = est(&row.truncated);
                    let [ce, cs, _] = est(&row.connected);
                    t.push(vec![num(row.level), te, ts, ce, cs, n]);
                }
            }
            Outcome::new(t, &["field", "edges"])
        }
        Experiment::CapacityTail { level, thresholds, tolerance } => {
            let mut t = Table::new(&["level", "threshold", "estimate", "stderr", "n"]);
            let mut o = Outcome::new(Table::default(), &["field", "edges"]);
            if samples > 0 {
                let tail = cluster_capacity_tail(&window()?, *level, thresholds, samples, seed, workers, *tolerance)
                    .map_err(&err)?;
                for row in &tail.rows {
                    let [e, s, n] = est(&row.estimate);
                    t.push(vec![num(tail.level), num(row.threshold), e, s, n]);
                }
                o.summary = json!({
                    "fit": tail.fit,
                    "censored": tail.censored,
                    "exact_solves": tail.exact_solves,
                    "window_capacity": tail.window_capacity,
                });
            }
            o.table = t;
            o.tolerance = *tolerance;
            o
        }
        Experiment::Monotone { levels, radii, pairs } => {
            let pairs = g.pairs(pairs)?;
            let mut t = Table::new(&[
                "samples",
                "level_pairs",
                "edge_violations",
                "cluster_violations",
                "connection_violations",
                "one_arm_violations",
                "exploration_mismatches",
                "holds",
            ]);
            if samples > 0 {
                let r = monotone_coupling_check(&window()?, levels, radii, &pairs, samples, seed, workers).map_err(&err)?;
                t.push(vec![
                    r.samples.to_string(),
                    r.level_pairs.to_string(),
                    r.edge_violations.to_string(),
                    r.cluster_violations.to_string(),
                    r.connection_violations.to_string(),
                    r.one_arm_violations.to_string(),
                    r.exploration_mismatches.to_string(),
                    r.holds().to_string(),
                ]);
            }
            Outcome::new(t, &["field", "edges"])
        }
        Experiment::LoopCounts { alpha, max_length, tail_fraction } => {
            let d = LoopDomain::with_tail_fraction(&g.graph, g.domain.clone(), *tail_fraction).map_err(&err)?;
            let mut t = Table::new(&["length", "expected", "mean", "variance", "z_mean", "z_variance"]);
            let mut o = Outcome::new(Table::default(), &["loops"]);
            if samples > 0 {
                let r = loop_count_check(&d, *alpha, *max_length, samples, seed, workers).map_err(&err)?;
                for row in &r.rows {
                    t.push(vec![
                        row.length.to_string(),
                        num(row.expected),
                        num(row.mean),
                        num(row.variance),
                        num(row.z_mean),
                        num(row.z_variance),
                    ]);
                }
                o.summary = json!({ "total_expected": r.total_expected, "total": r.total, "total_z": r.total_z });
            }
            o.table = t;
            o.truncation = Some(Truncation { n_max: d.n_max(), tail_mass: d.masses().tail });
            o
        }
        Experiment::LoopCrossing { alpha, tail_fraction, configs } => {
            let d = LoopDomain::with_tail_fraction(&g.graph, g.domain.clone(), *tail_fraction).map_err(&err)?;
            let configs: Vec<(Vec<usize>, Vec<usize>)> =
                configs.iter().map(|(k, m)| Ok((g.sites(k)?, g.sites(m)?))).collect::<Result<_>>()?;
            let mut t = Table::new(&[
                "config", "k_size", "m_size", "exact_mass", "truncated_mass", "target", "estimate", "stderr", "n", "z",
            ]);
            if samples > 0 {
                for (i, row) in crossing_frequency(&d, *alpha, &configs, samples, seed, workers).map_err(&err)?.iter().enumerate() {
                    let [e, s, n] = est(&row.estimate);
                    t.push(vec![
                        i.to_string(),
                        row.k.len().to_string(),
                        row.m.len().to_string(),
                        num(row.exact_mass),
                        num(row.truncated_mass),
                        num(row.target),
                        e,
                        s,
                        n,
                        num(row.z),
                    ]);
                }
            }
            let mut o = Outcome::new(t, &["loops"]);
            o.truncation = Some(Truncation { n_max: d.n_max(), tail_mass: d.masses().tail });
            o
        }
        Experiment::Restriction { alpha, n_max, sub } => {
            let sub = DomainMask::new(&g.graph, &g.sites(sub)?).map_err(&err)?;
            let mut t = Table::new(&[
                "length", "analytic", "confined", "confined_stderr", "direct", "direct_stderr", "n", "z_confined", "z_direct",
                "z_between",
            ]);
            let mut o = Outcome::new(Table::default(), &["loops", "aux"]);
            if samples > 0 {
                let r = restriction_property_test(&g.graph, &g.domain, &sub, *alpha, *n_max, samples, seed, workers)
                    .map_err(&err)?;
                for row in &r.rows {
                    let [ce, cs, n] = est(&row.confined);
                    let [de, ds, _] = est(&row.direct);
                    t.push(vec![
                        row.length.to_string(),
                        num(row.analytic),
                        ce,
                        cs,
                        de,
                        ds,
                        n,
                        num(row.z_confined),
                        num(row.z_direct),
                        num(row.z_between),
                    ]);
                }
                o.summary = json!({ "max_abs_z": r.max_abs_z() });
            }
            o.table = t;
            let d = LoopDomain::new(&g.graph, g.domain.clone(), *n_max).map_err(&err)?;
            o.truncation = Some(Truncation { n_max: *n_max, tail_mass: d.masses().tail });
            o
        }
        Experiment::LoopConnection { alpha, tail_fraction, pairs } => {
            let pairs = g.pairs(pairs)?;
            let d = LoopDomain::with_tail_fraction(&g.graph, g.domain.clone(), *tail_fraction).map_err(&err)?;
            let mut t = Table::new(&["x", "y", "target", "estimate", "stderr", "n", "z", "within_bound"]);
            if samples > 0 {
                for row in loop_connection_check(&d, *alpha, &pairs, samples, seed, workers).map_err(&err)? {
                    let [e, s, n] = est(&row.estimate);
                    t.push(vec![
                        row.x.to_string(),
                        row.y.to_string(),
                        num(row.target),
                        e,
                        s,
                        n,
                        num(row.z),
                        row.within_bound.to_string(),
                    ]);
                }
            }
            let mut o = Outcome::new(t, &["loops"]);
            o.truncation = Some(Truncation { n_max: d.n_max(), tail_mass: d.masses().tail });
            o
        }
        Experiment::Vacancy { window_side, radii, levels } => {
            let GraphSpec::Lattice { dim, side } = config.graph else { unreachable!("validated") };
            let mut t = Table::new(&[
                "level", "set_size", "capacity", "target", "estimate", "stderr", "n", "z", "halo_bias", "pass",
            ]);
            let mut o = Outcome::new(Table::default(), &["interlacement (replica r * levels + j for level j)"]);
            if samples > 0 {
                let r = lattice_vacancy(dim, side, *window_side, radii, levels, samples, seed, workers).map_err(&err)?;
                for row in &r.rows {
                    let [e, s, n] = est(&row.estimate);
                    t.push(vec![
                        num(row.level),
                        row.set_size.to_string(),
                        num(row.capacity),
                        num(row.target),
                        e,
                        s,
                        n,
                        num(row.z),
                        num(row.halo_bias),
                        row.pass.to_string(),
                    ]);
                }
                o.summary = json!({ "window_capacity": r.window_capacity, "trajectory_counts": r.counts });
            }
            o.table = t;
            o
        }
        Experiment::CapacityScaling { radii, check_doubling } => {
            let GraphSpec::Lattice { dim, side } = config.graph else { unreachable!("validated") };
            let scan = capacity_scaling_scan(dim, side, radii, *check_doubling).map_err(&err)?;
            let mut t = Table::new(&["radius", "ball_size", "capacity"]);
            for row in &scan.rows {
                t.push(vec![row.radius.to_string(), row.ball_size.to_string(), num(row.capacity)]);
            }
            let mut o = Outcome::new(t, &[]);
            o.summary = json!({
                "fit": scan.fit,
                "doubled_capacity": scan.doubled_capacity,
                "boundary_effect": scan.boundary_effect,
                "window_too_small": scan.window_too_small,
            });
            o
        }
        Experiment::Obstacle { scale, radius, n, kappa, obstacle } => {
            let obstacle = g.sites(obstacle)?;
            let packing = build_packing(&g.graph, *scale, g.base).map_err(&err)?;
            let op = GreenOperator::new(&g.graph, g.domain.clone()).map_err(&err)?;
            let r = good_obstacle_check(&op, &packing, &obstacle, *radius, *n, *kappa).map_err(&err)?;
            let mut t = Table::new(&["site", "vertex", "inside", "capacity", "good"]);
            for (i, &y) in packing.sites.iter().enumerate() {
                let inside = !r.capacities[i].is_nan();
                let cap = if inside { num(r.capacities[i]) } else { String::new() };
                t.push(vec![i.to_string(), y.to_string(), inside.to_string(), cap, r.good[i].to_string()]);
            }
            let mut o = Outcome::new(t, &[]);
            o.summary = json!({ "min_count": r.min_count, "verdict": r.verdict });
            o
        }
        Experiment::Avoidance { obstacles, start, target } => {
            let obstacles: Vec<Vec<usize>> = obstacles.iter().map(|o| g.sites(o)).collect::<Result<_>>()?;
            let (start, target) = (g.site(start)?, g.site(target)?);
            let mut t = Table::new(&["obstacle", "size", "estimate", "stderr", "n"]);
            if samples > 0 {
                let rows = avoidance_probe(&g.graph, &g.domain, &obstacles, start, target, samples, seed, workers)
                    .map_err(&err)?;
                for (i, e) in rows.iter().enumerate() {
                    let [e, s, n] = est(e);
                    t.push(vec![i.to_string(), obstacles[i].len().to_string(), e, s, n]);
                }
            }
            Outcome::new(t, &["walks"])
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Family, Site};

    #[test]
    fn zero_samples_give_empty_results_and_a_manifest() {
        let mut c = ExperimentConfig::default_for(Family::Perc);
        c.samples = 0;
        let out = run(&c, 1).unwrap();
        assert!(out.table.rows.is_empty());
        assert_eq!(out.manifest.rows, 0);
        assert_eq!(out.manifest.config, c);
        let text = serde_json::to_string(&out.manifest).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, out.manifest);
    }

    #[test]
    fn field_variance_matches_green_diagonal() {
        let mut c = ExperimentConfig::default_for(Family::Gff);
        c.samples = 4000;
        c.experiment = Experiment::FieldVariance { sites: vec![Site::Offset(vec![0, 0, 0]), Site::Index(0)] };
        let out = run(&c, 1).unwrap();
        assert_eq!(out.table.rows.len(), 2);
        for row in &out.table.rows {
            let z: f64 = row[4].parse().unwrap();
            assert!(z.abs() < 4.0, "{row:?}");
        }
    }

    #[test]
    fn module_errors_name_the_seed() {
        let mut c = ExperimentConfig::default_for(Family::Perc);
        c.experiment = Experiment::OneArm { levels: vec![0.0], radii: vec![100] };
        let e = run(&c, 1).err().unwrap();
        assert!(format!("{e:#}").contains("seed 1"), "{e:#}");
    }
}
