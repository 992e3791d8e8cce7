//! Experiment configuration files.
//!
//! A config is one JSON object:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "seed": 7,
//!   "samples": 2000,
//!   "graph": { "kind": "lattice", "dim": 3, "side": 16 },
//!   "experiment": { "kind": "one_arm", "levels": [0.0], "radii": [2, 4, 6] }
//! }
//! ```
//!
//! Vertices are given either as plain indices or, on lattices, as offsets from
//! the center (`[1, 0, 0]`). An edge-list graph names its file, the domain `U`
//! (vertices outside are killed) and a base vertex.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use cablelab_core::graph::{build_lattice_box, load_graph, DomainMask, WeightedGraph};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub samples: u64,
    pub graph: GraphSpec,
    pub experiment: Experiment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSpec {
    /// `s^d` box with a Dirichlet halo; base at the center.
    Lattice { dim: usize, side: usize },
    EdgeList { path: PathBuf, domain: Vec<usize>, base: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Site {
    Index(usize),
    Offset(Vec<i64>),
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Index(i) => write!(f, "{i}"),
            Site::Offset(o) => write!(f, "{o:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// Empirical `Var φ_x` against `g_U(x, x)`.
    FieldVariance { sites: Vec<Site> },
    /// `P(x ↔ y in E^{≥0})` against `(1/π) arcsin` of the Green ratio.
    Arcsin { pairs: Vec<(Site, Site)> },
    OneArm { levels: Vec<f64>, radii: Vec<usize> },
    TwoPoint { levels: Vec<f64>, x: Site, y: Site },
    CapacityTail { level: f64, thresholds: Vec<f64>, tolerance: f64 },
    Monotone { levels: Vec<f64>, radii: Vec<usize>, pairs: Vec<(Site, Site)> },
    LoopCounts { alpha: f64, max_length: usize, tail_fraction: f64 },
    LoopCrossing { alpha: f64, tail_fraction: f64, configs: Vec<(Vec<Site>, Vec<Site>)> },
    Restriction { alpha: f64, n_max: usize, sub: Vec<Site> },
    LoopConnection { alpha: f64, tail_fraction: f64, pairs: Vec<(Site, Site)> },
    /// The graph side is the halo side; lattices only.
    Vacancy { window_side: usize, radii: Vec<usize>, levels: Vec<f64> },
    CapacityScaling { radii: Vec<usize>, check_doubling: bool },
    Obstacle { scale: usize, radius: usize, n: usize, kappa: f64, obstacle: Vec<Site> },
    Avoidance { obstacles: Vec<Vec<Site>>, start: Site, target: Site },
}

/// CLI subcommand families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Gff,
    Perc,
    Loops,
    Ri,
    Cap,
    Obstacle,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gff => "gff",
            Family::Perc => "perc",
            Family::Loops => "loops",
            Family::Ri => "ri",
            Family::Cap => "cap",
            Family::Obstacle => "obstacle",
        }
    }
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::FieldVariance { .. } => "field_variance",
            Experiment::Arcsin { .. } => "arcsin",
            Experiment::OneArm { .. } => "one_arm",
            Experiment::TwoPoint { .. } => "two_point",
            Experiment::CapacityTail { .. } => "capacity_tail",
            Experiment::Monotone { .. } => "monotone",
            Experiment::LoopCounts { .. } => "loop_counts",
            Experiment::LoopCrossing { .. } => "loop_crossing",
            Experiment::Restriction { .. } => "restriction",
            Experiment::LoopConnection { .. } => "loop_connection",
            Experiment::Vacancy { .. } => "vacancy",
            Experiment::CapacityScaling { .. } => "capacity_scaling",
            Experiment::Obstacle { .. } => "obstacle",
            Experiment::Avoidance { .. } => "avoidance",
        }
    }

    pub fn family(&self) -> Family {
        match self {
            Experiment::FieldVariance { .. } | Experiment::Arcsin { .. } => Family::Gff,
            Experiment::OneArm { .. }
            | Experiment::TwoPoint { .. }
            | Experiment::CapacityTail { .. }
            | Experiment::Monotone { .. } => Family::Perc,
            Experiment::LoopCounts { .. }
            | Experiment::LoopCrossing { .. }
            | Experiment::Restriction { .. }
            | Experiment::LoopConnection { .. } => Family::Loops,
            Experiment::Vacancy { .. } => Family::Ri,
            Experiment::CapacityScaling { .. } => Family::Cap,
            Experiment::Obstacle { .. } | Experiment::Avoidance { .. } => Family::Obstacle,
        }
    }
}

impl GraphSpec {
    pub fn build(&self) -> Result<ResolvedGraph> {
        match self {
            GraphSpec::Lattice { dim, side } => {
                let (graph, domain) = build_lattice_box(*dim, *side)?;
                let base = graph.lattice().expect("lattice box").center();
                Ok(ResolvedGraph { graph, domain, base })
            }
            GraphSpec::EdgeList { path, domain, base } => {
                let graph = load_graph(path).with_context(|| format!("loading {}", path.display()))?;
                let domain = DomainMask::new(&graph, domain)?;
                domain.require(*base)?;
                Ok(ResolvedGraph { graph, domain, base: *base })
            }
        }
    }
}

pub struct ResolvedGraph {
    pub graph: WeightedGraph,
    pub domain: DomainMask,
    pub base: usize,
}

impl ResolvedGraph {
    pub fn site(&self, s: &Site) -> Result<usize> {
        let x = match s {
            Site::Index(i) => *i,
            Site::Offset(o) => {
                let shape = self.graph.lattice().context("offset sites need a lattice graph")?;
                ensure!(o.len() == shape.dim, "offset {o:?} has {} coordinates, the lattice has {}", o.len(), shape.dim);
                shape.offset_from_center(o).with_context(|| format!("offset {o:?} leaves the box"))?
            }
        };
        self.graph.check_vertex(x)?;
        Ok(x)
    }

    pub fn sites(&self, s: &[Site]) -> Result<Vec<usize>> {
        s.iter().map(|s| self.site(s)).collect()
    }

    pub fn pairs(&self, p: &[(Site, Site)]) -> Result<Vec<(usize, usize)>> {
        p.iter().map(|(a, b)| Ok((self.site(a)?, self.site(b)?))).collect()
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).context("parsing experiment config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version);
        }
        if let GraphSpec::EdgeList { path, .. } = &self.graph {
            ensure!(path.exists(), "edge list {} does not exist", path.display());
        }
        let lattice_only = matches!(self.experiment, Experiment::Vacancy { .. } | Experiment::CapacityScaling { .. });
        if lattice_only && !matches!(self.graph, GraphSpec::Lattice { .. }) {
            bail!("{} runs on lattice graphs only", self.experiment.kind());
        }
        Ok(())
    }

    /// Small default experiment for each CLI family.
    pub fn default_for(family: Family) -> Self {
        let lattice = |dim, side| GraphSpec::Lattice { dim, side };
        let off = |v: [i64; 3]| Site::Offset(v.to_vec());
        let off2 = |v: [i64; 2]| Site::Offset(v.to_vec());
        let (samples, graph, experiment) = match family {
            Family::Gff => (
                4000,
                lattice(3, 12),
                Experiment::Arcsin { pairs: (1..=4).map(|d| (off([0, 0, 0]), off([d, 0, 0]))).collect() },
            ),
            Family::Perc => (2000, lattice(3, 24), Experiment::OneArm { levels: vec![0.0], radii: vec![2, 4, 6, 8] }),
            Family::Loops => (
                5000,
                lattice(2, 5),
                Experiment::LoopCounts { alpha: 0.5, max_length: 8, tail_fraction: 1e-3 },
            ),
            Family::Ri => (
                4000,
                lattice(3, 17),
                Experiment::Vacancy { window_side: 3, radii: vec![0, 1], levels: vec![0.02, 0.04, 0.08] },
            ),
            Family::Cap => (0, lattice(3, 32), Experiment::CapacityScaling { radii: vec![1, 2, 3, 4], check_doubling: false }),
            Family::Obstacle => (
                0,
                lattice(2, 9),
                Experiment::Obstacle {
                    scale: 2,
                    radius: 3,
                    n: 1,
                    kappa: 1.0,
                    obstacle: vec![off2([2, 0]), off2([-2, 0]), off2([0, 2]), off2([0, -2])],
                },
            ),
        };
        Self { schema_version: SCHEMA_VERSION, seed: 1, samples, graph, experiment }
    }
}
