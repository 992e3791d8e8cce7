use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cablelab_core::stats::fit_exponent;
use clap::{Args, Parser, Subcommand};
use explab::acceptance::{evaluate, Budget, CRITERIA};
use explab::config::{ExperimentConfig, Family};
use explab::run::{run, write_outputs};

#[derive(Parser)]
#[command(name = "cablelab", version, about = "Level-set percolation, loop soup and interlacement experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); each family has a small default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory for results.csv and manifest.json.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Field variance and arcsin checks.
    Gff,
    /// One-arm, two-point, capacity tail and coupling experiments.
    Perc,
    /// Loop soup count, crossing, restriction and connection experiments.
    Loops,
    /// Interlacement vacancy.
    Ri,
    /// Ball-capacity scaling.
    Cap,
    /// Good-obstacle check and avoidance probe.
    Obstacle,
    /// Any experiment, whatever its family.
    Run,
    /// Log-log fit of a CSV with columns `x,p`.
    Fit { input: PathBuf },
    /// Runs the acceptance suite.
    Accept {
        /// Comma-separated criterion numbers; all by default.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
}

fn workers(common: &Common) -> usize {
    common.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn experiment(common: &Common, family: Option<Family>) -> Result<()> {
    let mut config = match (&common.config, family) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(f)) => ExperimentConfig::default_for(f),
        (None, None) => bail!("`run` needs --config"),
    };
    if let Some(f) = family {
        let got = config.experiment.family();
        if got != f {
            bail!("experiment `{}` belongs to `{}`, not `{}`", config.experiment.kind(), got.name(), f.name());
        }
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let out = run(&config, workers(common))?;
    write_outputs(&common.out, &out)?;
    println!(
        "{}: {} rows in {:.2}s -> {}",
        config.experiment.kind(),
        out.table.rows.len(),
        out.manifest.wall_clock_seconds,
        common.out.display()
    );
    Ok(())
}

fn fit(input: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(input).with_context(|| format!("reading {}", input.display()))?;
    let header = reader.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name).with_context(|| format!("no `{name}` column"));
    let (ix, ip) = (col("x")?, col("p")?);
    let mut points = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        points.push((rec[ix].trim().parse::<f64>()?, rec[ip].trim().parse::<f64>()?));
    }
    let f = fit_exponent(&points)?;
    println!("slope {} intercept {} stderr {} band [{}, {}] used {} excluded {:?}", f.slope, f.intercept, f.slope_stderr, f.band.0, f.band.1, f.used, f.excluded);
    Ok(())
}

fn accept(common: &Common, only: &[u8]) -> Result<bool> {
    let seed = common.seed.unwrap_or(1);
    let ids: Vec<u8> = if only.is_empty() { CRITERIA.iter().map(|c| c.0).collect() } else { only.to_vec() };
    let budget = Budget::full();
    let mut verdicts = Vec::new();
    for id in ids {
        let v = evaluate(id, seed, workers(common), &budget);
        println!("{}", v.line());
        verdicts.push(v);
    }
    std::fs::create_dir_all(&common.out)?;
    std::fs::write(common.out.join("acceptance.json"), serde_json::to_string_pretty(&verdicts)? + "\n")?;
    Ok(verdicts.iter().all(|v| v.pass))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = &cli.common;
    let result = match &cli.command {
        Command::Gff => experiment(c, Some(Family::Gff)),
        Command::Perc => experiment(c, Some(Family::Perc)),
        Command::Loops => experiment(c, Some(Family::Loops)),
        Command::Ri => experiment(c, Some(Family::Ri)),
        Command::Cap => experiment(c, Some(Family::Cap)),
        Command::Obstacle => experiment(c, Some(Family::Obstacle)),
        Command::Run => experiment(c, None),
        Command::Fit { input } => fit(input),
        Command::Accept { only } => match accept(c, only) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
