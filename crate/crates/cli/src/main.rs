//! `gdm`: simulate sweeps, build maps from measurement logs, run the
//! benchmark protocol and the oracle suite. Each command prints one JSON
//! object per line on stdout; logs go to stderr (`RUST_LOG`).

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gdm_core::bench::{
    check_oracle, map_from_log, read_measurement_log, run_benchmark, simulate, write_measurement_log, write_rows, BenchOptions,
    InstanceKind, OracleCheck, Scenario, Variant,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "gdm", version, about = "Incremental gas distribution mapping with Gaussian belief propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fly the scenario's plan with an instant consumer and write the
    /// measurement log.
    Simulate(ScenarioArgs),
    /// Build a map from a measurement log and write it as CSV with a TOML
    /// header sidecar.
    Map {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Measurement log CSV (t,x,y,z,value).
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_parser = parse_variant, default_value = "gabp-dynamic")]
        variant: Variant,
    },
    /// Run the gated benchmark protocol for one variant or all of them.
    Bench {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Variant to run; all three when omitted.
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
    },
    /// Compare converged GaBP marginals with the dense solve on random
    /// instances. Exits nonzero when any instance fails.
    Check {
        /// Instances per family.
        #[arg(long, default_value_t = 8)]
        instances: u64,
        /// First instance seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the wildfire threshold.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Overrides the voxel edge length in metres.
    #[arg(long)]
    resolution: Option<f64>,
    /// Slices the scenario at its first sweep height and uses 4-connectivity.
    #[arg(long = "2d")]
    two_d: bool,
    /// Directory for output files; created when missing.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

impl ScenarioArgs {
    fn load(&self) -> Result<Scenario> {
        let mut s = Scenario::load(&self.scenario).with_context(|| format!("loading {}", self.scenario.display()))?;
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        if let Some(eps) = self.epsilon {
            s.params.epsilon = eps;
            s.params.validate()?;
        }
        if let Some(res) = self.resolution {
            if s.grid.occupancy_file.is_some() {
                bail!("--resolution does not apply to a scenario with an occupancy file");
            }
            if !(res > 0.0 && res.is_finite()) {
                bail!("--resolution must be positive, got {res}");
            }
            s.grid.resolution = res;
        }
        if self.two_d && !s.two_d {
            s = s.flattened()?;
        }
        std::fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(s)
    }

    fn out(&self, s: &Scenario, suffix: &str) -> PathBuf {
        self.out_dir.join(format!("{}_{suffix}", s.name))
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: gdm_core::bench::BenchError| e.to_string())
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn create(path: &Path) -> Result<File> {
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate(args) => {
            let s = args.load()?;
            let (log, rows) = simulate(&s)?;
            let path = args.out(&s, "measurements.csv");
            write_measurement_log(&rows, create(&path)?)?;
            emit(json!({
                "command": "simulate",
                "scenario": s.name,
                "seed": s.seed,
                "measurements": rows.len(),
                "duration_s": log.end_time,
                "log": path,
            }));
        }
        Command::Map { scenario: args, log, variant } => {
            let s = args.load()?;
            let rows = read_measurement_log(File::open(&log).with_context(|| format!("opening {}", log.display()))?)?;
            let map = map_from_log(&s, variant, &rows)?;
            let path = args.out(&s, &format!("{variant}_map.csv"));
            map.save(&path)?;
            emit(json!({
                "command": "map",
                "scenario": s.name,
                "variant": variant,
                "measurements": rows.len(),
                "nodes": map.header.nodes,
                "map": path,
                "header": gdm_core::bench::MapExport::header_path(&path),
            }));
        }
        Command::Bench { scenario: args, variant } => {
            let s = args.load()?;
            let variants = match variant {
                Some(v) => vec![v],
                None => Variant::ALL.to_vec(),
            };
            for v in variants {
                log::info!("running {v} on {}", s.name);
                let r = run_benchmark(&s, v, BenchOptions::default())?;
                write_rows(&r.series, create(&args.out(&s, &format!("{v}_series.csv")))?)?;
                write_rows(&r.insertions, create(&args.out(&s, &format!("{v}_insertions.csv")))?)?;
                r.map.save(&args.out(&s, &format!("{v}_map.csv")))?;
                let stats = serde_json::to_value(&r.stats)?;
                std::fs::write(args.out(&s, &format!("{v}_stats.json")), serde_json::to_string_pretty(&stats)?)?;
                emit(json!({ "command": "bench", "stats": stats }));
            }
        }
        Command::Check { instances, seed, threads } => {
            let seeds: Vec<u64> = (seed..seed + instances).collect();
            let checks = [
                OracleCheck::new(InstanceKind::Chain, [40, 1, 1], seeds.clone()),
                OracleCheck::new(InstanceKind::Loopy, [6, 6, 3], seeds.clone()),
                OracleCheck::new(InstanceKind::Walled, [7, 7, 5], seeds),
            ];
            let threads = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let report = check_oracle(&checks, threads);
            for r in &report.results {
                emit(json!({ "command": "check", "instance": r }));
            }
            let failed = report.results.iter().filter(|r| !r.passed).count();
            emit(json!({
                "command": "check",
                "instances": report.results.len(),
                "failed": failed,
                "passed": report.passed,
            }));
            return Ok(report.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
