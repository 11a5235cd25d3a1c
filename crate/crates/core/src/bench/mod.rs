//! Benchmark protocol: gated sweeps, RMSE over time, run statistics and map
//! export for the three solver variants.

mod check;
mod io;
mod scenario;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

pub use check::{check_oracle, random_instance, InstanceKind, InstanceResult, OracleCheck, OracleReport};
pub use io::{
    read_measurement_log, write_measurement_log, write_rows, InsertionRow, LogRow, MapExport, MapHeader, MapRow,
};
pub use scenario::{EvalSpec, GridSpec, PlanSpec, Scenario, Timing, WorldBox};

use crate::dynamic::Growth;
use crate::graph::{FactorGraph, GraphError, Measurement};
use crate::occupancy::{OccupancyError, VoxelGrid};
use crate::oracle::{self, OracleError, DENSE_CAP};
use crate::plume::{run_sweep, GroundTruthField, MeasurementSink, PlumeError, Sensor, SweepLog};
use crate::solver::{GabpSolver, Schedule, SolverError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown variant {0:?} (expected dense-direct, gabp-full or gabp-dynamic)")]
    UnknownVariant(String),
    #[error("threshold excludes all cells")]
    EmptyPlume,
    #[error("dense system of {nodes} nodes exceeds the cap of {cap}")]
    TooLarge { nodes: usize, cap: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Occupancy(#[from] OccupancyError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Plume(#[from] PlumeError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Variant {
    #[serde(rename = "dense-direct")]
    DenseDirect,
    #[serde(rename = "gabp-full")]
    GabpFull,
    #[serde(rename = "gabp-dynamic")]
    GabpDynamic,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::DenseDirect, Variant::GabpFull, Variant::GabpDynamic];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::DenseDirect => "dense-direct",
            Variant::GabpFull => "gabp-full",
            Variant::GabpDynamic => "gabp-dynamic",
        })
    }
}

impl FromStr for Variant {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense-direct" => Ok(Variant::DenseDirect),
            "gabp-full" => Ok(Variant::GabpFull),
            "gabp-dynamic" => Ok(Variant::GabpDynamic),
            other => Err(BenchError::UnknownVariant(other.to_string())),
        }
    }
}

/// Root-mean-square error over the plume region `{i : truth_i > z_thresh}`.
/// Both slices are indexed alike.
pub fn rmse_plume(estimates: &[f64], truth: &[f64], z_thresh: f64) -> Result<f64, BenchError> {
    let mut n = 0usize;
    let mut sum = 0.0;
    for (e, t) in estimates.iter().zip(truth) {
        if *t > z_thresh {
            n += 1;
            sum += (e - t) * (e - t);
        }
    }
    if n == 0 {
        return Err(BenchError::EmptyPlume);
    }
    Ok((sum / n as f64).sqrt())
}

/// Linear indices of the plume region.
pub fn plume_region(truth: &[f64], z_thresh: f64) -> Vec<usize> {
    truth.iter().enumerate().filter(|(_, &t)| t > z_thresh).map(|(i, _)| i).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SeriesPoint {
    /// Simulated seconds.
    pub t: f64,
    pub rmse: f64,
    pub states: usize,
    pub messages: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunStats {
    pub scenario: String,
    pub variant: Variant,
    pub seed: u64,
    /// Simulated duration of the sweep in seconds.
    pub total_runtime: f64,
    /// Mean simulated resolve time per processed measurement, seconds.
    pub avg_resolve_per_measurement: f64,
    pub processed_measurements: usize,
    pub dropped_measurements: usize,
    pub final_states: usize,
    /// Node count averaged over the RMSE sampling instants.
    pub mean_states: f64,
    pub converged_rmse: f64,
    pub total_messages: u64,
    pub wildfire_messages: u64,
    pub residual_messages: u64,
    /// Largest pending message residual when the sweep ends, before the
    /// final convergence phase; zero for the dense variant.
    pub sweep_max_residual: f64,
    /// Wall-clock fields; excluded from determinism checks.
    pub wall_total_s: f64,
    pub wall_mean_resolve_ms: f64,
    pub wall_median_resolve_ms: f64,
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub stats: RunStats,
    pub series: Vec<SeriesPoint>,
    pub map: MapExport,
    pub log: SweepLog,
    pub insertions: Vec<InsertionRow>,
}

#[derive(Clone, Copy, Debug)]
pub struct BenchOptions {
    pub schedule: Schedule,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            schedule: Schedule::Hybrid,
        }
    }
}

/// Solver state behind one benchmark variant. One lives per run, so the
/// variant size gap does not matter.
#[allow(clippy::large_enum_variant)]
pub enum Backend {
    Gabp { solver: GabpSolver, schedule: Schedule },
    Dense { graph: FactorGraph, means: Vec<f64>, variances: Vec<f64>, dirty: bool },
}

impl Backend {
    pub fn new(variant: Variant, scenario: &Scenario, grid: VoxelGrid, schedule: Schedule) -> Result<Self, BenchError> {
        let conn = scenario.connectivity();
        let params = scenario.params;
        Ok(match variant {
            Variant::GabpDynamic => Backend::Gabp {
                solver: GabpSolver::new(FactorGraph::new(grid, params, conn)?, Growth::Dynamic),
                schedule,
            },
            Variant::GabpFull => Backend::Gabp {
                solver: GabpSolver::new(FactorGraph::full(grid, params, conn)?, Growth::Static),
                schedule,
            },
            Variant::DenseDirect => {
                let graph = FactorGraph::full(grid, params, conn)?;
                if graph.node_count() > DENSE_CAP {
                    return Err(BenchError::TooLarge {
                        nodes: graph.node_count(),
                        cap: DENSE_CAP,
                    });
                }
                let n = graph.node_count();
                Backend::Dense {
                    graph,
                    means: vec![params.z0; n],
                    variances: vec![params.sigma_d_sq; n],
                    dirty: true,
                }
            }
        })
    }

    pub fn graph(&self) -> &FactorGraph {
        match self {
            Backend::Gabp { solver, .. } => solver.graph(),
            Backend::Dense { graph, .. } => graph,
        }
    }

    pub fn messages(&self) -> u64 {
        match self {
            Backend::Gabp { solver, .. } => solver.counters().total(),
            Backend::Dense { .. } => 0,
        }
    }

    fn solve_dense(&mut self) -> Result<(), BenchError> {
        if let Backend::Dense { graph, means, variances, dirty } = self {
            if *dirty {
                let sys = oracle::assemble(graph)?;
                let (m, v) = oracle::solve_full(&sys)?;
                for (id, node) in graph.nodes() {
                    let r = sys.row(node.voxel).expect("node is in the system");
                    means[id.index()] = m[r];
                    variances[id.index()] = v[r];
                }
                *dirty = false;
            }
        }
        Ok(())
    }

    /// Inserts and resolves `m`. Returns the simulated resolve time and the
    /// insertion row.
    pub fn insert(&mut self, m: Measurement, timing: &Timing) -> Result<(f64, InsertionRow), BenchError> {
        let wall = Instant::now();
        let mut row = InsertionRow {
            t: m.timestamp,
            ix: m.voxel.ix,
            iy: m.voxel.iy,
            iz: m.voxel.iz,
            nodes_created: 0,
            edges_created: 0,
            messages_sent: 0,
            resolve_s: 0.0,
            resolve_time_ns: 0,
        };
        let resolve_s = match self {
            Backend::Gabp { solver, .. } => {
                let r = solver.insert_and_resolve(m)?;
                row.nodes_created = r.nodes_created;
                row.edges_created = r.edges_created;
                row.messages_sent = r.messages_sent;
                r.messages_sent as f64 * timing.message_cost_s
            }
            Backend::Dense { graph, dirty, .. } => {
                let id = graph.node_id(m.voxel).ok_or(GraphError::InsideObstacle(m.voxel))?;
                let now = m.timestamp.max(graph.clock());
                graph.attach_measurement(id, m, now)?;
                *dirty = true;
                let n = graph.node_count() as f64;
                timing.dense_resolve_s.unwrap_or(n * n * n / 3.0 * timing.dense_flop_s)
            }
        };
        self.solve_dense()?;
        row.resolve_s = resolve_s;
        row.resolve_time_ns = wall.elapsed().as_nanos() as u64;
        Ok((resolve_s, row))
    }

    /// Spends up to `budget` messages on background propagation.
    pub fn background(&mut self, budget: u64) -> Result<(), BenchError> {
        if let Backend::Gabp { solver, schedule } = self {
            if budget > 0 {
                solver.run(*schedule, Some(budget))?;
            }
        }
        Ok(())
    }

    /// Current marginal mean at each listed linear grid index; voxels without
    /// a node report `z0`.
    pub fn means_at(&self, indices: &[usize]) -> Result<Vec<f64>, BenchError> {
        let g = self.graph();
        let z0 = g.params().z0;
        indices
            .iter()
            .map(|&i| {
                let v = g.grid().voxel_at(i);
                match (self, g.node_id(v)) {
                    (_, None) => Ok(z0),
                    (Backend::Gabp { solver, .. }, Some(id)) => Ok(solver.marginal(id)?.0),
                    (Backend::Dense { means, .. }, Some(id)) => Ok(means[id.index()]),
                }
            })
            .collect()
    }

    /// Final propagation phase with the given message budget.
    pub fn finish(&mut self, budget: u64) -> Result<(), BenchError> {
        match self {
            Backend::Gabp { solver, schedule } => {
                solver.run(*schedule, Some(budget))?;
            }
            Backend::Dense { .. } => self.solve_dense()?,
        }
        Ok(())
    }

    pub fn map_rows(&self) -> Result<Vec<MapRow>, BenchError> {
        let g = self.graph();
        let mut rows = g
            .nodes()
            .map(|(id, n)| {
                let (mean, variance) = match self {
                    Backend::Gabp { solver, .. } => solver.marginal(id)?,
                    Backend::Dense { means, variances, .. } => (means[id.index()], variances[id.index()]),
                };
                Ok(MapRow {
                    ix: n.voxel.ix,
                    iy: n.voxel.iy,
                    iz: n.voxel.iz,
                    mean,
                    variance,
                })
            })
            .collect::<Result<Vec<_>, BenchError>>()?;
        rows.sort_by_key(|r| r.voxel());
        Ok(rows)
    }
}

/// Gated sink that samples RMSE on the simulated clock.
struct Recorder<'a> {
    backend: Backend,
    timing: Timing,
    plume: &'a [usize],
    plume_truth: Vec<f64>,
    interval: f64,
    next_snap: u64,
    resolved_at: f64,
    stale: Option<SeriesPoint>,
    work_clock: f64,
    series: Vec<SeriesPoint>,
    insertions: Vec<InsertionRow>,
}

impl Recorder<'_> {
    fn snapshot(&self, t: f64) -> Result<SeriesPoint, BenchError> {
        let est = self.backend.means_at(self.plume)?;
        Ok(SeriesPoint {
            t,
            rmse: rmse_plume(&est, &self.plume_truth, f64::NEG_INFINITY)?,
            states: self.backend.graph().node_count(),
            messages: self.backend.messages(),
        })
    }

    /// Background work for the idle stretch up to `t`, on the message clock.
    fn work_until(&mut self, t: f64) -> Result<(), BenchError> {
        if t <= self.work_clock {
            return Ok(());
        }
        let budget = ((t - self.work_clock) / self.timing.message_cost_s).floor() as u64;
        self.backend.background(budget)?;
        self.work_clock += budget as f64 * self.timing.message_cost_s;
        Ok(())
    }

    fn advance(&mut self, t: f64) -> Result<(), BenchError> {
        loop {
            let at = self.next_snap as f64 * self.interval;
            if at > t {
                break;
            }
            let point = match self.stale {
                Some(p) if at < self.resolved_at => SeriesPoint { t: at, ..p },
                _ => {
                    self.work_until(at)?;
                    self.snapshot(at)?
                }
            };
            self.series.push(point);
            self.next_snap += 1;
        }
        if t >= self.resolved_at {
            self.work_until(t)?;
        }
        Ok(())
    }
}

impl MeasurementSink for Recorder<'_> {
    fn insert(&mut self, m: Measurement) -> Result<f64, PlumeError> {
        let sink_err = |e: BenchError| PlumeError::Sink(e.to_string());
        self.stale = Some(self.snapshot(m.timestamp).map_err(sink_err)?);
        let (resolve_s, row) = self.backend.insert(m, &self.timing).map_err(sink_err)?;
        self.insertions.push(row);
        self.resolved_at = m.timestamp + resolve_s;
        self.work_clock = self.resolved_at;
        Ok(resolve_s)
    }

    fn idle_until(&mut self, t: f64) -> Result<(), PlumeError> {
        self.advance(t).map_err(|e| PlumeError::Sink(e.to_string()))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs the full protocol for one variant: gated sweep, periodic RMSE,
/// final propagation, statistics and map export.
pub fn run_benchmark(scenario: &Scenario, variant: Variant, opts: BenchOptions) -> Result<BenchResult, BenchError> {
    let wall = Instant::now();
    let field = scenario.build_field()?;
    let truth = field.voxel_values(None);
    let z_thresh = scenario.eval.z_thresh;
    let plume = plume_region(&truth, z_thresh);
    if plume.is_empty() {
        return Err(BenchError::EmptyPlume);
    }
    let backend = Backend::new(variant, scenario, field.grid.clone(), opts.schedule)?;
    let mut rec = Recorder {
        backend,
        timing: scenario.timing,
        plume: &plume,
        plume_truth: plume.iter().map(|&i| truth[i]).collect(),
        interval: scenario.eval.rmse_interval,
        next_snap: 0,
        resolved_at: 0.0,
        stale: None,
        work_clock: 0.0,
        series: Vec::new(),
        insertions: Vec::new(),
    };
    let mut sensor = Sensor::new(scenario.sensor, scenario.seed);
    let plan = scenario.build_plan();
    let log = run_sweep(&plan, &field, &mut sensor, &mut rec)?;
    let sweep_max_residual = match &mut rec.backend {
        Backend::Gabp { solver, .. } => solver.max_residual()?,
        Backend::Dense { .. } => 0.0,
    };
    rec.backend.finish(scenario.eval.converge_budget)?;
    let final_est = rec.backend.means_at(&plume)?;
    let converged_rmse = rmse_plume(&final_est, &rec.plume_truth, f64::NEG_INFINITY)?;

    let graph = rec.backend.graph();
    let mean_states = if rec.series.is_empty() {
        graph.node_count() as f64
    } else {
        rec.series.iter().map(|p| p.states as f64).sum::<f64>() / rec.series.len() as f64
    };
    let processed = rec.insertions.len();
    let (wf, rs) = match &rec.backend {
        Backend::Gabp { solver, .. } => (solver.counters().wildfire, solver.counters().residual),
        Backend::Dense { .. } => (0, 0),
    };
    let wall_ms: Vec<f64> = rec.insertions.iter().map(|r| r.resolve_time_ns as f64 / 1e6).collect();
    let stats = RunStats {
        scenario: scenario.name.clone(),
        variant,
        seed: scenario.seed,
        total_runtime: log.end_time,
        avg_resolve_per_measurement: if processed > 0 {
            rec.insertions.iter().map(|r| r.resolve_s).sum::<f64>() / processed as f64
        } else {
            0.0
        },
        processed_measurements: processed,
        dropped_measurements: log.dropped(),
        final_states: graph.node_count(),
        mean_states,
        converged_rmse,
        total_messages: rec.backend.messages(),
        wildfire_messages: wf,
        residual_messages: rs,
        sweep_max_residual,
        wall_total_s: wall.elapsed().as_secs_f64(),
        wall_mean_resolve_ms: if processed > 0 { wall_ms.iter().sum::<f64>() / processed as f64 } else { 0.0 },
        wall_median_resolve_ms: median(wall_ms),
    };
    let grid = graph.grid();
    let map = MapExport {
        header: MapHeader {
            scenario: scenario.name.clone(),
            variant: variant.to_string(),
            dims: grid.dims(),
            resolution: grid.resolution(),
            origin: grid.origin(),
            params: *graph.params(),
            timestamp: log.end_time,
            nodes: graph.node_count(),
        },
        rows: rec.backend.map_rows()?,
    };
    Ok(BenchResult {
        stats,
        series: rec.series,
        map,
        log,
        insertions: rec.insertions,
    })
}

/// Sweep with an instantly resolving consumer; every sample is kept.
pub fn simulate(scenario: &Scenario) -> Result<(SweepLog, Vec<LogRow>), BenchError> {
    let field: GroundTruthField = scenario.build_field()?;
    let mut sensor = Sensor::new(scenario.sensor, scenario.seed);
    let log = run_sweep(&scenario.build_plan(), &field, &mut sensor, &mut crate::plume::InstantSink)?;
    let rows = log
        .accepted()
        .map(|e| LogRow {
            t: e.measurement.timestamp,
            x: e.position[0],
            y: e.position[1],
            z: e.position[2],
            value: e.measurement.value,
        })
        .collect();
    Ok((log, rows))
}

/// Builds a map from a measurement log without gating, then runs the final
/// propagation phase. Rows outside the grid or inside obstacles are skipped.
pub fn map_from_log(scenario: &Scenario, variant: Variant, rows: &[LogRow]) -> Result<MapExport, BenchError> {
    let grid = scenario.build_grid()?;
    let mut backend = Backend::new(variant, scenario, grid.clone(), Schedule::Hybrid)?;
    let mut last_t = f64::NEG_INFINITY;
    for r in rows {
        let Ok(v) = grid.voxel_of([r.x, r.y, r.z]) else {
            log::warn!("skipping log row outside the grid at t={}", r.t);
            continue;
        };
        if !grid.is_free(v) {
            log::warn!("skipping log row inside an obstacle at t={}", r.t);
            continue;
        }
        last_t = last_t.max(r.t);
        backend.insert(Measurement::new(r.value, r.t, v), &scenario.timing)?;
    }
    backend.finish(scenario.eval.converge_budget)?;
    let g = backend.graph();
    Ok(MapExport {
        header: MapHeader {
            scenario: scenario.name.clone(),
            variant: variant.to_string(),
            dims: grid.dims(),
            resolution: grid.resolution(),
            origin: grid.origin(),
            params: *g.params(),
            timestamp: if last_t.is_finite() { last_t } else { 0.0 },
            nodes: g.node_count(),
        },
        rows: backend.map_rows()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse_plume(&[1.0, 2.0], &[1.0, 2.0], 0.1).unwrap(), 0.0);
        // one above-threshold cell of value 0.7 against all-prior estimates
        assert_eq!(rmse_plume(&[0.0, 0.0, 0.0], &[0.05, 0.7, 0.0], 0.1).unwrap(), 0.7);
        assert!(matches!(rmse_plume(&[0.0], &[0.05], 0.1), Err(BenchError::EmptyPlume)));
        assert_eq!(EvalSpec::default().z_thresh, 0.1);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("gmrf".parse::<Variant>(), Err(BenchError::UnknownVariant(_))));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(vec![]), 0.0);
    }
}
