//! Randomised comparison of converged GaBP marginals against the dense
//! oracle.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::BenchError;
use crate::dynamic::Growth;
use crate::graph::{FactorGraph, HyperParams, Measurement};
use crate::occupancy::{Connectivity, VoxelGrid, VoxelIndex};
use crate::oracle;
use crate::solver::GabpSolver;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    /// Lattice with 10–30 % random obstacles and 5–20 measurements.
    Loopy,
    /// Single row of voxels; a tree, so GaBP is exact.
    Chain,
    /// Lattice with a sealed room and a sealed single voxel, measurements
    /// only outside them.
    Walled,
}

#[derive(Clone, Debug)]
pub struct OracleCheck {
    pub kind: InstanceKind,
    pub dims: [usize; 3],
    pub seeds: Vec<u64>,
    pub params: HyperParams,
    /// Mean tolerance relative to the largest oracle mean magnitude.
    pub mean_tol: f64,
    /// Allowed excess of a GaBP variance over the oracle variance, relative
    /// to the oracle variance.
    pub var_tol: f64,
    /// Residual floor for convergence.
    pub floor: f64,
    pub max_messages: u64,
}

impl OracleCheck {
    pub fn new(kind: InstanceKind, dims: [usize; 3], seeds: Vec<u64>) -> Self {
        Self {
            kind,
            dims,
            seeds,
            params: HyperParams::default(),
            mean_tol: if kind == InstanceKind::Chain { 1e-9 } else { 1e-6 },
            var_tol: 1e-9,
            floor: 1e-24,
            max_messages: 50_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceResult {
    pub kind: InstanceKind,
    pub seed: u64,
    pub dims: [usize; 3],
    pub nodes: usize,
    pub measurements: usize,
    pub messages: u64,
    /// Largest `|μ_gabp − μ_oracle|` over `max |μ_oracle|`.
    pub max_rel_mean_dev: f64,
    /// Largest `(var_gabp − var_oracle) / var_oracle`; positive means
    /// underconfident.
    pub max_var_excess: f64,
    /// Largest `|var_gabp − var_oracle| / var_oracle`.
    pub max_rel_var_dev: f64,
    pub passed: bool,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub results: Vec<InstanceResult>,
    pub passed: bool,
}

fn random_free(rng: &mut ChaCha8Rng, grid: &VoxelGrid, exclude: &HashSet<VoxelIndex>) -> Option<VoxelIndex> {
    let free: Vec<VoxelIndex> = grid.free_voxels().filter(|v| !exclude.contains(v)).collect();
    (!free.is_empty()).then(|| free[rng.random_range(0..free.len())])
}

/// Sealed regions of a walled instance: the room interior and the single
/// sealed voxel.
pub fn walled_regions(dims: [usize; 3]) -> (Vec<VoxelIndex>, VoxelIndex) {
    let [nx, ny, nz] = dims.map(|d| d as i64);
    let room = (1..=2)
        .flat_map(|x| (1..=2).map(move |y| VoxelIndex::new(x, y, 1)))
        .collect();
    (room, VoxelIndex::new(nx - 2, ny - 2, nz / 2))
}

/// Graph for one randomised instance.
pub fn random_instance(kind: InstanceKind, dims: [usize; 3], seed: u64, params: HyperParams) -> Result<FactorGraph, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = VoxelGrid::new(dims, 1.0, [0.0; 3])?;
    let mut sealed = HashSet::new();
    let n_meas = match kind {
        InstanceKind::Loopy => {
            let fill = rng.random_range(0.10..=0.30);
            let target = (fill * grid.len() as f64).round() as usize;
            while grid.occupied_count() < target {
                let v = grid.voxel_at(rng.random_range(0..grid.len()));
                grid.set_occupied(v, true)?;
            }
            rng.random_range(5..=20)
        }
        InstanceKind::Chain => rng.random_range(1..=3),
        InstanceKind::Walled => {
            if dims.iter().any(|&d| d < 5) {
                return Err(BenchError::Config("walled instances need every dimension >= 5".into()));
            }
            let (room, cell) = walled_regions(dims);
            for &v in room.iter().chain(std::iter::once(&cell)) {
                for &d in Connectivity::Six.offsets() {
                    let w = v.offset(d);
                    if grid.contains(w) && !room.contains(&w) && w != cell {
                        grid.set_occupied(w, true)?;
                    }
                }
                sealed.insert(v);
            }
            rng.random_range(5..=20)
        }
    };
    let mut g = FactorGraph::full(grid, params, Connectivity::Six)?;
    for k in 0..n_meas {
        let Some(v) = random_free(&mut rng, g.grid(), &sealed) else { break };
        let id = g.node_id(v).expect("free voxels have nodes");
        let value = rng.random_range(0.0..5.0);
        g.attach_measurement(id, Measurement::new(value, k as f64, v), n_meas as f64)?;
    }
    Ok(g)
}

fn run_instance(check: &OracleCheck, seed: u64) -> Result<InstanceResult, BenchError> {
    let graph = random_instance(check.kind, check.dims, seed, check.params)?;
    let measurements = graph.nodes().map(|(_, n)| n.measurements.len()).sum();
    let sys = oracle::assemble(&graph)?;
    let (om, ov) = oracle::solve_full(&sys)?;
    let mut solver = GabpSolver::new(graph, Growth::Static);
    let messages = solver.converge(check.floor, check.max_messages)?;

    let scale = om.amax().max(f64::MIN_POSITIVE);
    let mut res = InstanceResult {
        kind: check.kind,
        seed,
        dims: check.dims,
        nodes: solver.graph().node_count(),
        measurements,
        messages,
        max_rel_mean_dev: 0.0,
        max_var_excess: f64::NEG_INFINITY,
        max_rel_var_dev: 0.0,
        passed: true,
        failures: Vec::new(),
    };
    for (id, node) in solver.graph().nodes() {
        let r = sys.row(node.voxel).expect("node is in the system");
        let (m, v) = solver.marginal(id)?;
        let dm = (m - om[r]).abs() / scale;
        res.max_rel_mean_dev = res.max_rel_mean_dev.max(dm);
        res.max_var_excess = res.max_var_excess.max((v - ov[r]) / ov[r]);
        res.max_rel_var_dev = res.max_rel_var_dev.max((v - ov[r]).abs() / ov[r]);
    }
    if res.max_rel_mean_dev > check.mean_tol {
        res.failures.push(format!("mean deviation {:e} exceeds {:e}", res.max_rel_mean_dev, check.mean_tol));
    }
    match check.kind {
        InstanceKind::Chain => {
            if res.max_rel_var_dev > 1e-9 {
                res.failures.push(format!("tree variance deviation {:e}", res.max_rel_var_dev));
            }
        }
        _ => {
            if res.max_var_excess > check.var_tol {
                res.failures.push(format!("variance exceeds oracle by {:e} relative", res.max_var_excess));
            }
        }
    }
    if check.kind == InstanceKind::Walled {
        let p = *solver.graph().params();
        let (room, cell) = walled_regions(check.dims);
        for v in room.into_iter().chain(std::iter::once(cell)) {
            let id = solver.node_id(v)?;
            let (m, var) = solver.marginal(id)?;
            if m != p.z0 {
                res.failures.push(format!("sealed voxel {v} has mean {m}"));
            }
            if v == cell && var != p.sigma_d_sq {
                res.failures.push(format!("sealed voxel {v} has variance {var}"));
            }
        }
    }
    res.passed = res.failures.is_empty();
    Ok(res)
}

/// Runs every instance of every check, fanning instances out over
/// `threads` workers. An instance that errors counts as failed.
pub fn check_oracle(checks: &[OracleCheck], threads: usize) -> OracleReport {
    let jobs: Vec<(&OracleCheck, u64)> = checks.iter().flat_map(|c| c.seeds.iter().map(move |&s| (c, s))).collect();
    let threads = threads.max(1).min(jobs.len().max(1));
    let mut slots: Vec<Option<InstanceResult>> = vec![None; jobs.len()];
    std::thread::scope(|scope| {
        let chunks: Vec<_> = slots.chunks_mut(jobs.len().div_ceil(threads).max(1)).collect();
        let mut start = 0;
        for chunk in chunks {
            let my_jobs = &jobs[start..start + chunk.len()];
            start += chunk.len();
            scope.spawn(move || {
                for (slot, (check, seed)) in chunk.iter_mut().zip(my_jobs) {
                    *slot = Some(run_instance(check, *seed).unwrap_or_else(|e| InstanceResult {
                        kind: check.kind,
                        seed: *seed,
                        dims: check.dims,
                        nodes: 0,
                        measurements: 0,
                        messages: 0,
                        max_rel_mean_dev: f64::NAN,
                        max_var_excess: f64::NAN,
                        max_rel_var_dev: f64::NAN,
                        passed: false,
                        failures: vec![e.to_string()],
                    }));
                }
            });
        }
    });
    let results: Vec<InstanceResult> = slots.into_iter().map(|r| r.expect("every job ran")).collect();
    let passed = results.iter().all(|r| r.passed);
    OracleReport { results, passed }
}
