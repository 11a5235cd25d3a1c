//! Scenario files.
//!
//! A scenario is a TOML document describing the world (grid size in metres,
//! obstacles as world-space boxes), the gas sources, the sensor, the flight
//! plan, model hyperparameters and the timing model. Everything except
//! `name`, `grid`, `sources` and `plan` has defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::graph::HyperParams;
use crate::occupancy::{Connectivity, VoxelGrid};
use crate::plume::{Dispersion, GroundTruthField, SensorModel, Source, SweepPlan};

/// Obstacle as a world-space box; every voxel whose centre lies inside
/// (bounds inclusive) is occupied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// World size in metres; dims are `ceil(size / resolution)`.
    pub size: [f64; 3],
    #[serde(default = "one")]
    pub resolution: f64,
    #[serde(default)]
    pub origin: [f64; 3],
    #[serde(default)]
    pub obstacles: Vec<WorldBox>,
    /// Occupancy file in `OCCGRID v1` format, relative to the scenario file.
    /// Replaces `size`, `resolution` and `origin` when given.
    #[serde(default)]
    pub occupancy_file: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlanSpec {
    Waypoints {
        waypoints: Vec<[f64; 3]>,
        speed: f64,
        #[serde(default = "yes")]
        en_route: bool,
    },
    Lawnmower {
        x: [f64; 2],
        y: [f64; 2],
        spacing: f64,
        z: f64,
        speed: f64,
        #[serde(default = "yes")]
        en_route: bool,
    },
    Sawtooth {
        x: [f64; 2],
        y: [f64; 2],
        spacing: f64,
        z_levels: Vec<f64>,
        speed: f64,
        #[serde(default = "yes")]
        en_route: bool,
    },
}

impl PlanSpec {
    pub fn build(&self) -> SweepPlan {
        match self {
            PlanSpec::Waypoints { waypoints, speed, en_route } => SweepPlan {
                waypoints: waypoints.clone(),
                speed: *speed,
                en_route: *en_route,
            },
            PlanSpec::Lawnmower { x, y, spacing, z, speed, en_route } => {
                let mut p = SweepPlan::lawnmower((x[0], x[1]), (y[0], y[1]), *spacing, *z, *speed);
                p.en_route = *en_route;
                p
            }
            PlanSpec::Sawtooth { x, y, spacing, z_levels, speed, en_route } => {
                let mut p = SweepPlan::sawtooth((x[0], x[1]), (y[0], y[1]), *spacing, z_levels, *speed);
                p.en_route = *en_route;
                p
            }
        }
    }
}

/// Simulated cost model used for gating. Wall-clock time is measured
/// separately and never feeds back into the simulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timing {
    /// Simulated seconds per message send.
    pub message_cost_s: f64,
    /// Fixed dense resolve time; when absent it is `n³/3 · dense_flop_s`.
    pub dense_resolve_s: Option<f64>,
    pub dense_flop_s: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            message_cost_s: 1e-4,
            dense_resolve_s: None,
            dense_flop_s: 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    /// Plume threshold for the RMSE region, in concentration units (ppm).
    pub z_thresh: f64,
    /// Simulated seconds between RMSE samples.
    pub rmse_interval: f64,
    /// Message budget for the final convergence phase.
    pub converge_budget: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            z_thresh: 0.1,
            rmse_interval: 1.0,
            converge_budget: 20_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Single-layer grid with 4-neighbour connectivity.
    #[serde(default)]
    pub two_d: bool,
    pub grid: GridSpec,
    #[serde(default)]
    pub params: HyperParams,
    pub sources: Vec<Source>,
    #[serde(default)]
    pub wind: [f64; 2],
    #[serde(default)]
    pub dispersion: Dispersion,
    #[serde(default)]
    pub background: f64,
    #[serde(default)]
    pub sensor: SensorModel,
    pub plan: PlanSpec,
    #[serde(default)]
    pub timing: Timing,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, BenchError> {
        let s: Scenario = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        s.params.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut s = Self::from_toml_str(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        Ok(s)
    }

    pub fn to_toml_string(&self) -> Result<String, BenchError> {
        toml::to_string(self).map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn connectivity(&self) -> Connectivity {
        if self.two_d {
            Connectivity::Four
        } else {
            Connectivity::Six
        }
    }

    /// The occupancy grid, obstacles applied.
    pub fn build_grid(&self) -> Result<VoxelGrid, BenchError> {
        let g = &self.grid;
        let mut grid = match &g.occupancy_file {
            Some(file) => {
                let path = match &self.base_dir {
                    Some(dir) => dir.join(file),
                    None => file.clone(),
                };
                VoxelGrid::load(path)?
            }
            None => {
                let dims = [0, 1, 2].map(|a| (g.size[a] / g.resolution).ceil().max(1.0) as usize);
                let dims = if self.two_d { [dims[0], dims[1], 1] } else { dims };
                VoxelGrid::new(dims, g.resolution, g.origin)?
            }
        };
        if self.two_d && grid.dims()[2] != 1 {
            return Err(BenchError::Config("two_d scenarios need a single z layer".into()));
        }
        for b in &g.obstacles {
            for i in 0..grid.len() {
                let v = grid.voxel_at(i);
                let c = grid.world_of(v);
                if (0..3).all(|a| c[a] >= b.min[a] && c[a] <= b.max[a]) {
                    grid.set_occupied(v, true)?;
                }
            }
        }
        Ok(grid)
    }

    pub fn build_field(&self) -> Result<GroundTruthField, BenchError> {
        Ok(GroundTruthField::new(
            self.sources.clone(),
            self.wind,
            self.dispersion,
            self.build_grid()?,
            self.background,
        )?)
    }

    pub fn build_plan(&self) -> SweepPlan {
        self.plan.build()
    }

    /// Single-layer copy sliced at the first sweep height. Sources and
    /// waypoints are projected onto the slice; obstacles keep the voxels
    /// whose centres they cover at that height.
    pub fn flattened(&self) -> Result<Scenario, BenchError> {
        if self.grid.occupancy_file.is_some() {
            return Err(BenchError::Config("cannot flatten a scenario loaded from an occupancy file".into()));
        }
        let h = match &self.plan {
            PlanSpec::Waypoints { waypoints, .. } => match waypoints.first() {
                Some(w) => w[2],
                None => return Err(BenchError::Config("plan has no waypoints".into())),
            },
            PlanSpec::Lawnmower { z, .. } => *z,
            PlanSpec::Sawtooth { z_levels, .. } => match z_levels.first() {
                Some(&z) => z,
                None => return Err(BenchError::Config("plan has no z levels".into())),
            },
        };
        let mut s = self.clone();
        s.two_d = true;
        s.grid.origin[2] = h - s.grid.resolution / 2.0;
        s.grid.size[2] = s.grid.resolution;
        for src in &mut s.sources {
            src.position[2] = h;
        }
        match &mut s.plan {
            PlanSpec::Waypoints { waypoints, .. } => waypoints.iter_mut().for_each(|w| w[2] = h),
            PlanSpec::Lawnmower { .. } => {}
            PlanSpec::Sawtooth { z_levels, .. } => *z_levels = vec![h],
        }
        Ok(s)
    }
}
