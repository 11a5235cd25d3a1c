//! Gas distribution mapping with Gaussian belief propagation.
//!
//! * [`occupancy`]: voxel grid and obstacle map.
//! * [`graph`]: factor graph over voxels and its self potentials.
//! * [`solver`]: message passing and schedules.
//! * [`dynamic`]: measurement insertion and on-demand graph growth.
//! * [`oracle`]: dense direct solver.
//! * [`plume`]: analytic ground-truth fields and sensor sweeps.
//! * [`bench`]: scenarios, benchmark protocol and file formats.

// `!(x > 0.0)` guards are deliberate: they reject NaN along with
// non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod dynamic;
mod exact;
pub mod graph;
pub mod occupancy;
pub mod oracle;
pub mod plume;
pub mod solver;

pub use dynamic::{ExpansionEvent, Growth, InsertionReport};
pub use graph::{FactorGraph, HyperParams, Measurement, NodeId};
pub use occupancy::{Connectivity, VoxelGrid, VoxelIndex};
pub use solver::{GabpSolver, Schedule, SolverError};
