//! Incremental graph construction: measurement insertion and on-demand node
//! expansion during wildfire.
//!
//! A node is expanded at most once. Expansion creates every absent free
//! lattice neighbour and connects each new node to all existing free
//! neighbours, so the grown graph is always the induced lattice subgraph on
//! its node set. Edge messages start at `(0, 0)` with the prior message as
//! their previous value.

use std::time::Instant;

use serde::Serialize;

use crate::graph::{Connection, EdgeId, GraphError, Measurement, NodeId};
use crate::occupancy::{OccupancyError, VoxelIndex};
use crate::solver::{GabpSolver, OpenReport, SolverError};

/// Whether the solver may grow its graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Growth {
    /// The graph is fixed up front (typically [`crate::graph::FactorGraph::full`]).
    Static,
    /// Nodes are created around measurements and expanded by the wildfire.
    Dynamic,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpansionEvent {
    pub trigger_node: VoxelIndex,
    pub created_nodes: Vec<VoxelIndex>,
    pub created_edges: Vec<EdgeId>,
    /// Stencil directions leaving the grid or hitting an occupied voxel.
    pub blocked_directions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InsertionReport {
    pub voxel: VoxelIndex,
    pub timestamp: f64,
    pub nodes_created: usize,
    pub edges_created: usize,
    pub blocked_directions: usize,
    pub messages_sent: u64,
    pub resolve_time_ns: u64,
}

impl InsertionReport {
    fn new(m: &Measurement) -> Self {
        Self {
            voxel: m.voxel,
            timestamp: m.timestamp,
            nodes_created: 0,
            edges_created: 0,
            blocked_directions: 0,
            messages_sent: 0,
            resolve_time_ns: 0,
        }
    }
}

impl GabpSolver {
    /// Queues a measurement for the next [`run`](GabpSolver::run).
    pub fn push_measurement(&mut self, m: Measurement) {
        self.pending.push_back(m);
    }

    pub fn pending_measurements(&self) -> usize {
        self.pending.len()
    }

    /// Adds `m` to the graph and seeds its wildfire. Creates the node when
    /// absent; with dynamic growth the measured node is expanded right away.
    /// With time decay enabled every earlier measurement node is re-seeded,
    /// newest first.
    ///
    /// The returned report covers graph changes only. Its message count and
    /// resolve time are filled in when the wildfire drains.
    pub fn insert_measurement(&mut self, m: Measurement) -> Result<InsertionReport, SolverError> {
        let grid = self.graph.grid();
        if !grid.contains(m.voxel) {
            return Err(GraphError::from(OccupancyError::OutOfBounds(m.voxel)).into());
        }
        if grid.is_occupied(m.voxel).map_err(GraphError::from)? {
            return Err(GraphError::InsideObstacle(m.voxel).into());
        }
        let mut report = InsertionReport::new(&m);
        let id = match self.graph.node_id(m.voxel) {
            Some(id) => id,
            None => {
                let id = self.graph.add_node(m.voxel)?;
                report.nodes_created += 1;
                report.edges_created += self.connect_existing(m.voxel)?.len();
                id
            }
        };
        if self.growth == Growth::Dynamic {
            if let Some(ev) = self.expand_if_needed(id)? {
                report.nodes_created += ev.created_nodes.len();
                report.edges_created += ev.created_edges.len();
                report.blocked_directions = ev.blocked_directions;
            }
        }
        let now = m.timestamp.max(self.graph.clock());
        self.graph.attach_measurement(id, m, now)?;
        self.sync();
        self.wildfire.cache = None;

        self.history.retain(|&h| h != id);
        self.seed_wildfire(id);
        if self.graph.params().decays() {
            self.wildfire.seeds.extend(self.history.iter().rev().copied());
        }
        self.history.push(id);

        self.open_reports.push(OpenReport {
            report,
            started: Instant::now(),
            messages_at_start: self.counters.total(),
        });
        Ok(report)
    }

    /// Connects the node at `v` to every existing free lattice neighbour.
    fn connect_existing(&mut self, v: VoxelIndex) -> Result<Vec<EdgeId>, SolverError> {
        let mut created = Vec::new();
        for &d in self.graph.connectivity().offsets() {
            let w = v.offset(d);
            if self.graph.node_id(w).is_none() {
                continue;
            }
            let already = self
                .graph
                .neighbors(self.graph.node_id(v).expect("node exists"))
                .iter()
                .any(|&(n, _)| self.graph.node(n).voxel == w);
            if already {
                continue;
            }
            if let Connection::Created(e) = self.graph.connect(v, w)? {
                created.push(e);
            }
        }
        Ok(created)
    }

    /// Creates all absent free neighbours of `node` and latches it as
    /// expanded. Returns `None` if it was already expanded.
    pub fn expand_if_needed(&mut self, node: NodeId) -> Result<Option<ExpansionEvent>, SolverError> {
        if self.graph.node(node).expanded {
            return Ok(None);
        }
        let v = self.graph.node(node).voxel;
        let mut ev = ExpansionEvent {
            trigger_node: v,
            created_nodes: Vec::new(),
            created_edges: Vec::new(),
            blocked_directions: 0,
        };
        for &d in self.graph.connectivity().offsets() {
            let w = v.offset(d);
            if !self.graph.grid().is_free(w) {
                ev.blocked_directions += 1;
                continue;
            }
            if self.graph.node_id(w).is_none() {
                self.graph.add_node(w)?;
                ev.created_nodes.push(w);
                ev.created_edges.extend(self.connect_existing(w)?);
            }
        }
        // an existing but unconnected neighbour can only appear after
        // occupancy changes; reconnect it
        ev.created_edges.extend(self.connect_existing(v)?);
        self.graph.set_expanded(node, true);
        self.sync();
        self.wildfire.cache = None;
        for open in &mut self.open_reports {
            open.report.nodes_created += ev.created_nodes.len();
            open.report.edges_created += ev.created_edges.len();
        }
        Ok(Some(ev))
    }

    /// Marks a voxel occupied, removing every edge that touches it.
    pub fn set_occupied(&mut self, v: VoxelIndex) -> Result<Vec<EdgeId>, SolverError> {
        let removed = self.graph.set_occupied(v)?;
        self.wildfire.cache = None;
        self.sync();
        Ok(removed)
    }

    /// Insertion reports whose wildfire drained and that were not yet
    /// returned by [`run`](GabpSolver::run).
    pub fn take_insertion_reports(&mut self) -> Vec<InsertionReport> {
        std::mem::take(&mut self.closed_reports)
    }
}
