//! Factor-graph state: variable nodes on the voxel lattice, regularisation
//! edges between free neighbours, and the self potentials assembled from the
//! observation, regularisation and default factors.
//!
//! The joint is kept in canonical information form `exp(-x'Λx/2 + g'x)`:
//!
//! ```text
//! Λ_ii = 1/σ_d² + Σ_k α_k,i + Σ_{j∈N_i} β      α_k,i = 1/(σ_s² + σ_ζ²·Δt_k,i)
//! g_i  = z0/σ_d² + Σ_k α_k,i · z_k,i           β     = 1/σ_r²
//! Λ_ij = -β for every stored edge
//! ```
//!
//! Blocked neighbour pairs are never stored, so `o_ij` is implicit: an edge
//! exists iff the pair is free.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::occupancy::{Connectivity, OccupancyError, VoxelGrid, VoxelIndex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl EdgeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid hyperparameters: {0}")]
    InvalidParams(String),
    #[error("node at {0} already present")]
    AlreadyPresent(VoxelIndex),
    #[error("voxel {0} is inside obstacle")]
    InsideObstacle(VoxelIndex),
    #[error("no node at voxel {0}")]
    MissingNode(VoxelIndex),
    #[error("voxels {0} and {1} are already connected")]
    AlreadyConnected(VoxelIndex, VoxelIndex),
    #[error("measurement voxel {measurement} does not match node voxel {node}")]
    VoxelMismatch { node: VoxelIndex, measurement: VoxelIndex },
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
    #[error("clock regression: requested time {now} is earlier than {latest}")]
    ClockRegression { now: f64, latest: f64 },
    #[error(transparent)]
    Occupancy(#[from] OccupancyError),
}

/// Model variances and thresholds.
///
/// `sigma_zeta_sq = f64::INFINITY` switches time decay off entirely: every
/// measurement then keeps `α = 1/σ_s²` regardless of its age.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub sigma_s_sq: f64,
    pub sigma_zeta_sq: f64,
    pub sigma_r_sq: f64,
    pub sigma_d_sq: f64,
    /// Variance of the prior message seeded on every new edge. `None` derives
    /// it per sender from the lattice with [`HyperParams::far_field_message`].
    pub sigma_p_sq: Option<f64>,
    pub z0: f64,
    pub epsilon: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            sigma_s_sq: 0.1,
            sigma_zeta_sq: f64::INFINITY,
            sigma_r_sq: 2.0,
            sigma_d_sq: 1e4,
            sigma_p_sq: None,
            z0: 0.0,
            epsilon: 0.01,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), GraphError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(GraphError::InvalidParams(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("sigma_s_sq", self.sigma_s_sq)?;
        positive("sigma_r_sq", self.sigma_r_sq)?;
        positive("sigma_d_sq", self.sigma_d_sq)?;
        if let Some(p) = self.sigma_p_sq {
            positive("sigma_p_sq", p)?;
        }
        if !(self.sigma_zeta_sq > 0.0) {
            return Err(GraphError::InvalidParams(format!(
                "sigma_zeta_sq must be positive or infinite, got {}",
                self.sigma_zeta_sq
            )));
        }
        if self.sigma_d_sq < 100.0 * self.sigma_s_sq {
            return Err(GraphError::InvalidParams(format!(
                "default anchor too strong: sigma_d_sq = {} < 100 * sigma_s_sq = {}",
                self.sigma_d_sq,
                100.0 * self.sigma_s_sq
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(GraphError::InvalidParams(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !self.z0.is_finite() {
            return Err(GraphError::InvalidParams("z0 must be finite".into()));
        }
        Ok(())
    }

    pub fn decays(&self) -> bool {
        self.sigma_zeta_sq.is_finite()
    }

    /// Observation weight of a measurement of age `dt` seconds.
    pub fn alpha(&self, dt: f64) -> f64 {
        if self.decays() {
            1.0 / (self.sigma_s_sq + self.sigma_zeta_sq * dt)
        } else {
            1.0 / self.sigma_s_sq
        }
    }

    /// Off-diagonal coupling magnitude of a free edge.
    pub fn coupling(&self) -> f64 {
        1.0 / self.sigma_r_sq
    }

    pub fn default_precision(&self) -> f64 {
        1.0 / self.sigma_d_sq
    }

    /// Message an uninformed node with `free_degree` lattice neighbours sends
    /// to a neighbour that has not spoken yet, as `(|precision|, mean)`:
    /// precision `β² / (1/σ_d² + degree·β)`, mean `−z0·(1/σ_d² + degree·β)/β`.
    pub fn far_field_message(&self, free_degree: usize) -> (f64, f64) {
        let beta = self.coupling();
        let cavity = self.default_precision() + free_degree as f64 * beta;
        (beta * beta / cavity, -self.z0 * cavity / beta)
    }

    /// Previous-message seed of a new edge message sent by a node with
    /// `free_degree` lattice neighbours. A configured `σ_p²` gives
    /// `(1/σ_p², 0)` on every edge.
    pub fn prior_message(&self, free_degree: usize) -> (f64, f64) {
        match self.sigma_p_sq {
            Some(v) => (1.0 / v, 0.0),
            None => self.far_field_message(free_degree),
        }
    }
}

/// A point concentration reading already associated to a voxel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub value: f64,
    pub timestamp: f64,
    pub voxel: VoxelIndex,
}

impl Measurement {
    pub fn new(value: f64, timestamp: f64, voxel: VoxelIndex) -> Self {
        Self { value, timestamp, voxel }
    }

    fn validate(&self) -> Result<(), GraphError> {
        if !(self.value >= 0.0) || !self.value.is_finite() {
            return Err(GraphError::InvalidMeasurement(format!("value must be finite and >= 0, got {}", self.value)));
        }
        if !self.timestamp.is_finite() {
            return Err(GraphError::InvalidMeasurement("timestamp must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct NodeRecord {
    pub voxel: VoxelIndex,
    pub measurements: Vec<Measurement>,
    pub neighbors: SmallVec<[(NodeId, EdgeId); 6]>,
    pub self_precision: f64,
    pub self_mean: f64,
    /// Neighbour creation has been attempted for this node.
    pub expanded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeRecord {
    pub endpoints: (NodeId, NodeId),
    pub coupling: f64,
}

impl EdgeRecord {
    pub fn other(&self, n: NodeId) -> NodeId {
        if self.endpoints.0 == n {
            self.endpoints.1
        } else {
            self.endpoints.0
        }
    }
}

/// Outcome of [`FactorGraph::connect`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connection {
    Created(EdgeId),
    Blocked,
}

const NO_NODE: u32 = u32::MAX;

#[derive(Clone, Debug)]
pub struct FactorGraph {
    grid: VoxelGrid,
    params: HyperParams,
    connectivity: Connectivity,
    nodes: Vec<NodeRecord>,
    edges: Vec<Option<EdgeRecord>>,
    lookup: Vec<u32>,
    edge_count: usize,
    clock: f64,
    latest_timestamp: f64,
    changed: Vec<NodeId>,
    changed_mark: Vec<bool>,
}

impl FactorGraph {
    pub fn new(grid: VoxelGrid, params: HyperParams, connectivity: Connectivity) -> Result<Self, GraphError> {
        params.validate()?;
        let lookup = vec![NO_NODE; grid.len()];
        Ok(Self {
            grid,
            params,
            connectivity,
            nodes: Vec::new(),
            edges: Vec::new(),
            lookup,
            edge_count: 0,
            clock: f64::NEG_INFINITY,
            latest_timestamp: f64::NEG_INFINITY,
            changed: Vec::new(),
            changed_mark: Vec::new(),
        })
    }

    /// Graph over every free voxel with every free edge, all nodes marked
    /// expanded.
    pub fn full(grid: VoxelGrid, params: HyperParams, connectivity: Connectivity) -> Result<Self, GraphError> {
        let mut g = Self::new(grid, params, connectivity)?;
        let free: Vec<VoxelIndex> = g.grid.free_voxels().collect();
        for &v in &free {
            g.add_node(v)?;
        }
        let offsets = connectivity.offsets();
        for &v in &free {
            // only the positive half of the stencil so each pair is visited once
            for &d in offsets.iter().filter(|d| d.0 + d.1 + d.2 > 0) {
                let w = v.offset(d);
                if g.grid.is_free(w) {
                    g.connect(v, w)?;
                }
            }
        }
        for n in &mut g.nodes {
            n.expanded = true;
        }
        Ok(g)
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn params(&self) -> &HyperParams {
        &self.params
    }

    pub fn connectivity(&self) -> Connectivity {
        self.connectivity
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Upper bound on edge ids, including removed slots.
    pub fn edge_slots(&self) -> usize {
        self.edges.len()
    }

    pub fn node(&self, id: NodeId) -> &NodeRecord {
        &self.nodes[id.index()]
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &NodeRecord)> {
        self.nodes.iter().enumerate().map(|(i, n)| (NodeId(i as u32), n))
    }

    pub fn edge(&self, id: EdgeId) -> Option<&EdgeRecord> {
        self.edges.get(id.index()).and_then(|e| e.as_ref())
    }

    pub fn edges(&self) -> impl Iterator<Item = (EdgeId, &EdgeRecord)> {
        self.edges
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().map(|e| (EdgeId(i as u32), e)))
    }

    pub fn node_id(&self, v: VoxelIndex) -> Option<NodeId> {
        let i = self.grid.linear(v)?;
        let id = self.lookup[i];
        (id != NO_NODE).then_some(NodeId(id))
    }

    pub fn neighbors(&self, id: NodeId) -> &[(NodeId, EdgeId)] {
        &self.nodes[id.index()].neighbors
    }

    pub fn set_expanded(&mut self, id: NodeId, expanded: bool) {
        self.nodes[id.index()].expanded = expanded;
    }

    /// Creates an unconnected node carrying only the default factor.
    pub fn add_node(&mut self, v: VoxelIndex) -> Result<NodeId, GraphError> {
        let lin = self.grid.linear(v).ok_or(OccupancyError::OutOfBounds(v))?;
        if self.lookup[lin] != NO_NODE {
            return Err(GraphError::AlreadyPresent(v));
        }
        if self.grid.is_occupied(v)? {
            return Err(GraphError::InsideObstacle(v));
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(NodeRecord {
            voxel: v,
            measurements: Vec::new(),
            neighbors: SmallVec::new(),
            self_precision: self.params.default_precision(),
            self_mean: self.params.z0,
            expanded: false,
        });
        self.changed_mark.push(false);
        self.lookup[lin] = id.0;
        Ok(id)
    }

    /// Adds the regularisation edge between two existing adjacent nodes unless
    /// the occupancy map blocks it. A created edge raises both endpoint self
    /// precisions by `β`.
    pub fn connect(&mut self, a: VoxelIndex, b: VoxelIndex) -> Result<Connection, GraphError> {
        if !a.is_adjacent(&b) {
            return Err(OccupancyError::NotAdjacent(a, b).into());
        }
        let na = self.node_id(a).ok_or(GraphError::MissingNode(a))?;
        let nb = self.node_id(b).ok_or(GraphError::MissingNode(b))?;
        if self.grid.is_blocked(a, b)? {
            return Ok(Connection::Blocked);
        }
        if self.nodes[na.index()].neighbors.iter().any(|&(n, _)| n == nb) {
            return Err(GraphError::AlreadyConnected(a, b));
        }
        let id = EdgeId(self.edges.len() as u32);
        self.edges.push(Some(EdgeRecord {
            endpoints: (na, nb),
            coupling: self.params.coupling(),
        }));
        self.edge_count += 1;
        self.nodes[na.index()].neighbors.push((nb, id));
        self.nodes[nb.index()].neighbors.push((na, id));
        self.recompute(na);
        self.recompute(nb);
        Ok(Connection::Created(id))
    }

    /// Appends `m` to the node's measurement set and refreshes its self
    /// potential at time `now`. With finite `σ_ζ²`, moving the clock forward
    /// also re-weights every other stored measurement.
    pub fn attach_measurement(&mut self, id: NodeId, m: Measurement, now: f64) -> Result<(f64, f64), GraphError> {
        m.validate()?;
        let node = &self.nodes[id.index()];
        if node.voxel != m.voxel {
            return Err(GraphError::VoxelMismatch {
                node: node.voxel,
                measurement: m.voxel,
            });
        }
        if now < m.timestamp {
            return Err(GraphError::ClockRegression {
                now,
                latest: m.timestamp,
            });
        }
        self.advance_clock(now)?;
        self.latest_timestamp = self.latest_timestamp.max(m.timestamp);
        self.nodes[id.index()].measurements.push(m);
        self.recompute(id);
        let n = &self.nodes[id.index()];
        Ok((n.self_precision, n.self_mean))
    }

    /// Re-weights all measurements at the new time. Returns the nodes whose
    /// self potential changed; empty when time decay is disabled.
    pub fn refresh_time_decay(&mut self, now: f64) -> Result<Vec<NodeId>, GraphError> {
        if now < self.latest_timestamp || now < self.clock {
            return Err(GraphError::ClockRegression {
                now,
                latest: self.latest_timestamp.max(self.clock),
            });
        }
        if !self.params.decays() {
            self.clock = now;
            return Ok(Vec::new());
        }
        self.clock = now;
        let mut changed = Vec::new();
        for i in 0..self.nodes.len() {
            if self.nodes[i].measurements.is_empty() {
                continue;
            }
            let id = NodeId(i as u32);
            let before = (self.nodes[i].self_precision, self.nodes[i].self_mean);
            self.recompute(id);
            if before != (self.nodes[i].self_precision, self.nodes[i].self_mean) {
                changed.push(id);
            }
        }
        Ok(changed)
    }

    fn advance_clock(&mut self, now: f64) -> Result<(), GraphError> {
        if now < self.clock {
            return Err(GraphError::ClockRegression {
                now,
                latest: self.clock,
            });
        }
        if now > self.clock {
            if self.params.decays() {
                self.refresh_time_decay(now)?;
            } else {
                self.clock = now;
            }
        }
        Ok(())
    }

    /// Self potential `(P_ii, μ_ii)` recomputed from the stored measurements
    /// and neighbour list, without touching the stored values.
    pub fn self_potential_from_scratch(&self, id: NodeId) -> (f64, f64) {
        let node = &self.nodes[id.index()];
        let p = &self.params;
        let mut lambda = p.default_precision();
        let mut g = p.z0 * p.default_precision();
        for m in &node.measurements {
            let a = p.alpha(self.clock - m.timestamp);
            lambda += a;
            g += a * m.value;
        }
        for &(_, e) in &node.neighbors {
            lambda += self.edges[e.index()].as_ref().map_or(0.0, |e| e.coupling);
        }
        (lambda, g / lambda)
    }

    /// Information-form entries `(Λ_ii, g_i)` of a node.
    pub fn information(&self, id: NodeId) -> (f64, f64) {
        let n = &self.nodes[id.index()];
        (n.self_precision, n.self_precision * n.self_mean)
    }

    fn recompute(&mut self, id: NodeId) {
        let (p, mu) = self.self_potential_from_scratch(id);
        let n = &mut self.nodes[id.index()];
        n.self_precision = p;
        n.self_mean = mu;
        if !self.changed_mark[id.index()] {
            self.changed_mark[id.index()] = true;
            self.changed.push(id);
        }
    }

    /// Recomputes every self potential from scratch.
    pub fn rebuild_self_potentials(&mut self) {
        for i in 0..self.nodes.len() {
            self.recompute(NodeId(i as u32));
        }
    }

    /// Nodes whose self potential or neighbourhood changed since the last call.
    pub fn take_changed(&mut self) -> Vec<NodeId> {
        for id in &self.changed {
            self.changed_mark[id.index()] = false;
        }
        std::mem::take(&mut self.changed)
    }

    /// Marks a voxel occupied and drops every edge touching it. Returns the
    /// removed edges. A node already living at that voxel stays in the graph
    /// as an isolated node; its former neighbours are un-latched so they may
    /// expand again.
    pub fn set_occupied(&mut self, v: VoxelIndex) -> Result<Vec<EdgeId>, GraphError> {
        self.grid.set_occupied(v, true)?;
        let mut removed = Vec::new();
        let Some(id) = self.node_id(v) else {
            return Ok(removed);
        };
        let nbrs = std::mem::take(&mut self.nodes[id.index()].neighbors);
        for (other, e) in nbrs {
            self.edges[e.index()] = None;
            self.edge_count -= 1;
            let on = &mut self.nodes[other.index()];
            on.neighbors.retain(|&mut (n, _)| n != id);
            on.expanded = false;
            self.recompute(other);
            removed.push(e);
        }
        self.recompute(id);
        Ok(removed)
    }
}
