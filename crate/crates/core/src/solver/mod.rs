//! Gaussian belief propagation over a [`FactorGraph`].
//!
//! Every stored edge carries two directed messages. A message from `i` to `j`
//! is built from the cavity belief of `i` (its self potential fused with every
//! incoming message except the one from `j`):
//!
//! ```text
//! P_i\j = P_ii + Σ_{k≠j} P_ki          μ_i\j = (P_ii·μ_ii + Σ_{k≠j} P_ki·μ_ki) / P_i\j
//! P_ij  = −Λ_ij² / P_i\j               μ_ij  = −Λ_ij · μ_i\j / P_ij
//! ```
//!
//! Node aggregates are summed exactly and rounded once (see [`crate::exact`]),
//! so the broadcast form `total − own contribution` is bit-for-bit equal to
//! the direct per-edge sum.
//!
//! Schedulers (wildfire, residual, hybrid, round-robin) live in
//! [`schedule`](self::schedule); graph growth during wildfire is wired in
//! [`crate::dynamic`].

pub mod residual;
mod schedule;

use std::collections::{BTreeSet, VecDeque};
use std::time::Instant;

use smallvec::SmallVec;
use thiserror::Error;

use crate::exact::exact_sum;
use crate::graph::{EdgeId, FactorGraph, GraphError, Measurement, NodeId};
use crate::occupancy::VoxelIndex;

pub use residual::{residual, Residual, ResidualQueue};
pub use schedule::{write_trace_csv, Phase, RunSummary, Schedule, StopReason, TraceRow};

use crate::dynamic::{Growth, InsertionReport};

/// Residual below which the residual schedule reports idle.
pub const DEFAULT_CONVERGENCE_FLOOR: f64 = 1e-9;

/// Directed edge id: `2·edge` runs from the edge's first endpoint to its
/// second, `2·edge + 1` the other way.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MessageId(pub u32);

impl MessageId {
    pub fn edge(self) -> EdgeId {
        EdgeId(self.0 / 2)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeMessage {
    pub from: NodeId,
    pub to: NodeId,
    /// Precision currently used by the receiver. Negative for attractive
    /// couplings.
    pub precision: f64,
    pub mean: f64,
    /// Last transmitted pair; seeded with the prior message.
    pub prev_precision: f64,
    pub prev_mean: f64,
    pub sends: u32,
}

impl EdgeMessage {
    pub fn info(&self) -> f64 {
        self.precision * self.mean
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("numerical breakdown at node {node}: cavity precision {precision} is not positive")]
    NumericalBreakdown { node: VoxelIndex, precision: f64 },
    #[error("non-finite message on edge {from} -> {to}")]
    NonFinite { from: VoxelIndex, to: VoxelIndex },
    #[error("marginal precision {precision} at node {node} is not positive")]
    NonPositiveMarginal { node: VoxelIndex, precision: f64 },
    #[error("node {0} is not adjacent to node {1}")]
    NotNeighbor(VoxelIndex, VoxelIndex),
    #[error("no node at voxel {0}")]
    UnknownVoxel(VoxelIndex),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MessageCounters {
    pub wildfire: u64,
    pub residual: u64,
    pub round_robin: u64,
}

impl MessageCounters {
    pub fn total(&self) -> u64 {
        self.wildfire + self.residual + self.round_robin
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Residuals evaluated across a precision sign change.
    pub sign_flip_residuals: u64,
}

/// Self potential plus every incoming message of one node, in information
/// form, ready to hand out cavity beliefs.
#[derive(Clone, Debug)]
pub struct NodeAggregate {
    node: NodeId,
    precisions: SmallVec<[f64; 8]>,
    infos: SmallVec<[f64; 8]>,
}

impl NodeAggregate {
    pub fn node(&self) -> NodeId {
        self.node
    }

    /// Full belief `(P_i, h_i)`.
    pub fn total(&self) -> (f64, f64) {
        (exact_sum(&self.precisions), exact_sum(&self.infos))
    }

    /// Cavity belief `(P_i\j, h_i\j)` with the given incoming message removed.
    pub fn excluding(&self, incoming: &EdgeMessage) -> (f64, f64) {
        let mut p = self.precisions.clone();
        let mut h = self.infos.clone();
        p.push(-incoming.precision);
        h.push(-incoming.info());
        (exact_sum(&p), exact_sum(&h))
    }
}

#[derive(Clone, Debug, Default)]
pub(crate) struct WildfireState {
    pub queue: VecDeque<NodeId>,
    pub in_queue: Vec<bool>,
    pub seeds: VecDeque<NodeId>,
    pub cursor: usize,
    pub cache: Option<NodeAggregate>,
    pub epsilon: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct OpenReport {
    pub report: InsertionReport,
    pub started: Instant,
    pub messages_at_start: u64,
}

pub struct GabpSolver {
    pub(crate) graph: FactorGraph,
    pub(crate) growth: Growth,
    messages: Vec<EdgeMessage>,
    queue: ResidualQueue,
    /// Messages never transmitted; their receivers still hold `(0, 0)`.
    unsent: BTreeSet<u32>,
    dirty: Vec<u32>,
    dirty_mark: Vec<bool>,
    floor: f64,
    pub(crate) counters: MessageCounters,
    diagnostics: Diagnostics,
    trace: Option<(Instant, Vec<TraceRow>)>,
    pub(crate) wildfire: WildfireState,
    pub(crate) pending: VecDeque<Measurement>,
    pub(crate) history: Vec<NodeId>,
    pub(crate) open_reports: Vec<OpenReport>,
    pub(crate) closed_reports: Vec<InsertionReport>,
}

impl GabpSolver {
    pub fn new(graph: FactorGraph, growth: Growth) -> Self {
        let params = *graph.params();
        let mut s = Self {
            graph,
            growth,
            messages: Vec::new(),
            queue: ResidualQueue::new(),
            unsent: BTreeSet::new(),
            dirty: Vec::new(),
            dirty_mark: Vec::new(),
            floor: DEFAULT_CONVERGENCE_FLOOR,
            counters: MessageCounters::default(),
            diagnostics: Diagnostics::default(),
            trace: None,
            wildfire: WildfireState {
                epsilon: params.epsilon,
                ..WildfireState::default()
            },
            pending: VecDeque::new(),
            history: Vec::new(),
            open_reports: Vec::new(),
            closed_reports: Vec::new(),
        };
        s.sync();
        s
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    /// Mutable graph access. Any change is picked up by the next scheduling
    /// call.
    pub fn graph_mut(&mut self) -> &mut FactorGraph {
        self.wildfire.cache = None;
        &mut self.graph
    }

    pub fn growth(&self) -> Growth {
        self.growth
    }

    pub fn counters(&self) -> MessageCounters {
        self.counters
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics
    }

    pub fn convergence_floor(&self) -> f64 {
        self.floor
    }

    pub fn set_convergence_floor(&mut self, floor: f64) {
        self.floor = floor;
    }

    /// The `(precision, mean)` a new message from `from` is compared against
    /// on its first send. Depends on the sender's free lattice degree.
    pub fn prior_message(&self, from: NodeId) -> (f64, f64) {
        let v = self.graph.node(from).voxel;
        let conn = self.graph.connectivity();
        let degree = self.graph.grid().free_neighbors(v, conn).count();
        self.graph.params().prior_message(degree)
    }

    pub fn message(&self, id: MessageId) -> &EdgeMessage {
        &self.messages[id.index()]
    }

    pub fn message_count(&self) -> usize {
        self.messages.len()
    }

    /// Directed id of the message `from` sends along `edge`.
    pub fn message_id(&self, from: NodeId, edge: EdgeId) -> MessageId {
        let e = self.graph.edge(edge).expect("live edge");
        if e.endpoints.0 == from {
            MessageId(edge.0 * 2)
        } else {
            MessageId(edge.0 * 2 + 1)
        }
    }

    pub fn message_between(&self, from: NodeId, to: NodeId) -> Option<MessageId> {
        self.graph
            .neighbors(from)
            .iter()
            .find(|(n, _)| *n == to)
            .map(|&(_, e)| self.message_id(from, e))
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some((Instant::now(), Vec::new()));
    }

    pub fn trace(&self) -> &[TraceRow] {
        self.trace.as_ref().map_or(&[], |(_, t)| t.as_slice())
    }

    pub fn take_trace(&mut self) -> Vec<TraceRow> {
        self.trace.as_mut().map(|(_, t)| std::mem::take(t)).unwrap_or_default()
    }

    pub fn node_id(&self, v: VoxelIndex) -> Result<NodeId, SolverError> {
        self.graph.node_id(v).ok_or(SolverError::UnknownVoxel(v))
    }

    /// Brings message storage and residual bookkeeping in line with the
    /// graph: allocates messages for new edges and dirties the outgoing
    /// messages of every node whose potential or neighbourhood changed.
    pub(crate) fn sync(&mut self) {
        let slots = self.graph.edge_slots();
        while self.messages.len() < 2 * slots {
            let e = EdgeId((self.messages.len() / 2) as u32);
            let forward = self.messages.len().is_multiple_of(2);
            let (from, to) = match self.graph.edge(e) {
                Some(rec) if forward => rec.endpoints,
                Some(rec) => (rec.endpoints.1, rec.endpoints.0),
                None => (NodeId(u32::MAX), NodeId(u32::MAX)),
            };
            let prior = if from.0 == u32::MAX { (0.0, 0.0) } else { self.prior_message(from) };
            let id = self.messages.len() as u32;
            self.messages.push(EdgeMessage {
                from,
                to,
                precision: 0.0,
                mean: 0.0,
                prev_precision: prior.0,
                prev_mean: prior.1,
                sends: 0,
            });
            self.dirty_mark.push(false);
            self.mark_dirty(id);
        }
        for n in self.graph.take_changed() {
            for i in 0..self.graph.neighbors(n).len() {
                let (_, e) = self.graph.neighbors(n)[i];
                let id = self.message_id(n, e);
                self.mark_dirty(id.0);
            }
        }
        if self.wildfire.in_queue.len() < self.graph.node_count() {
            self.wildfire.in_queue.resize(self.graph.node_count(), false);
        }
    }

    fn mark_dirty(&mut self, id: u32) {
        if !self.dirty_mark[id as usize] {
            self.dirty_mark[id as usize] = true;
            self.dirty.push(id);
        }
    }

    /// Recomputes the pending residual of every dirtied message.
    pub(crate) fn flush_dirty(&mut self) -> Result<(), SolverError> {
        self.sync();
        let dirty = std::mem::take(&mut self.dirty);
        for &id in &dirty {
            self.dirty_mark[id as usize] = false;
        }
        for id in dirty {
            let mid = MessageId(id);
            if self.graph.edge(mid.edge()).is_none() {
                self.queue.update(id, 0.0);
                self.unsent.remove(&id);
                continue;
            }
            let cand = self.candidate(mid)?;
            let m = &self.messages[id as usize];
            let r = residual((m.prev_precision, m.prev_mean), cand);
            if m.sends == 0 {
                self.unsent.insert(id);
            }
            self.queue.update(id, r.value);
        }
        Ok(())
    }

    /// Pending residual of a message as currently tracked by the queue.
    pub fn tracked_residual(&mut self, id: MessageId) -> Result<f64, SolverError> {
        self.flush_dirty()?;
        Ok(self.queue.get(id.0))
    }

    /// Largest pending residual over all messages.
    pub fn max_residual(&mut self) -> Result<f64, SolverError> {
        self.flush_dirty()?;
        Ok(self.queue.peek_max().map_or(0.0, |(_, r)| r))
    }

    pub(crate) fn pop_max_residual(&mut self, floor: f64) -> Result<Option<MessageId>, SolverError> {
        self.flush_dirty()?;
        if let Some((_, r)) = self.queue.peek_max() {
            if r >= floor {
                return Ok(self.queue.pop_max().map(|(id, _)| MessageId(id)));
            }
        }
        // Below the floor, messages never sent still go out once so that every
        // receiver holds a real message rather than the empty one.
        while let Some(id) = self.unsent.pop_first() {
            if self.graph.edge(MessageId(id).edge()).is_some() && self.messages[id as usize].sends == 0 {
                self.queue.update(id, 0.0);
                return Ok(Some(MessageId(id)));
            }
        }
        Ok(None)
    }

    /// Self potential plus all incoming messages of `node`.
    pub fn aggregate(&self, node: NodeId) -> NodeAggregate {
        let n = self.graph.node(node);
        let mut precisions = SmallVec::new();
        let mut infos = SmallVec::new();
        precisions.push(n.self_precision);
        infos.push(n.self_precision * n.self_mean);
        for &(k, e) in &n.neighbors {
            let m = &self.messages[self.message_id(k, e).index()];
            precisions.push(m.precision);
            infos.push(m.info());
        }
        NodeAggregate { node, precisions, infos }
    }

    /// Cavity belief of `node` excluding the message from `exclude`, summed
    /// directly over the remaining terms. Returns `(P_i\j, μ_i\j)`.
    pub fn aggregate_excluding(&self, node: NodeId, exclude: NodeId) -> Result<(f64, f64), SolverError> {
        let (p, h) = self.cavity_direct(node, exclude)?;
        self.check_cavity(node, p)?;
        Ok((p, h / p))
    }

    fn cavity_direct(&self, node: NodeId, exclude: NodeId) -> Result<(f64, f64), SolverError> {
        let n = self.graph.node(node);
        if !n.neighbors.iter().any(|&(k, _)| k == exclude) {
            return Err(SolverError::NotNeighbor(n.voxel, self.graph.node(exclude).voxel));
        }
        let mut precisions: SmallVec<[f64; 8]> = SmallVec::new();
        let mut infos: SmallVec<[f64; 8]> = SmallVec::new();
        precisions.push(n.self_precision);
        infos.push(n.self_precision * n.self_mean);
        for &(k, e) in n.neighbors.iter().filter(|(k, _)| *k != exclude) {
            let m = &self.messages[self.message_id(k, e).index()];
            precisions.push(m.precision);
            infos.push(m.info());
        }
        Ok((exact_sum(&precisions), exact_sum(&infos)))
    }

    fn check_cavity(&self, node: NodeId, p: f64) -> Result<(), SolverError> {
        if p > 0.0 && p.is_finite() {
            Ok(())
        } else {
            Err(SolverError::NumericalBreakdown {
                node: self.graph.node(node).voxel,
                precision: p,
            })
        }
    }

    /// Message update from a cavity belief in information form.
    fn message_from_cavity(&self, id: MessageId, cavity: (f64, f64)) -> Result<(f64, f64), SolverError> {
        let m = &self.messages[id.index()];
        self.check_cavity(m.from, cavity.0)?;
        let mu_cav = cavity.1 / cavity.0;
        let lambda_ij = -self.graph.edge(id.edge()).expect("live edge").coupling;
        let p = -lambda_ij * lambda_ij / cavity.0;
        let mu = -lambda_ij * mu_cav / p;
        if !p.is_finite() || !mu.is_finite() {
            return Err(SolverError::NonFinite {
                from: self.graph.node(m.from).voxel,
                to: self.graph.node(m.to).voxel,
            });
        }
        Ok((p, mu))
    }

    /// The message `id` would carry if sent now.
    pub fn candidate(&self, id: MessageId) -> Result<(f64, f64), SolverError> {
        let m = &self.messages[id.index()];
        let cavity = self.cavity_direct(m.from, m.to)?;
        self.message_from_cavity(id, cavity)
    }

    /// Same as [`candidate`](Self::candidate) but through the broadcast
    /// aggregate of the sender.
    pub fn candidate_broadcast(&self, id: MessageId, agg: &NodeAggregate) -> Result<(f64, f64), SolverError> {
        let m = &self.messages[id.index()];
        debug_assert_eq!(agg.node, m.from);
        let back = self
            .message_between(m.to, m.from)
            .map(|b| self.messages[b.index()])
            .expect("edge has a reverse message");
        self.message_from_cavity(id, agg.excluding(&back))
    }

    /// Stores a freshly computed message and returns its residual against the
    /// previous transmission. Dirties the receiver's other outgoing messages.
    pub(crate) fn commit(&mut self, id: MessageId, new: (f64, f64), phase: Phase) -> Residual {
        let m = &mut self.messages[id.index()];
        let r = residual((m.prev_precision, m.prev_mean), new);
        m.precision = new.0;
        m.mean = new.1;
        m.prev_precision = new.0;
        m.prev_mean = new.1;
        m.sends += 1;
        let (from, to) = (m.from, m.to);
        self.unsent.remove(&id.0);
        if r.sign_flip {
            self.diagnostics.sign_flip_residuals += 1;
        }
        self.queue.update(id.0, 0.0);
        for i in 0..self.graph.neighbors(to).len() {
            let (k, e) = self.graph.neighbors(to)[i];
            if k != from {
                let out = self.message_id(to, e);
                self.mark_dirty(out.0);
            }
        }
        match phase {
            Phase::Wildfire => self.counters.wildfire += 1,
            Phase::Residual => self.counters.residual += 1,
            Phase::RoundRobin => self.counters.round_robin += 1,
        }
        if let Some((start, rows)) = &mut self.trace {
            rows.push(TraceRow {
                message_index: self.counters.wildfire + self.counters.residual + self.counters.round_robin,
                phase,
                from: self.graph.node(from).voxel,
                to: self.graph.node(to).voxel,
                residual: r.value,
                wall_time_ns: start.elapsed().as_nanos() as u64,
            });
        }
        r
    }

    /// Computes and sends one message; returns its residual.
    pub fn send_message(&mut self, id: MessageId) -> Result<f64, SolverError> {
        self.send(id, Phase::RoundRobin)
    }

    pub(crate) fn send(&mut self, id: MessageId, phase: Phase) -> Result<f64, SolverError> {
        self.sync();
        let new = self.candidate(id)?;
        Ok(self.commit(id, new, phase).value)
    }

    /// Marginal `(mean, variance)` of a node from its self potential and all
    /// incoming messages.
    pub fn marginal(&self, node: NodeId) -> Result<(f64, f64), SolverError> {
        let (p, h) = self.aggregate(node).total();
        if !(p > 0.0) || !p.is_finite() {
            return Err(SolverError::NonPositiveMarginal {
                node: self.graph.node(node).voxel,
                precision: p,
            });
        }
        Ok((h / p, 1.0 / p))
    }

    /// Marginal at a voxel. A free voxel without a node carries only its
    /// default factor and reports `(z0, σ_d²)`.
    pub fn marginal_at(&self, v: VoxelIndex) -> Result<(f64, f64), SolverError> {
        match self.graph.node_id(v) {
            Some(id) => self.marginal(id),
            None if self.graph.grid().is_free(v) => {
                let p = self.graph.params();
                Ok((p.z0, p.sigma_d_sq))
            }
            None => Err(SolverError::UnknownVoxel(v)),
        }
    }

    /// Marginals of every node, in node-id order.
    pub fn marginals(&self) -> Result<Vec<(VoxelIndex, f64, f64)>, SolverError> {
        self.graph
            .nodes()
            .map(|(id, n)| self.marginal(id).map(|(m, v)| (n.voxel, m, v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::HyperParams;
    use crate::occupancy::{Connectivity, VoxelGrid};

    fn v(x: i64, y: i64, z: i64) -> VoxelIndex {
        VoxelIndex::new(x, y, z)
    }

    fn chain(n: usize) -> GabpSolver {
        let grid = VoxelGrid::new([n, 1, 1], 1.0, [0.0; 3]).unwrap();
        let g = FactorGraph::full(grid, HyperParams::default(), Connectivity::Six).unwrap();
        GabpSolver::new(g, Growth::Static)
    }

    #[test]
    fn new_messages_are_seeded_with_prior() {
        let s = chain(3);
        assert_eq!(s.message_count(), 4);
        for i in 0..4 {
            let m = s.message(MessageId(i));
            assert_eq!((m.precision, m.mean), (0.0, 0.0));
            assert_eq!((m.prev_precision, m.prev_mean), s.prior_message(m.from));
        }
    }

    #[test]
    fn aggregate_without_incoming_is_self_potential() {
        let s = chain(3);
        let mid = s.node_id(v(1, 0, 0)).unwrap();
        let left = s.node_id(v(0, 0, 0)).unwrap();
        let n = s.graph().node(mid);
        let (p, mu) = s.aggregate_excluding(mid, left).unwrap();
        assert_eq!(p, n.self_precision);
        assert_eq!(mu, n.self_mean);
    }

    #[test]
    fn aggregate_fuses_incoming() {
        let mut s = chain(3);
        let mid = s.node_id(v(1, 0, 0)).unwrap();
        let left = s.node_id(v(0, 0, 0)).unwrap();
        let right = s.node_id(v(2, 0, 0)).unwrap();
        let id = s.message_between(right, mid).unwrap();
        s.messages[id.index()].precision = 0.4;
        s.messages[id.index()].mean = 2.0;
        let own = s.graph().node(mid).self_precision;
        let (p, mu) = s.aggregate_excluding(mid, left).unwrap();
        assert_eq!(p, own + 0.4);
        assert!((mu - 0.8 / (own + 0.4)).abs() < 1e-15);
        // the excluded side's message does not enter
        let (p2, _) = s.aggregate_excluding(mid, right).unwrap();
        assert_eq!(p2, own);
    }

    #[test]
    fn message_update_worked_example() {
        let s = chain(2);
        let id = MessageId(0);
        // Λ_ij = -0.5 (σ_r² = 2), cavity (P=1, μ=0.8)
        let (p, mu) = s.message_from_cavity(id, (1.0, 0.8)).unwrap();
        assert!((p + 0.25).abs() < 1e-15);
        assert!((mu + 1.6).abs() < 1e-15);
    }

    #[test]
    fn resend_is_a_fixed_point() {
        let mut s = chain(3);
        let id = MessageId(0);
        s.send_message(id).unwrap();
        assert_eq!(s.send_message(id).unwrap(), 0.0);
        let m = s.message(id);
        assert_eq!((m.prev_precision, m.prev_mean), (m.precision, m.mean));
    }

    #[test]
    fn isolated_node_marginal_is_prior() {
        let grid = VoxelGrid::new([1, 1, 1], 1.0, [0.0; 3]).unwrap();
        let g = FactorGraph::full(grid, HyperParams::default(), Connectivity::Six).unwrap();
        let s = GabpSolver::new(g, Growth::Static);
        let (m, var) = s.marginal(NodeId(0)).unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(var, 1e4);
    }

    #[test]
    fn single_node_measurement_marginal() {
        let grid = VoxelGrid::new([1, 1, 1], 1.0, [0.0; 3]).unwrap();
        let mut g = FactorGraph::full(grid, HyperParams::default(), Connectivity::Six).unwrap();
        g.attach_measurement(NodeId(0), Measurement::new(5.0, 0.0, v(0, 0, 0)), 0.0).unwrap();
        let s = GabpSolver::new(g, Growth::Static);
        let (m, var) = s.marginal(NodeId(0)).unwrap();
        assert!((m - 4.99995).abs() < 1e-9);
        assert!((var - 1.0 / (10.0 + 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn breakdown_is_reported() {
        let s = chain(2);
        let err = s.message_from_cavity(MessageId(0), (-1.0, 0.0)).unwrap_err();
        assert!(matches!(err, SolverError::NumericalBreakdown { .. }));
    }
}
