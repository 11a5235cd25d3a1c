//! Message schedules: wildfire, residual, hybrid and the round-robin baseline.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use super::{GabpSolver, MessageId, SolverError};
use crate::dynamic::{Growth, InsertionReport};
use crate::graph::NodeId;
use crate::occupancy::VoxelIndex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Wildfire,
    Residual,
    RoundRobin,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Wildfire => "wildfire",
            Phase::Residual => "residual",
            Phase::RoundRobin => "round_robin",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    /// One-based index of the send across all phases.
    pub message_index: u64,
    pub phase: Phase,
    pub from: VoxelIndex,
    pub to: VoxelIndex,
    pub residual: f64,
    pub wall_time_ns: u64,
}

fn voxel_field(v: VoxelIndex) -> String {
    format!("{}:{}:{}", v.ix, v.iy, v.iz)
}

/// Writes trace rows as CSV with a header line.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["message_index", "phase", "from", "to", "residual", "wall_time_ns"])?;
    for r in rows {
        out.write_record([
            r.message_index.to_string(),
            r.phase.to_string(),
            voxel_field(r.from),
            voxel_field(r.to),
            format!("{:e}", r.residual),
            r.wall_time_ns.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Which message schedule [`GabpSolver::run`] follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Wildfire after each insertion, residual propagation whenever no
    /// wildfire is pending.
    Hybrid,
    /// Wildfire only; idle once the wildfire drains.
    WildfireOnly,
    /// Insertions only refresh residuals; messages are picked by residual.
    ResidualOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Budget,
    Idle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub wildfire_messages: u64,
    pub residual_messages: u64,
    pub measurements_inserted: usize,
    /// Insertions whose wildfire completed during this run.
    pub completed: Vec<InsertionReport>,
    pub stop: StopReason,
}

impl RunSummary {
    pub fn messages(&self) -> u64 {
        self.wildfire_messages + self.residual_messages
    }
}

impl GabpSolver {
    /// A wildfire is queued or in progress.
    pub fn wildfire_active(&self) -> bool {
        !self.wildfire.queue.is_empty() || !self.wildfire.seeds.is_empty()
    }

    /// Queues a wildfire seed behind any in-progress wildfire.
    pub fn seed_wildfire(&mut self, start: NodeId) {
        self.wildfire.seeds.push_back(start);
    }

    /// Sends at most one wildfire message. Returns `false` once the wildfire
    /// has drained.
    pub(crate) fn wildfire_step(&mut self) -> Result<bool, SolverError> {
        self.sync();
        loop {
            let Some(&t) = self.wildfire.queue.front() else {
                match self.wildfire.seeds.pop_front() {
                    Some(seed) => {
                        if !self.wildfire.in_queue[seed.index()] {
                            self.wildfire.in_queue[seed.index()] = true;
                            self.wildfire.queue.push_back(seed);
                        }
                        continue;
                    }
                    None => {
                        self.close_reports();
                        return Ok(false);
                    }
                }
            };
            let nbrs = self.graph.neighbors(t);
            if self.wildfire.cursor >= nbrs.len() {
                self.wildfire.queue.pop_front();
                self.wildfire.in_queue[t.index()] = false;
                self.wildfire.cursor = 0;
                self.wildfire.cache = None;
                continue;
            }
            let (j, e) = nbrs[self.wildfire.cursor];
            self.wildfire.cursor += 1;
            let agg = match self.wildfire.cache.take() {
                Some(a) if a.node() == t => a,
                _ => self.aggregate(t),
            };
            let id = self.message_id(t, e);
            let new = self.candidate_broadcast(id, &agg)?;
            self.wildfire.cache = Some(agg);
            let r = self.commit(id, new, Phase::Wildfire);
            if r.value > self.wildfire.epsilon {
                if self.growth == Growth::Dynamic && !self.graph.node(j).expanded {
                    self.expand_if_needed(j)?;
                }
                if !self.wildfire.in_queue[j.index()] {
                    self.wildfire.in_queue[j.index()] = true;
                    self.wildfire.queue.push_back(j);
                }
            }
            return Ok(true);
        }
    }

    fn close_reports(&mut self) {
        let total = self.counters.total();
        for open in self.open_reports.drain(..) {
            let mut report = open.report;
            report.messages_sent = total - open.messages_at_start;
            report.resolve_time_ns = open.started.elapsed().as_nanos() as u64;
            self.closed_reports.push(report);
        }
    }

    /// Runs one complete wildfire from `start` with threshold `epsilon`,
    /// after finishing any wildfire already in progress. Returns the number
    /// of messages sent.
    pub fn wildfire_iteration(&mut self, start: NodeId, epsilon: f64) -> Result<u64, SolverError> {
        let before = self.counters.total();
        let saved = std::mem::replace(&mut self.wildfire.epsilon, epsilon);
        self.seed_wildfire(start);
        let result = (|| {
            while self.wildfire_step()? {}
            Ok(())
        })();
        self.wildfire.epsilon = saved;
        result.map(|()| self.counters.total() - before)
    }

    /// Re-sends the message of largest residual. Returns `None` when the
    /// largest residual is below the convergence floor.
    pub fn residual_step(&mut self) -> Result<Option<(MessageId, f64)>, SolverError> {
        self.residual_step_above(self.floor)
    }

    fn residual_step_above(&mut self, floor: f64) -> Result<Option<(MessageId, f64)>, SolverError> {
        let Some(id) = self.pop_max_residual(floor)? else {
            return Ok(None);
        };
        let r = self.send(id, Phase::Residual)?;
        Ok(Some((id, r)))
    }

    /// Residual steps until every residual is below `floor` or `max_messages`
    /// sends were made. Returns the number of sends.
    pub fn converge(&mut self, floor: f64, max_messages: u64) -> Result<u64, SolverError> {
        let mut sent = 0;
        while sent < max_messages && self.residual_step_above(floor)?.is_some() {
            sent += 1;
        }
        Ok(sent)
    }

    /// One pass sending every live message in id order. Returns the largest
    /// residual seen.
    pub fn round_robin_sweep(&mut self) -> Result<f64, SolverError> {
        self.sync();
        let mut max = 0.0f64;
        for i in 0..self.message_count() {
            let id = MessageId(i as u32);
            if self.graph.edge(id.edge()).is_some() {
                max = max.max(self.send(id, Phase::RoundRobin)?);
            }
        }
        Ok(max)
    }

    /// Round-robin sweeps until a sweep's largest residual is below `tol`.
    /// Returns the number of sweeps, or `None` if `max_sweeps` was reached.
    pub fn round_robin_run(&mut self, max_sweeps: usize, tol: f64) -> Result<Option<usize>, SolverError> {
        for sweep in 1..=max_sweeps {
            if self.round_robin_sweep()? < tol {
                return Ok(Some(sweep));
            }
        }
        Ok(None)
    }

    /// Hybrid schedule; see [`run`](Self::run).
    pub fn hybrid_run(&mut self, budget: Option<u64>) -> Result<RunSummary, SolverError> {
        self.run(Schedule::Hybrid, budget)
    }

    /// Drives the solver until idle or until `budget` messages were sent.
    ///
    /// Pending measurements are inserted as soon as the loop sees them, even
    /// mid-wildfire; their wildfire is queued behind the running one. Every
    /// message boundary is a valid stopping point, and a later call resumes
    /// exactly where this one stopped.
    pub fn run(&mut self, schedule: Schedule, budget: Option<u64>) -> Result<RunSummary, SolverError> {
        let start = self.counters;
        let mut inserted = 0;
        let stop = loop {
            let used = self.counters.total() - start.total();
            if budget.is_some_and(|b| used >= b) {
                break StopReason::Budget;
            }
            if let Some(m) = self.pending.pop_front() {
                self.insert_measurement(m)?;
                inserted += 1;
                if schedule == Schedule::ResidualOnly {
                    self.wildfire.seeds.clear();
                    self.close_reports();
                }
                continue;
            }
            if schedule != Schedule::ResidualOnly && self.wildfire_step()? {
                continue;
            }
            if schedule != Schedule::WildfireOnly && self.residual_step()?.is_some() {
                continue;
            }
            break StopReason::Idle;
        };
        Ok(RunSummary {
            wildfire_messages: self.counters.wildfire - start.wildfire,
            residual_messages: self.counters.residual - start.residual,
            measurements_inserted: inserted,
            completed: std::mem::take(&mut self.closed_reports),
            stop,
        })
    }

    /// Inserts `m` and runs its wildfire (and any historic re-propagation) to
    /// completion. Residual propagation is not run.
    pub fn insert_and_resolve(&mut self, m: crate::graph::Measurement) -> Result<InsertionReport, SolverError> {
        let started = Instant::now();
        let before = self.counters.total();
        let mut report = self.insert_measurement(m)?;
        while self.wildfire_step()? {}
        if let Some(pos) = self
            .closed_reports
            .iter()
            .rposition(|r| r.voxel == m.voxel && r.timestamp.to_bits() == m.timestamp.to_bits())
        {
            report = self.closed_reports.remove(pos);
        }
        report.messages_sent = self.counters.total() - before;
        report.resolve_time_ns = started.elapsed().as_nanos() as u64;
        Ok(report)
    }
}
