//! Simulated star network between the central entity and the agents.
//!
//! The solvers in this crate run in one process, but every value that
//! would cross the wire in a deployment goes through this module so
//! that communication volume can be measured exactly. A
//! [`SimNetwork`] executes per-agent work either sequentially or on a
//! rayon thread pool and appends one [`MsgRecord`] per logical message
//! with its float payload size.
//!
//! Determinism contract: `gather` returns payloads in agent order
//! regardless of transport mode, and [`tree_reduce`] combines them in
//! a fixed pairwise order. Runs in sequential and parallel mode
//! therefore produce bitwise-identical iterates and ledgers.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

/// Endpoint of a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NodeId {
    /// Central entity (the grid operator).
    Ce,
    /// Household agent by index.
    Agent(usize),
}

/// Logical message type, used to slice the ledger in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MsgKind {
    /// One-time problem data exchanged before iterating.
    Setup,
    /// Agent to CE: local step results and sensitivities.
    FwdSensitivities,
    /// CE to agents: updated price and step mode.
    BwdDual,
    /// Agent to CE: coupled-variable contribution.
    AdmmFwd,
    /// CE to agents: consensus offset.
    AdmmBwd,
}

/// Phase a message belongs to; setup traffic is reported separately
/// from the per-iteration online traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Setup,
    Iter(usize),
}

/// One recorded message.
#[derive(Debug, Clone)]
pub struct MsgRecord {
    pub phase: Phase,
    pub kind: MsgKind,
    pub from: NodeId,
    pub to: NodeId,
    pub floats: usize,
}

/// Number of IEEE 754 doubles a payload occupies on the wire.
///
/// Booleans and integers count as one float each; the benchmark
/// convention is that everything travels in double-width slots.
pub trait FloatCount {
    fn float_count(&self) -> usize;
}

impl FloatCount for f64 {
    fn float_count(&self) -> usize {
        1
    }
}

impl FloatCount for bool {
    fn float_count(&self) -> usize {
        1
    }
}

impl FloatCount for usize {
    fn float_count(&self) -> usize {
        1
    }
}

impl FloatCount for Vec<f64> {
    fn float_count(&self) -> usize {
        self.len()
    }
}

impl FloatCount for nalgebra::DVector<f64> {
    fn float_count(&self) -> usize {
        self.len()
    }
}

impl FloatCount for nalgebra::DMatrix<f64> {
    fn float_count(&self) -> usize {
        self.nrows() * self.ncols()
    }
}

impl<T: FloatCount> FloatCount for Option<T> {
    fn float_count(&self) -> usize {
        self.as_ref().map_or(0, FloatCount::float_count)
    }
}

/// A failed computation sends nothing; the run is aborted by the caller.
impl<T: FloatCount, E> FloatCount for Result<T, E> {
    fn float_count(&self) -> usize {
        self.as_ref().map_or(0, FloatCount::float_count)
    }
}

impl<A: FloatCount, B: FloatCount> FloatCount for (A, B) {
    fn float_count(&self) -> usize {
        self.0.float_count() + self.1.float_count()
    }
}

impl<A: FloatCount, B: FloatCount, C: FloatCount> FloatCount for (A, B, C) {
    fn float_count(&self) -> usize {
        self.0.float_count() + self.1.float_count() + self.2.float_count()
    }
}

/// How per-agent work is executed. The parallel mode maps agents onto
/// the rayon pool; results come back in agent order either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TransportMode {
    Sequential,
    Parallel,
}

#[derive(Debug)]
pub struct SimNetwork {
    mode: TransportMode,
    n_agents: usize,
    phase: Phase,
    records: Vec<MsgRecord>,
}

impl SimNetwork {
    pub fn new(n_agents: usize, mode: TransportMode) -> Self {
        Self {
            mode,
            n_agents,
            phase: Phase::Setup,
            records: Vec::new(),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn mode(&self) -> TransportMode {
        self.mode
    }

    pub fn begin_setup(&mut self) {
        self.phase = Phase::Setup;
    }

    pub fn begin_iteration(&mut self, iter: usize) {
        self.phase = Phase::Iter(iter);
    }

    /// Runs `f` on every agent and collects the payloads each sends to
    /// the CE, recording one upstream message per agent.
    pub fn gather<A, T, F>(&mut self, kind: MsgKind, agents: &mut [A], f: F) -> Vec<T>
    where
        A: Send,
        T: FloatCount + Send,
        F: Fn(usize, &mut A) -> T + Sync,
    {
        assert_eq!(agents.len(), self.n_agents, "agent count mismatch");
        let out: Vec<T> = match self.mode {
            TransportMode::Sequential => agents
                .iter_mut()
                .enumerate()
                .map(|(i, a)| f(i, a))
                .collect(),
            TransportMode::Parallel => agents
                .par_iter_mut()
                .enumerate()
                .map(|(i, a)| f(i, a))
                .collect(),
        };
        for (i, payload) in out.iter().enumerate() {
            self.records.push(MsgRecord {
                phase: self.phase,
                kind,
                from: NodeId::Agent(i),
                to: NodeId::Ce,
                floats: payload.float_count(),
            });
        }
        out
    }

    /// Sends the same payload from the CE to every agent, applying `f`
    /// at each receiver, and records one downstream message per agent.
    pub fn broadcast<A, T, F, R>(
        &mut self,
        kind: MsgKind,
        payload: &T,
        agents: &mut [A],
        f: F,
    ) -> Vec<R>
    where
        A: Send,
        T: FloatCount + Sync,
        F: Fn(usize, &mut A, &T) -> R + Sync,
        R: Send,
    {
        assert_eq!(agents.len(), self.n_agents, "agent count mismatch");
        let out: Vec<R> = match self.mode {
            TransportMode::Sequential => agents
                .iter_mut()
                .enumerate()
                .map(|(i, a)| f(i, a, payload))
                .collect(),
            TransportMode::Parallel => agents
                .par_iter_mut()
                .enumerate()
                .map(|(i, a)| f(i, a, payload))
                .collect(),
        };
        let floats = payload.float_count();
        for i in 0..self.n_agents {
            self.records.push(MsgRecord {
                phase: self.phase,
                kind,
                from: NodeId::Ce,
                to: NodeId::Agent(i),
                floats,
            });
        }
        out
    }

    pub fn records(&self) -> &[MsgRecord] {
        &self.records
    }

    /// Total (upstream, downstream) floats during setup.
    pub fn setup_totals(&self) -> (usize, usize) {
        self.directional_totals(|r| r.phase == Phase::Setup)
    }

    /// Total (upstream, downstream) floats during iteration `iter`.
    pub fn iteration_totals(&self, iter: usize) -> (usize, usize) {
        self.directional_totals(|r| r.phase == Phase::Iter(iter))
    }

    /// Per-agent (upstream, downstream) floats during iteration `iter`.
    pub fn iteration_agent_totals(&self, iter: usize) -> Vec<(usize, usize)> {
        let mut out = vec![(0, 0); self.n_agents];
        for r in &self.records {
            if r.phase != Phase::Iter(iter) {
                continue;
            }
            match (r.from, r.to) {
                (NodeId::Agent(i), NodeId::Ce) => out[i].0 += r.floats,
                (NodeId::Ce, NodeId::Agent(i)) => out[i].1 += r.floats,
                _ => {}
            }
        }
        out
    }

    /// Largest iteration index seen, if any online traffic exists.
    pub fn last_iteration(&self) -> Option<usize> {
        self.records
            .iter()
            .filter_map(|r| match r.phase {
                Phase::Iter(i) => Some(i),
                Phase::Setup => None,
            })
            .max()
    }

    fn directional_totals<P: Fn(&MsgRecord) -> bool>(&self, pred: P) -> (usize, usize) {
        let mut up = 0;
        let mut down = 0;
        for r in self.records.iter().filter(|r| pred(r)) {
            match r.to {
                NodeId::Ce => up += r.floats,
                NodeId::Agent(_) => down += r.floats,
            }
        }
        (up, down)
    }

    /// Writes the ledger as CSV: `phase,kind,from,to,floats`.
    pub fn write_ledger_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["phase", "kind", "from", "to", "floats"])
            .map_err(into_io)?;
        for r in &self.records {
            let phase = match r.phase {
                Phase::Setup => "setup".to_string(),
                Phase::Iter(i) => i.to_string(),
            };
            w.write_record([
                phase,
                format!("{:?}", r.kind),
                node_label(r.from),
                node_label(r.to),
                r.floats.to_string(),
            ])
            .map_err(into_io)?;
        }
        w.flush()
    }
}

fn node_label(n: NodeId) -> String {
    match n {
        NodeId::Ce => "ce".to_string(),
        NodeId::Agent(i) => format!("agent_{i}"),
    }
}

fn into_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

/// Combines items pairwise in a fixed order: `(0+1), (2+3), ...`,
/// then the partial sums again, until one value remains.
///
/// Unlike a left fold, this order is independent of how the inputs
/// were produced, which keeps floating-point reductions at the CE
/// bitwise identical between sequential and parallel transport.
pub fn tree_reduce<T, F: Fn(&T, &T) -> T>(items: &[T], combine: F) -> Option<T>
where
    T: Clone,
{
    if items.is_empty() {
        return None;
    }
    let mut level: Vec<T> = items.to_vec();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        for pair in level.chunks(2) {
            match pair {
                [a, b] => next.push(combine(a, b)),
                [a] => next.push(a.clone()),
                _ => unreachable!(),
            }
        }
        level = next;
    }
    level.pop()
}
