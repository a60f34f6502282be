//! Agent-level simulation of the price negotiation between the operator and
//! the aggregators.
//!
//! Actors only exchange vectors in the dual (price) space: initial bids and
//! bid increments from aggregators, price broadcasts from the operator.
//! Every exchange goes through a [`Mailbox`] and is recorded in a
//! [`MessageLog`] that [`privacy_audit`] can check afterwards.
//!
//! The trace bookkeeping (objective, residuals, running means) is done by an
//! observer with a global view and is not part of any actor.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{kkt_residual, ConvergenceTrace, TraceRecord};
use crate::exec::{join, Execution};
use crate::pd::{
    BlockProblem, PdError, RunOptions, SamplingScheme, Solver, Stepsizes,
};
use crate::problem::{BlockWorkspace, OpfProblem};
use crate::projections::{BlockMetric, InnerTolerance, ProjectionError};
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    InitBid,
    DlmpBroadcast,
    BidDelta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agent {
    Dso,
    /// Aggregator by 0-based index.
    Aggregator(usize),
    /// Every aggregator.
    All,
}

impl fmt::Display for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Agent::Dso => f.write_str("dso"),
            Agent::Aggregator(a) => write!(f, "la{a}"),
            Agent::All => f.write_str("all"),
        }
    }
}

/// The vector space a payload lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    /// Prices and bids, one entry per balance row.
    Dual,
    /// Decision variables of a block. Never legitimately sent.
    Primal { block: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub space: Space,
    pub values: Vec<f64>,
}

impl Payload {
    pub fn dual(values: Vec<f64>) -> Self {
        Self { space: Space::Dual, values }
    }

    /// Hex SHA-256 of the little-endian bytes of the values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub kind: MessageKind,
    pub sender: Agent,
    pub receiver: Agent,
    pub k: usize,
    pub payload: Payload,
}

/// All messages of a run in send order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MessageLog {
    pub messages: Vec<Message>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LogLine {
    kind: MessageKind,
    k: usize,
    sender: Agent,
    receiver: Agent,
    space: Space,
    dim: usize,
    digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    payload: Option<Vec<f64>>,
}

impl MessageLog {
    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn count(&self, kind: MessageKind) -> usize {
        self.messages.iter().filter(|m| m.kind == kind).count()
    }

    /// One JSON record per line. Payload values are included on request;
    /// the digest always is.
    pub fn write_jsonl<W: Write>(&self, mut out: W, with_payload: bool) -> std::io::Result<()> {
        for m in &self.messages {
            let line = LogLine {
                kind: m.kind,
                k: m.k,
                sender: m.sender,
                receiver: m.receiver,
                space: m.payload.space,
                dim: m.payload.values.len(),
                digest: m.payload.digest(),
                payload: with_payload.then(|| m.payload.values.clone()),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads a log written with payloads.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, SimError> {
        let mut messages = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| SimError::Log(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogLine =
                serde_json::from_str(&line).map_err(|e| SimError::Log(format!("line {}: {e}", i + 1)))?;
            let values = rec
                .payload
                .ok_or_else(|| SimError::Log(format!("line {}: payload missing", i + 1)))?;
            let payload = Payload { space: rec.space, values };
            if payload.digest() != rec.digest {
                return Err(SimError::Log(format!("line {}: digest mismatch", i + 1)));
            }
            messages.push(Message { kind: rec.kind, sender: rec.sender, receiver: rec.receiver, k: rec.k, payload });
        }
        Ok(Self { messages })
    }

    /// Digest of the whole log (digests of all payloads in order).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.messages {
            h.update(format!("{:?}|{}|{}|{}|", m.kind, m.sender, m.receiver, m.k).as_bytes());
            h.update(m.payload.digest().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Rendezvous mailbox: messages are queued per receiver and logged on send.
#[derive(Debug, Default)]
pub struct Mailbox {
    queues: BTreeMap<Agent, VecDeque<Message>>,
    log: MessageLog,
}

impl Mailbox {
    pub fn send(&mut self, msg: Message) {
        self.log.messages.push(msg.clone());
        self.queues.entry(msg.receiver).or_default().push_back(msg);
    }

    pub fn receive(&mut self, agent: Agent) -> Option<Message> {
        self.queues.get_mut(&agent).and_then(|q| q.pop_front())
    }

    /// Latest broadcast, kept for late readers.
    pub fn latest_broadcast(&self) -> Option<&Message> {
        self.queues.get(&Agent::All).and_then(|q| q.back())
    }

    fn drain_broadcasts(&mut self) {
        if let Some(q) = self.queues.get_mut(&Agent::All) {
            while q.len() > 1 {
                q.pop_front();
            }
        }
    }

    pub fn into_log(self) -> MessageLog {
        self.log
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Solver(#[from] PdError),
    #[error("actor {agent} expected a {expected:?} message at iteration {k}")]
    Protocol { agent: Agent, expected: MessageKind, k: usize },
    #[error("message log: {0}")]
    Log(String),
}

struct DsoActor {
    x: Vec<f64>,
    y: Vec<f64>,
    gamma: Vec<f64>,
    sigma: f64,
    p: usize,
    metric: BlockMetric,
    ws: BlockWorkspace,
}

struct LaActor {
    index: usize,
    x: Vec<f64>,
    metric: BlockMetric,
    ws: BlockWorkspace,
}

fn accept(res: Result<crate::projections::ProxOutcome, ProjectionError>, k: usize, block: usize) -> Result<Vec<f64>, PdError> {
    match res {
        Ok(o) => Ok(o.point),
        Err(ProjectionError::NotConverged { point, iterations, residual }) => {
            log::warn!("iteration {k}: block {block} prox stopped after {iterations} inner steps (residual {residual:.2e})");
            Ok(point)
        }
        Err(source) => Err(PdError::Prox { iteration: k, block, source }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub iterations: usize,
    pub seed: u64,
    pub execution: Execution,
    pub kkt_every: usize,
    pub snapshot_every: usize,
    pub drift_window: usize,
    pub inner: InnerTolerance,
    pub allow_invalid: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            iterations: 2000,
            seed: 0,
            execution: Execution::default(),
            kkt_every: 0,
            snapshot_every: 0,
            drift_window: 50,
            inner: InnerTolerance::Schedule,
            allow_invalid: false,
        }
    }
}

/// A running negotiation.
pub struct Simulation<'p> {
    problem: &'p OpfProblem,
    sampling: SamplingScheme,
    rng: ChaCha8Rng,
    dso: DsoActor,
    las: Vec<LaActor>,
    mailbox: Mailbox,
    options: SimOptions,
    k: usize,
    // observer state
    trace: ConvergenceTrace,
    mean_x: Vec<Vec<f64>>,
    mean_residual: Vec<f64>,
    history: VecDeque<Vec<f64>>,
    kkt_ws: Vec<BlockWorkspace>,
}

impl<'p> Simulation<'p> {
    /// Initialization: every aggregator sends its initial bid, the operator
    /// forms the bid accumulator and broadcasts the first prices.
    pub fn new(problem: &'p OpfProblem, steps: &Stepsizes, options: SimOptions) -> Result<Self, SimError> {
        let p = problem.num_aggregators();
        let sampling = SamplingScheme::ppdlmp(p)?;
        if !steps.valid && !options.allow_invalid {
            return Err(PdError::Condition { margin: steps.margin }.into());
        }
        if steps.metrics.len() != p + 1 {
            return Err(PdError::Dimension { expected: p + 1, found: steps.metrics.len() }.into());
        }
        let sigma = steps.sigma;
        let weights = sampling.weights();
        let m = problem.dual_dim();
        let cs = problem.coupling_system();
        let mut mailbox = Mailbox::default();

        let las: Vec<LaActor> = (0..p)
            .map(|a| LaActor {
                index: a,
                x: problem.initial_point(a + 1),
                metric: steps.metrics[a + 1].scaled(weights[a + 1]),
                ws: problem.workspace(a + 1),
            })
            .collect();
        for la in &las {
            let mut bid: Vec<f64> = cs.b_la[la.index].iter().map(|v| -v).collect();
            cs.a_la[la.index].mul_add(1.0, &la.x, &mut bid);
            mailbox.send(Message {
                kind: MessageKind::InitBid,
                sender: Agent::Aggregator(la.index),
                receiver: Agent::Dso,
                k: 0,
                payload: Payload::dual(bid),
            });
        }

        let x0 = problem.initial_point(0);
        let mut gamma = vec![0.0; m];
        for a in 0..p {
            let msg = mailbox
                .receive(Agent::Dso)
                .filter(|msg| msg.kind == MessageKind::InitBid)
                .ok_or(SimError::Protocol { agent: Agent::Dso, expected: MessageKind::InitBid, k: 0 })?;
            debug_assert_eq!(msg.sender, Agent::Aggregator(a));
            for (g, d) in gamma.iter_mut().zip(&msg.payload.values) {
                *g += sigma * d;
            }
        }
        let mut y = gamma.clone();
        let mut own: Vec<f64> = cs.b0.iter().map(|v| -v).collect();
        cs.a0.mul_add(1.0, &x0, &mut own);
        for (yi, r) in y.iter_mut().zip(&own) {
            *yi += sigma * r;
        }
        mailbox.send(Message {
            kind: MessageKind::DlmpBroadcast,
            sender: Agent::Dso,
            receiver: Agent::All,
            k: 0,
            payload: Payload::dual(y.clone()),
        });

        let dso = DsoActor {
            x: x0,
            y,
            gamma,
            sigma,
            p,
            metric: steps.metrics[0].scaled(weights[0]),
            ws: problem.workspace(0),
        };
        let mut x_all = vec![dso.x.clone()];
        x_all.extend(las.iter().map(|l| l.x.clone()));
        let residual = problem.residual(&x_all);
        let kkt_ws = (0..=p).map(|i| problem.workspace(i)).collect();
        let mut sim = Self {
            problem,
            sampling,
            rng: ChaCha8Rng::seed_from_u64(options.seed),
            dso,
            las,
            mailbox,
            options,
            k: 0,
            trace: ConvergenceTrace::default(),
            mean_x: x_all,
            mean_residual: residual,
            history: VecDeque::new(),
            kkt_ws,
        };
        sim.trace.initial_dual = sim.dso.y.clone();
        sim.observe();
        Ok(sim)
    }

    pub fn iteration(&self) -> usize {
        self.k
    }

    pub fn prices(&self) -> &[f64] {
        &self.dso.y
    }

    pub fn bid_accumulator(&self) -> &[f64] {
        &self.dso.gamma
    }

    /// Current primal blocks, operator first.
    pub fn primal(&self) -> Vec<Vec<f64>> {
        let mut x = vec![self.dso.x.clone()];
        x.extend(self.las.iter().map(|l| l.x.clone()));
        x
    }

    pub fn trace(&self) -> &ConvergenceTrace {
        &self.trace
    }

    fn observe(&mut self) {
        let x = self.primal();
        let k = self.k;
        let residual = self.problem.residual(&x);
        if k >= 1 {
            let inv = 1.0 / k as f64;
            if k == 1 {
                self.mean_x = x.clone();
                self.mean_residual = residual.clone();
            } else {
                for (si, xi) in self.mean_x.iter_mut().zip(&x) {
                    for (a, b) in si.iter_mut().zip(xi) {
                        *a += (b - *a) * inv;
                    }
                }
                for (a, b) in self.mean_residual.iter_mut().zip(&residual) {
                    *a += (b - *a) * inv;
                }
            }
        }
        let y = &self.dso.y;
        let w = self.options.drift_window;
        self.history.push_back(y.clone());
        if self.history.len() > w + 1 {
            self.history.pop_front();
        }
        let drift = (w > 0 && self.history.len() == w + 1)
            .then(|| y.iter().zip(&self.history[0]).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())));
        let kkt = (self.options.kkt_every > 0 && k % self.options.kkt_every == 0)
            .then(|| kkt_residual(self.problem, &x, y, &mut self.kkt_ws))
            .flatten();
        let half_sq = |v: &[f64]| 0.5 * v.iter().map(|a| a * a).sum::<f64>();
        self.trace.records.push(TraceRecord {
            k,
            cost: self.problem.total_cost(&x),
            h_last: half_sq(&residual),
            h_erg: half_sq(&self.mean_residual),
            resid_inf: residual.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            kkt,
            dlmp_drift: drift,
        });
        if self.options.snapshot_every > 0 && k % self.options.snapshot_every == 0 {
            self.trace.snapshots.push((k, y.clone()));
        }
    }

    /// One negotiation round.
    pub fn step(&mut self) -> Result<(), SimError> {
        let k = self.k;
        let problem = self.problem;
        let tol = self.options.inner.at(k);
        let subset = self.sampling.subset(self.sampling.sample_index(&mut self.rng)).to_vec();
        let a = subset[1] - 1;

        // the drawn aggregator reads the current prices
        let prices = self
            .mailbox
            .latest_broadcast()
            .filter(|m| m.kind == MessageKind::DlmpBroadcast && m.k == k)
            .map(|m| m.payload.values.clone())
            .ok_or(SimError::Protocol { agent: Agent::Aggregator(a), expected: MessageKind::DlmpBroadcast, k })?;

        let dso = &mut self.dso;
        let la = &mut self.las[a];
        let (x0_new, xa_new) = join(
            self.options.execution,
            || {
                let mut lin = vec![0.0; dso.x.len()];
                problem.gradient(0, &dso.x, &mut lin);
                problem.coupling(0).mul_transpose_add(1.0, &dso.y, &mut lin);
                accept(problem.prox(0, &mut dso.ws, &dso.x, &lin, &dso.metric, tol), k, 0)
            },
            || {
                let mut lin = vec![0.0; la.x.len()];
                problem.gradient(a + 1, &la.x, &mut lin);
                problem.coupling(a + 1).mul_transpose_add(1.0, &prices, &mut lin);
                accept(problem.prox(a + 1, &mut la.ws, &la.x, &lin, &la.metric, tol), k, a + 1)
            },
        );
        let (x0_new, xa_new) = (x0_new?, xa_new?);

        let a_la: &SparseMatrix = problem.coupling(a + 1);
        let delta_x: Vec<f64> = xa_new.iter().zip(&la.x).map(|(n, o)| n - o).collect();
        let bid_delta = a_la.mul(&delta_x);
        la.x = xa_new;
        self.mailbox.send(Message {
            kind: MessageKind::BidDelta,
            sender: Agent::Aggregator(a),
            receiver: Agent::Dso,
            k,
            payload: Payload::dual(bid_delta),
        });

        let msg = self
            .mailbox
            .receive(Agent::Dso)
            .filter(|m| m.kind == MessageKind::BidDelta)
            .ok_or(SimError::Protocol { agent: Agent::Dso, expected: MessageKind::BidDelta, k })?;
        let delta = msg.payload.values;
        let sigma = dso.sigma;
        let cs = problem.coupling_system();
        // A0 (2 x0^{k+1} - x0^k) - b0
        let extrap: Vec<f64> = x0_new.iter().zip(&dso.x).map(|(n, o)| 2.0 * n - o).collect();
        let mut own: Vec<f64> = cs.b0.iter().map(|v| -v).collect();
        cs.a0.mul_add(1.0, &extrap, &mut own);
        let scale = sigma * (dso.p as f64 + 1.0);
        for j in 0..dso.y.len() {
            dso.y[j] += sigma * own[j] + dso.gamma[j] + scale * delta[j];
            dso.gamma[j] += sigma * delta[j];
        }
        dso.x = x0_new;
        self.k += 1;
        self.mailbox.drain_broadcasts();
        self.mailbox.send(Message {
            kind: MessageKind::DlmpBroadcast,
            sender: Agent::Dso,
            receiver: Agent::All,
            k: self.k,
            payload: Payload::dual(self.dso.y.clone()),
        });
        self.observe();
        Ok(())
    }

    pub fn finish(mut self) -> SimResult {
        let x = self.primal();
        if let Some(last) = self.trace.records.last_mut() {
            if last.kkt.is_none() {
                last.kkt = kkt_residual(self.problem, &x, &self.dso.y, &mut self.kkt_ws);
            }
        }
        SimResult { x, y: self.dso.y, trace: self.trace, log: self.mailbox.into_log() }
    }
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub trace: ConvergenceTrace,
    pub log: MessageLog,
}

pub fn simulate(problem: &OpfProblem, steps: &Stepsizes, options: SimOptions) -> Result<SimResult, SimError> {
    let iterations = options.iterations;
    let mut sim = Simulation::new(problem, steps, options)?;
    for _ in 0..iterations {
        sim.step()?;
    }
    Ok(sim.finish())
}

/// Runs the agent simulation and the generic block solver with the same
/// sampling draws and returns the largest deviation of primal and dual
/// iterates over `k = 0..=iterations`.
pub fn equivalence_harness(
    problem: &OpfProblem,
    steps: &Stepsizes,
    iterations: usize,
    seed: u64,
    inner: InnerTolerance,
) -> Result<f64, SimError> {
    let sim_opts = SimOptions {
        iterations,
        seed,
        execution: Execution::Sequential,
        drift_window: 0,
        inner,
        ..Default::default()
    };
    let mut sim = Simulation::new(problem, steps, sim_opts)?;
    let run_opts = RunOptions {
        iterations,
        seed,
        execution: Execution::Sequential,
        drift_window: 0,
        inner,
        ..Default::default()
    };
    let sampling = SamplingScheme::ppdlmp(problem.num_aggregators())?;
    let mut solver = Solver::new(problem, sampling, steps, run_opts)?;
    let compare = |sim: &Simulation, solver: &Solver<OpfProblem>| {
        let st = solver.state();
        let mut worst = sim.prices().iter().zip(&st.y).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        for (xs, xg) in sim.primal().iter().zip(&st.x) {
            for (a, b) in xs.iter().zip(xg) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    };
    let mut worst = compare(&sim, &solver);
    for _ in 0..iterations {
        sim.step()?;
        solver.step()?;
        worst = worst.max(compare(&sim, &solver));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub init_bids: usize,
    pub broadcasts: usize,
    pub bid_deltas: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AuditError {
    #[error("the log is empty; initialization messages are mandatory")]
    Empty,
    #[error("message {index} ({kind:?} from {sender} at k={k}): {reason}")]
    Violation { index: usize, kind: MessageKind, sender: Agent, k: usize, reason: String },
    #[error("message counts are inconsistent: {0}")]
    Counts(String),
}

/// Checks that every message carries a dual-space vector of the right size
/// between legitimate endpoints, and that the message counts match the
/// protocol.
pub fn privacy_audit(log: &MessageLog, dual_dim: usize, aggregators: usize) -> Result<AuditReport, AuditError> {
    if log.is_empty() {
        return Err(AuditError::Empty);
    }
    for (index, m) in log.messages.iter().enumerate() {
        let fail = |reason: String| AuditError::Violation { index, kind: m.kind, sender: m.sender, k: m.k, reason };
        if let Space::Primal { block } = m.payload.space {
            return Err(fail(format!("payload holds primal variables of block {block}")));
        }
        if m.payload.values.len() != dual_dim {
            return Err(fail(format!(
                "payload has {} entries, the price space has {dual_dim}",
                m.payload.values.len()
            )));
        }
        let endpoints_ok = match m.kind {
            MessageKind::InitBid | MessageKind::BidDelta => {
                matches!(m.sender, Agent::Aggregator(a) if a < aggregators) && m.receiver == Agent::Dso
            }
            MessageKind::DlmpBroadcast => m.sender == Agent::Dso && m.receiver == Agent::All,
        };
        if !endpoints_ok {
            return Err(fail(format!("unexpected route {} -> {}", m.sender, m.receiver)));
        }
    }
    let report = AuditReport {
        init_bids: log.count(MessageKind::InitBid),
        broadcasts: log.count(MessageKind::DlmpBroadcast),
        bid_deltas: log.count(MessageKind::BidDelta),
    };
    if report.init_bids != aggregators {
        return Err(AuditError::Counts(format!("{} initial bids for {aggregators} aggregators", report.init_bids)));
    }
    if report.broadcasts != report.bid_deltas + 1 {
        return Err(AuditError::Counts(format!(
            "{} broadcasts for {} bid increments",
            report.broadcasts, report.bid_deltas
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{random_radial_instance, NetworkInstance};
    use crate::pd::{problem_stepsizes, StepsizeOptions};

    fn setup(inst: NetworkInstance) -> (OpfProblem, Stepsizes) {
        let p = inst.num_aggregators();
        let problem = OpfProblem::new(inst);
        let sampling = SamplingScheme::ppdlmp(p).unwrap();
        let opts = StepsizeOptions { smoothness_divisor: p as f64, ..Default::default() };
        let steps = problem_stepsizes(&problem, &sampling, &opts).unwrap();
        (problem, steps)
    }

    fn small() -> (OpfProblem, Stepsizes) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        setup(random_radial_instance(&mut rng, 4, 2))
    }

    #[test]
    fn matches_generic_solver() {
        let (problem, steps) = small();
        let dev = equivalence_harness(&problem, &steps, 60, 5, InnerTolerance::Fixed(1e-12)).unwrap();
        assert!(dev <= 1e-10, "deviation {dev:e}");
    }

    #[test]
    fn bid_accumulator_tracks_aggregator_residual() {
        let (problem, steps) = small();
        let opts = SimOptions { iterations: 0, drift_window: 0, ..Default::default() };
        let mut sim = Simulation::new(&problem, &steps, opts).unwrap();
        for _ in 0..25 {
            sim.step().unwrap();
            let x = sim.primal();
            let cs = problem.coupling_system();
            let mut expect = vec![0.0; problem.dual_dim()];
            for (a, xa) in x[1..].iter().enumerate() {
                cs.a_la[a].mul_add(steps.sigma, xa, &mut expect);
                for (e, b) in expect.iter_mut().zip(&cs.b_la[a]) {
                    *e -= steps.sigma * b;
                }
            }
            let gap = expect.iter().zip(sim.bid_accumulator()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(gap < 1e-12, "gap {gap:e}");
        }
    }

    #[test]
    fn unsampled_aggregators_keep_their_state() {
        let (problem, steps) = small();
        let opts = SimOptions { iterations: 0, drift_window: 0, ..Default::default() };
        let mut sim = Simulation::new(&problem, &steps, opts).unwrap();
        for _ in 0..20 {
            let before = sim.primal();
            sim.step().unwrap();
            let after = sim.primal();
            let changed = (1..before.len()).filter(|&i| before[i] != after[i]).count();
            assert!(changed <= 1);
        }
    }

    #[test]
    fn audit_accepts_run_and_rejects_tampering() {
        let (problem, steps) = small();
        let k = 15;
        let res = simulate(&problem, &steps, SimOptions { iterations: k, ..Default::default() }).unwrap();
        let p = problem.num_aggregators();
        let m = problem.dual_dim();
        let report = privacy_audit(&res.log, m, p).unwrap();
        assert_eq!(report, AuditReport { init_bids: p, broadcasts: k + 1, bid_deltas: k });

        assert_eq!(privacy_audit(&MessageLog::default(), m, p), Err(AuditError::Empty));

        let mut bad = res.log.clone();
        bad.messages.insert(
            3,
            Message {
                kind: MessageKind::BidDelta,
                sender: Agent::Aggregator(0),
                receiver: Agent::Dso,
                k: 1,
                payload: Payload { space: Space::Primal { block: 1 }, values: vec![0.0; m] },
            },
        );
        assert!(matches!(privacy_audit(&bad, m, p), Err(AuditError::Violation { index: 3, .. })));

        let mut short = res.log.clone();
        short.messages[p].payload.values.pop();
        assert!(matches!(privacy_audit(&short, m, p), Err(AuditError::Violation { .. })));
    }

    #[test]
    fn log_round_trip() {
        let (problem, steps) = small();
        let res = simulate(&problem, &steps, SimOptions { iterations: 5, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        res.log.write_jsonl(&mut buf, true).unwrap();
        let back = MessageLog::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, res.log);
        assert_eq!(back.digest(), res.log.digest());
        let text = String::from_utf8(buf).unwrap();
        let tampered = text.replacen("\"payload\":[", "\"payload\":[1.5,", 1);
        assert!(MessageLog::read_jsonl(tampered.as_bytes()).is_err());
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let (problem, steps) = small();
        let run = |execution| {
            simulate(&problem, &steps, SimOptions { iterations: 30, execution, ..Default::default() }).unwrap()
        };
        let a = run(Execution::Sequential);
        let b = run(Execution::Parallel);
        assert_eq!(a.y, b.y);
        assert_eq!(a.log, b.log);
    }
}
