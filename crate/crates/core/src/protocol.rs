//! One communication round of NTK-DFL over a client graph.
//!
//! A round runs three phases separated by barriers:
//!
//! 1. averaging: every client sends its weights to its neighbors, replaces
//!    its own by the closed-neighborhood mean `w̄_i` and sends `w̄_i` back;
//! 2. Jacobians: client `i` evaluates `f` and `∂f/∂w` on its own samples at
//!    `w̄_j` for every `j` in its closed neighborhood and ships the block,
//!    its targets and the evaluations to `j`;
//! 3. evolution: each client stacks what it received and evolves `w̄_i` in
//!    closed form under the empirical NTK.
//!
//! With `m > 1` Jacobian batches, each client's rows are split into `m`
//! contiguous batches and phases 2 and 3 repeat `m` times. Before every
//! repeat after the first, clients resend their freshly evolved weights so
//! neighbors can linearize at the current point. Averaging happens only at
//! round start.
//!
//! All traffic goes through per-client inboxes owned by the orchestrator.
//! Envelopes carry the round and phase they were sent in, and reading an
//! inbox with foreign tags is a protocol violation.

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, JacobianOperator, Mlp, MlpJacobian, WeightVector};
use crate::ntk;
use crate::topology::Topology;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub eta: f64,
    pub t_grid: Vec<usize>,
    /// Number of Jacobian batches `m` per round.
    pub jacobian_batches: usize,
    pub per_round_averaging: bool,
    /// Wire size of one scalar. Computation is always 64-bit.
    pub bytes_per_scalar: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            t_grid: (1..=8).map(|k| 100 * k).collect(),
            jacobian_batches: 1,
            per_round_averaging: true,
            bytes_per_scalar: 4,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("eta", format!("must be positive, got {}", self.eta)));
        }
        if self.t_grid.is_empty() {
            return Err(Error::Empty("timestep grid"));
        }
        if self.t_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("t_grid", "timesteps must be strictly ascending"));
        }
        if self.jacobian_batches == 0 {
            return Err(Error::invalid("jacobian_batches", "must be at least 1"));
        }
        if self.bytes_per_scalar == 0 {
            return Err(Error::invalid("bytes_per_scalar", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum MessageClass {
    WeightsOut,
    AvgWeightsBack,
    Jacobians,
    Labels,
    Evals,
}

impl MessageClass {
    pub const ALL: [MessageClass; 5] = [
        MessageClass::WeightsOut,
        MessageClass::AvgWeightsBack,
        MessageClass::Jacobians,
        MessageClass::Labels,
        MessageClass::Evals,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MessageClass::WeightsOut => "weights_out",
            MessageClass::AvgWeightsBack => "avg_weights_back",
            MessageClass::Jacobians => "jacobians",
            MessageClass::Labels => "labels",
            MessageClass::Evals => "evals",
        }
    }
}

/// Scalars sent per message class during one round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundMessageLog {
    scalars: [u64; 5],
    bytes_per_scalar: u64,
}

impl RoundMessageLog {
    pub fn new(bytes_per_scalar: usize) -> Self {
        Self {
            scalars: [0; 5],
            bytes_per_scalar: bytes_per_scalar as u64,
        }
    }

    pub fn add(&mut self, class: MessageClass, scalars: usize) {
        self.scalars[class as usize] += scalars as u64;
    }

    pub fn scalars(&self, class: MessageClass) -> u64 {
        self.scalars[class as usize]
    }

    pub fn scalars_sent(&self) -> u64 {
        self.scalars.iter().sum()
    }

    pub fn bytes_sent(&self) -> u64 {
        self.scalars_sent() * self.bytes_per_scalar
    }

    /// Adds another log's counts (same wire size assumed).
    pub fn merge(&mut self, other: &RoundMessageLog) {
        for (a, b) in self.scalars.iter_mut().zip(other.scalars) {
            *a += b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Weights { sub_round: usize },
    AveragedWeights,
    Jacobians { sub_round: usize },
}

// Messages are moved, never copied in bulk, so the size gap is harmless.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum Payload {
    Weights(WeightVector),
    Jacobian {
        jacobian: MlpJacobian,
        targets: Array2<f64>,
        evals: Array2<f64>,
    },
}

#[derive(Clone, Debug)]
pub struct Envelope {
    pub round: usize,
    pub phase: Phase,
    pub from: usize,
    pub payload: Payload,
}

#[derive(Clone, Debug, Default)]
pub struct Inbox {
    messages: Vec<Envelope>,
}

impl Inbox {
    pub fn push(&mut self, envelope: Envelope) {
        self.messages.push(envelope);
    }

    pub fn messages(&self) -> &[Envelope] {
        &self.messages
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// Empties the inbox, returning its messages ordered by sender. Every
    /// message must carry the expected round and phase.
    pub fn drain(&mut self, round: usize, phase: Phase) -> Result<Vec<Envelope>> {
        let mut out = std::mem::take(&mut self.messages);
        if let Some(bad) = out.iter().find(|e| e.round != round || e.phase != phase) {
            return Err(Error::ProtocolViolation(format!(
                "message from client {} tagged round {} {:?}, expected round {round} {phase:?}",
                bad.from, bad.round, bad.phase
            )));
        }
        out.sort_by_key(|e| e.from);
        Ok(out)
    }
}

/// What a client saw in its last evolution step.
#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionSummary {
    pub stacked_rows: usize,
    pub chosen_t: usize,
    /// Stacked squared-error loss at `t = 0`.
    pub initial_loss: f64,
    pub loss_curve: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub weights: WeightVector,
    pub data: Batch,
    pub inbox: Inbox,
    /// Weights most recently received from each neighbor this round.
    peer_weights: BTreeMap<usize, WeightVector>,
    pub last_evolution: Option<EvolutionSummary>,
}

impl ClientState {
    pub fn new(id: usize, weights: WeightVector, data: Batch) -> Self {
        Self {
            id,
            weights,
            data,
            inbox: Inbox::default(),
            peer_weights: BTreeMap::new(),
            last_evolution: None,
        }
    }

    pub fn peer_weights(&self) -> &BTreeMap<usize, WeightVector> {
        &self.peer_weights
    }
}

fn check_states(states: &[ClientState], topo: &Topology) -> Result<()> {
    if states.len() != topo.num_clients() {
        return Err(Error::mismatch("client count", topo.num_clients(), states.len()));
    }
    if let Some((i, s)) = states.iter().enumerate().find(|(i, s)| s.id != *i) {
        return Err(Error::ProtocolViolation(format!(
            "client at position {i} has id {}",
            s.id
        )));
    }
    let d = states.first().map_or(0, |s| s.weights.len());
    for s in states {
        if s.weights.len() != d {
            return Err(Error::mismatch("weight length", d, s.weights.len()).in_client(s.id));
        }
    }
    Ok(())
}

/// Every client sends its current weights to all neighbors; receivers record
/// them as peer weights.
fn broadcast_weights(
    states: &mut [ClientState],
    topo: &Topology,
    round: usize,
    phase: Phase,
    class: MessageClass,
    log: &mut RoundMessageLog,
) -> Result<()> {
    let outgoing: Vec<(usize, WeightVector)> =
        states.iter().map(|s| (s.id, s.weights.clone())).collect();
    for (from, w) in outgoing {
        for &to in topo.neighbors(from)? {
            log.add(class, w.len());
            states[to].inbox.push(Envelope {
                round,
                phase,
                from,
                payload: Payload::Weights(w.clone()),
            });
        }
    }
    for s in states.iter_mut() {
        s.peer_weights.clear();
        for e in s.inbox.drain(round, phase)? {
            match e.payload {
                Payload::Weights(w) => {
                    s.peer_weights.insert(e.from, w);
                }
                Payload::Jacobian { .. } => {
                    return Err(Error::ProtocolViolation("jacobian in weight phase".into()))
                }
            }
        }
    }
    Ok(())
}

/// Closed-neighborhood mean `(w_i + Σ_{j∈N(i)} w_j) / (|N(i)| + 1)` for every
/// client, summed in ascending client order.
pub fn neighborhood_average(weights: &[WeightVector], topo: &Topology) -> Result<Vec<WeightVector>> {
    if weights.len() != topo.num_clients() {
        return Err(Error::mismatch("client count", topo.num_clients(), weights.len()));
    }
    (0..weights.len())
        .map(|i| {
            let hood = topo.closed_neighborhood(i)?;
            WeightVector::mean(hood.iter().map(|&j| &weights[j]))
        })
        .collect()
}

/// Averaging phase. With averaging on, each client's weights become `w̄_i`
/// and its peer table holds `w̄_j` of every neighbor afterwards. With
/// averaging off, weights are still exchanged (neighbors need them to
/// linearize) but left unchanged. Returns the per-client base weights.
pub fn phase_average(
    states: &mut [ClientState],
    topo: &Topology,
    round: usize,
    averaging: bool,
    log: &mut RoundMessageLog,
) -> Result<Vec<WeightVector>> {
    check_states(states, topo)?;
    broadcast_weights(
        states,
        topo,
        round,
        Phase::Weights { sub_round: 0 },
        MessageClass::WeightsOut,
        log,
    )?;
    if averaging {
        for s in states.iter_mut() {
            let own = std::iter::once((s.id, &s.weights));
            let mut hood: Vec<(usize, &WeightVector)> =
                s.peer_weights.iter().map(|(&j, w)| (j, w)).chain(own).collect();
            hood.sort_by_key(|&(j, _)| j);
            let averaged = WeightVector::mean(hood.into_iter().map(|(_, w)| w))?;
            s.weights = averaged;
        }
        broadcast_weights(
            states,
            topo,
            round,
            Phase::AveragedWeights,
            MessageClass::AvgWeightsBack,
            log,
        )?;
    }
    Ok(states.iter().map(|s| s.weights.clone()).collect())
}

/// Splits `n` rows into `m` contiguous near-equal ranges; the first `n mod m`
/// ranges get one extra row.
pub fn batch_ranges(n: usize, m: usize) -> Vec<Range<usize>> {
    let (base, extra) = (n / m, n % m);
    let mut start = 0;
    (0..m)
        .map(|b| {
            let len = base + usize::from(b < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Jacobian phase for one sub-round. Client `i` evaluates its rows in
/// `rows[i]` at the weights of every member `j` of its closed neighborhood and
/// delivers the block to `j`.
pub fn phase_jacobians(
    states: &mut [ClientState],
    mlp: &Mlp,
    topo: &Topology,
    round: usize,
    sub_round: usize,
    rows: &[Range<usize>],
    log: &mut RoundMessageLog,
) -> Result<()> {
    check_states(states, topo)?;
    if rows.len() != states.len() {
        return Err(Error::mismatch("row ranges", states.len(), rows.len()));
    }
    let phase = Phase::Jacobians { sub_round };
    let outgoing: Vec<Result<Vec<(usize, Envelope)>>> = states
        .par_iter()
        .map(|s| {
            let batch = s.data.slice(rows[s.id].clone());
            let mut out = Vec::new();
            if batch.is_empty() {
                return Ok(out);
            }
            for j in topo.closed_neighborhood(s.id)? {
                let w = if j == s.id {
                    &s.weights
                } else {
                    s.peer_weights.get(&j).ok_or_else(|| {
                        Error::ProtocolViolation(format!("no weights from neighbor {j}"))
                    })?
                };
                let (evals, jacobian) = mlp.forward_with_jacobian(w, batch.inputs.view(), s.id)?;
                let env = Envelope {
                    round,
                    phase,
                    from: s.id,
                    payload: Payload::Jacobian {
                        jacobian,
                        targets: batch.targets.clone(),
                        evals,
                    },
                };
                out.push((j, env));
            }
            Ok(out)
        })
        .collect();

    let d = mlp.param_count();
    let d2 = mlp.dims().output_dim;
    for (from, sent) in outgoing.into_iter().enumerate() {
        for (to, env) in sent.map_err(|e| e.in_client(from))? {
            if to != from {
                let n = rows[from].len();
                log.add(MessageClass::Jacobians, n * d2 * d);
                log.add(MessageClass::Labels, n * d2);
                log.add(MessageClass::Evals, n * d2);
            }
            states[to].inbox.push(env);
        }
    }
    Ok(())
}

/// Stacked Jacobian, targets and evaluations assembled from an inbox.
pub struct Stack {
    pub jacobian: MlpJacobian,
    pub targets: Array2<f64>,
    pub evals: Array2<f64>,
}

fn assemble(messages: Vec<Envelope>) -> Result<Option<Stack>> {
    let mut jacs = Vec::new();
    let mut targets = Vec::new();
    let mut evals = Vec::new();
    for e in messages {
        match e.payload {
            Payload::Jacobian {
                jacobian,
                targets: y,
                evals: f,
            } => {
                jacs.push(jacobian);
                targets.push(y);
                evals.push(f);
            }
            Payload::Weights(_) => {
                return Err(Error::ProtocolViolation("weights in jacobian phase".into()))
            }
        }
    }
    if jacs.is_empty() {
        return Ok(None);
    }
    let cat = |parts: &[Array2<f64>]| {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(0), &views).map_err(|_| Error::ProtocolViolation("ragged blocks".into()))
    };
    Ok(Some(Stack {
        jacobian: MlpJacobian::concat(&jacs)?,
        targets: cat(&targets)?,
        evals: cat(&evals)?,
    }))
}

/// Evolution phase: each client stacks its inbox and evolves its weights.
/// A client that received no rows keeps its weights.
pub fn phase_evolve(
    states: &mut [ClientState],
    cfg: &ProtocolConfig,
    round: usize,
    sub_round: usize,
) -> Result<()> {
    let phase = Phase::Jacobians { sub_round };
    let results: Vec<Result<()>> = states
        .par_iter_mut()
        .map(|s| {
            let stack = match assemble(s.inbox.drain(round, phase)?)? {
                Some(stack) => stack,
                None => {
                    s.last_evolution = None;
                    return Ok(());
                }
            };
            let result = ntk::evolve(
                &stack.jacobian,
                &stack.targets,
                &stack.evals,
                &s.weights,
                cfg.eta,
                &cfg.t_grid,
            )?;
            s.last_evolution = Some(EvolutionSummary {
                stacked_rows: stack.jacobian.rows(),
                chosen_t: result.chosen_t,
                initial_loss: ntk::residual_loss(&stack.evals, &stack.targets),
                loss_curve: result.loss_curve,
            });
            s.weights = result.new_weights;
            Ok(())
        })
        .collect();
    for (i, r) in results.into_iter().enumerate() {
        r.map_err(|e| e.in_client(i))?;
    }
    Ok(())
}

/// Runs one full round and returns its message tally.
pub fn run_round(
    states: &mut [ClientState],
    mlp: &Mlp,
    topo: &Topology,
    cfg: &ProtocolConfig,
    round: usize,
) -> Result<RoundMessageLog> {
    cfg.validate()?;
    let body = |states: &mut [ClientState]| -> Result<RoundMessageLog> {
        let mut log = RoundMessageLog::new(cfg.bytes_per_scalar);
        phase_average(states, topo, round, cfg.per_round_averaging, &mut log)?;
        let ranges: Vec<Vec<Range<usize>>> = states
            .iter()
            .map(|s| batch_ranges(s.data.len(), cfg.jacobian_batches))
            .collect();
        for b in 0..cfg.jacobian_batches {
            if b > 0 {
                broadcast_weights(
                    states,
                    topo,
                    round,
                    Phase::Weights { sub_round: b },
                    MessageClass::WeightsOut,
                    &mut log,
                )?;
            }
            let rows: Vec<Range<usize>> = ranges.iter().map(|r| r[b].clone()).collect();
            phase_jacobians(states, mlp, topo, round, b, &rows, &mut log)?;
            phase_evolve(states, cfg, round, b)?;
        }
        for s in states.iter() {
            if !s.weights.is_finite() {
                return Err(
                    Error::invalid("weights", "non-finite weights after round").in_client(s.id)
                );
            }
        }
        Ok(log)
    };
    body(states).map_err(|e| e.in_round(round))
}
