//! Decentralized SGD baselines: D-PSGD, DFedAvg and DFedAvgM.
//!
//! All three mix with the same uniform closed-neighborhood average as
//! NTK-DFL. D-PSGD trains then mixes; DFedAvg(M) mixes then trains.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Loss, Mlp, WeightVector};
use crate::protocol::{neighborhood_average, MessageClass, RoundMessageLog};
use crate::seed;
use crate::topology::Topology;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    /// Mini-batch size; larger than the local dataset means full batch.
    pub batch_size: usize,
    pub local_epochs: usize,
    /// Heavy-ball coefficient `μ` in `v ← μ v + g`, `w ← w − lr v`.
    pub momentum: f64,
    pub loss: Loss,
}

impl SgdConfig {
    pub fn dpsgd() -> Self {
        Self {
            lr: 0.1,
            batch_size: 10,
            local_epochs: 1,
            momentum: 0.0,
            loss: Loss::SoftmaxCe,
        }
    }

    pub fn dfedavg() -> Self {
        Self {
            lr: 0.1,
            batch_size: 25,
            local_epochs: 20,
            momentum: 0.0,
            loss: Loss::SoftmaxCe,
        }
    }

    pub fn dfedavgm() -> Self {
        Self {
            lr: 0.01,
            batch_size: 50,
            local_epochs: 20,
            momentum: 0.9,
            loss: Loss::SoftmaxCe,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("must be non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        Ok(())
    }
}

/// Mini-batch SGD for `cfg.local_epochs` epochs, reshuffling each epoch with
/// an RNG seeded by `seed`. The momentum buffer starts at zero. A client
/// without data returns its weights unchanged.
pub fn local_sgd(
    mlp: &Mlp,
    w: &WeightVector,
    data: &Batch,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<WeightVector> {
    cfg.validate()?;
    let mut w = w.clone();
    if data.is_empty() {
        return Ok(w);
    }
    let mut rng = seed::rng(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity = WeightVector::zeros(w.len());
    let batch = cfg.batch_size.min(data.len());
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let g = mlp.loss_gradient(&w, &data.select(chunk), cfg.loss)?;
            velocity.scale(cfg.momentum);
            velocity.scaled_add(1.0, &g);
            w.scaled_add(-cfg.lr, &velocity);
        }
    }
    Ok(w)
}

/// SGD seed of `client` in `round`, derived from the run's SGD stream.
pub fn client_seed(sgd_seed: u64, round: usize, client: usize) -> u64 {
    seed::derive_seed(seed::round_seed(sgd_seed, round), client as u64)
}

fn local_step(
    mlp: &Mlp,
    weights: &mut [WeightVector],
    data: &[Batch],
    cfg: &SgdConfig,
    sgd_seed: u64,
    round: usize,
) -> Result<()> {
    if weights.len() != data.len() {
        return Err(Error::mismatch("client data", weights.len(), data.len()));
    }
    let results: Vec<Result<WeightVector>> = weights
        .par_iter()
        .zip(data.par_iter())
        .enumerate()
        .map(|(i, (w, d))| local_sgd(mlp, w, d, cfg, client_seed(sgd_seed, round, i)))
        .collect();
    for (i, (slot, r)) in weights.iter_mut().zip(results).enumerate() {
        *slot = r.map_err(|e| e.in_client(i))?;
    }
    Ok(())
}

fn mix(weights: &mut [WeightVector], topo: &Topology, log: &mut RoundMessageLog) -> Result<()> {
    let d = weights.first().map_or(0, WeightVector::len);
    for i in 0..topo.num_clients() {
        log.add(MessageClass::WeightsOut, topo.degree(i) * d);
    }
    let mixed = neighborhood_average(weights, topo)?;
    weights.clone_from_slice(&mixed);
    Ok(())
}

/// One D-PSGD round: local SGD, then neighborhood averaging.
#[allow(clippy::too_many_arguments)]
pub fn dpsgd_round(
    mlp: &Mlp,
    weights: &mut [WeightVector],
    data: &[Batch],
    topo: &Topology,
    cfg: &SgdConfig,
    sgd_seed: u64,
    round: usize,
    bytes_per_scalar: usize,
) -> Result<RoundMessageLog> {
    let mut log = RoundMessageLog::new(bytes_per_scalar);
    local_step(mlp, weights, data, cfg, sgd_seed, round).map_err(|e| e.in_round(round))?;
    mix(weights, topo, &mut log).map_err(|e| e.in_round(round))?;
    Ok(log)
}

/// One DFedAvg round: neighborhood averaging, then local SGD. Momentum from
/// `cfg` is used only when `momentum_on` (DFedAvgM).
#[allow(clippy::too_many_arguments)]
pub fn dfedavg_round(
    mlp: &Mlp,
    weights: &mut [WeightVector],
    data: &[Batch],
    topo: &Topology,
    cfg: &SgdConfig,
    momentum_on: bool,
    sgd_seed: u64,
    round: usize,
    bytes_per_scalar: usize,
) -> Result<RoundMessageLog> {
    let mut log = RoundMessageLog::new(bytes_per_scalar);
    let cfg = SgdConfig {
        momentum: if momentum_on { cfg.momentum } else { 0.0 },
        ..cfg.clone()
    };
    mix(weights, topo, &mut log).map_err(|e| e.in_round(round))?;
    local_step(mlp, weights, data, &cfg, sgd_seed, round).map_err(|e| e.in_round(round))?;
    Ok(log)
}
