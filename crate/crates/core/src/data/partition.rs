use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::seed;

/// Assignment of training samples to clients.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    /// Sorted sample indices per client; lists are disjoint.
    pub assignment: Vec<Vec<usize>>,
    /// Label distribution `q_i` per client, each summing to 1.
    pub proportions: Vec<Vec<f64>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.assignment.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignment.iter().map(Vec::len).collect()
    }

    /// Clients that received no samples. They still take part in averaging.
    pub fn empty_clients(&self) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_empty())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Splits `total` into integer counts proportional to `weights` (which need
/// not be normalized), using largest-remainder rounding. Ties go to the lower
/// index.
pub(crate) fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    let quotas: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| total as f64 * w / sum).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn check_labels(labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut pools = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        pools[l].push(i);
    }
    Ok(pools)
}

fn empirical(labels: &[usize], indices: &[usize], classes: usize) -> Vec<f64> {
    if indices.is_empty() {
        return vec![1.0 / classes as f64; classes];
    }
    let mut q = vec![0.0; classes];
    for &i in indices {
        q[labels[i]] += 1.0;
    }
    let n = indices.len() as f64;
    q.iter_mut().for_each(|v| *v /= n);
    q
}

/// Label-skewed partition: each client draws `q_i ~ Dir(α·1_C)` and every
/// class pool is split across clients in proportion to their mass on that
/// class (largest-remainder rounding). Every sample lands on exactly one
/// client.
pub fn dirichlet_partition(
    labels: &[usize],
    classes: usize,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::invalid("num_clients", "must be at least 1"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("alpha", format!("must be positive, got {alpha}")));
    }
    let mut pools = check_labels(labels, classes)?;
    if let Some(c) = pools.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(c));
    }
    let mut rng = seed::rng(seed);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid("alpha", e.to_string()))?;

    let proportions: Vec<Vec<f64>> = (0..clients)
        .map(|_| {
            let mut q: Vec<f64> = (0..classes).map(|_| gamma.sample(&mut rng)).collect();
            let sum: f64 = q.iter().sum();
            if sum > 0.0 {
                q.iter_mut().for_each(|v| *v /= sum);
            } else {
                // Every draw underflowed (tiny α): all mass on one class.
                let c = rng.random_range(0..classes);
                q = vec![0.0; classes];
                q[c] = 1.0;
            }
            q
        })
        .collect();

    let mut assignment = vec![Vec::new(); clients];
    for (c, pool) in pools.iter_mut().enumerate() {
        pool.shuffle(&mut rng);
        let weights: Vec<f64> = proportions.iter().map(|q| q[c]).collect();
        let counts = largest_remainder(pool.len(), &weights);
        let mut start = 0;
        for (client, &n) in counts.iter().enumerate() {
            assignment[client].extend_from_slice(&pool[start..start + n]);
            start += n;
        }
    }
    assignment.iter_mut().for_each(|a| a.sort_unstable());
    Ok(Partition {
        assignment,
        proportions,
    })
}

/// Uniform random split into near-equal shards.
pub fn iid_partition(labels: &[usize], classes: usize, clients: usize, seed: u64) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::invalid("num_clients", "must be at least 1"));
    }
    check_labels(labels, classes)?;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut seed::rng(seed));
    let counts = largest_remainder(labels.len(), &vec![1.0; clients]);
    let mut start = 0;
    let assignment: Vec<Vec<usize>> = counts
        .iter()
        .map(|&n| {
            let mut part = order[start..start + n].to_vec();
            start += n;
            part.sort_unstable();
            part
        })
        .collect();
    let proportions = assignment
        .iter()
        .map(|a| empirical(labels, a, classes))
        .collect();
    Ok(Partition {
        assignment,
        proportions,
    })
}
