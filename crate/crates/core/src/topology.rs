//! Per-round communication graphs.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologyKind {
    Regular { kappa: usize },
    // Empty braces so stray keys are rejected like for the other variants.
    Ring {},
    ErdosRenyi { mean_degree: f64 },
    /// Every pair connected.
    Complete {},
    /// No edges; clients train alone.
    Isolated {},
}

/// Undirected simple graph over `num_clients` clients.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    num_clients: usize,
    kind: TopologyKind,
    edges: BTreeSet<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl Topology {
    /// Builds a graph from an edge list. Pairs are normalized to `(min, max)`;
    /// self-loops and duplicates are rejected.
    pub fn from_edges(
        num_clients: usize,
        kind: TopologyKind,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            for v in [a, b] {
                if v >= num_clients {
                    return Err(Error::ClientOutOfRange {
                        index: v,
                        clients: num_clients,
                    });
                }
            }
            if a == b {
                return Err(Error::TopologyGeneration(format!("self-loop at {a}")));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(Error::TopologyGeneration(format!("duplicate edge {a}-{b}")));
            }
        }
        let mut adjacency = vec![Vec::new(); num_clients];
        for &(a, b) in &set {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        adjacency.iter_mut().for_each(|n| n.sort_unstable());
        Ok(Self {
            num_clients,
            kind,
            edges: set,
            adjacency,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    /// Edges as `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, i: usize) -> Result<&[usize]> {
        self.adjacency
            .get(i)
            .map(Vec::as_slice)
            .ok_or(Error::ClientOutOfRange {
                index: i,
                clients: self.num_clients,
            })
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency.get(i).map_or(0, Vec::len)
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.iter().map(Vec::len).collect()
    }

    /// `i` together with its neighbors, ascending.
    pub fn closed_neighborhood(&self, i: usize) -> Result<Vec<usize>> {
        let mut out = self.neighbors(i)?.to_vec();
        let at = out.partition_point(|&j| j < i);
        out.insert(at, i);
        Ok(out)
    }

    /// One `i j` pair per line.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for (a, b) in self.edges() {
            writeln!(out, "{a} {b}").expect("writing to a String");
        }
        out
    }
}

/// Random κ-regular simple graph by the pairing model: `κ` stubs per node are
/// matched one random pair at a time; a pair that would create a self-loop
/// or multi-edge is redrawn, and after too many redraws the whole matching
/// restarts.
pub fn random_regular(num_clients: usize, kappa: usize, seed: u64) -> Result<Topology> {
    if kappa == 0 || kappa >= num_clients || (num_clients * kappa) % 2 != 0 {
        return Err(Error::InfeasibleDegree {
            clients: num_clients,
            kappa,
        });
    }
    const MAX_REDRAWS: usize = 200;
    const MAX_RESTARTS: usize = 10_000;
    let mut rng = seed::rng(seed);
    'restart: for _ in 0..MAX_RESTARTS {
        let mut stubs: Vec<usize> = (0..num_clients)
            .flat_map(|v| std::iter::repeat(v).take(kappa))
            .collect();
        let mut edges = BTreeSet::new();
        while !stubs.is_empty() {
            let mut placed = false;
            for _ in 0..MAX_REDRAWS {
                let i = rng.random_range(0..stubs.len());
                let mut j = rng.random_range(0..stubs.len() - 1);
                if j >= i {
                    j += 1;
                }
                let (a, b) = (stubs[i], stubs[j]);
                if a != b && !edges.contains(&(a.min(b), a.max(b))) {
                    edges.insert((a.min(b), a.max(b)));
                    let (hi, lo) = (i.max(j), i.min(j));
                    stubs.swap_remove(hi);
                    stubs.swap_remove(lo);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return Topology::from_edges(num_clients, TopologyKind::Regular { kappa }, edges);
    }
    Err(Error::TopologyGeneration(format!(
        "no {kappa}-regular graph on {num_clients} nodes after {MAX_RESTARTS} restarts"
    )))
}

pub fn ring(num_clients: usize) -> Result<Topology> {
    if num_clients < 3 {
        return Err(Error::invalid(
            "num_clients",
            format!("a ring needs at least 3 clients, got {num_clients}"),
        ));
    }
    Topology::from_edges(
        num_clients,
        TopologyKind::Ring {},
        (0..num_clients).map(|i| (i, (i + 1) % num_clients)),
    )
}

/// G(M, p) with `p = mean_degree / (M − 1)`. `mean_degree = M − 1` gives the
/// complete graph. Isolated nodes are allowed.
pub fn erdos_renyi(num_clients: usize, mean_degree: f64, seed: u64) -> Result<Topology> {
    if num_clients < 2 {
        return Err(Error::invalid("num_clients", "need at least 2 clients"));
    }
    let max = (num_clients - 1) as f64;
    if !(mean_degree > 0.0 && mean_degree <= max) {
        return Err(Error::invalid(
            "mean_degree",
            format!("must lie in (0, {max}], got {mean_degree}"),
        ));
    }
    let p = mean_degree / max;
    let mut rng = seed::rng(seed);
    let mut edges = Vec::new();
    for a in 0..num_clients {
        for b in a + 1..num_clients {
            if rng.random::<f64>() < p {
                edges.push((a, b));
            }
        }
    }
    Topology::from_edges(num_clients, TopologyKind::ErdosRenyi { mean_degree }, edges)
}

pub fn complete(num_clients: usize) -> Topology {
    let edges = (0..num_clients).flat_map(|a| (a + 1..num_clients).map(move |b| (a, b)));
    Topology::from_edges(num_clients, TopologyKind::Complete {}, edges).expect("valid by construction")
}

pub fn isolated(num_clients: usize) -> Topology {
    Topology::from_edges(num_clients, TopologyKind::Isolated {}, []).expect("no edges")
}

pub fn generate(kind: TopologyKind, num_clients: usize, seed: u64) -> Result<Topology> {
    match kind {
        TopologyKind::Regular { kappa } => random_regular(num_clients, kappa, seed),
        TopologyKind::Ring {} => ring(num_clients),
        TopologyKind::ErdosRenyi { mean_degree } => erdos_renyi(num_clients, mean_degree, seed),
        TopologyKind::Complete {} => Ok(complete(num_clients)),
        TopologyKind::Isolated {} => Ok(isolated(num_clients)),
    }
}

/// Graph sequence of a run. Dynamic schedules draw a fresh graph per round
/// from `round_seed(seed, k)`; static schedules reuse the round-0 graph.
#[derive(Clone, Debug)]
pub struct TopologySchedule {
    kind: TopologyKind,
    num_clients: usize,
    dynamic: bool,
    seed: u64,
    fixed: Option<Topology>,
}

impl TopologySchedule {
    pub fn new(kind: TopologyKind, num_clients: usize, dynamic: bool, seed: u64) -> Result<Self> {
        let fixed = if dynamic {
            None
        } else {
            Some(generate(kind, num_clients, seed::round_seed(seed, 0))?)
        };
        Ok(Self {
            kind,
            num_clients,
            dynamic,
            seed,
            fixed,
        })
    }

    pub fn is_dynamic(&self) -> bool {
        self.dynamic
    }

    pub fn round(&self, k: usize) -> Result<Topology> {
        match &self.fixed {
            Some(t) => Ok(t.clone()),
            None => generate(self.kind, self.num_clients, seed::round_seed(self.seed, k)),
        }
    }
}
