//! Assignment of graphs (or whole datasets) to federated clients.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{DataError, GraphDataset, Result};
use crate::rng;

const MAX_DIRICHLET_DRAWS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PartitionMode {
    Iid,
    /// Per class, client shares are drawn from a symmetric Dirichlet with
    /// concentration `skew`. Draws are repeated until every client holds at
    /// least `min_per_client` graphs.
    LabelSkew { skew: f64, min_per_client: usize },
    /// Client `i` owns dataset `i` of the pool.
    CrossDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientPartition {
    pub mode: PartitionMode,
    /// Client id to graph indices in `pool[0]`, or to `[dataset index]` for
    /// cross-dataset partitions.
    pub assignments: BTreeMap<usize, Vec<usize>>,
}

impl ClientPartition {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    /// Builds each client's dataset from the pool it was partitioned from.
    pub fn materialize(&self, pool: &[GraphDataset]) -> Vec<GraphDataset> {
        self.assignments
            .iter()
            .map(|(&c, idx)| match self.mode {
                PartitionMode::CrossDataset => pool[idx[0]].clone(),
                _ => pool[0].subset(format!("{}/client{c}", pool[0].name), idx),
            })
            .collect()
    }
}

pub fn partition_clients(
    pool: &[GraphDataset],
    k: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<ClientPartition> {
    if k == 0 {
        return Err(DataError::BadMode("need at least one client".into()));
    }
    let assignments = match mode {
        PartitionMode::CrossDataset => {
            if pool.len() != k {
                return Err(DataError::BadMode(format!(
                    "cross-dataset needs one dataset per client ({} datasets, {k} clients)",
                    pool.len()
                )));
            }
            (0..k).map(|i| (i, vec![i])).collect()
        }
        PartitionMode::Iid => {
            let d = single(pool, k, 1)?;
            let mut order: Vec<usize> = (0..d.len()).collect();
            order.shuffle(&mut rng::stream(seed, "partition-iid", &[]));
            let n = d.len();
            (0..k)
                .map(|c| (c, order[c * n / k..(c + 1) * n / k].to_vec()))
                .collect()
        }
        PartitionMode::LabelSkew {
            skew,
            min_per_client,
        } => {
            if !(skew.is_finite() && skew > 0.0) {
                return Err(DataError::BadMode(format!("skew must be finite and > 0, got {skew}")));
            }
            let d = single(pool, k, min_per_client)?;
            label_skew(d, k, skew, min_per_client, seed)?
        }
    };
    Ok(ClientPartition { mode, assignments })
}

fn single(pool: &[GraphDataset], k: usize, min_per_client: usize) -> Result<&GraphDataset> {
    let [d] = pool else {
        return Err(DataError::BadMode(format!(
            "IID and label-skew partitions take one dataset, got {}",
            pool.len()
        )));
    };
    if d.len() < k * min_per_client.max(1) {
        return Err(DataError::BadMode(format!(
            "{} graphs cannot give {k} clients {} each",
            d.len(),
            min_per_client.max(1)
        )));
    }
    Ok(d)
}

fn label_skew(
    d: &GraphDataset,
    k: usize,
    skew: f64,
    min_per_client: usize,
    seed: u64,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    let gamma = Gamma::new(skew, 1.0).map_err(|e| DataError::BadMode(e.to_string()))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); d.num_classes];
    for (i, g) in d.graphs.iter().enumerate() {
        by_class[g.label()].push(i);
    }
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng::stream(seed, "partition-class", &[c as u64]));
    }
    for attempt in 0..MAX_DIRICHLET_DRAWS {
        let mut out: BTreeMap<usize, Vec<usize>> = (0..k).map(|c| (c, Vec::new())).collect();
        for (c, members) in by_class.iter().enumerate() {
            let mut r = rng::stream(seed, "partition-dirichlet", &[attempt, c as u64]);
            let raw: Vec<f64> = (0..k).map(|_| gamma.sample(&mut r)).collect();
            let total: f64 = raw.iter().sum();
            let n = members.len();
            let mut cum = 0.0;
            let mut start = 0;
            for (client, w) in raw.iter().enumerate() {
                cum += w;
                let end = if client + 1 == k || total <= 0.0 {
                    n
                } else {
                    ((cum / total * n as f64).round() as usize).min(n)
                };
                out.get_mut(&client).unwrap().extend(&members[start..end.max(start)]);
                start = end.max(start);
            }
        }
        if out.values().all(|v| v.len() >= min_per_client.max(1)) {
            for v in out.values_mut() {
                v.sort_unstable();
            }
            return Ok(out);
        }
    }
    Err(DataError::BadMode(format!(
        "no Dirichlet draw gave every client {min_per_client} graphs (skew {skew})"
    )))
}
