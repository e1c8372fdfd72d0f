//! Graph classification datasets: representation, loading, generation,
//! splitting and client partitioning.

mod partition;
mod synth;
mod tu;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::linalg::Matrix;
use crate::rng;

pub use partition::{partition_clients, ClientPartition, PartitionMode};
pub use synth::{synth_generate, Motif, MotifMix, SynthSpec};
pub use tu::{load_tu_dataset, write_fixture, FIXTURE_NAME};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing dataset file: {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: node index {index} out of range (dataset has {limit} nodes)")]
    IndexOutOfRange {
        file: String,
        line: usize,
        index: usize,
        limit: usize,
    },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("bad synthetic spec: {0}")]
    BadSpec(String),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios((f64, f64, f64)),
    #[error("bad partition request: {0}")]
    BadMode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Undirected graph with node features and a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    features: Matrix,
    label: usize,
}

impl Graph {
    /// Edges are deduplicated as undirected pairs; self-loops are dropped
    /// because every node already aggregates its own state.
    pub fn new(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Matrix,
        label: usize,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(DataError::InvalidGraph("graph has no nodes".into()));
        }
        if features.rows() != num_nodes {
            return Err(DataError::InvalidGraph(format!(
                "feature matrix has {} rows for {num_nodes} nodes",
                features.rows()
            )));
        }
        if !features.is_finite() {
            return Err(DataError::InvalidGraph("non-finite node features".into()));
        }
        let mut norm: Vec<(usize, usize)> = Vec::new();
        for (i, j) in edges {
            if i >= num_nodes || j >= num_nodes {
                return Err(DataError::InvalidGraph(format!(
                    "edge ({i}, {j}) outside {num_nodes} nodes"
                )));
            }
            if i != j {
                norm.push((i.min(j), i.max(j)));
            }
        }
        norm.sort_unstable();
        norm.dedup();
        let mut neighbors = vec![Vec::new(); num_nodes];
        for &(i, j) in &norm {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        Ok(Self {
            num_nodes,
            edges: norm,
            neighbors,
            features,
            label,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Undirected edges as `(lo, hi)` pairs, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn label(&self) -> usize {
        self.label
    }

    /// Same graph with node `i` renamed to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        assert_eq!(perm.len(), self.num_nodes);
        let mut features = Matrix::zeros(self.num_nodes, self.feature_dim());
        for (old, &new) in perm.iter().enumerate() {
            features.row_mut(new).copy_from_slice(self.features.row(old));
        }
        Graph::new(
            self.num_nodes,
            self.edges.iter().map(|&(i, j)| (perm[i], perm[j])),
            features,
            self.label,
        )
    }

    /// Copy with features zero-padded on the right to `dim` columns.
    pub fn padded(&self, dim: usize) -> Self {
        if dim <= self.feature_dim() {
            return self.clone();
        }
        let mut f = Matrix::zeros(self.num_nodes, dim);
        for r in 0..self.num_nodes {
            f.row_mut(r)[..self.feature_dim()].copy_from_slice(self.features.row(r));
        }
        Self {
            features: f,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl GraphDataset {
    pub fn new(
        name: impl Into<String>,
        graphs: Vec<Graph>,
        num_classes: usize,
        feature_dim: usize,
    ) -> Result<Self> {
        for (i, g) in graphs.iter().enumerate() {
            if g.label() >= num_classes {
                return Err(DataError::InvalidGraph(format!(
                    "graph {i} has label {} but only {num_classes} classes",
                    g.label()
                )));
            }
            if g.feature_dim() != feature_dim {
                return Err(DataError::InvalidGraph(format!(
                    "graph {i} has feature dim {} (expected {feature_dim})",
                    g.feature_dim()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            graphs,
            num_classes,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for g in &self.graphs {
            counts[g.label()] += 1;
        }
        counts
    }

    /// Subset by index, keeping class count and feature dimension.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Self {
        Self {
            name: name.into(),
            graphs: indices.iter().map(|&i| self.graphs[i].clone()).collect(),
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
        }
    }

    /// Zero-pads node features to `dim` columns.
    pub fn padded(&self, dim: usize) -> Self {
        Self {
            name: self.name.clone(),
            graphs: self.graphs.iter().map(|g| g.padded(dim)).collect(),
            num_classes: self.num_classes,
            feature_dim: dim.max(self.feature_dim),
        }
    }
}

/// Shuffles by `seed` and cuts into train/val/test. Validation and test get
/// `⌊n·ratio⌋` graphs; the remainder goes to train.
pub fn split_dataset(
    d: &GraphDataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(GraphDataset, GraphDataset, GraphDataset)> {
    let (tr, va, te) = ratios;
    let ok = [tr, va, te].iter().all(|r| r.is_finite() && *r >= 0.0)
        && (tr + va + te - 1.0).abs() <= 1e-9;
    if !ok {
        return Err(DataError::BadRatios(ratios));
    }
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split", &[]));
    let n_val = (n as f64 * va).floor() as usize;
    let n_test = (n as f64 * te).floor() as usize;
    let n_train = n - n_val - n_test;
    let train = d.subset(format!("{}/train", d.name), &order[..n_train]);
    let val = d.subset(format!("{}/val", d.name), &order[n_train..n_train + n_val]);
    let test = d.subset(format!("{}/test", d.name), &order[n_train + n_val..]);
    Ok((train, val, test))
}
