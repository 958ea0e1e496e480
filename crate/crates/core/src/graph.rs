//! Undirected graphs, node data and homophily measurement.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::{self, streams};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Immutable undirected graph.
///
/// Every edge is stored once as `(i, j)` with `i < j`; `adjacency` holds
/// both directions in CSR form with sorted neighbor lists. Self-loops are
/// never stored: when `self_loops_added` is set they are injected at
/// message-passing time so each node also attends to itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    self_loops_added: bool,
}

impl Graph {
    /// Builds a graph, normalising each pair to `i < j`.
    ///
    /// Self-loops, duplicates (in either orientation) and out-of-range
    /// indices are rejected.
    pub fn new(num_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut list = Vec::new();
        for (a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a}, {b}) out of range for {num_nodes} nodes"
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop on node {a}")));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(Error::InvalidGraph(format!("duplicate edge ({a}, {b})")));
            }
            list.push(e);
        }
        list.sort_unstable();
        Ok(Self::from_sorted_unique(num_nodes, list, true))
    }

    /// `edges` must already be unique, normalised and sorted.
    fn from_sorted_unique(num_nodes: usize, edges: Vec<(usize, usize)>, self_loops: bool) -> Self {
        let mut degree = vec![0usize; num_nodes];
        for &(i, j) in &edges {
            degree[i] += 1;
            degree[j] += 1;
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets[..num_nodes].to_vec();
        let mut neighbors = vec![0usize; offsets[num_nodes]];
        for &(i, j) in &edges {
            neighbors[fill[i]] = j;
            fill[i] += 1;
            neighbors[fill[j]] = i;
            fill[j] += 1;
        }
        for v in 0..num_nodes {
            neighbors[offsets[v]..offsets[v + 1]].sort_unstable();
        }
        Graph {
            num_nodes,
            edges,
            offsets,
            neighbors,
            self_loops_added: self_loops,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sorted open neighborhood of `v`.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn self_loops_added(&self) -> bool {
        self.self_loops_added
    }

    /// Same edges, with self-loop injection at message-passing time toggled.
    pub fn with_self_loops(mut self, on: bool) -> Self {
        self.self_loops_added = on;
        self
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        a < self.num_nodes && self.neighbors(a).binary_search(&b).is_ok()
    }

    /// Keeps only the edges for which `keep` returns true.
    pub fn filter_edges(&self, mut keep: impl FnMut(usize, usize) -> bool) -> Graph {
        let edges = self.edges.iter().copied().filter(|&(i, j)| keep(i, j)).collect();
        Graph::from_sorted_unique(self.num_nodes, edges, self.self_loops_added)
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.num_nodes {
            return Err(Error::InvalidData(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.num_nodes
            )));
        }
        Ok(())
    }
}

/// Node features, labels and the train/validation/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeData {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl NodeData {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Checks shapes, label range and split disjointness.
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.features.rows() != n {
            return Err(Error::InvalidData(format!(
                "{} feature rows for {} labels",
                self.features.rows(),
                n
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidData("num_classes must be positive".into()));
        }
        if let Some((i, &y)) = self.labels.iter().enumerate().find(|(_, &y)| y >= self.num_classes) {
            return Err(Error::InvalidData(format!(
                "label {y} of node {i} outside [0, {})",
                self.num_classes
            )));
        }
        let mut owner = vec![None; n];
        for (name, idx) in [("train", &self.train_idx), ("val", &self.val_idx), ("test", &self.test_idx)] {
            for &i in idx {
                if i >= n {
                    return Err(Error::InvalidData(format!("{name} index {i} out of range")));
                }
                if let Some(other) = owner[i] {
                    return Err(Error::InvalidData(format!(
                        "node {i} appears in both {other} and {name}"
                    )));
                }
                owner[i] = Some(name);
            }
        }
        Ok(())
    }

    pub fn train_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.num_nodes()];
        for &i in &self.train_idx {
            mask[i] = true;
        }
        mask
    }
}

/// Fraction of edges whose endpoints share a label. Each undirected edge
/// counts once; self-loops never enter.
pub fn edge_homophily(graph: &Graph, labels: &[usize]) -> Result<f64> {
    graph.check_labels(labels)?;
    if graph.num_edges() == 0 {
        return Err(Error::EdgelessGraph);
    }
    let intra = graph
        .edges()
        .iter()
        .filter(|&&(i, j)| labels[i] == labels[j])
        .count();
    Ok(intra as f64 / graph.num_edges() as f64)
}

/// Intra-class and inter-class edges, each in the graph's edge order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EdgePartition {
    pub intra: Vec<(usize, usize)>,
    pub inter: Vec<(usize, usize)>,
}

pub fn partition_edges(graph: &Graph, labels: &[usize]) -> Result<EdgePartition> {
    graph.check_labels(labels)?;
    let (intra, inter) = graph
        .edges()
        .iter()
        .partition(|&&(i, j)| labels[i] == labels[j]);
    Ok(EdgePartition { intra, inter })
}

/// Removes `round(k * |E_inter|)` inter-class edges chosen uniformly under
/// `seed`, rounding half up. Intra-class edges are untouched.
///
/// For a fixed seed the removed sets are nested in `k`: the inter-class
/// edges are shuffled once and a prefix is dropped.
pub fn remove_inter_class_edges(graph: &Graph, labels: &[usize], k: f64, seed: u64) -> Result<Graph> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::Range(format!("k = {k} outside [0, 1]")));
    }
    let EdgePartition { mut inter, .. } = partition_edges(graph, labels)?;
    let count = ((k * inter.len() as f64 + 0.5).floor() as usize).min(inter.len());
    let mut rng = rng::stream(seed, &[streams::EDGE_REMOVAL]);
    inter.shuffle(&mut rng);
    let removed: HashSet<(usize, usize)> = inter[..count].iter().copied().collect();
    Ok(graph.filter_edges(|i, j| !removed.contains(&(i, j))))
}

/// Parameters of a stochastic block model with equal block sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmSpec {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
}

/// Samples an SBM graph with one-hot class prototypes plus Gaussian noise
/// as features, and a per-class 30/10/60 train/val/test split.
///
/// Node `v` belongs to class `v / (num_nodes / num_classes)`.
pub fn generate_sbm(spec: &SbmSpec) -> Result<(Graph, NodeData)> {
    let SbmSpec {
        num_nodes: n,
        num_classes: c,
        p_intra,
        p_inter,
        feature_dim,
        feature_noise,
        seed,
    } = *spec;
    for (name, p) in [("p_intra", p_intra), ("p_inter", p_inter)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Range(format!("{name} = {p} is not a probability")));
        }
    }
    if c < 2 {
        return Err(Error::Range(format!("num_classes = {c}, need at least 2")));
    }
    if n == 0 || n % c != 0 {
        return Err(Error::Range(format!(
            "num_nodes = {n} is not a positive multiple of num_classes = {c}"
        )));
    }
    if feature_dim < c {
        return Err(Error::Range(format!(
            "feature_dim = {feature_dim} cannot hold {c} one-hot prototypes"
        )));
    }
    if !(feature_noise >= 0.0 && feature_noise.is_finite()) {
        return Err(Error::Range(format!("feature_noise = {feature_noise}")));
    }

    let block = n / c;
    let labels: Vec<usize> = (0..n).map(|v| v / block).collect();

    let mut rng = rng::stream(seed, &[streams::SBM_EDGES]);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] { p_intra } else { p_inter };
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let graph = Graph::from_sorted_unique(n, edges, true);

    let mut rng = rng::stream(seed, &[streams::SBM_FEATURES]);
    let noise = Normal::new(0.0, feature_noise).map_err(|e| Error::Range(e.to_string()))?;
    let mut features = Tensor::zeros(n, feature_dim);
    for v in 0..n {
        let row = features.row_mut(v);
        if feature_noise > 0.0 {
            for x in row.iter_mut() {
                *x = noise.sample(&mut rng);
            }
        }
        row[labels[v]] += 1.0;
    }

    let mut rng = rng::stream(seed, &[streams::SBM_SPLITS]);
    let (mut train_idx, mut val_idx, mut test_idx) = (Vec::new(), Vec::new(), Vec::new());
    for class in 0..c {
        let mut members: Vec<usize> = (class * block..(class + 1) * block).collect();
        members.shuffle(&mut rng);
        let n_train = ((0.3 * block as f64).round() as usize).max(1);
        let n_val = (0.1 * block as f64).round() as usize;
        let n_val = n_val.min(block - n_train);
        train_idx.extend_from_slice(&members[..n_train]);
        val_idx.extend_from_slice(&members[n_train..n_train + n_val]);
        test_idx.extend_from_slice(&members[n_train + n_val..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    test_idx.sort_unstable();

    let data = NodeData {
        features,
        labels,
        num_classes: c,
        train_idx,
        val_idx,
        test_idx,
    };
    Ok((graph, data))
}

/// G(n, p) random graph.
pub fn erdos_renyi(num_nodes: usize, p: f64, seed: u64) -> Result<Graph> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Range(format!("p = {p} is not a probability")));
    }
    let mut rng = rng::stream(seed, &[streams::SBM_EDGES]);
    let mut edges = Vec::new();
    for i in 0..num_nodes {
        for j in i + 1..num_nodes {
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Ok(Graph::from_sorted_unique(num_nodes, edges, true))
}
