//! Seeded synthetic graphs for tests, benchmarks and smoke runs.

use super::Graph;
use crate::numkit::{Matrix, Rng};
use crate::Result;

/// Two equal clusters with intra-cluster edges only. Every node of cluster
/// `c` carries exactly `two_cluster_prototype(c, feature_dim)`.
pub fn two_cluster(per_cluster: usize, feature_dim: usize, p_in: f64, seed: u64) -> Result<Graph> {
    let n = 2 * per_cluster;
    let mut rng = Rng::new(seed);
    let mut edges = Vec::new();
    for c in 0..2 {
        let base = c * per_cluster;
        for i in 0..per_cluster {
            // A ring keeps each cluster connected; extra edges are random.
            if per_cluster > 1 {
                edges.push((base + i, base + (i + 1) % per_cluster));
            }
            for j in i + 2..per_cluster {
                if rng.bernoulli(p_in) {
                    edges.push((base + i, base + j));
                }
            }
        }
    }
    let mut features = Matrix::zeros((n, feature_dim));
    let labels: Vec<usize> = (0..n).map(|i| i / per_cluster).collect();
    for (i, &c) in labels.iter().enumerate() {
        features.row_mut(i).assign(&two_cluster_prototype(c, feature_dim).row(0));
    }
    Ok(Graph::from_edges(features, &edges, labels, 2)?.0)
}

/// Binary prototype of cluster `c`: ones on its half of the columns.
pub fn two_cluster_prototype(c: usize, feature_dim: usize) -> Matrix {
    let half = feature_dim / 2;
    let range = if c == 0 { 0..half } else { half..feature_dim };
    Matrix::from_shape_fn((1, feature_dim), |(_, k)| if range.contains(&k) { 1.0 } else { 0.0 })
}

/// Planted-partition graph with bag-of-words features drawn from per-class
/// topics.
#[derive(Clone, Debug)]
pub struct PlantedPartition {
    pub nodes: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub mean_degree: f64,
    /// Probability that an edge joins two nodes of the same class.
    pub homophily: f64,
    pub words_per_node: usize,
    /// Probability that a word is drawn from the node's class topic rather
    /// than the whole vocabulary.
    pub topic_fraction: f64,
    pub seed: u64,
}

impl PlantedPartition {
    /// Matches the size, width, class count and density of the Cora citation
    /// graph.
    pub fn cora_like(seed: u64) -> Self {
        PlantedPartition {
            nodes: 2708,
            classes: 7,
            feature_dim: 1433,
            mean_degree: 3.9,
            homophily: 0.8,
            words_per_node: 18,
            topic_fraction: 0.25,
            seed,
        }
    }

    /// Same for CiteSeer.
    pub fn citeseer_like(seed: u64) -> Self {
        PlantedPartition {
            nodes: 3327,
            classes: 6,
            feature_dim: 3703,
            mean_degree: 2.77,
            words_per_node: 32,
            ..Self::cora_like(seed)
        }
    }

    pub fn generate(&self) -> Result<Graph> {
        let root = Rng::new(self.seed);
        let (n, c, d) = (self.nodes, self.classes, self.feature_dim);
        let mut rng = root.split(0);
        let labels: Vec<usize> = (0..n).map(|i| if i < c { i } else { rng.below(c) }).collect();
        let mut members = vec![Vec::new(); c];
        for (i, &l) in labels.iter().enumerate() {
            members[l].push(i);
        }

        let mut rng = root.split(1);
        let target = (self.mean_degree * n as f64 / 2.0).round() as usize;
        let mut edges = Vec::with_capacity(target);
        while edges.len() < target {
            let i = rng.below(n);
            let j = if rng.bernoulli(self.homophily) {
                let same = &members[labels[i]];
                same[rng.below(same.len())]
            } else {
                rng.below(n)
            };
            if i != j {
                edges.push((i, j));
            }
        }

        let mut rng = root.split(2);
        let topic_width = (d / c).max(1);
        let mut features = Matrix::zeros((n, d));
        for i in 0..n {
            for _ in 0..self.words_per_node {
                let w = if rng.bernoulli(self.topic_fraction) {
                    (labels[i] * topic_width + rng.below(topic_width)).min(d - 1)
                } else {
                    rng.below(d)
                };
                features[[i, w]] = 1.0;
            }
        }
        Ok(Graph::from_edges(features, &edges, labels, c)?.0)
    }
}
