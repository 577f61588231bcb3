//! Attributed undirected graphs: storage, ingestion, normalization and the
//! labelled split protocol.

mod json;
mod linqs;
mod split;
pub mod synthetic;

use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use crate::numkit::{CsrMatrix, CsrPattern, Matrix};
use crate::{Error, Result};

pub use json::{load_generic_json, write_features_file, read_features_file, write_generic_json};
pub use linqs::load_linqs_text;
pub use split::{make_split, make_split_with, DataSplit, TRAIN_PER_CLASS, VAL_SIZE};

/// Feature matrices sparser than this also get a CSR copy for products.
const SPARSE_FEATURE_DENSITY: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    LinqsText,
    GenericJson,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linqs_text" => Ok(DatasetFormat::LinqsText),
            "generic_json" => Ok(DatasetFormat::GenericJson),
            other => Err(Error::Config(format!(
                "unknown dataset format {other:?} (expected linqs_text or generic_json)"
            ))),
        }
    }
}

impl std::fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetFormat::LinqsText => "linqs_text",
            DatasetFormat::GenericJson => "generic_json",
        })
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Graph> {
    match format {
        DatasetFormat::LinqsText => load_linqs_text(path),
        DatasetFormat::GenericJson => load_generic_json(path),
    }
}

/// Counts of input irregularities dropped while building a graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EdgeCleanup {
    pub duplicates: usize,
    pub self_loops: usize,
}

/// Immutable attributed graph. Adjacency stores both directions of every
/// undirected edge, has no self-loops and no duplicates.
#[derive(Clone, Debug)]
pub struct Graph {
    adjacency: Arc<CsrPattern>,
    features: Arc<Matrix>,
    sparse_features: Option<Arc<CsrMatrix>>,
    labels: Vec<usize>,
    num_classes: usize,
    names: Option<Vec<String>>,
    label_names: Option<Vec<String>>,
}

impl Graph {
    /// Builds a graph from an undirected edge list. Duplicates (in either
    /// orientation) are merged and self-loops dropped; both are counted.
    pub fn from_edges(
        features: Matrix,
        edges: &[(usize, usize)],
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<(Graph, EdgeCleanup)> {
        let n = features.nrows();
        let mut rows = vec![Vec::new(); n];
        let mut cleanup = EdgeCleanup::default();
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Data(format!("edge ({i}, {j}) references a node outside 0..{n}")));
            }
            if i == j {
                cleanup.self_loops += 1;
                continue;
            }
            rows[i].push(j);
            rows[j].push(i);
        }
        let stored: usize = rows.iter().map(Vec::len).sum();
        let adjacency = CsrPattern::from_rows(n, rows)?;
        cleanup.duplicates = (stored - adjacency.nnz()) / 2;
        let graph = Graph::from_parts(Arc::new(adjacency), features, labels, num_classes)?;
        Ok((graph, cleanup))
    }

    /// Builds a graph from an already symmetric, loop-free adjacency.
    pub fn from_parts(
        adjacency: Arc<CsrPattern>,
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Graph> {
        let n = features.nrows();
        if adjacency.rows() != n || adjacency.cols() != n {
            return Err(Error::Data(format!(
                "adjacency is {}x{} but there are {n} feature rows",
                adjacency.rows(),
                adjacency.cols()
            )));
        }
        if labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} nodes", labels.len())));
        }
        if let Some((node, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Data(format!("node {node} has label {label} outside 0..{num_classes}")));
        }
        for (i, j) in adjacency.iter() {
            if i == j {
                return Err(Error::Data(format!("self-loop stored at node {i}")));
            }
            if !adjacency.contains(j, i) {
                return Err(Error::Data(format!("edge ({i}, {j}) has no reverse entry")));
            }
        }
        if let Some(bad) = features.iter().position(|v| !v.is_finite()) {
            let d = features.ncols().max(1);
            return Err(Error::Data(format!("non-finite feature at node {} column {}", bad / d, bad % d)));
        }
        let sparse_features = sparse_copy(&features);
        Ok(Graph {
            adjacency,
            features: Arc::new(features),
            sparse_features,
            labels,
            num_classes,
            names: None,
            label_names: None,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Graph> {
        if names.len() != self.num_nodes() {
            return Err(Error::Data(format!("{} names for {} nodes", names.len(), self.num_nodes())));
        }
        self.names = Some(names);
        Ok(self)
    }

    pub fn with_label_names(mut self, label_names: Vec<String>) -> Result<Graph> {
        if label_names.len() != self.num_classes {
            return Err(Error::Data(format!(
                "{} label names for {} classes",
                label_names.len(),
                self.num_classes
            )));
        }
        self.label_names = Some(label_names);
        Ok(self)
    }

    /// Same structure and labels with a different feature matrix of equal shape.
    pub fn with_features(&self, features: Matrix) -> Result<Graph> {
        if features.dim() != self.features.dim() {
            return Err(Error::Shape {
                op: "with_features",
                lhs: self.features.dim(),
                rhs: features.dim(),
            });
        }
        Ok(Graph {
            sparse_features: sparse_copy(&features),
            features: Arc::new(features),
            ..self.clone()
        })
    }

    /// Same nodes, features and labels over another loop-free symmetric pattern.
    pub fn with_adjacency(&self, adjacency: Arc<CsrPattern>) -> Result<Graph> {
        let g = Graph::from_parts(adjacency, (*self.features).clone(), self.labels.clone(), self.num_classes)?;
        Ok(Graph {
            names: self.names.clone(),
            label_names: self.label_names.clone(),
            ..g
        })
    }

    /// Relabels nodes: old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument("permutation is not a bijection on the node set".into()));
        }
        let mut features = Matrix::zeros(self.features.dim());
        let mut labels = vec![0; n];
        let mut rows = vec![Vec::new(); n];
        for i in 0..n {
            features.row_mut(perm[i]).assign(&self.features.row(i));
            labels[perm[i]] = self.labels[i];
            rows[perm[i]] = self.adjacency.row(i).iter().map(|&j| perm[j]).collect();
        }
        let adjacency = CsrPattern::from_rows(n, rows)?;
        let mut g = Graph::from_parts(Arc::new(adjacency), features, labels, self.num_classes)?;
        if let Some(names) = &self.names {
            let mut permuted = vec![String::new(); n];
            for i in 0..n {
                permuted[perm[i]] = names[i].clone();
            }
            g.names = Some(permuted);
        }
        g.label_names = self.label_names.clone();
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of stored directed entries (twice the undirected edge count).
    pub fn num_edge_entries(&self) -> usize {
        self.adjacency.nnz()
    }

    pub fn adjacency(&self) -> &Arc<CsrPattern> {
        &self.adjacency
    }

    pub fn features(&self) -> &Arc<Matrix> {
        &self.features
    }

    /// CSR copy of the features when they are sparse enough to benefit.
    pub fn sparse_features(&self) -> Option<&Arc<CsrMatrix>> {
        self.sparse_features.as_ref()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn label_names(&self) -> Option<&[String]> {
        self.label_names.as_deref()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency.degree(i)
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        self.adjacency.row(i)
    }

    pub fn mean_degree(&self) -> f64 {
        if self.num_nodes() == 0 {
            0.0
        } else {
            self.adjacency.nnz() as f64 / self.num_nodes() as f64
        }
    }

    /// Per-node sorted neighbor lists, never containing the node itself.
    pub fn neighbor_sets(&self) -> Vec<Vec<usize>> {
        (0..self.num_nodes()).map(|i| self.neighbors(i).to_vec()).collect()
    }

    /// True when every feature value is exactly 0 or 1.
    pub fn has_binary_features(&self) -> bool {
        self.features.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Copy with every nonzero feature row scaled to unit L1 norm.
    pub fn row_normalized_features(&self) -> Result<Graph> {
        let mut x = (*self.features).clone();
        for mut row in x.rows_mut() {
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            if s > 0.0 {
                row.mapv_inplace(|v| v / s);
            }
        }
        self.with_features(x)
    }

    pub fn normalize_adjacency(&self) -> NormalizedAdjacency {
        NormalizedAdjacency::new(&self.adjacency)
    }
}

fn sparse_copy(features: &Matrix) -> Option<Arc<CsrMatrix>> {
    let total = features.len();
    if total == 0 {
        return None;
    }
    let nnz = features.iter().filter(|&&v| v != 0.0).count();
    (nnz as f64 / (total as f64) < SPARSE_FEATURE_DENSITY).then(|| Arc::new(CsrMatrix::from_dense(features)))
}

/// `D^-1/2 (A + I) D^-1/2` with `D` the degree matrix of `A + I`.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    matrix: Arc<CsrMatrix>,
}

impl NormalizedAdjacency {
    pub fn new(adjacency: &CsrPattern) -> Self {
        let pattern = adjacency.with_self_loops();
        let degree: Vec<usize> = (0..pattern.rows()).map(|i| pattern.degree(i)).collect();
        let values = pattern
            .iter()
            .map(|(i, j)| 1.0 / ((degree[i] * degree[j]) as f64).sqrt())
            .collect();
        // The pattern and values are consistent by construction.
        let matrix = CsrMatrix::new(pattern, values).expect("one weight per stored entry");
        NormalizedAdjacency { matrix: Arc::new(matrix) }
    }

    pub fn matrix(&self) -> &Arc<CsrMatrix> {
        &self.matrix
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub fn num_nodes(&self) -> usize {
        self.matrix.shape().0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::from_edges(Matrix::zeros((n, 2)), edges, vec![0; n], 1).unwrap().0
    }

    #[test]
    fn singleton_normalizes_to_one() {
        let a = graph(1, &[]).normalize_adjacency();
        assert_eq!(a.matrix().to_dense(), ndarray::array![[1.0]]);
    }

    #[test]
    fn single_edge_is_all_halves() {
        let a = graph(2, &[(0, 1)]).normalize_adjacency();
        assert!(a.matrix().to_dense().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn path_weights() {
        let a = graph(3, &[(0, 1), (1, 2)]).normalize_adjacency();
        assert_abs_diff_eq!(a.weight(0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(a.weight(0, 1), 1.0 / 6f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(a.weight(1, 1), 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(a.weight(0, 2), 0.0);
    }

    #[test]
    fn cleanup_counts_duplicates_and_loops() {
        let (g, c) = Graph::from_edges(Matrix::zeros((3, 1)), &[(0, 1), (1, 0), (0, 1), (2, 2)], vec![0; 3], 1).unwrap();
        assert_eq!(c, EdgeCleanup { duplicates: 2, self_loops: 1 });
        assert_eq!(g.num_edge_entries(), 2);
    }

    #[test]
    fn neighbor_sets_of_small_graphs() {
        assert_eq!(graph(1, &[]).neighbor_sets(), vec![Vec::<usize>::new()]);
        assert_eq!(
            graph(3, &[(0, 1), (1, 2), (2, 0)]).neighbor_sets(),
            vec![vec![1, 2], vec![0, 2], vec![0, 1]]
        );
    }

    #[test]
    fn rejects_out_of_range_labels_and_edges() {
        assert!(Graph::from_edges(Matrix::zeros((2, 1)), &[], vec![0, 3], 2).is_err());
        assert!(Graph::from_edges(Matrix::zeros((2, 1)), &[(0, 5)], vec![0, 0], 1).is_err());
    }

    #[test]
    fn permutation_moves_rows_and_edges() {
        let mut x = Matrix::zeros((3, 1));
        x[[0, 0]] = 7.0;
        let (g, _) = Graph::from_edges(x, &[(0, 1)], vec![1, 0, 0], 2).unwrap();
        let p = g.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.features()[[2, 0]], 7.0);
        assert_eq!(p.labels(), &[0, 0, 1]);
        assert_eq!(p.neighbors(2), &[0]);
        assert!(g.permuted(&[0, 0, 1]).is_err());
    }

    #[test]
    fn sparse_copy_only_for_sparse_features() {
        let dense = Graph::from_edges(Matrix::ones((4, 4)), &[], vec![0; 4], 1).unwrap().0;
        assert!(dense.sparse_features().is_none());
        let mut x = Matrix::zeros((4, 4));
        x[[1, 2]] = 1.0;
        let sparse = Graph::from_edges(x, &[], vec![0; 4], 1).unwrap().0;
        assert_eq!(sparse.sparse_features().unwrap().nnz(), 1);
    }
}
