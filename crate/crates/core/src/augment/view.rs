use std::sync::Arc;

use serde::Serialize;

use crate::graph::Graph;
use crate::numkit::{CsrMatrix, CsrPattern, Matrix};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewTag {
    Original,
    Local,
    Global,
}

impl std::fmt::Display for ViewTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ViewTag::Original => "original",
            ViewTag::Local => "local",
            ViewTag::Global => "global",
        })
    }
}

/// Rank-q reconstruction `us · vᵀ` of a square matrix.
#[derive(Clone, Debug)]
pub struct LowRankFactors {
    pub us: Arc<Matrix>,
    pub v: Arc<Matrix>,
}

impl LowRankFactors {
    pub fn rank(&self) -> usize {
        self.us.ncols()
    }

    /// Row `i` of the reconstruction.
    pub fn row(&self, i: usize) -> ndarray::Array1<f64> {
        self.v.dot(&self.us.row(i))
    }

    pub fn to_dense(&self) -> Matrix {
        self.us.dot(&self.v.t())
    }
}

/// How an encoder mixes node states for this view.
#[derive(Clone, Debug)]
pub enum Propagation {
    /// Attention over each node's neighbors and itself.
    Edges(Arc<CsrPattern>),
    /// Low-rank reconstruction together with its sparsified edge set.
    LowRank {
        factors: LowRankFactors,
        edges: Arc<CsrPattern>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub rank: Option<usize>,
    pub lambda: Option<f64>,
}

/// A graph variant fed to the encoders. Feature width is shared by every
/// view of one run.
#[derive(Clone, Debug)]
pub struct View {
    pub tag: ViewTag,
    features: Arc<Matrix>,
    sparse_features: Option<Arc<CsrMatrix>>,
    propagation: Propagation,
    attention: Arc<CsrPattern>,
    pub provenance: Provenance,
}

impl View {
    pub fn new(
        tag: ViewTag,
        features: Arc<Matrix>,
        sparse_features: Option<Arc<CsrMatrix>>,
        propagation: Propagation,
        provenance: Provenance,
    ) -> Result<View> {
        let n = features.nrows();
        let edges = match &propagation {
            Propagation::Edges(e) => e,
            Propagation::LowRank { factors, edges } => {
                if factors.us.nrows() != n || factors.v.nrows() != n || factors.us.ncols() != factors.v.ncols() {
                    return Err(Error::Shape {
                        op: "low-rank view factors",
                        lhs: factors.us.dim(),
                        rhs: factors.v.dim(),
                    });
                }
                edges
            }
        };
        if edges.rows() != n || edges.cols() != n {
            return Err(Error::Shape {
                op: "view edges",
                lhs: features.dim(),
                rhs: (edges.rows(), edges.cols()),
            });
        }
        if let Some(s) = &sparse_features {
            if s.shape() != features.dim() {
                return Err(Error::Shape {
                    op: "view sparse features",
                    lhs: features.dim(),
                    rhs: s.shape(),
                });
            }
        }
        let attention = Arc::new(edges.with_self_loops());
        Ok(View {
            tag,
            features,
            sparse_features,
            propagation,
            attention,
            provenance,
        })
    }

    /// The graph itself as a view.
    pub fn original(g: &Graph) -> View {
        View::new(
            ViewTag::Original,
            g.features().clone(),
            g.sparse_features().cloned(),
            Propagation::Edges(g.adjacency().clone()),
            Provenance::default(),
        )
        .expect("graph parts are consistent")
    }

    /// Same structure with different features (dense only).
    pub fn with_features(&self, tag: ViewTag, features: Matrix, provenance: Provenance) -> Result<View> {
        if features.dim() != self.features.dim() {
            return Err(Error::Shape {
                op: "view features",
                lhs: self.features.dim(),
                rhs: features.dim(),
            });
        }
        Ok(View {
            tag,
            features: Arc::new(features),
            sparse_features: None,
            provenance,
            ..self.clone()
        })
    }

    pub fn retagged(&self, tag: ViewTag) -> View {
        View { tag, ..self.clone() }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Arc<Matrix> {
        &self.features
    }

    pub fn sparse_features(&self) -> Option<&Arc<CsrMatrix>> {
        self.sparse_features.as_ref()
    }

    pub fn propagation(&self) -> &Propagation {
        &self.propagation
    }

    /// Neighbor pattern without self-loops.
    pub fn edges(&self) -> &Arc<CsrPattern> {
        match &self.propagation {
            Propagation::Edges(e) => e,
            Propagation::LowRank { edges, .. } => edges,
        }
    }

    /// Neighbor pattern with a self-loop on every node.
    pub fn attention_pattern(&self) -> &Arc<CsrPattern> {
        &self.attention
    }

    pub fn low_rank(&self) -> Option<&LowRankFactors> {
        match &self.propagation {
            Propagation::LowRank { factors, .. } => Some(factors),
            Propagation::Edges(_) => None,
        }
    }

    /// The view as a standalone graph carrying `g`'s labels and names.
    pub fn to_graph(&self, g: &Graph) -> Result<Graph> {
        let mut out = Graph::from_parts(self.edges().clone(), (*self.features).clone(), g.labels().to_vec(), g.num_classes())?;
        if let Some(names) = g.names() {
            out = out.with_names(names.to_vec())?;
        }
        if let Some(l) = g.label_names() {
            out = out.with_label_names(l.to_vec())?;
        }
        Ok(out)
    }
}
