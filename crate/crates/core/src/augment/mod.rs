//! The two augmented views: CVAE-generated local features and a low-rank
//! global reconstruction of the structure.

pub mod cvae;
mod view;

use std::str::FromStr;
use std::sync::Arc;

use crate::graph::Graph;
use crate::numkit::{truncated_svd, CsrPattern, Matrix, Rng};
use crate::{Error, Result};

pub use cvae::{
    cvae_elbo, cvae_elbo_with_noise, gaussian_kl, latent_samples, train_cvae, train_cvae_on_pairs, CvaeConfig,
    CvaeParams, FeatureRows,
};
pub use view::{LowRankFactors, Propagation, Provenance, View, ViewTag};

/// Reconstructed entries at or below this are never kept as edges.
pub const EDGE_FLOOR: f64 = 1e-8;

/// Which matrix the global view decomposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvdTarget {
    /// Normalized adjacency; the view gets new structure, original features.
    Adjacency,
    /// Feature matrix; the view gets low-rank features, original structure.
    Features,
}

impl FromStr for SvdTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adjacency" => Ok(SvdTarget::Adjacency),
            "features" => Ok(SvdTarget::Features),
            other => Err(Error::Config(format!("unknown svd target {other:?} (expected adjacency or features)"))),
        }
    }
}

impl std::fmt::Display for SvdTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SvdTarget::Adjacency => "adjacency",
            SvdTarget::Features => "features",
        })
    }
}

/// Generated feature matrix: row `v` decodes a fresh latent draw (stream
/// `v` of `rng`) conditioned on `x_v`.
pub fn generate_features(g: &Graph, params: &CvaeParams, rng: &Rng) -> Result<Matrix> {
    let z = latent_samples(g.num_nodes(), params.z_dim(), rng);
    params.decode(&z, &FeatureRows::of_graph(g))
}

/// Locally enhanced view: features `(1 - lambda)·X + lambda·X̄`, edges of `g`.
pub fn local_augment(g: &Graph, params: &CvaeParams, lambda: f64, rng: &Rng) -> Result<View> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("mixing weight must lie in [0, 1], got {lambda}")));
    }
    let provenance = Provenance {
        seed: None,
        rank: None,
        lambda: Some(lambda),
    };
    let base = View::original(g);
    if lambda == 0.0 {
        return View::new(
            ViewTag::Local,
            g.features().clone(),
            g.sparse_features().cloned(),
            base.propagation().clone(),
            provenance,
        );
    }
    let mut mixed = generate_features(g, params, rng)?;
    if lambda < 1.0 {
        ndarray::Zip::from(&mut mixed)
            .and(&**g.features())
            .for_each(|m, &x| *m = (1.0 - lambda) * x + lambda * *m);
    }
    base.with_features(ViewTag::Local, mixed, provenance)
}

/// Number of reconstructed entries kept per row of the global view.
pub fn global_row_budget(g: &Graph) -> usize {
    g.mean_degree().round() as usize + 1
}

/// Globally enhanced view from a rank-`q` randomized SVD.
pub fn global_augment(g: &Graph, q: usize, iters: usize, seed: u64, target: SvdTarget) -> Result<View> {
    let n = g.num_nodes();
    let provenance = Provenance {
        seed: Some(seed),
        rank: Some(q),
        lambda: None,
    };
    match target {
        SvdTarget::Adjacency => {
            if q == 0 || q > n {
                return Err(Error::InvalidArgument(format!("svd rank {q} must lie in 1..={n}")));
            }
            let a = g.normalize_adjacency();
            let svd = truncated_svd(&**a.matrix(), q, iters, seed)?;
            let factors = LowRankFactors {
                us: Arc::new(svd.us()),
                v: Arc::new(svd.v.clone()),
            };
            let edges = Arc::new(top_entries(&factors, global_row_budget(g))?);
            View::new(
                ViewTag::Global,
                g.features().clone(),
                g.sparse_features().cloned(),
                Propagation::LowRank { factors, edges },
                provenance,
            )
        }
        SvdTarget::Features => {
            let x = &**g.features();
            if q == 0 || q > x.nrows().min(x.ncols()) {
                return Err(Error::InvalidArgument(format!(
                    "svd rank {q} must lie in 1..={}",
                    x.nrows().min(x.ncols())
                )));
            }
            let svd = match g.sparse_features() {
                Some(s) => truncated_svd(&**s, q, iters, seed)?,
                None => truncated_svd(x, q, iters, seed)?,
            };
            let base = View::original(g);
            base.with_features(ViewTag::Global, svd.reconstruct(), provenance)
        }
    }
}

/// Symmetric loop-free pattern holding, for every row of `us · vᵀ`, its
/// `r` largest off-diagonal entries above [`EDGE_FLOOR`] (ties broken by
/// lower column index), merged with the transposed selection.
pub fn top_entries(factors: &LowRankFactors, r: usize) -> Result<CsrPattern> {
    let n = factors.us.nrows();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let recon = factors.row(i);
        cand.clear();
        cand.extend(
            recon
                .iter()
                .enumerate()
                .filter(|&(j, &v)| j != i && v > EDGE_FLOOR)
                .map(|(j, &v)| (v, j)),
        );
        let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if cand.len() > r {
            if r > 0 {
                cand.select_nth_unstable_by(r - 1, order);
            }
            cand.truncate(r);
        }
        for &(_, j) in cand.iter() {
            rows[i].push(j);
            rows[j].push(i);
        }
    }
    CsrPattern::from_rows(n, rows)
}
