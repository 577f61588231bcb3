//! Multidimensional contrastive objective: cross-network, cross-view and
//! head-neighbor terms and their weighted total.
//!
//! Every softmax denominator is split into positive entries plus a fused
//! log-sum-exp over the remaining candidates, so N×N similarity matrices
//! are never stored. Similarities are cosine; `scale` multiplies them
//! before the softmax (1 unless a uniform temperature override is set).
//!
//! Sampled negatives: when `cols` is `Some`, every candidate sum runs over
//! the listed node ids only (positives are always kept in full).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingBundle;
use crate::numkit::{CsrPattern, Exclusion, Matrix, Rng, Var};
use crate::{Error, Result};

/// Shared candidate columns for one loss evaluation; `None` means all nodes.
pub type Columns = Option<Arc<Vec<usize>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Share of the first target network in the cross-network term.
    pub alpha_net: f64,
    pub alpha_loss: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Temperature of the head-neighbor term.
    pub tau: f64,
    /// 0 keeps full denominators; otherwise the number of shared sampled
    /// candidate nodes per step.
    pub neg_samples: usize,
    /// When set, one temperature for every term.
    pub tau_all: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_net: 0.6,
            alpha_loss: 1.0,
            beta: 1.0,
            gamma: 1.0,
            tau: 1.0,
            neg_samples: 0,
            tau_all: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.alpha_net) {
            return bad(format!("alpha_net must lie in [0, 1], got {}", self.alpha_net));
        }
        for (name, v) in [("alpha_loss", self.alpha_loss), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if self.alpha_loss == 0.0 && self.beta == 0.0 && self.gamma == 0.0 {
            return bad("alpha_loss, beta and gamma are all zero".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if let Some(t) = self.tau_all {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("tau_all must be > 0, got {t}"));
            }
        }
        Ok(())
    }

    /// Similarity multiplier for the cross-network and cross-view terms.
    pub fn view_scale(&self) -> f64 {
        self.tau_all.map_or(1.0, |t| 1.0 / t)
    }

    /// Temperature of the head-neighbor term.
    pub fn head_tau(&self) -> f64 {
        self.tau_all.unwrap_or(self.tau)
    }
}

/// Shared candidate ids for a graph of `n` nodes, sorted ascending.
/// Returns `None` (full denominators) when `neg_samples` is 0 or ≥ `n`.
pub fn sample_columns(n: usize, neg_samples: usize, rng: &mut Rng) -> Columns {
    if neg_samples == 0 || neg_samples >= n {
        return None;
    }
    let mut cols = rng.sample_indices(n, neg_samples);
    cols.sort_unstable();
    Some(Arc::new(cols))
}

fn require_rows(op: &'static str, a: Var<'_>, b: Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

/// `lse(pos, rest) - pos` row-wise, i.e. −log of the positive's softmax share.
fn nll<'t>(pos: Var<'t>, rest: Var<'t>) -> Result<Var<'t>> {
    pos.logaddexp(rest)?.sub(pos)
}

/// Row and column log-sum-exps of `scale·a·bᵀ` without the diagonal.
fn row_col_lse<'t>(a: Var<'t>, b: Var<'t>, scale: f64, cols: &Columns) -> Result<(Var<'t>, Var<'t>)> {
    match cols {
        None => {
            let both = a.product_logsumexp_both(b, scale, Exclusion::SelfPair)?;
            Ok((both.slice_cols(0, 1)?, both.slice_cols(1, 2)?))
        }
        Some(_) => Ok((
            a.product_logsumexp(b, scale, cols.clone(), Exclusion::SelfPair)?,
            b.product_logsumexp(a, scale, cols.clone(), Exclusion::SelfPair)?,
        )),
    }
}

/// Per-anchor −log softmax of the matching row of `b` among all rows of `b`.
fn diag_nll<'t>(a_hat: Var<'t>, b_hat: Var<'t>, scale: f64, cols: &Columns) -> Result<Var<'t>> {
    let pos = a_hat.row_dot(b_hat)?.scale(scale);
    nll(pos, a_hat.product_logsumexp(b_hat, scale, cols.clone(), Exclusion::SelfPair)?)
}

/// Cross-network term. `z1`, `z2` are target embeddings; gradients never
/// reach them when they are tape constants.
pub fn cross_network_loss<'t>(
    p1: Var<'t>,
    p2: Var<'t>,
    z1: Var<'t>,
    z2: Var<'t>,
    alpha_net: f64,
    scale: f64,
    cols: &Columns,
) -> Result<Var<'t>> {
    for v in [p2, z1, z2] {
        require_rows("cross_network_loss", p1, v)?;
    }
    let n = p1.shape().0;
    let (z1, z2) = (z1.row_normalize()?, z2.row_normalize()?);
    let mut total: Option<Var<'t>> = None;
    for p in [p1, p2] {
        let p = p.row_normalize()?;
        for (w, z) in [(alpha_net, z1), (1.0 - alpha_net, z2)] {
            if w == 0.0 {
                continue;
            }
            let term = diag_nll(p, z, scale, cols)?.sum().scale(w);
            total = Some(match total {
                Some(t) => t.add(term)?,
                None => term,
            });
        }
    }
    Ok(total.expect("alpha_net and 1 - alpha_net cannot both be zero").scale(1.0 / (2 * n) as f64))
}

/// Per-node inter-view loss: anchor row of `ha` against every row of `hb`.
pub fn inter_view_loss<'t>(ha: Var<'t>, hb: Var<'t>, scale: f64, cols: &Columns) -> Result<Var<'t>> {
    require_rows("inter_view_loss", ha, hb)?;
    diag_nll(ha.row_normalize()?, hb.row_normalize()?, scale, cols)
}

/// Per-node intra-view loss: the cross-view positive against every other
/// row of the anchor's own view.
pub fn intra_view_loss<'t>(ha: Var<'t>, hb: Var<'t>, scale: f64, cols: &Columns) -> Result<Var<'t>> {
    require_rows("intra_view_loss", ha, hb)?;
    if ha.shape().0 < 2 {
        return Err(Error::InvalidArgument("intra-view loss needs at least 2 nodes".into()));
    }
    let (a, b) = (ha.row_normalize()?, hb.row_normalize()?);
    let pos = a.row_dot(b)?.scale(scale);
    nll(pos, a.product_logsumexp(a, scale, cols.clone(), Exclusion::SelfPair)?)
}

/// Cross-view term over the pairs (0,1), (0,2), (1,2), each symmetrized.
pub fn cross_view_loss<'t>(h: [Var<'t>; 3], scale: f64, cols: &Columns) -> Result<Var<'t>> {
    require_rows("cross_view_loss", h[0], h[1])?;
    require_rows("cross_view_loss", h[0], h[2])?;
    let n = h[0].shape().0;
    if n < 2 {
        return Err(Error::InvalidArgument("cross-view loss needs at least 2 nodes".into()));
    }
    let hat = [h[0].row_normalize()?, h[1].row_normalize()?, h[2].row_normalize()?];
    let mut own = Vec::with_capacity(3);
    for v in hat {
        own.push(v.product_logsumexp(v, scale, cols.clone(), Exclusion::SelfPair)?);
    }
    let mut total: Option<Var<'t>> = None;
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let pos = hat[a].row_dot(hat[b])?.scale(scale);
        let (ab, ba) = row_col_lse(hat[a], hat[b], scale, cols)?;
        let pair = nll(pos, ab)?
            .add(nll(pos, own[a])?)?
            .add(nll(pos, ba)?)?
            .add(nll(pos, own[b])?)?
            .sum()
            .scale(0.5);
        total = Some(match total {
            Some(t) => t.add(pair)?,
            None => pair,
        });
    }
    Ok(total.unwrap().scale(1.0 / (3 * n) as f64))
}

/// Terms of one head that every pair it anchors shares.
struct HeadSelf<'t> {
    hat: Var<'t>,
    /// Candidates of the head against itself outside self and neighbors.
    neg_own: Var<'t>,
    /// lse and sum of the within-head neighbor similarities.
    pos_own_lse: Var<'t>,
    pos_own_sum: Var<'t>,
}

fn head_self<'t>(h: Var<'t>, neighbors: &Arc<CsrPattern>, inv_tau: f64, cols: &Columns) -> Result<HeadSelf<'t>> {
    let hat = h.row_normalize()?;
    let edges = hat.edge_dot(hat, neighbors.clone())?.scale(inv_tau);
    Ok(HeadSelf {
        hat,
        neg_own: hat.product_logsumexp(hat, inv_tau, cols.clone(), Exclusion::SelfAndNeighbors(neighbors.clone()))?,
        pos_own_lse: edges.segment_logsumexp(neighbors.clone())?,
        pos_own_sum: edges.segment_sum(neighbors.clone())?,
    })
}

/// `1 / (2|N_i| + 1)` per node as a constant column.
fn positive_weights<'t>(like: Var<'t>, neighbors: &CsrPattern) -> Var<'t> {
    let w = Matrix::from_shape_fn((neighbors.rows(), 1), |(i, _)| 1.0 / (2 * neighbors.degree(i) + 1) as f64);
    like.tape().constant(w)
}

/// Per-anchor loss of head `k` against head `l`, given the cross-head
/// non-neighbor lse.
fn pair_terms<'t>(
    k: &HeadSelf<'t>,
    l: &HeadSelf<'t>,
    neg_cross: Var<'t>,
    neighbors: &Arc<CsrPattern>,
    inv_tau: f64,
    weights: Var<'t>,
) -> Result<Var<'t>> {
    let diag = k.hat.row_dot(l.hat)?.scale(inv_tau);
    let cross = k.hat.edge_dot(l.hat, neighbors.clone())?.scale(inv_tau);
    let pos_lse = diag
        .logaddexp(k.pos_own_lse)?
        .logaddexp(cross.segment_logsumexp(neighbors.clone())?)?;
    let denom = pos_lse.logaddexp(k.neg_own)?.logaddexp(neg_cross)?;
    let pos_sum = diag.add(k.pos_own_sum)?.add(cross.segment_sum(neighbors.clone())?)?;
    denom.sub(pos_sum.mul(weights)?)
}

/// Per-node neighbor contrast of head `hk` (anchors) against head `hl`.
pub fn neighbor_contrast_pair<'t>(
    hk: Var<'t>,
    hl: Var<'t>,
    neighbors: &Arc<CsrPattern>,
    tau: f64,
    cols: &Columns,
) -> Result<Var<'t>> {
    require_rows("neighbor_contrast_pair", hk, hl)?;
    check_tau(tau)?;
    check_pattern(hk, neighbors)?;
    let inv_tau = 1.0 / tau;
    let k = head_self(hk, neighbors, inv_tau, cols)?;
    let l = head_self(hl, neighbors, inv_tau, cols)?;
    let neg_cross = k.hat.product_logsumexp(
        l.hat,
        inv_tau,
        cols.clone(),
        Exclusion::SelfAndNeighbors(neighbors.clone()),
    )?;
    pair_terms(&k, &l, neg_cross, neighbors, inv_tau, positive_weights(hk, neighbors))
}

/// Neighbor contrast averaged over all ordered pairs of distinct heads.
pub fn head_neighbor_loss<'t>(heads: &[Var<'t>], neighbors: &Arc<CsrPattern>, tau: f64, cols: &Columns) -> Result<Var<'t>> {
    let k_heads = heads.len();
    if k_heads < 2 {
        return Err(Error::InvalidArgument(format!("head-neighbor loss needs at least 2 heads, got {k_heads}")));
    }
    check_tau(tau)?;
    for &h in &heads[1..] {
        require_rows("head_neighbor_loss", heads[0], h)?;
    }
    check_pattern(heads[0], neighbors)?;
    let n = heads[0].shape().0;
    let inv_tau = 1.0 / tau;
    let selves = heads
        .iter()
        .map(|&h| head_self(h, neighbors, inv_tau, cols))
        .collect::<Result<Vec<_>>>()?;
    let weights = positive_weights(heads[0], neighbors);
    let exclusion = Exclusion::SelfAndNeighbors(neighbors.clone());
    let mut total: Option<Var<'t>> = None;
    for k in 0..k_heads {
        for l in k + 1..k_heads {
            let (kl, lk) = match cols {
                None => {
                    let both = selves[k].hat.product_logsumexp_both(selves[l].hat, inv_tau, exclusion.clone())?;
                    (both.slice_cols(0, 1)?, both.slice_cols(1, 2)?)
                }
                Some(_) => (
                    selves[k].hat.product_logsumexp(selves[l].hat, inv_tau, cols.clone(), exclusion.clone())?,
                    selves[l].hat.product_logsumexp(selves[k].hat, inv_tau, cols.clone(), exclusion.clone())?,
                ),
            };
            let pair = pair_terms(&selves[k], &selves[l], kl, neighbors, inv_tau, weights)?
                .add(pair_terms(&selves[l], &selves[k], lk, neighbors, inv_tau, weights)?)?
                .sum();
            total = Some(match total {
                Some(t) => t.add(pair)?,
                None => pair,
            });
        }
    }
    Ok(total.unwrap().scale(1.0 / (k_heads * (k_heads - 1) * n) as f64))
}

/// Symmetrized single-positive contrast between the two augmented views;
/// the objective used when the multidimensional loss is switched off.
pub fn plain_contrast_loss<'t>(h1: Var<'t>, h2: Var<'t>, scale: f64, cols: &Columns) -> Result<Var<'t>> {
    require_rows("plain_contrast_loss", h1, h2)?;
    let n = h1.shape().0;
    let (a, b) = (h1.row_normalize()?, h2.row_normalize()?);
    let pos = a.row_dot(b)?.scale(scale);
    let (ab, ba) = row_col_lse(a, b, scale, cols)?;
    Ok(nll(pos, ab)?.add(nll(pos, ba)?)?.sum().scale(0.5 / n as f64))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")))
    }
}

fn check_pattern(h: Var<'_>, neighbors: &CsrPattern) -> Result<()> {
    let n = h.shape().0;
    if neighbors.rows() != n || neighbors.cols() != n {
        return Err(Error::Shape {
            op: "neighbor pattern",
            lhs: h.shape(),
            rhs: (neighbors.rows(), neighbors.cols()),
        });
    }
    Ok(())
}

/// The weighted objective and whichever components were evaluated.
/// Components with zero weight are skipped.
pub struct LossTerms<'t> {
    pub cross_network: Option<Var<'t>>,
    pub cross_view: Option<Var<'t>>,
    pub head: Option<Var<'t>>,
    pub total: Var<'t>,
}

pub fn total_loss<'t>(
    bundle: &EmbeddingBundle<'t>,
    neighbors: &Arc<CsrPattern>,
    w: &LossWeights,
    cols: &Columns,
) -> Result<LossTerms<'t>> {
    w.validate()?;
    let scale = w.view_scale();
    let cross_network = (w.alpha_loss > 0.0)
        .then(|| cross_network_loss(bundle.p1, bundle.p2, bundle.z1, bundle.z2, w.alpha_net, scale, cols))
        .transpose()?;
    let cross_view = (w.beta > 0.0)
        .then(|| cross_view_loss([bundle.h0, bundle.h1, bundle.h2], scale, cols))
        .transpose()?;
    let head = (w.gamma > 0.0)
        .then(|| head_neighbor_loss(&bundle.heads0, neighbors, w.head_tau(), cols))
        .transpose()?;
    let mut total: Option<Var<'t>> = None;
    for (weight, term) in [(w.alpha_loss, cross_network), (w.beta, cross_view), (w.gamma, head)] {
        if let Some(t) = term {
            let t = t.scale(weight);
            total = Some(match total {
                Some(acc) => acc.add(t)?,
                None => t,
            });
        }
    }
    Ok(LossTerms {
        cross_network,
        cross_view,
        head,
        total: total.expect("validated weights are not all zero"),
    })
}
