//! Multi-head graph attention, the online predictor, and the online/target
//! triple network coupled by exponential moving averages.

pub mod checkpoint;

use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augment::View;
use crate::numkit::{CsrMatrix, CsrPattern, Matrix, Rng, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Propagation used for the global view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalProp {
    /// Attention over the sparsified reconstruction.
    Attention,
    /// Weighted averaging with the low-rank reconstruction itself.
    LowRank,
}

impl FromStr for GlobalProp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(GlobalProp::Attention),
            "lowrank" => Ok(GlobalProp::LowRank),
            other => Err(Error::Config(format!("unknown global propagation {other:?} (expected attention or lowrank)"))),
        }
    }
}

impl std::fmt::Display for GlobalProp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GlobalProp::Attention => "attention",
            GlobalProp::LowRank => "lowrank",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub slope: f64,
    pub elu_alpha: f64,
    pub in_drop: f64,
    pub attn_drop: f64,
    pub ema_momentum: f64,
    pub global_prop: GlobalProp,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            heads: 4,
            head_dim: 64,
            slope: 0.2,
            elu_alpha: 1.0,
            in_drop: 0.2,
            attn_drop: 0.3,
            ema_momentum: 0.99,
            global_prop: GlobalProp::Attention,
        }
    }
}

impl EncoderConfig {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads < 2 {
            return Err(Error::Config(format!("at least 2 attention heads are needed, got {}", self.heads)));
        }
        if self.head_dim == 0 {
            return Err(Error::Config("head_dim must be positive".into()));
        }
        for (name, rate) in [("in_drop", self.in_drop), ("attn_drop", self.attn_drop)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {rate}")));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!("ema_momentum must lie in [0, 1], got {}", self.ema_momentum)));
        }
        Ok(())
    }
}

fn glorot(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_shape_simple_fn((rows, cols), || rng.uniform_range(-limit, limit))
}

/// One attention layer. Head `k` owns columns `k·dh..(k+1)·dh` of `w`
/// and row `k` of the two attention halves: `att_src` scores the anchor,
/// `att_dst` the neighbor.
#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerParams {
    pub w: Matrix,
    pub att_src: Matrix,
    pub att_dst: Matrix,
}

impl GatLayerParams {
    pub fn init(in_dim: usize, heads: usize, head_dim: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        GatLayerParams {
            w: glorot(&mut rng, in_dim, heads * head_dim, in_dim, head_dim),
            att_src: glorot(&mut rng, heads, head_dim, 2 * head_dim, 1),
            att_dst: glorot(&mut rng, heads, head_dim, 2 * head_dim, 1),
        }
    }

    pub fn heads(&self) -> usize {
        self.att_src.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.att_src.ncols()
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn tensors(&self) -> [&Matrix; 3] {
        [&self.w, &self.att_src, &self.att_dst]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.w, &mut self.att_src, &mut self.att_dst]
    }
}

pub const GAT_PARAM_NAMES: [&str; 3] = ["w", "att_src", "att_dst"];
pub const PREDICTOR_PARAM_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

/// Two affine maps with an ELU between them; width preserving.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl PredictorParams {
    pub fn init(width: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        PredictorParams {
            w1: glorot(&mut rng, width, width, width, width),
            b1: Matrix::zeros((1, width)),
            w2: glorot(&mut rng, width, width, width, width),
            b2: Matrix::zeros((1, width)),
        }
    }

    pub fn width(&self) -> usize {
        self.w1.nrows()
    }

    pub fn tensors(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Tape handles of one attention layer's parameters.
#[derive(Clone, Copy)]
pub struct GatVars<'t> {
    pub w: Var<'t>,
    pub att_src: Var<'t>,
    pub att_dst: Var<'t>,
}

impl<'t> GatVars<'t> {
    pub fn params(tape: &'t Tape, p: &GatLayerParams) -> Self {
        GatVars {
            w: tape.param(p.w.clone()),
            att_src: tape.param(p.att_src.clone()),
            att_dst: tape.param(p.att_dst.clone()),
        }
    }

    pub fn constants(tape: &'t Tape, p: &GatLayerParams) -> Self {
        GatVars {
            w: tape.constant(p.w.clone()),
            att_src: tape.constant(p.att_src.clone()),
            att_dst: tape.constant(p.att_dst.clone()),
        }
    }

    pub fn all(&self) -> [Var<'t>; 3] {
        [self.w, self.att_src, self.att_dst]
    }
}

#[derive(Clone, Copy)]
pub struct PredictorVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> PredictorVars<'t> {
    pub fn params(tape: &'t Tape, p: &PredictorParams) -> Self {
        PredictorVars {
            w1: tape.param(p.w1.clone()),
            b1: tape.param(p.b1.clone()),
            w2: tape.param(p.w2.clone()),
            b2: tape.param(p.b2.clone()),
        }
    }

    pub fn all(&self) -> [Var<'t>; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Output of one encoder pass: the concatenated embedding and its heads.
pub struct GatOutput<'t> {
    pub concat: Var<'t>,
    pub heads: Vec<Var<'t>>,
}

/// Input features after (train-mode) dropout, projected by `w`.
fn project<'t>(view: &View, w: Var<'t>, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var<'t>> {
    let tape = w.tape();
    let drop = mode == Mode::Train && rate > 0.0;
    match view.sparse_features() {
        Some(s) => {
            let x: Arc<CsrMatrix> = if drop { Arc::new(s.dropout(rate, rng)) } else { s.clone() };
            w.sparse_matmul(x)
        }
        None => {
            let mut x = (**view.features()).clone();
            if drop {
                let keep = 1.0 - rate;
                for mut row in x.rows_mut() {
                    let orig = row.to_owned();
                    row.mapv_inplace(|v| if rng.bernoulli(keep) { v / keep } else { 0.0 });
                    if row.iter().all(|&v| v == 0.0) {
                        row.assign(&orig);
                    }
                }
            }
            tape.constant(x).matmul(w)
        }
    }
}

/// Inverted-dropout mask over the E×K attention coefficients. A node whose
/// whole neighborhood would be dropped for a head keeps it undropped, so no
/// node loses every message.
fn attention_mask(pattern: &CsrPattern, heads: usize, rate: f64, rng: &mut Rng) -> Matrix {
    let keep = 1.0 - rate;
    let mut mask = Matrix::from_shape_simple_fn((pattern.nnz(), heads), || {
        if rng.bernoulli(keep) {
            1.0 / keep
        } else {
            0.0
        }
    });
    for i in 0..pattern.rows() {
        let r = pattern.row_range(i);
        for k in 0..heads {
            if r.clone().all(|e| mask[[e, k]] == 0.0) {
                r.clone().for_each(|e| mask[[e, k]] = 1.0);
            }
        }
    }
    mask
}

/// Attention layer on `view`. Stream 0 of `rng` drives input dropout and
/// stream 1 attention dropout. With `low_rank` set and a low-rank view,
/// attention is replaced by multiplication with the reconstruction.
pub fn gat_forward<'t>(
    params: &GatVars<'t>,
    view: &View,
    cfg: &EncoderConfig,
    mode: Mode,
    low_rank: bool,
    rng: &Rng,
) -> Result<GatOutput<'t>> {
    let w = params.w.value();
    if w.nrows() != view.feature_dim() {
        return Err(Error::Shape {
            op: "gat_forward",
            lhs: (view.num_nodes(), view.feature_dim()),
            rhs: w.dim(),
        });
    }
    let (heads, dh) = params.att_src.shape();
    let tape = params.w.tape();
    let h = project(view, params.w, cfg.in_drop, mode, &mut rng.split(0))?;
    let mixed = match view.low_rank().filter(|_| low_rank) {
        Some(f) => {
            let vt_h = tape.constant((*f.v).clone()).transpose().matmul(h)?;
            tape.constant((*f.us).clone()).matmul(vt_h)?
        }
        None => {
            let pattern = view.attention_pattern().clone();
            let src = h.head_dot(params.att_src)?;
            let dst = h.head_dot(params.att_dst)?;
            let mut alpha = src
                .edge_score(dst, pattern.clone())?
                .leaky_relu(cfg.slope)
                .segment_softmax(pattern.clone())?;
            if mode == Mode::Train && cfg.attn_drop > 0.0 {
                let mask = attention_mask(&pattern, heads, cfg.attn_drop, &mut rng.split(1));
                alpha = alpha.mul(tape.constant(mask))?;
            }
            alpha.edge_aggregate(h, pattern)?
        }
    };
    let concat = mixed.elu(cfg.elu_alpha);
    let heads = (0..heads)
        .map(|k| concat.slice_cols(k * dh, (k + 1) * dh))
        .collect::<Result<Vec<_>>>()?;
    Ok(GatOutput { concat, heads })
}

/// Attention coefficients of every stored edge (self-loops included) in
/// eval mode; E×K in the order of `view.attention_pattern()`.
pub fn attention_weights(params: &GatLayerParams, view: &View, cfg: &EncoderConfig) -> Result<Matrix> {
    let tape = Tape::new();
    let vars = GatVars::constants(&tape, params);
    let h = project(view, vars.w, 0.0, Mode::Eval, &mut Rng::new(0))?;
    let pattern = view.attention_pattern().clone();
    let alpha = h
        .head_dot(vars.att_src)?
        .edge_score(h.head_dot(vars.att_dst)?, pattern.clone())?
        .leaky_relu(cfg.slope)
        .segment_softmax(pattern)?;
    Ok((*alpha.value()).clone())
}

pub fn predictor_forward<'t>(p: &PredictorVars<'t>, h: Var<'t>, elu_alpha: f64) -> Result<Var<'t>> {
    let width = p.w1.shape().0;
    if h.shape().1 != width {
        return Err(Error::Shape {
            op: "predictor_forward",
            lhs: h.shape(),
            rhs: p.w1.shape(),
        });
    }
    h.matmul(p.w1)?.add_row(p.b1)?.elu(elu_alpha).matmul(p.w2)?.add_row(p.b2)
}

/// Online encoder and predictor plus two EMA target encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleNetState {
    pub config: EncoderConfig,
    pub online: GatLayerParams,
    pub predictor: PredictorParams,
    pub target1: GatLayerParams,
    pub target2: GatLayerParams,
}

impl TripleNetState {
    /// Online, predictor and each target draw from separate streams of
    /// `seed`, so the two targets start from different points.
    pub fn init(in_dim: usize, config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed);
        let sub = |k: u64| root.split(k).next_u64();
        let (heads, dh) = (config.heads, config.head_dim);
        Ok(TripleNetState {
            online: GatLayerParams::init(in_dim, heads, dh, sub(0)),
            predictor: PredictorParams::init(config.width(), sub(1)),
            target1: GatLayerParams::init(in_dim, heads, dh, sub(2)),
            target2: GatLayerParams::init(in_dim, heads, dh, sub(3)),
            config,
        })
    }

    /// Names and tensors of the trainable parameters, in optimizer order.
    pub fn trainable(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = GAT_PARAM_NAMES
            .iter()
            .zip(self.online.tensors())
            .map(|(n, t)| (format!("online.{n}"), t))
            .collect();
        out.extend(
            PREDICTOR_PARAM_NAMES
                .iter()
                .zip(self.predictor.tensors())
                .map(|(n, t)| (format!("predictor.{n}"), t)),
        );
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self.online.tensors_mut().into_iter().collect();
        out.extend(self.predictor.tensors_mut());
        out
    }

    /// Every tensor with a stable name (checkpoint order).
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.trainable();
        for (prefix, layer) in [("target1", &self.target1), ("target2", &self.target2)] {
            out.extend(GAT_PARAM_NAMES.iter().zip(layer.tensors()).map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = GAT_PARAM_NAMES
            .iter()
            .zip(self.online.tensors_mut())
            .map(|(n, t)| (format!("online.{n}"), t))
            .collect();
        out.extend(
            PREDICTOR_PARAM_NAMES
                .iter()
                .zip(self.predictor.tensors_mut())
                .map(|(n, t)| (format!("predictor.{n}"), t)),
        );
        for (prefix, layer) in [("target1", &mut self.target1), ("target2", &mut self.target2)] {
            out.extend(GAT_PARAM_NAMES.iter().zip(layer.tensors_mut()).map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out
    }

    /// `target ← m·target + (1 − m)·online` for both targets.
    pub fn ema_update(&mut self) {
        let m = self.config.ema_momentum;
        for target in [&mut self.target1, &mut self.target2] {
            for (t, o) in target.tensors_mut().into_iter().zip(self.online.tensors()) {
                ndarray::Zip::from(t).and(o).for_each(|t, &o| *t = m * *t + (1.0 - m) * o);
            }
        }
    }
}

/// Everything the objective consumes from one pass over the three views.
/// Targets are tape constants.
pub struct EmbeddingBundle<'t> {
    pub h0: Var<'t>,
    pub h1: Var<'t>,
    pub h2: Var<'t>,
    /// Per-head embeddings of the original view.
    pub heads0: Vec<Var<'t>>,
    pub p1: Var<'t>,
    pub p2: Var<'t>,
    pub z1: Var<'t>,
    pub z2: Var<'t>,
}

/// Tape handles of the trainable parameters, in [`TripleNetState::trainable`] order.
pub struct OnlineVars<'t> {
    pub gat: GatVars<'t>,
    pub predictor: PredictorVars<'t>,
}

impl<'t> OnlineVars<'t> {
    /// Rebuilds the handles from [`OnlineVars::all`] order.
    pub fn from_slice(v: &[Var<'t>]) -> Result<Self> {
        match *v {
            [w, att_src, att_dst, w1, b1, w2, b2] => Ok(OnlineVars {
                gat: GatVars { w, att_src, att_dst },
                predictor: PredictorVars { w1, b1, w2, b2 },
            }),
            _ => Err(Error::InvalidArgument(format!("expected 7 online parameter handles, got {}", v.len()))),
        }
    }

    pub fn all(&self) -> Vec<Var<'t>> {
        let mut v = self.gat.all().to_vec();
        v.extend(self.predictor.all());
        v
    }
}

/// Target embeddings computed off-tape, then recorded as constants.
fn detached_target<'t>(
    tape: &'t Tape,
    params: &GatLayerParams,
    view: &View,
    cfg: &EncoderConfig,
    mode: Mode,
    low_rank: bool,
    rng: &Rng,
) -> Result<Var<'t>> {
    let scratch = Tape::new();
    let vars = GatVars::constants(&scratch, params);
    let out = gat_forward(&vars, view, cfg, mode, low_rank, rng)?;
    Ok(tape.constant((*out.concat.value()).clone()))
}

/// Online encoder on all three views (`views[0]` is the original graph),
/// predictor on the two augmented ones, target k on view k. Stream `v` of
/// `rng` drives online view `v`; streams 3 and 4 drive the targets.
pub fn encode_all<'t>(
    tape: &'t Tape,
    state: &TripleNetState,
    views: [&View; 3],
    mode: Mode,
    rng: &Rng,
) -> Result<(EmbeddingBundle<'t>, OnlineVars<'t>)> {
    let vars = OnlineVars {
        gat: GatVars::params(tape, &state.online),
        predictor: PredictorVars::params(tape, &state.predictor),
    };
    Ok((encode_with(tape, state, &vars, views, mode, rng)?, vars))
}

/// [`encode_all`] with caller-provided handles for the online parameters.
pub fn encode_with<'t>(
    tape: &'t Tape,
    state: &TripleNetState,
    vars: &OnlineVars<'t>,
    views: [&View; 3],
    mode: Mode,
    rng: &Rng,
) -> Result<EmbeddingBundle<'t>> {
    let cfg = &state.config;
    let low_rank = |v: usize| v == 2 && cfg.global_prop == GlobalProp::LowRank;
    let (gat, predictor) = (&vars.gat, &vars.predictor);
    let o0 = gat_forward(gat, views[0], cfg, mode, false, &rng.split(0))?;
    let o1 = gat_forward(gat, views[1], cfg, mode, false, &rng.split(1))?;
    let o2 = gat_forward(gat, views[2], cfg, mode, low_rank(2), &rng.split(2))?;
    let p1 = predictor_forward(predictor, o1.concat, cfg.elu_alpha)?;
    let p2 = predictor_forward(predictor, o2.concat, cfg.elu_alpha)?;
    let z1 = detached_target(tape, &state.target1, views[1], cfg, mode, false, &rng.split(3))?;
    let z2 = detached_target(tape, &state.target2, views[2], cfg, mode, low_rank(2), &rng.split(4))?;
    Ok(EmbeddingBundle {
        h0: o0.concat,
        h1: o1.concat,
        h2: o2.concat,
        heads0: o0.heads,
        p1,
        p2,
        z1,
        z2,
    })
}

/// Eval-mode online embedding of a single view, no predictor.
pub fn embed_view(state: &TripleNetState, view: &View) -> Result<Matrix> {
    let tape = Tape::new();
    let vars = GatVars::constants(&tape, &state.online);
    let out = gat_forward(&vars, view, &state.config, Mode::Eval, false, &Rng::new(0))?;
    Ok((*out.concat.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use approx::assert_abs_diff_eq;

    fn cfg(heads: usize, dh: usize) -> EncoderConfig {
        EncoderConfig {
            heads,
            head_dim: dh,
            ..Default::default()
        }
    }

    #[test]
    fn singleton_single_head() {
        let g = Graph::from_edges(ndarray::array![[0.5, -2.0]], &[], vec![0], 1).unwrap().0;
        let view = View::original(&g);
        let p = GatLayerParams::init(2, 1, 3, 1);
        let c = cfg(1, 3);
        let alpha = attention_weights(&p, &view, &c).unwrap();
        assert_eq!(alpha, ndarray::array![[1.0]]);
        let tape = Tape::new();
        let out = gat_forward(&GatVars::constants(&tape, &p), &view, &c, Mode::Eval, false, &Rng::new(0)).unwrap();
        let expected = g.features().dot(&p.w).mapv(|v| if v > 0.0 { v } else { v.exp() - 1.0 });
        assert_eq!(*out.concat.value(), expected);
    }

    #[test]
    fn identical_pair_attends_uniformly() {
        let g = Graph::from_edges(ndarray::array![[1.0, 2.0], [1.0, 2.0]], &[(0, 1)], vec![0, 0], 1).unwrap().0;
        let p = GatLayerParams::init(2, 2, 3, 5);
        let alpha = attention_weights(&p, &View::original(&g), &cfg(2, 3)).unwrap();
        for v in alpha.iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn predictor_zero_and_identity() {
        let tape = Tape::new();
        let mut p = PredictorParams::init(3, 0);
        let h = tape.constant(ndarray::array![[0.5, 0.0, 2.0], [1.0, 3.0, 0.25]]);
        for m in p.tensors_mut() {
            m.fill(0.0);
        }
        let vars = PredictorVars::params(&tape, &p);
        assert!(predictor_forward(&vars, h, 1.0).unwrap().value().iter().all(|&v| v == 0.0));
        p.w1 = Matrix::eye(3);
        p.w2 = Matrix::eye(3);
        let vars = PredictorVars::params(&tape, &p);
        assert_eq!(*predictor_forward(&vars, h, 1.0).unwrap().value(), *h.value());
        assert!(predictor_forward(&vars, tape.constant(Matrix::zeros((1, 2))), 1.0).is_err());
    }

    #[test]
    fn ema_extremes() {
        let mut s = TripleNetState::init(3, cfg(2, 2), 7).unwrap();
        let before = s.clone();
        s.config.ema_momentum = 1.0;
        s.ema_update();
        assert_eq!(s.target1, before.target1);
        assert_eq!(s.target2, before.target2);
        s.config.ema_momentum = 0.0;
        s.ema_update();
        assert_eq!(s.target1, s.online);
        assert_eq!(s.target2, s.online);
    }

    #[test]
    fn ema_half_step() {
        let mut s = TripleNetState::init(1, cfg(2, 1), 0).unwrap();
        s.online.w.fill(1.0);
        s.target1.w.fill(0.0);
        s.config.ema_momentum = 0.5;
        s.ema_update();
        assert!(s.target1.w.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn targets_differ_at_init() {
        let s = TripleNetState::init(4, cfg(2, 3), 1).unwrap();
        assert_ne!(s.target1, s.target2);
        assert_ne!(s.online, s.target1);
        assert!(TripleNetState::init(4, cfg(1, 3), 1).is_err());
    }

    #[test]
    fn attention_mask_keeps_every_neighborhood() {
        let p = CsrPattern::from_rows(3, vec![vec![0], vec![0, 1, 2], vec![2]]).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let m = attention_mask(&p, 2, 0.9, &mut rng);
            for i in 0..3 {
                for k in 0..2 {
                    assert!(p.row_range(i).any(|e| m[[e, k]] > 0.0));
                }
            }
        }
    }
}
