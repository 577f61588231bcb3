//! Conditional VAE over neighbor pairs: encode `(x_u, x_v)` to a diagonal
//! Gaussian, decode `(z, x_v)` back to `x_u`.
//!
//! Concatenated inputs are realized as split weights: `[a ‖ b]·[Wa; Wb]`
//! equals `a·Wa + b·Wb`, which lets sparse feature rows use CSR products.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::graph::Graph;
use crate::numkit::{AdamConfig, AdamState, CsrMatrix, Matrix, Rng, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvaeConfig {
    pub hidden: usize,
    pub z_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            hidden: 256,
            z_dim: 64,
            epochs: 100,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

pub const PARAM_NAMES: [&str; 12] = [
    "enc.w_u", "enc.w_v", "enc.b", "enc.mu.w", "enc.mu.b", "enc.logvar.w", "enc.logvar.b", "dec.w_z", "dec.w_x",
    "dec.b", "dec.out.w", "dec.out.b",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeParams {
    pub enc_wu: Matrix,
    pub enc_wv: Matrix,
    pub enc_b: Matrix,
    pub mu_w: Matrix,
    pub mu_b: Matrix,
    pub logvar_w: Matrix,
    pub logvar_b: Matrix,
    pub dec_wz: Matrix,
    pub dec_wx: Matrix,
    pub dec_b: Matrix,
    pub out_w: Matrix,
    pub out_b: Matrix,
    /// Decoder output passes through a sigmoid (binary features).
    pub sigmoid_output: bool,
}

fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_shape_simple_fn((fan_in, fan_out), || rng.uniform_range(-limit, limit))
}

impl CvaeParams {
    pub fn init(feature_dim: usize, hidden: usize, z_dim: usize, sigmoid_output: bool, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let d = feature_dim;
        // Glorot limits use the full concatenated fan-in of each layer.
        let split = |rng: &mut Rng, rows: usize, total_in: usize, out: usize| {
            let limit = (6.0 / (total_in + out) as f64).sqrt();
            Matrix::from_shape_simple_fn((rows, out), || rng.uniform_range(-limit, limit))
        };
        CvaeParams {
            enc_wu: split(&mut rng, d, 2 * d, hidden),
            enc_wv: split(&mut rng, d, 2 * d, hidden),
            enc_b: Matrix::zeros((1, hidden)),
            mu_w: glorot(&mut rng, hidden, z_dim),
            mu_b: Matrix::zeros((1, z_dim)),
            logvar_w: glorot(&mut rng, hidden, z_dim),
            logvar_b: Matrix::zeros((1, z_dim)),
            dec_wz: split(&mut rng, z_dim, z_dim + d, hidden),
            dec_wx: split(&mut rng, d, z_dim + d, hidden),
            dec_b: Matrix::zeros((1, hidden)),
            out_w: glorot(&mut rng, hidden, d),
            out_b: Matrix::zeros((1, d)),
            sigmoid_output,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.out_w.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.enc_b.ncols()
    }

    pub fn z_dim(&self) -> usize {
        self.mu_b.ncols()
    }

    pub fn encoder_input_width(&self) -> usize {
        self.enc_wu.nrows() + self.enc_wv.nrows()
    }

    pub fn decoder_input_width(&self) -> usize {
        self.dec_wz.nrows() + self.dec_wx.nrows()
    }

    pub fn tensors(&self) -> [&Matrix; 12] {
        [
            &self.enc_wu, &self.enc_wv, &self.enc_b, &self.mu_w, &self.mu_b, &self.logvar_w, &self.logvar_b,
            &self.dec_wz, &self.dec_wx, &self.dec_b, &self.out_w, &self.out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 12] {
        [
            &mut self.enc_wu, &mut self.enc_wv, &mut self.enc_b, &mut self.mu_w, &mut self.mu_b,
            &mut self.logvar_w, &mut self.logvar_b, &mut self.dec_wz, &mut self.dec_wx, &mut self.dec_b,
            &mut self.out_w, &mut self.out_b,
        ]
    }

    /// Decodes latent rows `z` conditioned on feature rows `x` (no tape).
    pub fn decode(&self, z: &Matrix, x: &FeatureRows) -> Result<Matrix> {
        if z.ncols() != self.z_dim() || z.nrows() != x.rows() || x.cols() != self.feature_dim() {
            return Err(Error::Shape {
                op: "cvae decode",
                lhs: z.dim(),
                rhs: (x.rows(), x.cols()),
            });
        }
        let mut h = z.dot(&self.dec_wz) + x.times(&self.dec_wx)? + &self.dec_b;
        h.mapv_inplace(|v| v.max(0.0));
        let mut out = h.dot(&self.out_w) + &self.out_b;
        if self.sigmoid_output {
            out.mapv_inplace(sigmoid);
        }
        Ok(out)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A block of feature rows, dense or CSR.
#[derive(Clone, Debug)]
pub enum FeatureRows {
    Dense(Arc<Matrix>),
    Sparse(Arc<CsrMatrix>),
}

impl FeatureRows {
    pub fn of_graph(g: &Graph) -> FeatureRows {
        match g.sparse_features() {
            Some(s) => FeatureRows::Sparse(s.clone()),
            None => FeatureRows::Dense(g.features().clone()),
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            FeatureRows::Dense(m) => m.nrows(),
            FeatureRows::Sparse(s) => s.shape().0,
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            FeatureRows::Dense(m) => m.ncols(),
            FeatureRows::Sparse(s) => s.shape().1,
        }
    }

    pub fn select(&self, idx: &[usize]) -> FeatureRows {
        match self {
            FeatureRows::Dense(m) => FeatureRows::Dense(Arc::new(m.select(ndarray::Axis(0), idx))),
            FeatureRows::Sparse(s) => FeatureRows::Sparse(Arc::new(s.select_rows(idx))),
        }
    }

    pub fn to_dense(&self) -> Matrix {
        match self {
            FeatureRows::Dense(m) => (**m).clone(),
            FeatureRows::Sparse(s) => s.to_dense(),
        }
    }

    fn times(&self, w: &Matrix) -> Result<Matrix> {
        match self {
            FeatureRows::Dense(m) => Ok(m.dot(w)),
            FeatureRows::Sparse(s) => s.matmul_dense(w),
        }
    }

    fn times_var<'t>(&self, w: Var<'t>) -> Result<Var<'t>> {
        match self {
            FeatureRows::Dense(m) => w.tape().constant((**m).clone()).matmul(w),
            FeatureRows::Sparse(s) => w.sparse_matmul(s.clone()),
        }
    }
}

/// Closed-form `KL(N(mu, diag(exp(log_var))) ‖ N(0, I))`.
pub fn gaussian_kl(mu: &[f64], log_var: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(&m, &lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

/// Batch-mean negative ELBO split into its two terms.
pub struct ElboTerms<'t> {
    pub recon: Var<'t>,
    pub kl: Var<'t>,
    pub total: Var<'t>,
}

struct ParamVars<'t>([Var<'t>; 12]);

impl<'t> ParamVars<'t> {
    fn register(tape: &'t Tape, p: &CvaeParams, trainable: bool) -> Self {
        let t = p.tensors();
        ParamVars(std::array::from_fn(|k| {
            if trainable {
                tape.param(t[k].clone())
            } else {
                tape.constant(t[k].clone())
            }
        }))
    }
}

/// Negative ELBO of the pairs `(x_u[b], x_v[b])` with one latent draw per
/// pair given by `eps` (B×z_dim), averaged over the batch. Reconstruction
/// error is the squared error summed over features.
fn elbo_on_tape<'t>(
    vars: &ParamVars<'t>,
    sigmoid_output: bool,
    x_u: &FeatureRows,
    x_u_dense: &Matrix,
    x_v: &FeatureRows,
    eps: &Matrix,
) -> Result<ElboTerms<'t>> {
    let [wu, wv, b, mu_w, mu_b, lv_w, lv_b, wz, wx, db, ow, ob] = vars.0;
    let tape = wu.tape();
    let batch = x_u.rows();
    if x_v.rows() != batch || eps.nrows() != batch || x_u_dense.nrows() != batch {
        return Err(Error::Shape {
            op: "cvae batch",
            lhs: (batch, x_u.cols()),
            rhs: (x_v.rows(), x_v.cols()),
        });
    }
    let h = x_u.times_var(wu)?.add(x_v.times_var(wv)?)?.add_row(b)?.relu();
    let mu = h.matmul(mu_w)?.add_row(mu_b)?;
    let log_var = h.matmul(lv_w)?.add_row(lv_b)?;
    let z = log_var.scale(0.5).exp().mul(tape.constant(eps.clone()))?.add(mu)?;
    let hd = z.matmul(wz)?.add(x_v.times_var(wx)?)?.add_row(db)?.relu();
    let mut out = hd.matmul(ow)?.add_row(ob)?;
    if sigmoid_output {
        out = out.sigmoid();
    }
    let diff = out.sub(tape.constant(x_u_dense.clone()))?;
    let inv_b = 1.0 / batch as f64;
    let recon = diff.mul(diff)?.sum().scale(inv_b);
    let kl = log_var
        .add_scalar(1.0)
        .sub(mu.mul(mu)?)?
        .sub(log_var.exp())?
        .sum()
        .scale(-0.5 * inv_b);
    let total = recon.add(kl)?;
    Ok(ElboTerms { recon, kl, total })
}

/// Negative ELBO of one pair with a latent draw from `rng`.
pub fn cvae_elbo(params: &CvaeParams, x_u: &[f64], x_v: &[f64], rng: &mut Rng) -> Result<f64> {
    let d = params.feature_dim();
    if x_u.len() != d || x_v.len() != d {
        return Err(Error::Shape {
            op: "cvae_elbo",
            lhs: (1, x_u.len()),
            rhs: (1, x_v.len()),
        });
    }
    let eps = Matrix::from_shape_simple_fn((1, params.z_dim()), || rng.normal());
    cvae_elbo_with_noise(params, x_u, x_v, &eps)
}

/// [`cvae_elbo`] with an explicit `1×z_dim` standard-normal draw.
pub fn cvae_elbo_with_noise(params: &CvaeParams, x_u: &[f64], x_v: &[f64], eps: &Matrix) -> Result<f64> {
    let d = params.feature_dim();
    let row = |x: &[f64]| Matrix::from_shape_vec((1, d), x.to_vec());
    let (xu, xv) = (
        row(x_u).map_err(|_| Error::InvalidArgument("x_u length".into()))?,
        row(x_v).map_err(|_| Error::InvalidArgument("x_v length".into()))?,
    );
    let tape = Tape::new();
    let vars = ParamVars::register(&tape, params, false);
    let xu_rows = FeatureRows::Dense(Arc::new(xu.clone()));
    let xv_rows = FeatureRows::Dense(Arc::new(xv));
    Ok(elbo_on_tape(&vars, params.sigmoid_output, &xu_rows, &xu, &xv_rows, eps)?.total.item())
}

/// Minimizes the mean negative ELBO over `pairs` of (neighbor u, center v)
/// with Adam. Returns the parameters and the mean loss of every epoch.
/// Epoch `e` shuffles with stream `e` of the seed; batch `b` of that epoch
/// draws its noise from the batch's own substream.
pub fn train_cvae_on_pairs(
    features: &FeatureRows,
    pairs: &[(usize, usize)],
    sigmoid_output: bool,
    cfg: &CvaeConfig,
) -> Result<(CvaeParams, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("cvae training needs at least one neighbor pair".into()));
    }
    if cfg.batch_size == 0 || cfg.hidden == 0 || cfg.z_dim == 0 {
        return Err(Error::Config("cvae batch size, hidden width and latent width must be positive".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut params = CvaeParams::init(features.cols(), cfg.hidden, cfg.z_dim, sigmoid_output, mix_seed(cfg.seed));
    let shapes: Vec<_> = params.tensors().iter().map(|m| m.dim()).collect();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &shapes,
    );
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let epoch_rng = root.split(epoch as u64);
        let mut shuffle_rng = epoch_rng.split(0);
        shuffle_rng.shuffle(&mut order);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let u: Vec<usize> = chunk.iter().map(|&p| pairs[p].0).collect();
            let v: Vec<usize> = chunk.iter().map(|&p| pairs[p].1).collect();
            let (xu, xv) = (features.select(&u), features.select(&v));
            let xu_dense = xu.to_dense();
            let mut noise = epoch_rng.split(1 + b as u64);
            let eps = Matrix::from_shape_simple_fn((chunk.len(), cfg.z_dim), || noise.normal());

            let tape = Tape::new();
            let vars = ParamVars::register(&tape, &params, true);
            let terms = elbo_on_tape(&vars, sigmoid_output, &xu, &xu_dense, &xv, &eps)?;
            let loss = terms.total.item();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("cvae loss at epoch {}", epoch + 1)));
            }
            tape.backward(terms.total)?;
            let grads: Vec<Matrix> = vars.0.iter().map(|v| v.grad().expect("parameter gradient")).collect();
            let grad_refs: Vec<&Matrix> = grads.iter().collect();
            let mut p = params.tensors_mut();
            adam.step(&PARAM_NAMES, &mut p, &grad_refs)?;
            total += loss * chunk.len() as f64;
        }
        trace.push(total / pairs.len() as f64);
    }
    Ok((params, trace))
}

/// Parameter-initialization seed derived from the run seed.
fn mix_seed(seed: u64) -> u64 {
    Rng::new(seed).split(u64::MAX).next_u64()
}

/// Trains on every directed neighbor pair of `g`; the sigmoid output is
/// used when all features are 0/1.
pub fn train_cvae(g: &Graph, cfg: &CvaeConfig) -> Result<(CvaeParams, Vec<f64>)> {
    if g.num_edge_entries() == 0 {
        return Err(Error::InvalidArgument("cvae training needs a graph with at least one edge".into()));
    }
    let pairs: Vec<(usize, usize)> = g.adjacency().iter().map(|(v, u)| (u, v)).collect();
    train_cvae_on_pairs(&FeatureRows::of_graph(g), &pairs, g.has_binary_features(), cfg)
}

/// Standard-normal latent draws, row `v` from stream `v` of `rng`.
pub fn latent_samples(n: usize, z_dim: usize, rng: &Rng) -> Matrix {
    let mut z = Matrix::zeros((n, z_dim));
    for (v, mut row) in z.rows_mut().into_iter().enumerate() {
        let mut r = rng.split(v as u64);
        row.mapv_inplace(|_| r.normal());
    }
    z
}
