//! Independent scalar re-implementations of the objective, fixtures, and a
//! one-sided Jacobi SVD. Only the `lib` wrappers call the library.
#![allow(dead_code)]

use gremdcl::numkit::{CsrPattern, Matrix, Rng};

pub fn cos(a: &Matrix, i: usize, b: &Matrix, j: usize) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.ncols() {
        dot += a[[i, k]] * b[[j, k]];
        na += a[[i, k]] * a[[i, k]];
        nb += b[[j, k]] * b[[j, k]];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// `-log(exp(num) / Σ exp(den))`, evaluated naively.
fn neg_log_ratio(num: f64, den: &[f64]) -> f64 {
    let s: f64 = den.iter().map(|v| v.exp()).sum();
    -(num.exp() / s).ln()
}

/// −log softmax of column `i` in row `i` of `sim(a, b)·scale`.
fn diag_term(a: &Matrix, b: &Matrix, i: usize, scale: f64) -> f64 {
    let den: Vec<f64> = (0..b.nrows()).map(|j| scale * cos(a, i, b, j)).collect();
    neg_log_ratio(scale * cos(a, i, b, i), &den)
}

pub fn cross_network(p1: &Matrix, p2: &Matrix, z1: &Matrix, z2: &Matrix, alpha: f64, scale: f64) -> f64 {
    let n = p1.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for p in [p1, p2] {
            total += alpha * diag_term(p, z1, i, scale) + (1.0 - alpha) * diag_term(p, z2, i, scale);
        }
    }
    total / (2 * n) as f64
}

pub fn inter(ha: &Matrix, hb: &Matrix, scale: f64) -> Vec<f64> {
    (0..ha.nrows()).map(|i| diag_term(ha, hb, i, scale)).collect()
}

pub fn intra(ha: &Matrix, hb: &Matrix, scale: f64) -> Vec<f64> {
    let n = ha.nrows();
    (0..n)
        .map(|i| {
            let pos = scale * cos(ha, i, hb, i);
            let mut den = vec![pos];
            for j in 0..n {
                if j != i {
                    den.push(scale * cos(ha, i, ha, j));
                }
            }
            neg_log_ratio(pos, &den)
        })
        .collect()
}

pub fn cross_view(h: [&Matrix; 3], scale: f64) -> f64 {
    let n = h[0].nrows();
    let mut total = 0.0;
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let (ia, ib) = (inter(h[a], h[b], scale), inter(h[b], h[a], scale));
        let (ra, rb) = (intra(h[a], h[b], scale), intra(h[b], h[a], scale));
        for i in 0..n {
            total += 0.5 * (ia[i] + ra[i] + ib[i] + rb[i]);
        }
    }
    total / (3 * n) as f64
}

/// Enumerates the positive and candidate sets of every anchor explicitly.
pub fn neighbor_pair(hk: &Matrix, hl: &Matrix, nbrs: &[Vec<usize>], tau: f64) -> Vec<f64> {
    let n = hk.nrows();
    (0..n)
        .map(|i| {
            let mut positives = vec![cos(hk, i, hl, i) / tau];
            for &j in &nbrs[i] {
                positives.push(cos(hk, i, hk, j) / tau);
                positives.push(cos(hk, i, hl, j) / tau);
            }
            let mut cands = Vec::new();
            for j in 0..n {
                if j != i {
                    cands.push(cos(hk, i, hk, j) / tau);
                }
                cands.push(cos(hk, i, hl, j) / tau);
            }
            let total: f64 = positives.iter().map(|&p| neg_log_ratio(p, &cands)).sum();
            total / positives.len() as f64
        })
        .collect()
}

pub fn head_loss(heads: &[Matrix], nbrs: &[Vec<usize>], tau: f64) -> f64 {
    let k = heads.len();
    let n = heads[0].nrows();
    let mut total = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                total += neighbor_pair(&heads[a], &heads[b], nbrs, tau).iter().sum::<f64>() / n as f64;
            }
        }
    }
    total / (k * (k - 1)) as f64
}

pub fn random_matrix(rng: &mut Rng, n: usize, e: usize) -> Matrix {
    Matrix::from_shape_simple_fn((n, e), || rng.normal())
}

/// Symmetric loop-free neighbor lists, each edge present with probability `p`.
pub fn random_neighbors(rng: &mut Rng, n: usize, p: f64) -> Vec<Vec<usize>> {
    let mut nbrs = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.bernoulli(p) {
                nbrs[i].push(j);
                nbrs[j].push(i);
            }
        }
    }
    nbrs
}

pub fn pattern(nbrs: &[Vec<usize>]) -> CsrPattern {
    CsrPattern::from_rows(nbrs.len(), nbrs.to_vec()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Singular values of `m` (descending) by one-sided Jacobi rotations.
pub fn jacobi_singular_values(m: &Matrix) -> Vec<f64> {
    let transpose = m.nrows() < m.ncols();
    let mut a: Vec<Vec<f64>> = if transpose {
        (0..m.nrows()).map(|i| m.row(i).to_vec()).collect()
    } else {
        (0..m.ncols()).map(|j| m.column(j).to_vec()).collect()
    };
    // `a` holds columns; rotate pairs until all are mutually orthogonal.
    let cols = a.len();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = a[p].iter().map(|v| v * v).sum();
                let beta: f64 = a[q].iter().map(|v| v * v).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..a[p].len() {
                    let (x, y) = (a[p][k], a[q][k]);
                    a[p][k] = c * x - s * y;
                    a[q][k] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = a.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

pub mod lib {
    //! Thin wrappers evaluating the library losses on plain matrices.
    use std::sync::Arc;

    use gremdcl::losses;
    use gremdcl::numkit::{CsrPattern, Matrix, Tape};

    fn column(v: &Matrix) -> Vec<f64> {
        v.iter().copied().collect()
    }

    pub fn cross_network(p1: &Matrix, p2: &Matrix, z1: &Matrix, z2: &Matrix, alpha: f64, scale: f64) -> f64 {
        let t = Tape::new();
        let c = |m: &Matrix| t.constant(m.clone());
        losses::cross_network_loss(c(p1), c(p2), c(z1), c(z2), alpha, scale, &None).unwrap().item()
    }

    pub fn inter(ha: &Matrix, hb: &Matrix, scale: f64) -> Vec<f64> {
        let t = Tape::new();
        column(&losses::inter_view_loss(t.constant(ha.clone()), t.constant(hb.clone()), scale, &None).unwrap().value())
    }

    pub fn intra(ha: &Matrix, hb: &Matrix, scale: f64) -> Vec<f64> {
        let t = Tape::new();
        column(&losses::intra_view_loss(t.constant(ha.clone()), t.constant(hb.clone()), scale, &None).unwrap().value())
    }

    pub fn cross_view(h: [&Matrix; 3], scale: f64) -> f64 {
        let t = Tape::new();
        let v = h.map(|m| t.constant(m.clone()));
        losses::cross_view_loss(v, scale, &None).unwrap().item()
    }

    pub fn neighbor_pair(hk: &Matrix, hl: &Matrix, nbrs: &Arc<CsrPattern>, tau: f64) -> Vec<f64> {
        let t = Tape::new();
        column(
            &losses::neighbor_contrast_pair(t.constant(hk.clone()), t.constant(hl.clone()), nbrs, tau, &None)
                .unwrap()
                .value(),
        )
    }

    pub fn head_loss(heads: &[Matrix], nbrs: &Arc<CsrPattern>, tau: f64) -> f64 {
        let t = Tape::new();
        let v: Vec<_> = heads.iter().map(|m| t.constant(m.clone())).collect();
        losses::head_neighbor_loss(&v, nbrs, tau, &None).unwrap().item()
    }
}

/// Largest absolute library-vs-oracle difference over `count` seeded
/// fixtures with N in 2..=8 and embedding width in 2..=5, across every loss
/// operation.
pub fn loss_oracle_max_error(count: u64) -> f64 {
    use std::sync::Arc;
    let mut worst = 0.0f64;
    for f in 0..count {
        let mut rng = Rng::new(0xC0FFEE).split(f);
        let n = 2 + rng.below(7);
        let e = 2 + rng.below(4);
        let scale = if f % 3 == 0 { 1.0 } else { rng.uniform_range(0.2, 5.0) };
        let tau = rng.uniform_range(0.2, 2.0);
        let alpha = rng.uniform();
        let m: Vec<Matrix> = (0..4).map(|_| random_matrix(&mut rng, n, e)).collect();
        let nbrs = random_neighbors(&mut rng, n, 0.4);
        let pat = Arc::new(pattern(&nbrs));
        let k = 2 + rng.below(2);
        let heads: Vec<Matrix> = (0..k).map(|_| random_matrix(&mut rng, n, e)).collect();

        let mut diffs = vec![
            (cross_network(&m[0], &m[1], &m[2], &m[3], alpha, scale) - lib::cross_network(&m[0], &m[1], &m[2], &m[3], alpha, scale)).abs(),
            max_abs_diff(&inter(&m[0], &m[1], scale), &lib::inter(&m[0], &m[1], scale)),
            max_abs_diff(&intra(&m[0], &m[1], scale), &lib::intra(&m[0], &m[1], scale)),
            (cross_view([&m[0], &m[1], &m[2]], scale) - lib::cross_view([&m[0], &m[1], &m[2]], scale)).abs(),
            max_abs_diff(&neighbor_pair(&m[0], &m[1], &nbrs, tau), &lib::neighbor_pair(&m[0], &m[1], &pat, tau)),
        ];
        diffs.push((head_loss(&heads, &nbrs, tau) - lib::head_loss(&heads, &pat, tau)).abs());
        for d in diffs {
            assert!(d.is_finite(), "fixture {f}: non-finite difference");
            worst = worst.max(d);
        }
    }
    worst
}

/// Worst singular-value deviation from the Jacobi oracle and worst
/// full-rank reconstruction error over `count` seeded Gaussian matrices
/// with both dimensions in 2..=64.
pub fn svd_oracle_max_errors(count: u64, iters: usize) -> (f64, f64) {
    use gremdcl::numkit::truncated_svd;
    let (mut sv_err, mut recon_err) = (0.0f64, 0.0f64);
    for f in 0..count {
        let mut rng = Rng::new(0x5EED).split(f);
        let (rows, cols) = (2 + rng.below(63), 2 + rng.below(63));
        let m = random_matrix(&mut rng, rows, cols);
        let min = rows.min(cols);
        let q = 1 + rng.below(min);
        let reference = jacobi_singular_values(&m);
        let svd = truncated_svd(&m, q, iters, f).unwrap();
        for (k, s) in svd.s.iter().enumerate() {
            sv_err = sv_err.max((s - reference[k]).abs());
        }
        let full = truncated_svd(&m, min, iters, f).unwrap();
        let diff = &full.reconstruct() - &m;
        recon_err = recon_err.max(diff.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    }
    (sv_err, recon_err)
}

/// `Σ ½(σ² + μ² − 1 − ln σ²)` evaluated term by term.
pub fn gaussian_kl_oracle(mu: &[f64], log_var: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&m, &lv) in mu.iter().zip(log_var) {
        let var = lv.exp();
        kl += 0.5 * (var + m * m - 1.0 - var.ln());
    }
    kl
}

pub fn kl_oracle_max_error(count: u64) -> f64 {
    use gremdcl::augment::cvae::gaussian_kl;
    let mut worst = 0.0f64;
    for f in 0..count {
        let mut rng = Rng::new(0x4B4C).split(f);
        let d = 1 + rng.below(16);
        let mu: Vec<f64> = (0..d).map(|_| 2.0 * rng.normal()).collect();
        let lv: Vec<f64> = (0..d).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        worst = worst.max((gaussian_kl(&mu, &lv) - gaussian_kl_oracle(&mu, &lv)).abs());
    }
    worst
}

pub struct CvaeCheck {
    /// `1 − last / first` of the per-step negative ELBO.
    pub reduction: f64,
    /// Smallest cosine between a generated row and its own prototype.
    pub own_min: f64,
    /// Largest cosine between a generated row and the other prototype.
    pub other_max: f64,
}

/// 200 single-batch Adam steps on the 50+50 two-cluster graph, then one
/// generated feature row per node.
pub fn cvae_two_cluster_check() -> CvaeCheck {
    use gremdcl::augment::{self, CvaeConfig};
    use gremdcl::graph::synthetic::{two_cluster, two_cluster_prototype};
    let d = 16;
    let g = two_cluster(50, d, 0.1, 3).unwrap();
    let cfg = CvaeConfig {
        hidden: 32,
        z_dim: 8,
        epochs: 200,
        batch_size: g.num_edge_entries(),
        lr: 0.01,
        seed: 11,
    };
    let (params, trace) = augment::cvae::train_cvae(&g, &cfg).unwrap();
    let gen = augment::generate_features(&g, &params, &Rng::new(12)).unwrap();
    let protos = [two_cluster_prototype(0, d), two_cluster_prototype(1, d)];
    let (mut own_min, mut other_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in 0..g.num_nodes() {
        let c = g.labels()[v];
        own_min = own_min.min(cos(&gen, v, &protos[c], 0));
        other_max = other_max.max(cos(&gen, v, &protos[1 - c], 0));
    }
    CvaeCheck {
        reduction: 1.0 - trace[trace.len() - 1] / trace[0],
        own_min,
        other_max,
    }
}

/// Eval-mode attention layer on dense matrices: full score matrix, mask
/// outside `N(i) ∪ {i}`, softmax per row, aggregate, ELU.
pub fn dense_attention_oracle(
    p: &gremdcl::encoder::GatLayerParams,
    x: &Matrix,
    nbrs: &[Vec<usize>],
    slope: f64,
    elu_alpha: f64,
) -> Matrix {
    let n = x.nrows();
    let (heads, dh) = p.att_src.dim();
    let mut h = Matrix::zeros((n, heads * dh));
    for i in 0..n {
        for c in 0..heads * dh {
            h[[i, c]] = (0..x.ncols()).map(|k| x[[i, k]] * p.w[[k, c]]).sum();
        }
    }
    let mut out = Matrix::zeros((n, heads * dh));
    for k in 0..heads {
        let cols = k * dh..(k + 1) * dh;
        for i in 0..n {
            let mut scores = vec![f64::NEG_INFINITY; n];
            for j in 0..n {
                if j == i || nbrs[i].contains(&j) {
                    let e: f64 = cols
                        .clone()
                        .enumerate()
                        .map(|(t, c)| p.att_src[[k, t]] * h[[i, c]] + p.att_dst[[k, t]] * h[[j, c]])
                        .sum();
                    scores[j] = if e > 0.0 { e } else { slope * e };
                }
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            for c in cols.clone() {
                let v: f64 = (0..n).map(|j| weights[j] / total * h[[j, c]]).sum();
                out[[i, c]] = if v > 0.0 { v } else { elu_alpha * (v.exp() - 1.0) };
            }
        }
    }
    out
}

pub fn max_abs_matrix_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random connected-ish graph on `n` nodes with features from `rng`.
pub fn random_graph(rng: &mut Rng, n: usize, d: usize, p: f64) -> gremdcl::graph::Graph {
    let x = random_matrix(rng, n, d);
    let nbrs = random_neighbors(rng, n, p);
    let edges: Vec<(usize, usize)> = nbrs
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
        .collect();
    let labels = (0..n).map(|i| i % 2).collect();
    gremdcl::graph::Graph::from_edges(x, &edges, labels, 2).unwrap().0
}

fn encoder_config(heads: usize, head_dim: usize) -> gremdcl::encoder::EncoderConfig {
    gremdcl::encoder::EncoderConfig {
        heads,
        head_dim,
        ..Default::default()
    }
}

/// Worst deviation of the eval-mode encoder from the dense oracle over
/// `count` random 6-node graphs.
pub fn encoder_oracle_max_error(count: u64) -> f64 {
    use gremdcl::augment::View;
    use gremdcl::encoder::{embed_view, TripleNetState};
    let mut worst = 0.0f64;
    for f in 0..count {
        let mut rng = Rng::new(0x6A7).split(f);
        let g = random_graph(&mut rng, 6, 4, 0.4);
        let cfg = encoder_config(2 + rng.below(3), 1 + rng.below(4));
        let state = TripleNetState::init(4, cfg.clone(), f).unwrap();
        let got = embed_view(&state, &View::original(&g)).unwrap();
        let want = dense_attention_oracle(&state.online, g.features(), &g.neighbor_sets(), cfg.slope, cfg.elu_alpha);
        worst = worst.max(max_abs_matrix_diff(&got, &want));
    }
    worst
}

/// Worst `|emb(πG)[π(i)] − emb(G)[i]|` over random 6-node graphs, for the
/// original view and a full-rank global view with both propagations.
pub fn encoder_permutation_max_error(count: u64) -> f64 {
    use gremdcl::augment::{global_augment, SvdTarget, View};
    use gremdcl::encoder::{gat_forward, GatVars, GlobalProp, Mode, TripleNetState};
    use gremdcl::numkit::Tape;
    let mut worst = 0.0f64;
    for f in 0..count {
        let mut rng = Rng::new(0x9E7).split(f);
        let g = random_graph(&mut rng, 6, 3, 0.5);
        let mut perm: Vec<usize> = (0..6).collect();
        rng.shuffle(&mut perm);
        let pg = g.permuted(&perm).unwrap();
        let state = TripleNetState::init(3, encoder_config(3, 2), f).unwrap();
        let views = |g: &gremdcl::graph::Graph| {
            [
                (View::original(g), false),
                (global_augment(g, 6, 30, 1, SvdTarget::Adjacency).unwrap(), true),
            ]
        };
        for ((a, low_rank), (b, _)) in views(&g).into_iter().zip(views(&pg)) {
            let flags: &[bool] = if low_rank { &[false, true] } else { &[false] };
            for &lr in flags {
                let mut cfg = state.config.clone();
                cfg.global_prop = if lr { GlobalProp::LowRank } else { GlobalProp::Attention };
                let run = |v: &View| {
                    let tape = Tape::new();
                    let vars = GatVars::constants(&tape, &state.online);
                    let out = gat_forward(&vars, v, &cfg, Mode::Eval, lr, &Rng::new(0)).unwrap();
                    (*out.concat.value()).clone()
                };
                let (ea, eb) = (run(&a), run(&b));
                for i in 0..6 {
                    for c in 0..ea.ncols() {
                        worst = worst.max((ea[[i, c]] - eb[[perm[i], c]]).abs());
                    }
                }
            }
        }
    }
    worst
}

/// Worst deviation from `‖p_t − p_o‖ = mᵗ·‖p_0 − p_o‖`, relative to the
/// initial distance, over a few momenta and up to 20 updates with fixed
/// online parameters.
pub fn ema_contraction_max_error() -> f64 {
    use gremdcl::encoder::TripleNetState;
    let dist = |s: &TripleNetState| -> f64 {
        let mut sq = 0.0;
        for t in [&s.target1, &s.target2] {
            for (a, b) in t.tensors().into_iter().zip(s.online.tensors()) {
                sq += (a - b).mapv(|v| v * v).sum();
            }
        }
        sq.sqrt()
    };
    let mut worst = 0.0f64;
    for (k, m) in [0.5, 0.9, 0.99].into_iter().enumerate() {
        let mut cfg = encoder_config(2, 3);
        cfg.ema_momentum = m;
        let mut s = TripleNetState::init(5, cfg, k as u64).unwrap();
        let d0 = dist(&s);
        for t in 1..=20 {
            s.ema_update();
            let expect = m.powi(t) * d0;
            worst = worst.max((dist(&s) - expect).abs() / d0);
        }
    }
    worst
}

/// Small, fast run on the built-in two-cluster graph (100 nodes).
pub fn small_run_config() -> gremdcl::pipeline::RunConfig {
    use gremdcl::pipeline::RunConfig;
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("dataset", "two_cluster:4"),
        ("epochs", "20"),
        ("heads", "2"),
        ("head_dim", "4"),
        ("cvae_epochs", "3"),
        ("cvae_hidden", "8"),
        ("cvae_zdim", "4"),
        ("cvae_batch", "64"),
        ("lr", "0.01"),
        ("num_splits", "3"),
        ("train_per_class", "10"),
        ("val_size", "20"),
        ("probe_epochs", "100"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

/// Every library loss on one fixture, flattened in a fixed order.
fn all_losses(m: &[Matrix], heads: &[Matrix], pat: &std::sync::Arc<CsrPattern>, tau: f64) -> Vec<f64> {
    let mut v = vec![
        lib::cross_network(&m[0], &m[1], &m[2], &m[3], 0.6, 1.0),
        lib::cross_view([&m[0], &m[1], &m[2]], 1.0),
        lib::head_loss(heads, pat, tau),
    ];
    v.extend(lib::inter(&m[0], &m[1], 1.0));
    v.extend(lib::intra(&m[0], &m[1], 1.0));
    v.extend(lib::neighbor_pair(&heads[0], &heads[1], pat, tau));
    v
}

/// Worst change of any loss value when every embedding matrix is scaled by
/// a positive factor.
pub fn loss_scale_max_error(count: u64) -> f64 {
    let mut worst = 0.0f64;
    for f in 0..count {
        let mut rng = Rng::new(0x5CA1E).split(f);
        let n = 2 + rng.below(7);
        let e = 2 + rng.below(4);
        let m: Vec<Matrix> = (0..4).map(|_| random_matrix(&mut rng, n, e)).collect();
        let heads: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, n, e)).collect();
        let pat = std::sync::Arc::new(pattern(&random_neighbors(&mut rng, n, 0.4)));
        let s = 10f64.powf(rng.uniform_range(-3.0, 3.0));
        let scaled: Vec<Matrix> = m.iter().map(|x| x * s).collect();
        let scaled_heads: Vec<Matrix> = heads.iter().map(|x| x * s).collect();
        worst = worst.max(max_abs_diff(&all_losses(&m, &heads, &pat, 0.7), &all_losses(&scaled, &scaled_heads, &pat, 0.7)));
    }
    worst
}

/// Worst change of a scalar loss under node relabeling (embedding rows and
/// the neighbor structure permuted together).
pub fn loss_permutation_max_error(count: u64) -> f64 {
    let mut worst = 0.0f64;
    for f in 0..count {
        let mut rng = Rng::new(0x9E12).split(f);
        let n = 2 + rng.below(7);
        let e = 2 + rng.below(4);
        let m: Vec<Matrix> = (0..4).map(|_| random_matrix(&mut rng, n, e)).collect();
        let heads: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, n, e)).collect();
        let nbrs = random_neighbors(&mut rng, n, 0.4);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let permute = |x: &Matrix| {
            let mut out = x.clone();
            for (i, &p) in perm.iter().enumerate() {
                out.row_mut(p).assign(&x.row(i));
            }
            out
        };
        let mut pnbrs = vec![Vec::new(); n];
        for (i, list) in nbrs.iter().enumerate() {
            pnbrs[perm[i]] = list.iter().map(|&j| perm[j]).collect();
        }
        let (pat, ppat) = (std::sync::Arc::new(pattern(&nbrs)), std::sync::Arc::new(pattern(&pnbrs)));
        let pm: Vec<Matrix> = m.iter().map(permute).collect();
        let ph: Vec<Matrix> = heads.iter().map(permute).collect();
        let scalars = |m: &[Matrix], h: &[Matrix], p: &std::sync::Arc<CsrPattern>| all_losses(m, h, p, 0.7)[..3].to_vec();
        worst = worst.max(max_abs_diff(&scalars(&m, &heads, &pat), &scalars(&pm, &ph, &ppat)));
    }
    worst
}

/// Split determinism: equal seeds give equal splits, distinct seeds give
/// distinct training sets, and every split partitions the node set.
pub fn splits_deterministic(seeds: u64) -> bool {
    use gremdcl::graph::{make_split, synthetic::PlantedPartition};
    let g = PlantedPartition::cora_like(0).generate().unwrap();
    let mut previous = None;
    for seed in 0..seeds {
        let a = make_split(&g, seed).unwrap();
        if a != make_split(&g, seed).unwrap() || previous.as_ref() == Some(&a.train_idx) {
            return false;
        }
        let mut all: Vec<usize> = a.train_idx.iter().chain(&a.val_idx).chain(&a.test_idx).copied().collect();
        all.sort_unstable();
        if all != (0..g.num_nodes()).collect::<Vec<_>>() {
            return false;
        }
        previous = Some(a.train_idx);
    }
    true
}

/// `from_text(to_text(c)) == c` for the default config and randomized
/// variants touching every key group.
pub fn config_round_trips(count: u64) -> bool {
    use gremdcl::pipeline::RunConfig;
    let mut configs = vec![RunConfig::default()];
    for f in 0..count {
        let mut rng = Rng::new(0xC0F).split(f);
        let mut c = RunConfig::default();
        let u = |rng: &mut Rng| format!("{}", rng.uniform());
        for (k, v) in [
            ("lambda_la", u(&mut rng)),
            ("tau", format!("{}", 0.1 + rng.uniform())),
            ("alpha_net", u(&mut rng)),
            ("in_drop", format!("{}", 0.5 * rng.uniform())),
            ("seed", rng.next_u64().to_string()),
            ("epochs", rng.below(1000).to_string()),
            ("no_la", rng.bernoulli(0.5).to_string()),
            ("global_prop", if rng.bernoulli(0.5) { "lowrank" } else { "attention" }.to_string()),
            ("tau_all", if rng.bernoulli(0.5) { "none".into() } else { format!("{}", 0.1 + rng.uniform()) }),
            ("probe_l2_grid", format!("{},{}", rng.uniform(), rng.uniform())),
        ] {
            c.set(k, &v).unwrap();
        }
        configs.push(c);
    }
    configs
        .iter()
        .all(|c| RunConfig::from_text(&c.to_text()).is_ok_and(|back| back == *c))
}
