mod common;

use std::sync::Arc;

use common::*;
use gremdcl::encoder::EmbeddingBundle;
use gremdcl::losses::{self, LossWeights};
use gremdcl::numkit::{Matrix, Rng, Tape};
use proptest::prelude::*;

const TOL: f64 = 1e-12;

#[test]
fn every_loss_matches_brute_force_on_100_fixtures() {
    let worst = loss_oracle_max_error(100);
    assert!(worst < TOL, "max deviation {worst:e}");
}

#[test]
fn small_seeded_cases() {
    let mut rng = Rng::new(77);
    let (p1, p2, z1, z2) = (
        random_matrix(&mut rng, 5, 3),
        random_matrix(&mut rng, 5, 3),
        random_matrix(&mut rng, 5, 3),
        random_matrix(&mut rng, 5, 3),
    );
    let d = cross_network(&p1, &p2, &z1, &z2, 0.7, 1.0) - lib::cross_network(&p1, &p2, &z1, &z2, 0.7, 1.0);
    assert!(d.abs() < TOL);

    let (a, b) = (random_matrix(&mut rng, 6, 4), random_matrix(&mut rng, 6, 4));
    assert!(max_abs_diff(&inter(&a, &b, 1.0), &lib::inter(&a, &b, 1.0)) < TOL);
    assert!(max_abs_diff(&intra(&a, &b, 1.0), &lib::intra(&a, &b, 1.0)) < TOL);

    let h: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 5, 4)).collect();
    assert!((cross_view([&h[0], &h[1], &h[2]], 1.0) - lib::cross_view([&h[0], &h[1], &h[2]], 1.0)).abs() < TOL);

    let path: Vec<Vec<usize>> = (0..6usize)
        .map(|i| [i.checked_sub(1), (i + 1 < 6).then_some(i + 1)].into_iter().flatten().collect())
        .collect();
    let pat = Arc::new(pattern(&path));
    let (hk, hl) = (random_matrix(&mut rng, 6, 3), random_matrix(&mut rng, 6, 3));
    assert!(max_abs_diff(&neighbor_pair(&hk, &hl, &path, 0.5), &lib::neighbor_pair(&hk, &hl, &pat, 0.5)) < TOL);

    let ring: Vec<Vec<usize>> = (0..5).map(|i| vec![(i + 4) % 5, (i + 1) % 5]).collect();
    let heads: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 5, 3)).collect();
    let d = head_loss(&heads, &ring, 0.8) - lib::head_loss(&heads, &Arc::new(pattern(&ring)), 0.8);
    assert!(d.abs() < TOL);
}

fn bundle_total(m: &[Matrix], heads: &[Matrix], nbrs: &Arc<gremdcl::numkit::CsrPattern>, w: &LossWeights, cols: &losses::Columns) -> f64 {
    let t = Tape::new();
    let c = |x: &Matrix| t.constant(x.clone());
    let bundle = EmbeddingBundle {
        h0: c(&m[0]),
        h1: c(&m[1]),
        h2: c(&m[2]),
        heads0: heads.iter().map(c).collect(),
        p1: c(&m[3]),
        p2: c(&m[4]),
        z1: c(&m[5]),
        z2: c(&m[6]),
    };
    losses::total_loss(&bundle, nbrs, w, cols).unwrap().total.item()
}

#[test]
fn total_loss_is_the_weighted_oracle_sum() {
    let mut rng = Rng::new(5);
    let n = 7;
    let m: Vec<Matrix> = (0..7).map(|_| random_matrix(&mut rng, n, 4)).collect();
    let heads: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, n, 2)).collect();
    let nbrs = random_neighbors(&mut rng, n, 0.4);
    let pat = Arc::new(pattern(&nbrs));
    let w = LossWeights {
        alpha_net: 0.6,
        alpha_loss: 0.7,
        beta: 1.3,
        gamma: 0.4,
        tau: 0.9,
        ..Default::default()
    };
    let oracle = 0.7 * cross_network(&m[3], &m[4], &m[5], &m[6], 0.6, 1.0)
        + 1.3 * cross_view([&m[0], &m[1], &m[2]], 1.0)
        + 0.4 * head_loss(&heads, &nbrs, 0.9);
    assert!((bundle_total(&m, &heads, &pat, &w, &None) - oracle).abs() < TOL);

    let only_head = LossWeights {
        alpha_loss: 0.0,
        beta: 0.0,
        gamma: 1.0,
        ..w.clone()
    };
    assert!((bundle_total(&m, &heads, &pat, &only_head, &None) - head_loss(&heads, &nbrs, 0.9)).abs() < TOL);

    // A uniform temperature rescales every similarity, the head term included.
    let all = LossWeights {
        tau_all: Some(0.5),
        ..w.clone()
    };
    let oracle = 0.7 * cross_network(&m[3], &m[4], &m[5], &m[6], 0.6, 2.0)
        + 1.3 * cross_view([&m[0], &m[1], &m[2]], 2.0)
        + 0.4 * head_loss(&heads, &nbrs, 0.5);
    assert!((bundle_total(&m, &heads, &pat, &all, &None) - oracle).abs() < TOL);
}

#[test]
fn identical_embeddings_on_triangle() {
    // Every similarity is 1: cross-network ln 2 at N = 2 is covered by unit
    // tests; here N = 3 gives ln 3, cross-view 2·ln 3, head term ln 5.
    let ones = Matrix::ones((3, 4));
    let tri = vec![vec![1, 2], vec![0, 2], vec![0, 1]];
    let m: Vec<Matrix> = (0..7).map(|_| ones.clone()).collect();
    let heads = vec![Matrix::ones((3, 2)); 2];
    let got = bundle_total(&m, &heads, &Arc::new(pattern(&tri)), &LossWeights::default(), &None);
    let expect = 3f64.ln() + 2.0 * 3f64.ln() + 5f64.ln();
    assert!((got - expect).abs() < TOL, "{got} vs {expect}");
    assert!((got - (cross_network(&ones, &ones, &ones, &ones, 0.6, 1.0) + cross_view([&ones; 3], 1.0) + head_loss(&heads, &tri, 1.0))).abs() < TOL);
}

#[test]
fn sampling_every_column_equals_full_denominators() {
    let mut rng = Rng::new(8);
    let n = 9;
    let m: Vec<Matrix> = (0..7).map(|_| random_matrix(&mut rng, n, 3)).collect();
    let heads: Vec<Matrix> = (0..2).map(|_| random_matrix(&mut rng, n, 3)).collect();
    let pat = Arc::new(pattern(&random_neighbors(&mut rng, n, 0.3)));
    let w = LossWeights::default();
    let full = bundle_total(&m, &heads, &pat, &w, &None);
    let every = Some(Arc::new((0..n).collect::<Vec<_>>()));
    assert!((bundle_total(&m, &heads, &pat, &w, &every) - full).abs() < TOL);
    assert!(losses::sample_columns(n, n, &mut rng).is_none());
    assert!(losses::sample_columns(n, 0, &mut rng).is_none());
}

#[test]
fn sampled_denominators_match_restricted_oracle() {
    // With candidates restricted to `cols`, the inter-view denominator is the
    // positive plus the listed non-anchor columns.
    let mut rng = Rng::new(9);
    let n = 8;
    let (a, b) = (random_matrix(&mut rng, n, 3), random_matrix(&mut rng, n, 3));
    let cols = vec![1usize, 4, 6];
    let t = Tape::new();
    let got = losses::inter_view_loss(t.constant(a.clone()), t.constant(b.clone()), 1.0, &Some(Arc::new(cols.clone())))
        .unwrap()
        .value();
    for i in 0..n {
        let pos = cos(&a, i, &b, i);
        let mut den = pos.exp();
        for &j in &cols {
            if j != i {
                den += cos(&a, i, &b, j).exp();
            }
        }
        assert!((got[[i, 0]] - (den.ln() - pos)).abs() < TOL);
    }
}

fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = m.clone();
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(p).assign(&m.row(i));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn losses_are_scale_invariant(seed in any::<u64>(), n in 2usize..7, s in 0.01f64..100.0) {
        let mut rng = Rng::new(seed);
        let m: Vec<Matrix> = (0..7).map(|_| random_matrix(&mut rng, n, 3)).collect();
        let heads: Vec<Matrix> = (0..2).map(|_| random_matrix(&mut rng, n, 2)).collect();
        let pat = Arc::new(pattern(&random_neighbors(&mut rng, n, 0.5)));
        let w = LossWeights::default();
        let base = bundle_total(&m, &heads, &pat, &w, &None);
        let ms: Vec<Matrix> = m.iter().map(|x| x * s).collect();
        let hs: Vec<Matrix> = heads.iter().map(|x| x * s).collect();
        prop_assert!((bundle_total(&ms, &hs, &pat, &w, &None) - base).abs() < 1e-10);
        let per = lib::neighbor_pair(&heads[0], &heads[1], &pat, 0.7);
        let per_s = lib::neighbor_pair(&hs[0], &hs[1], &pat, 0.7);
        prop_assert!(max_abs_diff(&per, &per_s) < 1e-10);
        prop_assert!(max_abs_diff(&lib::intra(&m[0], &m[1], 1.0), &lib::intra(&ms[0], &ms[1], 1.0)) < 1e-10);
    }

    #[test]
    fn losses_follow_node_permutations(seed in any::<u64>(), n in 2usize..8) {
        let mut rng = Rng::new(seed);
        let m: Vec<Matrix> = (0..7).map(|_| random_matrix(&mut rng, n, 3)).collect();
        let heads: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, n, 2)).collect();
        let nbrs = random_neighbors(&mut rng, n, 0.5);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let pnbrs = {
            let mut out = vec![Vec::new(); n];
            for (i, list) in nbrs.iter().enumerate() {
                out[perm[i]] = list.iter().map(|&j| perm[j]).collect();
            }
            out
        };
        let (pat, ppat) = (Arc::new(pattern(&nbrs)), Arc::new(pattern(&pnbrs)));
        let pm: Vec<Matrix> = m.iter().map(|x| permute_rows(x, &perm)).collect();
        let ph: Vec<Matrix> = heads.iter().map(|x| permute_rows(x, &perm)).collect();
        let w = LossWeights::default();
        prop_assert!((bundle_total(&m, &heads, &pat, &w, &None) - bundle_total(&pm, &ph, &ppat, &w, &None)).abs() < 1e-10);
        let per = lib::neighbor_pair(&heads[0], &heads[1], &pat, 0.7);
        let pper = lib::neighbor_pair(&ph[0], &ph[1], &ppat, 0.7);
        for i in 0..n {
            prop_assert!((per[i] - pper[perm[i]]).abs() < 1e-10);
        }
        let inter = lib::inter(&m[0], &m[1], 1.0);
        let pinter = lib::inter(&pm[0], &pm[1], 1.0);
        for i in 0..n {
            prop_assert!((inter[i] - pinter[perm[i]]).abs() < 1e-10);
        }
    }

    #[test]
    fn lowering_a_negative_similarity_never_raises_inter_loss(seed in any::<u64>(), n in 2usize..7, drop in 0.0f64..3.0) {
        // Synthetic similarity harness: L(i) = lse_j s_ij − s_ii.
        let mut rng = Rng::new(seed);
        let s = Matrix::from_shape_simple_fn((n, n), || rng.uniform_range(-1.0, 1.0));
        let loss = |s: &Matrix, i: usize| s.row(i).iter().map(|v| v.exp()).sum::<f64>().ln() - s[[i, i]];
        let (i, j) = (rng.below(n), rng.below(n));
        prop_assume!(i != j);
        let mut lowered = s.clone();
        lowered[[i, j]] -= drop;
        prop_assert!(loss(&lowered, i) <= loss(&s, i) + 1e-15);
    }
}
