//! Finite-difference check of the full objective on a small fixed graph.

use super::RunConfig;
use crate::augment::{self, CvaeParams, SvdTarget, View};
use crate::encoder::{encode_with, EncoderConfig, GlobalProp, Mode, OnlineVars, TripleNetState};
use crate::graph::Graph;
use crate::losses::total_loss;
use crate::numkit::{grad_check, GradCheckReport, Matrix, Rng, Tape};
use crate::Result;

pub const FIXTURE_NODES: usize = 8;
pub const GRADCHECK_EPS: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Ring of eight nodes with two chords and reproducible features.
pub fn fixture_graph() -> Result<Graph> {
    let mut rng = Rng::new(2024);
    let x = Matrix::from_shape_simple_fn((FIXTURE_NODES, 5), || rng.uniform());
    let mut edges: Vec<(usize, usize)> = (0..FIXTURE_NODES).map(|i| (i, (i + 1) % FIXTURE_NODES)).collect();
    edges.extend([(0, 4), (2, 6)]);
    let labels = (0..FIXTURE_NODES).map(|i| i % 2).collect();
    Ok(Graph::from_edges(x, &edges, labels, 2)?.0)
}

/// Per-parameter reports for the objective of `cfg` on the fixture, with
/// the local view from an untrained CVAE and a rank-3 global view.
pub fn objective_gradcheck(cfg: &RunConfig) -> Result<Vec<(String, GradCheckReport)>> {
    let g = fixture_graph()?;
    let cvae = CvaeParams::init(g.feature_dim(), 6, 3, false, 5);
    let original = View::original(&g);
    let local = augment::local_augment(&g, &cvae, cfg.lambda_la, &Rng::new(6))?;
    let global = augment::global_augment(&g, 3, 7, 7, SvdTarget::Adjacency)?;
    let state = TripleNetState::init(g.feature_dim(), cfg.encoder.clone(), cfg.seed)?;
    let rng = Rng::new(8);
    let base: Vec<Matrix> = state.trainable().into_iter().map(|(_, m)| m.clone()).collect();
    let names: Vec<String> = state.trainable().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::new();
    for (k, name) in names.into_iter().enumerate() {
        let report = grad_check(
            |tape: &Tape, x| {
                let handles: Vec<_> = base
                    .iter()
                    .enumerate()
                    .map(|(j, m)| if j == k { x } else { tape.constant(m.clone()) })
                    .collect();
                let vars = OnlineVars::from_slice(&handles)?;
                let bundle = encode_with(tape, &state, &vars, [&original, &local, &global], Mode::Train, &rng)?;
                Ok(total_loss(&bundle, g.adjacency(), &cfg.loss, &None)?.total)
            },
            &base[k],
            GRADCHECK_EPS,
            GRADCHECK_TOL,
        )?;
        out.push((name, report));
    }
    Ok(out)
}

/// Two heads of width 3, dropout off, default loss weights.
pub fn fixture_config(global_prop: GlobalProp) -> RunConfig {
    RunConfig {
        encoder: EncoderConfig {
            heads: 2,
            head_dim: 3,
            in_drop: 0.0,
            attn_drop: 0.0,
            global_prop,
            ..EncoderConfig::default()
        },
        ..RunConfig::default()
    }
}
