//! Pretraining the augmenters and the contrastive encoder.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use super::RunConfig;
use crate::augment::{self, CvaeConfig, CvaeParams, View, ViewTag};
use crate::encoder::{embed_view, encode_all, Mode, TripleNetState};
use crate::graph::{self, Graph};
use crate::losses::{plain_contrast_loss, sample_columns, total_loss};
use crate::numkit::{AdamConfig, AdamState, Matrix, Rng, Tape};
use crate::{Error, Result};

/// Parent stream of the per-epoch encoder randomness; kept apart from the
/// low streams that seed parameter initialization.
const TRAIN_STREAM: u64 = 1 << 32;
/// Parent stream of the per-epoch feature generation.
const GENERATE_STREAM: u64 = u64::MAX - 1;

/// Loss components of one epoch. Skipped components are `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub cross_network: Option<f64>,
    pub cross_view: Option<f64>,
    pub head: Option<f64>,
    pub total: f64,
    pub millis: f64,
}

/// The fixed inputs of training: the original view, the trained CVAE (if
/// any) and the global view, built once.
pub struct Augmenter {
    original: View,
    cvae: Option<CvaeParams>,
    global: View,
    lambda: f64,
    aug_seed: u64,
    /// Mean CVAE loss per epoch.
    pub cvae_trace: Vec<f64>,
}

impl Augmenter {
    /// Trains the CVAE unless `no_la` and builds the global view unless
    /// `no_svd`; a disabled augmentation yields a copy of the original view.
    pub fn prepare(g: &Graph, cfg: &RunConfig) -> Result<Augmenter> {
        let original = View::original(g);
        let (cvae, cvae_trace) = if cfg.no_la {
            (None, Vec::new())
        } else {
            let t = Instant::now();
            let ccfg = CvaeConfig {
                seed: cfg.aug_seed,
                ..cfg.cvae
            };
            let (params, trace) = augment::train_cvae(g, &ccfg)?;
            log::info!(
                "cvae: {} epochs in {:.1}s, final loss {:.4}",
                trace.len(),
                t.elapsed().as_secs_f64(),
                trace.last().copied().unwrap_or(f64::NAN)
            );
            (Some(params), trace)
        };
        let global = if cfg.no_svd {
            original.retagged(ViewTag::Global)
        } else {
            let t = Instant::now();
            let v = augment::global_augment(g, cfg.svd_rank, cfg.svd_iters, cfg.aug_seed, cfg.svd_target)?;
            log::info!(
                "global view: rank {}, {} edge entries in {:.1}s",
                cfg.svd_rank,
                v.edges().nnz(),
                t.elapsed().as_secs_f64()
            );
            v
        };
        Ok(Augmenter {
            original,
            cvae,
            global,
            lambda: cfg.lambda_la,
            aug_seed: cfg.aug_seed,
            cvae_trace,
        })
    }

    pub fn original(&self) -> &View {
        &self.original
    }

    pub fn global(&self) -> &View {
        &self.global
    }

    pub fn cvae(&self) -> Option<&CvaeParams> {
        self.cvae.as_ref()
    }

    /// Local view of `epoch`, with freshly generated features.
    pub fn local(&self, g: &Graph, epoch: usize) -> Result<View> {
        match &self.cvae {
            None => Ok(self.original.retagged(ViewTag::Local)),
            Some(p) => {
                let rng = Rng::new(self.aug_seed).split(GENERATE_STREAM).split(epoch as u64);
                augment::local_augment(g, p, self.lambda, &rng)
            }
        }
    }
}

pub struct Trained {
    pub state: TripleNetState,
    pub adam: AdamState,
    pub trace: Vec<EpochLoss>,
    pub cvae_trace: Vec<f64>,
    pub augmenter: Augmenter,
}

impl Trained {
    /// Eval-mode online embeddings of the original graph.
    pub fn embed(&self) -> Result<Matrix> {
        embed_view(&self.state, self.augmenter.original())
    }
}

/// Runs the full pretraining schedule on `g`.
pub fn train(g: &Graph, cfg: &RunConfig) -> Result<Trained> {
    cfg.validate()?;
    let augmenter = Augmenter::prepare(g, cfg)?;
    let mut state = TripleNetState::init(g.feature_dim(), cfg.encoder.clone(), cfg.seed)?;
    let shapes: Vec<_> = state.trainable().iter().map(|(_, m)| m.dim()).collect();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        &shapes,
    );
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let record = train_epoch(g, cfg, &augmenter, &mut state, &mut adam, epoch)?;
        if epoch == 1 || epoch % 10 == 0 || epoch == cfg.epochs {
            log::info!("epoch {epoch}: loss {:.6} ({:.0} ms)", record.total, record.millis);
        }
        trace.push(record);
    }
    Ok(Trained {
        state,
        adam,
        trace,
        cvae_trace: augmenter.cvae_trace.clone(),
        augmenter,
    })
}

/// One optimizer step followed by the target update.
pub fn train_epoch(
    g: &Graph,
    cfg: &RunConfig,
    augmenter: &Augmenter,
    state: &mut TripleNetState,
    adam: &mut AdamState,
    epoch: usize,
) -> Result<EpochLoss> {
    let start = Instant::now();
    let local = augmenter.local(g, epoch)?;
    if epoch == 1 {
        if let Some(dir) = &cfg.dump_views {
            dump_views(g, [augmenter.original(), &local, augmenter.global()], dir)?;
        }
    }
    let rng = Rng::new(cfg.seed).split(TRAIN_STREAM).split(epoch as u64);
    let tape = Tape::new();
    let views = [augmenter.original(), &local, augmenter.global()];
    let (bundle, vars) = encode_all(&tape, state, views, Mode::Train, &rng.split(0))?;
    let cols = sample_columns(g.num_nodes(), cfg.loss.neg_samples, &mut rng.split(1));
    let (total, cn, cv, head) = if cfg.no_mdcl {
        let l = plain_contrast_loss(bundle.h1, bundle.h2, cfg.loss.view_scale(), &cols)?;
        (l, None, None, None)
    } else {
        let terms = total_loss(&bundle, g.adjacency(), &cfg.loss, &cols)?;
        (terms.total, terms.cross_network, terms.cross_view, terms.head)
    };
    let loss = total.item();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
    }
    tape.backward(total)?;
    let grads: Vec<Matrix> = vars
        .all()
        .iter()
        .zip(state.trainable())
        .map(|(v, (_, m))| v.grad().unwrap_or_else(|| Matrix::zeros(m.dim())))
        .collect();
    let names: Vec<String> = state.trainable().into_iter().map(|(n, _)| n).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let grad_refs: Vec<&Matrix> = grads.iter().collect();
    adam.step(&name_refs, &mut state.trainable_mut(), &grad_refs)?;
    state.ema_update();
    Ok(EpochLoss {
        epoch,
        cross_network: cn.map(|v| v.item()),
        cross_view: cv.map(|v| v.item()),
        head: head.map(|v| v.item()),
        total: loss,
        millis: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Writes each view as a generic_json dataset under `dir/<tag>`.
pub fn dump_views(g: &Graph, views: [&View; 3], dir: &Path) -> Result<()> {
    for v in views {
        let sub = dir.join(v.tag.to_string());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        graph::write_generic_json(&v.to_graph(g)?, &sub)?;
    }
    Ok(())
}

/// `epoch,l_cn,l_cv,l_head,total,ms`; skipped components are empty cells.
pub fn write_loss_csv(trace: &[EpochLoss], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,l_cn,l_cv,l_head,total,ms\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{:.1}\n",
            r.epoch,
            cell(r.cross_network),
            cell(r.cross_view),
            cell(r.head),
            r.total,
            r.millis
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
