//! Evaluation protocol, sweeps, ablations and run outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::probe::{linear_probe, ProbeResult};
use super::train::{train, write_loss_csv, EpochLoss, Trained};
use super::RunConfig;
use crate::encoder::checkpoint;
use crate::graph::{self, Graph};
use crate::numkit::Matrix;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitResult {
    pub split_seed: u64,
    #[serde(flatten)]
    pub probe: ProbeResult,
}

/// Mean and sample standard deviation. One value has no spread, so its
/// deviation is reported as 0 with `defined = false`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub std_defined: bool,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    if n < 2 {
        return Summary {
            mean,
            std: 0.0,
            std_defined: false,
        };
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Summary {
        mean,
        std: var.sqrt(),
        std_defined: true,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub version: String,
    pub dataset: String,
    pub num_nodes: usize,
    pub num_edges: usize,
    pub num_classes: usize,
    pub splits: Vec<SplitResult>,
    /// Test accuracies in split order.
    pub accuracies: Vec<f64>,
    pub summary: Summary,
    /// One trace per pretraining run.
    pub loss_traces: Vec<Vec<EpochLoss>>,
    pub cvae_trace: Vec<f64>,
    pub train_seconds: f64,
    pub wall_seconds: f64,
    pub config: String,
}

impl RunReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Seed of the `s`-th evaluation split.
pub fn split_seed(cfg: &RunConfig, s: usize) -> u64 {
    cfg.split_seed.wrapping_add(s as u64)
}

fn probe_split(g: &Graph, cfg: &RunConfig, emb: &Matrix, s: usize) -> Result<SplitResult> {
    let seed = split_seed(cfg, s);
    let split = graph::make_split_with(g, seed, cfg.train_per_class, cfg.val_size)?;
    let probe = linear_probe(emb, g.labels(), g.num_classes(), &split, &cfg.probe)?;
    Ok(SplitResult { split_seed: seed, probe })
}

/// Pretrains once (or once per split with `retrain_per_split`, seed
/// `seed + s`) and probes every split. Returns the last trained model.
pub fn run_protocol(g: &Graph, cfg: &RunConfig) -> Result<(RunReport, Trained)> {
    cfg.validate()?;
    let wall = Instant::now();
    let mut train_seconds = 0.0;
    let mut splits = Vec::with_capacity(cfg.num_splits);
    let mut traces = Vec::new();
    let mut last: Option<Trained> = None;
    let mut emb = None;
    for s in 0..cfg.num_splits {
        if last.is_none() || cfg.retrain_per_split {
            let mut run_cfg = cfg.clone();
            if cfg.retrain_per_split {
                run_cfg.seed = cfg.seed.wrapping_add(s as u64);
            }
            let t = Instant::now();
            let trained = train(g, &run_cfg)?;
            train_seconds += t.elapsed().as_secs_f64();
            emb = Some(trained.embed()?);
            traces.push(trained.trace.clone());
            last = Some(trained);
        }
        let r = probe_split(g, cfg, emb.as_ref().expect("embedded above"), s)?;
        log::info!("split {s}: test accuracy {:.4} (l2 {})", r.probe.test_accuracy, r.probe.l2);
        splits.push(r);
    }
    let trained = last.expect("num_splits is positive");
    let accuracies: Vec<f64> = splits.iter().map(|r| r.probe.test_accuracy).collect();
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        dataset: cfg.dataset.clone(),
        num_nodes: g.num_nodes(),
        num_edges: g.num_edge_entries() / 2,
        num_classes: g.num_classes(),
        summary: summarize(&accuracies),
        accuracies,
        splits,
        loss_traces: traces,
        cvae_trace: trained.cvae_trace.clone(),
        train_seconds,
        wall_seconds: wall.elapsed().as_secs_f64(),
        config: cfg.to_text(),
    };
    Ok((report, trained))
}

/// Probes precomputed embeddings on every configured split.
pub fn evaluate_embeddings(g: &Graph, cfg: &RunConfig, emb: &Matrix) -> Result<(Vec<SplitResult>, Summary)> {
    let splits = (0..cfg.num_splits)
        .map(|s| probe_split(g, cfg, emb, s))
        .collect::<Result<Vec<_>>>()?;
    let acc: Vec<f64> = splits.iter().map(|r| r.probe.test_accuracy).collect();
    Ok((splits, summarize(&acc)))
}

/// One labelled protocol run of an ablation or sweep.
#[derive(Clone, Debug, Serialize)]
pub struct VariantRun {
    pub name: String,
    pub report: RunReport,
}

/// `<header>,mean,std,splits` with one line per run.
pub fn variants_csv(header: &str, runs: &[VariantRun]) -> String {
    let mut out = format!("{header},mean,std,splits\n");
    for r in runs {
        let s = &r.report.summary;
        out.push_str(&format!("{},{},{},{}\n", r.name, s.mean, s.std, r.report.accuracies.len()));
    }
    out
}

pub const ABLATION_VARIANTS: [&str; 4] = ["full", "w/o LA", "w/o SVD", "w/o MDCL"];

/// Full run, then the run without each of the three components.
pub fn ablate(g: &Graph, cfg: &RunConfig) -> Result<Vec<VariantRun>> {
    let mut runs = Vec::new();
    for (k, name) in ABLATION_VARIANTS.iter().enumerate() {
        let mut c = cfg.clone();
        match k {
            1 => c.no_la = true,
            2 => c.no_svd = true,
            3 => c.no_mdcl = true,
            _ => {}
        }
        let (report, _) = run_protocol(g, &c)?;
        log::info!("{name}: {:.4} ± {:.4}", report.summary.mean, report.summary.std);
        runs.push(VariantRun {
            name: name.to_string(),
            report,
        });
    }
    Ok(runs)
}

/// Keys accepted by [`sweep`].
pub const SWEEP_AXES: [&str; 3] = ["tau", "in_drop", "attn_drop"];

/// One protocol run per value of `axis`, everything else fixed.
pub fn sweep(g: &Graph, cfg: &RunConfig, axis: &str, values: &[String]) -> Result<Vec<VariantRun>> {
    if !SWEEP_AXES.contains(&axis) {
        return Err(Error::Config(format!("cannot sweep {axis:?}; expected one of {SWEEP_AXES:?}")));
    }
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut runs = Vec::new();
    for v in values {
        let mut c = cfg.clone();
        c.set(axis, v)?;
        let (report, _) = run_protocol(g, &c)?;
        log::info!("{axis} = {v}: {:.4} ± {:.4}", report.summary.mean, report.summary.std);
        runs.push(VariantRun {
            name: v.clone(),
            report,
        });
    }
    Ok(runs)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.grmd";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const EMBEDDINGS_MANIFEST: &str = "embeddings.json";

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct EmbeddingManifest {
    pub num_nodes: usize,
    pub width: usize,
    pub dataset: String,
    pub file: String,
    /// SHA-256 of the checkpoint the embeddings came from.
    pub checkpoint_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the checkpoint and loss trace of `trained` into `dir`; returns
/// the checkpoint path.
pub fn write_training_outputs(dir: &Path, cfg: &RunConfig, trained: &Trained) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    checkpoint::write(&ckpt, &trained.state, &trained.adam, trained.trace.len() as u64, &cfg.to_text())?;
    write_loss_csv(&trained.trace, &dir.join("losses.csv"))?;
    Ok(ckpt)
}

/// Writes `emb` as a features file plus a JSON manifest tied to `checkpoint_path`.
pub fn export_embeddings(dir: &Path, dataset: &str, emb: &Matrix, checkpoint_path: &Path) -> Result<EmbeddingManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = std::fs::read(checkpoint_path).map_err(|e| Error::io(checkpoint_path, e))?;
    graph::write_features_file(emb, &dir.join(EMBEDDINGS_FILE))?;
    let manifest = EmbeddingManifest {
        num_nodes: emb.nrows(),
        width: emb.ncols(),
        dataset: dataset.to_string(),
        file: EMBEDDINGS_FILE.into(),
        checkpoint_sha256: sha256_hex(&bytes),
    };
    let path = dir.join(EMBEDDINGS_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
