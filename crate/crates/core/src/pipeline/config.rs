//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown and repeated keys are errors. [`RunConfig::to_text`] writes every
//! key, and parsing that text yields an equal config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::{CvaeConfig, SvdTarget};
use crate::encoder::EncoderConfig;
use crate::graph::{self, DatasetFormat, Graph};
use crate::losses::LossWeights;
use crate::{Error, Result};

/// Where the graph comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceFormat {
    File(DatasetFormat),
    /// `dataset` names a built-in generator: `cora_like`, `citeseer_like` or
    /// `two_cluster`.
    Synthetic,
}

impl FromStr for SourceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(SourceFormat::Synthetic),
            other => other.parse().map(SourceFormat::File),
        }
    }
}

impl std::fmt::Display for SourceFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SourceFormat::File(d) => d.fmt(f),
            SourceFormat::Synthetic => f.write_str("synthetic"),
        }
    }
}

/// How embeddings are rescaled before the linear probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeNorm {
    None,
    /// Unit L2 norm per row.
    L2,
    /// Zero mean and unit variance per column, from training rows.
    Standard,
}

impl FromStr for ProbeNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ProbeNorm::None),
            "l2" => Ok(ProbeNorm::L2),
            "standard" => Ok(ProbeNorm::Standard),
            other => Err(Error::Config(format!("unknown probe normalization {other:?}"))),
        }
    }
}

impl std::fmt::Display for ProbeNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProbeNorm::None => "none",
            ProbeNorm::L2 => "l2",
            ProbeNorm::Standard => "standard",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub l2_grid: Vec<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub norm: ProbeNorm,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2_grid: vec![1e-4, 1e-3, 1e-2, 1e-1],
            epochs: 300,
            lr: 0.01,
            norm: ProbeNorm::L2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: String,
    pub format: SourceFormat,
    pub row_normalize_features: bool,

    pub lambda_la: f64,
    pub svd_rank: usize,
    pub svd_iters: usize,
    pub svd_target: SvdTarget,
    pub cvae: CvaeConfig,

    pub encoder: EncoderConfig,
    pub loss: LossWeights,

    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,

    pub seed: u64,
    pub aug_seed: u64,
    pub split_seed: u64,

    pub no_la: bool,
    pub no_svd: bool,
    pub no_mdcl: bool,

    pub num_splits: usize,
    pub train_per_class: usize,
    pub val_size: usize,
    pub retrain_per_split: bool,
    pub probe: ProbeConfig,

    pub output_dir: PathBuf,
    pub dump_views: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: "cora_like".into(),
            format: SourceFormat::Synthetic,
            row_normalize_features: false,
            lambda_la: 0.5,
            svd_rank: 5,
            svd_iters: 7,
            svd_target: SvdTarget::Adjacency,
            cvae: CvaeConfig::default(),
            encoder: EncoderConfig::default(),
            loss: LossWeights::default(),
            lr: 1e-3,
            weight_decay: 1e-5,
            epochs: 400,
            seed: 0,
            aug_seed: 0,
            split_seed: 0,
            no_la: false,
            no_svd: false,
            no_mdcl: false,
            num_splits: 20,
            train_per_class: graph::TRAIN_PER_CLASS,
            val_size: graph::VAL_SIZE,
            retrain_per_split: false,
            probe: ProbeConfig::default(),
            output_dir: PathBuf::from("out"),
            dump_views: None,
        }
    }
}

/// Every key in file order.
pub const KEYS: &[&str] = &[
    "dataset",
    "format",
    "row_normalize_features",
    "lambda_la",
    "svd_rank",
    "svd_iters",
    "svd_target",
    "cvae_epochs",
    "cvae_hidden",
    "cvae_zdim",
    "cvae_batch",
    "cvae_lr",
    "heads",
    "head_dim",
    "slope",
    "elu_alpha",
    "in_drop",
    "attn_drop",
    "ema_momentum",
    "global_prop",
    "alpha_net",
    "alpha_loss",
    "beta",
    "gamma",
    "tau",
    "neg_samples",
    "tau_all",
    "lr",
    "weight_decay",
    "epochs",
    "seed",
    "aug_seed",
    "split_seed",
    "no_la",
    "no_svd",
    "no_mdcl",
    "num_splits",
    "train_per_class",
    "val_size",
    "retrain_per_split",
    "probe_l2_grid",
    "probe_epochs",
    "probe_lr",
    "probe_norm",
    "output_dir",
    "dump_views",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

/// `none` or empty means unset.
fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn show_optional<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

impl RunConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = v.to_string(),
            "format" => self.format = v.parse()?,
            "row_normalize_features" => self.row_normalize_features = parse_bool(key, v)?,
            "lambda_la" => self.lambda_la = parse_value(key, v)?,
            "svd_rank" => self.svd_rank = parse_value(key, v)?,
            "svd_iters" => self.svd_iters = parse_value(key, v)?,
            "svd_target" => self.svd_target = v.parse()?,
            "cvae_epochs" => self.cvae.epochs = parse_value(key, v)?,
            "cvae_hidden" => self.cvae.hidden = parse_value(key, v)?,
            "cvae_zdim" => self.cvae.z_dim = parse_value(key, v)?,
            "cvae_batch" => self.cvae.batch_size = parse_value(key, v)?,
            "cvae_lr" => self.cvae.lr = parse_value(key, v)?,
            "heads" => self.encoder.heads = parse_value(key, v)?,
            "head_dim" => self.encoder.head_dim = parse_value(key, v)?,
            "slope" => self.encoder.slope = parse_value(key, v)?,
            "elu_alpha" => self.encoder.elu_alpha = parse_value(key, v)?,
            "in_drop" => self.encoder.in_drop = parse_value(key, v)?,
            "attn_drop" => self.encoder.attn_drop = parse_value(key, v)?,
            "ema_momentum" => self.encoder.ema_momentum = parse_value(key, v)?,
            "global_prop" => self.encoder.global_prop = v.parse()?,
            "alpha_net" => self.loss.alpha_net = parse_value(key, v)?,
            "alpha_loss" => self.loss.alpha_loss = parse_value(key, v)?,
            "beta" => self.loss.beta = parse_value(key, v)?,
            "gamma" => self.loss.gamma = parse_value(key, v)?,
            "tau" => self.loss.tau = parse_value(key, v)?,
            "neg_samples" => self.loss.neg_samples = parse_value(key, v)?,
            "tau_all" => self.loss.tau_all = parse_optional(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "aug_seed" => self.aug_seed = parse_value(key, v)?,
            "split_seed" => self.split_seed = parse_value(key, v)?,
            "no_la" => self.no_la = parse_bool(key, v)?,
            "no_svd" => self.no_svd = parse_bool(key, v)?,
            "no_mdcl" => self.no_mdcl = parse_bool(key, v)?,
            "num_splits" => self.num_splits = parse_value(key, v)?,
            "train_per_class" => self.train_per_class = parse_value(key, v)?,
            "val_size" => self.val_size = parse_value(key, v)?,
            "retrain_per_split" => self.retrain_per_split = parse_bool(key, v)?,
            "probe_l2_grid" => {
                self.probe.l2_grid = v
                    .split(',')
                    .map(|s| parse_value(key, s.trim()))
                    .collect::<Result<Vec<f64>>>()?;
            }
            "probe_epochs" => self.probe.epochs = parse_value(key, v)?,
            "probe_lr" => self.probe.lr = parse_value(key, v)?,
            "probe_norm" => self.probe.norm = v.parse()?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "dump_views" => self.dump_views = parse_optional(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "dataset" => self.dataset.clone(),
            "format" => self.format.to_string(),
            "row_normalize_features" => self.row_normalize_features.to_string(),
            "lambda_la" => self.lambda_la.to_string(),
            "svd_rank" => self.svd_rank.to_string(),
            "svd_iters" => self.svd_iters.to_string(),
            "svd_target" => self.svd_target.to_string(),
            "cvae_epochs" => self.cvae.epochs.to_string(),
            "cvae_hidden" => self.cvae.hidden.to_string(),
            "cvae_zdim" => self.cvae.z_dim.to_string(),
            "cvae_batch" => self.cvae.batch_size.to_string(),
            "cvae_lr" => self.cvae.lr.to_string(),
            "heads" => self.encoder.heads.to_string(),
            "head_dim" => self.encoder.head_dim.to_string(),
            "slope" => self.encoder.slope.to_string(),
            "elu_alpha" => self.encoder.elu_alpha.to_string(),
            "in_drop" => self.encoder.in_drop.to_string(),
            "attn_drop" => self.encoder.attn_drop.to_string(),
            "ema_momentum" => self.encoder.ema_momentum.to_string(),
            "global_prop" => self.encoder.global_prop.to_string(),
            "alpha_net" => self.loss.alpha_net.to_string(),
            "alpha_loss" => self.loss.alpha_loss.to_string(),
            "beta" => self.loss.beta.to_string(),
            "gamma" => self.loss.gamma.to_string(),
            "tau" => self.loss.tau.to_string(),
            "neg_samples" => self.loss.neg_samples.to_string(),
            "tau_all" => show_optional(&self.loss.tau_all),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "aug_seed" => self.aug_seed.to_string(),
            "split_seed" => self.split_seed.to_string(),
            "no_la" => self.no_la.to_string(),
            "no_svd" => self.no_svd.to_string(),
            "no_mdcl" => self.no_mdcl.to_string(),
            "num_splits" => self.num_splits.to_string(),
            "train_per_class" => self.train_per_class.to_string(),
            "val_size" => self.val_size.to_string(),
            "retrain_per_split" => self.retrain_per_split.to_string(),
            "probe_l2_grid" => self.probe.l2_grid.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            "probe_epochs" => self.probe.epochs.to_string(),
            "probe_lr" => self.probe.lr.to_string(),
            "probe_norm" => self.probe.norm.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "dump_views" => show_optional(&self.dump_views.as_ref().map(|p| p.display().to_string())),
            _ => return None,
        })
    }

    /// Applies `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", k + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("{origin}:{}: key {key:?} repeated", k + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", k + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, "<config>")?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `dataset` path is resolved against
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        if let (SourceFormat::File(_), Some(dir)) = (cfg.format, path.parent()) {
            let p = Path::new(&cfg.dataset);
            if p.is_relative() && !cfg.dataset.is_empty() {
                cfg.dataset = dir.join(p).display().to_string();
            }
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("every listed key has a value"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.encoder.validate()?;
        if !(0.0..=1.0).contains(&self.lambda_la) {
            return Err(Error::Config(format!("lambda_la must lie in [0, 1], got {}", self.lambda_la)));
        }
        if self.svd_rank == 0 || self.svd_iters == 0 {
            return Err(Error::Config("svd_rank and svd_iters must be positive".into()));
        }
        if self.num_splits == 0 {
            return Err(Error::Config("num_splits must be positive".into()));
        }
        if self.probe.l2_grid.is_empty() || self.probe.l2_grid.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Config("probe_l2_grid needs at least one value >= 0".into()));
        }
        if !(self.lr > 0.0) || !(self.probe.lr > 0.0) || !(self.cvae.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn load_graph(&self) -> Result<Graph> {
        let g = match self.format {
            SourceFormat::File(f) => graph::load_dataset(Path::new(&self.dataset), f)?,
            SourceFormat::Synthetic => synthetic_graph(&self.dataset, self.seed)?,
        };
        if self.row_normalize_features {
            g.row_normalized_features()
        } else {
            Ok(g)
        }
    }
}

fn strip_prefix(e: &Error) -> String {
    let s = e.to_string();
    s.strip_prefix("config: ").map(str::to_string).unwrap_or(s)
}

/// `cora_like`, `citeseer_like` or `two_cluster`, optionally suffixed `:SEED`.
fn synthetic_graph(name: &str, default_seed: u64) -> Result<Graph> {
    let (kind, seed) = match name.split_once(':') {
        Some((k, s)) => (k, parse_value("dataset", s)?),
        None => (name, default_seed),
    };
    match kind {
        "cora_like" => graph::synthetic::PlantedPartition::cora_like(seed).generate(),
        "citeseer_like" => graph::synthetic::PlantedPartition::citeseer_like(seed).generate(),
        "two_cluster" => graph::synthetic::two_cluster(50, 16, 0.1, seed),
        other => Err(Error::Config(format!("unknown synthetic dataset {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_written() {
        let text = RunConfig::default().to_text();
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn edited_values_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "tau = 0.1 # sharp\n\nprobe_l2_grid = 0.5, 3e-7\ntau_all = 2.5\ndump_views = /tmp/v\nlr = 0.30000000000000004\n",
            "t",
        )
        .unwrap();
        assert_eq!(cfg.loss.tau, 0.1);
        assert_eq!(cfg.probe.l2_grid, vec![0.5, 3e-7]);
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_repeated_keys_fail() {
        assert!(RunConfig::from_text("colour = red").is_err());
        assert!(RunConfig::from_text("tau = 1\ntau = 2").is_err());
        assert!(RunConfig::from_text("tau 1").is_err());
        let err = RunConfig::from_text("\n\nheads = many").unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
    }
}
