//! End-to-end runs: configuration, pretraining, linear evaluation and outputs.

pub mod config;
pub mod gradcheck;
pub mod probe;
pub mod protocol;
pub mod train;

pub use config::{ProbeConfig, ProbeNorm, RunConfig, SourceFormat};
pub use probe::{fit_logistic, linear_probe, LinearModel, ProbeResult};
pub use protocol::{
    ablate, evaluate_embeddings, export_embeddings, run_protocol, sha256_hex, summarize, sweep, variants_csv,
    write_training_outputs, EmbeddingManifest, RunReport, SplitResult, Summary, VariantRun, ABLATION_VARIANTS,
    CHECKPOINT_FILE, EMBEDDINGS_FILE, EMBEDDINGS_MANIFEST, SWEEP_AXES,
};
pub use train::{dump_views, train, train_epoch, write_loss_csv, Augmenter, EpochLoss, Trained};
