//! Self-supervised node representation learning with locally and globally
//! augmented graph views, a triple multi-head graph-attention network, and a
//! multidimensional contrastive objective.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkit`]: dense tensors with a reverse-mode tape, sparse products,
//!   randomized truncated SVD, Adam, and finite-difference gradient checks.
//! - [`graph`]: the attributed graph model, dataset loaders, adjacency
//!   normalization and the 20-per-class split protocol.
//! - [`augment`]: the CVAE-generated local view and the truncated-SVD global view.
//! - [`encoder`]: graph attention, the online predictor and EMA target networks.
//! - [`losses`]: cross-network, cross-view and neighbor contrast terms.
//! - [`pipeline`]: training, linear-probe evaluation, ablations, sweeps and the CLI.

pub mod augment;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod losses;
pub mod numkit;
pub mod pipeline;

pub use error::{Error, Result};
