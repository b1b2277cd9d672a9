//! Cylinder-ordered state-space latent diffusion for 3D semantic voxel scenes.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and the reverse-mode autodiff tape.
//! - [`voxel`]: semantic voxel grids, label files, BEV projection and sketch synthesis.
//! - [`scan_order`]: Cartesian and cylindrical linearizations of voxel space.
//! - [`ssm`]: zero-order-hold discretization and the selective scan kernel.
//! - [`nn`]: parameters, layers and the network blocks built on them.
//! - [`vae`], [`diffusion`]: the latent autoencoder and the latent diffusion engine.
//! - [`metrics`]: FID, MMD and IoU evaluation.
//! - [`toy`], [`train`], [`pipeline`]: synthetic data, training loops and end-to-end generation.

pub mod config;
pub mod diffusion;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod scan_order;
pub mod ssm;
pub mod tensor;
pub mod toy;
pub mod train;
pub mod vae;
pub mod voxel;

use std::path::PathBuf;

pub use tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("missing checkpoint {name}: {}", path.display())]
    MissingCheckpoint { name: String, path: PathBuf },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(what: &'static str, msg: impl Into<String>) -> Error {
    Error::Invalid { what, msg: msg.into() }
}

pub(crate) fn file_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::File { path, source }
}
