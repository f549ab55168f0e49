//! Shape store, command line front end and local job service.

pub mod cli;
pub mod ingest;
pub mod jobs;
pub mod ops;
pub mod service;
pub mod store;

use std::path::PathBuf;

use shapeblend_core::nets::NetError;
use shapeblend_core::shape::ShapeError;
use shapeblend_core::train::TrainError;
use shapeblend_core::transfer::TransferError;

pub use ingest::{ingest, IngestOptions, IngestSummary};
pub use jobs::{Job, JobKind, JobProgress, JobQueue, JobStatus};
pub use store::{CheckpointMeta, Representation, ShapeStore};

#[derive(Debug, thiserror::Error)]
pub enum StudioError {
    #[error("{}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("no OFF or OBJ files under {}", .0.display())]
    NoInputs(PathBuf),
    #[error("none of the {skipped} mesh files under {} could be ingested", path.display())]
    NothingIngested { path: PathBuf, skipped: usize },
    #[error("unknown shape '{0}'")]
    UnknownShape(String),
    #[error("unknown checkpoint '{0}'")]
    UnknownCheckpoint(String),
    #[error("unknown job {0}")]
    UnknownJob(u64),
    #[error("job {0} has no result yet")]
    NotFinished(u64),
    #[error("invalid id '{0}' (use letters, digits, '.', '_' or '-')")]
    InvalidId(String),
    #[error("store audit failed: {0}")]
    Audit(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Walk(#[from] walkdir::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
