//! `shapeblend` command line.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use shapeblend_core::nets::{Backend, Tap};
use shapeblend_core::shape::{self, Fill};
use shapeblend_core::train::{Split, TrainConfig};
use shapeblend_core::transfer::{TransferConfig, TransferError};

use crate::ingest::{ingest, IngestOptions};
use crate::service::{AppState, Server};
use crate::store::ShapeStore;
use crate::{jobs, ops, StudioError};

#[derive(Debug, Parser)]
#[command(name = "shapeblend", version, about = "Neural style transfer between 3D shapes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a directory of OFF/OBJ meshes into a shape store.
    Ingest(IngestArgs),
    /// Train an autoencoder on the store's train split.
    Pretrain(PretrainArgs),
    /// Print reconstruction metrics of a checkpoint as JSON.
    Evaluate(EvaluateArgs),
    /// Blend the content of one shape with the style of another.
    Transfer(TransferArgs),
    /// Run one transfer per content ratio.
    Sweep(SweepArgs),
    /// Convert a result or shape file to another format.
    Export(ExportArgs),
    /// Serve the HTTP API and, optionally, the viewer.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value_t = shape::DEFAULT_DIMS[0])]
    pub dims: usize,
    #[arg(long, default_value_t = shape::DEFAULT_POINTS)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Send every k-th shape to the eval split (0: none).
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    /// `solid` or `surface`.
    #[arg(long, default_value = "solid")]
    pub fill: Fill,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// `pointnet` or `vsl`.
    #[arg(long)]
    pub backend: Backend,
    #[arg(long, default_value_t = 3000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub kl_weight: f64,
    /// Save a snapshot every this many epochs (0: only the final one).
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: usize,
    /// Checkpoint id; defaults to the backend name.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub checkpoint: String,
    #[arg(long, default_value = "eval")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct TransferOpts {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub checkpoint: String,
    #[arg(long)]
    pub content: String,
    #[arg(long)]
    pub style: String,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Repeatable; defaults depend on the backend.
    #[arg(long = "content-tap")]
    pub content_taps: Vec<Tap>,
    #[arg(long = "style-tap")]
    pub style_taps: Vec<Tap>,
    #[arg(long)]
    pub allow_overlap: bool,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub opts: TransferOpts,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub opts: TransferOpts,
    /// Content weights in [0, 1], ascending; style weight is 1 - ratio.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ratios: Vec<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Obj,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub result: PathBuf,
    #[arg(long, value_enum, default_value_t = ExportFormat::Obj)]
    pub format: ExportFormat,
    /// Occupancy threshold for voxel results that kept probabilities.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Drop faces shared by two occupied voxels.
    #[arg(long)]
    pub cull: bool,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Directory of static viewer files.
    #[arg(long)]
    pub viewer: Option<PathBuf>,
    /// Job worker threads; defaults to one less than the logical cores.
    #[arg(long)]
    pub workers: Option<usize>,
}

impl TransferOpts {
    /// Config for this run with the backend read from the checkpoint,
    /// validated before anything heavy is loaded.
    fn config(&self, store: &ShapeStore, alpha: f64, beta: f64) -> Result<TransferConfig, StudioError> {
        let meta = store.checkpoint_meta(&self.checkpoint)?;
        let cfg = TransferConfig {
            backend: meta.backend,
            checkpoint: self.checkpoint.clone(),
            content: self.content.clone(),
            style: self.style.clone(),
            alpha,
            beta,
            content_taps: self.content_taps.clone(),
            style_taps: self.style_taps.clone(),
            epochs: self.epochs,
            lr: self.lr,
            seed: self.seed,
            allow_overlap: self.allow_overlap,
        }
        .resolved();
        cfg.validate()?;
        store.entry(&cfg.content)?;
        store.entry(&cfg.style)?;
        Ok(cfg)
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<(), StudioError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn log_progress(epochs: usize) -> impl FnMut(&shapeblend_core::transfer::TransferRecord) {
    move |r| {
        if r.epoch % 100 == 0 || r.epoch + 1 == epochs {
            log::info!("epoch {}: total {:.6e} content {:.6e} style {:.6e}", r.epoch, r.total, r.content, r.style);
        }
    }
}

pub fn run(cli: Cli) -> Result<(), StudioError> {
    match cli.command {
        Command::Ingest(a) => {
            let mut store = ShapeStore::init(&a.store)?;
            let opts =
                IngestOptions { dims: a.dims, points: a.points, seed: a.seed, fill: a.fill, eval_every: a.eval_every };
            let summary = ingest(&mut store, &a.input, &opts)?;
            println!("ingested {} shapes, skipped {}", summary.added.len(), summary.skipped.len());
            for (path, why) in &summary.skipped {
                println!("skipped {}: {why}", path.display());
            }
            Ok(())
        }
        Command::Pretrain(a) => {
            let store = ShapeStore::open(&a.store)?;
            let cfg = TrainConfig {
                backend: a.backend,
                epochs: a.epochs,
                batch_size: a.batch_size,
                lr: a.lr,
                kl_weight: a.kl_weight,
                seed: a.seed,
                checkpoint_every: a.checkpoint_every,
                ..TrainConfig::default()
            };
            let name = a.name.unwrap_or_else(|| a.backend.to_string());
            print_json(&ops::pretrain_into(&store, &cfg, &name)?)
        }
        Command::Evaluate(a) => {
            let store = ShapeStore::open(&a.store)?;
            print_json(&ops::evaluate_checkpoint(&store, &a.checkpoint, a.split)?)
        }
        Command::Transfer(a) => {
            let store = ShapeStore::open(&a.opts.store)?;
            let cfg = a.opts.config(&store, a.alpha, a.beta)?;
            let provider = ops::load_provider(&store, &cfg.checkpoint)?;
            let report = ops::transfer_to_file(&store, &provider, &cfg, &a.out, &mut log_progress(cfg.epochs))?;
            println!(
                "wrote {} (content {:.6e}, style {:.6e}, {:.1} s)",
                a.out.display(),
                report.final_distances.content,
                report.final_distances.style,
                report.seconds
            );
            Ok(())
        }
        Command::Sweep(a) => {
            let store = ShapeStore::open(&a.opts.store)?;
            let first = *a.ratios.first().ok_or(TransferError::EmptySweep)?;
            let cfg = a.opts.config(&store, first, 1.0 - first)?;
            let provider = ops::load_provider(&store, &cfg.checkpoint)?;
            let mut log = log_progress(cfg.epochs);
            let paths = ops::sweep_to_dir(&store, &provider, &cfg, &a.ratios, &a.out_dir, &mut |_, r| log(r))?;
            for p in paths {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Export(a) => {
            let text = match a.format {
                ExportFormat::Obj => ops::export_obj(&a.result, a.threshold, a.cull)?,
            };
            match a.out {
                Some(path) => shape::write_atomic(&path, text.as_bytes())?,
                None => std::io::stdout().lock().write_all(text.as_bytes())?,
            }
            Ok(())
        }
        Command::Serve(a) => {
            let store = ShapeStore::init(&a.store)?;
            if let Some(dir) = &a.viewer {
                check_viewer(dir)?;
            }
            let workers = a.workers.unwrap_or_else(jobs::default_workers);
            let state = AppState::new(store, workers);
            let server = Server::start(state, &format!("{}:{}", a.host, a.port), a.viewer)?;
            println!("serving on http://{} with {workers} job workers", server.addr());
            server.wait()
        }
    }
}

fn check_viewer(dir: &Path) -> Result<(), StudioError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(StudioError::InvalidArgument(format!("viewer directory {} does not exist", dir.display())))
    }
}
