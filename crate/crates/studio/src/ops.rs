//! Store-level operations shared by the command line and the service, so
//! both produce identical files for identical inputs.

use std::path::{Path, PathBuf};

use shapeblend_core::grad::Real;
use shapeblend_core::nets::{Autoencoder, Backend, ShapeSample};
use shapeblend_core::shape::{self, ShapePayload};
use shapeblend_core::train::{self, EpochRecord, Metrics, Split, TrainConfig, TrainError, TrainObserver};
use shapeblend_core::transfer::{
    self, read_result, run_transfer, FrozenProvider, TransferConfig, TransferError, TransferRecord, TransferReport,
};

use crate::store::{CheckpointMeta, Representation, ShapeStore, CHECKPOINTS_DIR};
use crate::StudioError;

pub fn load_provider(store: &ShapeStore, checkpoint: &str) -> Result<FrozenProvider<Real>, StudioError> {
    Ok(FrozenProvider::from_checkpoint(&store.load_checkpoint(checkpoint)?)?)
}

/// Content and style samples for `cfg`, checking the backend against the
/// provider.
pub fn load_pair(
    store: &ShapeStore,
    provider: &FrozenProvider<Real>,
    cfg: &TransferConfig,
) -> Result<(ShapeSample, ShapeSample), StudioError> {
    if cfg.backend != provider.backend() {
        return Err(TransferError::BackendMismatch { config: cfg.backend, checkpoint: provider.backend() }.into());
    }
    Ok((store.load_sample(&cfg.content, cfg.backend)?, store.load_sample(&cfg.style, cfg.backend)?))
}

/// Runs one transfer and writes the result (payload, sidecar and, for voxel
/// outputs, the probability sibling) at `out`.
pub fn transfer_to_file(
    store: &ShapeStore,
    provider: &FrozenProvider<Real>,
    cfg: &TransferConfig,
    out: &Path,
    progress: &mut dyn FnMut(&TransferRecord),
) -> Result<TransferReport, StudioError> {
    let (content, style) = load_pair(store, provider, cfg)?;
    let result = run_transfer(provider, cfg, &content, &style, progress)?;
    result.write(out)?;
    Ok(result.report)
}

/// File name of one sweep member, e.g. `ratio-0.250.sbpc`.
pub fn sweep_file_name(ratio: f64, backend: Backend) -> String {
    format!("ratio-{ratio:.3}.{}", Representation::for_backend(backend).extension())
}

/// One transfer per ratio, written into `dir`. Returns the payload paths in
/// ratio order.
pub fn sweep_to_dir(
    store: &ShapeStore,
    provider: &FrozenProvider<Real>,
    cfg: &TransferConfig,
    ratios: &[f64],
    dir: &Path,
    progress: &mut dyn FnMut(usize, &TransferRecord),
) -> Result<Vec<PathBuf>, StudioError> {
    transfer::check_ratios(ratios)?;
    for &r in ratios {
        cfg.with_ratio(r).validate()?;
    }
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::with_capacity(ratios.len());
    for (i, &r) in ratios.iter().enumerate() {
        let path = dir.join(sweep_file_name(r, cfg.backend));
        transfer_to_file(store, provider, &cfg.with_ratio(r), &path, &mut |rec| progress(i, rec))?;
        out.push(path);
    }
    Ok(out)
}

struct PeriodicCheckpoints<'a> {
    store: &'a ShapeStore,
    id: &'a str,
    cfg: &'a TrainConfig,
}

impl TrainObserver<Real> for PeriodicCheckpoints<'_> {
    fn on_epoch(&mut self, r: &EpochRecord) -> Result<(), TrainError> {
        if r.epoch.is_multiple_of(50) || r.epoch + 1 == self.cfg.epochs {
            log::info!("epoch {}: total {:.6} recon {:.6} kl {:.4}", r.epoch, r.total, r.recon, r.kl);
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, epoch: usize, net: &Autoencoder<Real>) -> Result<(), TrainError> {
        if epoch == self.cfg.epochs {
            return Ok(());
        }
        let id = format!("{}-e{epoch}", self.id);
        let meta =
            CheckpointMeta { epochs: Some(epoch), seed: Some(self.cfg.seed), ..CheckpointMeta::describe(&id, net) };
        self.store
            .save_checkpoint(&meta, &net.to_checkpoint())
            .map_err(|e| TrainError::Io(std::io::Error::other(e.to_string())))
    }
}

/// Pretrains on the store's train split and saves checkpoint `id`, its
/// periodic snapshots `<id>-e<epoch>`, and `<id>.history.csv`.
pub fn pretrain_into(store: &ShapeStore, cfg: &TrainConfig, id: &str) -> Result<CheckpointMeta, StudioError> {
    if !crate::store::valid_id(id) {
        return Err(StudioError::InvalidId(id.to_string()));
    }
    let data: Vec<ShapeSample> = store.load_split(Split::Train, cfg.backend)?.into_iter().map(|(_, s)| s).collect();
    let mut observer = PeriodicCheckpoints { store, id, cfg };
    let out = train::pretrain::<Real>(&data, cfg, &mut observer)?;
    let meta = CheckpointMeta {
        epochs: Some(cfg.epochs),
        seed: Some(cfg.seed),
        mean_recon: Some(out.final_metrics.mean_recon),
        mean_iou: out.final_metrics.mean_iou,
        ..CheckpointMeta::describe(id, &out.net)
    };
    store.save_checkpoint(&meta, &out.net.to_checkpoint())?;
    let csv = store.root().join(CHECKPOINTS_DIR).join(format!("{id}.history.csv"));
    shape::write_atomic(&csv, out.history.to_csv().as_bytes())?;
    Ok(meta)
}

/// Reconstruction metrics of checkpoint `id` on one split.
pub fn evaluate_checkpoint(store: &ShapeStore, id: &str, split: Split) -> Result<Metrics, StudioError> {
    let net = Autoencoder::<Real>::from_checkpoint(&store.load_checkpoint(id)?)?;
    let data = store.load_split(split, net.backend())?;
    if data.is_empty() {
        return Err(TrainError::EmptySplit(split.to_string()).into());
    }
    Ok(train::evaluate(&net, &data)?)
}

/// OBJ text for a transfer result or a plain SBVX/SBPC file. Voxel results
/// with stored probabilities are re-thresholded at `threshold`.
pub fn export_obj(path: &Path, threshold: f32, cull: bool) -> Result<String, StudioError> {
    let (payload, probabilities) = if transfer::sidecar_path(path).is_file() {
        let r = read_result(path)?;
        (r.payload, r.probabilities)
    } else {
        (shape::read_shape(path)?, None)
    };
    match (payload, probabilities) {
        (ShapePayload::Points(c), _) => Ok(shape::points_to_obj(&c)),
        (ShapePayload::Voxels(_), Some(p)) => Ok(shape::voxels_to_obj(&p.binarize(threshold), cull)),
        (ShapePayload::Voxels(g), None) => Ok(shape::voxels_to_obj(&g, cull)),
        (ShapePayload::Checkpoint(_), _) => {
            Err(StudioError::InvalidArgument(format!("{} holds weights, not a shape", path.display())))
        }
    }
}
