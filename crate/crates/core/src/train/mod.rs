//! Autoencoder pretraining and reconstruction metrics.

mod manifest;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use manifest::{DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};

use crate::grad::{adam_step, seeded_rng, AdamConfig, AdamState, GradError, Graph, NodeId, Rng, Scalar};
use crate::nets::{Autoencoder, Backend, NetError, ShapeSample};
use crate::shape::{ShapeError, VoxelGrid};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training shapes")]
    EmptyDataset,
    #[error("split '{0}' has no shapes")]
    EmptySplit(String),
    #[error("non-finite loss at epoch {epoch} (shape {shape})")]
    NonFinite { epoch: usize, shape: usize },
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("duplicate shape id '{0}'")]
    DuplicateId(String),
    #[error("shape '{id}': missing file {}", path.display())]
    MissingFile { id: String, path: PathBuf },
    #[error("shape '{id}' has no {backend} representation")]
    Representation { id: String, backend: Backend },
    #[error("stopped by observer: {0}")]
    Cancelled(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub backend: Backend,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final KL weight (VSL only).
    pub kl_weight: f64,
    /// Fraction of epochs over which the KL weight ramps up linearly from 0.
    pub kl_warmup: f64,
    pub seed: u64,
    /// Checkpoint period in epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backend: Backend::PointNet,
            epochs: 3000,
            batch_size: 8,
            lr: 1e-3,
            kl_weight: 1e-3,
            kl_warmup: 0.1,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return bad("KL weight must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.kl_warmup) {
            return bad("KL warm-up fraction must be in [0, 1]");
        }
        Ok(())
    }

    /// KL weight in effect during `epoch`.
    pub fn kl_weight_at(&self, epoch: usize) -> f64 {
        let warm = (self.kl_warmup * self.epochs as f64).round() as usize;
        if warm == 0 || epoch >= warm {
            self.kl_weight
        } else {
            self.kl_weight * epoch as f64 / warm as f64
        }
    }
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    /// Wall time since training started.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<EpochRecord>,
}

impl LossHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total,recon,kl,seconds\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.total, r.recon, r.kl, r.seconds);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Reconstruction quality of one shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeMetrics {
    pub id: String,
    /// Chamfer distance (PointNet) or binary cross-entropy (VSL).
    pub recon: f64,
    /// IoU at 0.5 (VSL only).
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub backend: Backend,
    pub shapes: Vec<ShapeMetrics>,
    pub mean_recon: f64,
    pub mean_iou: Option<f64>,
}

/// Hooks called during [`pretrain`]. Returning an error stops training.
pub trait TrainObserver<S> {
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _epoch: usize, _net: &Autoencoder<S>) -> Result<(), TrainError> {
        Ok(())
    }
}

impl<S> TrainObserver<S> for () {}

pub struct TrainOutcome<S> {
    pub net: Autoencoder<S>,
    pub history: LossHistory,
    /// Train-split metrics of the final weights.
    pub final_metrics: Metrics,
}

/// Reconstruction loss and KL of one sample. VSL samples latents when
/// `noise` is given and uses means otherwise.
fn sample_loss<S: Scalar>(
    net: &Autoencoder<S>,
    g: &mut Graph<S>,
    w: &[NodeId],
    sample: &ShapeSample,
    noise: Option<&mut Rng>,
) -> Result<(NodeId, Option<NodeId>, NodeId), TrainError> {
    let x = g.constant(&net.input(sample)?);
    match net {
        Autoencoder::PointNet(n) => {
            let y = n.reconstruct(g, w, x)?;
            Ok((g.chamfer(y, x)?, None, y))
        }
        Autoencoder::Vsl(n) => {
            let nodes = n.forward_nodes(g, w, x, noise)?;
            Ok((g.bce(nodes.probs, x)?, Some(nodes.kl), nodes.probs))
        }
    }
}

/// Trains a fresh network on `data` (training split, manifest order).
pub fn pretrain<S: Scalar>(
    data: &[ShapeSample],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<S>,
) -> Result<TrainOutcome<S>, TrainError> {
    cfg.validate()?;
    let first = data.first().ok_or(TrainError::EmptyDataset)?;
    let points = match (cfg.backend, first) {
        (Backend::PointNet, ShapeSample::Points(c)) if c.is_empty() => return Err(NetError::EmptyCloud.into()),
        (Backend::PointNet, ShapeSample::Points(c)) => c.len(),
        (Backend::Vsl, ShapeSample::Voxels(_)) => 0,
        (backend, s) => return Err(NetError::WrongRepresentation { backend, found: s.kind() }.into()),
    };
    let mut net = Autoencoder::<S>::new(cfg.backend, points, cfg.seed);
    for s in data {
        net.input(s)?;
    }
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), net.params().tensors());
    let mut order_rng = seeded_rng(cfg.seed);
    let mut noise_rng = seeded_rng(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = LossHistory::default();
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let kl_w = cfg.kl_weight_at(epoch);
        let (mut recon_sum, mut kl_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut g = Graph::new();
                let w = net.params().bind(&mut g);
                let (recon, kl, _) = sample_loss(&net, &mut g, &w, &data[i], Some(&mut noise_rng))?;
                let mut loss = recon;
                let r = g.value(recon)[0].to_f64_lossy();
                let mut k = 0.0;
                if let Some(kl) = kl {
                    k = g.value(kl)[0].to_f64_lossy();
                    let weighted = g.scale(kl, kl_w)?;
                    loss = g.add(loss, weighted)?;
                }
                if !(r.is_finite() && k.is_finite()) {
                    return Err(TrainError::NonFinite { epoch, shape: i });
                }
                recon_sum += r;
                kl_sum += k;
                let loss = g.scale(loss, inv)?;
                let mut grads = g.backward(loss)?;
                net.params_mut().absorb_grads(&mut grads, &w)?;
            }
            adam_step(net.params_mut().tensors_mut().iter_mut(), &mut adam)?;
        }
        let n = data.len() as f64;
        let (recon, kl) = (recon_sum / n, kl_sum / n);
        let record = EpochRecord { epoch, total: recon + kl_w * kl, recon, kl, seconds: start.elapsed().as_secs_f64() };
        if !record.total.is_finite() {
            return Err(TrainError::NonFinite { epoch, shape: 0 });
        }
        observer.on_epoch(&record)?;
        history.records.push(record);
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
            observer.on_checkpoint(epoch + 1, &net)?;
        }
    }
    observer.on_checkpoint(cfg.epochs, &net)?;
    let ids: Vec<(String, ShapeSample)> = data.iter().enumerate().map(|(i, s)| (i.to_string(), s.clone())).collect();
    let final_metrics = evaluate(&net, &ids)?;
    Ok(TrainOutcome { net, history, final_metrics })
}

/// Mean-mode reconstruction metrics. Weights are not modified.
pub fn evaluate<S: Scalar>(net: &Autoencoder<S>, data: &[(String, ShapeSample)]) -> Result<Metrics, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit("evaluation".into()));
    }
    let mut shapes = Vec::with_capacity(data.len());
    for (id, sample) in data {
        let mut g = Graph::new();
        let w = net.params().bind_frozen(&mut g);
        let (recon, _, out) = sample_loss(net, &mut g, &w, sample, None)?;
        let iou = match sample {
            ShapeSample::Voxels(target) => {
                let probs: Vec<u8> = g.value(out).iter().map(|p| (p.to_f64_lossy() >= 0.5) as u8).collect();
                Some(VoxelGrid::new(target.dims(), probs)?.iou(target)?)
            }
            ShapeSample::Points(_) => None,
        };
        shapes.push(ShapeMetrics { id: id.clone(), recon: g.value(recon)[0].to_f64_lossy(), iou });
    }
    let n = shapes.len() as f64;
    let mean_recon = shapes.iter().map(|s| s.recon).sum::<f64>() / n;
    let mean_iou = match net.backend() {
        Backend::Vsl => Some(shapes.iter().filter_map(|s| s.iou).sum::<f64>() / n),
        Backend::PointNet => None,
    };
    Ok(Metrics { backend: net.backend(), shapes, mean_recon, mean_iou })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_warmup_is_linear() {
        let cfg = TrainConfig { epochs: 100, kl_weight: 1.0, ..Default::default() };
        assert_eq!(cfg.kl_weight_at(0), 0.0);
        assert_eq!(cfg.kl_weight_at(5), 0.5);
        assert_eq!(cfg.kl_weight_at(10), 1.0);
        assert_eq!(cfg.kl_weight_at(99), 1.0);
        let none = TrainConfig { kl_warmup: 0.0, kl_weight: 0.3, ..Default::default() };
        assert_eq!(none.kl_weight_at(0), 0.3);
    }

    #[test]
    fn validates_config() {
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { kl_weight: -1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
        }
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn csv_header() {
        let h = LossHistory { records: vec![EpochRecord { epoch: 0, total: 1.5, recon: 1.0, kl: 0.5, seconds: 0.25 }] };
        assert_eq!(h.to_csv(), "epoch,total,recon,kl,seconds\n0,1.5,1,0.5,0.25\n");
    }
}
