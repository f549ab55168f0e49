use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FeatureDistances, TransferConfig, TransferError, TransferRecord, TransferResult};
use crate::grad::Scalar;
use crate::nets::NetOutput;
use crate::shape::{self, Checkpoint, NamedTensor, ProbabilityGrid, ShapeError, ShapePayload};

/// Name of the single tensor in a probability sibling file.
pub const PROBABILITY_TENSOR: &str = "probabilities";

/// Everything about a run except the output shape. Stored as JSON next to
/// the payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Resolved config, taps filled in.
    pub config: TransferConfig,
    pub history: Vec<TransferRecord>,
    /// Distances of the returned output, after the last update.
    pub final_distances: FeatureDistances,
    pub seconds: f64,
    pub provider_checksum_before: String,
    pub provider_checksum_after: String,
    pub transform_checksum_initial: String,
    pub transform_checksum_final: String,
}

/// `out` with a `.json` extension.
pub fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

/// `out` with a `.prob.sbck` extension; holds raw voxel probabilities.
pub fn probability_path(out: &Path) -> PathBuf {
    out.with_extension("prob.sbck")
}

impl<S: Scalar> TransferResult<S> {
    /// The output as a storable shape: points as-is, voxel probabilities
    /// binarized at 0.5.
    pub fn payload(&self) -> ShapePayload {
        match &self.output {
            NetOutput::Points(c) => ShapePayload::Points(c.clone()),
            NetOutput::Probabilities(p) => ShapePayload::Voxels(p.binarize(0.5)),
        }
    }

    /// Writes the payload to `out`, the sidecar, and for voxel outputs the
    /// probability sibling. Each file is replaced atomically; the payload
    /// goes last.
    pub fn write(&self, out: &Path) -> Result<(), TransferError> {
        if let NetOutput::Probabilities(p) = &self.output {
            shape::write_shape(&probability_path(out), &ShapePayload::Checkpoint(probability_checkpoint(p)))?;
        }
        let json = serde_json::to_vec_pretty(&self.report)?;
        shape::write_atomic(&sidecar_path(out), &json)?;
        shape::write_shape(out, &self.payload())?;
        Ok(())
    }
}

fn probability_checkpoint(p: &ProbabilityGrid) -> Checkpoint {
    let dims = p.dims().iter().map(|&d| d as u32).collect();
    Checkpoint::new(vec![NamedTensor { name: PROBABILITY_TENSOR.into(), dims, data: p.values().to_vec() }])
        .expect("single tensor")
}

/// A result read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredResult {
    pub payload: ShapePayload,
    pub report: TransferReport,
    pub probabilities: Option<ProbabilityGrid>,
}

/// Reads a result written by [`TransferResult::write`].
pub fn read_result(out: &Path) -> Result<StoredResult, TransferError> {
    let payload = shape::read_shape(out)?;
    let report = serde_json::from_slice(&std::fs::read(sidecar_path(out))?)?;
    let prob = probability_path(out);
    let probabilities = if prob.is_file() {
        let ShapePayload::Checkpoint(ck) = shape::read_shape(&prob)? else {
            return Err(
                ShapeError::BadTensor { name: PROBABILITY_TENSOR.into(), detail: "not a checkpoint".into() }.into()
            );
        };
        let t = ck
            .get(PROBABILITY_TENSOR)
            .ok_or_else(|| ShapeError::BadTensor { name: PROBABILITY_TENSOR.into(), detail: "missing".into() })?;
        let dims: [usize; 3] = match t.dims[..] {
            [x, y, z] => [x as usize, y as usize, z as usize],
            _ => {
                return Err(
                    ShapeError::BadTensor { name: PROBABILITY_TENSOR.into(), detail: "rank is not 3".into() }.into()
                )
            }
        };
        Some(ProbabilityGrid::new(dims, t.data.clone())?)
    } else {
        None
    };
    Ok(StoredResult { payload, report, probabilities })
}
