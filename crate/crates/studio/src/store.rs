//! On-disk shape store.
//!
//! ```text
//! <root>/manifest.tsv
//! <root>/shapes/<sha16>.sbvx|.sbpc   content addressed payloads
//! <root>/meshes/<id>.off|.obj        copies of the source meshes
//! <root>/checkpoints/<id>.sbck + <id>.json
//! <root>/results/
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use shapeblend_core::grad::{Real, Scalar};
use shapeblend_core::nets::{Autoencoder, Backend, ShapeSample};
use shapeblend_core::shape::{self, Checkpoint};
use shapeblend_core::train::{DatasetManifest, ManifestEntry, Split};

use crate::StudioError;

pub const SHAPES_DIR: &str = "shapes";
pub const MESHES_DIR: &str = "meshes";
pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const RESULTS_DIR: &str = "results";

/// Which stored payload of a shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Voxels,
    Points,
}

impl Representation {
    pub fn for_backend(b: Backend) -> Self {
        match b {
            Backend::PointNet => Representation::Points,
            Backend::Vsl => Representation::Voxels,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Representation::Voxels => "sbvx",
            Representation::Points => "sbpc",
        }
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::Voxels => "voxels",
            Representation::Points => "points",
        })
    }
}

impl FromStr for Representation {
    type Err = StudioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "voxels" | "sbvx" => Ok(Representation::Voxels),
            "points" | "sbpc" => Ok(Representation::Points),
            other => Err(StudioError::InvalidArgument(format!("unknown representation '{other}'"))),
        }
    }
}

/// Sidecar describing a stored checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub id: String,
    pub backend: Backend,
    /// Point count for PointNet checkpoints.
    pub points: Option<usize>,
    /// Epochs trained, when known.
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub mean_recon: Option<f64>,
    pub mean_iou: Option<f64>,
}

impl CheckpointMeta {
    pub fn describe<S: Scalar>(id: &str, net: &Autoencoder<S>) -> Self {
        let points = match net {
            Autoencoder::PointNet(n) => Some(n.points()),
            Autoencoder::Vsl(_) => None,
        };
        Self {
            id: id.into(),
            backend: net.backend(),
            points,
            epochs: None,
            seed: None,
            mean_recon: None,
            mean_iou: None,
        }
    }
}

/// Ids are path components: ASCII letters, digits, '.', '_' and '-', not
/// starting with '.'.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.len() <= 200
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

fn check_id(id: &str) -> Result<(), StudioError> {
    if valid_id(id) {
        Ok(())
    } else {
        Err(StudioError::InvalidId(id.to_string()))
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

#[derive(Debug)]
pub struct ShapeStore {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl ShapeStore {
    /// Opens `root`, creating the layout and an empty manifest if needed.
    pub fn init(root: &Path) -> Result<Self, StudioError> {
        for d in [SHAPES_DIR, MESHES_DIR, CHECKPOINTS_DIR, RESULTS_DIR] {
            std::fs::create_dir_all(root.join(d)).map_err(|source| StudioError::Read { path: root.join(d), source })?;
        }
        if !root.join(shapeblend_core::train::MANIFEST_FILE).exists() {
            DatasetManifest::default().save(root)?;
        }
        Self::open(root)
    }

    /// Opens an existing store and audits it: every manifest entry must point
    /// at payloads whose content hash matches their file name.
    pub fn open(root: &Path) -> Result<Self, StudioError> {
        if !root.join(shapeblend_core::train::MANIFEST_FILE).is_file() {
            return Err(StudioError::Audit(format!("{} has no manifest", root.display())));
        }
        let manifest = DatasetManifest::load(root)?;
        for e in manifest.entries() {
            for rel in [&e.voxels, &e.points] {
                let bytes = std::fs::read(root.join(rel))?;
                let stem = rel.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                if stem != content_hash(&bytes) {
                    return Err(StudioError::Audit(format!("{} does not match its content hash", rel.display())));
                }
            }
        }
        for d in [CHECKPOINTS_DIR, RESULTS_DIR] {
            std::fs::create_dir_all(root.join(d))?;
        }
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn entry(&self, id: &str) -> Result<&ManifestEntry, StudioError> {
        self.manifest.get(id).ok_or_else(|| StudioError::UnknownShape(id.to_string()))
    }

    pub fn payload_path(&self, id: &str, repr: Representation) -> Result<PathBuf, StudioError> {
        let e = self.entry(id)?;
        Ok(self.root.join(match repr {
            Representation::Voxels => &e.voxels,
            Representation::Points => &e.points,
        }))
    }

    /// Raw SBVX/SBPC bytes of a stored shape.
    pub fn payload_bytes(&self, id: &str, repr: Representation) -> Result<Vec<u8>, StudioError> {
        Ok(std::fs::read(self.payload_path(id, repr)?)?)
    }

    pub fn load_sample(&self, id: &str, backend: Backend) -> Result<ShapeSample, StudioError> {
        Ok(self.manifest.load_sample(&self.root, self.entry(id)?, backend)?)
    }

    /// `(id, sample)` pairs of one split.
    pub fn load_split(&self, split: Split, backend: Backend) -> Result<Vec<(String, ShapeSample)>, StudioError> {
        Ok(self.manifest.load_split(&self.root, split, backend)?)
    }

    /// Stores a payload under its content hash; returns the path relative to
    /// the root.
    pub fn put_payload(&self, bytes: &[u8], repr: Representation) -> Result<PathBuf, StudioError> {
        let rel = PathBuf::from(SHAPES_DIR).join(format!("{}.{}", content_hash(bytes), repr.extension()));
        let path = self.root.join(&rel);
        if !path.is_file() || std::fs::read(&path)? != bytes {
            shape::write_atomic(&path, bytes)?;
        }
        Ok(rel)
    }

    /// Writes a copy of a source mesh; returns the path relative to the root.
    pub fn put_mesh(&self, id: &str, extension: &str, bytes: &[u8]) -> Result<PathBuf, StudioError> {
        check_id(id)?;
        let rel = PathBuf::from(MESHES_DIR).join(format!("{id}.{extension}"));
        shape::write_atomic(&self.root.join(&rel), bytes)?;
        Ok(rel)
    }

    /// Adds entries, replacing any with the same id, and rewrites the
    /// manifest.
    pub fn upsert(&mut self, entries: Vec<ManifestEntry>) -> Result<(), StudioError> {
        let mut all: Vec<ManifestEntry> = self.manifest.entries().to_vec();
        for e in entries {
            check_id(&e.id)?;
            match all.iter_mut().find(|x| x.id == e.id) {
                Some(slot) => *slot = e,
                None => all.push(e),
            }
        }
        let manifest = DatasetManifest::new(all)?;
        manifest.save(&self.root)?;
        self.manifest = manifest;
        Ok(())
    }

    pub fn checkpoint_path(&self, id: &str) -> PathBuf {
        self.root.join(CHECKPOINTS_DIR).join(format!("{id}.sbck"))
    }

    fn checkpoint_meta_path(&self, id: &str) -> PathBuf {
        self.root.join(CHECKPOINTS_DIR).join(format!("{id}.json"))
    }

    pub fn save_checkpoint(&self, meta: &CheckpointMeta, ck: &Checkpoint) -> Result<(), StudioError> {
        check_id(&meta.id)?;
        shape::write_shape(&self.checkpoint_path(&meta.id), &shape::ShapePayload::Checkpoint(ck.clone()))?;
        shape::write_atomic(&self.checkpoint_meta_path(&meta.id), &serde_json::to_vec_pretty(meta)?)?;
        Ok(())
    }

    pub fn load_checkpoint(&self, id: &str) -> Result<Checkpoint, StudioError> {
        check_id(id).map_err(|_| StudioError::UnknownCheckpoint(id.to_string()))?;
        let path = self.checkpoint_path(id);
        if !path.is_file() {
            return Err(StudioError::UnknownCheckpoint(id.to_string()));
        }
        Ok(shape::decode_checkpoint(&std::fs::read(path)?)?)
    }

    /// Metadata for one checkpoint, derived from the weights when the
    /// sidecar is missing.
    pub fn checkpoint_meta(&self, id: &str) -> Result<CheckpointMeta, StudioError> {
        check_id(id).map_err(|_| StudioError::UnknownCheckpoint(id.to_string()))?;
        let meta = self.checkpoint_meta_path(id);
        if meta.is_file() && self.checkpoint_path(id).is_file() {
            return Ok(serde_json::from_slice(&std::fs::read(meta)?)?);
        }
        let ck = self.load_checkpoint(id)?;
        let net = Autoencoder::<Real>::from_checkpoint(&ck)?;
        Ok(CheckpointMeta::describe(id, &net))
    }

    /// All stored checkpoints, sorted by id.
    pub fn checkpoints(&self) -> Result<Vec<CheckpointMeta>, StudioError> {
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(self.root.join(CHECKPOINTS_DIR))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "sbck") {
                if let Some(id) = path.file_stem().and_then(|s| s.to_str()).filter(|s| valid_id(s)) {
                    ids.push(id.to_string());
                }
            }
        }
        ids.sort();
        ids.iter().map(|id| self.checkpoint_meta(id)).collect()
    }

    pub fn results_dir(&self) -> PathBuf {
        self.root.join(RESULTS_DIR)
    }

    /// Shape ids and labels, in manifest order.
    pub fn shapes(&self) -> &[ManifestEntry] {
        self.manifest.entries()
    }

    pub fn split_ids(&self, split: Split) -> Vec<String> {
        self.manifest.split(split).map(|e| e.id.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids() {
        assert!(valid_id("car-sedan_01.v2"));
        for bad in ["", ".hidden", "a/b", "a b", "é", "..", "a\tb"] {
            assert!(!valid_id(bad), "{bad:?}");
        }
    }

    #[test]
    fn representation_names() {
        assert_eq!("points".parse::<Representation>().unwrap(), Representation::Points);
        assert_eq!("sbvx".parse::<Representation>().unwrap(), Representation::Voxels);
        assert!("mesh".parse::<Representation>().is_err());
        assert_eq!(Representation::for_backend(Backend::Vsl).extension(), "sbvx");
    }

    #[test]
    fn content_hash_is_short_sha() {
        assert_eq!(content_hash(b"abc"), "ba7816bf8f01cfea");
    }
}
