use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::nets::{Backend, ShapeSample};
use crate::shape::{self, ShapePayload};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const HEADER: &str = "# id\tcategory\tsplit\tvoxels\tpoints\tmesh";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// One ingested shape. Paths are relative to the store root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub category: String,
    pub split: Split,
    pub voxels: PathBuf,
    pub points: PathBuf,
    pub mesh: PathBuf,
}

/// Tab-separated index of a shape store, one entry per line.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, TrainError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.id.is_empty() || e.id.contains(['\t', '\n', '/']) {
                return Err(TrainError::Manifest { line: 0, detail: format!("invalid id '{}'", e.id) });
            }
            if !seen.insert(e.id.as_str()) {
                return Err(TrainError::DuplicateId(e.id.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(TrainError::Manifest {
                    line: i + 1,
                    detail: format!("expected 6 fields, got {}", f.len()),
                });
            }
            let split = f[2].parse().map_err(|detail| TrainError::Manifest { line: i + 1, detail })?;
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                category: f[1].to_string(),
                split,
                voxels: f[3].into(),
                points: f[4].into(),
                mesh: f[5].into(),
            });
        }
        Self::new(entries)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for e in &self.entries {
            out += &format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.category,
                e.split,
                e.voxels.display(),
                e.points.display(),
                e.mesh.display()
            );
        }
        out
    }

    /// Reads `root/manifest.tsv` and checks that every referenced file exists.
    pub fn load(root: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(root.join(MANIFEST_FILE))?;
        let m = Self::parse(&text)?;
        for e in &m.entries {
            for p in [&e.voxels, &e.points] {
                if !root.join(p).is_file() {
                    return Err(TrainError::MissingFile { id: e.id.clone(), path: root.join(p) });
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<(), TrainError> {
        shape::write_atomic(&root.join(MANIFEST_FILE), self.to_tsv().as_bytes())?;
        Ok(())
    }

    /// Reads the representation `backend` consumes for one entry.
    pub fn load_sample(&self, root: &Path, entry: &ManifestEntry, backend: Backend) -> Result<ShapeSample, TrainError> {
        let path = match backend {
            Backend::PointNet => &entry.points,
            Backend::Vsl => &entry.voxels,
        };
        match (backend, shape::read_shape(&root.join(path))?) {
            (Backend::PointNet, ShapePayload::Points(c)) => Ok(ShapeSample::Points(c)),
            (Backend::Vsl, ShapePayload::Voxels(g)) => Ok(ShapeSample::Voxels(g)),
            _ => Err(TrainError::Representation { id: entry.id.clone(), backend }),
        }
    }

    /// `(id, sample)` pairs of one split, in manifest order.
    pub fn load_split(
        &self,
        root: &Path,
        split: Split,
        backend: Backend,
    ) -> Result<Vec<(String, ShapeSample)>, TrainError> {
        self.split(split).map(|e| Ok((e.id.clone(), self.load_sample(root, e, backend)?))).collect()
    }
}
