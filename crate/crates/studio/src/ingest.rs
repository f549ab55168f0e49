//! Mesh directory ingestion.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use shapeblend_core::shape::{self, Fill, ShapeError, TriangleMesh};
use shapeblend_core::train::{ManifestEntry, Split};

use crate::store::{Representation, ShapeStore};
use crate::StudioError;

/// Category for meshes sitting directly in the input directory.
pub const DEFAULT_CATEGORY: &str = "uncategorized";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IngestOptions {
    /// Grid resolution per axis.
    pub dims: usize,
    pub points: usize,
    pub seed: u64,
    pub fill: Fill,
    /// Every k-th ingested shape goes to the eval split; 0 keeps all in train.
    pub eval_every: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { dims: shape::DEFAULT_DIMS[0], points: shape::DEFAULT_POINTS, seed: 0, fill: Fill::Solid, eval_every: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestSummary {
    pub added: Vec<String>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Replaces every character outside `[A-Za-z0-9._-]` with '_'.
fn sanitize(s: &str) -> String {
    let out: String =
        s.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' }).collect();
    out.trim_start_matches('.').to_string()
}

/// `<category>-<file stem>`.
pub fn shape_id(category: &str, stem: &str) -> String {
    format!("{}-{}", sanitize(category), sanitize(stem))
}

/// Sampling seed for one shape: the run seed mixed with the id, so a shape
/// gets the same points whatever else is ingested with it.
pub fn shape_seed(seed: u64, id: &str) -> u64 {
    let h = Sha256::digest(id.as_bytes());
    seed ^ u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

fn parse_mesh(path: &Path, bytes: &[u8]) -> Result<TriangleMesh, ShapeError> {
    match extension(path).as_deref() {
        Some("obj") => shape::parse_obj(bytes),
        _ => shape::parse_off(bytes),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase)
}

/// Mesh files under `input`, sorted, with their category.
fn mesh_files(input: &Path) -> Result<Vec<(PathBuf, String)>, StudioError> {
    std::fs::read_dir(input).map_err(|source| StudioError::Read { path: input.to_path_buf(), source })?;
    let mut out = Vec::new();
    for entry in WalkDir::new(input).sort_by_file_name() {
        let entry = entry?;
        if !entry.file_type().is_file() || !matches!(extension(entry.path()).as_deref(), Some("off" | "obj")) {
            continue;
        }
        let category = match entry.path().parent() {
            Some(p) if p != input => p.file_name().and_then(|n| n.to_str()).unwrap_or(DEFAULT_CATEGORY).to_string(),
            _ => DEFAULT_CATEGORY.to_string(),
        };
        out.push((entry.into_path(), category));
    }
    Ok(out)
}

fn ingest_one(
    store: &ShapeStore,
    path: &Path,
    id: &str,
    category: &str,
    opts: &IngestOptions,
) -> Result<ManifestEntry, StudioError> {
    let bytes = std::fs::read(path).map_err(|source| StudioError::Read { path: path.to_path_buf(), source })?;
    let mesh = parse_mesh(path, &bytes)?.normalize()?;
    let grid = shape::voxelize(&mesh, [opts.dims; 3], opts.fill)?;
    let cloud = shape::sample_points(&mesh, opts.points, shape_seed(opts.seed, id))?;
    let voxels = store.put_payload(&shape::encode_voxels(&grid), Representation::Voxels)?;
    let points = store.put_payload(&shape::encode_points(&cloud), Representation::Points)?;
    let mesh = store.put_mesh(id, &extension(path).unwrap_or_else(|| "off".into()), &bytes)?;
    Ok(ManifestEntry { id: id.to_string(), category: category.to_string(), split: Split::Train, voxels, points, mesh })
}

/// Converts every OFF/OBJ file under `input` into store payloads.
///
/// Malformed meshes are logged and skipped. Fails only if the directory
/// cannot be read or nothing could be ingested.
pub fn ingest(store: &mut ShapeStore, input: &Path, opts: &IngestOptions) -> Result<IngestSummary, StudioError> {
    if opts.dims < 2 || opts.points == 0 {
        return Err(StudioError::InvalidArgument("dims must be at least 2 and points at least 1".into()));
    }
    let files = mesh_files(input)?;
    if files.is_empty() {
        return Err(StudioError::NoInputs(input.to_path_buf()));
    }
    let mut summary = IngestSummary::default();
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (path, category) in files {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let id = shape_id(&category, stem);
        if !seen.insert(id.clone()) {
            log::warn!("skipping {}: duplicate shape id '{id}'", path.display());
            summary.skipped.push((path, format!("duplicate shape id '{id}'")));
            continue;
        }
        match ingest_one(store, &path, &id, &category, opts) {
            Ok(mut entry) => {
                if opts.eval_every > 0 && (entries.len() + 1) % opts.eval_every == 0 {
                    entry.split = Split::Eval;
                }
                log::info!("ingested {} as {id}", path.display());
                summary.added.push(id);
                entries.push(entry);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                summary.skipped.push((path, e.to_string()));
            }
        }
    }
    if entries.is_empty() {
        return Err(StudioError::NothingIngested { path: input.to_path_buf(), skipped: summary.skipped.len() });
    }
    store.upsert(entries)?;
    Ok(summary)
}
