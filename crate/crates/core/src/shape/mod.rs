//! Meshes, voxel grids, point clouds and their file formats.

mod export;
mod format;
mod mesh;
mod sample;
pub mod synth;
mod voxel;

pub use export::{points_to_obj, voxels_to_obj};
pub use format::{
    decode, decode_checkpoint, decode_points, decode_voxels, encode, encode_checkpoint, encode_points, encode_voxels,
    read_shape, write_atomic, write_shape, Checkpoint, NamedTensor, ShapePayload, CHECKPOINT_MAGIC, FORMAT_VERSION,
    POINTS_MAGIC, VOXELS_MAGIC,
};
pub use mesh::{parse_obj, parse_off, triangle_area, TriangleMesh, Vec3};
pub use sample::{sample_points, sample_surface, PointCloud};
pub use voxel::{voxelize, Fill, ProbabilityGrid, VoxelGrid, DEFAULT_DIMS};

/// Default number of points per cloud.
pub const DEFAULT_POINTS: usize = 2048;

#[derive(Debug, thiserror::Error)]
pub enum ShapeError {
    #[error("mesh text is not valid UTF-8")]
    NotText,
    #[error("missing OFF header")]
    MissingHeader,
    #[error("bad counts line: {0}")]
    BadCounts(String),
    #[error("line {line}: invalid number '{token}'")]
    InvalidNumber { line: usize, token: String },
    #[error("truncated mesh: expected {expected} {what} records, found {found}")]
    Truncated { what: &'static str, expected: usize, found: usize },
    #[error("line {line}: face has fewer than 3 vertices")]
    DegenerateFace { line: usize },
    #[error("line {line}: data after the last declared face")]
    TrailingData { line: usize },
    #[error("face {face} references vertex {index}, mesh has {vertices}")]
    FaceIndexOutOfRange { face: usize, index: usize, vertices: usize },
    #[error("vertex {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("mesh has no vertices or no faces")]
    EmptyMesh,
    #[error("mesh has zero extent")]
    DegenerateMesh,
    #[error("mesh has zero surface area")]
    ZeroArea,
    #[error("invalid grid dims {0:?}")]
    InvalidDims([usize; 3]),
    #[error("invalid count: {0}")]
    InvalidCount(String),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated payload: need {needed} bytes at offset {offset}, {available} available")]
    TruncatedPayload { offset: usize, needed: usize, available: usize },
    #[error("declared dimensions {0:?} overflow")]
    DimensionOverflow(Vec<u64>),
    #[error("occupancy byte {value} at index {index} is not 0 or 1")]
    InvalidOccupancy { index: usize, value: u8 },
    #[error("probability {value} at index {index} is outside [0, 1]")]
    InvalidProbability { index: usize, value: f32 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("tensor name '{0}' is too long")]
    NameTooLong(String),
    #[error("duplicate tensor name '{0}'")]
    DuplicateName(String),
    #[error("tensor '{name}': {detail}")]
    BadTensor { name: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
