use std::collections::HashSet;
use std::io::Write as _;
use std::path::Path;

use super::sample::PointCloud;
use super::voxel::VoxelGrid;
use super::ShapeError;

pub const VOXELS_MAGIC: &[u8; 4] = b"SBVX";
pub const POINTS_MAGIC: &[u8; 4] = b"SBPC";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SBCK";
pub const FORMAT_VERSION: u8 = 1;

/// One named f32 array inside a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

/// Ordered collection of uniquely named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(tensors: Vec<NamedTensor>) -> Result<Self, ShapeError> {
        let mut ck = Self::default();
        for t in tensors {
            ck.push(t)?;
        }
        Ok(ck)
    }

    pub fn push(&mut self, t: NamedTensor) -> Result<(), ShapeError> {
        if t.name.len() > u16::MAX as usize {
            return Err(ShapeError::NameTooLong(t.name));
        }
        if t.dims.len() > u8::MAX as usize {
            return Err(ShapeError::BadTensor { name: t.name, detail: "rank exceeds 255".into() });
        }
        let n = element_count(&t.dims)?;
        if n != t.data.len() {
            return Err(ShapeError::BadTensor {
                name: t.name,
                detail: format!("dims {:?} need {n} values, got {}", t.dims, t.data.len()),
            });
        }
        if self.get(&t.name).is_some() {
            return Err(ShapeError::DuplicateName(t.name));
        }
        self.tensors.push(t);
        Ok(())
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn into_tensors(self) -> Vec<NamedTensor> {
        self.tensors
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ShapePayload {
    Voxels(VoxelGrid),
    Points(PointCloud),
    Checkpoint(Checkpoint),
}

fn element_count(dims: &[u32]) -> Result<usize, ShapeError> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .filter(|&n| n.checked_mul(4).is_some())
        .ok_or_else(|| ShapeError::DimensionOverflow(dims.iter().map(|&d| d as u64).collect()))
}

pub fn encode_voxels(grid: &VoxelGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + grid.occupancy().len());
    out.extend_from_slice(VOXELS_MAGIC);
    out.push(FORMAT_VERSION);
    for d in grid.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(grid.occupancy());
    out
}

pub fn encode_points(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 12 * cloud.len());
    out.extend_from_slice(POINTS_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(ck.len() as u32).to_le_bytes());
    for t in ck.tensors() {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn encode(payload: &ShapePayload) -> Vec<u8> {
    match payload {
        ShapePayload::Voxels(g) => encode_voxels(g),
        ShapePayload::Points(c) => encode_points(c),
        ShapePayload::Checkpoint(k) => encode_checkpoint(k),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ShapeError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ShapeError::TruncatedPayload { offset: self.pos, needed: n, available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ShapeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ShapeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ShapeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, ShapeError> {
        let bytes = self.take(n.checked_mul(4).ok_or(ShapeError::DimensionOverflow(vec![n as u64]))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<(), ShapeError> {
        let found = self.take(4)?;
        if found != magic {
            return Err(ShapeError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        match self.u8()? {
            FORMAT_VERSION => Ok(()),
            v => Err(ShapeError::UnsupportedVersion(v)),
        }
    }

    fn finish(&self) -> Result<(), ShapeError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(ShapeError::TrailingBytes(n)),
        }
    }
}

pub fn decode_voxels(bytes: &[u8]) -> Result<VoxelGrid, ShapeError> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(VOXELS_MAGIC)?;
    let dims = [r.u32()?, r.u32()?, r.u32()?];
    let n = element_count(&dims)?;
    let occupancy = r.take(n)?.to_vec();
    r.finish()?;
    VoxelGrid::new(dims.map(|d| d as usize), occupancy)
}

pub fn decode_points(bytes: &[u8]) -> Result<PointCloud, ShapeError> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(POINTS_MAGIC)?;
    let count = r.u32()? as usize;
    let flat = r.f32s(count.checked_mul(3).ok_or(ShapeError::DimensionOverflow(vec![count as u64, 3]))?)?;
    r.finish()?;
    PointCloud::from_flat(&flat)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ShapeError> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(CHECKPOINT_MAGIC)?;
    let count = r.u32()?;
    let mut ck = Checkpoint::default();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| ShapeError::BadName)?.to_string();
        if !seen.insert(name.clone()) {
            return Err(ShapeError::DuplicateName(name));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let data = r.f32s(element_count(&dims)?)?;
        ck.tensors.push(NamedTensor { name, dims, data });
    }
    r.finish()?;
    Ok(ck)
}

/// Decodes any of the three formats by magic.
pub fn decode(bytes: &[u8]) -> Result<ShapePayload, ShapeError> {
    match bytes.get(..4) {
        Some(m) if m == VOXELS_MAGIC => decode_voxels(bytes).map(ShapePayload::Voxels),
        Some(m) if m == POINTS_MAGIC => decode_points(bytes).map(ShapePayload::Points),
        Some(m) if m == CHECKPOINT_MAGIC => decode_checkpoint(bytes).map(ShapePayload::Checkpoint),
        Some(m) => Err(ShapeError::BadMagic {
            expected: "SBVX|SBPC|SBCK".into(),
            found: String::from_utf8_lossy(m).into_owned(),
        }),
        None => Err(ShapeError::TruncatedPayload { offset: 0, needed: 4, available: bytes.len() }),
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ShapeError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| ShapeError::Io(e.error))?;
    Ok(())
}

pub fn write_shape(path: &Path, payload: &ShapePayload) -> Result<(), ShapeError> {
    write_atomic(path, &encode(payload))
}

pub fn read_shape(path: &Path) -> Result<ShapePayload, ShapeError> {
    decode(&std::fs::read(path)?)
}
