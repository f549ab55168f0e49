use std::collections::VecDeque;

use super::mesh::{cross, dot3, sub, TriangleMesh, Vec3};
use super::ShapeError;

pub const DEFAULT_DIMS: [usize; 3] = [30, 30, 30];

/// Binary occupancy grid over [-1, 1]^3, index `x*dy*dz + y*dz + z`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    occupancy: Vec<u8>,
}

fn cell_count(dims: [usize; 3]) -> Result<usize, ShapeError> {
    if dims.contains(&0) {
        return Err(ShapeError::InvalidDims(dims));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| ShapeError::DimensionOverflow(dims.iter().map(|&d| d as u64).collect()))
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], occupancy: Vec<u8>) -> Result<Self, ShapeError> {
        let n = cell_count(dims)?;
        if occupancy.len() != n {
            return Err(ShapeError::InvalidCount(format!("{} cells for dims {dims:?}", occupancy.len())));
        }
        if let Some(index) = occupancy.iter().position(|&v| v > 1) {
            return Err(ShapeError::InvalidOccupancy { index, value: occupancy[index] });
        }
        Ok(Self { dims, occupancy })
    }

    pub fn empty(dims: [usize; 3]) -> Result<Self, ShapeError> {
        let n = cell_count(dims)?;
        Ok(Self { dims, occupancy: vec![0; n] })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn occupancy(&self) -> &[u8] {
        &self.occupancy
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.occupancy[self.index(x, y, z)] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = self.index(x, y, z);
        self.occupancy[i] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.occupancy.iter().filter(|&&v| v == 1).count()
    }

    /// Intersection over union; two empty grids count as identical.
    pub fn iou(&self, other: &VoxelGrid) -> Result<f64, ShapeError> {
        if self.dims != other.dims {
            return Err(ShapeError::InvalidDims(other.dims));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.occupancy.iter().zip(&other.occupancy) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    /// Occupancy as 0.0/1.0 values, same order.
    pub fn to_f32(&self) -> Vec<f32> {
        self.occupancy.iter().map(|&v| v as f32).collect()
    }

    /// Axis-aligned bounds of cell (x, y, z).
    pub fn cell_bounds(&self, x: usize, y: usize, z: usize) -> (Vec3, Vec3) {
        cell_box(self.dims, [x, y, z])
    }
}

pub(crate) fn cell_box(dims: [usize; 3], c: [usize; 3]) -> (Vec3, Vec3) {
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for a in 0..3 {
        let h = 2.0 / dims[a] as f64;
        lo[a] = -1.0 + c[a] as f64 * h;
        hi[a] = -1.0 + (c[a] + 1) as f64 * h;
    }
    (lo, hi)
}

/// Real-valued grid of occupancy probabilities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityGrid {
    dims: [usize; 3],
    values: Vec<f32>,
}

impl ProbabilityGrid {
    pub fn new(dims: [usize; 3], values: Vec<f32>) -> Result<Self, ShapeError> {
        let n = cell_count(dims)?;
        if values.len() != n {
            return Err(ShapeError::InvalidCount(format!("{} cells for dims {dims:?}", values.len())));
        }
        if let Some(index) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(ShapeError::InvalidProbability { index, value: values[index] });
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Cells with probability at or above `threshold` become occupied.
    pub fn binarize(&self, threshold: f32) -> VoxelGrid {
        VoxelGrid { dims: self.dims, occupancy: self.values.iter().map(|&p| (p >= threshold) as u8).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Fill {
    Surface,
    #[default]
    Solid,
}

impl std::str::FromStr for Fill {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "surface" => Ok(Fill::Surface),
            "solid" => Ok(Fill::Solid),
            other => Err(format!("unknown fill mode '{other}'")),
        }
    }
}

/// Rasterizes a mesh onto a grid spanning [-1, 1]^3.
pub fn voxelize(mesh: &TriangleMesh, dims: [usize; 3], fill: Fill) -> Result<VoxelGrid, ShapeError> {
    if dims.iter().any(|&d| d < 2) {
        return Err(ShapeError::InvalidDims(dims));
    }
    let (lo, hi) = mesh.bounds();
    if (0..3).all(|a| hi[a] - lo[a] <= 0.0) {
        return Err(ShapeError::DegenerateMesh);
    }
    let mut grid = VoxelGrid::empty(dims)?;
    let size: Vec3 = [2.0 / dims[0] as f64, 2.0 / dims[1] as f64, 2.0 / dims[2] as f64];
    let half = [size[0] * 0.5, size[1] * 0.5, size[2] * 0.5];
    for tri in mesh.triangles() {
        let mut range = [(0usize, 0usize); 3];
        let mut outside = false;
        for a in 0..3 {
            let tlo = tri[0][a].min(tri[1][a]).min(tri[2][a]);
            let thi = tri[0][a].max(tri[1][a]).max(tri[2][a]);
            if thi < -1.0 || tlo > 1.0 {
                outside = true;
                break;
            }
            let first = ((tlo + 1.0) / size[a]).floor().max(0.0) as usize;
            let last = (((thi + 1.0) / size[a]).floor() as usize).min(dims[a] - 1);
            // A vertex on a cell boundary touches the cell below as well.
            range[a] = (first.saturating_sub(1), last);
        }
        if outside {
            continue;
        }
        for x in range[0].0..=range[0].1 {
            for y in range[1].0..=range[1].1 {
                for z in range[2].0..=range[2].1 {
                    let i = grid.index(x, y, z);
                    if grid.occupancy[i] == 1 {
                        continue;
                    }
                    let (clo, _) = cell_box(dims, [x, y, z]);
                    let center = [clo[0] + half[0], clo[1] + half[1], clo[2] + half[2]];
                    if triangle_box_overlap(center, half, &tri) {
                        grid.occupancy[i] = 1;
                    }
                }
            }
        }
    }
    if fill == Fill::Solid {
        fill_interior(&mut grid);
    }
    Ok(grid)
}

/// Marks every cell not reachable from the boundary through empty cells.
fn fill_interior(grid: &mut VoxelGrid) {
    let [dx, dy, dz] = grid.dims;
    let mut outside = vec![false; grid.occupancy.len()];
    let mut queue = VecDeque::new();
    let mut seed = |x: usize, y: usize, z: usize, grid: &VoxelGrid, outside: &mut Vec<bool>| {
        let i = grid.index(x, y, z);
        if grid.occupancy[i] == 0 && !outside[i] {
            outside[i] = true;
            queue.push_back([x, y, z]);
        }
    };
    for x in 0..dx {
        for y in 0..dy {
            for z in 0..dz {
                if x == 0 || y == 0 || z == 0 || x == dx - 1 || y == dy - 1 || z == dz - 1 {
                    seed(x, y, z, grid, &mut outside);
                }
            }
        }
    }
    while let Some([x, y, z]) = queue.pop_front() {
        let neighbours = [
            (x.wrapping_sub(1), y, z),
            (x + 1, y, z),
            (x, y.wrapping_sub(1), z),
            (x, y + 1, z),
            (x, y, z.wrapping_sub(1)),
            (x, y, z + 1),
        ];
        for (nx, ny, nz) in neighbours {
            if nx < dx && ny < dy && nz < dz {
                let i = grid.index(nx, ny, nz);
                if grid.occupancy[i] == 0 && !outside[i] {
                    outside[i] = true;
                    queue.push_back([nx, ny, nz]);
                }
            }
        }
    }
    for (cell, out) in grid.occupancy.iter_mut().zip(outside) {
        if !out {
            *cell = 1;
        }
    }
}

/// Separating-axis test between a triangle and an axis-aligned box.
/// Touching counts as overlap.
pub(crate) fn triangle_box_overlap(center: Vec3, half: Vec3, tri: &[Vec3; 3]) -> bool {
    let v = [sub(tri[0], center), sub(tri[1], center), sub(tri[2], center)];
    let e = [sub(v[1], v[0]), sub(v[2], v[1]), sub(v[0], v[2])];

    // Box face normals.
    for a in 0..3 {
        let lo = v[0][a].min(v[1][a]).min(v[2][a]);
        let hi = v[0][a].max(v[1][a]).max(v[2][a]);
        if lo > half[a] || hi < -half[a] {
            return false;
        }
    }

    // Triangle normal.
    let n = cross(e[0], e[1]);
    let r = half[0] * n[0].abs() + half[1] * n[1].abs() + half[2] * n[2].abs();
    let d = dot3(n, v[0]);
    if d.abs() > r {
        return false;
    }

    // Edge cross products.
    for edge in e {
        for a in 0..3 {
            let mut axis = [0.0; 3];
            axis[a] = 1.0;
            let axis = cross(axis, edge);
            if axis == [0.0; 3] {
                continue;
            }
            let p = [dot3(axis, v[0]), dot3(axis, v[1]), dot3(axis, v[2])];
            let lo = p[0].min(p[1]).min(p[2]);
            let hi = p[0].max(p[1]).max(p[2]);
            let r = half[0] * axis[0].abs() + half[1] * axis[1].abs() + half[2] * axis[2].abs();
            if lo > r || hi < -r {
                return false;
            }
        }
    }
    true
}
