use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;

use super::mesh::{triangle_area, TriangleMesh};
use super::ShapeError;
use crate::grad::seeded_rng;

/// Unordered set of 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>) -> Result<Self, ShapeError> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(ShapeError::NonFinite(i));
        }
        Ok(Self { points })
    }

    /// Builds a cloud from a flat `x0 y0 z0 x1 ...` buffer.
    pub fn from_flat(flat: &[f32]) -> Result<Self, ShapeError> {
        if !flat.len().is_multiple_of(3) {
            return Err(ShapeError::InvalidCount(format!("{} values is not a multiple of 3", flat.len())));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn flat(&self) -> Vec<f32> {
        self.points.iter().flatten().copied().collect()
    }

    /// Channel-major `[3, N]` layout: all x, then all y, then all z.
    pub fn channels(&self) -> Vec<f32> {
        (0..3).flat_map(|a| self.points.iter().map(move |p| p[a])).collect()
    }

    pub fn max_norm(&self) -> f32 {
        self.points.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f32::max)
    }
}

/// Area-weighted uniform surface samples.
pub fn sample_points(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud, ShapeError> {
    sample_surface(mesh, n, seed).map(|(cloud, _)| cloud)
}

/// Like [`sample_points`], also returning the source face of every point.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<(PointCloud, Vec<usize>), ShapeError> {
    if n == 0 {
        return Err(ShapeError::InvalidCount("cannot sample zero points".into()));
    }
    let areas: Vec<f64> = mesh.triangles().map(|t| triangle_area(&t)).collect();
    let total: f64 = areas.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(ShapeError::ZeroArea);
    }
    let pick = WeightedIndex::new(&areas).map_err(|_| ShapeError::ZeroArea)?;
    let mut rng = seeded_rng(seed);
    let mut points = Vec::with_capacity(n);
    let mut faces = Vec::with_capacity(n);
    for _ in 0..n {
        let f = pick.sample(&mut rng);
        let [a, b, c] = mesh.triangle(f);
        let mut u: f64 = rng.random();
        let mut v: f64 = rng.random();
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let p = [
            a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]),
            a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1]),
            a[2] + u * (b[2] - a[2]) + v * (c[2] - a[2]),
        ];
        points.push([p[0] as f32, p[1] as f32, p[2] as f32]);
        faces.push(f);
    }
    Ok((PointCloud { points }, faces))
}
