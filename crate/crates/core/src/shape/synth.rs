//! Procedural closed meshes, used for fixtures and demo stores.

use std::fmt::Write as _;

use rand::Rng as _;

use super::mesh::{TriangleMesh, Vec3};
use crate::grad::seeded_rng;

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Categories understood by [`category_shape`].
pub const CATEGORIES: [&str; 4] = ["airplane", "car", "chair", "table"];

fn apply(r: &Mat3, v: Vec3) -> Vec3 {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// Rotation from Z-Y-X Euler angles in radians.
pub fn rotation(yaw: f64, pitch: f64, roll: f64) -> Mat3 {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    [
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ]
}

/// Closed axis-aligned box with outward-facing triangles.
pub fn cuboid(center: Vec3, half: Vec3) -> TriangleMesh {
    oriented_box(center, half, &IDENTITY)
}

/// Closed box with local axes given by the columns of `rot`.
pub fn oriented_box(center: Vec3, half: Vec3, rot: &Mat3) -> TriangleMesh {
    let vertices = (0..8)
        .map(|k| {
            let local = [
                if k & 4 != 0 { half[0] } else { -half[0] },
                if k & 2 != 0 { half[1] } else { -half[1] },
                if k & 1 != 0 { half[2] } else { -half[2] },
            ];
            let p = apply(rot, local);
            [center[0] + p[0], center[1] + p[1], center[2] + p[2]]
        })
        .collect();
    let faces = vec![
        [0, 1, 3],
        [0, 3, 2],
        [4, 6, 7],
        [4, 7, 5],
        [0, 4, 5],
        [0, 5, 1],
        [2, 3, 7],
        [2, 7, 6],
        [0, 2, 6],
        [0, 6, 4],
        [1, 5, 7],
        [1, 7, 3],
    ];
    TriangleMesh::new(vertices, faces).expect("box mesh is valid")
}

/// Closed cylinder along the axis `rot * z`.
pub fn cylinder(center: Vec3, radius: f64, half_height: f64, segments: usize, rot: &Mat3) -> TriangleMesh {
    let segments = segments.max(3);
    let mut vertices = Vec::with_capacity(2 * segments + 2);
    for side in [-1.0, 1.0] {
        for s in 0..segments {
            let t = std::f64::consts::TAU * s as f64 / segments as f64;
            vertices.push([radius * t.cos(), radius * t.sin(), side * half_height]);
        }
    }
    vertices.push([0.0, 0.0, -half_height]);
    vertices.push([0.0, 0.0, half_height]);
    let (bottom, top) = (2 * segments, 2 * segments + 1);
    let mut faces = Vec::with_capacity(4 * segments);
    for s in 0..segments {
        let n = (s + 1) % segments;
        let (a, b, c, d) = (s, n, segments + s, segments + n);
        faces.push([a, b, d]);
        faces.push([a, d, c]);
        faces.push([bottom, b, a]);
        faces.push([top, c, d]);
    }
    let vertices = vertices
        .into_iter()
        .map(|v| {
            let p = apply(rot, v);
            [center[0] + p[0], center[1] + p[1], center[2] + p[2]]
        })
        .collect();
    TriangleMesh::new(vertices, faces).expect("cylinder mesh is valid")
}

/// Latitude/longitude sphere.
pub fn uv_sphere(center: Vec3, radius: f64, rings: usize, segments: usize) -> TriangleMesh {
    let (rings, segments) = (rings.max(2), segments.max(3));
    let mut vertices = vec![[center[0], center[1], center[2] + radius]];
    for r in 1..rings {
        let phi = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let t = std::f64::consts::TAU * s as f64 / segments as f64;
            vertices.push([
                center[0] + radius * phi.sin() * t.cos(),
                center[1] + radius * phi.sin() * t.sin(),
                center[2] + radius * phi.cos(),
            ]);
        }
    }
    vertices.push([center[0], center[1], center[2] - radius]);
    let south = vertices.len() - 1;
    let ring = |r: usize, s: usize| 1 + (r - 1) * segments + s % segments;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(1, s), ring(1, s + 1)]);
        faces.push([south, ring(rings - 1, s + 1), ring(rings - 1, s)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            faces.push([ring(r, s), ring(r + 1, s), ring(r + 1, s + 1)]);
            faces.push([ring(r, s), ring(r + 1, s + 1), ring(r, s + 1)]);
        }
    }
    TriangleMesh::new(vertices, faces).expect("sphere mesh is valid")
}

/// A crude member of `category` with proportions jittered by `variant`.
/// Unknown categories fall back to a jittered box.
pub fn category_shape(category: &str, variant: u64) -> TriangleMesh {
    let mut rng = seeded_rng(variant ^ 0x5eed_5eed);
    let mut j = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let parts: Vec<TriangleMesh> = match category {
        "airplane" => {
            let span = j(0.8, 1.1);
            let sweep = j(0.0, 0.35);
            let len = j(0.9, 1.1);
            vec![
                cylinder([0.0; 3], j(0.08, 0.12), len, 12, &rotation(0.0, std::f64::consts::FRAC_PI_2, 0.0)),
                oriented_box([j(-0.1, 0.1), 0.0, 0.0], [0.18, span, 0.025], &rotation(sweep, 0.0, 0.0)),
                cuboid([-len + 0.1, 0.0, 0.0], [0.08, j(0.25, 0.4), 0.02]),
                cuboid([-len + 0.1, 0.0, 0.15], [0.08, 0.02, j(0.1, 0.2)]),
            ]
        }
        "car" => {
            let (l, w) = (j(0.8, 1.0), j(0.35, 0.45));
            let mut parts = vec![
                cuboid([0.0, 0.0, 0.0], [l, w, j(0.12, 0.18)]),
                cuboid([j(-0.2, 0.1), 0.0, 0.25], [j(0.35, 0.55), w * 0.9, j(0.08, 0.14)]),
            ];
            let r = j(0.12, 0.18);
            for (x, y) in [(0.6, 1.0), (0.6, -1.0), (-0.6, 1.0), (-0.6, -1.0)] {
                parts.push(cylinder(
                    [x * l, y * w, -0.15],
                    r,
                    0.05,
                    10,
                    &rotation(0.0, 0.0, std::f64::consts::FRAC_PI_2),
                ));
            }
            parts
        }
        "chair" => {
            let (h, s) = (j(0.35, 0.5), j(0.3, 0.4));
            let back = j(0.35, 0.6);
            let mut parts =
                vec![cuboid([0.0, 0.0, 0.0], [s, s, 0.04]), cuboid([-s + 0.03, 0.0, back], [0.03, s, back])];
            for (x, y) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                parts.push(cuboid([x * (s - 0.04), y * (s - 0.04), -h / 2.0], [0.03, 0.03, h / 2.0]));
            }
            parts
        }
        "table" => {
            let (l, w, h) = (j(0.6, 0.9), j(0.4, 0.6), j(0.35, 0.55));
            let mut parts = vec![cuboid([0.0, 0.0, 0.0], [l, w, 0.04])];
            for (x, y) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                parts.push(cuboid([x * (l - 0.06), y * (w - 0.06), -h / 2.0], [0.04, 0.04, h / 2.0]));
            }
            parts
        }
        _ => vec![cuboid([0.0; 3], [j(0.3, 1.0), j(0.3, 1.0), j(0.3, 1.0)])],
    };
    TriangleMesh::merge(&parts).expect("parts are non-empty")
}

/// `count` shapes cycling through [`CATEGORIES`], as `(category, mesh)`.
pub fn dataset(count: usize, seed: u64) -> Vec<(&'static str, TriangleMesh)> {
    (0..count)
        .map(|i| {
            let cat = CATEGORIES[i % CATEGORIES.len()];
            (cat, category_shape(cat, seed.wrapping_mul(1000).wrapping_add(i as u64)))
        })
        .collect()
}

/// Serializes a mesh as OFF text.
pub fn to_off(mesh: &TriangleMesh) -> String {
    let mut out = format!("OFF\n{} {} 0\n", mesh.vertices().len(), mesh.faces().len());
    for v in mesh.vertices() {
        let _ = writeln!(out, "{} {} {}", v[0], v[1], v[2]);
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "3 {} {} {}", f[0], f[1], f[2]);
    }
    out
}
