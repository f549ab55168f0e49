use std::fmt::Write as _;

use super::sample::PointCloud;
use super::voxel::VoxelGrid;

// Corner k has offsets (k>>2 & 1, k>>1 & 1, k & 1) along (x, y, z).
// Faces listed as (axis, side, two outward-facing triangles).
const CUBE_FACES: [(usize, usize, [[usize; 3]; 2]); 6] = [
    (0, 0, [[0, 1, 3], [0, 3, 2]]),
    (0, 1, [[4, 6, 7], [4, 7, 5]]),
    (1, 0, [[0, 4, 5], [0, 5, 1]]),
    (1, 1, [[2, 3, 7], [2, 7, 6]]),
    (2, 0, [[0, 2, 6], [0, 6, 4]]),
    (2, 1, [[1, 5, 7], [1, 7, 3]]),
];

/// One cube per occupied cell in the [-1, 1]^3 frame. With `cull`, faces
/// shared by two occupied cells are dropped; vertices are never merged.
pub fn voxels_to_obj(grid: &VoxelGrid, cull: bool) -> String {
    let dims = grid.dims();
    let mut out = String::new();
    let mut base = 1usize;
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                if !grid.get(x, y, z) {
                    continue;
                }
                let (lo, hi) = grid.cell_bounds(x, y, z);
                for k in 0..8 {
                    let px = if k & 4 != 0 { hi[0] } else { lo[0] };
                    let py = if k & 2 != 0 { hi[1] } else { lo[1] };
                    let pz = if k & 1 != 0 { hi[2] } else { lo[2] };
                    let _ = writeln!(out, "v {px} {py} {pz}");
                }
                let cell = [x, y, z];
                for (axis, side, tris) in CUBE_FACES {
                    if cull {
                        let mut n = cell;
                        let inside = if side == 0 {
                            n[axis] > 0 && {
                                n[axis] -= 1;
                                true
                            }
                        } else {
                            n[axis] + 1 < dims[axis] && {
                                n[axis] += 1;
                                true
                            }
                        };
                        if inside && grid.get(n[0], n[1], n[2]) {
                            continue;
                        }
                    }
                    for t in tris {
                        let _ = writeln!(out, "f {} {} {}", base + t[0], base + t[1], base + t[2]);
                    }
                }
                base += 8;
            }
        }
    }
    out
}

/// Vertex-only OBJ.
pub fn points_to_obj(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for p in cloud.points() {
        let _ = writeln!(out, "v {} {} {}", p[0], p[1], p[2]);
    }
    out
}
