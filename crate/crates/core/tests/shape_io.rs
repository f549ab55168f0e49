use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapeblend_core::shape::synth::{self, Mat3};
use shapeblend_core::shape::*;

const N: usize = 30;

fn cell(c: [usize; 3]) -> ([f64; 3], [f64; 3]) {
    let h = 2.0 / N as f64;
    let lo = c.map(|i| -1.0 + i as f64 * h);
    (lo, lo.map(|v| v + h))
}

/// Cell-center containment or overlap of the cell with the box surface.
fn cube_oracle(c: [usize; 3], half: f64) -> bool {
    let (lo, hi) = cell(c);
    let center: Vec<f64> = (0..3).map(|a| 0.5 * (lo[a] + hi[a])).collect();
    let center_inside = center.iter().all(|v| v.abs() <= half);
    let touches = (0..3).all(|a| lo[a] <= half && hi[a] >= -half);
    let strictly_inside = (0..3).all(|a| lo[a] > -half && hi[a] < half);
    center_inside || (touches && !strictly_inside)
}

#[test]
fn solid_cube_matches_containment_oracle() {
    let grid = voxelize(&synth::cuboid([0.0; 3], [0.5; 3]), [N; 3], Fill::Solid).unwrap();
    let mut mismatches = 0;
    for x in 0..N {
        for y in 0..N {
            for z in 0..N {
                mismatches += (grid.get(x, y, z) != cube_oracle([x, y, z], 0.5)) as usize;
            }
        }
    }
    assert_eq!(mismatches, 0);
    assert_eq!(grid.count(), 4096);
}

fn transpose(r: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = r[j][i];
        }
    }
    t
}

fn mul(r: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

/// Separating-axis test between an oriented box and an axis-aligned cell.
fn obb_meets_cell(half: [f64; 3], rot: &Mat3, lo: [f64; 3], hi: [f64; 3]) -> bool {
    let c = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
    let e = [0, 1, 2].map(|a| 0.5 * (hi[a] - lo[a]));
    let axes_b = [0, 1, 2].map(|k| [rot[0][k], rot[1][k], rot[2][k]]);
    let axes_a = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut axes: Vec<[f64; 3]> = axes_a.to_vec();
    axes.extend_from_slice(&axes_b);
    for a in axes_a {
        for b in axes_b {
            let x = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
            if x.iter().map(|v| v * v).sum::<f64>() > 1e-18 {
                axes.push(x);
            }
        }
    }
    let dot = |u: [f64; 3], v: [f64; 3]| u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    axes.iter().all(|&l| {
        let ra: f64 = (0..3).map(|k| e[k] * dot(axes_a[k], l).abs()).sum();
        let rb: f64 = (0..3).map(|k| half[k] * dot(axes_b[k], l).abs()).sum();
        dot(c, l).abs() <= ra + rb
    })
}

fn rotated_box_agreement(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = synth::rotation(rng.random_range(0.0..6.0), rng.random_range(-1.5..1.5), rng.random_range(0.0..6.0));
    let half = [rng.random_range(0.2..0.5), rng.random_range(0.2..0.5), rng.random_range(0.2..0.5)];
    let grid = voxelize(&synth::oriented_box([0.0; 3], half, &rot), [N; 3], Fill::Solid).unwrap();
    let inv = transpose(&rot);
    let mut agree = 0;
    for x in 0..N {
        for y in 0..N {
            for z in 0..N {
                let (lo, hi) = cell([x, y, z]);
                let center = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
                let local = mul(&inv, center);
                let center_inside = (0..3).all(|a| local[a].abs() <= half[a]);
                let corners_inside = (0..8).all(|k| {
                    let p = [0, 1, 2].map(|a| if k >> a & 1 == 1 { hi[a] } else { lo[a] });
                    let q = mul(&inv, p);
                    (0..3).all(|a| q[a].abs() < half[a])
                });
                let oracle = center_inside || (obb_meets_cell(half, &rot, lo, hi) && !corners_inside);
                agree += (grid.get(x, y, z) == oracle) as usize;
            }
        }
    }
    agree as f64 / (N * N * N) as f64
}

#[test]
fn rotated_boxes_agree_with_oracle() {
    for seed in 0..5 {
        let a = rotated_box_agreement(seed);
        assert!(a >= 0.99, "seed {seed}: agreement {a}");
    }
}

fn unit_triangle() -> TriangleMesh {
    TriangleMesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap()
}

#[test]
fn sampler_centroid() {
    let cloud = sample_points(&unit_triangle(), 10_000, 11).unwrap();
    for (a, expected) in [1.0 / 3.0, 1.0 / 3.0, 0.0].into_iter().enumerate() {
        let mean = cloud.points().iter().map(|p| p[a] as f64).sum::<f64>() / cloud.len() as f64;
        assert!((mean - expected).abs() < 0.02, "axis {a}: {mean}");
    }
}

#[test]
fn sampler_area_weighting() {
    // Areas 0.5 and 1.5.
    let m = TriangleMesh::new(
        vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [2.0, 0.0, 1.0], [5.0, 0.0, 1.0], [2.0, 1.0, 1.0]],
        vec![[0, 1, 2], [3, 4, 5]],
    )
    .unwrap();
    let n = 10_000;
    let (_, faces) = sample_surface(&m, n, 3).unwrap();
    let second = faces.iter().filter(|&&f| f == 1).count() as f64;
    let (mean, sd) = (n as f64 * 0.75, (n as f64 * 0.75 * 0.25).sqrt());
    assert!((second - mean).abs() <= 3.0 * sd, "{second} vs {mean} ± {sd}");
}

#[test]
fn samples_lie_on_source_triangles() {
    let m = synth::category_shape("chair", 4).normalize().unwrap();
    let (cloud, faces) = sample_surface(&m, 2000, 9).unwrap();
    for (p, &f) in cloud.points().iter().zip(&faces) {
        let [a, b, c] = m.triangle(f);
        let p = p.map(|v| v as f64);
        let u = [0, 1, 2].map(|i| b[i] - a[i]);
        let v = [0, 1, 2].map(|i| c[i] - a[i]);
        let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        let dist = ((p[0] - a[0]) * n[0] + (p[1] - a[1]) * n[1] + (p[2] - a[2]) * n[2]).abs() / len;
        assert!(dist < 1e-6, "{dist}");
    }
    assert!(cloud.max_norm() <= 1.0 + 1e-6);
}

#[test]
fn surface_is_subset_of_solid() {
    for (i, cat) in synth::CATEGORIES.iter().enumerate() {
        let m = synth::category_shape(cat, i as u64).normalize().unwrap();
        let shell = voxelize(&m, [N; 3], Fill::Surface).unwrap();
        let solid = voxelize(&m, [N; 3], Fill::Solid).unwrap();
        assert!(shell.occupancy().iter().zip(solid.occupancy()).all(|(s, f)| s <= f), "{cat}");
    }
    let ball = synth::uv_sphere([0.0; 3], 0.8, 16, 32);
    let shell = voxelize(&ball, [N; 3], Fill::Surface).unwrap();
    let solid = voxelize(&ball, [N; 3], Fill::Solid).unwrap();
    assert!(solid.count() > 2 * shell.count());
}

#[test]
fn fixed_round_trips() {
    let zero = VoxelGrid::empty([30, 30, 30]).unwrap();
    let bytes = encode_voxels(&zero);
    assert_eq!(encode_voxels(&decode_voxels(&bytes).unwrap()), bytes);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cloud = PointCloud::new((0..2048).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap();
    let back = decode_points(&encode_points(&cloud)).unwrap();
    assert!(back.points().iter().zip(cloud.points()).all(|(a, b)| (0..3).all(|k| a[k].to_bits() == b[k].to_bits())));
    let mut bad = encode_points(&cloud);
    bad[..4].copy_from_slice(b"XXXX");
    assert!(matches!(decode(&bad), Err(ShapeError::BadMagic { .. })));
}

/// Malformed OFF fixtures; each must produce a typed error, never a panic.
const MALFORMED_OFF: &[&str] = &[
    "",
    "\n\n# only comments\n",
    "OF\n3 1 0\n",
    "ply\nformat ascii 1.0\n",
    "OFF\n",
    "OFF\n3 1\n0 0 0\n",
    "OFF\n-3 1 0\n",
    "OFF\n3 1 0 9\n",
    "OFF\n99999999999999999999 1 0\n",
    "OFF3 1 0\n0 0 0\n1 0 0\n",
    "OFF3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 3\n",
    "OFF\n3 1 0\n0 0\n1 0 0\n0 1 0\n3 0 1 2\n",
    "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 -1\n",
    "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n\n",
    "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\nextra\n",
    "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 inf\n3 0 1 2\n",
    "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n1 0\n",
    "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\nx 0 1 2\n",
    "OFF\n0 1 0\n3 0 1 2\n",
];

#[test]
fn malformed_off_corpus_yields_typed_errors() {
    for text in MALFORMED_OFF {
        assert!(parse_off(text.as_bytes()).is_err(), "{text:?} parsed");
    }
    let glued = synth::to_off(&synth::cuboid([0.0; 3], [1.0; 3])).replacen("OFF\n", "OFF", 1);
    let m = parse_off(glued.as_bytes()).unwrap();
    assert_eq!((m.vertices().len(), m.faces().len()), (8, 12));
}

fn random_mesh() -> impl Strategy<Value = TriangleMesh> {
    (3usize..12, 1usize..10, any::<u64>()).prop_map(|(nv, nf, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = rng.random_range(0.01..100.0);
        let offset: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-50.0..50.0));
        let vertices = (0..nv).map(|_| [0, 1, 2].map(|a| offset[a] + scale * rng.random_range(-1.0..1.0))).collect();
        let faces = (0..nf).map(|_| [0, 1, 2].map(|_| rng.random_range(0..nv))).collect();
        TriangleMesh::new(vertices, faces).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalize_is_idempotent(m in random_mesh()) {
        let once = m.normalize().unwrap();
        let twice = once.normalize().unwrap();
        for (a, b) in once.vertices().iter().zip(twice.vertices()) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-7);
            }
        }
        let r = once.vertices().iter().map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).fold(0.0, f64::max);
        prop_assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn voxel_round_trip(dx in 1usize..8, dy in 1usize..8, dz in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let occ = (0..dx * dy * dz).map(|_| rng.random_range(0..2u8)).collect();
        let g = VoxelGrid::new([dx, dy, dz], occ).unwrap();
        let bytes = encode_voxels(&g);
        prop_assert_eq!(&decode_voxels(&bytes).unwrap(), &g);
        prop_assert_eq!(encode_voxels(&decode_voxels(&bytes).unwrap()), bytes);
    }

    #[test]
    fn points_round_trip(flat in prop::collection::vec(-1e6f32..1e6, 0..300)) {
        let n = flat.len() / 3 * 3;
        let c = PointCloud::from_flat(&flat[..n]).unwrap();
        let bytes = encode_points(&c);
        prop_assert_eq!(encode_points(&decode_points(&bytes).unwrap()), bytes);
    }

    #[test]
    fn checkpoint_round_trip(shapes in prop::collection::vec(prop::collection::vec(1u32..5, 0..4), 0..6), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = shapes.into_iter().enumerate().map(|(i, dims)| {
            let n: u32 = dims.iter().product();
            NamedTensor { name: format!("net/é{i}"), data: (0..n).map(|_| rng.random::<f32>() - 0.5).collect(), dims }
        }).collect();
        let ck = Checkpoint::new(tensors).unwrap();
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64), magic in 0usize..4) {
        let mut b = bytes;
        let prefix: &[u8] = [&b"SBVX\x01"[..], b"SBPC\x01", b"SBCK\x01", b""][magic];
        b.splice(0..0, prefix.iter().copied());
        let _ = decode(&b);
    }

    #[test]
    fn truncation_is_reported(cut in 0usize..40) {
        let g = VoxelGrid::new([2, 2, 5], vec![1; 20]).unwrap();
        let bytes = encode_voxels(&g);
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(decode_voxels(&bytes[..cut]).is_err());
    }

    #[test]
    fn off_parser_never_panics(text in "(OFF)?[0-9 .\\-\n#a-z]{0,80}") {
        let _ = parse_off(text.as_bytes());
    }
}
