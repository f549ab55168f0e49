use std::sync::OnceLock;

use shapeblend_core::grad::Real;
use shapeblend_core::nets::{Autoencoder, Backend, NetError, NetOutput, ShapeSample, Tap};
use shapeblend_core::shape::{self, synth, Fill, PointCloud, ShapePayload};
use shapeblend_core::train::{pretrain, TrainConfig};
use shapeblend_core::transfer::*;

const POINTS: usize = 128;

struct Fixture {
    provider: FrozenProvider<Real>,
    shapes: Vec<ShapeSample>,
}

/// Small PointNet briefly pretrained on four synthetic shapes.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let shapes: Vec<ShapeSample> = synth::dataset(4, 3)
            .into_iter()
            .enumerate()
            .map(|(i, (_, m))| {
                ShapeSample::Points(shape::sample_points(&m.normalize().unwrap(), POINTS, i as u64).unwrap())
            })
            .collect();
        let cfg = TrainConfig { epochs: 40, batch_size: 4, checkpoint_every: 0, ..Default::default() };
        let out = pretrain::<Real>(&shapes, &cfg, &mut ()).unwrap();
        Fixture { provider: FrozenProvider::new(out.net), shapes }
    })
}

fn cfg(alpha: f64, beta: f64, epochs: usize) -> TransferConfig {
    TransferConfig { alpha, beta, epochs, content: "0".into(), style: "1".into(), ..Default::default() }
}

fn run(c: &TransferConfig, content: usize, style: usize) -> TransferResult<Real> {
    let f = fixture();
    run_transfer(&f.provider, c, &f.shapes[content], &f.shapes[style], &mut |_| {}).unwrap()
}

fn losses(r: &TransferResult<Real>) -> Vec<(f64, f64, f64)> {
    r.report.history.iter().map(|h| (h.total, h.content, h.style)).collect()
}

#[test]
fn epoch_zero_loss_scales_with_weights() {
    let base = run(&cfg(0.3, 0.7, 1), 0, 1).report.history[0];
    for c in [2.0, 0.5] {
        let scaled = run(&cfg(0.3 * c, 0.7 * c, 1), 0, 1).report.history[0];
        assert_eq!(scaled.total, c * base.total);
        assert_eq!((scaled.content, scaled.style), (base.content, base.style));
    }
    let scaled = run(&cfg(0.9, 2.1, 1), 0, 1).report.history[0];
    assert!((scaled.total - 3.0 * base.total).abs() <= 1e-12 * base.total);
}

#[test]
fn runs_are_deterministic_and_leave_the_provider_alone() {
    let f = fixture();
    let before = shape::encode_checkpoint(&f.provider.net().to_checkpoint());
    let c = cfg(0.5, 0.5, 25);
    let a = run(&c, 0, 1);
    let b = run(&c, 0, 1);
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(shape::encode(&a.payload()), shape::encode(&b.payload()));
    assert_eq!(a.report.transform_checksum_final, b.report.transform_checksum_final);
    assert_eq!(a.report.final_distances, b.report.final_distances);

    let r = &a.report;
    assert_eq!(r.history.len(), 25);
    assert!(r.history.iter().enumerate().all(|(i, h)| h.epoch == i && h.total.is_finite()));
    assert_eq!(r.provider_checksum_before, r.provider_checksum_after);
    assert_eq!(r.provider_checksum_before, f.provider.initial_checksum());
    assert_eq!(r.transform_checksum_initial, f.provider.initial_checksum());
    assert_ne!(r.transform_checksum_final, r.transform_checksum_initial);
    assert_eq!(shape::encode_checkpoint(&f.provider.net().to_checkpoint()), before);
    assert_eq!(r.config.content_taps, vec![Tap::PnL1]);
    assert_eq!(r.config.style_taps, vec![Tap::PnBottleneck]);
}

#[test]
fn content_endpoint_converges() {
    let r = run(&cfg(1.0, 0.0, 150), 0, 1);
    let e0 = r.report.history[0].content;
    assert!(e0 > 0.0);
    assert!(r.report.final_distances.content <= 0.1 * e0, "{} vs {e0}", r.report.final_distances.content);
    assert!(r.report.final_distances.total <= 0.5 * r.report.history[0].total);
}

#[test]
fn sweep_orders_endpoints_and_matches_standalone_runs() {
    let f = fixture();
    let base = cfg(0.5, 0.5, 60);
    let mut seen = Vec::new();
    let results =
        sweep_ratio(&f.provider, &base, &[0.0, 1.0], &f.shapes[0], &f.shapes[1], &mut |i, r| seen.push((i, r.epoch)))
            .unwrap();
    assert_eq!(seen.len(), 120);
    assert!(seen[..60].iter().all(|&(i, _)| i == 0) && seen[60..].iter().all(|&(i, _)| i == 1));
    let (style_only, content_only) = (&results[0], &results[1]);
    assert_eq!((content_only.report.config.alpha, content_only.report.config.beta), (1.0, 0.0));
    assert!(content_only.report.final_distances.content < style_only.report.final_distances.content);
    assert!(style_only.report.final_distances.style < content_only.report.final_distances.style);
    for (r, lambda) in results.iter().zip([0.0, 1.0]) {
        let alone = run(&base.with_ratio(lambda), 0, 1);
        assert_eq!(losses(r), losses(&alone));
        assert_eq!(shape::encode(&r.payload()), shape::encode(&alone.payload()));
    }
    assert!(matches!(
        sweep_ratio(&f.provider, &base, &[], &f.shapes[0], &f.shapes[1], &mut |_, _| {}),
        Err(TransferError::EmptySweep)
    ));
}

#[test]
fn same_shape_pair_improves_on_plain_reconstruction() {
    let r = run(&cfg(0.5, 0.5, 60), 2, 2);
    let plain = r.report.history[0].total;
    assert!(r.report.final_distances.total <= plain, "{} > {plain}", r.report.final_distances.total);
}

#[test]
fn extraction_is_pure_and_permutation_invariant() {
    let f = fixture();
    let before = f.provider.checksum();
    let taps = [Tap::PnL1, Tap::PnBottleneck];
    let a = extract_features(&f.provider, &f.shapes[0], &taps).unwrap();
    let b = extract_features(&f.provider, &f.shapes[0], &taps).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.tap, y.tap);
        assert_eq!(x.tensor.data(), y.tensor.data());
    }
    assert_eq!(f.provider.checksum(), before);

    let ShapeSample::Points(cloud) = &f.shapes[0] else { unreachable!() };
    let mut pts = cloud.points().to_vec();
    pts.reverse();
    pts.swap(3, 70);
    let permuted = ShapeSample::Points(PointCloud::new(pts).unwrap());
    let p = extract_features(&f.provider, &permuted, &[Tap::PnBottleneck]).unwrap();
    assert_eq!(p[0].tensor.data(), a[1].tensor.data());
    assert!(matches!(
        extract_features(&f.provider, &f.shapes[0], &[Tap::VslGlobal]),
        Err(TransferError::Net(NetError::TapBackend { .. }))
    ));
}

#[test]
fn failures_are_typed() {
    let f = fixture();
    let content = &f.shapes[0];
    let vsl = TransferConfig { backend: Backend::Vsl, ..cfg(1.0, 0.0, 1) };
    assert!(matches!(
        run_transfer(&f.provider, &vsl, content, content, &mut |_| {}),
        Err(TransferError::BackendMismatch { .. })
    ));
    assert!(matches!(
        run_transfer(&f.provider, &cfg(0.0, 0.0, 1), content, content, &mut |_| {}),
        Err(TransferError::InvalidConfig(_))
    ));
    let huge = ShapeSample::Points(PointCloud::new(vec![[1e30, -1e30, 1e30]; POINTS]).unwrap());
    assert!(matches!(
        run_transfer(&f.provider, &cfg(1.0, 0.0, 3), &huge, content, &mut |_| {}),
        Err(TransferError::NonFinite { epoch: 0 })
    ));
    let short = ShapeSample::Points(PointCloud::new(vec![[0.0; 3]; 7]).unwrap());
    assert!(matches!(
        run_transfer(&f.provider, &cfg(1.0, 0.0, 1), &short, content, &mut |_| {}),
        Err(TransferError::Net(NetError::WrongPointCount { .. }))
    ));
}

#[test]
fn point_result_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("blend.sbpc");
    let r = run(&cfg(0.5, 0.5, 3), 0, 1);
    r.write(&out).unwrap();
    let stored = read_result(&out).unwrap();
    assert_eq!(stored.report, r.report);
    assert_eq!(stored.payload, r.payload());
    assert!(stored.probabilities.is_none());
    assert!(sidecar_path(&out).ends_with("blend.json"));
    let NetOutput::Points(c) = &r.output else { panic!("expected points") };
    assert_eq!(c.len(), POINTS);
}

#[test]
fn voxel_result_keeps_probabilities() {
    let grids: Vec<ShapeSample> = synth::dataset(2, 5)
        .into_iter()
        .map(|(_, m)| ShapeSample::Voxels(shape::voxelize(&m.normalize().unwrap(), [30; 3], Fill::Solid).unwrap()))
        .collect();
    let provider = FrozenProvider::new(Autoencoder::<Real>::new(Backend::Vsl, 0, 4));
    let c = TransferConfig { backend: Backend::Vsl, ..cfg(0.5, 0.5, 2) };
    let r = run_transfer(&provider, &c, &grids[0], &grids[1], &mut |_| {}).unwrap();
    assert_eq!(r.report.config.content_taps, vec![Tap::VslGlobal]);
    assert_eq!(r.report.provider_checksum_before, r.report.provider_checksum_after);
    let NetOutput::Probabilities(p) = &r.output else { panic!("expected probabilities") };
    assert!(p.values().iter().all(|&v| v > 0.0 && v < 1.0));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("blend.sbvx");
    r.write(&out).unwrap();
    let stored = read_result(&out).unwrap();
    assert_eq!(stored.probabilities.as_ref(), Some(p));
    assert_eq!(stored.payload, ShapePayload::Voxels(p.binarize(0.5)));
    assert!(probability_path(&out).is_file());
}
