use shapeblend_core::grad::Real;
use shapeblend_core::nets::{Autoencoder, Backend, NetError, ShapeSample};
use shapeblend_core::shape::{self, synth, Fill, PointCloud, ShapePayload};
use shapeblend_core::train::*;

fn samples(backend: Backend, count: usize, points: usize) -> Vec<ShapeSample> {
    synth::dataset(count, 0)
        .into_iter()
        .enumerate()
        .map(|(i, (_, mesh))| {
            let m = mesh.normalize().unwrap();
            match backend {
                Backend::PointNet => ShapeSample::Points(shape::sample_points(&m, points, i as u64).unwrap()),
                Backend::Vsl => ShapeSample::Voxels(shape::voxelize(&m, [30; 3], Fill::Solid).unwrap()),
            }
        })
        .collect()
}

fn median(v: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = v.collect();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn tail_not_worse(h: &LossHistory) -> bool {
    let k = (h.len() / 10).max(1);
    let first = median(h.records[..k].iter().map(|r| r.total));
    let last = median(h.records[h.len() - k..].iter().map(|r| r.total));
    last <= first
}

fn labelled(data: &[ShapeSample]) -> Vec<(String, ShapeSample)> {
    data.iter().enumerate().map(|(i, s)| (i.to_string(), s.clone())).collect()
}

#[test]
fn small_pointnet_overfits() {
    let data = samples(Backend::PointNet, 8, 256);
    let cfg = TrainConfig { epochs: 300, checkpoint_every: 0, seed: 1, ..Default::default() };
    let out = pretrain::<Real>(&data, &cfg, &mut ()).unwrap();
    let h = &out.history;
    assert_eq!(h.len(), 300);
    assert!(h.records.iter().enumerate().all(|(i, r)| r.epoch == i && r.total.is_finite()));
    assert!(out.final_metrics.mean_recon <= 0.1 * h.records[0].recon, "{:?}", out.final_metrics);
    assert!(tail_not_worse(h));

    // Reloaded weights reproduce the final metrics.
    let bytes = shape::encode_checkpoint(&out.net.to_checkpoint());
    let net = Autoencoder::<Real>::from_checkpoint(&shape::decode_checkpoint(&bytes).unwrap()).unwrap();
    let m = evaluate(&net, &labelled(&data)).unwrap();
    assert!((m.mean_recon - out.final_metrics.mean_recon).abs() <= 1e-6);
}

#[test]
fn small_vsl_trains_and_evaluates_consistently() {
    let data = samples(Backend::Vsl, 2, 0);
    let cfg = TrainConfig { backend: Backend::Vsl, epochs: 40, checkpoint_every: 0, ..Default::default() };
    let out = pretrain::<Real>(&data, &cfg, &mut ()).unwrap();
    assert!(tail_not_worse(&out.history));
    assert!(out.history.records.iter().all(|r| r.kl.is_finite() && r.kl >= 0.0));
    let m = evaluate(&out.net, &labelled(&data)).unwrap();
    assert_eq!(m, out.final_metrics);
    assert!(m.shapes.iter().all(|s| s.iou.is_some()));
}

#[test]
fn training_is_deterministic() {
    for (backend, count, epochs) in [(Backend::PointNet, 5, 12), (Backend::Vsl, 2, 3)] {
        let data = samples(backend, count, 64);
        let cfg = TrainConfig { backend, epochs, batch_size: 2, checkpoint_every: 0, seed: 9, ..Default::default() };
        let a = pretrain::<Real>(&data, &cfg, &mut ()).unwrap();
        let b = pretrain::<Real>(&data, &cfg, &mut ()).unwrap();
        assert_eq!(shape::encode_checkpoint(&a.net.to_checkpoint()), shape::encode_checkpoint(&b.net.to_checkpoint()));
        let strip = |h: &LossHistory| h.records.iter().map(|r| (r.total, r.recon, r.kl)).collect::<Vec<_>>();
        assert_eq!(strip(&a.history), strip(&b.history));
        let c = pretrain::<Real>(&data, &TrainConfig { seed: 10, ..cfg }, &mut ()).unwrap();
        assert_ne!(a.net.checksum(), c.net.checksum());
    }
}

struct Recorder {
    epochs: Vec<usize>,
    checkpoints: Vec<usize>,
}

impl TrainObserver<Real> for Recorder {
    fn on_epoch(&mut self, r: &EpochRecord) -> Result<(), TrainError> {
        self.epochs.push(r.epoch);
        Ok(())
    }

    fn on_checkpoint(&mut self, epoch: usize, _net: &Autoencoder<Real>) -> Result<(), TrainError> {
        self.checkpoints.push(epoch);
        Ok(())
    }
}

#[test]
fn observer_sees_epochs_and_checkpoints() {
    let data = samples(Backend::PointNet, 2, 32);
    let cfg = TrainConfig { epochs: 7, checkpoint_every: 3, ..Default::default() };
    let mut rec = Recorder { epochs: vec![], checkpoints: vec![] };
    pretrain::<Real>(&data, &cfg, &mut rec).unwrap();
    assert_eq!(rec.epochs, (0..7).collect::<Vec<_>>());
    assert_eq!(rec.checkpoints, vec![3, 6, 7]);
}

#[test]
fn failures_are_typed() {
    let cfg = TrainConfig { epochs: 2, checkpoint_every: 0, ..Default::default() };
    assert!(matches!(pretrain::<Real>(&[], &cfg, &mut ()), Err(TrainError::EmptyDataset)));

    let huge = PointCloud::new(vec![[1e30, -1e30, 1e30]; 16]).unwrap();
    match pretrain::<Real>(&[ShapeSample::Points(huge)], &cfg, &mut ()) {
        Err(TrainError::NonFinite { epoch: 0, .. }) => {}
        other => panic!("expected non-finite abort, got {:?}", other.err()),
    }

    let voxels = samples(Backend::Vsl, 1, 0);
    assert!(matches!(
        pretrain::<Real>(&voxels, &cfg, &mut ()),
        Err(TrainError::Net(NetError::WrongRepresentation { .. }))
    ));
    let net = Autoencoder::<Real>::new(Backend::Vsl, 0, 0);
    assert!(matches!(evaluate(&net, &[]), Err(TrainError::EmptySplit(_))));
    let bad = TrainConfig { epochs: 0, ..Default::default() };
    assert!(matches!(pretrain::<Real>(&voxels, &bad, &mut ()), Err(TrainError::InvalidConfig(_))));
}

#[test]
fn manifest_loads_samples_from_store() {
    let root = tempfile::tempdir().unwrap();
    std::fs::create_dir(root.path().join("shapes")).unwrap();
    let mesh = synth::cuboid([0.0; 3], [0.5; 3]);
    let grid = shape::voxelize(&mesh, [30; 3], Fill::Solid).unwrap();
    let cloud = shape::sample_points(&mesh, 64, 0).unwrap();
    shape::write_shape(&root.path().join("shapes/a.sbvx"), &ShapePayload::Voxels(grid.clone())).unwrap();
    shape::write_shape(&root.path().join("shapes/a.sbpc"), &ShapePayload::Points(cloud.clone())).unwrap();
    let entry = ManifestEntry {
        id: "box-a".into(),
        category: "box".into(),
        split: Split::Train,
        voxels: "shapes/a.sbvx".into(),
        points: "shapes/a.sbpc".into(),
        mesh: "meshes/a.off".into(),
    };
    let m = DatasetManifest::new(vec![entry.clone()]).unwrap();
    m.save(root.path()).unwrap();
    let loaded = DatasetManifest::load(root.path()).unwrap();
    assert_eq!(loaded, m);
    assert_eq!(loaded.load_split(root.path(), Split::Train, Backend::Vsl).unwrap()[0].1, ShapeSample::Voxels(grid));
    assert_eq!(
        loaded.load_split(root.path(), Split::Train, Backend::PointNet).unwrap()[0].1,
        ShapeSample::Points(cloud)
    );
    assert!(loaded.load_split(root.path(), Split::Eval, Backend::Vsl).unwrap().is_empty());

    std::fs::remove_file(root.path().join("shapes/a.sbpc")).unwrap();
    assert!(matches!(DatasetManifest::load(root.path()), Err(TrainError::MissingFile { .. })));
}
