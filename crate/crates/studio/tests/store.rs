mod common;

use std::collections::BTreeMap;
use std::path::Path;

use shapeblend_core::nets::{Backend, ShapeSample};
use shapeblend_core::shape::{self, synth, ShapePayload};
use shapeblend_core::train::Split;
use shapeblend_studio::store::SHAPES_DIR;
use shapeblend_studio::{ingest, IngestOptions, Representation, ShapeStore, StudioError};

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    walkdir::WalkDir::new(dir)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(dir).unwrap().display().to_string(), std::fs::read(e.path()).unwrap()))
        .collect()
}

fn write_input(dir: &Path) {
    let meshes = synth::dataset(2, 5);
    std::fs::create_dir_all(dir.join("chair")).unwrap();
    std::fs::write(dir.join("chair/a.off"), synth::to_off(&meshes[0].1)).unwrap();
    std::fs::write(dir.join("b.off"), synth::to_off(&meshes[1].1)).unwrap();
    std::fs::write(dir.join("broken.off"), "OFF\n3 1 0\n0 0 0\n1 0 0\n").unwrap();
    std::fs::write(dir.join("notes.txt"), "not a mesh").unwrap();
}

#[test]
fn ingest_adds_valid_meshes_and_skips_corrupt_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_input(&input);
    let mut store = ShapeStore::init(&tmp.path().join("store")).unwrap();
    let summary = ingest(&mut store, &input, &common::small_options()).unwrap();

    assert_eq!(summary.added, vec!["uncategorized-b", "chair-a"]);
    assert_eq!(summary.skipped.len(), 1);
    assert!(summary.skipped[0].0.ends_with("broken.off"));
    assert_eq!(store.shapes().len(), 2);
    assert_eq!(std::fs::read_dir(store.root().join(SHAPES_DIR)).unwrap().count(), 4);
    assert_eq!(store.entry("chair-a").unwrap().category, "chair");

    match store.load_sample("chair-a", Backend::PointNet).unwrap() {
        ShapeSample::Points(c) => assert_eq!(c.len(), common::POINTS),
        other => panic!("expected points, got {:?}", other.kind()),
    }
    match shape::decode(&store.payload_bytes("chair-a", Representation::Voxels).unwrap()).unwrap() {
        ShapePayload::Voxels(g) => assert_eq!(g.dims(), [30, 30, 30]),
        _ => panic!("expected voxels"),
    }
    let reopened = ShapeStore::open(store.root()).unwrap();
    assert_eq!(reopened.shapes(), store.shapes());
}

#[test]
fn reingesting_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_input(&input);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for root in [&a, &b] {
        let mut store = ShapeStore::init(root).unwrap();
        ingest(&mut store, &input, &common::small_options()).unwrap();
    }
    let mut store = ShapeStore::open(&a).unwrap();
    ingest(&mut store, &input, &common::small_options()).unwrap();
    assert_eq!(store.shapes().len(), 2);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn eval_every_assigns_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    common::write_meshes(&input, 6);
    let mut store = ShapeStore::init(&tmp.path().join("store")).unwrap();
    ingest(&mut store, &input, &IngestOptions { eval_every: 3, ..common::small_options() }).unwrap();
    assert_eq!(store.split_ids(Split::Eval).len(), 2);
    assert_eq!(store.split_ids(Split::Train).len(), 4);
}

#[test]
fn ingest_failures_are_typed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut store = ShapeStore::init(&tmp.path().join("store")).unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert!(matches!(ingest(&mut store, &empty, &IngestOptions::default()), Err(StudioError::NoInputs(_))));
    assert!(matches!(
        ingest(&mut store, &tmp.path().join("missing"), &IngestOptions::default()),
        Err(StudioError::Read { .. })
    ));
    std::fs::write(empty.join("bad.off"), "OFF\nnonsense").unwrap();
    assert!(matches!(
        ingest(&mut store, &empty, &IngestOptions::default()),
        Err(StudioError::NothingIngested { skipped: 1, .. })
    ));
    assert!(store.shapes().is_empty());
}

#[test]
fn open_rejects_tampered_payloads() {
    let tmp = tempfile::tempdir().unwrap();
    let store = common::store_with_shapes(&tmp.path().join("store"), 2);
    let path = store.payload_path(&store.shapes()[0].id, Representation::Points).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(ShapeStore::open(store.root()), Err(StudioError::Audit(_))));
    assert!(matches!(ShapeStore::open(&tmp.path().join("nowhere")), Err(StudioError::Audit(_))));
}

#[test]
fn unknown_ids_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let store = common::store_with_shapes(&tmp.path().join("store"), 2);
    assert!(matches!(store.entry("nope"), Err(StudioError::UnknownShape(_))));
    assert!(matches!(store.load_checkpoint("nope"), Err(StudioError::UnknownCheckpoint(_))));
    assert!(matches!(
        store.checkpoint_meta("../x"),
        Err(StudioError::InvalidId(_) | StudioError::UnknownCheckpoint(_))
    ));
}

#[test]
fn checkpoints_are_listed_with_metadata() {
    let tmp = tempfile::tempdir().unwrap();
    let store = common::store_with_shapes(&tmp.path().join("store"), 4);
    let cfg =
        shapeblend_core::train::TrainConfig { epochs: 6, batch_size: 4, checkpoint_every: 3, ..Default::default() };
    let meta = shapeblend_studio::ops::pretrain_into(&store, &cfg, "pn").unwrap();
    assert_eq!(meta.backend, Backend::PointNet);
    assert_eq!(meta.points, Some(common::POINTS));
    let ids: Vec<String> = store.checkpoints().unwrap().into_iter().map(|m| m.id).collect();
    assert_eq!(ids, vec!["pn", "pn-e3"]);
    assert!(store.root().join("checkpoints/pn.history.csv").is_file());
    let metrics = shapeblend_studio::ops::evaluate_checkpoint(&store, "pn", Split::Train).unwrap();
    assert_eq!(metrics.shapes.len(), 4);
    assert!(matches!(
        shapeblend_studio::ops::evaluate_checkpoint(&store, "pn", Split::Eval),
        Err(StudioError::Train(_))
    ));
}
