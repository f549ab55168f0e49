#![allow(dead_code)]

use std::path::Path;

use shapeblend_core::nets::Backend;
use shapeblend_core::shape::synth;
use shapeblend_core::train::TrainConfig;
use shapeblend_studio::{ingest, ops, IngestOptions, ShapeStore};

pub const POINTS: usize = 64;

/// Writes `count` synthetic meshes as `<dir>/<category>/<category><i>.off`.
pub fn write_meshes(dir: &Path, count: usize) {
    for (i, (cat, mesh)) in synth::dataset(count, 0).into_iter().enumerate() {
        let sub = dir.join(cat);
        std::fs::create_dir_all(&sub).unwrap();
        std::fs::write(sub.join(format!("{cat}{i}.off")), synth::to_off(&mesh)).unwrap();
    }
}

pub fn small_options() -> IngestOptions {
    IngestOptions { points: POINTS, ..IngestOptions::default() }
}

/// Store at `root` holding `count` synthetic shapes.
pub fn store_with_shapes(root: &Path, count: usize) -> ShapeStore {
    let meshes = root.with_extension("meshes");
    write_meshes(&meshes, count);
    let mut store = ShapeStore::init(root).unwrap();
    ingest(&mut store, &meshes, &small_options()).unwrap();
    store
}

/// Briefly pretrains checkpoint `name` on the store's train split.
pub fn quick_checkpoint(store: &ShapeStore, backend: Backend, name: &str, epochs: usize) {
    let cfg = TrainConfig { backend, epochs, batch_size: 4, checkpoint_every: 0, ..TrainConfig::default() };
    ops::pretrain_into(store, &cfg, name).unwrap();
}
