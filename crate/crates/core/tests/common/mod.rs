//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod gradients;
pub mod oracle;
pub mod trends;

use std::path::Path;
use std::sync::OnceLock;

use protoseg::data::{generate_synthetic_dataset, load_dataset, Dataset, SynthConfig};
use tempfile::TempDir;

/// Writes and loads a synthetic dataset under `root`.
pub fn synth_dataset(root: &Path, count: usize, seed: u64) -> Dataset {
    let cfg = SynthConfig {
        count,
        seed,
        ..SynthConfig::default()
    };
    generate_synthetic_dataset(root, &cfg).expect("synthetic dataset");
    load_dataset(root).expect("load synthetic dataset")
}

/// A 1000-image, 32×32 dataset shared by every test in one binary.
pub fn shared_dataset() -> &'static Dataset {
    static CELL: OnceLock<(TempDir, Dataset)> = OnceLock::new();
    &CELL
        .get_or_init(|| {
            let dir = TempDir::new().expect("tempdir");
            let ds = synth_dataset(&dir.path().join("synth"), 1000, 42);
            (dir, ds)
        })
        .1
}
