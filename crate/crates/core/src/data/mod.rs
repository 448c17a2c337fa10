//! Synthetic defect imagery, on-disk datasets and episodic sampling.
//!
//! Layout: `<root>/images/%05d.png` (8-bit grayscale), `<root>/masks/%05d.png`
//! (8-bit, pixel value = class id) and `<root>/meta.json`.

mod dataset;
mod mask;
mod sampler;
mod synth;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub use dataset::{load_dataset, Dataset, Record, Split};
pub use mask::SegMask;
pub use sampler::{normalize_pixels, rng_stream, sample_episode, Episode, EpisodeSpec, QuerySample, RngState, SupportSample};
pub use synth::{generate_sample, generate_synthetic_dataset, Sample, SynthConfig, DEFECT_NAMES};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub image_size: usize,
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub class_names: Vec<String>,
    pub class_frequencies: Vec<f64>,
    pub splits: Splits,
}

impl DatasetMeta {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 2, "num_classes must be >= 2, got {}", self.num_classes);
        ensure!(
            self.num_classes <= u8::MAX as usize + 1,
            "num_classes {} does not fit 8-bit masks",
            self.num_classes
        );
        if !self.class_frequencies.is_empty() {
            ensure!(
                self.class_frequencies.len() == self.num_classes,
                "class_frequencies has {} entries for {} classes",
                self.class_frequencies.len(),
                self.num_classes
            );
            let total: f64 = self.class_frequencies.iter().sum();
            ensure!((total - 1.0).abs() <= 1e-6, "class frequencies sum to {}", total);
        }
        Ok(())
    }
}

pub(crate) fn write_png(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let png_err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads an 8-bit single-channel PNG; returns `(height, width, pixels)`.
pub(crate) fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let png_err = |message: String| Error::Png {
        path: path.to_path_buf(),
        message,
    };
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(format!(
            "expected 8-bit grayscale, found {:?} at {:?} bits",
            info.color_type, info.bit_depth
        )));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; width * height];
    reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
    Ok((height, width, buf))
}
