use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::mask::SegMask;
use super::{read_png, DatasetMeta};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Contract(format!("unknown split `{other}` (train|val|test|all)"))),
        }
    }
}

/// One image with its mask and per-class pixel counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: usize,
    pub pixels: Vec<u8>,
    pub mask: SegMask,
    pub class_counts: Vec<usize>,
}

/// Loaded dataset with an inverted index `class → [(record position, pixel count)]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    records: Vec<Arc<Record>>,
    index: BTreeMap<usize, Vec<(usize, usize)>>,
}

impl Dataset {
    pub fn from_records(root: PathBuf, meta: DatasetMeta, records: Vec<Arc<Record>>) -> Self {
        let mut index: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for (pos, r) in records.iter().enumerate() {
            for (class, &n) in r.class_counts.iter().enumerate() {
                if n > 0 {
                    index.entry(class).or_default().push((pos, n));
                }
            }
        }
        Dataset {
            root,
            meta,
            records,
            index,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Arc<Record>] {
        &self.records
    }

    pub fn record(&self, pos: usize) -> &Record {
        &self.records[pos]
    }

    /// Images containing `class`, as `(record position, pixel count)`.
    pub fn images_with(&self, class: usize) -> &[(usize, usize)] {
        self.index.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn indexed_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.index.keys().copied()
    }

    /// Restriction to one split of `meta.json`. Episodes drawn from the
    /// result never touch images of other splits.
    pub fn split(&self, split: Split) -> Dataset {
        let ids: &[usize] = match split {
            Split::All => return self.clone(),
            Split::Train => &self.meta.splits.train,
            Split::Val => &self.meta.splits.val,
            Split::Test => &self.meta.splits.test,
        };
        let keep: std::collections::BTreeSet<usize> = ids.iter().copied().collect();
        let records = self.records.iter().filter(|r| keep.contains(&r.id)).cloned().collect();
        Dataset::from_records(self.root.clone(), self.meta.clone(), records)
    }
}

fn png_ids(dir: &Path) -> Result<Vec<usize>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let ids = png_ids(&root.join("images"))?;
    if ids.is_empty() {
        return Err(Error::NoSamples(root.to_path_buf()));
    }
    let meta_path = root.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text)?;
    meta.validate()?;
    let mut records = Vec::with_capacity(ids.len());
    for id in ids {
        let name = format!("{id:05}.png");
        let image_path = root.join("images").join(&name);
        let mask_path = root.join("masks").join(&name);
        if !mask_path.exists() {
            return Err(Error::Dataset(format!("missing mask for {}", image_path.display())));
        }
        let (h, w, pixels) = read_png(&image_path)?;
        let (mh, mw, labels) = read_png(&mask_path)?;
        if (h, w) != (mh, mw) || h != meta.image_size || w != meta.image_size {
            return Err(Error::Dataset(format!(
                "size mismatch for {name}: image {h}x{w}, mask {mh}x{mw}, meta {0}x{0}",
                meta.image_size
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= meta.num_classes) {
            return Err(Error::LabelOutOfRange {
                path: mask_path,
                label: bad,
                num_classes: meta.num_classes,
            });
        }
        let mask = SegMask::new(mh, mw, labels)?;
        let class_counts = mask.histogram(meta.num_classes);
        records.push(Arc::new(Record {
            id,
            pixels,
            mask,
            class_counts,
        }));
    }
    Ok(Dataset::from_records(root.to_path_buf(), meta, records))
}
