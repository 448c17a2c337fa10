use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Dense `H × W` grid of class labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        ensure!(
            labels.len() == height * width,
            "mask of {}x{} needs {} labels, got {}",
            height,
            width,
            height * width,
            labels.len()
        );
        Ok(SegMask { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        SegMask {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let labels = (0..height * width).map(|i| f(i / width, i % width)).collect();
        SegMask { height, width, labels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l as usize == class).count()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.labels.iter().any(|&l| l as usize == class)
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Pixel counts per label for labels `< num_classes`.
    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &l in &self.labels {
            if let Some(slot) = h.get_mut(l as usize) {
                *slot += 1;
            }
        }
        h
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        let max = self.max_label() as usize;
        ensure!(
            self.is_empty() || max < num_classes,
            "mask label {} outside label space 0..{}",
            max,
            num_classes
        );
        Ok(())
    }

    /// Nearest-neighbor resampling; output pixel `(i, j)` reads source
    /// `(⌊i·H/h⌋, ⌊j·W/w⌋)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> SegMask {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        SegMask::from_fn(height, width, |i, j| {
            self.get(i * self.height / height, j * self.width / width)
        })
    }

    /// Maps every label through `map`; labels without an entry become 0.
    pub fn relabel(&self, map: &[(u8, u8)]) -> SegMask {
        let mut table = [0u8; 256];
        for &(from, to) in map {
            table[from as usize] = to;
        }
        SegMask {
            height: self.height,
            width: self.width,
            labels: self.labels.iter().map(|&l| table[l as usize]).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_downsample_picks_top_left_of_each_cell() {
        let m = SegMask::from_fn(4, 4, |i, j| (i * 4 + j) as u8);
        let d = m.resize_nearest(2, 2);
        assert_eq!(d.labels(), &[0, 2, 8, 10]);
    }

    #[test]
    fn relabel_sends_unmapped_to_background() {
        let m = SegMask::new(1, 4, vec![0, 3, 5, 7]).unwrap();
        assert_eq!(m.relabel(&[(3, 1), (7, 2)]).labels(), &[0, 1, 0, 2]);
    }

    #[test]
    fn histogram_and_label_check() {
        let m = SegMask::new(2, 2, vec![0, 1, 1, 2]).unwrap();
        assert_eq!(m.histogram(3), vec![1, 2, 1]);
        assert!(m.check_labels(3).is_ok());
        assert!(m.check_labels(2).is_err());
        assert!(SegMask::new(2, 2, vec![0; 3]).is_err());
    }
}
