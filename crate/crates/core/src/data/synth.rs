//! Deterministic synthetic stand-in for sewer-pipe defect imagery.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::mask::SegMask;
use super::{write_png, DatasetMeta, Splits};
use crate::error::{ensure, Error, Result};

/// Defect generators, indexed by class id − 1.
pub const DEFECT_NAMES: [&str; 8] = [
    "crack",
    "hole",
    "root",
    "deposit",
    "joint_offset",
    "fracture",
    "water",
    "encrustation",
];

/// Upper bound on foreground coverage of a single image.
const MAX_FOREGROUND: f64 = 0.35;
const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub count: usize,
    pub seed: u64,
    /// Probability of painting a second defect class into an image.
    pub extra_class_prob: f64,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 9,
            image_size: 32,
            count: 200,
            seed: 42,
            extra_class_prob: 0.35,
            noise_sigma: 6.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (2..=DEFECT_NAMES.len() + 1).contains(&self.num_classes),
            "num_classes must be in 2..=9, got {}",
            self.num_classes
        );
        ensure!(
            self.image_size >= 16 && self.image_size.is_multiple_of(16),
            "image_size must be a multiple of 16, got {}",
            self.image_size
        );
        ensure!(
            self.count >= self.num_classes * 10,
            "count {} too small: need at least {} images for {} classes",
            self.count,
            self.num_classes * 10,
            self.num_classes
        );
        ensure!((0.0..=1.0).contains(&self.extra_class_prob), "extra_class_prob must lie in [0, 1]");
        ensure!(self.noise_sigma >= 0.0, "noise_sigma must be >= 0");
        Ok(())
    }
}

/// Grayscale image plus its label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pixels: Vec<u8>,
    pub mask: SegMask,
}

struct Canvas {
    size: usize,
    labels: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, label: u8, inside: impl Fn(f64, f64) -> bool) {
        for i in 0..self.size {
            for j in 0..self.size {
                if inside(i as f64 + 0.5, j as f64 + 0.5) {
                    self.labels[i * self.size + j] = label;
                }
            }
        }
    }

    fn stroke(&mut self, label: u8, points: &[(f64, f64)], radius: f64) {
        let segments: Vec<_> = points.windows(2).map(|w| (w[0], w[1])).collect();
        self.paint(label, |y, x| segments.iter().any(|&(a, b)| segment_distance((y, x), a, b) <= radius));
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    };
    let (cy, cx) = (a.0 + t * dy, a.1 + t * dx);
    ((p.0 - cy).powi(2) + (p.1 - cx).powi(2)).sqrt()
}

fn point_in_polygon(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (yi, xi) = poly[i];
        let (yj, xj) = poly[j];
        if (yi > p.0) != (yj > p.0) && p.1 < (xj - xi) * (p.0 - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn random_walk(rng: &mut impl Rng, start: (f64, f64), heading: f64, steps: usize, step: f64, wiggle: f64) -> Vec<(f64, f64)> {
    let mut pts = vec![start];
    let mut angle = heading;
    for _ in 0..steps {
        angle += rng.random_range(-wiggle..wiggle);
        let (y, x) = *pts.last().unwrap();
        pts.push((y + step * angle.sin(), x + step * angle.cos()));
    }
    pts
}

fn draw_defect(canvas: &mut Canvas, class: u8, rng: &mut impl Rng) {
    let s = canvas.size as f64;
    let u = s / 32.0;
    let center = |rng: &mut dyn rand::RngCore| (rng.random_range(0.3 * s..0.7 * s), rng.random_range(0.3 * s..0.7 * s));
    match class {
        // crack: thick meandering polyline crossing the image
        1 => {
            let start = (rng.random_range(0.1 * s..0.9 * s), 0.0);
            let heading = rng.random_range(-0.5..0.5);
            let pts = random_walk(rng, start, heading, 10, s / 9.0, 0.6);
            canvas.stroke(class, &pts, 1.1 * u);
        }
        // hole: rotated ellipse
        2 => {
            let (cy, cx) = center(rng);
            let (a, b) = (rng.random_range(4.5 * u..7.0 * u), rng.random_range(3.0 * u..5.0 * u));
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (sn, cs) = theta.sin_cos();
            canvas.paint(class, |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                let (p, q) = (dx * cs + dy * sn, -dx * sn + dy * cs);
                (p / a).powi(2) + (q / b).powi(2) <= 1.0
            });
        }
        // root: trunk with side branches
        3 => {
            let start = (0.0, rng.random_range(0.2 * s..0.8 * s));
            let trunk = random_walk(rng, start, std::f64::consts::FRAC_PI_2, 8, s / 10.0, 0.4);
            canvas.stroke(class, &trunk, 1.0 * u);
            for _ in 0..3 {
                let from = trunk[rng.random_range(2..trunk.len())];
                let heading = if rng.random_bool(0.5) { 0.3 } else { std::f64::consts::PI - 0.3 };
                let branch = random_walk(rng, from, heading, 4, s / 12.0, 0.7);
                canvas.stroke(class, &branch, 0.8 * u);
            }
        }
        // deposit: union of overlapping discs
        4 => {
            let (cy, cx) = center(rng);
            let discs: Vec<(f64, f64, f64)> = (0..4)
                .map(|_| {
                    (
                        cy + rng.random_range(-3.0 * u..3.0 * u),
                        cx + rng.random_range(-3.0 * u..3.0 * u),
                        rng.random_range(2.5 * u..4.0 * u),
                    )
                })
                .collect();
            canvas.paint(class, |y, x| discs.iter().any(|&(a, b, r)| (y - a).powi(2) + (x - b).powi(2) <= r * r));
        }
        // joint offset: straight band across the image
        5 => {
            let pos = rng.random_range(0.2 * s..0.8 * s);
            let width = rng.random_range(2.5 * u..4.0 * u);
            let slope = rng.random_range(-0.15..0.15);
            let vertical = rng.random_bool(0.5);
            canvas.paint(class, |y, x| {
                let (along, across) = if vertical { (y, x) } else { (x, y) };
                (across - pos - slope * along).abs() <= width / 2.0
            });
        }
        // fracture: jagged star polygon
        6 => {
            let (cy, cx) = center(rng);
            let n = 12;
            let poly: Vec<(f64, f64)> = (0..n)
                .map(|k| {
                    let angle = k as f64 / n as f64 * std::f64::consts::TAU;
                    let r = if k % 2 == 0 {
                        rng.random_range(5.0 * u..8.0 * u)
                    } else {
                        rng.random_range(2.0 * u..3.5 * u)
                    };
                    (cy + r * angle.sin(), cx + r * angle.cos())
                })
                .collect();
            canvas.paint(class, |y, x| point_in_polygon((y, x), &poly));
        }
        // water: wavy region along the bottom edge
        7 => {
            let level = s - rng.random_range(4.0 * u..7.0 * u);
            let (amp, freq, phase) = (rng.random_range(0.5 * u..1.5 * u), rng.random_range(0.1..0.3) / u, rng.random_range(0.0..6.3));
            canvas.paint(class, |y, x| y >= level + amp * (freq * x + phase).sin());
        }
        // encrustation: annulus
        8 => {
            let (cy, cx) = center(rng);
            let outer = rng.random_range(5.5 * u..8.0 * u);
            let inner = outer - rng.random_range(2.0 * u..3.0 * u);
            canvas.paint(class, |y, x| {
                let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                (inner..=outer).contains(&d)
            });
        }
        _ => unreachable!("class ids are limited to 1..=8"),
    }
}

fn class_intensity(class: u8, y: f64, x: f64, u: f64, rng: &mut impl Rng) -> f64 {
    match class {
        1 => 35.0,
        2 => 12.0,
        3 => 160.0 + 20.0 * ((y + x) / (1.5 * u)).sin(),
        4 => 200.0 + rng.random_range(-18.0..18.0),
        5 => 75.0 + 10.0 * (x / u).sin(),
        6 => 55.0 + rng.random_range(-25.0..25.0),
        7 => 185.0 + 12.0 * (y / (0.8 * u)).sin(),
        8 => 235.0,
        _ => unreachable!("class ids are limited to 1..=8"),
    }
}

fn render(canvas: &Canvas, rng: &mut impl Rng, noise: &Normal<f64>) -> Vec<u8> {
    let s = canvas.size as f64;
    let u = s / 32.0;
    let (gy, gx) = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
    let base = rng.random_range(105.0..135.0);
    let (f1, f2) = (rng.random_range(0.15..0.35) / u, rng.random_range(0.15..0.35) / u);
    let mut out = Vec::with_capacity(canvas.labels.len());
    for (idx, &label) in canvas.labels.iter().enumerate() {
        let (y, x) = ((idx / canvas.size) as f64, (idx % canvas.size) as f64);
        let value = if label == 0 {
            base + gy * y / s + gx * x / s + 6.0 * (f1 * y).sin() * (f2 * x).cos()
        } else {
            class_intensity(label, y, x, u, rng)
        };
        out.push((value + noise.sample(rng)).round().clamp(0.0, 255.0) as u8);
    }
    out
}

/// One synthetic image whose primary defect is `primary`.
pub fn generate_sample(config: &SynthConfig, primary: u8, rng: &mut impl Rng) -> Result<Sample> {
    config.validate()?;
    let defects = (config.num_classes - 1) as u8;
    ensure!(
        (1..=defects).contains(&primary),
        "primary class {} outside 1..={}",
        primary,
        defects
    );
    let size = config.image_size;
    let min_pixels = (60 * size * size / 1024).max(60);
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Contract(e.to_string()))?;
    for _ in 0..MAX_ATTEMPTS {
        let mut canvas = Canvas {
            size,
            labels: vec![0; size * size],
        };
        let mut painted = vec![primary];
        if defects > 1 && rng.random_bool(config.extra_class_prob) {
            let mut others: Vec<u8> = (1..=defects).filter(|&c| c != primary).collect();
            others.shuffle(rng);
            painted.insert(0, others[0]);
        }
        for &class in &painted {
            draw_defect(&mut canvas, class, rng);
        }
        let mask = SegMask::new(size, size, canvas.labels.clone())?;
        let foreground = 1.0 - mask.count(0) as f64 / mask.len() as f64;
        if mask.count(primary as usize) >= min_pixels && foreground <= MAX_FOREGROUND {
            let pixels = render(&canvas, rng, &noise);
            return Ok(Sample { pixels, mask });
        }
    }
    Err(Error::Dataset(format!(
        "could not place class {primary} within {MAX_ATTEMPTS} attempts at size {size}"
    )))
}

fn split_ids(count: usize, seed: u64) -> Splits {
    let mut ids: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    ids.shuffle(&mut rng);
    let n_train = count * 70 / 100;
    let n_val = count * 15 / 100;
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Splits { train, val, test }
}

/// Writes `images/`, `masks/` and `meta.json` under `root`.
pub fn generate_synthetic_dataset(root: &Path, config: &SynthConfig) -> Result<DatasetMeta> {
    config.validate()?;
    let images = root.join("images");
    let masks = root.join("masks");
    for dir in [&images, &masks] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let defects = config.num_classes - 1;
    let mut pixel_counts = vec![0u64; config.num_classes];
    for id in 0..config.count {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(id as u64);
        let primary = (id % defects + 1) as u8;
        let sample = generate_sample(config, primary, &mut rng)?;
        for (slot, n) in pixel_counts.iter_mut().zip(sample.mask.histogram(config.num_classes)) {
            *slot += n as u64;
        }
        let name = format!("{id:05}.png");
        write_png(&images.join(&name), config.image_size, config.image_size, &sample.pixels)?;
        write_png(&masks.join(&name), config.image_size, config.image_size, sample.mask.labels())?;
    }
    let total: u64 = pixel_counts.iter().sum();
    let meta = DatasetMeta {
        num_classes: config.num_classes,
        image_size: config.image_size,
        count: config.count,
        seed: config.seed,
        class_names: std::iter::once("background")
            .chain(DEFECT_NAMES.iter().copied())
            .take(config.num_classes)
            .map(String::from)
            .collect(),
        class_frequencies: pixel_counts.iter().map(|&n| n as f64 / total as f64).collect(),
        splits: split_ids(config.count, config.seed),
    };
    meta.validate()?;
    let path = root.join("meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_class_can_be_primary() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for class in 1..=8u8 {
            let s = generate_sample(&cfg, class, &mut rng).unwrap();
            assert!(s.mask.count(class as usize) >= 60, "class {class}");
            assert!(s.mask.count(0) as f64 >= 0.65 * 1024.0);
            s.mask.check_labels(9).unwrap();
        }
    }

    #[test]
    fn larger_images_scale_shapes() {
        let cfg = SynthConfig {
            image_size: 64,
            ..SynthConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = generate_sample(&cfg, 1, &mut rng).unwrap();
        assert_eq!(s.pixels.len(), 64 * 64);
        assert!(s.mask.count(1) >= 240);
    }

    #[test]
    fn splits_partition_ids() {
        let s = split_ids(200, 42);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (140, 30, 30));
        let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_too_few_images() {
        let cfg = SynthConfig {
            count: 50,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
