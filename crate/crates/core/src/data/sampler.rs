use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::mask::SegMask;
use crate::error::{ensure, Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSpec {
    pub n_ways: usize,
    pub k_shots: usize,
    pub n_query: usize,
    /// Pixels of a class an image needs to serve as its support example.
    pub min_class_pixels: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            n_ways: 2,
            k_shots: 5,
            n_query: 1,
            min_class_pixels: 50,
        }
    }
}

impl EpisodeSpec {
    pub fn new(n_ways: usize, k_shots: usize, n_query: usize) -> Self {
        EpisodeSpec {
            n_ways,
            k_shots,
            n_query,
            ..EpisodeSpec::default()
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        ensure!(
            self.n_ways >= 1 && self.n_ways < num_classes,
            "n_ways must be in 1..={}, got {}",
            num_classes.saturating_sub(1),
            self.n_ways
        );
        ensure!(self.k_shots >= 1, "k_shots must be >= 1");
        ensure!(self.n_query >= 1, "n_query must be >= 1");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportSample {
    pub image_id: usize,
    /// Normalized `(H, W, 1)` image.
    pub image: Tensor<f32>,
    /// Labels in episode space `0..=n`.
    pub mask: SegMask,
    /// Episode class this sample was drawn for.
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySample {
    pub image_id: usize,
    pub image: Tensor<f32>,
    pub mask: SegMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub n_ways: usize,
    pub k_shots: usize,
    pub support: Vec<SupportSample>,
    pub query: Vec<QuerySample>,
    /// `(dataset class, episode class)` pairs; other classes map to 0.
    pub class_map: Vec<(usize, usize)>,
}

fn batch<T: Real>(images: impl Iterator<Item = Tensor<f32>>) -> Tensor<T> {
    let parts: Vec<Tensor<T>> = images
        .map(|t| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.cast().reshape(&shape).expect("same element count")
        })
        .collect();
    Tensor::stack(&parts).expect("episode images share one shape")
}

impl Episode {
    /// Episode class ids including background: `0..=n`.
    pub fn classes(&self) -> Vec<usize> {
        (0..=self.n_ways).collect()
    }

    pub fn support_batch<T: Real>(&self) -> Tensor<T> {
        batch(self.support.iter().map(|s| s.image.clone()))
    }

    pub fn query_batch<T: Real>(&self) -> Tensor<T> {
        batch(self.query.iter().map(|s| s.image.clone()))
    }

    pub fn support_masks(&self) -> Vec<SegMask> {
        self.support.iter().map(|s| s.mask.clone()).collect()
    }

    pub fn query_masks(&self) -> Vec<SegMask> {
        self.query.iter().map(|s| s.mask.clone()).collect()
    }

    pub fn image_size(&self) -> (usize, usize) {
        let m = &self.support[0].mask;
        (m.height(), m.width())
    }
}

/// Maps 8-bit intensities to roughly zero-mean, unit-scale inputs.
pub fn normalize_pixels(pixels: &[u8], height: usize, width: usize) -> Result<Tensor<f32>> {
    Tensor::new(
        &[height, width, 1],
        pixels.iter().map(|&v| (v as f32 / 255.0 - 0.5) / 0.25).collect(),
    )
}

/// Independent reproducible generator for `(seed, stream)`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Serializable position of a [`ChaCha8Rng`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Checkpoint(format!("corrupt rng state: {what}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

/// Draws one n-way k-shot episode.
///
/// Classes are drawn uniformly without replacement from the defect classes.
/// Support images of class `c` hold at least `min_class_pixels` pixels of
/// `c`; query images hold at least one pixel of an episode class and never
/// appear in the support set.
pub fn sample_episode(dataset: &Dataset, spec: &EpisodeSpec, rng: &mut ChaCha8Rng) -> Result<Episode> {
    let k = dataset.num_classes();
    spec.validate(k)?;
    let drawn: Vec<usize> = index::sample(rng, k - 1, spec.n_ways).into_iter().map(|c| c + 1).collect();
    let class_map: Vec<(usize, usize)> = drawn.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
    let relabel: Vec<(u8, u8)> = class_map.iter().map(|&(from, to)| (from as u8, to as u8)).collect();

    let mut support_positions = Vec::with_capacity(spec.n_ways * spec.k_shots);
    for &(class, episode_class) in &class_map {
        let eligible: Vec<usize> = dataset
            .images_with(class)
            .iter()
            .filter(|&&(_, n)| n >= spec.min_class_pixels)
            .map(|&(pos, _)| pos)
            .collect();
        if eligible.len() < spec.k_shots {
            return Err(Error::UnderPopulated {
                class,
                eligible: eligible.len(),
                required: spec.k_shots,
            });
        }
        for i in index::sample(rng, eligible.len(), spec.k_shots) {
            support_positions.push((eligible[i], episode_class));
        }
    }

    let mut pool: Vec<usize> = class_map
        .iter()
        .flat_map(|&(class, _)| dataset.images_with(class).iter().map(|&(pos, _)| pos))
        .filter(|pos| !support_positions.iter().any(|(s, _)| s == pos))
        .collect();
    pool.sort_unstable();
    pool.dedup();
    if pool.len() < spec.n_query {
        return Err(Error::Dataset(format!(
            "query pool for classes {:?} has {} images, {} required",
            drawn,
            pool.len(),
            spec.n_query
        )));
    }
    pool.shuffle(rng);

    let load = |pos: usize| -> Result<(usize, Tensor<f32>, SegMask)> {
        let r = dataset.record(pos);
        let image = normalize_pixels(&r.pixels, r.mask.height(), r.mask.width())?;
        Ok((r.id, image, r.mask.relabel(&relabel)))
    };
    let support = support_positions
        .into_iter()
        .map(|(pos, class)| {
            let (image_id, image, mask) = load(pos)?;
            Ok(SupportSample {
                image_id,
                image,
                mask,
                class,
            })
        })
        .collect::<Result<_>>()?;
    let query = pool[..spec.n_query]
        .iter()
        .map(|&pos| {
            let (image_id, image, mask) = load(pos)?;
            Ok(QuerySample { image_id, image, mask })
        })
        .collect::<Result<_>>()?;
    Ok(Episode {
        n_ways: spec.n_ways,
        k_shots: spec.k_shots,
        support,
        query,
        class_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn rng_state_round_trip() {
        let mut rng = rng_stream(42, 7);
        for _ in 0..13 {
            rng.next_u32();
        }
        let state = RngState::capture(&rng);
        let json = serde_json::to_string(&state).unwrap();
        let mut restored = serde_json::from_str::<RngState>(&json).unwrap().restore().unwrap();
        for _ in 0..5 {
            assert_eq!(rng.next_u64(), restored.next_u64());
        }
    }

    #[test]
    fn spec_bounds() {
        assert!(EpisodeSpec::new(8, 5, 1).validate(9).is_ok());
        assert!(EpisodeSpec::new(9, 5, 1).validate(9).is_err());
        assert!(EpisodeSpec::new(2, 0, 1).validate(9).is_err());
        assert!(EpisodeSpec::new(2, 1, 0).validate(9).is_err());
    }

    #[test]
    fn normalization_range() {
        let t = normalize_pixels(&[0, 255], 1, 2).unwrap();
        assert_eq!(t.data(), &[-2.0, 2.0]);
    }
}
