//! Feature pyramid encoder built from InceptionSepConv blocks.
//!
//! Bottom-up: `C1 = block1(x)`, `C_i = block_i(maxpool2x2(C_{i-1}))`.
//! Top-down: `P5 = lateral5(C5)`, `P_i = lateral_i(C_i) + up2(P_{i+1})`.
//! All convolutions use "same" zero padding so branch outputs line up.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{batch_statistics, Real, Tape, Tensor, Var};
use crate::params::{Binding, ParamKind, ParamStore};

pub const NUM_STAGES: usize = 5;
/// Input height and width must be multiples of this.
pub const SIZE_MULTIPLE: usize = 1 << (NUM_STAGES - 1);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Normalize with running statistics, also while training. Batch
    /// statistics only feed the running averages.
    #[default]
    Running,
    /// Normalize with batch statistics while training, running at eval.
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub branch_split: (usize, usize, usize),
    pub norm_epsilon: f64,
    pub norm_momentum: f64,
}

impl BlockConfig {
    /// Splits `out_channels` as `⌊out/3⌋, ⌊out/3⌋, out − 2⌊out/3⌋`.
    pub fn new(in_channels: usize, out_channels: usize) -> Result<Self> {
        let third = out_channels / 3;
        let cfg = BlockConfig {
            in_channels,
            out_channels,
            branch_split: (third, third, out_channels - 2 * third),
            norm_epsilon: 1e-5,
            norm_momentum: 0.1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (b1, b2, b3) = self.branch_split;
        ensure!(
            self.in_channels >= 1 && b1 >= 1 && b2 >= 1 && b3 >= 1,
            "block channel counts must be >= 1 (in {}, split {:?}); out_channels must be >= 3",
            self.in_channels,
            self.branch_split
        );
        ensure!(
            b1 + b2 + b3 == self.out_channels,
            "branch split {:?} does not sum to {}",
            self.branch_split,
            self.out_channels
        );
        ensure!(self.norm_epsilon > 0.0, "norm epsilon must be positive");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; NUM_STAGES],
    pub pyramid_channels: usize,
    pub norm_epsilon: f64,
    pub norm_momentum: f64,
    pub norm_mode: NormMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// 16-32-64-128-128 stages, 64 pyramid channels.
    pub fn desk() -> Self {
        EncoderConfig {
            in_channels: 1,
            stage_channels: [16, 32, 64, 128, 128],
            pyramid_channels: 64,
            norm_epsilon: 1e-5,
            norm_momentum: 0.1,
            norm_mode: NormMode::Running,
        }
    }

    /// 32-64-128-256-256 stages, 256 pyramid channels.
    pub fn full() -> Self {
        EncoderConfig {
            stage_channels: [32, 64, 128, 256, 256],
            pyramid_channels: 256,
            ..Self::desk()
        }
    }

    pub fn block_configs(&self) -> Result<Vec<BlockConfig>> {
        let mut prev = self.in_channels;
        self.stage_channels
            .iter()
            .map(|&out| {
                let mut cfg = BlockConfig::new(prev, out)?;
                cfg.norm_epsilon = self.norm_epsilon;
                cfg.norm_momentum = self.norm_momentum;
                prev = out;
                Ok(cfg)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.pyramid_channels >= 1, "pyramid_channels must be >= 1");
        ensure!(
            (0.0..=1.0).contains(&self.norm_momentum),
            "norm_momentum must lie in [0, 1]"
        );
        self.block_configs().map(|_| ())
    }
}

/// Encoder architecture plus its weights and normalization buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub store: ParamStore<T>,
}

/// Bottom-up maps `C1..C5` and top-down maps `P2..P5`.
#[derive(Clone, Debug)]
pub struct PyramidFeatures<V> {
    pub bottom_up: Vec<V>,
    pub top_down: Vec<V>,
}

impl<V: Clone> PyramidFeatures<V> {
    /// `C_level`, level in 1..=5.
    pub fn c(&self, level: usize) -> Option<&V> {
        level.checked_sub(1).and_then(|i| self.bottom_up.get(i))
    }

    /// `P_level`, level in 2..=5.
    pub fn p(&self, level: usize) -> Option<&V> {
        level.checked_sub(2).and_then(|i| self.top_down.get(i))
    }
}

fn kaiming<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::of(normal.sample(rng)))
}

fn insert_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[c], T::one()), ParamKind::Trainable);
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]), ParamKind::Trainable);
    store.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer);
    store.insert(format!("{prefix}.running_var"), Tensor::full(&[c], T::one()), ParamKind::Buffer);
}

/// Adds freshly initialized weights for one block under `prefix`.
pub fn init_block<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &BlockConfig, rng: &mut impl Rng) {
    let cin = cfg.in_channels;
    let (b1, b2, b3) = cfg.branch_split;
    for (branch, k, width) in [("b1", 3usize, b1), ("b2", 5, b2)] {
        let p = format!("{prefix}.{branch}");
        store.insert(
            format!("{p}.conv.weight"),
            kaiming(rng, &[k, k, cin, width], k * k * cin),
            ParamKind::Trainable,
        );
        insert_norm(store, &format!("{p}.conv.bn"), width);
        store.insert(
            format!("{p}.sep.depthwise"),
            kaiming(rng, &[k, k, width], k * k),
            ParamKind::Trainable,
        );
        store.insert(
            format!("{p}.sep.pointwise"),
            kaiming(rng, &[1, 1, width, width], width),
            ParamKind::Trainable,
        );
        insert_norm(store, &format!("{p}.sep.bn"), width);
    }
    store.insert(
        format!("{prefix}.b3.conv.weight"),
        kaiming(rng, &[1, 1, cin, b3], cin),
        ParamKind::Trainable,
    );
    insert_norm(store, &format!("{prefix}.b3.conv.bn"), b3);
}

impl<T: Real> EncoderParams<T> {
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (i, cfg) in config.block_configs()?.iter().enumerate() {
            init_block(&mut store, &stage_name(i + 1), cfg, rng);
        }
        for level in 2..=NUM_STAGES {
            let c = config.stage_channels[level - 1];
            let p = config.pyramid_channels;
            store.insert(
                format!("lateral{level}.weight"),
                kaiming(rng, &[1, 1, c, p], c),
                ParamKind::Trainable,
            );
            store.insert(format!("lateral{level}.bias"), Tensor::zeros(&[p]), ParamKind::Trainable);
        }
        Ok(EncoderParams { config, store })
    }

    pub fn num_trainable(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            store: self.store.cast(),
        }
    }
}

fn stage_name(i: usize) -> String {
    format!("stage{i}")
}

/// Forward-pass options shared by all encoder entry points.
#[derive(Clone, Copy, Debug)]
pub struct Pass {
    pub train: bool,
    pub norm_mode: NormMode,
}

impl Pass {
    pub fn eval() -> Self {
        Pass {
            train: false,
            norm_mode: NormMode::Running,
        }
    }
}

fn norm<T: Real>(bind: &Binding<T>, prefix: &str, x: Var, cfg: &BlockConfig, pass: Pass) -> Result<Var> {
    let tape = bind.tape();
    let gamma = bind.var(&format!("{prefix}.gamma"))?;
    let beta = bind.var(&format!("{prefix}.beta"))?;
    let mean_name = format!("{prefix}.running_mean");
    let var_name = format!("{prefix}.running_var");
    let running_mean = bind.buffer(&mean_name)?;
    let running_var = bind.buffer(&var_name)?;
    let eps = T::of(cfg.norm_epsilon);
    let (y, batch) = match (pass.train, pass.norm_mode) {
        (false, _) => (
            tape.batch_norm_fixed(x, gamma, beta, running_mean, running_var, eps)?,
            None,
        ),
        (true, NormMode::Running) => {
            let stats = batch_statistics(&tape.value(x));
            (
                tape.batch_norm_fixed(x, gamma, beta, running_mean, running_var, eps)?,
                Some(stats),
            )
        }
        (true, NormMode::Batch) => {
            let (y, m, v) = tape.batch_norm_batch(x, gamma, beta, eps)?;
            (y, Some((m, v)))
        }
    };
    if let Some((bm, bv)) = batch {
        let count = tape.value(x).len() / bm.len();
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        let m = T::of(cfg.norm_momentum);
        let keep = T::one() - m;
        let new_mean = running_mean.zip_map(&bm, |r, b| keep * r + m * b)?;
        let new_var = running_var.zip_map(&bv, |r, b| keep * r + m * b * T::of(unbias))?;
        bind.update_buffer(&mean_name, new_mean);
        bind.update_buffer(&var_name, new_var);
    }
    Ok(y)
}

/// InceptionSepConv on a tape. Parameter names live under `prefix`.
pub fn inception_sep_conv_var<T: Real>(
    bind: &Binding<T>,
    prefix: &str,
    cfg: &BlockConfig,
    x: Var,
    pass: Pass,
) -> Result<Var> {
    let tape = bind.tape();
    let (_, _, _, c) = tape.value(x).dims4()?;
    ensure!(
        c == cfg.in_channels,
        "block {} expects {} input channels, got {}",
        prefix,
        cfg.in_channels,
        c
    );
    let mut branches = Vec::with_capacity(3);
    for branch in ["b1", "b2"] {
        let p = format!("{prefix}.{branch}");
        let h = tape.conv2d(x, bind.var(&format!("{p}.conv.weight"))?)?;
        let h = norm(bind, &format!("{p}.conv.bn"), h, cfg, pass)?;
        let h = tape.relu(h);
        let h = tape.sepconv2d(
            h,
            bind.var(&format!("{p}.sep.depthwise"))?,
            bind.var(&format!("{p}.sep.pointwise"))?,
        )?;
        let h = norm(bind, &format!("{p}.sep.bn"), h, cfg, pass)?;
        branches.push(tape.relu(h));
    }
    let h = tape.max_pool2d(x, 3, 1, 1)?;
    let h = tape.conv2d(h, bind.var(&format!("{prefix}.b3.conv.weight"))?)?;
    let h = norm(bind, &format!("{prefix}.b3.conv.bn"), h, cfg, pass)?;
    branches.push(tape.relu(h));
    tape.concat_last(&branches)
}

/// Evaluation-mode InceptionSepConv. `weights` holds the block parameters
/// under the `block.` prefix (see [`init_block`]).
pub fn inception_sep_conv<T: Real>(input: &Tensor<T>, config: &BlockConfig, weights: &ParamStore<T>) -> Result<Tensor<T>> {
    config.validate()?;
    let tape = Tape::no_grad();
    let bind = Binding::new(&tape, weights, false);
    let x = tape.constant(input.clone());
    let y = inception_sep_conv_var(&bind, "block", config, x, Pass::eval())?;
    Ok(tape.value(y))
}

fn check_image(shape: &[usize], config: &EncoderConfig) -> Result<()> {
    ensure!(shape.len() == 4, "image batch must be (batch, height, width, channels)");
    let (h, w, c) = (shape[1], shape[2], shape[3]);
    ensure!(
        h > 0 && w > 0 && h % SIZE_MULTIPLE == 0 && w % SIZE_MULTIPLE == 0,
        "input height and width must be divisible by {} (got {}x{})",
        SIZE_MULTIPLE,
        h,
        w
    );
    ensure!(
        c == config.in_channels,
        "encoder expects {} input channels, got {}",
        config.in_channels,
        c
    );
    Ok(())
}

pub fn bottom_up_var<T: Real>(bind: &Binding<T>, config: &EncoderConfig, image: Var, pass: Pass) -> Result<Vec<Var>> {
    let tape = bind.tape();
    check_image(&tape.shape(image), config)?;
    let blocks = config.block_configs()?;
    let mut maps = Vec::with_capacity(NUM_STAGES);
    let mut x = image;
    for (i, cfg) in blocks.iter().enumerate() {
        if i > 0 {
            x = tape.max_pool2d(x, 2, 2, 0)?;
        }
        x = inception_sep_conv_var(bind, &stage_name(i + 1), cfg, x, pass)?;
        maps.push(x);
    }
    Ok(maps)
}

pub fn top_down_var<T: Real>(bind: &Binding<T>, config: &EncoderConfig, bottom_up: &[Var]) -> Result<Vec<Var>> {
    let tape = bind.tape();
    ensure!(
        bottom_up.len() == NUM_STAGES,
        "top-down pathway needs C1..C5, got {} maps",
        bottom_up.len()
    );
    let mut top = vec![None; NUM_STAGES - 1];
    let mut above: Option<Var> = None;
    for level in (2..=NUM_STAGES).rev() {
        let c = bottom_up[level - 1];
        let channels = tape.value(c).last_dim();
        let weight = bind.var(&format!("lateral{level}.weight"))?;
        let wshape = tape.shape(weight);
        ensure!(
            wshape[2] == channels && wshape[3] == config.pyramid_channels,
            "lateral{} maps {}→{} but C{} has {} channels (pyramid {})",
            level,
            wshape[2],
            wshape[3],
            level,
            channels,
            config.pyramid_channels
        );
        let lat = tape.conv2d(c, weight)?;
        let lat = tape.add_bias(lat, bind.var(&format!("lateral{level}.bias"))?)?;
        let p = match above {
            None => lat,
            Some(prev) => {
                let up = tape.upsample_bilinear_x2(prev)?;
                tape.add(lat, up)?
            }
        };
        top[level - 2] = Some(p);
        above = Some(p);
    }
    Ok(top.into_iter().map(|p| p.expect("every level filled")).collect())
}

pub fn pyramid_var<T: Real>(bind: &Binding<T>, config: &EncoderConfig, image: Var, pass: Pass) -> Result<PyramidFeatures<Var>> {
    let bottom_up = bottom_up_var(bind, config, image, pass)?;
    let top_down = top_down_var(bind, config, &bottom_up)?;
    Ok(PyramidFeatures { bottom_up, top_down })
}

/// `P_level` for a batch of images; level in 2..=5.
pub fn extract_features_var<T: Real>(
    bind: &Binding<T>,
    config: &EncoderConfig,
    image: Var,
    level: usize,
    pass: Pass,
) -> Result<Var> {
    ensure!(
        (2..=NUM_STAGES).contains(&level),
        "pyramid level must be in 2..=5, got {}",
        level
    );
    let pyr = pyramid_var(bind, config, image, pass)?;
    Ok(*pyr.p(level).expect("level checked"))
}

/// Evaluation-mode bottom-up pathway: `C1..C5`.
pub fn bottom_up<T: Real>(image: &Tensor<T>, params: &EncoderParams<T>) -> Result<Vec<Tensor<T>>> {
    let tape = Tape::no_grad();
    let bind = Binding::new(&tape, &params.store, false);
    let x = tape.constant(image.clone());
    let maps = bottom_up_var(&bind, &params.config, x, Pass::eval())?;
    Ok(maps.into_iter().map(|v| tape.value(v)).collect())
}

/// Top-down pathway over precomputed `C1..C5`: returns `P2..P5`.
pub fn top_down<T: Real>(bottom_up: &[Tensor<T>], params: &EncoderParams<T>) -> Result<Vec<Tensor<T>>> {
    let tape = Tape::no_grad();
    let bind = Binding::new(&tape, &params.store, false);
    let vars: Vec<Var> = bottom_up.iter().map(|t| tape.constant(t.clone())).collect();
    let maps = top_down_var(&bind, &params.config, &vars)?;
    Ok(maps.into_iter().map(|v| tape.value(v)).collect())
}

pub fn pyramid<T: Real>(image: &Tensor<T>, params: &EncoderParams<T>) -> Result<PyramidFeatures<Tensor<T>>> {
    let bottom_up = bottom_up(image, params)?;
    let top_down = top_down(&bottom_up, params)?;
    Ok(PyramidFeatures { bottom_up, top_down })
}

/// Evaluation-mode feature extraction: `P_level` of the pyramid.
pub fn extract_features<T: Real>(image: &Tensor<T>, params: &EncoderParams<T>, level: usize) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let bind = Binding::new(&tape, &params.store, false);
    let x = tape.constant(image.clone());
    let p = extract_features_var(&bind, &params.config, x, level, Pass::eval())?;
    Ok(tape.value(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            stage_channels: [3, 4, 5, 6, 6],
            pyramid_channels: 4,
            ..EncoderConfig::desk()
        }
    }

    #[test]
    fn branch_split_rule() {
        let cfg = BlockConfig::new(8, 12).unwrap();
        assert_eq!(cfg.branch_split, (4, 4, 4));
        let cfg = BlockConfig::new(8, 16).unwrap();
        assert_eq!(cfg.branch_split, (5, 5, 6));
        assert!(BlockConfig::new(8, 2).is_err());
        assert!(BlockConfig::new(0, 6).is_err());
    }

    #[test]
    fn block_output_shape_and_zero_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = BlockConfig::new(8, 12).unwrap();
        let mut store = ParamStore::<f64>::new();
        init_block(&mut store, "block", &cfg, &mut rng);
        let x = Tensor::from_fn(&[1, 16, 16, 8], |i| (i as f64).sin());
        assert_eq!(inception_sep_conv(&x, &cfg, &store).unwrap().shape(), &[1, 16, 16, 12]);
        let zero = Tensor::zeros(&[1, 16, 16, 8]);
        let y = inception_sep_conv(&zero, &cfg, &store).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let bad = Tensor::zeros(&[1, 16, 16, 7]);
        assert!(inception_sep_conv(&bad, &cfg, &store).is_err());
    }

    #[test]
    fn pyramid_shapes_and_divisibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = EncoderParams::<f32>::init(small_config(), &mut rng).unwrap();
        let img = Tensor::from_fn(&[1, 32, 32, 1], |i| ((i % 7) as f32) / 7.0);
        let pyr = pyramid(&img, &params).unwrap();
        let sides: Vec<usize> = pyr.bottom_up.iter().map(|t| t.shape()[1]).collect();
        assert_eq!(sides, vec![32, 16, 8, 4, 2]);
        for level in 2..=5 {
            let p = pyr.p(level).unwrap();
            assert_eq!(p.shape(), &[1, 32 >> (level - 1), 32 >> (level - 1), 4]);
        }
        let bad = Tensor::zeros(&[1, 100, 100, 1]);
        let err = bottom_up(&bad, &params).unwrap_err().to_string();
        assert!(err.contains("divisible by 16"), "{err}");
        assert!(extract_features(&img, &params, 1).is_err());
        assert!(extract_features(&img, &params, 6).is_err());
    }

    #[test]
    fn zero_laterals_give_zero_pyramid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = EncoderParams::<f64>::init(small_config(), &mut rng).unwrap();
        for level in 2..=5 {
            let name = format!("lateral{level}.weight");
            let shape = params.store.get(&name).unwrap().shape().to_vec();
            params.store.set(&name, Tensor::zeros(&shape)).unwrap();
        }
        let img = Tensor::from_fn(&[1, 32, 32, 1], |i| (i as f64 * 0.1).cos());
        let pyr = pyramid(&img, &params).unwrap();
        for p in &pyr.top_down {
            assert!(p.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn top_down_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = EncoderParams::<f64>::init(small_config(), &mut rng).unwrap();
        let maps: Vec<Tensor<f64>> = (0..5).map(|i| Tensor::zeros(&[1, 32 >> i, 32 >> i, 9])).collect();
        assert!(top_down(&maps, &params).is_err());
    }
}
