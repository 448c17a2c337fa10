//! Feature-enhancement heads applied before prototype generation:
//! global self-attention (SA), windowed local self-attention (LSA) and
//! query-to-support cross-attention (CA).
//!
//! All variants are single-head and residual: `x + attn(x)·W_O`. `W_O`
//! starts at zero so every head is the identity map at initialization.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Binding, ParamKind, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    #[default]
    None,
    Sa,
    Lsa,
    Ca,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [Self::None, Self::Sa, Self::Lsa, Self::Ca];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Sa => "sa",
            Self::Lsa => "lsa",
            Self::Ca => "ca",
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Contract(format!("unknown attention variant `{s}` (none|sa|lsa|ca)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    /// Projection width; `None` means equal to the feature channels.
    pub d_k: Option<usize>,
    /// Odd side length of the LSA neighborhood.
    pub window: usize,
    pub residual: bool,
    /// Use learned Q/K/V projections in cross-attention instead of raw features.
    pub cross_projections: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            d_k: None,
            window: 5,
            residual: true,
            cross_projections: false,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.window >= 1 && self.window % 2 == 1,
            "attention window must be odd and >= 1, got {}",
            self.window
        );
        ensure!(self.d_k != Some(0), "d_k must be >= 1");
        Ok(())
    }
}

/// Projection matrices of one attention head.
///
/// `wq`, `wk`, `wv` are `C × d_k`, `wo` is `d_k × C`. Literal cross-attention
/// (no learned projections) only carries `wo` (`C × C`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub variant: AttentionVariant,
    pub channels: usize,
    pub d_k: usize,
    pub store: ParamStore<T>,
}

fn xavier<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| T::of(rng.random_range(-bound..bound)))
}

impl<T: Real> AttentionParams<T> {
    /// Random Q/K/V projections and a zero output projection.
    pub fn init(variant: AttentionVariant, channels: usize, config: &AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        ensure!(channels >= 1, "attention needs at least one channel");
        let literal_ca = variant == AttentionVariant::Ca && !config.cross_projections;
        let d_k = if literal_ca {
            channels
        } else {
            config.d_k.unwrap_or(channels)
        };
        let mut store = ParamStore::new();
        if variant != AttentionVariant::None {
            if !literal_ca {
                for name in ["wq", "wk", "wv"] {
                    store.insert(name, xavier(rng, channels, d_k), ParamKind::Trainable);
                }
            }
            store.insert("wo", Tensor::zeros(&[d_k, channels]), ParamKind::Trainable);
        }
        Ok(AttentionParams {
            variant,
            channels,
            d_k,
            store,
        })
    }

    pub fn none(channels: usize) -> Self {
        AttentionParams {
            variant: AttentionVariant::None,
            channels,
            d_k: channels,
            store: ParamStore::new(),
        }
    }

    pub fn has_projections(&self) -> bool {
        self.store.contains("wq")
    }

    pub fn cast<U: Real>(&self) -> AttentionParams<U> {
        AttentionParams {
            variant: self.variant,
            channels: self.channels,
            d_k: self.d_k,
            store: self.store.cast(),
        }
    }

    fn check(&self) -> Result<()> {
        let needed: &[&str] = match (self.variant, self.has_projections()) {
            (AttentionVariant::None, _) => &[],
            (AttentionVariant::Ca, false) => &["wo"],
            _ => &["wq", "wk", "wv", "wo"],
        };
        for name in needed {
            let t = self.store.get(name)?;
            let expect = if *name == "wo" {
                [self.d_k, self.channels]
            } else {
                [self.channels, self.d_k]
            };
            ensure!(
                t.shape() == expect,
                "projection {} has shape {:?}, expected {:?} (d_k mismatch)",
                name,
                t.shape(),
                expect
            );
            ensure!(t.all_finite(), "projection {} is not finite", name);
        }
        Ok(())
    }
}

fn project<T: Real>(tape: &Tape<T>, tokens: Var, w: Var) -> Result<Var> {
    tape.matmul(tokens, w, false, false)
}

fn output<T: Real>(
    tape: &Tape<T>,
    bind: &Binding<T>,
    x: Var,
    attended_tokens: Var,
    shape: &[usize],
    residual: bool,
) -> Result<Var> {
    let out = tape.matmul(attended_tokens, bind.var("wo")?, false, false)?;
    let out = tape.reshape(out, shape)?;
    if residual {
        tape.add(x, out)
    } else {
        Ok(out)
    }
}

fn check_channels<T: Real>(tape: &Tape<T>, x: Var, params_channels: usize) -> Result<(usize, usize, usize, usize)> {
    let dims = tape.value(x).dims4()?;
    ensure!(
        dims.3 == params_channels,
        "features have {} channels, attention expects {}",
        dims.3,
        params_channels
    );
    Ok(dims)
}

/// `x + softmax(QKᵀ/√d_k)V·W_O`, attention within each image.
pub fn self_attention_var<T: Real>(bind: &Binding<T>, x: Var, d_k: usize, config: &AttentionConfig) -> Result<Var> {
    let tape = bind.tape();
    let wq = bind.var("wq")?;
    let c = tape.shape(wq)[0];
    let (b, h, w, _) = check_channels(tape, x, c)?;
    let n = h * w;
    let tokens = tape.reshape(x, &[b * n, c])?;
    let q = tape.reshape(project(tape, tokens, wq)?, &[b, n, d_k])?;
    let k = tape.reshape(project(tape, tokens, bind.var("wk")?)?, &[b, n, d_k])?;
    let v = tape.reshape(project(tape, tokens, bind.var("wv")?)?, &[b, n, d_k])?;
    let logits = tape.bmm(q, k, false, true)?;
    let logits = tape.scale(logits, T::one() / T::of(d_k as f64).sqrt());
    let attn = tape.softmax(logits, 2)?;
    let mixed = tape.bmm(attn, v, false, false)?;
    let mixed = tape.reshape(mixed, &[b * n, d_k])?;
    output(tape, bind, x, mixed, &[b, h, w, c], config.residual)
}

/// Like [`self_attention_var`] but each position only attends to the
/// `window × window` neighborhood inside the image.
pub fn local_self_attention_var<T: Real>(bind: &Binding<T>, x: Var, d_k: usize, config: &AttentionConfig) -> Result<Var> {
    config.validate()?;
    let tape = bind.tape();
    let wq = bind.var("wq")?;
    let c = tape.shape(wq)[0];
    let (b, h, w, _) = check_channels(tape, x, c)?;
    let n = b * h * w;
    let tokens = tape.reshape(x, &[n, c])?;
    let q = tape.reshape(project(tape, tokens, wq)?, &[b, h, w, d_k])?;
    let k = tape.reshape(project(tape, tokens, bind.var("wk")?)?, &[b, h, w, d_k])?;
    let v = tape.reshape(project(tape, tokens, bind.var("wv")?)?, &[b, h, w, d_k])?;
    let scale = T::one() / T::of(d_k as f64).sqrt();
    let mixed = local_attention_op(tape, q, k, v, config.window, scale)?;
    let mixed = tape.reshape(mixed, &[n, d_k])?;
    output(tape, bind, x, mixed, &[b, h, w, c], config.residual)
}

/// Query tokens attend over all support tokens pooled across the support set.
pub fn cross_attention_var<T: Real>(
    bind: &Binding<T>,
    query: Var,
    support: Var,
    d_k: usize,
    config: &AttentionConfig,
) -> Result<Var> {
    let tape = bind.tape();
    let wo = bind.var("wo")?;
    let c = tape.shape(wo)[1];
    let (bq, h, w, _) = check_channels(tape, query, c)?;
    let (bs, hs, ws, _) = check_channels(tape, support, c)?;
    let q_tokens = tape.reshape(query, &[bq * h * w, c])?;
    let s_tokens = tape.reshape(support, &[bs * hs * ws, c])?;
    let (q, k, v, d) = if bind.store().contains("wq") {
        (
            project(tape, q_tokens, bind.var("wq")?)?,
            project(tape, s_tokens, bind.var("wk")?)?,
            project(tape, s_tokens, bind.var("wv")?)?,
            d_k,
        )
    } else {
        (q_tokens, s_tokens, s_tokens, c)
    };
    let logits = tape.matmul(q, k, false, true)?;
    let logits = tape.scale(logits, T::one() / T::of(d as f64).sqrt());
    let attn = tape.softmax(logits, 1)?;
    let mixed = tape.matmul(attn, v, false, false)?;
    output(tape, bind, query, mixed, &[bq, h, w, c], config.residual)
}

struct WindowLayout {
    side: usize,
    radius: usize,
}

impl WindowLayout {
    fn positions(&self, i: usize, j: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
        let (r, side) = (self.radius, self.side);
        (0..side).flat_map(move |a| (0..side).map(move |b| (a, b))).filter_map(move |(a, b)| {
            let p = (i + a).checked_sub(r)?;
            let q = (j + b).checked_sub(r)?;
            (p < h && q < w).then_some((p, q))
        })
    }
}

/// Windowed scaled dot-product attention on `(B, H, W, d)` tensors. Positions
/// outside the image are excluded from the softmax.
pub fn local_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, window: usize, scale: T) -> Result<Tensor<T>> {
    Ok(local_attention_forward(q, k, v, window, scale)?.0)
}

fn local_attention_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    window: usize,
    scale: T,
) -> Result<(Tensor<T>, Vec<T>)> {
    ensure!(
        window >= 1 && window % 2 == 1,
        "attention window must be odd and >= 1, got {}",
        window
    );
    let (b, h, w, d) = q.dims4()?;
    ensure!(k.shape() == q.shape(), "key shape {:?} != query shape {:?}", k.shape(), q.shape());
    let (vb, vh, vw, dv) = v.dims4()?;
    ensure!((vb, vh, vw) == (b, h, w), "value grid does not match query grid");
    let layout = WindowLayout {
        side: window,
        radius: window / 2,
    };
    let slots = window * window;
    let (qs, ks, vs) = (q.data(), k.data(), v.data());
    let mut out = vec![T::zero(); b * h * w * dv];
    let mut alphas = vec![T::zero(); b * h * w * slots];
    let mut scores = Vec::with_capacity(slots);
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let pos = (bi * h + i) * w + j;
                let qv = &qs[pos * d..(pos + 1) * d];
                scores.clear();
                for (p, r) in layout.positions(i, j, h, w) {
                    let kp = (bi * h + p) * w + r;
                    let kv = &ks[kp * d..(kp + 1) * d];
                    scores.push(scale * qv.iter().zip(kv).map(|(&a, &c)| a * c).sum::<T>());
                }
                let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let a_row = &mut alphas[pos * slots..pos * slots + scores.len()];
                for (a, &s) in a_row.iter_mut().zip(&scores) {
                    *a = s / total;
                }
                let o = &mut out[pos * dv..(pos + 1) * dv];
                for (slot, (p, r)) in layout.positions(i, j, h, w).enumerate() {
                    let vp = (bi * h + p) * w + r;
                    let alpha = alphas[pos * slots + slot];
                    for (ov, &x) in o.iter_mut().zip(&vs[vp * dv..(vp + 1) * dv]) {
                        *ov += alpha * x;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&[b, h, w, dv], out)?, alphas))
}

fn local_attention_op<T: Real>(tape: &Tape<T>, q: Var, k: Var, v: Var, window: usize, scale: T) -> Result<Var> {
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    let (out, alphas) = local_attention_forward(&qv, &kv, &vv, window, scale)?;
    Ok(tape.custom(out, &[q, k, v], move |g, _| {
        let (b, h, w, d) = qv.dims4().unwrap();
        let dv = vv.last_dim();
        let layout = WindowLayout {
            side: window,
            radius: window / 2,
        };
        let slots = window * window;
        let (qs, ks, vs, gs) = (qv.data(), kv.data(), vv.data(), g.data());
        let mut dq = vec![T::zero(); qs.len()];
        let mut dk = vec![T::zero(); ks.len()];
        let mut dvv = vec![T::zero(); vs.len()];
        let mut dalpha = Vec::with_capacity(slots);
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let pos = (bi * h + i) * w + j;
                    let go = &gs[pos * dv..(pos + 1) * dv];
                    dalpha.clear();
                    let mut weighted = T::zero();
                    for (slot, (p, r)) in layout.positions(i, j, h, w).enumerate() {
                        let vp = (bi * h + p) * w + r;
                        let alpha = alphas[pos * slots + slot];
                        let da: T = go.iter().zip(&vs[vp * dv..(vp + 1) * dv]).map(|(&a, &c)| a * c).sum();
                        for (d_out, &gv) in dvv[vp * dv..(vp + 1) * dv].iter_mut().zip(go) {
                            *d_out += alpha * gv;
                        }
                        weighted += alpha * da;
                        dalpha.push(da);
                    }
                    for (slot, (p, r)) in layout.positions(i, j, h, w).enumerate() {
                        let kp = (bi * h + p) * w + r;
                        let alpha = alphas[pos * slots + slot];
                        let ds = alpha * (dalpha[slot] - weighted) * scale;
                        for t in 0..d {
                            dq[pos * d + t] += ds * ks[kp * d + t];
                            dk[kp * d + t] += ds * qs[pos * d + t];
                        }
                    }
                }
            }
        }
        vec![
            Some(Tensor::new(qv.shape(), dq).unwrap()),
            Some(Tensor::new(kv.shape(), dk).unwrap()),
            Some(Tensor::new(vv.shape(), dvv).unwrap()),
        ]
    }))
}

fn run_pure<T: Real>(
    params: &AttentionParams<T>,
    f: impl FnOnce(&Tape<T>, &Binding<T>) -> Result<Var>,
) -> Result<Tensor<T>> {
    params.check()?;
    let tape = Tape::no_grad();
    let bind = Binding::new(&tape, &params.store, false);
    let out = f(&tape, &bind)?;
    Ok(tape.value(out))
}

/// Evaluation-mode self-attention over `(B, H, W, C)` features.
pub fn self_attention<T: Real>(features: &Tensor<T>, params: &AttentionParams<T>, config: &AttentionConfig) -> Result<Tensor<T>> {
    run_pure(params, |tape, bind| {
        let x = tape.constant(features.clone());
        self_attention_var(bind, x, params.d_k, config)
    })
}

pub fn local_self_attention<T: Real>(
    features: &Tensor<T>,
    params: &AttentionParams<T>,
    config: &AttentionConfig,
) -> Result<Tensor<T>> {
    run_pure(params, |tape, bind| {
        let x = tape.constant(features.clone());
        local_self_attention_var(bind, x, params.d_k, config)
    })
}

pub fn cross_attention<T: Real>(
    query_features: &Tensor<T>,
    support_features: &Tensor<T>,
    params: &AttentionParams<T>,
    config: &AttentionConfig,
) -> Result<Tensor<T>> {
    run_pure(params, |tape, bind| {
        let q = tape.constant(query_features.clone());
        let s = tape.constant(support_features.clone());
        cross_attention_var(bind, q, s, params.d_k, config)
    })
}

/// Applies the configured head to support and query feature maps.
///
/// SA and LSA transform both maps; CA transforms only the query map using
/// the support map as keys and values. `None` returns the inputs.
pub fn apply_var<T: Real>(
    bind: &Binding<T>,
    params: &AttentionParams<T>,
    config: &AttentionConfig,
    support: Var,
    query: Var,
) -> Result<(Var, Var)> {
    match params.variant {
        AttentionVariant::None => Ok((support, query)),
        AttentionVariant::Sa => Ok((
            self_attention_var(bind, support, params.d_k, config)?,
            self_attention_var(bind, query, params.d_k, config)?,
        )),
        AttentionVariant::Lsa => Ok((
            local_self_attention_var(bind, support, params.d_k, config)?,
            local_self_attention_var(bind, query, params.d_k, config)?,
        )),
        AttentionVariant::Ca => Ok((support, cross_attention_var(bind, query, support, params.d_k, config)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 })
    }

    fn params_with(variant: AttentionVariant, c: usize, wq: Tensor<f64>, wk: Tensor<f64>) -> AttentionParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = AttentionParams::init(variant, c, &AttentionConfig::default(), &mut rng).unwrap();
        if p.has_projections() {
            p.store.set("wq", wq).unwrap();
            p.store.set("wk", wk).unwrap();
            p.store.set("wv", identity(c)).unwrap();
        }
        p.store.set("wo", identity(c)).unwrap();
        p
    }

    fn no_residual() -> AttentionConfig {
        AttentionConfig {
            residual: false,
            ..AttentionConfig::default()
        }
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("lsa".parse::<AttentionVariant>().unwrap(), AttentionVariant::Lsa);
        assert!("mha".parse::<AttentionVariant>().is_err());
        assert_eq!(serde_json::to_string(&AttentionVariant::Ca).unwrap(), "\"ca\"");
    }

    #[test]
    fn single_token_self_attention_is_identity() {
        let p = params_with(AttentionVariant::Sa, 3, identity(3), identity(3));
        let x = Tensor::new(&[1, 1, 1, 3], vec![0.3, -1.2, 2.0]).unwrap();
        let y = self_attention(&x, &p, &no_residual()).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn zero_logits_give_mean_token() {
        let p = params_with(AttentionVariant::Sa, 2, Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2]));
        let x = Tensor::new(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let y = self_attention(&x, &p, &no_residual()).unwrap();
        for row in y.data().chunks(2) {
            assert!((row[0] - 4.0).abs() < 1e-12 && (row[1] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_token_hand_evaluation() {
        let p = params_with(AttentionVariant::Sa, 2, identity(2), identity(2));
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = self_attention(&x, &p, &no_residual()).unwrap();
        // Logits [[1,0],[0,1]]/√2: each row weights itself by σ(1/√2).
        let s = 1.0 / 2f64.sqrt();
        let a = s.exp() / (s.exp() + 1.0);
        let expect = [a, 1.0 - a, 1.0 - a, a];
        for (v, e) in y.data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-14);
        }
    }

    #[test]
    fn lsa_degenerate_window() {
        let mut p = params_with(AttentionVariant::Lsa, 2, identity(2), identity(2));
        p.store.set("wq", Tensor::from_fn(&[2, 2], |i| i as f64 - 1.5)).unwrap();
        let x = Tensor::from_fn(&[1, 3, 3, 2], |i| (i as f64).sin());
        let cfg = AttentionConfig {
            window: 1,
            residual: false,
            ..AttentionConfig::default()
        };
        let y = local_self_attention(&x, &p, &cfg).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
        let cfg = AttentionConfig { window: 1, ..AttentionConfig::default() };
        let y = local_self_attention(&x, &p, &cfg).unwrap();
        assert!(y.max_abs_diff(&x.map(|v| 2.0 * v)) < 1e-15);
        let cfg = AttentionConfig { window: 2, ..AttentionConfig::default() };
        assert!(local_self_attention(&x, &p, &cfg).is_err());
    }

    #[test]
    fn lsa_constant_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = AttentionParams::<f64>::init(AttentionVariant::Lsa, 3, &AttentionConfig::default(), &mut rng).unwrap();
        p.store.set("wv", identity(3)).unwrap();
        p.store.set("wo", identity(3)).unwrap();
        let x = Tensor::from_fn(&[1, 4, 4, 3], |i| [0.5, -1.0, 2.0][i % 3]);
        let cfg = AttentionConfig { window: 3, residual: false, ..AttentionConfig::default() };
        let y = local_self_attention(&x, &p, &cfg).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn cross_attention_single_or_repeated_support_token() {
        let p = params_with(AttentionVariant::Ca, 3, identity(3), identity(3));
        let q = Tensor::from_fn(&[1, 2, 2, 3], |i| (i as f64 * 0.7).cos());
        let s = Tensor::new(&[1, 1, 1, 3], vec![0.2, -0.4, 0.9]).unwrap();
        let y = cross_attention(&q, &s, &p, &no_residual()).unwrap();
        for row in y.data().chunks(3) {
            assert!((row[0] - 0.2).abs() < 1e-15 && (row[1] + 0.4).abs() < 1e-15 && (row[2] - 0.9).abs() < 1e-15);
        }
        let s4 = Tensor::from_fn(&[2, 1, 2, 3], |i| [0.2, -0.4, 0.9][i % 3]);
        let y4 = cross_attention(&q, &s4, &p, &no_residual()).unwrap();
        assert!(y4.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn d_k_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AttentionParams::<f64>::init(AttentionVariant::Sa, 4, &AttentionConfig::default(), &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 2, 2, 3]);
        assert!(self_attention(&x, &p, &AttentionConfig::default()).is_err());
        let mut bad = p.clone();
        bad.d_k = 2;
        assert!(self_attention(&Tensor::zeros(&[1, 2, 2, 4]), &bad, &AttentionConfig::default()).is_err());
    }
}
