//! Helpers shared by the integration tests: random inputs and an
//! independent plain-ndarray reference for the video encoder.
#![allow(dead_code)]

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use surgvl::model::tokenizer::{CLS_ID, NUM_SPECIAL, PAD_ID, SEP_ID};
use surgvl::model::{Model, ModelConfig, TokenSequence, VideoClip};

pub const VOCAB: usize = 40;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB,
        ..ModelConfig::tiny()
    }
}

pub fn random_frames(rng: &mut ChaCha8Rng, frames: usize, size: usize) -> Array4<f64> {
    Array4::from_shape_fn((frames, size, size, 3), |_| rng.random())
}

pub fn random_clip(rng: &mut ChaCha8Rng, frames: usize, size: usize) -> VideoClip {
    VideoClip::new(random_frames(rng, frames, size), "clip", "src", 0.0, 45.0, None).unwrap()
}

/// `[CLS] w… [SEP] [PAD]…` with `words` random regular tokens.
pub fn random_tokens(rng: &mut ChaCha8Rng, words: usize, len: usize, vocab: usize) -> TokenSequence {
    assert!(words + 2 <= len);
    let mut ids = vec![CLS_ID];
    ids.extend((0..words).map(|_| rng.random_range(NUM_SPECIAL..vocab)));
    ids.push(SEP_ID);
    let valid = ids.len();
    ids.resize(len, PAD_ID);
    TokenSequence {
        ids,
        attention_mask: (0..len).map(|i| u8::from(i < valid)).collect(),
        special_positions: std::iter::once(0).chain(valid - 1..len).collect(),
    }
}

/// Overwrites every parameter with N(0, std²) values, so that no
/// projection is zero.
pub fn randomize_params(model: &mut Model, seed: u64, std: f64) {
    let mut rng = rng(seed);
    let normal = Normal::new(0.0, std).unwrap();
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        model.params.value_mut(id).mapv_inplace(|_| normal.sample(&mut rng));
    }
}

pub fn weight(model: &Model, name: &str) -> Array2<f64> {
    let id = model.params.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    model.params.value(id).clone()
}

// ---- independent reference numerics ----

pub fn ref_linear(model: &Model, name: &str, x: &Array2<f64>) -> Array2<f64> {
    x.dot(&weight(model, &format!("{name}.weight"))) + &weight(model, &format!("{name}.bias")).row(0)
}

pub fn ref_layer_norm(model: &Model, name: &str, x: &Array2<f64>) -> Array2<f64> {
    let gamma = weight(model, &format!("{name}.gamma"));
    let beta = weight(model, &format!("{name}.beta"));
    let mut out = x.clone();
    for mut r in out.rows_mut() {
        let mean = r.mean().unwrap();
        let var = r.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        r.mapv_inplace(|v| (v - mean) / (var + 1e-5).sqrt());
    }
    out * &gamma.row(0) + &beta.row(0)
}

pub fn ref_gelu(x: &Array2<f64>) -> Array2<f64> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    x.mapv(|z| 0.5 * z * (1.0 + (c * (z + 0.044715 * z.powi(3))).tanh()))
}

/// Full (unmasked) multi-head attention of `x` over itself.
pub fn ref_self_attention(model: &Model, name: &str, x: &Array2<f64>, heads: usize) -> Array2<f64> {
    let q = ref_linear(model, &format!("{name}.query"), x);
    let k = ref_linear(model, &format!("{name}.key"), x);
    let v = ref_linear(model, &format!("{name}.value"), x);
    let d = q.ncols();
    let dh = d / heads;
    let mut mixed = Array2::zeros(q.dim());
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) / (dh as f64).sqrt();
        let mut p = scores.clone();
        for mut r in p.rows_mut() {
            let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            r.mapv_inplace(|v| (v - m).exp());
            let z = r.sum();
            r /= z;
        }
        mixed.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
    }
    ref_linear(model, &format!("{name}.output"), &mixed)
}

/// One frame's pass through a spatial-only block: attention over the
/// frame's patches plus its classification token, then the MLP.
pub fn ref_spatial_block(model: &Model, block: usize, x: &Array2<f64>) -> Array2<f64> {
    let heads = model.config.num_heads;
    let name = format!("video.blocks.{block}");
    let h = ref_layer_norm(model, &format!("{name}.spatial_norm"), x);
    let x = x + &ref_self_attention(model, &format!("{name}.spatial_attn"), &h, heads);
    let h = ref_layer_norm(model, &format!("{name}.mlp_norm"), &x);
    let m = ref_linear(model, &format!("{name}.mlp.fc2"), &ref_gelu(&ref_linear(model, &format!("{name}.mlp.fc1"), &h)));
    &x + &m
}

/// Reference interpolated temporal embedding for frame `t` of `frames`.
pub fn ref_temporal_position(model: &Model, t: usize, frames: usize) -> Array1<f64> {
    let table = weight(model, "video.temporal_pos");
    let m = table.nrows();
    let pos = ((t as f64 + 0.5) * m as f64 / frames as f64 - 0.5).clamp(0.0, (m - 1) as f64);
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let hi = (lo + 1).min(m - 1);
    &table.row(lo) * (1.0 - frac) + &table.row(hi) * frac
}

/// Encodes every frame independently, with no temporal attention.
/// Returns (tokens T×P×d, per-frame classification outputs T×d).
pub fn spatial_only_encode(model: &Model, clip: &VideoClip) -> (Array3<f64>, Array2<f64>) {
    let cfg = &model.config;
    let (ps, side, d) = (cfg.patch_size, cfg.patches_per_side(), cfg.embed_dim);
    let p_count = side * side;
    let frames = clip.num_frames();
    let spatial = weight(model, "video.spatial_pos");
    let cls_token = weight(model, "video.cls_token");
    let mut tokens = Array3::zeros((frames, p_count, d));
    let mut cls_out = Array2::zeros((frames, d));
    for t in 0..frames {
        let mut pixels = Array2::zeros((p_count, cfg.patch_dim()));
        for py in 0..side {
            for px in 0..side {
                let patch = clip.frames.slice(s![t, py * ps..(py + 1) * ps, px * ps..(px + 1) * ps, ..]);
                let flat: Vec<f64> = patch.iter().copied().collect();
                pixels.row_mut(py * side + px).assign(&Array1::from(flat));
            }
        }
        let mut x = Array2::zeros((p_count + 1, d));
        let embedded = ref_linear(model, "video.patch_embed", &pixels);
        let temporal = ref_temporal_position(model, t, frames);
        for p in 0..p_count {
            x.row_mut(p).assign(&(&embedded.row(p) + &spatial.row(p + 1) + &temporal));
        }
        x.row_mut(p_count).assign(&(&cls_token.row(0) + &spatial.row(0)));
        for b in 0..cfg.num_layers_video {
            x = ref_spatial_block(model, b, &x);
        }
        let x = ref_layer_norm(model, "video.norm", &x);
        tokens.index_axis_mut(Axis(0), t).assign(&x.slice(s![..p_count, ..]));
        cls_out.row_mut(t).assign(&x.row(p_count));
    }
    (tokens, cls_out)
}

pub fn max_abs_diff<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// |a − n| / max(|a|, |n|, floor).
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
