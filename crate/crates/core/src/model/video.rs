//! Video encoder: per-frame patch embedding, learnable spatial and temporal
//! positions, and divided space-time transformer blocks.
//!
//! Token rows for a batch of N clips with T frames and P patches per frame
//! are laid out as all N·T·P patch rows first (clip-major, then frame, then
//! patch), followed by N·T per-frame classification rows.

use std::rc::Rc;

use ndarray::{Array1, Array3, Array4};
use rand::Rng;

use super::config::ModelConfig;
use super::layers::{Attention, Init, LayerNorm, Linear, Mlp};
use crate::autograd::{AttnGroup, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamId, ParamStore};

/// A fixed-duration frame sequence. Frames are T×H×W×3 with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Array4<f64>,
    pub clip_id: String,
    pub source_id: String,
    pub start_time: f64,
    pub end_time: f64,
    pub phase_label: Option<String>,
}

impl VideoClip {
    pub fn new(
        frames: Array4<f64>,
        clip_id: impl Into<String>,
        source_id: impl Into<String>,
        start_time: f64,
        end_time: f64,
        phase_label: Option<String>,
    ) -> Result<Self> {
        let (t, _, _, c) = frames.dim();
        if t == 0 {
            return Err(Error::InvalidInput("clip has no frames".into()));
        }
        if c != 3 {
            return Err(Error::InvalidInput(format!("frames must have 3 channels, got {c}")));
        }
        if !(end_time - start_time > 0.0) {
            return Err(Error::InvalidInput(format!(
                "clip span [{start_time}, {end_time}) is empty"
            )));
        }
        Ok(Self {
            frames,
            clip_id: clip_id.into(),
            source_id: source_id.into(),
            start_time,
            end_time,
            phase_label,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    /// Same clip restricted to the given frame indices.
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self> {
        let available = self.num_frames();
        if let Some(&bad) = indices.iter().find(|&&i| i >= available) {
            return Err(Error::NotEnoughFrames {
                requested: bad + 1,
                available,
            });
        }
        Ok(Self {
            frames: self.frames.select(ndarray::Axis(0), indices),
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    /// T×P×embed_dim.
    pub tokens: Array3<f64>,
    pub cls: Array1<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct DividedBlock {
    pub temporal_norm: LayerNorm,
    pub temporal_attn: Attention,
    pub spatial_norm: LayerNorm,
    pub spatial_attn: Attention,
    pub mlp_norm: LayerNorm,
    pub mlp: Mlp,
}

/// Index arithmetic for the token row layout of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct GridLayout {
    pub clips: usize,
    pub frames: usize,
    pub patches: usize,
}

impl GridLayout {
    pub fn patch_rows(&self) -> usize {
        self.clips * self.frames * self.patches
    }

    pub fn total_rows(&self) -> usize {
        self.patch_rows() + self.clips * self.frames
    }

    pub fn patch_row(&self, clip: usize, frame: usize, patch: usize) -> usize {
        (clip * self.frames + frame) * self.patches + patch
    }

    pub fn cls_row(&self, clip: usize, frame: usize) -> usize {
        self.patch_rows() + clip * self.frames + frame
    }

    /// Each patch location attends across the frames of its clip.
    pub fn temporal_groups(&self) -> Rc<[AttnGroup]> {
        let mut groups = Vec::with_capacity(self.clips * self.patches);
        for n in 0..self.clips {
            for p in 0..self.patches {
                let rows: Vec<usize> = (0..self.frames).map(|t| self.patch_row(n, t, p)).collect();
                groups.push(AttnGroup {
                    queries: rows.clone(),
                    keys: rows,
                });
            }
        }
        groups.into()
    }

    /// Patches of one frame plus that frame's classification token.
    pub fn spatial_groups(&self) -> Rc<[AttnGroup]> {
        let mut groups = Vec::with_capacity(self.clips * self.frames);
        for n in 0..self.clips {
            for t in 0..self.frames {
                let mut rows: Vec<usize> = (0..self.patches).map(|p| self.patch_row(n, t, p)).collect();
                rows.push(self.cls_row(n, t));
                groups.push(AttnGroup {
                    queries: rows.clone(),
                    keys: rows,
                });
            }
        }
        groups.into()
    }
}

impl DividedBlock {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &ModelConfig) -> Self {
        let (d, h, std) = (cfg.embed_dim, cfg.num_heads, cfg.init_std);
        Self {
            temporal_norm: LayerNorm::new(store, &format!("{name}.temporal_norm"), d),
            temporal_attn: Attention::new(store, rng, &format!("{name}.temporal_attn"), d, h, std, Init::Zeros),
            spatial_norm: LayerNorm::new(store, &format!("{name}.spatial_norm"), d),
            spatial_attn: Attention::new(store, rng, &format!("{name}.spatial_attn"), d, h, std, Init::Normal),
            mlp_norm: LayerNorm::new(store, &format!("{name}.mlp_norm"), d),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, d * cfg.mlp_ratio, std),
        }
    }

    /// Temporal attention over patch rows, then spatial attention within
    /// each frame (classification token included), then the MLP. Every
    /// sub-layer is pre-normalized and residual.
    pub(crate) fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, layout: GridLayout) -> Var {
        let patch_idx: Rc<[usize]> = (0..layout.patch_rows()).collect::<Vec<_>>().into();
        let patches = tape.gather_rows(x, patch_idx.clone());
        let h = self.temporal_norm.forward(tape, store, patches);
        let t = self.temporal_attn.forward(tape, store, h, h, layout.temporal_groups());
        let t = tape.scatter_rows(t, patch_idx, layout.total_rows());
        let x = tape.add(x, t);

        let h = self.spatial_norm.forward(tape, store, x);
        let s = self.spatial_attn.forward(tape, store, h, h, layout.spatial_groups());
        let x = tape.add(x, s);

        let h = self.mlp_norm.forward(tape, store, x);
        let m = self.mlp.forward(tape, store, h);
        tape.add(x, m)
    }
}

#[derive(Debug, Clone)]
pub struct VideoEncoder {
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    /// Row 0 belongs to the classification token, rows 1..=P to patches.
    pub spatial_pos: ParamId,
    pub temporal_pos: ParamId,
    pub blocks: Vec<DividedBlock>,
    pub norm: LayerNorm,
}

/// Outputs of a batched forward pass, all living on the tape.
pub(crate) struct VideoBatch {
    /// N·T·P × d encoder outputs for the patch tokens.
    pub tokens: Var,
    /// N·T·P × d positional embeddings of the same tokens.
    pub positions: Var,
    /// N × d mean of the per-frame classification outputs.
    pub cls: Var,
    pub layout: GridLayout,
}

/// Linear resampling of `table_len` temporal positions onto `frames`
/// centre-aligned positions. The identity when the two lengths agree.
pub fn temporal_interpolation(frames: usize, table_len: usize) -> Matrix {
    let mut m = Matrix::zeros((frames, table_len));
    for i in 0..frames {
        let pos = ((i as f64 + 0.5) * table_len as f64 / frames as f64 - 0.5)
            .clamp(0.0, (table_len - 1) as f64);
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        m[[i, lo]] += 1.0 - frac;
        if frac > 0.0 {
            m[[i, lo + 1]] += frac;
        }
    }
    m
}

/// Flattens each frame into P rows of `3·patch²` values ordered (dy, dx, c).
pub(crate) fn patchify(clips: &[&VideoClip], cfg: &ModelConfig) -> Matrix {
    let (ps, side) = (cfg.patch_size, cfg.patches_per_side());
    let frames = clips[0].num_frames();
    let rows = clips.len() * frames * side * side;
    let mut out = Matrix::zeros((rows, cfg.patch_dim()));
    let mut r = 0;
    for clip in clips {
        for t in 0..frames {
            for py in 0..side {
                for px in 0..side {
                    let mut c = 0;
                    for dy in 0..ps {
                        for dx in 0..ps {
                            for ch in 0..3 {
                                out[[r, c]] = clip.frames[[t, py * ps + dy, px * ps + dx, ch]];
                                c += 1;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    out
}

impl VideoEncoder {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        let (d, std) = (cfg.embed_dim, cfg.init_std);
        let patch_embed = Linear::new(store, rng, "video.patch_embed", cfg.patch_dim(), d, std, Init::Normal);
        let cls_token = store.insert("video.cls_token", truncated_normal(rng, 1, d, std), true);
        let spatial_pos = store.insert(
            "video.spatial_pos",
            truncated_normal(rng, cfg.patches_per_frame() + 1, d, std),
            true,
        );
        let temporal_pos = store.insert("video.temporal_pos", truncated_normal(rng, cfg.max_frames, d, std), true);
        let blocks = (0..cfg.num_layers_video)
            .map(|i| DividedBlock::new(store, rng, &format!("video.blocks.{i}"), cfg))
            .collect();
        let norm = LayerNorm::new(store, "video.norm", d);
        Self {
            patch_embed,
            cls_token,
            spatial_pos,
            temporal_pos,
            blocks,
            norm,
        }
    }

    pub(crate) fn validate(clips: &[&VideoClip], cfg: &ModelConfig) -> Result<()> {
        let first = clips
            .first()
            .ok_or_else(|| Error::InvalidInput("empty clip batch".into()))?;
        let frames = first.num_frames();
        for clip in clips {
            let (t, h, w, _) = clip.frames.dim();
            if t > cfg.max_frames {
                return Err(Error::TooManyFrames {
                    frames: t,
                    max: cfg.max_frames,
                });
            }
            if t != frames {
                return Err(Error::InvalidInput(
                    "all clips in a batch must have the same frame count".into(),
                ));
            }
            if h != cfg.image_size || w != cfg.image_size {
                return Err(Error::InvalidInput(format!(
                    "frames are {h}×{w}, model expects {0}×{0}",
                    cfg.image_size
                )));
            }
            if clip.frames.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "clip {} has non-finite pixel values",
                    clip.clip_id
                )));
            }
        }
        Ok(())
    }

    /// Embeds patches and classification tokens and adds positions.
    /// Returns (token rows, positional rows of the patch tokens).
    pub(crate) fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &ModelConfig,
        clips: &[&VideoClip],
    ) -> (Var, Var, GridLayout) {
        let layout = GridLayout {
            clips: clips.len(),
            frames: clips[0].num_frames(),
            patches: cfg.patches_per_frame(),
        };
        let pixels = tape.constant(patchify(clips, cfg));
        let patches = self.patch_embed.forward(tape, store, pixels);
        let positions = self.patch_positions(tape, store, layout);
        let patches = tape.add(patches, positions);

        let cls = tape.param(store, self.cls_token);
        let spatial = tape.param(store, self.spatial_pos);
        let cls_pos = tape.gather_rows(spatial, vec![0; 1].into());
        let cls = tape.add(cls, cls_pos);
        let cls_rows = tape.gather_rows(cls, vec![0; layout.clips * layout.frames].into());

        (tape.concat_rows(&[patches, cls_rows]), positions, layout)
    }

    /// Spatial plus interpolated temporal embedding for every patch row.
    pub(crate) fn patch_positions(&self, tape: &mut Tape, store: &ParamStore, layout: GridLayout) -> Var {
        let spatial = tape.param(store, self.spatial_pos);
        let temporal = tape.param(store, self.temporal_pos);
        let table_len = tape.value(temporal).nrows();
        let interp = tape.constant(temporal_interpolation(layout.frames, table_len));
        let temporal = tape.matmul(interp, temporal);
        let mut spatial_idx = Vec::with_capacity(layout.patch_rows());
        let mut temporal_idx = Vec::with_capacity(layout.patch_rows());
        for _ in 0..layout.clips {
            for t in 0..layout.frames {
                for p in 0..layout.patches {
                    spatial_idx.push(1 + p);
                    temporal_idx.push(t);
                }
            }
        }
        let s = tape.gather_rows(spatial, spatial_idx.into());
        let t = tape.gather_rows(temporal, temporal_idx.into());
        tape.add(s, t)
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &ModelConfig,
        clips: &[&VideoClip],
    ) -> Result<VideoBatch> {
        Self::validate(clips, cfg)?;
        let (mut x, positions, layout) = self.embed(tape, store, cfg, clips);
        for block in &self.blocks {
            x = block.forward(tape, store, x, layout);
        }
        let x = self.norm.forward(tape, store, x);
        let tokens = tape.gather_rows(x, (0..layout.patch_rows()).collect::<Vec<_>>().into());
        let cls_idx: Vec<usize> = (0..layout.clips * layout.frames)
            .map(|i| layout.patch_rows() + i)
            .collect();
        let frame_cls = tape.gather_rows(x, cls_idx.into());
        let mut pool = Matrix::zeros((layout.clips, layout.clips * layout.frames));
        for n in 0..layout.clips {
            for t in 0..layout.frames {
                pool[[n, n * layout.frames + t]] = 1.0 / layout.frames as f64;
            }
        }
        let pool = tape.constant(pool);
        let cls = tape.matmul(pool, frame_cls);
        Ok(VideoBatch {
            tokens,
            positions,
            cls,
            layout,
        })
    }
}
