//! Dual encoders, projection heads and the video-to-text fusion module.

pub mod config;
pub mod layers;
pub mod text;
pub mod tokenizer;
pub mod video;

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub use config::ModelConfig;
pub use text::{FusedFeatures, TextFeatures};
pub use tokenizer::{TokenSequence, Tokenizer, Vocabulary};
pub use video::{VideoClip, VideoFeatures};

use crate::archive::Archive;
use crate::autograd::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use layers::{Init, Linear};
use text::{FusionInput, TextEncoder};
use video::{GridLayout, VideoBatch, VideoEncoder};

const UNIT_NORM_TOL: f64 = 1e-5;

/// A unit-norm vector in the shared contrastive space.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEmbedding {
    pub vector: Array1<f64>,
}

impl GlobalEmbedding {
    pub fn norm(&self) -> f64 {
        self.vector.dot(&self.vector).sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOL
    }
}

/// Linear map to the shared space followed by Euclidean normalization.
pub fn project_global(cls: ArrayView1<'_, f64>, weight: &Matrix, bias: &Matrix) -> Result<GlobalEmbedding> {
    if cls.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite classification feature".into()));
    }
    if cls.len() != weight.nrows() {
        return Err(Error::InvalidInput(format!(
            "feature width {} does not match projection input {}",
            cls.len(),
            weight.nrows()
        )));
    }
    let projected = cls.dot(weight) + bias.row(0);
    let norm = projected.dot(&projected).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(GlobalEmbedding {
        vector: projected / norm,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub video_proj: Linear,
    pub text_proj: Linear,
    /// Matching head Q: embed_dim → 1.
    pub vtm: Linear,
    /// MLM head R: embed_dim → vocab_size.
    pub mlm: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Video,
    Text,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImportReport {
    pub loaded: Vec<String>,
    /// Model parameters absent from the archive (left unchanged).
    pub missing: Vec<String>,
    /// Archive tensors with no matching parameter.
    pub unexpected: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub video: VideoEncoder,
    pub text: TextEncoder,
    pub heads: Heads,
}

impl Model {
    /// Randomly initialized model: truncated normal (σ = `init_std`) for
    /// projections and embeddings, zeros for biases, zero temporal and
    /// cross-attention output projections.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let video = VideoEncoder::new(&mut params, &mut rng, &config);
        let text = TextEncoder::new(&mut params, &mut rng, &config);
        let (d, std) = (config.embed_dim, config.init_std);
        let heads = Heads {
            video_proj: Linear::new(&mut params, &mut rng, "heads.video_proj", d, config.proj_dim, std, Init::Normal),
            text_proj: Linear::new(&mut params, &mut rng, "heads.text_proj", d, config.proj_dim, std, Init::Normal),
            vtm: Linear::new(&mut params, &mut rng, "heads.vtm", d, 1, std, Init::Normal),
            mlm: Linear::new(&mut params, &mut rng, "heads.mlm", d, config.vocab_size, std, Init::Normal),
        };
        Ok(Self {
            config,
            params,
            video,
            text,
            heads,
        })
    }

    fn projection(&self, modality: Modality) -> Linear {
        match modality {
            Modality::Video => self.heads.video_proj,
            Modality::Text => self.heads.text_proj,
        }
    }

    // ---- tape-level building blocks (shared with the trainer) ----

    pub(crate) fn video_batch(&self, tape: &mut Tape, clips: &[&VideoClip]) -> Result<VideoBatch> {
        self.video.forward(tape, &self.params, &self.config, clips)
    }

    /// Memory rows and per-clip row lists for fusing against `batch`.
    pub(crate) fn fusion_memory(&self, tape: &mut Tape, batch: &VideoBatch) -> (Var, Vec<Vec<usize>>) {
        let memory = tape.add(batch.tokens, batch.positions);
        (memory, clip_rows(batch.layout))
    }

    pub(crate) fn text_batch(
        &self,
        tape: &mut Tape,
        seqs: &[&TokenSequence],
        fusion: Option<&FusionInput<'_>>,
    ) -> Result<Var> {
        self.text.forward(tape, &self.params, &self.config, seqs, fusion)
    }

    /// Normalized projections of the given feature rows.
    pub(crate) fn project_rows(&self, tape: &mut Tape, rows: Var, modality: Modality) -> Var {
        let projected = self.projection(modality).forward(tape, &self.params, rows);
        tape.l2_normalize_rows(projected)
    }

    pub(crate) fn linear_head(&self, tape: &mut Tape, head: Linear, rows: Var) -> Var {
        head.forward(tape, &self.params, rows)
    }

    // ---- single-example API ----

    pub fn encode_video(&self, clip: &VideoClip) -> Result<VideoFeatures> {
        Ok(self.encode_videos(&[clip])?.remove(0))
    }

    pub fn encode_videos(&self, clips: &[&VideoClip]) -> Result<Vec<VideoFeatures>> {
        let mut tape = Tape::new();
        let batch = self.video_batch(&mut tape, clips)?;
        let GridLayout { frames, patches, .. } = batch.layout;
        let tokens = tape.value(batch.tokens);
        let cls = tape.value(batch.cls);
        let per_clip = frames * patches;
        Ok((0..clips.len())
            .map(|n| {
                let rows = tokens.slice(ndarray::s![n * per_clip..(n + 1) * per_clip, ..]);
                VideoFeatures {
                    tokens: rows
                        .to_owned()
                        .into_shape_with_order((frames, patches, self.config.embed_dim))
                        .expect("row count matches grid"),
                    cls: cls.row(n).to_owned(),
                }
            })
            .collect())
    }

    pub fn encode_text(&self, tokens: &TokenSequence) -> Result<TextFeatures> {
        let mut tape = Tape::new();
        let out = self.text_batch(&mut tape, &[tokens], None)?;
        Ok(TextFeatures {
            embeddings: tape.value(out).clone(),
        })
    }

    /// Runs the text encoder with cross-attention to `video` in the fusion
    /// layers. The video tokens are carried through unchanged.
    pub fn fuse(&self, video: &VideoFeatures, text: &TokenSequence) -> Result<FusedFeatures> {
        let (frames, patches, d) = video.tokens.dim();
        if d != self.config.embed_dim || patches != self.config.patches_per_frame() {
            return Err(Error::InvalidInput(format!(
                "video tokens {:?} do not match the model grid",
                video.tokens.dim()
            )));
        }
        if frames == 0 || frames > self.config.max_frames {
            return Err(Error::TooManyFrames {
                frames,
                max: self.config.max_frames,
            });
        }
        let layout = GridLayout {
            clips: 1,
            frames,
            patches,
        };
        let mut tape = Tape::new();
        let flat = video
            .tokens
            .clone()
            .into_shape_with_order((frames * patches, d))
            .expect("contiguous grid");
        let tokens = tape.constant(flat);
        let positions = self.video.patch_positions(&mut tape, &self.params, layout);
        let memory = tape.add(tokens, positions);
        let rows = clip_rows(layout);
        let fusion = FusionInput {
            memory,
            clip_rows: &rows,
            pairing: &[0],
        };
        let out = self.text_batch(&mut tape, &[text], Some(&fusion))?;
        let text_part = tape.value(out).clone();
        Ok(FusedFeatures {
            video_part: video.tokens.clone(),
            global: text_part.row(0).to_owned(),
            text_part,
        })
    }

    pub fn project_global(&self, cls: ArrayView1<'_, f64>, modality: Modality) -> Result<GlobalEmbedding> {
        let head = self.projection(modality);
        project_global(cls, self.params.value(head.weight), self.params.value(head.bias))
    }

    pub fn video_embedding(&self, clip: &VideoClip) -> Result<GlobalEmbedding> {
        let features = self.encode_video(clip)?;
        self.project_global(features.cls.view(), Modality::Video)
    }

    pub fn text_embedding(&self, tokens: &TokenSequence) -> Result<GlobalEmbedding> {
        let features = self.encode_text(tokens)?;
        self.project_global(features.embeddings.row(0), Modality::Text)
    }

    /// Applies video block `index` to one clip's token grid (T×P×d) and
    /// per-frame classification tokens (T×d).
    pub fn video_block(&self, index: usize, tokens: &Array3<f64>, cls: &Array2<f64>) -> Result<(Array3<f64>, Array2<f64>)> {
        let block = self
            .video
            .blocks
            .get(index)
            .ok_or_else(|| Error::InvalidInput(format!("no video block {index}")))?;
        let (frames, patches, d) = tokens.dim();
        if cls.dim() != (frames, d) || d != self.config.embed_dim || frames == 0 || patches == 0 {
            return Err(Error::InvalidInput(format!(
                "token grid {:?} and cls {:?} are inconsistent",
                tokens.dim(),
                cls.dim()
            )));
        }
        let layout = GridLayout {
            clips: 1,
            frames,
            patches,
        };
        let mut tape = Tape::new();
        let flat = tokens
            .clone()
            .into_shape_with_order((frames * patches, d))
            .expect("contiguous grid");
        let patch_rows = tape.constant(flat);
        let cls_rows = tape.constant(cls.clone());
        let x = tape.concat_rows(&[patch_rows, cls_rows]);
        let y = block.forward(&mut tape, &self.params, x, layout);
        let y = tape.value(y);
        let out_tokens = y
            .slice(ndarray::s![..frames * patches, ..])
            .to_owned()
            .into_shape_with_order((frames, patches, d))
            .expect("row count matches grid");
        let out_cls = y.slice(ndarray::s![frames * patches.., ..]).to_owned();
        Ok((out_tokens, out_cls))
    }

    // ---- weight archive ----

    pub fn export_weights(&self) -> Result<Archive> {
        let mut archive = Archive::new(json!({
            "kind": "weights",
            "model_config": serde_json::to_value(&self.config)?,
        }));
        for (_, p) in self.params.iter() {
            archive.push(p.name.clone(), p.value.clone());
        }
        Ok(archive)
    }

    /// Builds a model from an archive written by [`Model::export_weights`]
    /// (or a checkpoint, which embeds the same entries).
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            archive
                .metadata
                .get("model_config")
                .cloned()
                .ok_or_else(|| Error::CorruptArchive("missing model_config".into()))?,
        )?;
        let mut model = Self::new(config, 0)?;
        let report = model.import_weights(archive, false)?;
        if !report.missing.is_empty() {
            return Err(Error::CorruptArchive(format!(
                "archive lacks parameters: {}",
                report.missing.join(", ")
            )));
        }
        Ok(model)
    }

    /// Copies every archive tensor whose name matches a parameter. With
    /// `strict`, missing or unexpected names are an error. Names and shapes
    /// are checked before anything is written, so a failed import leaves
    /// the model unchanged.
    pub fn import_weights(&mut self, archive: &Archive, strict: bool) -> Result<ImportReport> {
        let mut report = ImportReport::default();
        for (name, value) in &archive.tensors {
            match self.params.find(name) {
                Some(id) => {
                    let have = self.params.value(id).dim();
                    if have != value.dim() {
                        return Err(Error::InvalidInput(format!(
                            "parameter `{name}` has shape {have:?}, import has {:?}",
                            value.dim()
                        )));
                    }
                    report.loaded.push(name.clone());
                }
                None if !name.starts_with("optim.") => report.unexpected.push(name.clone()),
                None => {}
            }
        }
        report.missing = self
            .params
            .iter()
            .filter(|(_, p)| archive.get(&p.name).is_none())
            .map(|(_, p)| p.name.clone())
            .collect();
        if strict && !(report.missing.is_empty() && report.unexpected.is_empty()) {
            return Err(Error::InvalidInput(format!(
                "weight import mismatch: missing {:?}, unexpected {:?}",
                report.missing, report.unexpected
            )));
        }
        for name in &report.loaded {
            if let Some(value) = archive.get(name) {
                self.params.assign(name, value)?;
            }
        }
        Ok(report)
    }
}

fn clip_rows(layout: GridLayout) -> Vec<Vec<usize>> {
    let per_clip = layout.frames * layout.patches;
    (0..layout.clips)
        .map(|n| (n * per_clip..(n + 1) * per_clip).collect())
        .collect()
}
