//! Single-stage pre-training: joint VTC + VTM + MLM loss, AdamW with
//! decoupled weight decay, linear warmup then cosine decay, global-norm
//! gradient clipping, and checkpoints that resume bit-for-bit.
//!
//! Every source of randomness is derived from `(seed, step)` or
//! `(seed, epoch)`, so a run restored at step `s` draws exactly what the
//! uninterrupted run drew from step `s` on.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::archive::Archive;
use crate::autograd::{Matrix, Tape};
use crate::error::{Error, Result};
use crate::model::text::FusionInput;
use crate::model::{Modality, Model, ModelConfig, TokenSequence, Tokenizer, VideoClip, Vocabulary};
use crate::objectives::{mask_tokens, sample_vtm_negatives, total_loss, LossBundle, LossWeights, DEFAULT_MASK_RATE};
use crate::params::ParamStore;
use crate::pipeline::{Manifest, ManifestEntry, Split};
use crate::zeroshot::{self, PromptBank};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

const STEP_STREAM: u64 = 0x7374_6570;
const EPOCH_STREAM: u64 = 0x6570_6f63;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub frames_per_clip: usize,
    /// Cosine floor; `base_lr / 100` when unset.
    pub min_lr: Option<f64>,
    pub mask_rate: f64,
    /// Global gradient-norm bound.
    pub grad_clip: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            betas: (0.9, 0.95),
            weight_decay: 0.02,
            warmup_epochs: 1,
            epochs: 10,
            batch_size: 256,
            temperature: 0.07,
            loss_weights: LossWeights::default(),
            seed: 0,
            frames_per_clip: 4,
            min_lr: None,
            mask_rate: DEFAULT_MASK_RATE,
            grad_clip: 1.0,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn min_lr(&self) -> f64 {
        self.min_lr.unwrap_or(self.base_lr / 100.0)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return fail("warmup_epochs must be smaller than epochs");
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2 so every pair has a negative");
        }
        if !(self.temperature > 0.0) {
            return fail("temperature must be positive");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail("betas must lie in [0, 1)");
        }
        let min_lr = self.min_lr();
        if !(min_lr >= 0.0 && min_lr <= self.base_lr) {
            return fail("min_lr must lie in [0, base_lr]");
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return fail("mask_rate must lie in (0, 1]");
        }
        if self.frames_per_clip == 0 || !(self.grad_clip > 0.0) || !(self.adam_eps > 0.0) || self.weight_decay < 0.0 {
            return fail("frames_per_clip, grad_clip and adam_eps must be positive; weight_decay non-negative");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay that reaches
/// `min_lr` on the last step of the run (`epochs·steps_per_epoch − 1`).
pub fn lr_at_step(step: u64, steps_per_epoch: u64, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_epochs as u64 * steps_per_epoch;
    if step < warmup {
        return cfg.base_lr * step as f64 / warmup as f64;
    }
    let last = (cfg.epochs as u64 * steps_per_epoch).saturating_sub(1);
    if last <= warmup {
        return cfg.base_lr;
    }
    let progress = ((step - warmup) as f64 / (last - warmup) as f64).min(1.0);
    let min_lr = cfg.min_lr();
    min_lr + (cfg.base_lr - min_lr) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam moments for every parameter, indexed like the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|(_, p)| Matrix::zeros(p.value.dim())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Update number `t` (1-based). Weight decay is decoupled and applies
    /// only to parameters flagged for it.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Matrix], lr: f64, t: u64, cfg: &TrainConfig) {
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let decay = store.get(id).decay;
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.value_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let step = (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
                if decay {
                    *p -= lr * cfg.weight_decay * *p;
                }
                *p -= lr * step;
            });
        }
    }
}

/// A clip (already reduced to the training frame count) and its caption.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub clip: VideoClip,
    pub tokens: TokenSequence,
}

/// Loss bundle and per-parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub bundle: LossBundle,
    pub grads: Vec<Matrix>,
}

/// Forward and backward pass of the joint objective. Negatives and MLM
/// masks are drawn from `rng`.
pub fn compute_loss<R: Rng>(model: &Model, batch: &[&Example], cfg: &TrainConfig, rng: &mut R) -> Result<StepOutput> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::NoNegativeAvailable);
    }
    let clips: Vec<&VideoClip> = batch.iter().map(|e| &e.clip).collect();
    let seqs: Vec<&TokenSequence> = batch.iter().map(|e| &e.tokens).collect();
    let len = seqs[0].len();
    let first_rows = |offset: usize| -> Rc<[usize]> { (0..n).map(|b| (offset + b) * len).collect::<Vec<_>>().into() };

    let mut tape = Tape::new();
    let video = model.video_batch(&mut tape, &clips)?;
    let text = model.text_batch(&mut tape, &seqs, None)?;

    // Contrastive alignment of the projected global features.
    let text_cls = tape.gather_rows(text, first_rows(0));
    let gv = model.project_rows(&mut tape, video.cls, Modality::Video);
    let gw = model.project_rows(&mut tape, text_cls, Modality::Text);
    let gw_t = tape.transpose(gw);
    let sims = tape.matmul(gv, gw_t);
    let vtc = tape.vtc_loss(sims, cfg.temperature)?;

    // One fused pass over positives, negatives and masked captions.
    let negatives = sample_vtm_negatives(n, rng)?;
    let masked = seqs
        .iter()
        .map(|s| mask_tokens(s, cfg.mask_rate, model.config.vocab_size, rng.random()))
        .collect::<Result<Vec<_>>>()?;
    let fused_seqs: Vec<&TokenSequence> = seqs
        .iter()
        .copied()
        .chain(negatives.iter().map(|&j| seqs[j]))
        .chain(masked.iter().map(|(s, _)| s))
        .collect();
    let pairing: Vec<usize> = (0..3).flat_map(|_| 0..n).collect();
    let (memory, clip_rows) = model.fusion_memory(&mut tape, &video);
    let fusion = FusionInput {
        memory,
        clip_rows: &clip_rows,
        pairing: &pairing,
    };
    let fused = model.text_batch(&mut tape, &fused_seqs, Some(&fusion))?;

    let h_pos = tape.gather_rows(fused, first_rows(0));
    let h_neg = tape.gather_rows(fused, first_rows(n));
    let s_pos = model.linear_head(&mut tape, model.heads.vtm, h_pos);
    let s_neg = model.linear_head(&mut tape, model.heads.vtm, h_neg);
    let vtm = tape.vtm_loss(s_pos, s_neg)?;

    let masked_rows: Vec<usize> = masked
        .iter()
        .enumerate()
        .flat_map(|(b, (_, plan))| plan.masked_positions.iter().map(move |p| (2 * n + b) * len + p))
        .collect();
    let features = tape.gather_rows(fused, masked_rows.into());
    let logits = model.linear_head(&mut tape, model.heads.mlm, features);
    let mut offset = 0;
    let mut per_seq = Vec::with_capacity(n);
    for (_, plan) in &masked {
        let rows: Rc<[usize]> = (offset..offset + plan.len()).collect::<Vec<_>>().into();
        offset += plan.len();
        let seq_logits = tape.gather_rows(logits, rows);
        per_seq.push((tape.cross_entropy(seq_logits, &plan.original_ids)?, 1.0 / n as f64));
    }
    let mlm = tape.weighted_sum(&per_seq);

    let w = cfg.loss_weights;
    let bundle = total_loss(tape.scalar(vtc), tape.scalar(vtm), tape.scalar(mlm), w)?;
    let root = tape.weighted_sum(&[(vtc, w.vtc), (vtm, w.vtm), (mlm, w.mlm)]);
    let grads = tape.backward(root);
    let grads = model
        .params
        .iter()
        .map(|(id, p)| grads.param(id).cloned().unwrap_or_else(|| Matrix::zeros(p.value.dim())))
        .collect();
    Ok(StepOutput { bundle, grads })
}

fn derived_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

/// Generator used for negatives and masks at `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    derived_rng(seed, STEP_STREAM, step)
}

/// Full batches per epoch; the shuffled remainder is skipped.
pub fn steps_per_epoch(num_examples: usize, batch_size: usize) -> u64 {
    (num_examples / batch_size.min(num_examples).max(1)) as u64
}

/// Example indices of the batch trained at `step`.
pub fn batch_indices(step: u64, num_examples: usize, batch_size: usize, seed: u64) -> Vec<usize> {
    let bs = batch_size.min(num_examples);
    let spe = steps_per_epoch(num_examples, batch_size);
    let epoch = step / spe;
    let slot = (step % spe) as usize;
    let mut order: Vec<usize> = (0..num_examples).collect();
    order.shuffle(&mut derived_rng(seed, EPOCH_STREAM, epoch));
    order[slot * bs..(slot + 1) * bs].to_vec()
}

fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Weights, optimizer state and bookkeeping of a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub tokenizer: Tokenizer,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    /// Updates applied so far.
    pub step: u64,
    pub steps_per_epoch: u64,
    pub best_val_accuracy: Option<f64>,
}

impl TrainState {
    pub fn new(model: Model, tokenizer: Tokenizer, config: TrainConfig, steps_per_epoch: u64) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() > model.config.vocab_size || tokenizer.max_len > model.config.max_text_len {
            return Err(Error::InvalidConfig(
                "tokenizer vocabulary or length exceeds the model's".into(),
            ));
        }
        if steps_per_epoch == 0 {
            return Err(Error::NoData);
        }
        let optimizer = AdamW::new(&model.params);
        Ok(Self {
            model,
            tokenizer,
            config,
            optimizer,
            step: 0,
            steps_per_epoch,
            best_val_accuracy: None,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.config.epochs as u64 * self.steps_per_epoch
    }
}

/// One optimization step. A non-finite loss or gradient leaves the state
/// untouched and reports [`Error::DivergedStep`].
pub fn train_step(state: &mut TrainState, batch: &[&Example]) -> Result<LossBundle> {
    let step = state.step;
    let diverged = |diagnostics: String| Error::DivergedStep { step, diagnostics };
    let mut rng = step_rng(state.config.seed, step);
    let out = match compute_loss(&state.model, batch, &state.config, &mut rng) {
        Ok(out) => out,
        Err(e @ (Error::InvalidLoss | Error::InvalidSimilarity | Error::InvalidLogit)) => {
            return Err(diverged(format!("non-finite forward pass ({e})")));
        }
        Err(e) => return Err(e),
    };
    let mut grads = out.grads;
    let norm = global_norm(&grads);
    if !norm.is_finite() {
        return Err(diverged(format!(
            "gradient norm {norm}; losses vtc {} vtm {} mlm {}",
            out.bundle.vtc, out.bundle.vtm, out.bundle.mlm
        )));
    }
    if norm > state.config.grad_clip {
        let scale = state.config.grad_clip / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    let lr = lr_at_step(step, state.steps_per_epoch, &state.config);
    state
        .optimizer
        .update(&mut state.model.params, &grads, lr, step + 1, &state.config);
    state.step += 1;
    Ok(out.bundle)
}

/// Runs steps until `state.step == until`, calling `on_step` after each.
pub fn run_steps(
    state: &mut TrainState,
    examples: &[Example],
    until: u64,
    mut on_step: impl FnMut(u64, &LossBundle),
) -> Result<()> {
    while state.step < until {
        let idx = batch_indices(state.step, examples.len(), state.config.batch_size, state.config.seed);
        let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let bundle = train_step(state, &batch)?;
        on_step(state.step, &bundle);
    }
    Ok(())
}

// ---- checkpoints ----

fn optim_name(kind: &str, param: &str) -> String {
    format!("optim.{kind}/{param}")
}

pub fn checkpoint_archive(state: &TrainState) -> Result<Archive> {
    let mut archive = Archive::new(json!({
        "kind": "checkpoint",
        "checkpoint_version": CHECKPOINT_VERSION,
        "model_config": serde_json::to_value(&state.model.config)?,
        "train_config": serde_json::to_value(&state.config)?,
        "step": state.step,
        "steps_per_epoch": state.steps_per_epoch,
        "best_val_accuracy": state.best_val_accuracy,
        "vocab": serde_json::to_value(&state.tokenizer.vocab)?,
        "max_text_len": state.tokenizer.max_len,
    }));
    for (_, p) in state.model.params.iter() {
        archive.push(p.name.clone(), p.value.clone());
    }
    for (id, p) in state.model.params.iter() {
        archive.push(optim_name("m", &p.name), state.optimizer.m[id.index()].clone());
        archive.push(optim_name("v", &p.name), state.optimizer.v[id.index()].clone());
    }
    Ok(archive)
}

fn meta<'a>(archive: &'a Archive, key: &str) -> Result<&'a Value> {
    archive
        .metadata
        .get(key)
        .ok_or_else(|| Error::CorruptArchive(format!("checkpoint metadata lacks `{key}`")))
}

pub fn state_from_archive(archive: &Archive) -> Result<TrainState> {
    let version = meta(archive, "checkpoint_version")?
        .as_u64()
        .ok_or_else(|| Error::CorruptArchive("checkpoint_version is not an integer".into()))?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::VersionMismatch {
            found: version as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let model = Model::from_archive(archive)?;
    let config: TrainConfig = serde_json::from_value(meta(archive, "train_config")?.clone())?;
    let vocab: Vocabulary = serde_json::from_value(meta(archive, "vocab")?.clone())?;
    let max_len = serde_json::from_value(meta(archive, "max_text_len")?.clone())?;
    let tokenizer = Tokenizer::new(vocab, max_len)?;
    let step = serde_json::from_value(meta(archive, "step")?.clone())?;
    let steps_per_epoch = serde_json::from_value(meta(archive, "steps_per_epoch")?.clone())?;
    let best_val_accuracy = serde_json::from_value(meta(archive, "best_val_accuracy")?.clone())?;
    let mut optimizer = AdamW::new(&model.params);
    for (id, p) in model.params.iter() {
        for (kind, slot) in [("m", &mut optimizer.m), ("v", &mut optimizer.v)] {
            let name = optim_name(kind, &p.name);
            let value = archive
                .get(&name)
                .ok_or_else(|| Error::CorruptArchive(format!("missing optimizer tensor {name}")))?;
            if value.dim() != p.value.dim() {
                return Err(Error::CorruptArchive(format!("{name} has shape {:?}", value.dim())));
            }
            slot[id.index()] = value.clone();
        }
    }
    Ok(TrainState {
        model,
        tokenizer,
        config,
        optimizer,
        step,
        steps_per_epoch,
        best_val_accuracy,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    checkpoint_archive(state)?.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    state_from_archive(&Archive::read(path)?)
}

// ---- corpus-level training ----

/// Vocabulary from the training captions, capped at `vocab_size` entries.
pub fn build_tokenizer<'a>(captions: impl IntoIterator<Item = &'a str>, model: &ModelConfig) -> Result<Tokenizer> {
    let vocab = Vocabulary::build(captions, 1);
    let mut tokens: Vec<String> = vocab.into();
    tokens.truncate(model.vocab_size);
    Tokenizer::new(tokens.into(), model.max_text_len)
}

/// Loads kept entries of `split` with `frames` uniformly sampled frames.
pub fn load_clips(manifest: &Manifest, base: &Path, split: Split, frames: usize) -> Result<Vec<VideoClip>> {
    let entries: Vec<&ManifestEntry> = manifest.kept_in(split).collect();
    entries.par_iter().map(|e| e.load_clip(base, Some(frames))).collect()
}

pub fn load_examples(manifest: &Manifest, base: &Path, tokenizer: &Tokenizer, frames: usize) -> Result<Vec<Example>> {
    let entries: Vec<&ManifestEntry> = manifest.kept_in(Split::Train).collect();
    entries
        .par_iter()
        .map(|e| {
            let caption = e
                .caption
                .as_deref()
                .ok_or_else(|| Error::InvalidInput(format!("kept clip {} has no caption", e.clip_id)))?;
            Ok(Example {
                clip: e.load_clip(base, Some(frames))?,
                tokens: tokenizer.tokenize(caption)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub mean_loss: LossBundle,
    pub val_accuracy: Option<f64>,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<LossBundle>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<u64>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

fn mean_bundle(bundles: &[LossBundle], weights: LossWeights) -> Result<LossBundle> {
    let n = bundles.len().max(1) as f64;
    let avg = |f: fn(&LossBundle) -> f64| bundles.iter().map(f).sum::<f64>() / n;
    total_loss(avg(|b| b.vtc), avg(|b| b.vtm), avg(|b| b.mlm), weights)
}

/// Trains on the manifest's training split. After every epoch the model
/// is scored by zero-shot accuracy on the validation split (when both the
/// split and `prompts` are available); `best.ckpt` keeps the highest score
/// and `last.ckpt` the latest state.
pub fn train(
    manifest: &Manifest,
    base: &Path,
    model_config: ModelConfig,
    config: TrainConfig,
    prompts: Option<&PromptBank>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    let captions: Vec<&str> = manifest
        .kept_in(Split::Train)
        .filter_map(|e| e.caption.as_deref())
        .collect();
    if captions.len() < 2 {
        return Err(Error::NoData);
    }
    let tokenizer = build_tokenizer(captions.iter().copied(), &model_config)?;
    let model_config = ModelConfig {
        vocab_size: tokenizer.vocab_size(),
        ..model_config
    };
    let examples = load_examples(manifest, base, &tokenizer, config.frames_per_clip)?;
    let val_clips = match prompts {
        Some(_) => load_clips(manifest, base, Split::Val, config.frames_per_clip)?,
        None => Vec::new(),
    };
    let model = Model::new(model_config, config.seed)?;
    let spe = steps_per_epoch(examples.len(), config.batch_size);
    let state = TrainState::new(model, tokenizer, config, spe)?;
    train_from(state, &examples, &val_clips, prompts, out_dir)
}

/// Continues `state` to the end of its configured epochs.
pub fn train_from(
    mut state: TrainState,
    examples: &[Example],
    val_clips: &[VideoClip],
    prompts: Option<&PromptBank>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut best_epoch = None;
    let total = state.total_steps();
    while state.step < total {
        let epoch = state.epoch();
        let end = (epoch + 1) * state.steps_per_epoch;
        let mut epoch_losses = Vec::new();
        let lr = lr_at_step(state.step, state.steps_per_epoch, &state.config);
        run_steps(&mut state, examples, end, |step, bundle| {
            log::debug!("step {step}: total {:.5}", bundle.total);
            epoch_losses.push(*bundle);
        })?;
        let val_accuracy = match prompts {
            Some(bank) if !val_clips.is_empty() => Some(
                zeroshot::evaluate(val_clips, &state.model, &state.tokenizer, bank, state.config.frames_per_clip)?
                    .accuracy,
            ),
            _ => None,
        };
        let mean_loss = mean_bundle(&epoch_losses, state.config.loss_weights)?;
        log::info!(
            "epoch {epoch}: loss {:.4} (vtc {:.4} vtm {:.4} mlm {:.4}) val acc {:?}",
            mean_loss.total,
            mean_loss.vtc,
            mean_loss.vtm,
            mean_loss.mlm,
            val_accuracy
        );
        if let Some(acc) = val_accuracy {
            if state.best_val_accuracy.is_none_or(|best| acc > best) {
                state.best_val_accuracy = Some(acc);
                best_epoch = Some(epoch);
                save_checkpoint(&state, &best_path)?;
            }
        }
        save_checkpoint(&state, &last_path)?;
        history.extend(epoch_losses);
        epochs.push(EpochRecord {
            epoch,
            step: state.step,
            mean_loss,
            val_accuracy,
            lr,
        });
    }
    Ok(TrainOutcome {
        state,
        history,
        epochs,
        best_epoch,
        last_checkpoint: last_path,
        best_checkpoint: best_path.exists().then_some(best_path),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            warmup_epochs: 1,
            epochs: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg();
        assert_eq!(lr_at_step(0, 10, &c), 0.0);
        assert_eq!(lr_at_step(5, 10, &c), 0.5e-4);
        assert_eq!(lr_at_step(10, 10, &c), 1e-4);
        assert!((lr_at_step(49, 10, &c) - 1e-6).abs() < 1e-18);
        assert!(lr_at_step(9, 10, &c) < 1e-4 && lr_at_step(11, 10, &c) < 1e-4);
    }

    #[test]
    fn config_invariants() {
        cfg().validate().unwrap();
        assert!(TrainConfig { batch_size: 1, ..cfg() }.validate().is_err());
        assert!(TrainConfig { warmup_epochs: 5, ..cfg() }.validate().is_err());
        assert!(TrainConfig { base_lr: 0.0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..3).flat_map(|s| batch_indices(s, 10, 3, 7)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(batch_indices(4, 10, 3, 7), batch_indices(4, 10, 3, 7));
        assert_ne!(batch_indices(0, 10, 3, 7), batch_indices(3, 10, 3, 7));
    }

    #[test]
    fn zero_gradients_leave_undecayed_params() {
        let mut store = ParamStore::default();
        let w = store.insert("w", Matrix::from_elem((2, 2), 1.0), true);
        let b = store.insert("b", Matrix::from_elem((1, 2), 1.0), false);
        let mut opt = AdamW::new(&store);
        let grads = vec![Matrix::zeros((2, 2)), Matrix::zeros((1, 2))];
        opt.update(&mut store, &grads, 0.1, 1, &cfg());
        assert_eq!(store.value(b), &Matrix::from_elem((1, 2), 1.0));
        assert!(store.value(w).iter().all(|&v| (v - (1.0 - 0.1 * 0.02)).abs() < 1e-15));
    }
}
