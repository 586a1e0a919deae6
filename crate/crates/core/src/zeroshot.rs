//! Zero-shot phase recognition: class prompts and clips are embedded into
//! the shared space and every clip takes the label of its most similar
//! prompt.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GlobalEmbedding, Model, Tokenizer, VideoClip};
use crate::pipeline::sample_frames;

/// Prompt bank files shipped with the crate (tab-separated label, prompt).
pub const CHOLEC80_PROMPTS: &str = include_str!("../prompts/cholec80.tsv");
pub const AUTOLAPARO_PROMPTS: &str = include_str!("../prompts/autolaparo.tsv");
pub const DEFAULT_ABLATION_FRAMES: [usize; 6] = [1, 4, 8, 16, 32, 45];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhasePrompt {
    pub label: String,
    pub prompt_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBank {
    prompts: Vec<PhasePrompt>,
}

impl PromptBank {
    pub fn new(prompts: Vec<PhasePrompt>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::InvalidInput("prompt bank is empty".into()));
        }
        let mut seen = HashSet::new();
        for p in &prompts {
            if !seen.insert(p.label.as_str()) {
                return Err(Error::DuplicateLabel(p.label.clone()));
            }
        }
        Ok(Self { prompts })
    }

    /// One `label<TAB>prompt` record per line; blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let prompts = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|line| {
                let (label, prompt) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::InvalidInput(format!("prompt record without a tab: {line:?}")))?;
                Ok(PhasePrompt {
                    label: label.trim().to_string(),
                    prompt_text: prompt.trim().to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(prompts)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_tsv(&self) -> String {
        self.prompts
            .iter()
            .map(|p| format!("{}\t{}\n", p.label, p.prompt_text))
            .collect()
    }

    pub fn cholec80() -> Self {
        Self::parse(CHOLEC80_PROMPTS).expect("bundled bank is well-formed")
    }

    pub fn autolaparo() -> Self {
        Self::parse(AUTOLAPARO_PROMPTS).expect("bundled bank is well-formed")
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompts(&self) -> &[PhasePrompt] {
        &self.prompts
    }

    pub fn labels(&self) -> Vec<&str> {
        self.prompts.iter().map(|p| p.label.as_str()).collect()
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.prompts
            .iter()
            .position(|p| p.label == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }
}

/// Unit-norm text embedding of every prompt, in bank order.
pub fn embed_prompts(bank: &PromptBank, model: &Model, tokenizer: &Tokenizer) -> Result<Vec<GlobalEmbedding>> {
    bank.prompts
        .iter()
        .map(|p| model.text_embedding(&tokenizer.tokenize(&p.prompt_text)?))
        .collect()
}

/// Embeds the `k` uniformly sampled frames of `clip`.
pub fn embed_clip(clip: &VideoClip, k: usize, model: &Model) -> Result<GlobalEmbedding> {
    let indices = sample_frames(clip.num_frames(), k)?;
    if indices.len() == clip.num_frames() {
        return model.video_embedding(clip);
    }
    model.video_embedding(&clip.select_frames(&indices)?)
}

/// Index of the most similar class; the first one wins ties.
pub fn classify(clip: &GlobalEmbedding, classes: &[GlobalEmbedding]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, c) in classes.iter().enumerate() {
        let score = clip.vector.dot(&c.vector);
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Mean F1 over classes with non-zero support.
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are true labels, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    pub k_frames: usize,
    pub num_clips: usize,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, per-class precision/recall/F1 and macro F1 from a confusion
/// matrix. Undefined precision or recall counts as zero.
pub fn metrics_from_confusion(confusion: &[Vec<u64>], labels: &[&str], k_frames: usize) -> Result<EvalResult> {
    let k = labels.len();
    if confusion.len() != k || confusion.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidInput(format!(
            "confusion matrix must be {k}×{k}"
        )));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::InvalidInput("no clips to evaluate".into()));
    }
    let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                label: labels[c].to_string(),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let supported: Vec<f64> = per_class.iter().filter(|m| m.support > 0).map(|m| m.f1).collect();
    Ok(EvalResult {
        accuracy: correct as f64 / total as f64,
        macro_f1: supported.iter().sum::<f64>() / supported.len() as f64,
        per_class,
        confusion: confusion.to_vec(),
        k_frames,
        num_clips: total as usize,
    })
}

/// Classifies every clip with `k` frames. Clips must carry a label from
/// the bank.
pub fn evaluate(
    clips: &[VideoClip],
    model: &Model,
    tokenizer: &Tokenizer,
    bank: &PromptBank,
    k: usize,
) -> Result<EvalResult> {
    let truth = clips
        .iter()
        .map(|c| {
            let label = c
                .phase_label
                .as_deref()
                .ok_or_else(|| Error::InvalidInput(format!("clip {} has no phase label", c.clip_id)))?;
            bank.index_of(label)
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = embed_prompts(bank, model, tokenizer)?;
    let predictions = clips
        .par_iter()
        .map(|c| embed_clip(c, k, model).map(|e| classify(&e, &classes)))
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = vec![vec![0u64; bank.len()]; bank.len()];
    for (t, p) in truth.iter().zip(&predictions) {
        confusion[*t][*p] += 1;
    }
    metrics_from_confusion(&confusion, &bank.labels(), k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<EvalResult>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frames,clips,accuracy,macro_f1\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.k_frames, r.num_clips, r.accuracy, r.macro_f1);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:>7} {:>6} {:>9} {:>9}\n", "frames", "clips", "acc (%)", "F1 (%)");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>7} {:>6} {:>9.1} {:>9.1}",
                r.k_frames,
                r.num_clips,
                100.0 * r.accuracy,
                100.0 * r.macro_f1
            );
        }
        out
    }

    /// Writes `ablation.json`, `ablation.csv` and `ablation.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self)?;
        for (name, body) in [
            ("ablation.json", json),
            ("ablation.csv", self.to_csv()),
            ("ablation.txt", self.to_text()),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// One evaluation per frame count over the same clips.
pub fn frame_ablation(
    clips: &[VideoClip],
    model: &Model,
    tokenizer: &Tokenizer,
    bank: &PromptBank,
    k_list: &[usize],
) -> Result<AblationTable> {
    let available = clips.iter().map(VideoClip::num_frames).min().unwrap_or(0);
    if let Some(&k) = k_list.iter().find(|&&k| k > available) {
        return Err(Error::NotEnoughFrames {
            requested: k,
            available,
        });
    }
    let rows = k_list
        .iter()
        .map(|&k| evaluate(clips, model, tokenizer, bank, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}

/// Stacks embeddings row-wise.
pub fn embedding_matrix(embeddings: &[GlobalEmbedding]) -> Array2<f64> {
    let dim = embeddings.first().map_or(0, |e| e.vector.len());
    Array2::from_shape_fn((embeddings.len(), dim), |(i, j)| embeddings[i].vector[j])
}
