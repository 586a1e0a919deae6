//! Run configuration: defaults, then a JSON file, then command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use surgvl::model::ModelConfig;
use surgvl::objectives::LossWeights;
use surgvl::pipeline::{FilterThresholds, PipelineConfig};
use surgvl::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    /// Reads a config file. A `run.json` written by an earlier run is
    /// accepted as well; its `config` object is used.
    pub fn from_file(path: &Path, base: RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(inner) = value.get_mut("config") {
            value = inner.take();
        }
        let mut merged = serde_json::to_value(base)?;
        merge(&mut merged, value);
        serde_json::from_value(merged).with_context(|| format!("invalid config in {}", path.display()))
    }
}

/// Overlays `patch` onto `target`, recursing into objects so a file may
/// set a single nested field.
fn merge(target: &mut serde_json::Value, patch: serde_json::Value) {
    match (target, patch) {
        (serde_json::Value::Object(t), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(t.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (t, p) => *t = p,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    Tiny,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Default => ModelConfig::default(),
            Preset::Tiny => ModelConfig::tiny(),
        }
    }
}

/// Copies every flag that was given onto the matching config field.
macro_rules! overlay {
    ($flags:expr, $cfg:expr; $($field:ident),* $(,)?) => {
        $(if let Some(v) = $flags.$field.clone() { $cfg.$field = v; })*
    };
}

#[derive(Debug, Clone, Args)]
pub struct ModelFlags {
    /// Starting point for model fields before the file and flags apply.
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub num_layers_video: Option<usize>,
    #[arg(long)]
    pub num_layers_text: Option<usize>,
    #[arg(long)]
    pub num_fusion_layers: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    /// Upper bound; the vocabulary built from the captions may be smaller.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub max_text_len: Option<usize>,
    #[arg(long)]
    pub proj_dim: Option<usize>,
    #[arg(long)]
    pub mlp_ratio: Option<usize>,
    #[arg(long)]
    pub init_std: Option<f64>,
}

impl ModelFlags {
    pub fn apply(&self, cfg: &mut ModelConfig) {
        overlay!(self, cfg; patch_size, image_size, embed_dim, num_layers_video, num_layers_text,
            num_fusion_layers, num_heads, vocab_size, max_frames, max_text_len, proj_dim, mlp_ratio, init_std);
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub base_lr: Option<f64>,
    /// Adam moment decay rates as `beta1,beta2`.
    #[arg(long, value_parser = parse_pair)]
    pub betas: Option<(f64, f64)>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Objective weights as `vtc,vtm,mlm`.
    #[arg(long, value_parser = parse_weights)]
    pub loss_weights: Option<LossWeights>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames_per_clip: Option<usize>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        overlay!(self, cfg; base_lr, betas, weight_decay, warmup_epochs, epochs, batch_size, temperature,
            loss_weights, seed, frames_per_clip, mask_rate, grad_clip, adam_eps);
        if let Some(v) = self.min_lr {
            cfg.min_lr = Some(v);
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PipelineFlags {
    /// Clip length in seconds.
    #[arg(long)]
    pub clip_len: Option<f64>,
    /// Shortest trailing segment kept as its own clip, in seconds.
    #[arg(long)]
    pub min_tail: Option<f64>,
    #[arg(long)]
    pub frames_per_second: Option<f64>,
    #[arg(long)]
    pub min_unique: Option<usize>,
    #[arg(long)]
    pub max_rep_ratio: Option<f64>,
    #[arg(long)]
    pub min_ttr: Option<f64>,
}

impl PipelineFlags {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        overlay!(self, cfg; clip_len, min_tail, frames_per_second);
        let t: &mut FilterThresholds = &mut cfg.thresholds;
        overlay!(self, t; min_unique, max_rep_ratio, min_ttr);
    }
}

fn parse_floats(s: &str, n: usize) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("expected {n} comma-separated numbers, got {}", v.len()));
    }
    Ok(v)
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    parse_floats(s, 2).map(|v| (v[0], v[1]))
}

fn parse_weights(s: &str) -> Result<LossWeights, String> {
    parse_floats(s, 3).map(|v| LossWeights {
        vtc: v[0],
        vtm: v[1],
        mlm: v[2],
    })
}
