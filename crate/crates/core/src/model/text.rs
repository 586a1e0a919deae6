//! Text encoder. The trailing `num_fusion_layers` layers carry a
//! cross-attention sub-layer (text queries, video keys/values) between
//! self-attention and the MLP; it is skipped for plain text encoding.

use std::rc::Rc;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use super::config::ModelConfig;
use super::layers::{Attention, Init, LayerNorm, Mlp};
use super::tokenizer::{TokenSequence, CLS_ID};
use crate::autograd::{AttnGroup, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    /// L×embed_dim.
    pub embeddings: Array2<f64>,
}

impl TextFeatures {
    pub fn cls(&self) -> Array1<f64> {
        self.embeddings.row(0).to_owned()
    }
}

/// H = [H^v, h^c, H^w].
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures {
    /// Video tokens as given to the fusion pass (T×P×embed_dim).
    pub video_part: Array3<f64>,
    /// Classification-position output.
    pub global: Array1<f64>,
    /// All text positions (L×embed_dim); row 0 equals `global`.
    pub text_part: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    pub norm: LayerNorm,
    pub attn: Attention,
}

#[derive(Debug, Clone, Copy)]
pub struct TextLayer {
    pub self_norm: LayerNorm,
    pub self_attn: Attention,
    pub cross: Option<CrossAttention>,
    pub mlp_norm: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<TextLayer>,
    pub norm: LayerNorm,
}

/// Video rows that fused text sequences may attend to.
pub(crate) struct FusionInput<'a> {
    /// Memory rows (video tokens plus their positional embeddings).
    pub memory: Var,
    /// Memory row indices of each clip.
    pub clip_rows: &'a [Vec<usize>],
    /// Clip index for each text sequence.
    pub pairing: &'a [usize],
}

impl TextEncoder {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        let (d, h, std) = (cfg.embed_dim, cfg.num_heads, cfg.init_std);
        let token_embed = store.insert("text.token_embed", truncated_normal(rng, cfg.vocab_size, d, std), true);
        let pos_embed = store.insert("text.pos_embed", truncated_normal(rng, cfg.max_text_len, d, std), true);
        let first_fusion = cfg.num_layers_text - cfg.num_fusion_layers;
        let layers = (0..cfg.num_layers_text)
            .map(|i| {
                let name = format!("text.layers.{i}");
                TextLayer {
                    self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d),
                    self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), d, h, std, Init::Normal),
                    cross: (i >= first_fusion).then(|| CrossAttention {
                        norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d),
                        attn: Attention::new(store, rng, &format!("{name}.cross_attn"), d, h, std, Init::Zeros),
                    }),
                    mlp_norm: LayerNorm::new(store, &format!("{name}.mlp_norm"), d),
                    mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, d * cfg.mlp_ratio, std),
                }
            })
            .collect();
        let norm = LayerNorm::new(store, "text.norm", d);
        Self {
            token_embed,
            pos_embed,
            layers,
            norm,
        }
    }

    pub(crate) fn validate(seqs: &[&TokenSequence], cfg: &ModelConfig) -> Result<usize> {
        let first = seqs
            .first()
            .ok_or_else(|| Error::InvalidInput("empty text batch".into()))?;
        let len = first.len();
        if len == 0 || len > cfg.max_text_len {
            return Err(Error::InvalidInput(format!(
                "text length {len} outside 1..={}",
                cfg.max_text_len
            )));
        }
        for seq in seqs {
            if seq.len() != len || seq.attention_mask.len() != len {
                return Err(Error::InvalidInput(
                    "all sequences in a batch must share one length".into(),
                ));
            }
            if let Some(&id) = seq.ids.iter().find(|&&id| id >= cfg.vocab_size) {
                return Err(Error::BadToken {
                    id,
                    vocab_size: cfg.vocab_size,
                });
            }
            if seq.ids[0] != CLS_ID || seq.attention_mask[0] != 1 {
                return Err(Error::InvalidInput(
                    "position 0 must hold the classification token".into(),
                ));
            }
        }
        Ok(len)
    }

    /// Encodes `seqs` stacked row-wise (sequence-major). With `fusion`, the
    /// cross-attention sub-layers are active.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &ModelConfig,
        seqs: &[&TokenSequence],
        fusion: Option<&FusionInput<'_>>,
    ) -> Result<Var> {
        let len = Self::validate(seqs, cfg)?;
        if let Some(f) = fusion {
            if f.pairing.len() != seqs.len() || f.pairing.iter().any(|&c| c >= f.clip_rows.len()) {
                return Err(Error::InvalidInput("text/video pairing is inconsistent".into()));
            }
        }
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
        let positions: Vec<usize> = seqs.iter().flat_map(|_| 0..len).collect();
        let table = tape.param(store, self.token_embed);
        let tokens = tape.gather_rows(table, ids.into());
        let pos_table = tape.param(store, self.pos_embed);
        let pos = tape.gather_rows(pos_table, positions.into());
        let mut x = tape.add(tokens, pos);

        let self_groups: Rc<[AttnGroup]> = seqs
            .iter()
            .enumerate()
            .map(|(b, s)| AttnGroup {
                queries: (b * len..(b + 1) * len).collect(),
                keys: (0..len)
                    .filter(|&i| s.attention_mask[i] == 1)
                    .map(|i| b * len + i)
                    .collect(),
            })
            .collect::<Vec<_>>()
            .into();
        let cross_groups: Option<Rc<[AttnGroup]>> = fusion.map(|f| {
            f.pairing
                .iter()
                .enumerate()
                .map(|(b, &clip)| AttnGroup {
                    queries: (b * len..(b + 1) * len).collect(),
                    keys: f.clip_rows[clip].clone(),
                })
                .collect::<Vec<_>>()
                .into()
        });

        for layer in &self.layers {
            let h = layer.self_norm.forward(tape, store, x);
            let a = layer.self_attn.forward(tape, store, h, h, self_groups.clone());
            x = tape.add(x, a);
            if let (Some(cross), Some(f), Some(groups)) = (&layer.cross, fusion, &cross_groups) {
                let h = cross.norm.forward(tape, store, x);
                let c = cross.attn.forward(tape, store, h, f.memory, groups.clone());
                x = tape.add(x, c);
            }
            let h = layer.mlp_norm.forward(tape, store, x);
            let m = layer.mlp.forward(tape, store, h);
            x = tape.add(x, m);
        }
        Ok(self.norm.forward(tape, store, x))
    }
}
