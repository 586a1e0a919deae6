//! Pre-training objectives: video-text contrastive (VTC), video-text
//! matching (VTM), masked language modeling (MLM) and their weighted sum.
//!
//! Every loss has a `*_with_grad` form returning the gradient with respect
//! to its direct inputs; the autograd tape uses those directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::model::tokenizer::{TokenSequence, MASK_ID, NUM_SPECIAL};

/// BERT replacement policy for masked positions.
pub const MASK_TOKEN_FRACTION: f64 = 0.8;
pub const RANDOM_TOKEN_FRACTION: f64 = 0.1;
pub const DEFAULT_MASK_RATE: f64 = 0.5;

const RANGE_TOL: f64 = 1e-6;

/// N×N cosine similarities; entry (i, j) compares video i with text j.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Matrix);

impl SimilarityMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.nrows() != values.ncols() || values.is_empty() {
            return Err(Error::InvalidInput(format!(
                "similarity matrix must be square and non-empty, got {:?}",
                values.dim()
            )));
        }
        if values
            .iter()
            .any(|v| !v.is_finite() || v.abs() > 1.0 + RANGE_TOL)
        {
            return Err(Error::InvalidSimilarity);
        }
        Ok(Self(values))
    }

    /// Cosine similarities between the rows of `video` and `text`.
    pub fn from_embeddings(video: &Matrix, text: &Matrix) -> Result<Self> {
        let normalize = |m: &Matrix| -> Result<Matrix> {
            let mut out = m.clone();
            for mut r in out.rows_mut() {
                let n = r.dot(&r).sqrt();
                if n == 0.0 || !n.is_finite() {
                    return Err(Error::DegenerateEmbedding);
                }
                r /= n;
            }
            Ok(out)
        };
        Self::new(normalize(video)?.dot(&normalize(text)?.t()))
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn transposed(&self) -> Self {
        Self(self.0.t().to_owned())
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::BadTemperature(temperature))
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Returns (video→text, text→video) directional losses.
pub fn vtc_directional(sims: &SimilarityMatrix, temperature: f64) -> Result<(f64, f64)> {
    check_temperature(temperature)?;
    let s = sims.values();
    let n = s.nrows();
    let mut v2t = 0.0;
    let mut t2v = 0.0;
    for i in 0..n {
        let diag = s[[i, i]] / temperature;
        v2t += log_sum_exp(s.row(i).iter().map(|v| v / temperature)) - diag;
        t2v += log_sum_exp(s.column(i).iter().map(|v| v / temperature)) - diag;
    }
    Ok((v2t / n as f64, t2v / n as f64))
}

pub fn vtc_loss(sims: &SimilarityMatrix, temperature: f64) -> Result<f64> {
    let (v2t, t2v) = vtc_directional(sims, temperature)?;
    Ok((v2t + t2v) / 2.0)
}

/// VTC loss and its gradient w.r.t. the raw similarity matrix. Accepts any
/// finite square matrix so it can sit inside the autograd graph.
pub fn vtc_loss_with_grad(sims: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    check_temperature(temperature)?;
    if sims.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidSimilarity);
    }
    let n = sims.nrows();
    if n == 0 || sims.ncols() != n {
        return Err(Error::InvalidInput("similarity matrix must be square".into()));
    }
    let logits = sims / temperature;
    let mut grad = Matrix::zeros((n, n));
    let mut loss = 0.0;
    let inv = 1.0 / (2.0 * n as f64 * temperature);
    for i in 0..n {
        let row_lse = log_sum_exp(logits.row(i).iter().copied());
        let col_lse = log_sum_exp(logits.column(i).iter().copied());
        loss += row_lse + col_lse - 2.0 * logits[[i, i]];
        for j in 0..n {
            grad[[i, j]] += (logits[[i, j]] - row_lse).exp() * inv;
            grad[[j, i]] += (logits[[j, i]] - col_lse).exp() * inv;
        }
        grad[[i, i]] -= 2.0 * inv;
    }
    Ok((loss / (2.0 * n as f64), grad))
}

/// One in-batch negative per item: `j ≠ i`, uniform over the other N−1.
pub fn sample_vtm_negatives<R: Rng + ?Sized>(batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if batch_size < 2 {
        return Err(Error::NoNegativeAvailable);
    }
    Ok((0..batch_size)
        .map(|i| {
            let r = rng.random_range(0..batch_size - 1);
            if r < i {
                r
            } else {
                r + 1
            }
        })
        .collect())
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Batch mean of −[log σ(s_pos) + log(1 − σ(s_neg))].
pub fn vtm_loss(score_pos: &[f64], score_neg: &[f64]) -> Result<f64> {
    vtm_loss_with_grad(score_pos, score_neg).map(|(l, _, _)| l)
}

pub fn vtm_loss_with_grad(score_pos: &[f64], score_neg: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if score_pos.len() != score_neg.len() || score_pos.is_empty() {
        return Err(Error::InvalidInput(
            "matching logits need one negative per positive".into(),
        ));
    }
    if score_pos.iter().chain(score_neg).any(|s| !s.is_finite()) {
        return Err(Error::InvalidLogit);
    }
    let n = score_pos.len() as f64;
    let loss = score_pos
        .iter()
        .zip(score_neg)
        .map(|(p, q)| softplus(-p) + softplus(*q))
        .sum::<f64>()
        / n;
    let gp = score_pos.iter().map(|p| (sigmoid(*p) - 1.0) / n).collect();
    let gn = score_neg.iter().map(|q| sigmoid(*q) / n).collect();
    Ok((loss, gp, gn))
}

/// Mean over rows of −log softmax(row)[target].
pub fn cross_entropy_with_grad(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    let m = logits.nrows();
    if m == 0 {
        return Err(Error::EmptyMaskSet);
    }
    if targets.len() != m {
        return Err(Error::InvalidInput(format!(
            "{} logit rows but {} targets",
            m,
            targets.len()
        )));
    }
    let vocab = logits.ncols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::BadToken {
            id: bad,
            vocab_size: vocab,
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidLoss);
    }
    let mut grad = Matrix::zeros(logits.dim());
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[t];
        for (g, v) in grad.row_mut(i).iter_mut().zip(row.iter()) {
            *g = (v - lse).exp() / m as f64;
        }
        grad[[i, t]] -= 1.0 / m as f64;
    }
    Ok((loss / m as f64, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Replacement {
    MaskToken,
    RandomToken,
    Unchanged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingPlan {
    /// Sorted token indices in M.
    pub masked_positions: Vec<usize>,
    pub replacement_ids: Vec<usize>,
    pub replacement_kinds: Vec<Replacement>,
    pub original_ids: Vec<usize>,
    pub seed: u64,
}

impl MaskingPlan {
    pub fn len(&self) -> usize {
        self.masked_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked_positions.is_empty()
    }
}

/// Masks each non-special position independently with probability `rate`,
/// forcing one uniformly chosen position when none was selected.
pub fn mask_tokens(
    tokens: &TokenSequence,
    rate: f64,
    vocab_size: usize,
    seed: u64,
) -> Result<(TokenSequence, MaskingPlan)> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "mask rate must be in (0, 1], got {rate}"
        )));
    }
    if vocab_size <= NUM_SPECIAL {
        return Err(Error::InvalidConfig(
            "vocabulary has no regular tokens to sample replacements from".into(),
        ));
    }
    let maskable = tokens.maskable_positions();
    if maskable.is_empty() {
        return Err(Error::NothingToMask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = maskable
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < rate)
        .collect();
    if positions.is_empty() {
        positions.push(maskable[rng.random_range(0..maskable.len())]);
    }
    let mut masked = tokens.clone();
    let mut plan = MaskingPlan {
        masked_positions: positions.clone(),
        replacement_ids: Vec::with_capacity(positions.len()),
        replacement_kinds: Vec::with_capacity(positions.len()),
        original_ids: Vec::with_capacity(positions.len()),
        seed,
    };
    for pos in positions {
        let original = tokens.ids[pos];
        let u: f64 = rng.random();
        let (kind, id) = if u < MASK_TOKEN_FRACTION {
            (Replacement::MaskToken, MASK_ID)
        } else if u < MASK_TOKEN_FRACTION + RANDOM_TOKEN_FRACTION {
            (
                Replacement::RandomToken,
                rng.random_range(NUM_SPECIAL..vocab_size),
            )
        } else {
            (Replacement::Unchanged, original)
        };
        masked.ids[pos] = id;
        plan.original_ids.push(original);
        plan.replacement_ids.push(id);
        plan.replacement_kinds.push(kind);
    }
    Ok((masked, plan))
}

/// Bias-carrying linear head `x·W + b`.
#[derive(Debug, Clone, Copy)]
pub struct LinearHead<'a> {
    pub weight: &'a Matrix,
    pub bias: &'a Matrix,
}

/// MLM loss given fused text features at the masked positions (|M|×d, in
/// `plan.masked_positions` order).
pub fn mlm_loss(features: &Matrix, plan: &MaskingPlan, head: LinearHead<'_>) -> Result<f64> {
    if plan.is_empty() {
        return Err(Error::EmptyMaskSet);
    }
    if features.nrows() != plan.len() {
        return Err(Error::InvalidInput(format!(
            "{} feature rows for {} masked positions",
            features.nrows(),
            plan.len()
        )));
    }
    let mut logits = features.dot(head.weight);
    logits += &head.bias.row(0);
    cross_entropy_with_grad(&logits, &plan.original_ids).map(|(l, _)| l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub vtc: f64,
    pub vtm: f64,
    pub mlm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            vtc: 1.0,
            vtm: 1.0,
            mlm: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub vtc: f64,
    pub vtm: f64,
    pub mlm: f64,
    pub total: f64,
    pub weights: LossWeights,
}

pub fn total_loss(vtc: f64, vtm: f64, mlm: f64, weights: LossWeights) -> Result<LossBundle> {
    if [vtc, vtm, mlm].iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidLoss);
    }
    if [weights.vtc, weights.vtm, weights.mlm]
        .iter()
        .any(|w| !(w.is_finite() && *w >= 0.0))
    {
        return Err(Error::InvalidConfig(
            "loss weights must be finite and non-negative".into(),
        ));
    }
    Ok(LossBundle {
        vtc,
        vtm,
        mlm,
        total: weights.vtc * vtc + weights.vtm * vtm + weights.mlm * mlm,
        weights,
    })
}
