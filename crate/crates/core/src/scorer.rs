//! Label-word scoring at the mask position.
//!
//! A [`MaskedLm`] backend turns an encoded prompt into vocabulary logits at a
//! mask. Class probabilities are the softmax over the two label-word logits
//! only. Training updates the backend's own parameters through
//! [`TrainableMlm`]; no classification head is involved.

use std::fmt;

use rand::seq::SliceRandom;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, MemeRecord};
use crate::prompt::{Piece, Prompt, PromptConfig, PromptError, SlotKind, SpecialTokens, TokenCounter};
use crate::rng;
use crate::sampler::{DemoPools, SamplerError};

pub type TokenId = u32;

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("label or target word {word:?} is not a single backend token ({detail})")]
    MultiToken { word: String, detail: String },
    #[error("prompt is {len} tokens, backend limit is {max}")]
    TooLong { len: usize, max: usize },
    #[error("prompt has no target mask slot")]
    NoTargetSlot,
    #[error("mask position {position} out of range for a {len}-token prompt")]
    BadPosition { position: usize, len: usize },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Batch {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<ScorerError>,
    },
    #[error("non-finite training loss {loss} at epoch {epoch}, batch {batch} (batch size {size})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        size: usize,
        loss: f64,
    },
    #[error("training split is empty")]
    EmptyTrainSplit,
}

/// Token ids for the structural tokens a backend inserts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub start: TokenId,
    pub sep: TokenId,
    pub end: TokenId,
    pub mask: TokenId,
}

/// A prompt flattened into backend token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<TokenId>,
    /// Segment index of every token.
    pub segments: Vec<u8>,
    pub label_mask: usize,
    pub target_mask: Option<usize>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// The masked-LM backend contract.
pub trait MaskedLm: TokenCounter {
    fn special_tokens(&self) -> SpecialTokens;
    fn special_ids(&self) -> SpecialIds;
    fn tokenize(&self, text: &str) -> Vec<TokenId>;
    fn max_len(&self) -> usize;

    /// Resolves a label or target word to exactly one token.
    fn word_to_single_token(&self, word: &str) -> Result<TokenId, ScorerError>;

    /// Logits over the whole vocabulary at `position`.
    fn mask_logits(&self, enc: &Encoded, position: usize) -> Result<Vec<f32>, ScorerError>;

    /// Logits for a few candidate tokens at `position`.
    fn restricted_logits(
        &self,
        enc: &Encoded,
        position: usize,
        candidates: &[TokenId],
    ) -> Result<Vec<f32>, ScorerError> {
        let all = self.mask_logits(enc, position)?;
        Ok(candidates.iter().map(|&c| all[c as usize]).collect())
    }

    fn encode(&self, p: &Prompt) -> Result<Encoded, ScorerError> {
        let special = self.special_ids();
        let mut enc = Encoded {
            ids: vec![special.start],
            segments: vec![0],
            label_mask: 0,
            target_mask: None,
        };
        for (si, seg) in p.segments.iter().enumerate() {
            let seg_id = si as u8;
            if si > 0 {
                enc.ids.push(special.sep);
                enc.segments.push(seg_id);
            }
            for piece in &seg.pieces {
                match piece {
                    Piece::Text(t) => {
                        let toks = self.tokenize(t);
                        enc.segments.extend(std::iter::repeat_n(seg_id, toks.len()));
                        enc.ids.extend(toks);
                    }
                    Piece::Mask(kind) => {
                        match kind {
                            SlotKind::Label => enc.label_mask = enc.ids.len(),
                            SlotKind::Target => enc.target_mask = Some(enc.ids.len()),
                        }
                        enc.ids.push(special.mask);
                        enc.segments.push(seg_id);
                    }
                }
            }
        }
        enc.ids.push(special.end);
        enc.segments
            .push(p.segments.len().saturating_sub(1) as u8);
        if enc.len() > self.max_len() {
            return Err(ScorerError::TooLong {
                len: enc.len(),
                max: self.max_len(),
            });
        }
        Ok(enc)
    }
}

/// One supervised example for a training step.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub encoded: Encoded,
    /// `[pos_word, neg_word]` token ids.
    pub label_tokens: [TokenId; 2],
    pub gold: Label,
}

pub trait TrainableMlm: MaskedLm {
    /// Applies one optimizer update. Returns the batch-mean label-mask
    /// cross-entropy measured before the update.
    fn train_step(&mut self, batch: &[TrainExample]) -> Result<f64, ScorerError>;
}

/// `(y0, y1)`: probabilities of the non-hateful and hateful label words.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub y0: f64,
    pub y1: f64,
}

impl ScoreVector {
    /// Two-way softmax over `(pos_logit, neg_logit)`.
    pub fn from_logits(pos_logit: f64, neg_logit: f64) -> Self {
        let m = pos_logit.max(neg_logit);
        let a = (pos_logit - m).exp();
        let b = (neg_logit - m).exp();
        let z = a + b;
        ScoreVector { y0: a / z, y1: b / z }
    }

    pub fn prob(&self, label: Label) -> f64 {
        match label {
            Label::NonHateful => self.y0,
            Label::Hateful => self.y1,
        }
    }

    pub fn swapped(&self) -> Self {
        ScoreVector {
            y0: self.y1,
            y1: self.y0,
        }
    }
}

impl fmt::Display for ScoreVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.4}, {:.4})", self.y0, self.y1)
    }
}

/// Hateful iff `y1 > y0`; ties are non-hateful.
pub fn predict(y: &ScoreVector) -> Label {
    if y.y1 > y.y0 {
        Label::Hateful
    } else {
        Label::NonHateful
    }
}

/// Negative log-probability of the gold class.
pub fn training_loss(y: &ScoreVector, gold: Label) -> f64 {
    -y.prob(gold).max(PROB_FLOOR).ln()
}

/// [`training_loss`] written directly in the logits, `logsumexp(z) - z_gold`.
/// Stays accurate when the gold probability is close to 1.
pub fn logit_loss(pos_logit: f64, neg_logit: f64, gold: Label) -> f64 {
    let (own, other) = match gold {
        Label::NonHateful => (pos_logit, neg_logit),
        Label::Hateful => (neg_logit, pos_logit),
    };
    let d = other - own;
    if d > 0.0 {
        d + (-d).exp().ln_1p()
    } else {
        d.exp().ln_1p()
    }
}

/// Gradient of [`training_loss`] with respect to `(pos_logit, neg_logit)`.
pub fn loss_gradient(pos_logit: f64, neg_logit: f64, gold: Label) -> [f64; 2] {
    let y = ScoreVector::from_logits(pos_logit, neg_logit);
    let onehot = |l: Label| if l == gold { 1.0 } else { 0.0 };
    [
        y.y0 - onehot(Label::NonHateful),
        y.y1 - onehot(Label::Hateful),
    ]
}

pub fn label_tokens(
    labels: &crate::prompt::LabelWordPair,
    backend: &dyn MaskedLm,
) -> Result<[TokenId; 2], ScorerError> {
    Ok([
        backend.word_to_single_token(&labels.pos_word)?,
        backend.word_to_single_token(&labels.neg_word)?,
    ])
}

pub fn score_encoded(
    enc: &Encoded,
    tokens: [TokenId; 2],
    backend: &dyn MaskedLm,
) -> Result<ScoreVector, ScorerError> {
    let z = backend.restricted_logits(enc, enc.label_mask, &tokens)?;
    Ok(ScoreVector::from_logits(z[0] as f64, z[1] as f64))
}

pub fn score_mask(
    p: &Prompt,
    labels: &crate::prompt::LabelWordPair,
    backend: &dyn MaskedLm,
) -> Result<ScoreVector, ScorerError> {
    let tokens = label_tokens(labels, backend)?;
    let enc = backend.encode(p)?;
    score_encoded(&enc, tokens, backend)
}

/// Probability of each target word at the target mask. Order follows the
/// vocabulary passed in.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub probs: Vec<(String, f64)>,
}

impl TargetDistribution {
    pub fn total(&self) -> f64 {
        self.probs.iter().map(|(_, p)| p).sum()
    }

    pub fn argmax(&self) -> Option<&str> {
        self.probs
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(w, _)| w.as_str())
    }
}

impl Serialize for TargetDistribution {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.probs.len()))?;
        for (w, p) in &self.probs {
            map.serialize_entry(w, p)?;
        }
        map.end()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `vocab` should already include the non-hateful word (`nobody`).
pub fn score_target_mask(
    p: &Prompt,
    vocab: &[&str],
    backend: &dyn MaskedLm,
) -> Result<TargetDistribution, ScorerError> {
    let enc = backend.encode(p)?;
    score_target_encoded(&enc, vocab, backend)
}

pub fn score_target_encoded(
    enc: &Encoded,
    vocab: &[&str],
    backend: &dyn MaskedLm,
) -> Result<TargetDistribution, ScorerError> {
    let position = enc.target_mask.ok_or(ScorerError::NoTargetSlot)?;
    let tokens = vocab
        .iter()
        .map(|w| backend.word_to_single_token(w))
        .collect::<Result<Vec<_>, _>>()?;
    let logits = backend.restricted_logits(enc, position, &tokens)?;
    let probs = softmax(&logits.iter().map(|&z| z as f64).collect::<Vec<_>>());
    Ok(TargetDistribution {
        probs: vocab.iter().map(|w| w.to_string()).zip(probs).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Fine-tunes `backend` on the label mask. Returns the mean loss per epoch.
pub fn train<B: TrainableMlm>(
    backend: &mut B,
    train: &[&MemeRecord],
    prompt_cfg: &PromptConfig,
    cfg: &TrainConfig,
) -> Result<Vec<f64>, ScorerError> {
    if train.is_empty() {
        return Err(ScorerError::EmptyTrainSplit);
    }
    let tokens = label_tokens(&prompt_cfg.label_words, &*backend)?;
    let pools = DemoPools::new(train.iter().copied());
    let batch_size = cfg.batch_size.max(1);
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let pairs = if prompt_cfg.use_demonstrations {
            Some(pools.training_pairs(epoch, cfg.seed)?)
        } else {
            None
        };
        let mut order: Vec<&MemeRecord> = train.to_vec();
        order.shuffle(&mut rng::derive(cfg.seed, &["train-order", &epoch.to_string()]));

        let mut examples = Vec::with_capacity(order.len());
        for rec in order {
            let demos = pairs
                .as_ref()
                .map(|m| m[&rec.id])
                .map(|pair| (pair.pos, pair.neg));
            let prompt = prompt_cfg.build(rec, demos, &*backend)?;
            examples.push(TrainExample {
                encoded: backend.encode(&prompt)?,
                label_tokens: tokens,
                gold: rec.label,
            });
        }

        let mut weighted = 0.0;
        for (batch, chunk) in examples.chunks(batch_size).enumerate() {
            let loss = backend
                .train_step(chunk)
                .map_err(|e| ScorerError::Batch {
                    epoch,
                    batch,
                    source: Box::new(e),
                })?;
            if !loss.is_finite() {
                return Err(ScorerError::NonFiniteLoss {
                    epoch,
                    batch,
                    size: chunk.len(),
                    loss,
                });
            }
            weighted += loss * chunk.len() as f64;
        }
        let mean = weighted / examples.len() as f64;
        tracing::debug!(epoch, loss = mean, "epoch finished");
        curve.push(mean);
    }
    Ok(curve)
}
