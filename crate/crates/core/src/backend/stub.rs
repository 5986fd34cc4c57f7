//! Frozen backend whose logits are a keyed hash of the prompt.
//!
//! Useful wherever a deterministic but otherwise arbitrary scorer is needed:
//! normalization checks, ensemble plumbing, CLI smoke runs.

use sha2::{Digest, Sha256};

use super::vocab::Vocab;
use crate::prompt::{SpecialTokens, TokenCounter};
use crate::scorer::{Encoded, MaskedLm, ScorerError, SpecialIds, TokenId};

#[derive(Debug, Clone)]
pub struct HashLogitsMlm {
    vocab: Vocab,
    key: u64,
    scale: f32,
    max_len: usize,
}

impl HashLogitsMlm {
    pub fn new(vocab: Vocab, key: u64) -> Self {
        HashLogitsMlm {
            vocab,
            key,
            scale: 4.0,
            max_len: 512,
        }
    }

    /// Logits fall in `[-scale, scale]`.
    pub fn with_scale(mut self, scale: f32) -> Self {
        self.scale = scale;
        self
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn context_hash(&self, enc: &Encoded, position: usize) -> Sha256 {
        let mut h = Sha256::new();
        h.update(self.key.to_le_bytes());
        h.update((position as u64).to_le_bytes());
        for id in &enc.ids {
            h.update(id.to_le_bytes());
        }
        h
    }

    fn logit(&self, context: &Sha256, token: TokenId) -> f32 {
        let mut h = context.clone();
        h.update(token.to_le_bytes());
        let digest = h.finalize();
        let raw = u32::from_le_bytes([digest[0], digest[1], digest[2], digest[3]]);
        let unit = raw as f64 / u32::MAX as f64;
        ((2.0 * unit - 1.0) * self.scale as f64) as f32
    }
}

impl TokenCounter for HashLogitsMlm {
    fn count_tokens(&self, text: &str) -> usize {
        self.vocab.count(text)
    }
}

impl MaskedLm for HashLogitsMlm {
    fn special_tokens(&self) -> SpecialTokens {
        Vocab::special_tokens()
    }

    fn special_ids(&self) -> SpecialIds {
        self.vocab.special_ids()
    }

    fn tokenize(&self, text: &str) -> Vec<TokenId> {
        self.vocab.encode(text)
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn word_to_single_token(&self, word: &str) -> Result<TokenId, ScorerError> {
        self.vocab.single_token(word)
    }

    fn mask_logits(&self, enc: &Encoded, position: usize) -> Result<Vec<f32>, ScorerError> {
        self.restricted_logits(enc, position, &(0..self.vocab.len() as TokenId).collect::<Vec<_>>())
    }

    fn restricted_logits(
        &self,
        enc: &Encoded,
        position: usize,
        candidates: &[TokenId],
    ) -> Result<Vec<f32>, ScorerError> {
        if position >= enc.len() {
            return Err(ScorerError::BadPosition {
                position,
                len: enc.len(),
            });
        }
        let context = self.context_hash(enc, position);
        Ok(candidates.iter().map(|&t| self.logit(&context, t)).collect())
    }
}
