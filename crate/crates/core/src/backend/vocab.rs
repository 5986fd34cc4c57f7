//! Word-level vocabulary shared by the bundled backends.

use std::collections::{BTreeSet, HashMap};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::prompt::SpecialTokens;
use crate::scorer::{ScorerError, SpecialIds, TokenId};

pub const UNK: &str = "<unk>";
pub const START: &str = "<s>";
pub const SEP: &str = "<sep>";
pub const END: &str = "</s>";
pub const MASK: &str = "<mask>";

const SPECIALS: [&str; 5] = [UNK, START, SEP, END, MASK];

static WORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[\p{L}\p{N}_']+|[^\p{L}\p{N}_'\s]").expect("valid regex"));

/// Lowercased words and single punctuation marks.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    WORD.find_iter(text).map(|m| m.as_str().to_lowercase())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Special tokens first, then every word of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            words.extend(split_words(text));
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect::<Vec<_>>();
        Vocab::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn unk(&self) -> TokenId {
        self.id(UNK).expect("vocab always holds <unk>")
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let unk = self.unk();
        split_words(text)
            .map(|w| self.id(&w).unwrap_or(unk))
            .collect()
    }

    pub fn count(&self, text: &str) -> usize {
        WORD.find_iter(text).count()
    }

    pub fn single_token(&self, word: &str) -> Result<TokenId, ScorerError> {
        let pieces: Vec<String> = split_words(word).collect();
        match pieces.as_slice() {
            [one] => self.id(one).ok_or_else(|| ScorerError::MultiToken {
                word: word.to_string(),
                detail: "not in the backend vocabulary".into(),
            }),
            _ => Err(ScorerError::MultiToken {
                word: word.to_string(),
                detail: format!("splits into {} tokens", pieces.len()),
            }),
        }
    }

    pub fn special_ids(&self) -> SpecialIds {
        let id = |t| self.id(t).expect("vocab always holds special tokens");
        SpecialIds {
            start: id(START),
            sep: id(SEP),
            end: id(END),
            mask: id(MASK),
        }
    }

    pub fn special_tokens() -> SpecialTokens {
        SpecialTokens {
            start: START.into(),
            sep: SEP.into(),
            end: END.into(),
            mask: MASK.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_words_and_punctuation() {
        let words: Vec<_> = split_words("It was GOOD. Don't, ok?").collect();
        assert_eq!(words, ["it", "was", "good", ".", "don't", ",", "ok", "?"]);
    }

    #[test]
    fn builds_sorted_vocab_with_specials() {
        let v = Vocab::build(["b a", "c a."]);
        assert_eq!(v.token(0), Some(UNK));
        assert_eq!(v.len(), 5 + 4);
        assert_eq!(v.encode("a zzz"), vec![v.id("a").unwrap(), v.unk()]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn single_token_resolution() {
        let v = Vocab::build(["good bad hate speech"]);
        assert!(v.single_token("Good").is_ok());
        assert!(matches!(v.single_token("hate speech"), Err(ScorerError::MultiToken { .. })));
        assert!(matches!(v.single_token("great"), Err(ScorerError::MultiToken { .. })));
    }
}
