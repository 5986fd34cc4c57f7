//! Positive/negative demonstration selection.
//!
//! Demonstrations are drawn uniformly from the training split. A record is
//! never its own demonstration. All draws come from generators derived from
//! `(seed, purpose, record id)`, so a record's pairs do not depend on which
//! other records were processed.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::corpus::{Label, MemeRecord};
use crate::rng;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("no {class} training record is available as a demonstration for {infer_id:?}")]
    EmptyPool { class: Label, infer_id: String },
    #[error("number of demonstration pairs must be at least 1")]
    InvalidM,
}

/// `pos` is non-hateful, `neg` is hateful.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DemoPair<'a> {
    pub pos: &'a MemeRecord,
    pub neg: &'a MemeRecord,
}

impl DemoPair<'_> {
    pub fn ids(&self) -> (String, String) {
        (self.pos.id.clone(), self.neg.id.clone())
    }
}

/// Class pools over a training split.
#[derive(Debug, Clone)]
pub struct DemoPools<'a> {
    pos: Vec<&'a MemeRecord>,
    neg: Vec<&'a MemeRecord>,
    position: HashMap<&'a str, usize>,
}

impl<'a> DemoPools<'a> {
    pub fn new(train: impl IntoIterator<Item = &'a MemeRecord>) -> Self {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut position = HashMap::new();
        for r in train {
            let pool = match r.label {
                Label::NonHateful => &mut pos,
                Label::Hateful => &mut neg,
            };
            position.insert(r.id.as_str(), pool.len());
            pool.push(r);
        }
        DemoPools { pos, neg, position }
    }

    fn pool(&self, class: Label) -> &[&'a MemeRecord] {
        match class {
            Label::NonHateful => &self.pos,
            Label::Hateful => &self.neg,
        }
    }

    /// Draws `m` members of `class`, skipping `infer_id`. Distinct when the
    /// pool is large enough, otherwise with replacement.
    fn draw(
        &self,
        class: Label,
        infer_id: &str,
        m: usize,
        rng: &mut rng::StreamRng,
    ) -> Result<Vec<&'a MemeRecord>, SamplerError> {
        let pool = self.pool(class);
        let excluded = self
            .position
            .get(infer_id)
            .copied()
            .filter(|&i| pool.get(i).is_some_and(|r| r.id == infer_id));
        let available = pool.len() - usize::from(excluded.is_some());
        if available == 0 {
            return Err(SamplerError::EmptyPool {
                class,
                infer_id: infer_id.to_string(),
            });
        }
        let lift = |i: usize| match excluded {
            Some(x) if i >= x => pool[i + 1],
            _ => pool[i],
        };
        let picks = if available >= m {
            index::sample(rng, available, m).into_iter().map(lift).collect()
        } else {
            (0..m).map(|_| lift(rng.random_range(0..available))).collect()
        };
        Ok(picks)
    }

    fn pairs_from(
        &self,
        infer_id: &str,
        m: usize,
        mut rng: rng::StreamRng,
    ) -> Result<Vec<DemoPair<'a>>, SamplerError> {
        if m == 0 {
            return Err(SamplerError::InvalidM);
        }
        let pos = self.draw(Label::NonHateful, infer_id, m, &mut rng)?;
        let neg = self.draw(Label::Hateful, infer_id, m, &mut rng)?;
        Ok(pos
            .into_iter()
            .zip(neg)
            .map(|(pos, neg)| DemoPair { pos, neg })
            .collect())
    }

    /// `m` pairs for inference on `infer_id`.
    pub fn sample(
        &self,
        infer_id: &str,
        m: usize,
        seed: u64,
    ) -> Result<Vec<DemoPair<'a>>, SamplerError> {
        let rng = rng::derive(seed, &["infer-demos", infer_id, &m.to_string()]);
        self.pairs_from(infer_id, m, rng)
    }

    /// One pair per training record for `epoch`.
    pub fn training_pairs(
        &self,
        epoch: usize,
        seed: u64,
    ) -> Result<BTreeMap<String, DemoPair<'a>>, SamplerError> {
        let epoch_tag = epoch.to_string();
        self.pos
            .iter()
            .chain(&self.neg)
            .map(|r| {
                let rng = rng::derive(seed, &["train-demos", &epoch_tag, &r.id]);
                let pair = self.pairs_from(&r.id, 1, rng)?.remove(0);
                Ok((r.id.clone(), pair))
            })
            .collect()
    }
}

pub fn sample_pairs<'a>(
    train: &[&'a MemeRecord],
    infer_id: &str,
    m: usize,
    seed: u64,
) -> Result<Vec<DemoPair<'a>>, SamplerError> {
    DemoPools::new(train.iter().copied()).sample(infer_id, m, seed)
}

pub fn training_pairs<'a>(
    train: &[&'a MemeRecord],
    epoch: usize,
    seed: u64,
) -> Result<BTreeMap<String, DemoPair<'a>>, SamplerError> {
    DemoPools::new(train.iter().copied()).training_pairs(epoch, seed)
}
