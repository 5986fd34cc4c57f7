//! Multi-query ensemble: one inference meme, `m` demonstration pairs, the
//! score vectors averaged.

use serde::Serialize;

use crate::corpus::{Label, MemeRecord};
use crate::prompt::{PromptConfig, TemplateKind, NOBODY};
use crate::sampler::DemoPools;
use crate::scorer::{
    label_tokens, predict, score_encoded, score_target_encoded, MaskedLm, ScoreVector,
    ScorerError, TargetDistribution,
};

pub const DEFAULT_M: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub per_query: Vec<ScoreVector>,
    pub y_final: ScoreVector,
    pub predicted: Label,
    /// `(pos_id, neg_id)` per query; empty when demonstrations are disabled.
    pub pair_ids: Vec<(String, String)>,
    pub target_distribution: Option<TargetDistribution>,
}

/// Mean of `values`, summed in sorted order and clamped to their range, so
/// the result is independent of input order and never leaves the hull.
fn stable_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let (lo, hi) = (v[0], v[v.len() - 1]);
    (v.iter().sum::<f64>() / v.len() as f64).clamp(lo, hi)
}

/// Componentwise arithmetic mean. `None` for an empty slice.
pub fn average_scores(scores: &[ScoreVector]) -> Option<ScoreVector> {
    if scores.is_empty() {
        return None;
    }
    Some(ScoreVector {
        y0: stable_mean(scores.iter().map(|s| s.y0)),
        y1: stable_mean(scores.iter().map(|s| s.y1)),
    })
}

fn average_targets(dists: &[TargetDistribution]) -> Option<TargetDistribution> {
    let first = dists.first()?;
    let probs = first
        .probs
        .iter()
        .enumerate()
        .map(|(i, (word, _))| (word.clone(), stable_mean(dists.iter().map(|d| d.probs[i].1))))
        .collect();
    Some(TargetDistribution { probs })
}

/// Target vocabulary for the target mask: the dataset's categories (after
/// synonym mapping) plus `nobody`.
pub fn target_words(cfg: &PromptConfig, vocabulary: &[String]) -> Vec<String> {
    let mut words: Vec<String> = vocabulary
        .iter()
        .map(|t| cfg.target_word(t).to_string())
        .collect();
    if !words.iter().any(|w| w == NOBODY) {
        words.push(NOBODY.to_string());
    }
    words
}

pub fn multi_query_predict(
    rec: &MemeRecord,
    pools: &DemoPools<'_>,
    m: usize,
    seed: u64,
    backend: &dyn MaskedLm,
    cfg: &PromptConfig,
    target_vocab: Option<&[String]>,
) -> Result<EnsembleResult, ScorerError> {
    let tokens = label_tokens(&cfg.label_words, backend)?;
    let pairs = if cfg.use_demonstrations {
        pools
            .sample(&rec.id, m, seed)?
            .into_iter()
            .map(Some)
            .collect()
    } else {
        vec![None]
    };
    let want_targets = cfg.template.kind() == TemplateKind::LabelAndTarget;
    let target_vocab: Vec<&str> = target_vocab
        .unwrap_or_default()
        .iter()
        .map(String::as_str)
        .collect();

    let mut per_query = Vec::with_capacity(pairs.len());
    let mut targets = Vec::new();
    let mut pair_ids = Vec::new();
    for pair in &pairs {
        let prompt = cfg.build(rec, pair.map(|p| (p.pos, p.neg)), backend)?;
        let enc = backend.encode(&prompt)?;
        per_query.push(score_encoded(&enc, tokens, backend)?);
        if want_targets && !target_vocab.is_empty() {
            targets.push(score_target_encoded(&enc, &target_vocab, backend)?);
        }
        if let Some(p) = pair {
            pair_ids.push(p.ids());
        }
    }
    let y_final = average_scores(&per_query).expect("at least one query");
    Ok(EnsembleResult {
        predicted: predict(&y_final),
        per_query,
        y_final,
        pair_ids,
        target_distribution: average_targets(&targets),
    })
}

/// One line of prediction output.
#[derive(Debug, Clone, Serialize)]
pub struct PredictionLine<'a> {
    pub id: &'a str,
    pub y0: f64,
    pub y1: f64,
    pub predicted: Label,
    pub pair_ids: &'a [(String, String)],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_distribution: Option<&'a TargetDistribution>,
}

impl EnsembleResult {
    pub fn line<'a>(&'a self, id: &'a str) -> PredictionLine<'a> {
        PredictionLine {
            id,
            y0: self.y_final.y0,
            y1: self.y_final.y1,
            predicted: self.predicted,
            pair_ids: &self.pair_ids,
            target_distribution: self.target_distribution.as_ref(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{HashLogitsMlm, Vocab};
    use crate::corpus::Split;

    fn s(y0: f64, y1: f64) -> ScoreVector {
        ScoreVector { y0, y1 }
    }

    #[test]
    fn averages_two_queries() {
        let y = average_scores(&[s(0.3, 0.7), s(0.5, 0.5)]).unwrap();
        assert!((y.y0 - 0.4).abs() < 1e-12 && (y.y1 - 0.6).abs() < 1e-12);
        assert_eq!(predict(&y), Label::Hateful);
    }

    #[test]
    fn single_query_is_identity() {
        let only = s(0.123, 0.877);
        assert_eq!(average_scores(&[only]), Some(only));
        assert_eq!(average_scores(&[]), None);
    }

    #[test]
    fn identical_queries_average_to_themselves() {
        let y = average_scores(&[s(0.9, 0.1); 5]).unwrap();
        assert_eq!(y, s(0.9, 0.1));
    }

    fn rec(id: &str, label: Label, text: &str) -> MemeRecord {
        MemeRecord {
            id: id.into(),
            split: Split::Train,
            label,
            meme_text: text.into(),
            caption: "a picture".into(),
            entities: vec![],
            demographics: vec![],
            target: (label == Label::Hateful).then(|| "race".to_string()),
        }
    }

    #[test]
    fn multi_query_is_deterministic_and_records_pairs() {
        let train: Vec<_> = (0..6)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Hateful } else { Label::NonHateful };
                rec(&format!("r{i}"), label, &format!("words {i}"))
            })
            .collect();
        let infer = rec("q", Label::Hateful, "query words");
        let vocab = Vocab::build(
            train
                .iter()
                .chain([&infer])
                .flat_map(|r| [r.meme_text.as_str(), r.caption.as_str()])
                .chain(["it was good bad targeting at race nobody ."]),
        );
        let backend = HashLogitsMlm::new(vocab, 3);
        let pools = DemoPools::new(train.iter());
        let cfg = PromptConfig::default();
        let a = multi_query_predict(&infer, &pools, 3, 9, &backend, &cfg, None).unwrap();
        let b = multi_query_predict(&infer, &pools, 3, 9, &backend, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_query.len(), 3);
        assert_eq!(a.pair_ids.len(), 3);
        assert!((a.y_final.y0 + a.y_final.y1 - 1.0).abs() < 1e-9);

        let target_cfg = PromptConfig {
            template: crate::prompt::Template::with_target(),
            ..Default::default()
        };
        let words = target_words(&target_cfg, &["race".to_string()]);
        let t = multi_query_predict(&infer, &pools, 2, 9, &backend, &target_cfg, Some(&words))
            .unwrap();
        let dist = t.target_distribution.unwrap();
        assert_eq!(dist.probs.len(), 2);
        assert!((dist.total() - 1.0).abs() < 1e-9);

        let no_demo = PromptConfig {
            use_demonstrations: false,
            ..Default::default()
        };
        let z = multi_query_predict(&infer, &pools, 4, 9, &backend, &no_demo, None).unwrap();
        assert_eq!(z.per_query.len(), 1);
        assert!(z.pair_ids.is_empty());
    }
}
