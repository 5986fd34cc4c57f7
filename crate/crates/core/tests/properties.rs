use std::collections::HashSet;

use memeprompt_core::corpus::{fraction_count, fraction_subsample, kshot_subsample, split_stats};
use memeprompt_core::ensemble::average_scores;
use memeprompt_core::metrics::{accuracy, auroc};
use memeprompt_core::sampler::DemoPools;
use memeprompt_core::{Dataset, Label, MemeRecord, ScoreVector, Split};
use proptest::prelude::*;

fn label(b: bool) -> Label {
    if b {
        Label::Hateful
    } else {
        Label::NonHateful
    }
}

fn pairwise_auroc(scores: &[f64], labels: &[Label]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, li) in labels.iter().enumerate() {
        for (j, lj) in labels.iter().enumerate() {
            if *li == Label::Hateful && *lj == Label::NonHateful {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn corpus(train: &[bool]) -> Dataset {
    let rec = |i: usize, split: Split, hateful: bool| MemeRecord {
        id: format!("{split}-{i:03}"),
        split,
        label: label(hateful),
        meme_text: format!("text {i}"),
        caption: format!("caption {i}"),
        entities: vec![],
        demographics: vec![],
        target: None,
    };
    let mut records: Vec<_> = train
        .iter()
        .enumerate()
        .map(|(i, &h)| rec(i, Split::Train, h))
        .collect();
    records.push(rec(0, Split::Test, true));
    records.push(rec(1, Split::Test, false));
    Dataset::new("prop", records)
}

fn labelled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<Label>)> {
    (2usize..=12)
        .prop_flat_map(|n| {
            (
                proptest::collection::vec((0u8..5).prop_map(|v| v as f64 / 4.0), n),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both classes", |(_, l)| l.iter().any(|&b| b) && l.iter().any(|&b| !b))
        .prop_map(|(s, l)| (s, l.into_iter().map(label).collect()))
}

proptest! {
    #[test]
    fn auroc_matches_pairwise_oracle((scores, labels) in labelled_scores()) {
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), pairwise_auroc(&scores, &labels));
    }

    #[test]
    fn auroc_invariant_under_increasing_maps((scores, labels) in labelled_scores()) {
        let base = auroc(&scores, &labels).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| 3.0 * s + 1.0).collect();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        prop_assert_eq!(auroc(&shifted, &labels).unwrap(), base);
        prop_assert_eq!(auroc(&exp, &labels).unwrap(), base);
    }

    #[test]
    fn auroc_complements_on_flipped_labels(
        n in 2usize..12,
        seed in any::<u64>(),
    ) {
        // distinct scores, alternating labels
        let scores: Vec<f64> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1009) as f64 + i as f64 / 1e4).collect();
        let labels: Vec<Label> = (0..n).map(|i| label(i % 2 == 0)).collect();
        let flipped: Vec<Label> = labels.iter().map(|l| label(*l == Label::NonHateful)).collect();
        let sum = auroc(&scores, &labels).unwrap() + auroc(&scores, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_permutation_invariant(
        pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..40),
        rot in 0usize..40,
    ) {
        let preds: Vec<Label> = pairs.iter().map(|p| label(p.0)).collect();
        let labels: Vec<Label> = pairs.iter().map(|p| label(p.1)).collect();
        let k = rot % pairs.len();
        let (mut p2, mut l2) = (preds.clone(), labels.clone());
        p2.rotate_left(k);
        l2.rotate_left(k);
        prop_assert_eq!(accuracy(&preds, &labels).unwrap(), accuracy(&p2, &l2).unwrap());
    }

    #[test]
    fn scores_normalize_and_swap(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let y = ScoreVector::from_logits(a, b);
        prop_assert!((y.y0 + y.y1 - 1.0).abs() < 1e-12);
        prop_assert_eq!(ScoreVector::from_logits(b, a), y.swapped());
    }

    #[test]
    fn ensemble_mean_is_order_free_and_convex(
        logits in proptest::collection::vec((-8.0f64..8.0, -8.0f64..8.0), 1..6),
    ) {
        let scores: Vec<ScoreVector> = logits.iter().map(|(a, b)| ScoreVector::from_logits(*a, *b)).collect();
        let y = average_scores(&scores).unwrap();
        let mut reversed = scores.clone();
        reversed.reverse();
        prop_assert_eq!(average_scores(&reversed).unwrap(), y);
        let n = scores.len() as f64;
        prop_assert!((y.y1 - scores.iter().map(|s| s.y1).sum::<f64>() / n).abs() < 1e-9);
        let lo = scores.iter().map(|s| s.y1).fold(f64::INFINITY, f64::min);
        let hi = scores.iter().map(|s| s.y1).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= y.y1 && y.y1 <= hi);
    }

    #[test]
    fn kshot_is_pure_subset(
        train in proptest::collection::vec(any::<bool>(), 2..50),
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        let ds = corpus(&train);
        let stats = split_stats(&ds).train;
        match kshot_subsample(&ds, k, seed) {
            Ok(sub) => {
                prop_assert!(k <= stats.hateful && k <= stats.non_hateful);
                prop_assert_eq!(split_stats(&sub).train.hateful, k);
                prop_assert_eq!(split_stats(&sub).train.non_hateful, k);
                let mut seen = HashSet::new();
                for r in sub.train() {
                    prop_assert!(seen.insert(r.id.clone()));
                    prop_assert_eq!(ds.get(&r.id).unwrap(), r);
                }
                prop_assert_eq!(kshot_subsample(&ds, k, seed).unwrap(), sub);
            }
            Err(_) => prop_assert!(k > stats.hateful || k > stats.non_hateful),
        }
    }

    #[test]
    fn fraction_counts_follow_floor(
        train in proptest::collection::vec(any::<bool>(), 2..60),
        frac in 0.01f64..=1.0,
        seed in any::<u64>(),
    ) {
        let ds = corpus(&train);
        let before = split_stats(&ds).train;
        let sub = fraction_subsample(&ds, frac, seed).unwrap();
        let after = split_stats(&sub).train;
        for l in Label::ALL {
            prop_assert_eq!(after.get(l), fraction_count(before.get(l), frac));
        }
        for r in sub.train() {
            prop_assert_eq!(ds.get(&r.id).unwrap(), r);
        }
    }

    #[test]
    fn demo_pairs_are_pure_and_self_excluding(
        train in proptest::collection::vec(any::<bool>(), 4..40),
        m in 1usize..5,
        seed in any::<u64>(),
    ) {
        let ds = corpus(&train);
        let stats = split_stats(&ds).train;
        prop_assume!(stats.hateful >= 2 && stats.non_hateful >= 2);
        let pools = DemoPools::new(ds.split(Split::Train));
        for r in ds.train() {
            let pairs = pools.sample(&r.id, m, seed).unwrap();
            prop_assert_eq!(pairs.len(), m);
            for p in &pairs {
                prop_assert_eq!(p.pos.label, Label::NonHateful);
                prop_assert_eq!(p.neg.label, Label::Hateful);
                prop_assert!(p.pos.id != r.id && p.neg.id != r.id);
            }
        }
    }
}
