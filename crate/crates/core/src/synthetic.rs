//! Synthetic meme corpora with a lexical trigger.
//!
//! Hateful memes carry the trigger word somewhere in their meme text;
//! non-hateful memes never do. With `trigger_rate < 1` some hateful memes
//! omit it and some non-hateful memes gain it, which makes the task noisy.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Label, MemeRecord, Split};
use crate::rng;

const TEXT_WORDS: &[&str] = &[
    "when", "you", "finally", "get", "home", "after", "work", "and", "the", "cat", "is", "waiting",
    "me", "trying", "to", "explain", "why", "monday", "feels", "like", "this", "my", "friends",
    "at", "party", "every", "time", "someone", "says", "they", "love", "pizza", "nobody", "asked",
    "look", "what", "we", "found", "in", "kitchen", "today", "that", "moment", "your", "phone",
    "dies", "mom", "said", "clean", "room", "weekend", "plans", "vs", "reality", "coffee", "first",
    "then", "talk", "summer", "vacation", "dog", "park", "teacher", "homework", "again",
];

const CAPTION_WORDS: &[&str] = &[
    "a", "man", "woman", "child", "standing", "sitting", "next", "to", "tree", "car", "building",
    "holding", "sign", "smiling", "group", "of", "people", "on", "street", "beach", "dog", "cat",
    "table", "with", "food", "in", "front", "red", "blue", "old", "young", "house", "field",
];

const ENTITIES: &[&str] = &["Meme", "Internet meme", "Photograph", "Stock photography", "Humour"];
const DEMOGRAPHICS: &[&str] = &["White male", "Black female", "Asian male", "Latino female"];

pub const DEFAULT_TRIGGER: &str = "zork";
pub const FHM_TARGETS: &[&str] = &["race", "disability", "nationality", "sex", "religion"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Train records per class.
    pub train_per_class: usize,
    /// Test records per class.
    pub test_per_class: usize,
    pub trigger: String,
    /// Probability that a record's trigger presence matches its label.
    pub trigger_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_per_class: 100,
            test_per_class: 50,
            trigger: DEFAULT_TRIGGER.into(),
            trigger_rate: 1.0,
            seed: 0,
        }
    }
}

fn words(rng: &mut impl Rng, pool: &[&str], lo: usize, hi: usize) -> Vec<String> {
    let n = rng.random_range(lo..=hi);
    (0..n)
        .map(|_| pool.choose(rng).expect("nonempty pool").to_string())
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> Dataset {
    let mut rng = rng::derive(spec.seed, &["synthetic"]);
    let mut records = Vec::new();
    for (split, per_class) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
        for i in 0..2 * per_class {
            let label = if i % 2 == 0 { Label::Hateful } else { Label::NonHateful };
            let mut text = words(&mut rng, TEXT_WORDS, 5, 9);
            let faithful = rng.random_bool(spec.trigger_rate.clamp(0.0, 1.0));
            let has_trigger = (label == Label::Hateful) == faithful;
            if has_trigger {
                let at = rng.random_range(0..=text.len());
                text.insert(at, spec.trigger.clone());
            }
            let entities = words(&mut rng, ENTITIES, 0, 2);
            let demographics = words(&mut rng, DEMOGRAPHICS, 0, 1);
            let target = (label == Label::Hateful)
                .then(|| FHM_TARGETS.choose(&mut rng).expect("nonempty").to_string());
            records.push(MemeRecord {
                id: format!("{split}-{i:04}"),
                split,
                label,
                meme_text: text.join(" "),
                caption: words(&mut rng, CAPTION_WORDS, 4, 8).join(" "),
                entities,
                demographics,
                target,
            });
        }
    }
    Dataset {
        name: format!("synthetic-{}", spec.seed),
        records,
        target_vocabulary: Some(FHM_TARGETS.iter().map(|s| s.to_string()).collect()),
    }
}
