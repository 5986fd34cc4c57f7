//! Meme datasets in the canonical JSONL schema.
//!
//! One JSON object per line:
//!
//! ```text
//! {"id": str, "split": "train"|"test", "label": 0|1, "meme_text": str,
//!  "caption": str, "entities": [str], "demographics": [str], "target": str|null}
//! ```
//!
//! Loading validates every record and reports the offending line. The
//! samplers here produce new datasets whose train split is a stratified subset
//! of the source; the test split is never touched.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: field `{field}` {reason}")]
    InvalidField {
        line: usize,
        field: &'static str,
        reason: String,
    },
    #[error("line {line}: unknown label value {value}; expected 0 or 1")]
    UnknownLabel { line: usize, value: String },
    #[error("line {line}: duplicate id `{id}` (first seen on line {first})")]
    DuplicateId { line: usize, id: String, first: usize },
    #[error("split `{0}` is empty")]
    EmptySplit(Split),
    #[error("k must be a positive integer")]
    InvalidK,
    #[error("k={k} exceeds the {available} available {class} training records")]
    InsufficientClass {
        class: Label,
        k: usize,
        available: usize,
    },
    #[error("fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Binary meme label. Serialized as the integers 0 and 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    NonHateful = 0,
    Hateful = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::NonHateful, Label::Hateful];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(value: u64) -> Option<Label> {
        match value {
            0 => Some(Label::NonHateful),
            1 => Some(Label::Hateful),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::NonHateful => "non-hateful",
            Label::Hateful => "hateful",
        })
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(*self as u8)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = u64::deserialize(deserializer)?;
        Label::from_index(raw)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown label value {raw}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemeRecord {
    pub id: String,
    pub split: Split,
    pub label: Label,
    /// Text extracted from the meme image.
    pub meme_text: String,
    pub caption: String,
    #[serde(default)]
    pub entities: Vec<String>,
    #[serde(default)]
    pub demographics: Vec<String>,
    #[serde(default)]
    pub target: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<MemeRecord>,
    pub target_vocabulary: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub hateful: usize,
    pub non_hateful: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.hateful + self.non_hateful
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Hateful => self.hateful,
            Label::NonHateful => self.non_hateful,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub train: ClassCounts,
    pub test: ClassCounts,
}

impl Dataset {
    pub fn new(name: impl Into<String>, records: Vec<MemeRecord>) -> Self {
        Dataset {
            name: name.into(),
            records,
            target_vocabulary: None,
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &MemeRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn train(&self) -> Vec<&MemeRecord> {
        self.split(Split::Train).collect()
    }

    pub fn test(&self) -> Vec<&MemeRecord> {
        self.split(Split::Test).collect()
    }

    pub fn get(&self, id: &str) -> Option<&MemeRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Training runs need both splits populated.
    pub fn ensure_trainable(&self) -> Result<(), CorpusError> {
        for split in [Split::Train, Split::Test] {
            if self.split(split).next().is_none() {
                return Err(CorpusError::EmptySplit(split));
            }
        }
        Ok(())
    }
}

pub fn split_stats(ds: &Dataset) -> SplitStats {
    let mut stats = SplitStats::default();
    for r in &ds.records {
        let counts = match r.split {
            Split::Train => &mut stats.train,
            Split::Test => &mut stats.test,
        };
        match r.label {
            Label::Hateful => counts.hateful += 1,
            Label::NonHateful => counts.non_hateful += 1,
        }
    }
    stats
}

/// Loads a dataset, naming it after the file stem.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset, CorpusError> {
    load_jsonl_with_targets(path, None)
}

/// Loads a dataset whose `target` values must come from `target_vocabulary`.
pub fn load_jsonl_with_targets(
    path: impl AsRef<Path>,
    target_vocabulary: Option<Vec<String>>,
) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_jsonl(BufReader::new(file), name, target_vocabulary).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn parse_jsonl<R: BufRead>(
    reader: R,
    name: impl Into<String>,
    target_vocabulary: Option<Vec<String>>,
) -> Result<Dataset, CorpusError> {
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(&line, line_no, target_vocabulary.as_deref())?;
        if let Some(&first) = seen.get(&record.id) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: record.id,
                first,
            });
        }
        seen.insert(record.id.clone(), line_no);
        records.push(record);
    }
    Ok(Dataset {
        name: name.into(),
        records,
        target_vocabulary,
    })
}

fn parse_record(
    line: &str,
    line_no: usize,
    vocab: Option<&[String]>,
) -> Result<MemeRecord, CorpusError> {
    let value: Value = serde_json::from_str(line.trim_start_matches('\u{feff}')).map_err(|e| {
        CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        }
    })?;
    let obj = value.as_object().ok_or_else(|| CorpusError::Parse {
        line: line_no,
        message: "expected a JSON object".into(),
    })?;

    let required = |field: &'static str| -> Result<&Value, CorpusError> {
        obj.get(field)
            .filter(|v| !v.is_null())
            .ok_or(CorpusError::MissingField {
                line: line_no,
                field,
            })
    };
    let string = |field: &'static str| -> Result<String, CorpusError> {
        required(field)?
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| CorpusError::InvalidField {
                line: line_no,
                field,
                reason: "must be a string".into(),
            })
    };
    let nonempty = |field: &'static str| -> Result<String, CorpusError> {
        let s = string(field)?;
        if s.trim().is_empty() {
            return Err(CorpusError::InvalidField {
                line: line_no,
                field,
                reason: "must not be empty".into(),
            });
        }
        Ok(s)
    };
    let string_list = |field: &'static str| -> Result<Vec<String>, CorpusError> {
        match obj.get(field) {
            None | Some(Value::Null) => Ok(Vec::new()),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(str::to_owned)
                        .ok_or_else(|| CorpusError::InvalidField {
                            line: line_no,
                            field,
                            reason: "must contain only strings".into(),
                        })
                })
                .collect(),
            Some(_) => Err(CorpusError::InvalidField {
                line: line_no,
                field,
                reason: "must be a list of strings".into(),
            }),
        }
    };

    let id = nonempty("id")?;
    let split = match string("split")?.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => {
            return Err(CorpusError::InvalidField {
                line: line_no,
                field: "split",
                reason: format!("must be \"train\" or \"test\", got {other:?}"),
            })
        }
    };
    let raw_label = required("label")?;
    let label = raw_label
        .as_u64()
        .and_then(Label::from_index)
        .ok_or_else(|| CorpusError::UnknownLabel {
            line: line_no,
            value: raw_label.to_string(),
        })?;
    let target = match obj.get("target") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            return Err(CorpusError::InvalidField {
                line: line_no,
                field: "target",
                reason: "must be a string or null".into(),
            })
        }
    };
    if let (Some(t), Some(vocab)) = (&target, vocab) {
        if !vocab.iter().any(|v| v == t) {
            return Err(CorpusError::InvalidField {
                line: line_no,
                field: "target",
                reason: format!("{t:?} is not in the declared target vocabulary"),
            });
        }
    }

    Ok(MemeRecord {
        id,
        split,
        label,
        meme_text: nonempty("meme_text")?,
        caption: nonempty("caption")?,
        entities: string_list("entities")?,
        demographics: string_list("demographics")?,
        target,
    })
}

pub fn write_jsonl<'a>(
    records: impl IntoIterator<Item = &'a MemeRecord>,
    path: impl AsRef<Path>,
) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        let line = serde_json::to_string(r).expect("records always serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Train records of one class, in file order.
fn class_pool(ds: &Dataset, label: Label) -> Vec<&MemeRecord> {
    ds.split(Split::Train).filter(|r| r.label == label).collect()
}

/// Rebuilds a dataset from selected train records (sorted by id) followed by
/// the untouched test split.
fn with_train(ds: &Dataset, mut train: Vec<MemeRecord>) -> Dataset {
    train.sort_by(|a, b| a.id.cmp(&b.id));
    train.extend(ds.split(Split::Test).cloned());
    Dataset {
        name: ds.name.clone(),
        records: train,
        target_vocabulary: ds.target_vocabulary.clone(),
    }
}

fn draw(pool: &[&MemeRecord], amount: usize, rng: &mut rng::StreamRng) -> Vec<MemeRecord> {
    index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}

/// Keeps exactly `k` hateful and `k` non-hateful training records.
pub fn kshot_subsample(ds: &Dataset, k: usize, seed: u64) -> Result<Dataset, CorpusError> {
    if k == 0 {
        return Err(CorpusError::InvalidK);
    }
    let mut selected = Vec::with_capacity(2 * k);
    for label in [Label::Hateful, Label::NonHateful] {
        let pool = class_pool(ds, label);
        if pool.len() < k {
            return Err(CorpusError::InsufficientClass {
                class: label,
                k,
                available: pool.len(),
            });
        }
        let mut rng = rng::derive(seed, &["kshot", &k.to_string(), &label.index().to_string()]);
        selected.extend(draw(&pool, k, &mut rng));
    }
    Ok(with_train(ds, selected))
}

/// Number of records kept from a class of `count` at fraction `frac`.
pub fn fraction_count(count: usize, frac: f64) -> usize {
    if count == 0 {
        return 0;
    }
    // the epsilon absorbs representation error, e.g. 0.1 * 3050
    let kept = (frac * count as f64 + 1e-9).floor() as usize;
    kept.clamp(1, count)
}

/// Keeps `floor(frac * n)` records of each class (at least one per nonempty class).
pub fn fraction_subsample(ds: &Dataset, frac: f64, seed: u64) -> Result<Dataset, CorpusError> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(CorpusError::InvalidFraction(frac));
    }
    let mut selected = Vec::new();
    for label in [Label::Hateful, Label::NonHateful] {
        let pool = class_pool(ds, label);
        let amount = fraction_count(pool.len(), frac);
        let mut rng = rng::derive(
            seed,
            &["fraction", &frac.to_bits().to_string(), &label.index().to_string()],
        );
        selected.extend(draw(&pool, amount, &mut rng));
    }
    Ok(with_train(ds, selected))
}
