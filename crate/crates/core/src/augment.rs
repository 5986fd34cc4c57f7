//! Image-description composition and the provider contracts that fill it.
//!
//! Captioning, web-entity detection and demographic classification are
//! external models. Here they sit behind [`Provider`]; the bundled
//! [`FixtureProvider`] replays recorded outputs from a JSON map.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{Label, MemeRecord, Split};
use crate::prompt::strip_reserved;

/// Which parts of the image description reach the prompt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Caption only.
    #[default]
    Plain,
    /// Caption plus entity and demographic clauses.
    Det,
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(Variant::Plain),
            "det" => Ok(Variant::Det),
            other => Err(format!("unknown variant {other:?}; expected plain or det")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageDescription {
    pub caption: String,
    pub entity_clause: String,
    pub demographic_clause: String,
}

const CLAUSE_JOINER: &str = " . ";

/// Collapses whitespace, removes reserved prompt markers and trailing periods.
fn normalize_clause(raw: &str) -> String {
    let cleaned = strip_reserved(raw);
    let collapsed = cleaned.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| c == '.' || c.is_whitespace())
        .to_string()
}

impl ImageDescription {
    pub fn from_record(rec: &MemeRecord) -> Self {
        let entities: Vec<String> = rec
            .entities
            .iter()
            .map(|e| normalize_clause(e))
            .filter(|e| !e.is_empty())
            .collect();
        let demographics: Vec<String> = rec
            .demographics
            .iter()
            .map(|d| normalize_clause(d))
            .filter(|d| !d.is_empty())
            .collect();
        ImageDescription {
            caption: normalize_clause(&rec.caption),
            entity_clause: entities.join(", "),
            demographic_clause: demographics.join(" "),
        }
    }

    pub fn render(&self, variant: Variant) -> String {
        match variant {
            Variant::Plain => self.caption.clone(),
            Variant::Det => [&self.caption, &self.entity_clause, &self.demographic_clause]
                .into_iter()
                .filter(|c| !c.is_empty())
                .map(String::as_str)
                .collect::<Vec<_>>()
                .join(CLAUSE_JOINER),
        }
    }
}

pub fn compose_description(rec: &MemeRecord, variant: Variant) -> String {
    ImageDescription::from_record(rec).render(variant)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Caption,
    Entity,
    Demographic,
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProviderKind::Caption => "caption",
            ProviderKind::Entity => "entity",
            ProviderKind::Demographic => "demographic",
        })
    }
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("no fixture output for image {0:?}")]
    MissingFixture(String),
    #[error("provider failed: {0}")]
    Failed(String),
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

/// An image-to-strings extractor. `Ok(None)` means "nothing found".
pub trait Provider: Send + Sync {
    fn name(&self) -> &str;
    fn kind(&self) -> ProviderKind;
    fn call(&self, image_ref: &str) -> Result<Option<Vec<String>>, ProviderError>;
}

/// Replays recorded provider outputs keyed by image reference.
#[derive(Debug, Clone)]
pub struct FixtureProvider {
    name: String,
    kind: ProviderKind,
    outputs: HashMap<String, Option<Vec<String>>>,
}

impl FixtureProvider {
    pub fn new(
        name: impl Into<String>,
        kind: ProviderKind,
        outputs: HashMap<String, Option<Vec<String>>>,
    ) -> Self {
        FixtureProvider {
            name: name.into(),
            kind,
            outputs,
        }
    }

    /// Parses a JSON object mapping image reference to a string, a list of
    /// strings, or null.
    pub fn from_json(
        name: impl Into<String>,
        kind: ProviderKind,
        json: &str,
    ) -> Result<Self, String> {
        let value: Value = serde_json::from_str(json).map_err(|e| e.to_string())?;
        let map = value
            .as_object()
            .ok_or("fixture must be a JSON object keyed by image reference")?;
        let mut outputs = HashMap::with_capacity(map.len());
        for (key, v) in map {
            let out = match v {
                Value::Null => None,
                Value::String(s) => Some(vec![s.clone()]),
                Value::Array(items) => Some(
                    items
                        .iter()
                        .map(|i| {
                            i.as_str()
                                .map(str::to_owned)
                                .ok_or_else(|| format!("{key}: list items must be strings"))
                        })
                        .collect::<Result<_, _>>()?,
                ),
                _ => return Err(format!("{key}: expected string, list of strings, or null")),
            };
            outputs.insert(key.clone(), out);
        }
        Ok(Self::new(name, kind, outputs))
    }

    pub fn from_file(kind: ProviderKind, path: impl AsRef<Path>) -> Result<Self, IngestError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| kind.to_string());
        Self::from_json(name, kind, &text).map_err(|message| IngestError::Format {
            path: path.display().to_string(),
            message,
        })
    }
}

impl Provider for FixtureProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> ProviderKind {
        self.kind
    }

    fn call(&self, image_ref: &str) -> Result<Option<Vec<String>>, ProviderError> {
        self.outputs
            .get(image_ref)
            .cloned()
            .ok_or_else(|| ProviderError::MissingFixture(image_ref.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProviderFailure {
    pub provider: String,
    pub kind: ProviderKind,
    pub message: String,
}

/// Fields filled in for one image.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProviderOutput {
    pub caption: Option<String>,
    pub entities: Vec<String>,
    pub demographics: Vec<String>,
    pub failures: Vec<ProviderFailure>,
}

impl ProviderOutput {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn run_providers(image_ref: &str, providers: &[&dyn Provider]) -> ProviderOutput {
    let mut out = ProviderOutput::default();
    for provider in providers {
        match provider.call(image_ref) {
            Ok(values) => {
                let values = values.unwrap_or_default();
                match provider.kind() {
                    ProviderKind::Caption => {
                        let caption = values.join(" ");
                        out.caption = (!caption.trim().is_empty()).then_some(caption);
                    }
                    ProviderKind::Entity => out.entities = values,
                    ProviderKind::Demographic => out.demographics = values,
                }
            }
            Err(e) => out.failures.push(ProviderFailure {
                provider: provider.name().to_string(),
                kind: provider.kind(),
                message: e.to_string(),
            }),
        }
    }
    out
}

/// A meme before augmentation: text already extracted, image still a reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawMeme {
    pub id: String,
    pub split: Split,
    pub label: Label,
    pub meme_text: String,
    /// Image reference handed to every provider.
    pub image: String,
    #[serde(default)]
    pub target: Option<String>,
}

pub fn read_raw_jsonl(path: impl AsRef<Path>) -> Result<Vec<RawMeme>, IngestError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| IngestError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| IngestError::Io {
            path: shown.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawMeme = serde_json::from_str(&line).map_err(|e| IngestError::Format {
            path: shown.clone(),
            message: format!("line {}: {e}", i + 1),
        })?;
        out.push(raw);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestSummary {
    pub total: usize,
    pub written: usize,
    /// Records written despite at least one failed provider.
    pub incomplete: Vec<String>,
    /// Records dropped because no caption could be produced.
    pub dropped: Vec<String>,
    pub failure_count: usize,
    pub failures: Vec<(String, ProviderFailure)>,
}

/// Runs every provider over every meme. Provider failures never abort the batch.
pub fn ingest(raws: &[RawMeme], providers: &[&dyn Provider]) -> (Vec<MemeRecord>, IngestSummary) {
    let outputs: Vec<ProviderOutput> = raws
        .par_iter()
        .map(|raw| run_providers(&raw.image, providers))
        .collect();

    let mut summary = IngestSummary {
        total: raws.len(),
        ..Default::default()
    };
    let mut records = Vec::with_capacity(raws.len());
    for (raw, out) in raws.iter().zip(outputs) {
        summary.failure_count += out.failures.len();
        let complete = out.is_complete();
        summary
            .failures
            .extend(out.failures.into_iter().map(|f| (raw.id.clone(), f)));
        let Some(caption) = out.caption else {
            summary.dropped.push(raw.id.clone());
            continue;
        };
        if !complete {
            summary.incomplete.push(raw.id.clone());
        }
        records.push(MemeRecord {
            id: raw.id.clone(),
            split: raw.split,
            label: raw.label,
            meme_text: raw.meme_text.clone(),
            caption,
            entities: out.entities,
            demographics: out.demographics,
            target: raw.target.clone(),
        });
    }
    summary.written = records.len();
    (records, summary)
}
