//! Experiment configs, run directories, and the commands behind the CLI.
//!
//! Every command writes into a fresh directory under the output root, named
//! after the command and a UTC timestamp. Existing directories are never
//! reused.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{self, compose_description, FixtureProvider, IngestError, IngestSummary, Provider, ProviderKind, Variant};
use crate::backend::{self, HashLogitsMlm, TinyMlm, TinyMlmConfig, Vocab};
use crate::corpus::{self, CorpusError, Dataset, MemeRecord, Split};
use crate::ensemble::{multi_query_predict, target_words, EnsembleResult, DEFAULT_M};
use crate::metrics::{self, EvalResult, MetricsError, RunResult, TableRow};
use crate::prompt::{LabelWordPair, PromptConfig, PromptError, Template, TemplateKind, NOBODY};
use crate::sampler::DemoPools;
use crate::scorer::{self, MaskedLm, ScorerError, TrainConfig};
use crate::synthetic::{self, SyntheticSpec};

const CONFIG_FILE: &str = "config.toml";
const LOG_FILE: &str = "run.log";
const BACKEND_FILE: &str = "backend.json";
const STUB_VOCAB_FILE: &str = "vocab.json";
const DEMOS_FILE: &str = "demos.jsonl";
const META_FILE: &str = "meta.json";
const PREDICTIONS_FILE: &str = "predictions.jsonl";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("no checkpoint at {0}")]
    MissingCheckpoint(PathBuf),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("all {} seeds failed; seed {}: {}", .0.len(), .0[0].0, .0[0].1)]
    AllSeedsFailed(Vec<(u64, String)>),
}

impl ExperimentError {
    /// True for problems with the inputs, as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config(_)
                | ExperimentError::Corpus(_)
                | ExperimentError::Prompt(_)
                | ExperimentError::Ingest(_)
                | ExperimentError::MissingCheckpoint(_)
        )
    }
}

type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    write_file(path, text + "\n")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
}

/// Where the records come from: a JSONL file or the synthetic generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_vocabulary: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FewShot {
    /// `k` records per class.
    K(usize),
    /// Stratified fraction of each class.
    Fraction(f64),
}

impl fmt::Display for FewShot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FewShot::K(k) => write!(f, "k={k}"),
            FewShot::Fraction(x) => write!(f, "fraction={x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Overrides the backend's own default when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Trainable transformer.
    #[default]
    Tiny,
    /// Frozen hash scorer; training is skipped.
    Stub,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Tiny checkpoint to start from instead of random weights. Relative
    /// paths resolve under the cache directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
    pub tiny: TinyMlmConfig,
}

/// Axis values for sweeps and ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    pub label_words: Vec<LabelWordPair>,
    pub m_values: Vec<usize>,
}

pub const ABLATION_LABEL_WORDS: [(&str, &str); 6] = [
    ("normal", "hate"),
    ("hate", "normal"),
    ("benign", "offensive"),
    ("offensive", "benign"),
    ("good", "bad"),
    ("bad", "good"),
];

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            fractions: vec![0.05, 0.1, 0.2, 0.3, 0.5, 1.0],
            label_words: ABLATION_LABEL_WORDS
                .iter()
                .map(|(p, n)| LabelWordPair::new(*p, *n).expect("valid pair"))
                .collect(),
            m_values: (1..=5).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model name in result tables.
    pub name: String,
    pub m: usize,
    pub seeds: Vec<u64>,
    /// Run seeds concurrently.
    pub parallel_seeds: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fewshot: Option<FewShot>,
    pub dataset: DatasetConfig,
    pub prompt: PromptConfig,
    pub training: TrainingConfig,
    pub backend: BackendConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "memeprompt".into(),
            m: DEFAULT_M,
            seeds: vec![1, 2, 3, 4, 5],
            parallel_seeds: true,
            fewshot: None,
            dataset: DatasetConfig::default(),
            prompt: PromptConfig::default(),
            training: TrainingConfig::default(),
            backend: BackendConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn valid_fraction(f: f64) -> bool {
    f > 0.0 && f <= 1.0
}

impl ExperimentConfig {
    /// Parses TOML. A relative dataset path resolves against `base`.
    pub fn from_toml_str(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        if let (Some(base), Some(path)) = (base, cfg.dataset.path.as_mut()) {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// First 16 hex digits of the SHA-256 of the TOML form.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(path), None) => {
                if !path.is_file() {
                    return bad(format!("dataset file {} does not exist", path.display()));
                }
            }
            (None, Some(_)) => {}
            _ => return bad("dataset needs exactly one of `path` or `synthetic`".into()),
        }
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        let distinct: BTreeSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return bad(format!("seeds must be distinct, got {:?}", self.seeds));
        }
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if self.training.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let Some(lr) = self.training.learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("learning_rate must be positive, got {lr}"));
            }
        }
        match self.fewshot {
            Some(FewShot::K(0)) => return bad("fewshot k must be positive".into()),
            Some(FewShot::Fraction(f)) if !valid_fraction(f) => {
                return bad(format!("fewshot fraction must be in (0, 1], got {f}"))
            }
            _ => {}
        }
        if let Some(f) = self.sweep.fractions.iter().find(|f| !valid_fraction(**f)) {
            return bad(format!("sweep fraction must be in (0, 1], got {f}"));
        }
        if self.sweep.m_values.contains(&0) {
            return bad("sweep m values must be at least 1".into());
        }
        self.prompt.label_words.validate()?;
        for pair in &self.sweep.label_words {
            pair.validate()?;
        }
        if let Some(p) = &self.backend.pretrained {
            if self.backend.kind != BackendKind::Tiny {
                return bad("pretrained checkpoints need the tiny backend".into());
            }
            let dir = backend::resolve_checkpoint(p);
            if !TinyMlm::checkpoint_exists(&dir) {
                return bad(format!("pretrained checkpoint {} not found", dir.display()));
            }
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            seed,
        }
    }

    /// Short description used in result tables.
    pub fn setting(&self) -> String {
        let template = match self.prompt.template.kind() {
            TemplateKind::LabelOnly => "plain",
            TemplateKind::LabelAndTarget => "target",
        };
        let variant = match self.prompt.variant {
            Variant::Plain => "plain",
            Variant::Det => "det",
        };
        let data = self.fewshot.map_or("full".to_string(), |f| f.to_string());
        format!(
            "variant={variant} template={template} label_words={} m={} demos={} train={data}",
            self.prompt.label_words, self.m, self.prompt.use_demonstrations
        )
    }
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub m: Option<usize>,
    pub variant: Option<Variant>,
    pub label_words: Option<LabelWordPair>,
    pub template: Option<Template>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(m) = self.m {
            cfg.m = m;
        }
        if let Some(v) = self.variant {
            cfg.prompt.variant = v;
        }
        if let Some(w) = &self.label_words {
            cfg.prompt.label_words = w.clone();
        }
        if let Some(t) = &self.template {
            cfg.prompt.template = t.clone();
        }
    }
}

/// Loads the configured dataset and checks it can support the run.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = match (&cfg.dataset.path, &cfg.dataset.synthetic) {
        (Some(path), None) => {
            corpus::load_jsonl_with_targets(path, cfg.dataset.target_vocabulary.clone())?
        }
        (None, Some(spec)) => {
            let mut ds = synthetic::generate(spec);
            if let Some(vocab) = &cfg.dataset.target_vocabulary {
                ds.target_vocabulary = Some(vocab.clone());
            }
            ds
        }
        _ => {
            return Err(ExperimentError::Config(
                "dataset needs exactly one of `path` or `synthetic`".into(),
            ))
        }
    };
    ds.ensure_trainable()?;
    if let Some(FewShot::K(k)) = cfg.fewshot {
        corpus::kshot_subsample(&ds, k, 0)?;
    }
    Ok(ds)
}

/// The training split a seed works with. Train records are always sorted by
/// id, so a full-data run and a fraction-1.0 run see identical inputs.
pub fn prepare_train(ds: &Dataset, fewshot: Option<FewShot>, seed: u64) -> Result<Dataset, CorpusError> {
    match fewshot {
        Some(FewShot::K(k)) => corpus::kshot_subsample(ds, k, seed),
        Some(FewShot::Fraction(f)) => corpus::fraction_subsample(ds, f, seed),
        None => corpus::fraction_subsample(ds, 1.0, seed),
    }
}

/// Target categories scored at the target mask: the declared vocabulary, or
/// the targets seen in training.
pub fn dataset_targets(ds: &Dataset) -> Vec<String> {
    ds.target_vocabulary.clone().unwrap_or_else(|| {
        ds.split(Split::Train)
            .filter_map(|r| r.target.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    })
}

/// Word vocabulary covering every prompt the config can produce on `ds`.
pub fn build_vocab(prompt: &PromptConfig, ds: &Dataset) -> Vocab {
    let targets = target_words(prompt, &dataset_targets(ds));
    let lw = &prompt.label_words;
    let mut texts: Vec<String> = Vec::with_capacity(2 * ds.records.len() + 8);
    for r in &ds.records {
        texts.push(r.meme_text.clone());
        texts.push(compose_description(r, prompt.variant));
    }
    texts.push(prompt.template.render_with_target(&lw.pos_word, NOBODY));
    texts.push(prompt.template.render_with_target(&lw.neg_word, NOBODY));
    texts.extend(targets);
    Vocab::build(texts.iter().map(String::as_str))
}

#[derive(Debug, Serialize, Deserialize)]
struct BackendMeta {
    kind: BackendKind,
    #[serde(default)]
    key: u64,
}

/// A backend instance as used by the experiment commands.
#[derive(Debug)]
pub enum Model {
    Tiny(TinyMlm),
    Stub(HashLogitsMlm),
}

impl Model {
    pub fn init(cfg: &ExperimentConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        match cfg.backend.kind {
            BackendKind::Stub => Ok(Model::Stub(HashLogitsMlm::new(vocab, seed))),
            BackendKind::Tiny => {
                let mut model = match &cfg.backend.pretrained {
                    Some(p) => TinyMlm::load(backend::resolve_checkpoint(p))?,
                    None => TinyMlm::new(vocab, cfg.backend.tiny.clone(), seed)?,
                };
                if let Some(lr) = cfg.training.learning_rate {
                    model.set_learning_rate(lr);
                }
                Ok(Model::Tiny(model))
            }
        }
    }

    pub fn scorer(&self) -> &dyn MaskedLm {
        match self {
            Model::Tiny(m) => m,
            Model::Stub(m) => m,
        }
    }

    /// Trains on `train`; the frozen stub returns an empty loss curve.
    pub fn fit(
        &mut self,
        train: &[&MemeRecord],
        prompt: &PromptConfig,
        cfg: &TrainConfig,
    ) -> Result<Vec<f64>, ScorerError> {
        match self {
            Model::Tiny(m) => scorer::train(m, train, prompt, cfg),
            Model::Stub(_) => Ok(Vec::new()),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta = match self {
            Model::Tiny(m) => {
                m.save(dir)?;
                BackendMeta { kind: BackendKind::Tiny, key: 0 }
            }
            Model::Stub(m) => {
                write_json(&dir.join(STUB_VOCAB_FILE), m.vocab())?;
                BackendMeta { kind: BackendKind::Stub, key: m.key() }
            }
        };
        write_json(&dir.join(BACKEND_FILE), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(BACKEND_FILE);
        if !meta_path.is_file() {
            return Err(ExperimentError::MissingCheckpoint(dir.to_path_buf()));
        }
        let meta: BackendMeta = read_json(&meta_path)?;
        match meta.kind {
            BackendKind::Tiny => {
                if !TinyMlm::checkpoint_exists(dir) {
                    return Err(ExperimentError::MissingCheckpoint(dir.to_path_buf()));
                }
                Ok(Model::Tiny(TinyMlm::load(dir)?))
            }
            BackendKind::Stub => {
                let vocab: Vocab = read_json(&dir.join(STUB_VOCAB_FILE))?;
                Ok(Model::Stub(HashLogitsMlm::new(vocab, meta.key)))
            }
        }
    }
}

/// Everything `predict` needs besides the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub m: usize,
    pub prompt: PromptConfig,
    pub target_vocabulary: Vec<String>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    /// Training records demonstrations are drawn from.
    pub demos: Vec<MemeRecord>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        corpus::write_jsonl(&self.demos, dir.join(DEMOS_FILE))?;
        write_json(&dir.join(META_FILE), &self.meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.join(META_FILE).is_file() {
            return Err(ExperimentError::MissingCheckpoint(dir.to_path_buf()));
        }
        let model = Model::load(dir)?;
        let meta: CheckpointMeta = read_json(&dir.join(META_FILE))?;
        let demos = corpus::load_jsonl(dir.join(DEMOS_FILE))?.records;
        Ok(Checkpoint { model, demos, meta })
    }
}

/// Scores `records` with `m` demonstration pairs each.
pub fn predict_records(
    backend: &dyn MaskedLm,
    records: &[&MemeRecord],
    pools: &DemoPools<'_>,
    m: usize,
    seed: u64,
    prompt: &PromptConfig,
    targets: &[String],
) -> Result<Vec<EnsembleResult>, ScorerError> {
    let words = target_words(prompt, targets);
    records
        .iter()
        .map(|r| multi_query_predict(r, pools, m, seed, backend, prompt, Some(&words)))
        .collect()
}

fn write_predictions(path: &Path, records: &[&MemeRecord], results: &[EnsembleResult]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for (r, res) in records.iter().zip(results) {
        let line = serde_json::to_string(&res.line(&r.id)).expect("prediction serializes");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Append-only output directory for one command invocation.
#[derive(Debug)]
pub struct RunDirectory {
    root: PathBuf,
    log: Mutex<File>,
}

impl RunDirectory {
    /// Creates `<out>/<command>-<UTC timestamp>`, adding a numeric suffix
    /// rather than reusing an existing directory.
    pub fn create(out: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(out).map_err(io_err(out))?;
        let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
        let base = format!("{command}-{stamp}");
        let mut n = 0;
        let root = loop {
            let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
            let candidate = out.join(name);
            match fs::create_dir(&candidate) {
                Ok(()) => break candidate,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(io_err(&candidate)(e)),
            }
        };
        let log_path = root.join(LOG_FILE);
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        Ok(RunDirectory {
            root,
            log: Mutex::new(log),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log(&self, message: impl AsRef<str>) {
        let message = message.as_ref();
        tracing::info!("{message}");
        let stamp = chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ");
        if let Ok(mut f) = self.log.lock() {
            let _ = writeln!(f, "{stamp} {message}");
        }
    }

    pub fn write_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        write_file(&self.root.join(CONFIG_FILE), cfg.to_toml())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub train_size: usize,
    pub loss_curve: Vec<f64>,
    pub eval: EvalResult,
}

/// One seed: subsample, train, predict the test split, score, and save.
pub fn run_seed(cfg: &ExperimentConfig, ds: &Dataset, seed: u64, dir: &Path) -> Result<SeedReport> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let sub = prepare_train(ds, cfg.fewshot, seed)?;
    let mut model = Model::init(cfg, build_vocab(&cfg.prompt, ds), seed)?;
    let train = sub.train();
    let loss_curve = model.fit(&train, &cfg.prompt, &cfg.train_config(seed))?;

    let targets = dataset_targets(ds);
    let pools = DemoPools::new(train.iter().copied());
    let test = sub.test();
    let results = predict_records(model.scorer(), &test, &pools, cfg.m, seed, &cfg.prompt, &targets)?;
    write_predictions(&dir.join(PREDICTIONS_FILE), &test, &results)?;

    let y1: Vec<f64> = results.iter().map(|r| r.y_final.y1).collect();
    let preds: Vec<_> = results.iter().map(|r| r.predicted).collect();
    let labels: Vec<_> = test.iter().map(|r| r.label).collect();
    let eval = metrics::evaluate(&y1, &preds, &labels, seed)?;

    let checkpoint = Checkpoint {
        model,
        demos: train.iter().map(|r| (*r).clone()).collect(),
        meta: CheckpointMeta {
            seed,
            m: cfg.m,
            prompt: cfg.prompt.clone(),
            target_vocabulary: targets,
        },
    };
    checkpoint.save(&dir.join("checkpoint"))?;
    let report = SeedReport {
        seed,
        train_size: train.len(),
        loss_curve,
        eval,
    };
    write_json(&dir.join("seed.json"), &report)?;
    Ok(report)
}

/// Aggregate of one configuration over all its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub setting: String,
    pub result: RunResult,
    pub seeds: Vec<SeedReport>,
    /// Seeds that failed, with their error messages.
    pub failures: Vec<(u64, String)>,
}

/// Runs every seed of `cfg` under `dir`. Fails only when all seeds fail.
pub fn run_row(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    setting: &str,
    dir: &Path,
    run: &RunDirectory,
) -> Result<RowResult> {
    cfg.validate()?;
    run.log(format!("{setting}: seeds {:?}", cfg.seeds));
    let go = |&seed: &u64| {
        let out = run_seed(cfg, ds, seed, &dir.join(format!("seed-{seed}")));
        match &out {
            Ok(r) => run.log(format!(
                "{setting}: seed {seed} auroc={:.4} acc={:.4}",
                r.eval.auroc, r.eval.accuracy
            )),
            Err(e) => run.log(format!("{setting}: seed {seed} failed: {e}")),
        }
        out.map_err(|e| (seed, e.to_string()))
    };
    let outcomes: Vec<_> = if cfg.parallel_seeds {
        cfg.seeds.par_iter().map(go).collect()
    } else {
        cfg.seeds.iter().map(go).collect()
    };
    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => seeds.push(r),
            Err(f) => failures.push(f),
        }
    }
    if seeds.is_empty() {
        return Err(ExperimentError::AllSeedsFailed(failures));
    }
    let evals: Vec<EvalResult> = seeds.iter().map(|s| s.eval).collect();
    let mut result = metrics::aggregate_seeds(&evals).expect("nonempty");
    result.config_hash = cfg.config_hash();
    let row = RowResult {
        setting: setting.to_string(),
        result,
        seeds,
        failures,
    };
    write_json(&dir.join("metrics.json"), &row)?;
    Ok(row)
}

fn write_table(path: &Path, model: &str, dataset: &str, rows: &[RowResult]) -> Result<()> {
    let table: Vec<TableRow<'_>> = rows
        .iter()
        .map(|r| TableRow {
            model,
            dataset,
            setting: &r.setting,
            result: &r.result,
        })
        .collect();
    metrics::write_results_csv_file(path, &table)
        .map_err(|e| ExperimentError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })
}

fn start(cfg: &ExperimentConfig, out: &Path, command: &str) -> Result<(Dataset, RunDirectory)> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let run = RunDirectory::create(out, command)?;
    run.write_config(cfg)?;
    run.log(format!("{command}: dataset {} ({} records)", ds.name, ds.records.len()));
    Ok((ds, run))
}

#[derive(Debug, Clone)]
pub struct TrainEvalReport {
    pub run_dir: PathBuf,
    pub row: RowResult,
}

pub fn cmd_train_eval(cfg: &ExperimentConfig, out: &Path) -> Result<TrainEvalReport> {
    let (ds, run) = start(cfg, out, "train-eval")?;
    let setting = cfg.setting();
    let row = run_row(cfg, &ds, &setting, run.root(), &run)?;
    write_table(&run.root().join("metrics.csv"), &cfg.name, &ds.name, std::slice::from_ref(&row))?;
    run.log(format!(
        "done: auroc {} acc {}",
        metrics::format_pm(row.result.mean_auroc, row.result.std_auroc),
        metrics::format_pm(row.result.mean_acc, row.result.std_acc)
    ));
    Ok(TrainEvalReport {
        run_dir: run.root().to_path_buf(),
        row,
    })
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub run_dir: PathBuf,
    pub rows: Vec<(f64, RowResult)>,
}

/// One row per training fraction, all with the same seeds.
pub fn cmd_fewshot_sweep(cfg: &ExperimentConfig, fractions: &[f64], out: &Path) -> Result<SweepReport> {
    if fractions.is_empty() {
        return Err(ExperimentError::Config("no fractions to sweep".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !valid_fraction(**f)) {
        return Err(ExperimentError::Config(format!("fraction must be in (0, 1], got {f}")));
    }
    let (ds, run) = start(cfg, out, "fewshot")?;
    let mut rows = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let row_cfg = ExperimentConfig {
            fewshot: Some(FewShot::Fraction(f)),
            ..cfg.clone()
        };
        let setting = format!("fraction={f}");
        let dir = run.root().join(format!("fraction-{f}"));
        rows.push((f, run_row(&row_cfg, &ds, &setting, &dir, &run)?));
    }

    let path = run.root().join("fewshot.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| ExperimentError::Io {
        path: path.clone(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let csv_err = |e: csv::Error| ExperimentError::Io {
        path: path.clone(),
        source: std::io::Error::other(e.to_string()),
    };
    w.write_record(["fraction", "train_size", "seeds", "mean_auroc", "std_auroc", "mean_acc", "std_acc"])
        .map_err(csv_err)?;
    for (f, row) in &rows {
        let r = &row.result;
        w.write_record([
            f.to_string(),
            row.seeds[0].train_size.to_string(),
            r.per_seed.len().to_string(),
            format!("{:.6}", r.mean_auroc),
            format!("{:.6}", r.std_auroc),
            format!("{:.6}", r.mean_acc),
            format!("{:.6}", r.std_acc),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&path))?;
    let table: Vec<RowResult> = rows.iter().map(|(_, r)| r.clone()).collect();
    write_table(&run.root().join("metrics.csv"), &cfg.name, &ds.name, &table)?;
    Ok(SweepReport {
        run_dir: run.root().to_path_buf(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    LabelWords,
    M,
    Target,
    Demos,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::LabelWords => "label_words",
            AblationAxis::M => "m",
            AblationAxis::Target => "target",
            AblationAxis::Demos => "demos",
        }
    }
}

impl FromStr for AblationAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "label_words" => Ok(AblationAxis::LabelWords),
            "m" => Ok(AblationAxis::M),
            "target" => Ok(AblationAxis::Target),
            "demos" => Ok(AblationAxis::Demos),
            _ => Err(format!("unknown axis {s:?}; expected label_words, m, target, or demos")),
        }
    }
}

/// Row labels and configs for one ablation axis. All rows keep the base seeds.
pub fn ablation_rows(cfg: &ExperimentConfig, axis: AblationAxis) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::LabelWords => cfg
            .sweep
            .label_words
            .iter()
            .map(|w| (w.to_string(), with(&|c| c.prompt.label_words = w.clone())))
            .collect(),
        AblationAxis::M => cfg
            .sweep
            .m_values
            .iter()
            .map(|&m| (format!("m={m}"), with(&|c| c.m = m)))
            .collect(),
        AblationAxis::Target => vec![
            ("w/o Target".into(), with(&|c| c.prompt.template = Template::label_only())),
            ("w Target".into(), with(&|c| c.prompt.template = Template::with_target())),
        ],
        AblationAxis::Demos => vec![
            ("w/o Demo".into(), with(&|c| c.prompt.use_demonstrations = false)),
            ("w Demo".into(), with(&|c| c.prompt.use_demonstrations = true)),
        ],
    }
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '=' { c } else { '-' })
        .collect()
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub run_dir: PathBuf,
    pub axis: AblationAxis,
    pub rows: Vec<RowResult>,
}

pub fn cmd_ablate(cfg: &ExperimentConfig, axis: AblationAxis, out: &Path) -> Result<AblationReport> {
    let rows_cfg = ablation_rows(cfg, axis);
    if rows_cfg.is_empty() {
        return Err(ExperimentError::Config(format!("no values for axis {}", axis.as_str())));
    }
    for (_, c) in &rows_cfg {
        c.validate()?;
    }
    let (ds, run) = start(cfg, out, &format!("ablate-{}", axis.as_str()))?;
    let mut rows = Vec::with_capacity(rows_cfg.len());
    for (i, (setting, row_cfg)) in rows_cfg.iter().enumerate() {
        let dir = run.root().join(format!("{i:02}-{}", slug(setting)));
        rows.push(run_row(row_cfg, &ds, setting, &dir, &run)?);
    }
    write_table(
        &run.root().join(format!("ablation-{}.csv", axis.as_str())),
        &cfg.name,
        &ds.name,
        &rows,
    )?;
    Ok(AblationReport {
        run_dir: run.root().to_path_buf(),
        axis,
        rows,
    })
}

/// Settings for `cmd_predict` that override the checkpoint's own.
#[derive(Debug, Clone, Default)]
pub struct PredictOptions {
    pub m: Option<usize>,
    pub seed: Option<u64>,
    pub prompt: Option<PromptConfig>,
}

#[derive(Debug, Clone)]
pub struct PredictReport {
    pub run_dir: PathBuf,
    pub predictions: PathBuf,
    pub count: usize,
}

/// Scores every record of `input` with a saved checkpoint.
pub fn cmd_predict(checkpoint: &Path, input: &Path, opts: &PredictOptions, out: &Path) -> Result<PredictReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = corpus::load_jsonl(input)?;
    let prompt = opts.prompt.clone().unwrap_or_else(|| ckpt.meta.prompt.clone());
    prompt.label_words.validate()?;
    let m = opts.m.unwrap_or(ckpt.meta.m);
    if m == 0 {
        return Err(ExperimentError::Config("m must be at least 1".into()));
    }
    let seed = opts.seed.unwrap_or(ckpt.meta.seed);

    let run = RunDirectory::create(out, "predict")?;
    run.log(format!(
        "predict: checkpoint {} input {} m={m} seed={seed}",
        checkpoint.display(),
        input.display()
    ));
    let pools = DemoPools::new(ckpt.demos.iter());
    let records: Vec<&MemeRecord> = ds.records.iter().collect();
    let results = predict_records(
        ckpt.model.scorer(),
        &records,
        &pools,
        m,
        seed,
        &prompt,
        &ckpt.meta.target_vocabulary,
    )?;
    let path = run.root().join(PREDICTIONS_FILE);
    write_predictions(&path, &records, &results)?;
    run.log(format!("wrote {} predictions", results.len()));
    Ok(PredictReport {
        run_dir: run.root().to_path_buf(),
        predictions: path,
        count: results.len(),
    })
}

/// Fixture files replaying the extraction providers.
#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub input: PathBuf,
    pub captions: PathBuf,
    pub entities: Option<PathBuf>,
    pub demographics: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub run_dir: PathBuf,
    pub records: PathBuf,
    pub summary: IngestSummary,
}

pub fn cmd_ingest(opts: &IngestOptions, out: &Path) -> Result<IngestReport> {
    let raws = augment::read_raw_jsonl(&opts.input)?;
    let mut providers = vec![FixtureProvider::from_file(ProviderKind::Caption, &opts.captions)?];
    if let Some(p) = &opts.entities {
        providers.push(FixtureProvider::from_file(ProviderKind::Entity, p)?);
    }
    if let Some(p) = &opts.demographics {
        providers.push(FixtureProvider::from_file(ProviderKind::Demographic, p)?);
    }
    let refs: Vec<&dyn Provider> = providers.iter().map(|p| p as &dyn Provider).collect();
    let (records, summary) = augment::ingest(&raws, &refs);

    let run = RunDirectory::create(out, "ingest")?;
    let path = run.root().join("records.jsonl");
    corpus::write_jsonl(&records, &path)?;
    write_json(&run.root().join("ingest_summary.json"), &summary)?;
    run.log(format!(
        "ingest: {} read, {} written, {} dropped, {} provider failures",
        summary.total,
        summary.written,
        summary.dropped.len(),
        summary.failure_count
    ));
    Ok(IngestReport {
        run_dir: run.root().to_path_buf(),
        records: path,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_cfg() -> ExperimentConfig {
        ExperimentConfig {
            seeds: vec![1, 2],
            dataset: DatasetConfig {
                synthetic: Some(SyntheticSpec {
                    train_per_class: 12,
                    test_per_class: 6,
                    ..Default::default()
                }),
                ..Default::default()
            },
            backend: BackendConfig {
                kind: BackendKind::Stub,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn config_toml_roundtrip_and_hash() {
        let cfg = ExperimentConfig {
            fewshot: Some(FewShot::Fraction(0.1)),
            ..synthetic_cfg()
        };
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml_str(&text, None).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_hash(), cfg.config_hash());
        assert_eq!(cfg.config_hash().len(), 16);
        let other = ExperimentConfig { m: 3, ..cfg.clone() };
        assert_ne!(other.config_hash(), cfg.config_hash());
    }

    #[test]
    fn parses_handwritten_config() {
        let text = r#"
            seeds = [7, 8]
            m = 3
            fewshot = { k = 4 }

            [dataset]
            path = "data/memes.jsonl"

            [prompt]
            label_words = "benign,offensive"
            template = "It was {W} targeting at {T}."
            variant = "plain"

            [training]
            epochs = 2
            learning_rate = 0.01
        "#;
        let cfg = ExperimentConfig::from_toml_str(text, Some(Path::new("/base"))).unwrap();
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert_eq!(cfg.fewshot, Some(FewShot::K(4)));
        assert_eq!(cfg.dataset.path.as_deref(), Some(Path::new("/base/data/memes.jsonl")));
        assert_eq!(cfg.prompt.label_words.neg_word, "offensive");
        assert_eq!(cfg.prompt.template.kind(), TemplateKind::LabelAndTarget);
        assert_eq!(cfg.training.batch_size, 16);
        assert!(ExperimentConfig::from_toml_str("bogus = 1", None).is_err());
    }

    #[test]
    fn validation_catches_bad_configs() {
        let ok = synthetic_cfg();
        ok.validate().unwrap();
        let cases = [
            ExperimentConfig { seeds: vec![], ..ok.clone() },
            ExperimentConfig { seeds: vec![1, 1], ..ok.clone() },
            ExperimentConfig { m: 0, ..ok.clone() },
            ExperimentConfig { fewshot: Some(FewShot::Fraction(0.0)), ..ok.clone() },
            ExperimentConfig { fewshot: Some(FewShot::K(0)), ..ok.clone() },
            ExperimentConfig {
                dataset: DatasetConfig {
                    path: Some("/definitely/missing.jsonl".into()),
                    ..Default::default()
                },
                ..ok.clone()
            },
            ExperimentConfig { dataset: DatasetConfig::default(), ..ok.clone() },
        ];
        for c in cases {
            let err = c.validate().unwrap_err();
            assert!(err.is_validation(), "{err}");
        }
    }

    #[test]
    fn overrides_replace_fields() {
        let mut cfg = synthetic_cfg();
        Overrides {
            seeds: Some(vec![9]),
            m: Some(4),
            variant: Some(Variant::Plain),
            label_words: Some("normal,hate".parse().unwrap()),
            template: Some(Template::with_target()),
        }
        .apply(&mut cfg);
        assert_eq!(cfg.seeds, vec![9]);
        assert_eq!(cfg.m, 4);
        assert_eq!(cfg.prompt.variant, Variant::Plain);
        assert_eq!(cfg.prompt.label_words.pos_word, "normal");
        assert_eq!(cfg.prompt.template.kind(), TemplateKind::LabelAndTarget);
    }

    #[test]
    fn ablation_rows_share_seeds() {
        let cfg = synthetic_cfg();
        let count = |axis| ablation_rows(&cfg, axis).len();
        assert_eq!(count(AblationAxis::LabelWords), 6);
        assert_eq!(count(AblationAxis::M), 5);
        assert_eq!(count(AblationAxis::Target), 2);
        assert_eq!(count(AblationAxis::Demos), 2);
        for axis in [AblationAxis::LabelWords, AblationAxis::M, AblationAxis::Target] {
            assert!(ablation_rows(&cfg, axis).iter().all(|(_, c)| c.seeds == cfg.seeds));
        }
        assert_eq!("label-words".parse::<AblationAxis>(), Ok(AblationAxis::LabelWords));
    }

    #[test]
    fn full_data_equals_fraction_one() {
        let ds = load_dataset(&synthetic_cfg()).unwrap();
        let full = prepare_train(&ds, None, 3).unwrap();
        let one = prepare_train(&ds, Some(FewShot::Fraction(1.0)), 3).unwrap();
        assert_eq!(full, one);
    }

    #[test]
    fn vocab_covers_prompt_words() {
        let mut cfg = synthetic_cfg();
        cfg.prompt.template = Template::with_target();
        let ds = load_dataset(&cfg).unwrap();
        let vocab = build_vocab(&cfg.prompt, &ds);
        for w in ["it", "was", "good", "bad", "targeting", "at", "nobody", "race", "zork"] {
            assert!(vocab.id(w).is_some(), "{w}");
        }
    }

    #[test]
    fn run_directories_never_collide() {
        let tmp = tempfile::tempdir().unwrap();
        let a = RunDirectory::create(tmp.path(), "x").unwrap();
        let b = RunDirectory::create(tmp.path(), "x").unwrap();
        assert_ne!(a.root(), b.root());
        a.log("hello");
        let log = fs::read_to_string(a.root().join(LOG_FILE)).unwrap();
        assert!(log.trim_end().ends_with("hello"));
    }

    #[test]
    fn stub_train_eval_writes_run_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let report = cmd_train_eval(&synthetic_cfg(), tmp.path()).unwrap();
        let root = &report.run_dir;
        assert_eq!(report.row.result.per_seed.len(), 2);
        for f in ["config.toml", "run.log", "metrics.json", "metrics.csv"] {
            assert!(root.join(f).is_file(), "{f}");
        }
        let seed_dir = root.join("seed-1");
        assert!(seed_dir.join(PREDICTIONS_FILE).is_file());
        assert!(seed_dir.join("checkpoint").join(BACKEND_FILE).is_file());
        let snapshot = ExperimentConfig::from_file(root.join(CONFIG_FILE)).unwrap();
        assert_eq!(snapshot, synthetic_cfg());
    }

    #[test]
    fn missing_checkpoint_is_validation_error() {
        let tmp = tempfile::tempdir().unwrap();
        let err = cmd_predict(
            &tmp.path().join("nope"),
            &tmp.path().join("in.jsonl"),
            &PredictOptions::default(),
            tmp.path(),
        )
        .unwrap_err();
        assert!(matches!(err, ExperimentError::MissingCheckpoint(_)));
        assert!(err.is_validation());
    }
}
