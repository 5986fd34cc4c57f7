//! Prompt-based hateful meme classification.
//!
//! Meme records (meme text plus an image description) are turned into
//! prompts that pair the meme with one non-hateful and one hateful
//! demonstration. A masked language model fills the label slot of the
//! inference template, and the probabilities of two label words serve as
//! class scores. Several demonstration pairs can be scored and averaged.
//!
//! Module map:
//!
//! - [`corpus`]: JSONL datasets, split statistics, stratified subsampling
//! - [`augment`]: image-description composition and extraction providers
//! - [`prompt`]: templates, label words, prompt assembly and truncation
//! - [`sampler`]: demonstration pairs
//! - [`scorer`]: backend contract, mask scoring, loss, training loop
//! - [`backend`]: bundled backends
//! - [`ensemble`]: multi-query prediction
//! - [`metrics`]: AUROC, accuracy, seed aggregation
//! - [`experiment`]: configs, run directories, experiment commands

pub mod augment;
pub mod backend;
pub mod corpus;
pub mod ensemble;
pub mod experiment;
pub mod metrics;
pub mod prompt;
pub mod rng;
pub mod sampler;
pub mod scorer;
pub mod synthetic;

pub use corpus::{Dataset, Label, MemeRecord, Split};
pub use prompt::{LabelWordPair, Prompt, PromptConfig, Template};
pub use scorer::{MaskedLm, ScoreVector, TrainableMlm};
