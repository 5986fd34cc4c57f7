use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use memeprompt_core::augment::Variant;
use memeprompt_core::backend::CACHE_DIR_ENV;
use memeprompt_core::experiment::{
    self, AblationAxis, ExperimentConfig, ExperimentError, IngestOptions, Overrides, PredictOptions,
};
use memeprompt_core::metrics::format_pm;
use memeprompt_core::{LabelWordPair, Template};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

/// Prompt-based hateful meme classification experiments.
#[derive(Debug, Parser)]
#[command(name = "memeprompt", version, after_help = after_help())]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

fn after_help() -> String {
    format!(
        "Relative pretrained checkpoint paths resolve under ${CACHE_DIR_ENV}.\n\
         Exit codes: 0 success, 1 invalid input, 2 failure while running."
    )
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Experiment config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long, global = true, value_delimiter = ',', value_name = "SEEDS")]
    seed_list: Option<Vec<u64>>,
    /// Demonstration pairs per test meme.
    #[arg(long, global = true)]
    m: Option<usize>,
    /// Image description variant: plain or det.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Label words as POS,NEG (non-hateful first).
    #[arg(long, global = true, value_name = "POS,NEG", value_parser = parse_label_words)]
    label_words: Option<LabelWordPair>,
    #[arg(long, global = true, value_enum)]
    template: Option<TemplateArg>,
    /// Root directory for run outputs.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TemplateArg {
    /// "It was {W}."
    Plain,
    /// "It was {W} targeting at {T}."
    Target,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

fn parse_label_words(s: &str) -> Result<LabelWordPair, String> {
    s.parse().map_err(|e: memeprompt_core::prompt::PromptError| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a dataset from raw memes and recorded provider outputs.
    Ingest {
        /// Raw memes (JSONL with id, split, label, meme_text, image).
        #[arg(long)]
        input: PathBuf,
        /// Caption fixture: JSON object keyed by image reference.
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        entities: Option<PathBuf>,
        #[arg(long)]
        demographics: Option<PathBuf>,
    },
    /// Train and evaluate once per seed.
    TrainEval,
    /// Train-eval at several training fractions.
    Fewshot {
        /// Comma-separated fractions in (0, 1]; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Compare settings along one axis with shared seeds.
    Ablate {
        #[arg(long, value_parser = parse_axis)]
        axis: AblationAxis,
    },
    /// Score a JSONL file with a saved checkpoint.
    Predict {
        /// A seed's checkpoint directory from an earlier run.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
}

fn parse_axis(s: &str) -> Result<AblationAxis, String> {
    s.parse()
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seeds: self.seed_list.clone(),
            m: self.m,
            variant: self.variant,
            label_words: self.label_words.clone(),
            template: self.template.map(|t| match t {
                TemplateArg::Plain => Template::label_only(),
                TemplateArg::Target => Template::with_target(),
            }),
        }
    }

    fn load_config(&self) -> Result<Option<ExperimentConfig>, ExperimentError> {
        let Some(path) = &self.config else {
            return Ok(None);
        };
        let mut cfg = ExperimentConfig::from_file(path)?;
        self.overrides().apply(&mut cfg);
        Ok(Some(cfg))
    }

    fn require_config(&self) -> Result<ExperimentConfig, ExperimentError> {
        self.load_config()?
            .ok_or_else(|| ExperimentError::Config("this command needs --config".into()))
    }
}

fn summary_line(setting: &str, r: &memeprompt_core::metrics::RunResult) -> String {
    format!(
        "{setting}\tauroc {}\tacc {}\tseeds {}",
        format_pm(r.mean_auroc, r.std_auroc),
        format_pm(r.mean_acc, r.std_acc),
        r.per_seed.len()
    )
}

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    let g = &cli.global;
    let out: &Path = &g.out;
    match &cli.command {
        Command::Ingest {
            input,
            captions,
            entities,
            demographics,
        } => {
            let report = experiment::cmd_ingest(
                &IngestOptions {
                    input: input.clone(),
                    captions: captions.clone(),
                    entities: entities.clone(),
                    demographics: demographics.clone(),
                },
                out,
            )?;
            let s = &report.summary;
            println!("run: {}", report.run_dir.display());
            println!(
                "records: {} of {} written, {} dropped, {} incomplete",
                s.written,
                s.total,
                s.dropped.len(),
                s.incomplete.len()
            );
        }
        Command::TrainEval => {
            let cfg = g.require_config()?;
            let report = experiment::cmd_train_eval(&cfg, out)?;
            println!("run: {}", report.run_dir.display());
            println!("{}", summary_line(&report.row.setting, &report.row.result));
            for (seed, msg) in &report.row.failures {
                eprintln!("seed {seed} failed: {msg}");
            }
        }
        Command::Fewshot { fractions } => {
            let cfg = g.require_config()?;
            let fractions = fractions.clone().unwrap_or_else(|| cfg.sweep.fractions.clone());
            let report = experiment::cmd_fewshot_sweep(&cfg, &fractions, out)?;
            println!("run: {}", report.run_dir.display());
            for (_, row) in &report.rows {
                println!("{}", summary_line(&row.setting, &row.result));
            }
        }
        Command::Ablate { axis } => {
            let cfg = g.require_config()?;
            let report = experiment::cmd_ablate(&cfg, *axis, out)?;
            println!("run: {}", report.run_dir.display());
            for row in &report.rows {
                println!("{}", summary_line(&row.setting, &row.result));
            }
        }
        Command::Predict { checkpoint, input } => {
            let cfg = g.load_config()?;
            let mut opts = PredictOptions {
                m: g.m,
                seed: g.seed_list.as_ref().and_then(|s| s.first().copied()),
                prompt: None,
            };
            if let Some(cfg) = cfg {
                opts.m = Some(cfg.m);
                opts.prompt = Some(cfg.prompt);
            } else if g.variant.is_some() || g.label_words.is_some() || g.template.is_some() {
                return Err(ExperimentError::Config(
                    "--variant, --label-words and --template need --config when predicting".into(),
                ));
            }
            let report = experiment::cmd_predict(checkpoint, input, &opts, out)?;
            println!("run: {}", report.run_dir.display());
            println!("predictions: {} ({} lines)", report.predictions.display(), report.count);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}
