//! `wordqe`: word-level quality estimation from the command line.
//!
//! Exit codes identify the failure family so scripts can branch on them:
//!
//! | code | family                                   |
//! |------|------------------------------------------|
//! | 0    | success                                  |
//! | 2    | usage (bad flags or arguments)           |
//! | 3    | corpus / file format                     |
//! | 4    | encoding / vocabulary                    |
//! | 5    | model / training configuration           |
//! | 6    | checkpoint                               |
//! | 7    | metrics                                  |
//! | 8    | invalid experiment manifest              |
//! | 9    | dataset not found                        |
//! | 10   | io                                       |
//! | 11   | synthetic data generation                |
//! | 12   | gradient check above tolerance           |

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use wordqe_core::corpus::{
    lookup, lookup_in_domain, parse_fileset, split_train_validation, AnnotatedExample, CorpusError,
    Dataset, Domain, FileSet, LanguagePairMeta, MtType,
};
use wordqe_core::encode::{build_vocab, DecodedTags, EncodeError, Vocab};
use wordqe_core::harness::{
    predict_dataset, render_report, run_with_artifacts, ExperimentManifest, HarnessError,
    ManifestSource, ReportFormat,
};
use wordqe_core::metrics::{score_dataset, MetricsError};
use wordqe_core::model::{
    gradient_check, init_model, load_checkpoint, save_checkpoint, train, CheckpointError, Model,
    ModelConfig, ModelError, TrainConfig,
};
use wordqe_core::synth::{
    generate_pair_corpus, make_language_profile, register_concepts, synthetic_meta,
    CorruptionConfig, SynthError,
};

/// Tolerance applied by `wordqe gradcheck`.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    BadInput { path: PathBuf, message: String },
    #[error("gradient check failed: max relative error {0:.3e} exceeds {GRADCHECK_TOLERANCE:e}")]
    GradCheckFailed(f64),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Corpus(CorpusError::Io { .. }) => 10,
            CliError::Corpus(_) => 3,
            CliError::Encode(_) => 4,
            CliError::Model(ModelError::Encode(_)) => 4,
            CliError::Model(_) => 5,
            CliError::Checkpoint(CheckpointError::Io { .. }) => 10,
            CliError::Checkpoint(_) => 6,
            CliError::Metrics(_) => 7,
            CliError::Synth(_) => 11,
            CliError::Harness(h) => match h {
                HarnessError::ManifestInvalid(_) => 8,
                HarnessError::DatasetNotFound(_) => 9,
                HarnessError::Io { .. } => 10,
                HarnessError::Corpus(CorpusError::Io { .. }) => 10,
                HarnessError::Corpus(_) => 3,
                HarnessError::Encode(_) | HarnessError::Model(ModelError::Encode(_)) => 4,
                HarnessError::Model(_) => 5,
                HarnessError::Checkpoint(CheckpointError::Io { .. }) => 10,
                HarnessError::Checkpoint(_) => 6,
                HarnessError::Metrics(_) => 7,
                HarnessError::Synth(_) => 11,
            },
            CliError::Io { .. } => 10,
            CliError::BadInput { .. } => 2,
            CliError::GradCheckFailed(_) => 12,
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read(path)?).map_err(|e| CliError::BadInput {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Parser)]
#[command(
    name = "wordqe",
    version,
    about = "Word-level quality estimation for machine translation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a four-file dataset and print a summary.
    Parse(ParseArgs),
    /// Check a four-file dataset and report only errors.
    Validate(DataArgs),
    /// Generate a synthetic pseudo-language corpus in the four-file format.
    Synth(SynthArgs),
    /// Build a word-piece vocabulary from one or more datasets.
    Vocab(VocabArgs),
    /// Fine-tune a token classifier and save a checkpoint.
    Train(TrainArgs),
    /// Tag a dataset with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predicted tags against gold tags.
    Score(ScoreArgs),
    /// Run experiment manifests.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Audit the analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Run a manifest and write its artifacts directory.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MtArg {
    Smt,
    Nmt,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    It,
    Pharmaceutical,
    Wiki,
}

/// Locates a dataset and its catalogue metadata.
#[derive(Args)]
struct DataArgs {
    /// Path stem: reads `<stem>.src`, `.mt`, `.source_tags` and `.tags`.
    stem: PathBuf,
    /// Catalogue pair, e.g. `En-De`. Without it the dataset is treated as local.
    #[arg(long)]
    pair: Option<String>,
    #[arg(long, value_enum, default_value = "nmt")]
    mt_type: MtArg,
    #[arg(long, value_enum)]
    domain: Option<DomainArg>,
}

impl DataArgs {
    fn meta(&self) -> Result<LanguagePairMeta, CliError> {
        let mt_type = match self.mt_type {
            MtArg::Smt => MtType::Smt,
            MtArg::Nmt => MtType::Nmt,
        };
        let domain = self.domain.map(|d| match d {
            DomainArg::It => Domain::It,
            DomainArg::Pharmaceutical => Domain::Pharmaceutical,
            DomainArg::Wiki => Domain::Wiki,
        });
        Ok(match (&self.pair, domain) {
            (Some(pair), Some(domain)) => lookup_in_domain(pair, mt_type, domain)?,
            (Some(pair), None) => lookup(pair, mt_type)?,
            (None, domain) => LanguagePairMeta {
                pair_id: self
                    .stem
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "local".into()),
                domain: domain.unwrap_or(Domain::It),
                mt_type,
                mt_system: "unknown".into(),
                competition: "local".into(),
                train_size: 0,
            },
        })
    }

    fn load(&self) -> Result<Dataset, CliError> {
        Ok(parse_fileset(
            &FileSet::from_stem(&self.stem),
            self.meta()?,
        )?)
    }
}

#[derive(Args)]
struct ParseArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Also write the parsed dataset as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output path stem for the four files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "sA")]
    source: String,
    #[arg(long, default_value = "sB")]
    target: String,
    #[arg(long, default_value_t = 30)]
    vocab_size: usize,
    /// Seed of the shared concept inventory.
    #[arg(long, default_value_t = 1)]
    world_seed: u64,
    /// Restrict source sentences to a register of this many concepts.
    #[arg(long)]
    register_size: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0.15)]
    p_substitute: f64,
    #[arg(long, default_value_t = 0.1)]
    p_delete: f64,
    #[arg(long, default_value_t = 0.0)]
    p_insert: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VocabArgs {
    /// Dataset stems (local metadata is used).
    #[arg(required = true)]
    stems: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8000)]
    max_size: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    vocab: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Validation stem; without it a seeded 80/20 split of the training data is used.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// ModelConfig JSON; defaults to the desk-scale backbone.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// TrainConfig JSON; missing fields take their defaults.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-step training log as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output path stem for the predicted four files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    gold: DataArgs,
    /// Stem of the predicted files; their tokens must match the gold files.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Markdown,
    Csv,
    Json,
}

#[derive(Args)]
struct RunArgs {
    manifest: PathBuf,
    /// Directory receiving `run-<hash>/`.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "markdown")]
    format: FormatArg,
}

#[derive(Args)]
struct GradcheckArgs {
    /// ModelConfig JSON; defaults to a tiny double-precision config.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn summary(ds: &Dataset) -> String {
    let src_words: usize = ds.examples.iter().map(|e| e.source_tokens.len()).sum();
    let mt_words: usize = ds.examples.iter().map(|e| e.target_tokens.len()).sum();
    let bad = |tags: &mut dyn Iterator<Item = &wordqe_core::corpus::Tag>| {
        tags.filter(|t| **t == wordqe_core::corpus::Tag::Bad)
            .count()
    };
    let bad_src = bad(&mut ds.examples.iter().flat_map(|e| &e.source_tags));
    let bad_words = bad(&mut ds.examples.iter().flat_map(|e| &e.target_word_tags));
    let bad_gaps = bad(&mut ds.examples.iter().flat_map(|e| &e.target_gap_tags));
    format!(
        "{} {} {}: {} sentences, {src_words} source words ({bad_src} BAD), \
         {mt_words} target words ({bad_words} BAD), {} gaps ({bad_gaps} BAD)",
        ds.meta.pair_id,
        ds.meta.domain,
        ds.meta.mt_type,
        ds.len(),
        mt_words + ds.len(),
    )
}

fn cmd_parse(args: &ParseArgs) -> Result<(), CliError> {
    let ds = args.data.load()?;
    println!("{}", summary(&ds));
    if let Some(path) = &args.json {
        write(path, &ds.to_json())?;
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut src = make_language_profile(&args.source, args.vocab_size, args.world_seed)?;
    let tgt = make_language_profile(&args.target, args.vocab_size, args.world_seed)?;
    if let Some(size) = args.register_size {
        src = src.with_register(register_concepts(args.vocab_size, size, args.seed)?)?;
    }
    let corruption = CorruptionConfig {
        p_substitute: args.p_substitute,
        p_delete: args.p_delete,
        p_insert: args.p_insert,
        seed: args.seed,
    };
    let meta = synthetic_meta(&src, &tgt, Domain::It, MtType::Nmt, args.n);
    let corpus = generate_pair_corpus(&src, &tgt, args.n, &corruption, meta)?;
    corpus.dataset.write_files(&FileSet::from_stem(&args.out))?;
    println!("{}", summary(&corpus.dataset));
    Ok(())
}

fn cmd_vocab(args: &VocabArgs) -> Result<(), CliError> {
    let datasets = args
        .stems
        .iter()
        .map(|stem| {
            DataArgs {
                stem: stem.clone(),
                pair: None,
                mt_type: MtArg::Nmt,
                domain: None,
            }
            .load()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Dataset> = datasets.iter().collect();
    let vocab = build_vocab(&refs, args.max_size)?;
    write(&args.out, &vocab.to_json())?;
    println!("{} pieces, hash {}", vocab.len(), vocab.content_hash());
    Ok(())
}

fn load_vocab(path: &Path) -> Result<Vocab, CliError> {
    Ok(Vocab::from_json(&read(path)?)?)
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let vocab = load_vocab(&args.vocab)?;
    let data = args.data.load()?;
    let mut model_cfg = match &args.model_config {
        Some(path) => read_json(path)?,
        None => ModelConfig::desk(vocab.len()),
    };
    if model_cfg.vocab_size == 0 {
        model_cfg.vocab_size = vocab.len();
    }
    let mut train_cfg: TrainConfig = match &args.train_config {
        Some(path) => read_json(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        model_cfg.seed = seed;
        train_cfg.seed = seed;
    }
    let (train_set, valid_set) = match &args.valid {
        Some(stem) => (
            data,
            DataArgs {
                stem: stem.clone(),
                pair: args.data.pair.clone(),
                mt_type: args.data.mt_type,
                domain: args.data.domain,
            }
            .load()?,
        ),
        None => split_train_validation(&data, 0.8, train_cfg.seed)?,
    };
    let mut model: Model<f32> = init_model(&model_cfg)?;
    let report = train(&mut model, &train_set, &valid_set, &vocab, &train_cfg)?;
    save_checkpoint(&model, &vocab, &args.out)?;
    if let Some(path) = &args.log {
        write(path, &report.to_jsonl())?;
    }
    println!(
        "{} steps, stopped {:?}; best validation loss {:.4} at step {}",
        report.steps.len(),
        report.stop_reason,
        report.best_eval_loss,
        report.best_step
    );
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    let vocab = load_vocab(&args.vocab)?;
    let model: Model<f32> = load_checkpoint(&args.checkpoint, &vocab)?;
    let data = args.data.load()?;
    let preds = predict_dataset(&model, &vocab, &data)?;
    let examples = data
        .examples
        .iter()
        .zip(preds)
        .map(|(e, p)| AnnotatedExample {
            source_tokens: e.source_tokens.clone(),
            target_tokens: e.target_tokens.clone(),
            source_tags: p.source_tags,
            target_word_tags: p.target_word_tags,
            target_gap_tags: p.target_gap_tags,
        })
        .collect();
    let predicted = Dataset::new(data.meta.clone(), examples)?;
    predicted.write_files(&FileSet::from_stem(&args.out))?;
    println!("tagged {} sentences", predicted.len());
    Ok(())
}

fn cmd_score(args: &ScoreArgs) -> Result<(), CliError> {
    let gold = args.gold.load()?;
    let pred = parse_fileset(&FileSet::from_stem(&args.pred), gold.meta.clone())?;
    if let Some(i) =
        gold.examples.iter().zip(&pred.examples).position(|(g, p)| {
            g.source_tokens != p.source_tokens || g.target_tokens != p.target_tokens
        })
    {
        return Err(CliError::BadInput {
            path: args.pred.clone(),
            message: format!("sentence {} differs from the gold tokens", i + 1),
        });
    }
    let decoded: Vec<DecodedTags> = pred
        .examples
        .into_iter()
        .map(|e| DecodedTags {
            source_tags: e.source_tags,
            target_word_tags: e.target_word_tags,
            target_gap_tags: e.target_gap_tags,
        })
        .collect();
    let report = score_dataset(&gold, &decoded)?;
    if args.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let manifest = ExperimentManifest::load(&args.manifest)?;
    let base = args
        .manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let source = ManifestSource::new(&manifest, base)?;
    let (table, dir) = run_with_artifacts(&manifest, &source, &args.out)?;
    let format = match args.format {
        FormatArg::Markdown => ReportFormat::Markdown,
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Json => ReportFormat::Json,
    };
    print!("{}", render_report(&table, format));
    eprintln!("artifacts in {}", dir.display());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let cfg = match &args.config {
        Some(path) => read_json(path)?,
        None => ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.0,
            max_seq_length: 8,
            seed: 5,
        },
    };
    let report = gradient_check(&cfg)?;
    println!(
        "{} parameters, max relative error {:.3e} (parameter {})",
        report.parameters_checked, report.max_relative_error, report.worst_index
    );
    if report.max_relative_error >= GRADCHECK_TOLERANCE {
        return Err(CliError::GradCheckFailed(report.max_relative_error));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Parse(a) => cmd_parse(a),
        Command::Validate(a) => a.load().map(|_| ()),
        Command::Synth(a) => cmd_synth(a),
        Command::Vocab(a) => cmd_vocab(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Score(a) => cmd_score(a),
        Command::Experiment(ExperimentCommand::Run(a)) => cmd_run(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
