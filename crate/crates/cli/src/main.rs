use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use ulmfit::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use ulmfit::config::RunConfig;
use ulmfit::corpus::{self, author_labels, balanced_subset, chunk_documents, kfold_split, stratified_split, Sample, SplitManifest};
use ulmfit::eval::{generate_text, kfold_summary, FoldSummary, Metrics};
use ulmfit::model::{HeadKind, Model};
use ulmfit::pipeline::{
    encode_truncated, evaluate_classifier, finetune_lm, lr_find_classifier, lr_find_lm, predict_author, pretrain_lm,
    train_classifier, LabeledIds, Stage, StageOutcome, TrainConfig,
};
use ulmfit::tokenize::{Mode, Tokenizer, UnigramTrainer};
use ulmfit::{Error, Rng, Stream};

#[derive(Parser, Debug)]
#[command(name = "ulmfit", version, about = "Language-model pretraining, fine-tuning and authorship classification")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for every random choice of the run; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VocabMode {
    Word,
    Char,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a word or character vocabulary from a corpus.
    BuildVocab {
        #[arg(long, value_enum)]
        mode: VocabMode,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train a unigram subword model from a corpus.
    TrainSubword {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 30_000)]
        vocab_size: usize,
        #[arg(long, default_value_t = 3)]
        min_count: usize,
    },
    /// Train a language model from scratch.
    Pretrain,
    /// Fine-tune a language model on the training split of an author corpus.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train an author classifier on top of a fine-tuned language model.
    TrainClassifier {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Predict the author of a text file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text_file: PathBuf,
    },
    /// Metrics of a classifier on the held-out split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also report support-weighted F1.
        #[arg(long)]
        weighted_f1: bool,
    },
    /// K-fold cross-validation of classifier training.
    Kfold {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Learning-rate range test for the configured stage.
    LrFind {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sample text from a language model.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 100)]
        n_tokens: usize,
        #[arg(long, default_value_t = 0.8)]
        temperature: f64,
    },
    /// Balanced subset of a given number of authors.
    Subset {
        #[arg(long)]
        n_authors: usize,
    },
}

enum CliError {
    Usage(String),
    /// Training stopped on a non-finite loss after the best weights were saved.
    Diverged(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

struct Ctx {
    config: RunConfig,
    out: Option<PathBuf>,
}

impl Ctx {
    fn new(common: &Common) -> CliResult<Self> {
        let mut config = match &common.config {
            Some(p) => RunConfig::load(p).map_err(|e| match e {
                Error::InvalidArgument(m) => usage(m),
                e => CliError::Core(e),
            })?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.train.seed = seed;
        }
        Ok(Ctx {
            config,
            out: common.out.clone(),
        })
    }

    fn seed(&self) -> u64 {
        self.config.train.seed
    }

    fn out_dir(&self) -> CliResult<&Path> {
        let out = self.out.as_deref().ok_or_else(|| usage("--out <dir> is required"))?;
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        Ok(out)
    }

    fn corpus(&self, flag: &Option<PathBuf>) -> CliResult<PathBuf> {
        flag.clone()
            .or_else(|| self.config.corpus.clone())
            .ok_or_else(|| usage("no corpus given (--corpus or \"corpus\" in the config)"))
    }

    fn checkpoint_in(&self, flag: &Option<PathBuf>) -> CliResult<PathBuf> {
        flag.clone()
            .or_else(|| self.config.checkpoint_in.clone())
            .ok_or_else(|| usage("no checkpoint given (--checkpoint or \"checkpoint_in\" in the config)"))
    }

    fn checkpoint_out(&self) -> CliResult<PathBuf> {
        match &self.config.checkpoint_out {
            Some(p) => Ok(p.clone()),
            None => Ok(self.out_dir()?.join("checkpoint")),
        }
    }

    fn tokenizer(&self) -> CliResult<Tokenizer> {
        let path = self
            .config
            .tokenizer
            .as_ref()
            .ok_or_else(|| usage("no tokenizer given (\"tokenizer\" in the config)"))?;
        Ok(Tokenizer::load(path)?)
    }

    fn train_config(&self, stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            ..self.config.train.clone()
        }
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Plain text of a file, or the concatenated documents of a directory.
fn corpus_text(path: &Path) -> CliResult<Vec<String>> {
    if path.is_file() {
        let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        return Ok(vec![corpus::normalize(&raw)]);
    }
    let docs = corpus::ingest(path)?;
    if docs.is_empty() {
        return Err(CliError::Core(Error::Data(format!("no documents under {}", path.display()))));
    }
    Ok(docs.into_iter().map(|d| d.text).collect())
}

fn token_stream(tokenizer: &Tokenizer, texts: impl IntoIterator<Item = String>) -> Vec<usize> {
    texts.into_iter().flat_map(|t| tokenizer.encode(&t)).collect()
}

fn labelled_samples(ctx: &Ctx) -> CliResult<Vec<Sample>> {
    let path = ctx.corpus(&None)?;
    let docs = corpus::ingest(&path)?;
    let samples = chunk_documents(&docs, ctx.config.data.chunk_words)?;
    if samples.is_empty() {
        return Err(CliError::Core(Error::Data(format!(
            "no samples of {} words under {}",
            ctx.config.data.chunk_words,
            path.display()
        ))));
    }
    Ok(samples)
}

fn encode_samples(tokenizer: &Tokenizer, samples: &[Sample], labels: &[usize], idx: &[usize], max_tokens: usize) -> CliResult<Vec<LabeledIds>> {
    idx.iter()
        .map(|&i| {
            Ok(LabeledIds {
                ids: encode_truncated(tokenizer, &samples[i].text(), max_tokens)?,
                label: labels[i],
            })
        })
        .collect()
}

/// Writes the stage's checkpoint, report and log. A diverged stage still
/// saves its last good weights and then reports exit code 3.
fn finish_stage(
    ctx: &Ctx,
    mut outcome: StageOutcome,
    tokenizer: &Tokenizer,
    train: &TrainConfig,
    labels: Option<&[String]>,
) -> CliResult<StageOutcome> {
    let out = ctx.out_dir()?.to_path_buf();
    let ck = ctx.checkpoint_out()?;
    save_checkpoint(
        &outcome.model,
        CheckpointMeta {
            tokenizer,
            train: Some(train),
            labels,
        },
        &ck,
    )?;
    outcome.report.checkpoint = Some(ck.display().to_string());
    write_json(&out.join("report.json"), &outcome.report)?;
    write_text(&out.join("train.log"), &(outcome.report.log_lines().join("\n") + "\n"))?;
    if let Some(d) = &outcome.report.diverged {
        return Err(CliError::Diverged(format!("training diverged in {d}; last good weights saved")));
    }
    Ok(outcome)
}

fn load_lm(path: &Path) -> CliResult<Checkpoint> {
    let ck = load_checkpoint(path)?;
    ck.require_head(HeadKind::Lm)?;
    Ok(ck)
}

fn tokenizer_for(ctx: &Ctx, ck: &Checkpoint) -> CliResult<Tokenizer> {
    match &ctx.config.tokenizer {
        Some(_) => {
            let tok = ctx.tokenizer()?;
            ck.check_tokenizer(&tok)?;
            Ok(tok)
        }
        None => Ok(ck.tokenizer()?),
    }
}

fn split_data(ctx: &Ctx, tokenizer: &Tokenizer) -> CliResult<(Vec<String>, Vec<LabeledIds>, Option<Vec<LabeledIds>>, Vec<LabeledIds>, SplitManifest)> {
    let samples = labelled_samples(ctx)?;
    let (authors, labels) = author_labels(&samples);
    let split = stratified_split(&samples, ctx.config.data.test_frac, ctx.seed())?;
    let max = ctx.config.train.max_tokens;
    let test = encode_samples(tokenizer, &samples, &labels, &split.test, max)?;
    let (train_idx, valid) = if ctx.config.data.valid_frac > 0.0 {
        let train_samples: Vec<Sample> = split.train.iter().map(|&i| samples[i].clone()).collect();
        let inner = stratified_split(&train_samples, ctx.config.data.valid_frac, ctx.seed().wrapping_add(1))?;
        let map = |v: &[usize]| v.iter().map(|&j| split.train[j]).collect::<Vec<_>>();
        (map(&inner.train), Some(encode_samples(tokenizer, &samples, &labels, &map(&inner.test), max)?))
    } else {
        (split.train.clone(), None)
    };
    let train = encode_samples(tokenizer, &samples, &labels, &train_idx, max)?;
    let manifest = SplitManifest {
        seed: ctx.seed(),
        authors: authors.clone(),
        folds: vec![split],
    };
    Ok((authors, train, valid, test, manifest))
}

fn cmd_build_vocab(ctx: &Ctx, mode: VocabMode, corpus_flag: &Option<PathBuf>) -> CliResult<()> {
    let text = corpus_text(&ctx.corpus(corpus_flag)?)?.join("\n");
    let mode = match mode {
        VocabMode::Word => Mode::Word,
        VocabMode::Char => Mode::Char,
    };
    let tok = Tokenizer::train(mode, &text)?;
    let path = ctx.out_dir()?.join("vocab.txt");
    tok.save(&path)?;
    info!("{} tokens, fingerprint {:016x}", tok.vocab_size(), tok.fingerprint());
    println!("{}", path.display());
    Ok(())
}

fn cmd_train_subword(ctx: &Ctx, corpus_flag: &Option<PathBuf>, vocab_size: usize, min_count: usize) -> CliResult<()> {
    let text = corpus_text(&ctx.corpus(corpus_flag)?)?.join("\n");
    let model = UnigramTrainer {
        target_size: vocab_size,
        min_count,
        ..UnigramTrainer::default()
    }
    .train(&text)?;
    let tok = Tokenizer::subword(model);
    let path = ctx.out_dir()?.join("subword.tsv");
    tok.save(&path)?;
    info!("{} pieces, fingerprint {:016x}", tok.vocab_size(), tok.fingerprint());
    println!("{}", path.display());
    Ok(())
}

fn cmd_pretrain(ctx: &Ctx) -> CliResult<()> {
    let tok = ctx.tokenizer()?;
    let ids = token_stream(&tok, corpus_text(&ctx.corpus(&None)?)?);
    let train = ctx.train_config(Stage::Pretrain);
    let model_config = ctx.config.model.model_config(tok.vocab_size(), train.dropout_multiplier);
    let outcome = pretrain_lm(&ids, model_config, &train)?;
    finish_stage(ctx, outcome, &tok, &train, None)?;
    Ok(())
}

fn cmd_finetune(ctx: &Ctx, checkpoint: &Option<PathBuf>) -> CliResult<()> {
    let ck = load_lm(&ctx.checkpoint_in(checkpoint)?)?;
    let tok = tokenizer_for(ctx, &ck)?;
    let samples = labelled_samples(ctx)?;
    let split = stratified_split(&samples, ctx.config.data.test_frac, ctx.seed())?;
    let ids = token_stream(&tok, split.train.iter().map(|&i| samples[i].text()));
    let train = ctx.train_config(Stage::Finetune);
    let outcome = finetune_lm(&ck.model, ck.fingerprint()?, &tok, &ids, &train)?;
    finish_stage(ctx, outcome, &tok, &train, None)?;
    Ok(())
}

fn cmd_train_classifier(ctx: &Ctx, checkpoint: &Option<PathBuf>) -> CliResult<()> {
    let ck = load_lm(&ctx.checkpoint_in(checkpoint)?)?;
    let tok = tokenizer_for(ctx, &ck)?;
    let (authors, train_data, valid, test, manifest) = split_data(ctx, &tok)?;
    let train = ctx.train_config(Stage::Classify);
    let outcome = train_classifier(&ck.model, authors.len(), &train_data, valid.as_deref(), &train)?;
    let out = ctx.out_dir()?.to_path_buf();
    write_json(&out.join("split.json"), &manifest)?;
    let outcome = finish_stage(ctx, outcome, &tok, &train, Some(&authors))?;
    let metrics = evaluate_classifier(&outcome.model, &test, train.batch_size)?;
    write_text(&out.join("metrics.json"), &(metrics.to_json(false)? + "\n"))?;
    info!("held-out accuracy {:.4}, macro F1 {:.4}", metrics.accuracy, metrics.macro_f1);
    Ok(())
}

#[derive(Serialize)]
struct PredictionOut {
    author: String,
    labels: Vec<String>,
    probabilities: Vec<f64>,
}

fn load_classifier(path: &Path) -> CliResult<(Checkpoint, Vec<String>)> {
    let ck = load_checkpoint(path)?;
    ck.require_head(HeadKind::Classifier)?;
    let n = ck.model.config.n_classes.unwrap_or(0);
    let labels = ck
        .manifest
        .labels
        .clone()
        .unwrap_or_else(|| (0..n).map(|i| i.to_string()).collect());
    if labels.len() != n {
        return Err(CliError::Core(Error::Checkpoint(format!("{} labels for {n} classes", labels.len()))));
    }
    Ok((ck, labels))
}

fn max_tokens(ck: &Checkpoint) -> usize {
    ck.manifest.train.as_ref().map_or(TrainConfig::default().max_tokens, |t| t.max_tokens)
}

fn cmd_predict(ctx: &Ctx, checkpoint: &Path, text_file: &Path) -> CliResult<()> {
    let (ck, labels) = load_classifier(checkpoint)?;
    let tok = tokenizer_for(ctx, &ck)?;
    let raw = fs::read_to_string(text_file).map_err(|e| io_err(text_file, e))?;
    let p = predict_author(&ck.model, &tok, &corpus::normalize(&raw), max_tokens(&ck))?;
    print_json(&PredictionOut {
        author: labels[p.author].clone(),
        labels,
        probabilities: p.probabilities,
    })
}

fn cmd_evaluate(ctx: &Ctx, checkpoint: &Option<PathBuf>, weighted: bool) -> CliResult<()> {
    let (ck, labels) = load_classifier(&ctx.checkpoint_in(checkpoint)?)?;
    let tok = tokenizer_for(ctx, &ck)?;
    let (authors, _, _, test, _) = split_data(ctx, &tok)?;
    if authors != labels {
        return Err(CliError::Core(Error::Data("corpus authors differ from the checkpoint's labels".into())));
    }
    let metrics: Metrics = evaluate_classifier(&ck.model, &test, ctx.config.train.batch_size)?;
    let json = metrics.to_json(weighted)?;
    if let Some(out) = &ctx.out {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        write_text(&out.join("metrics.json"), &(json.clone() + "\n"))?;
    }
    println!("{json}");
    Ok(())
}

#[derive(Serialize)]
struct KfoldOut {
    folds: Vec<Metrics>,
    accuracy: FoldSummary,
    macro_f1: FoldSummary,
}

fn cmd_kfold(ctx: &Ctx, checkpoint: &Option<PathBuf>, k: Option<usize>) -> CliResult<()> {
    let ck = load_lm(&ctx.checkpoint_in(checkpoint)?)?;
    let tok = tokenizer_for(ctx, &ck)?;
    let samples = labelled_samples(ctx)?;
    let (authors, labels) = author_labels(&samples);
    let k = k.unwrap_or(ctx.config.data.folds);
    let folds = kfold_split(&samples, k, ctx.seed())?;
    let train = ctx.train_config(Stage::Classify);
    let max = train.max_tokens;
    let mut metrics = Vec::with_capacity(k);
    for (i, fold) in folds.iter().enumerate() {
        let train_data = encode_samples(&tok, &samples, &labels, &fold.train, max)?;
        let valid = encode_samples(&tok, &samples, &labels, &fold.test, max)?;
        let outcome = train_classifier(&ck.model, authors.len(), &train_data, None, &train)?;
        if let Some(d) = outcome.report.diverged {
            return Err(CliError::Diverged(format!("fold {i} diverged in {d}")));
        }
        let m = evaluate_classifier(&outcome.model, &valid, train.batch_size)?;
        info!("fold {i}: accuracy {:.4}, macro F1 {:.4}", m.accuracy, m.macro_f1);
        metrics.push(m);
    }
    let acc: Vec<f64> = metrics.iter().map(|m| m.accuracy).collect();
    let f1: Vec<f64> = metrics.iter().map(|m| m.macro_f1).collect();
    let report = KfoldOut {
        accuracy: kfold_summary(&acc, 0.95)?,
        macro_f1: kfold_summary(&f1, 0.95)?,
        folds: metrics,
    };
    let out = ctx.out_dir()?;
    write_json(
        &out.join("folds.json"),
        &SplitManifest {
            seed: ctx.seed(),
            authors,
            folds,
        },
    )?;
    write_json(&out.join("kfold.json"), &report)?;
    print_json(&report)
}

fn cmd_lr_find(ctx: &Ctx, checkpoint: &Option<PathBuf>) -> CliResult<()> {
    let train = ctx.config.train.clone();
    let curve = match train.stage {
        Stage::Pretrain => {
            let tok = ctx.tokenizer()?;
            let ids = token_stream(&tok, corpus_text(&ctx.corpus(&None)?)?);
            let cfg = ctx.config.model.model_config(tok.vocab_size(), train.dropout_multiplier);
            let model = Model::new_lm(cfg, &mut Rng::stream(train.seed, Stream::Init))?;
            lr_find_lm(&model, &ids, &train, &ctx.config.lr_find)?
        }
        Stage::Finetune => {
            let ck = load_lm(&ctx.checkpoint_in(checkpoint)?)?;
            let tok = tokenizer_for(ctx, &ck)?;
            let samples = labelled_samples(ctx)?;
            let split = stratified_split(&samples, ctx.config.data.test_frac, ctx.seed())?;
            let ids = token_stream(&tok, split.train.iter().map(|&i| samples[i].text()));
            lr_find_lm(&ck.model, &ids, &train, &ctx.config.lr_find)?
        }
        Stage::Classify => {
            let ck = load_lm(&ctx.checkpoint_in(checkpoint)?)?;
            let tok = tokenizer_for(ctx, &ck)?;
            let (authors, train_data, _, _, _) = split_data(ctx, &tok)?;
            let model = ck
                .model
                .clone()
                .into_classifier(authors.len(), &mut Rng::stream(train.seed, Stream::Init))?;
            lr_find_classifier(&model, &train_data, &train, &ctx.config.lr_find)?
        }
    };
    let text = curve.to_csv();
    if let Some(out) = &ctx.out {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        write_text(&out.join("lr_find.csv"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_generate(ctx: &Ctx, checkpoint: &Path, prompt: &str, n_tokens: usize, temperature: f64) -> CliResult<()> {
    let ck = load_lm(checkpoint)?;
    let tok = tokenizer_for(ctx, &ck)?;
    let text = generate_text(&ck.model, &tok, prompt, n_tokens, temperature, ctx.seed())?;
    println!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct SubsetOut {
    seed: u64,
    n_authors: usize,
    authors: Vec<String>,
    per_author: usize,
    indices: Vec<usize>,
}

fn cmd_subset(ctx: &Ctx, n_authors: usize) -> CliResult<()> {
    let samples = labelled_samples(ctx)?;
    let indices = balanced_subset(&samples, n_authors, ctx.seed())?;
    let chosen: Vec<Sample> = indices.iter().map(|&i| samples[i].clone()).collect();
    let (authors, _) = author_labels(&chosen);
    let report = SubsetOut {
        seed: ctx.seed(),
        n_authors,
        per_author: indices.len() / n_authors.max(1),
        authors,
        indices,
    };
    write_json(&ctx.out_dir()?.join("subset.json"), &report)?;
    print_json(&report)
}

fn run(cli: Cli) -> CliResult<()> {
    let ctx = Ctx::new(&cli.common)?;
    match &cli.command {
        Command::BuildVocab { mode, corpus } => cmd_build_vocab(&ctx, *mode, corpus),
        Command::TrainSubword {
            corpus,
            vocab_size,
            min_count,
        } => cmd_train_subword(&ctx, corpus, *vocab_size, *min_count),
        Command::Pretrain => cmd_pretrain(&ctx),
        Command::Finetune { checkpoint } => cmd_finetune(&ctx, checkpoint),
        Command::TrainClassifier { checkpoint } => cmd_train_classifier(&ctx, checkpoint),
        Command::Predict { checkpoint, text_file } => cmd_predict(&ctx, checkpoint, text_file),
        Command::Evaluate { checkpoint, weighted_f1 } => cmd_evaluate(&ctx, checkpoint, *weighted_f1),
        Command::Kfold { checkpoint, k } => cmd_kfold(&ctx, checkpoint, *k),
        Command::LrFind { checkpoint } => cmd_lr_find(&ctx, checkpoint),
        Command::Generate {
            checkpoint,
            prompt,
            n_tokens,
            temperature,
        } => cmd_generate(&ctx, checkpoint, prompt, *n_tokens, *temperature),
        Command::Subset { n_authors } => cmd_subset(&ctx, *n_authors),
    }
}

/// 1 for usage errors, 3 for numeric divergence, 2 for everything else.
fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Usage(_) | CliError::Core(Error::InvalidArgument(_)) => 1,
        CliError::Diverged(_) => 3,
        CliError::Core(e) if e.is_numeric() => 3,
        CliError::Core(_) => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            match e {
                CliError::Usage(m) => eprintln!("error: {m}\n\nRun `ulmfit --help` for usage."),
                CliError::Diverged(m) => eprintln!("error: {m}"),
                CliError::Core(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(code)
        }
    }
}
