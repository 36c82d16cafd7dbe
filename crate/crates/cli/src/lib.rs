//! Command-line front end. Exit codes: 0 success, 1 data or runtime
//! failure, 2 usage or configuration error.

pub mod config;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use blockpool::checkpoint::{load_checkpoint, save_checkpoint};
use blockpool::checks::{self, CheckOutcome};
use blockpool::metrics::{ablation_report, accuracy, bleu, parse_results_tsv};
use blockpool::model::{build, predict_label, Task, VariantSpec};
use blockpool::probe::{corpus_words, run_probe, z_table_tsv, Lexicon};
use blockpool::segmenter::{consistency_report, segment_text, Method, SegmentParams, Wrap};
use blockpool::train::{train, Dataset};
use blockpool::vocab::{avg_downsampling_factor, train_bpe, tune_vocab, SubwordVocab};
use blockpool::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{DataPaths, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "blockpool", version, about = "Byte-level translation with subword-delimited downsampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train or tune a byte-level BPE vocabulary.
    #[command(subcommand)]
    Vocab(VocabCmd),
    /// Block lengths per sentence as TSV, or a segmentation consistency report.
    Segment(SegmentArgs),
    /// Train a model from a run configuration file.
    Train(TrainArgs),
    /// Greedily translate one sentence per line.
    Translate(TranslateArgs),
    /// Label one sentence per line.
    Classify(ClassifyArgs),
    /// Score outputs.
    #[command(subcommand)]
    Evaluate(EvaluateCmd),
    /// Word-pair similarity probe of pre-Transformer representations.
    Probe(ProbeArgs),
    /// Built-in correctness checks.
    #[command(subcommand)]
    Check(CheckCmd),
}

#[derive(Debug, Subcommand)]
pub enum VocabCmd {
    Train {
        /// Training corpus, one sentence per line.
        #[arg(long)]
        input: PathBuf,
        /// Total pieces including the 256 bytes.
        #[arg(long)]
        size: usize,
        /// Longest piece in bytes.
        #[arg(long = "max-len")]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    Tune {
        #[arg(long)]
        input: PathBuf,
        /// Desired average bytes per token.
        #[arg(long, default_value_t = 4.0)]
        target: f64,
        /// Comma-separated vocabulary sizes.
        #[arg(long = "size-grid", value_delimiter = ',', required = true)]
        size_grid: Vec<usize>,
        /// Comma-separated piece length caps.
        #[arg(long = "lmax-grid", value_delimiter = ',', required = true)]
        lmax_grid: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SegmentAction {
    /// Print the consistency report instead of per-sentence lengths.
    Report,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    pub action: Option<SegmentAction>,
    /// fixed, buffixed, wdd or sdd.
    #[arg(long)]
    pub method: String,
    /// Block size for the fixed methods.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Subword vocabulary, required by sdd.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `section.key=value`, repeatable.
    #[arg(long = "override")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Cap on generated blocks per sentence.
    #[arg(long = "max-blocks", default_value_t = 256)]
    pub max_blocks: usize,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvaluateCmd {
    /// Corpus BLEU of line-aligned hypothesis and reference files.
    Bleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Share of lines that match exactly.
    Accuracy {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Segmentation factor deltas from a `variant<TAB>score` file.
    Ablation {
        #[arg(long)]
        results: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// `word<TAB>lemma<TAB>syn,syn` file.
    #[arg(long)]
    pub lexicon: PathBuf,
    /// Corpus that decides which words count as seen.
    #[arg(long = "train-corpus")]
    pub train_corpus: PathBuf,
    /// Vocabulary that selects single-token words; defaults to the model's.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long = "baseline-n", default_value_t = 10_000)]
    pub baseline_n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum CheckCmd {
    /// Finite differences on every op and on a whole model.
    Grad {
        #[arg(long, default_value = "tiny")]
        preset: String,
    },
    /// Perturbation tests for information flowing from the future.
    Leak {
        #[arg(long, default_value = "sdd")]
        variant: String,
        #[arg(long, default_value = "tiny")]
        preset: String,
    },
    /// Attention and convolution mask tables.
    Mask,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Argument(_) | Error::Parse { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?.lines().map(String::from).collect())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            std::io::stdout().flush().ok();
            Ok(())
        }
    }
}

/// Worker-thread cap from `BLOCKPOOL_THREADS`. Execution is single-threaded
/// either way; the variable is validated so typos surface.
pub fn thread_setting() -> std::result::Result<usize, Failure> {
    match std::env::var("BLOCKPOOL_THREADS") {
        Err(_) => Ok(0),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("BLOCKPOOL_THREADS={v:?} is not a non-negative integer"))),
    }
}

fn vocab_cmd(cmd: VocabCmd) -> Result<String> {
    match cmd {
        VocabCmd::Train {
            input,
            size,
            max_len,
            out,
        } => {
            let corpus = read_lines(&input)?;
            let vocab = train_bpe(&corpus, size, max_len)?;
            vocab.save(&out)?;
            let stats = avg_downsampling_factor(&vocab, &corpus)?;
            Ok(format!(
                "pieces\tlmax\tavg_factor\n{}\t{}\t{:.4}\n",
                vocab.size(),
                vocab.lmax(),
                stats.avg_factor()
            ))
        }
        VocabCmd::Tune {
            input,
            target,
            size_grid,
            lmax_grid,
            out,
        } => {
            let corpus = read_lines(&input)?;
            let r = tune_vocab(&corpus, target, &size_grid, &lmax_grid)?;
            r.vocab.save(&out)?;
            let mut s = String::from("size\tlmax\tpieces\tavg_factor\tselected\n");
            for p in &r.evaluated {
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}\t{:.4}\t{}",
                    p.size,
                    p.lmax,
                    p.pieces,
                    p.avg_factor,
                    u8::from(p == &r.selected)
                );
            }
            Ok(s)
        }
    }
}

fn segment_cmd(args: SegmentArgs) -> Result<String> {
    let method: Method = args.method.parse()?;
    let vocab = args.vocab.as_deref().map(SubwordVocab::load).transpose()?;
    if method == Method::Sdd && vocab.is_none() {
        return Err(Error::Argument("--method sdd needs --vocab".into()));
    }
    let params = SegmentParams::new(method, args.k, vocab.as_ref());
    let lines = read_lines(&args.input)?;
    if let Some(SegmentAction::Report) = args.action {
        return Ok(consistency_report(&lines, &params)?.to_tsv());
    }
    let mut out = String::new();
    for line in &lines {
        if !line.trim().is_empty() {
            let (_, seg) = segment_text(line, &params, Wrap::NONE)?;
            let lens: Vec<String> = seg.lengths.iter().map(usize::to_string).collect();
            out.push_str(&lens.join("\t"));
        }
        out.push('\n');
    }
    Ok(out)
}

fn load_dataset(paths: &DataPaths) -> Result<(Dataset, Option<Dataset>)> {
    Ok(match paths {
        DataPaths::Parallel { train, valid } => (
            Dataset::load_parallel(&train.0, &train.1)?,
            valid.as_ref().map(|(s, t)| Dataset::load_parallel(s, t)).transpose()?,
        ),
        DataPaths::Labeled { train, valid } => (
            Dataset::load_labeled(train)?,
            valid.as_deref().map(Dataset::load_labeled).transpose()?,
        ),
    })
}

/// Runs the `train` subcommand and returns the summary line.
pub fn train_from_config(cfg: &RunConfig) -> Result<String> {
    for line in cfg.resolved().lines() {
        log::info!("config {line}");
    }
    let out = cfg.out_dir();
    write_file(&out.join("config.resolved"), &cfg.resolved())?;
    let variant = cfg.variant()?;
    let task = cfg.task()?;
    let (train_data, valid) = load_dataset(&cfg.data_paths()?)?;
    let vocab = match cfg.vocab_path() {
        Some(p) if variant.needs_vocab() => Some(SubwordVocab::load(&p)?),
        None if variant.needs_vocab() => {
            return Err(Error::Config(format!("variant {variant} needs data.vocab")));
        }
        _ => None,
    };
    let labels: Vec<String> = if task == Task::Classification {
        let set: BTreeSet<&str> = train_data.pairs.iter().map(|p| p.1.as_str()).collect();
        set.into_iter().map(String::from).collect()
    } else {
        Vec::new()
    };
    let (model_cfg, sizes) = cfg.model_sizes()?;
    let spec = VariantSpec::build_spec(variant, task, model_cfg, &sizes, vocab, labels)?;
    let train_cfg = cfg.train_config()?;
    let model = build(spec, train_cfg.seed)?;
    log::info!("training {variant} with {} parameters", model.store.num_values());
    let outcome = train(model, &train_data, valid.as_ref(), &train_cfg)?;
    save_checkpoint(&outcome.model, &out.join("checkpoint"), cfg.dtype()?, cfg.to_json())?;
    write_file(&out.join("metrics.tsv"), &outcome.log.to_tsv())?;
    Ok(format!(
        "steps\tbest\tstopped_early\n{}\t{}\t{}\n",
        outcome.steps,
        outcome.best.map_or("-".to_string(), |b| format!("{b:.4}")),
        outcome.stopped_early
    ))
}

fn translate_cmd(args: TranslateArgs) -> Result<String> {
    let model = load_checkpoint(&args.ckpt)?;
    let mut out = String::new();
    let mut truncated = 0;
    let lines = read_lines(&args.input)?;
    for line in &lines {
        let t = model.translate(line, args.max_blocks)?;
        truncated += usize::from(t.truncated);
        out.push_str(&t.text);
        out.push('\n');
    }
    write_file(&args.out, &out)?;
    Ok(format!("sentences\ttruncated\n{}\t{truncated}\n", lines.len()))
}

fn classify_cmd(args: ClassifyArgs) -> Result<()> {
    let model = load_checkpoint(&args.ckpt)?;
    if model.spec.task != Task::Classification {
        return Err(Error::Config("checkpoint is not a classifier".into()));
    }
    let mut out = String::new();
    for line in read_lines(&args.input)? {
        out.push_str(&model.spec.labels[predict_label(&model, &line)?]);
        out.push('\n');
    }
    emit(args.out.as_deref(), &out)
}

fn evaluate_cmd(cmd: EvaluateCmd) -> Result<String> {
    match cmd {
        EvaluateCmd::Bleu { hyp, reference } => {
            let b = bleu(&read_lines(&hyp)?, &read_lines(&reference)?)?;
            let p = b.precisions.map(|p| format!("{:.4}", 100.0 * p)).join("/");
            Ok(format!(
                "bleu\tprecisions\tbp\thyp_len\tref_len\n{:.2}\t{p}\t{:.4}\t{}\t{}\n",
                b.score, b.brevity_penalty, b.hyp_len, b.ref_len
            ))
        }
        EvaluateCmd::Accuracy { pred, gold } => {
            let a = accuracy(&read_lines(&pred)?, &read_lines(&gold)?)?;
            Ok(format!("accuracy\n{a:.4}\n"))
        }
        EvaluateCmd::Ablation { results } => {
            let scores = parse_results_tsv(&read_text(&results)?, &results.display().to_string())?;
            Ok(ablation_report(&scores)?.to_tsv())
        }
    }
}

fn probe_cmd(args: ProbeArgs) -> Result<()> {
    let model = load_checkpoint(&args.ckpt)?;
    let lexicon = Lexicon::load(&args.lexicon)?;
    let words = corpus_words(read_lines(&args.train_corpus)?);
    let vocab = args.vocab.as_deref().map(SubwordVocab::load).transpose()?;
    let report = run_probe(&model, vocab.as_ref(), &lexicon, &words, args.baseline_n, args.seed)?;
    emit(args.out.as_deref(), &z_table_tsv(&report.cells, &report.baseline))
}

fn check_cmd(cmd: CheckCmd) -> Result<Vec<CheckOutcome>> {
    match cmd {
        CheckCmd::Mask => Ok(checks::check_mask()),
        CheckCmd::Grad { preset } => {
            let mut out: Vec<CheckOutcome> = blockpool_tensor::gradcheck::op_suite(11)?
                .into_iter()
                .map(|(name, r)| CheckOutcome {
                    name: format!("grad_op_{name}"),
                    passed: r.passes(1e-4),
                    detail: format!("checked={} max_rel_err={:.3e}", r.checked, r.max_rel_err),
                })
                .collect();
            out.extend(checks::check_grad(&preset)?);
            Ok(out)
        }
        CheckCmd::Leak { variant, preset } => checks::check_leak(variant.parse()?, &preset),
    }
}

fn dispatch(cli: Cli) -> std::result::Result<(), Failure> {
    let threads = thread_setting()?;
    log::debug!("BLOCKPOOL_THREADS={threads}; running single-threaded");
    let say = |s: String| {
        print!("{s}");
        std::io::stdout().flush().ok();
    };
    match cli.command {
        Command::Vocab(c) => say(vocab_cmd(c)?),
        Command::Segment(a) => {
            let out = a.out.clone();
            let text = segment_cmd(a)?;
            emit(out.as_deref(), &text)?;
        }
        Command::Train(a) => {
            let cfg = RunConfig::load(&a.config, &a.overrides)?;
            say(train_from_config(&cfg)?);
        }
        Command::Translate(a) => say(translate_cmd(a)?),
        Command::Classify(a) => classify_cmd(a)?,
        Command::Evaluate(c) => say(evaluate_cmd(c)?),
        Command::Probe(a) => probe_cmd(a)?,
        Command::Check(c) => {
            let results = check_cmd(c)?;
            for r in &results {
                println!("{}", r.line());
            }
            if results.iter().any(|r| !r.passed) {
                return Err(Failure::Runtime("one or more checks failed".into()));
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("usage error: {m}"),
                Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            f.code()
        }
    }
}
