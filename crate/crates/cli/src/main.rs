use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use vagnmt::checkpoint::Checkpoint;
use vagnmt::corpus::{
    read_lines, read_text, synthesize_corpus, write_lines, Features, SplitPaths, SynthSpec, Task,
};
use vagnmt::error::ErrorKind;
use vagnmt::eval::{corpus_bleu, report_retrieval, Metrics};
use vagnmt::model::translate;
use vagnmt::text::{tokenize, BpeModel, Vocabulary};
use vagnmt::train::{load_splits, make_examples, train, translate_all, write_history, TrainConfig};

#[derive(Parser)]
#[command(
    name = "vagnmt",
    version,
    about = "Visually grounded neural machine translation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn BPE merges from a text file.
    LearnBpe {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        merges: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build a subword vocabulary from a text file and a BPE model.
    BuildVocab {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        bpe: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a synthetic corpus (train, valid and test splits).
    Synth(SynthArgs),
    /// Train a model; writes model.ckpt, history.csv and config.json.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate source sentences with a trained checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Image features aligned with the input lines.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        beam: usize,
        /// Defaults to standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sentence/image retrieval recall in the shared embedding space.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding `{split}.src.txt`, `{split}.tgt.txt`, `{split}.feat.vagf`.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    EvalBleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        no_smoothing: bool,
    },
    /// Train once per seed and report mean and standard deviation.
    Experiment {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Copy,
    Reverse,
    Ambiguous,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    valid_n: Option<usize>,
    #[arg(long)]
    test_n: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

/// A JSON config file (or a named preset) plus per-field overrides.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base hyperparameters when no config file is given: default, french, ikea.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long)]
    corpus_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    target_bleu: Option<f64>,
    #[arg(long)]
    text_only: bool,
    #[arg(long)]
    no_grounding_attention: bool,
    #[arg(long)]
    no_attention_init: bool,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] vagnmt::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(
                e.kind(),
                K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            eprintln!(
                "{}",
                text.lines().next().unwrap_or("error: invalid arguments")
            );
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::LearnBpe {
            input,
            merges,
            output,
        } => {
            let lines = tokenized_lines(&input)?;
            let bpe = BpeModel::learn(&lines, merges)?;
            bpe.save(&output)?;
            info!(
                "learned {} merges from {} lines",
                bpe.merges().len(),
                lines.len()
            );
        }
        Command::BuildVocab { input, bpe, output } => {
            let bpe = BpeModel::load(&bpe)?;
            let segmented: Vec<Vec<String>> = tokenized_lines(&input)?
                .iter()
                .map(|t| bpe.apply(t))
                .collect();
            let vocab = Vocabulary::build(&segmented);
            vocab.save(&output)?;
            info!("vocabulary of {} entries", vocab.len());
        }
        Command::Synth(args) => synth(args)?,
        Command::Train { config, out } => {
            let cfg = resolve_config(&config)?;
            train_into(&cfg, &out)?;
        }
        Command::Translate {
            checkpoint,
            input,
            features,
            beam,
            output,
        } => translate_file(
            &checkpoint,
            &input,
            features.as_deref(),
            beam,
            output.as_deref(),
        )?,
        Command::Retrieve {
            checkpoint,
            corpus,
            split,
            k,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (model, text) = ck.restore()?;
            let data = SplitPaths::new(&corpus, &split).load(true)?;
            let features = data.features.as_ref().expect("loaded with features");
            let sources = data
                .source
                .iter()
                .enumerate()
                .map(|(i, s)| encode_nonempty(&text, s, i))
                .collect::<Result<Vec<_>>>()?;
            let images: Vec<&[f32]> = (0..features.len()).map(|i| features.row(i)).collect();
            let report =
                report_retrieval(&ck.params, &model, &sources, &images, &ck.settings(), &k)?;
            print_json(&report)?;
        }
        Command::EvalBleu {
            hyp,
            reference,
            no_smoothing,
        } => {
            let h = tokenized_lines(&hyp)?;
            let r = tokenized_lines(&reference)?;
            let report = corpus_bleu(&h, &r, !no_smoothing)?;
            print_json(&Metrics::from_bleu(&report))?;
        }
        Command::Experiment { config, seeds, out } => {
            let cfg = resolve_config(&config)?;
            experiment(&cfg, seeds, &out)?;
        }
    }
    Ok(())
}

fn tokenized_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?.iter().map(|l| tokenize(l)).collect())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!(
        "{}",
        serde_json::to_string_pretty(value).map_err(vagnmt::Error::from)?
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        task: match a.task {
            TaskArg::Copy => Task::Copy,
            TaskArg::Reverse => Task::Reverse,
            TaskArg::Ambiguous => Task::Ambiguous,
        },
        n: a.n,
        valid_n: a.valid_n.unwrap_or(d.valid_n),
        test_n: a.test_n.unwrap_or(d.test_n),
        vocab_size: a.vocab_size.unwrap_or(d.vocab_size),
        max_len: a.max_len.unwrap_or(d.max_len),
        clusters: a.clusters.unwrap_or(d.clusters),
        feature_dim: a.feature_dim.unwrap_or(d.feature_dim),
        noise: a.noise.unwrap_or(d.noise),
        seed: a.seed,
        ..d
    };
    let corpus = synthesize_corpus(&spec)?;
    std::fs::create_dir_all(&a.out).map_err(vagnmt::Error::from)?;
    corpus.save(&a.out)?;
    info!(
        "wrote {} / {} / {} pairs to {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        a.out.display()
    );
    Ok(())
}

/// Loads the base config and applies command-line overrides. A relative
/// `corpus_dir` in a config file is taken relative to that file.
fn resolve_config(a: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => {
            let raw = read_text(path)?;
            let mut cfg: TrainConfig = serde_json::from_str(&raw)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            if let (Some(dir), Some(parent)) = (cfg.corpus_dir.as_mut(), path.parent()) {
                if dir.is_relative() {
                    *dir = parent.join(&*dir);
                }
            }
            cfg
        }
        (None, Some(name)) => TrainConfig::preset(name)?,
        (None, None) => TrainConfig::default(),
    };
    if let Some(v) = &a.corpus_dir {
        cfg.corpus_dir = Some(v.clone());
    }
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field {
                cfg.$field = v;
            }
        )*};
    }
    set!(
        seed,
        max_epochs,
        batch_size,
        learning_rate,
        alpha,
        lambda,
        patience,
        beam_size
    );
    if a.target_bleu.is_some() {
        cfg.target_bleu = a.target_bleu;
    }
    cfg.ablation.text_only |= a.text_only;
    cfg.ablation.no_grounding_attention |= a.no_grounding_attention;
    cfg.ablation.no_attention_init |= a.no_attention_init;
    cfg.validate()?;
    Ok(cfg)
}

struct RunSummary {
    best_epoch: usize,
    valid_bleu: f64,
}

fn train_into(cfg: &TrainConfig, out: &Path) -> Result<RunSummary> {
    let (train_corpus, valid_corpus) = load_splits(cfg)?;
    let outcome = train(&train_corpus, &valid_corpus, cfg)?;
    std::fs::create_dir_all(out).map_err(vagnmt::Error::from)?;
    outcome.best.save(&out.join("model.ckpt"))?;
    write_history(&out.join("history.csv"), &outcome.history)?;
    let json = serde_json::to_string_pretty(cfg).map_err(vagnmt::Error::from)?;
    std::fs::write(out.join("config.json"), json + "\n").map_err(vagnmt::Error::from)?;
    info!(
        "best validation BLEU {:.4} at epoch {} of {}",
        outcome.best.meta.best_bleu, outcome.best_epoch, outcome.epochs_run
    );
    Ok(RunSummary {
        best_epoch: outcome.best_epoch,
        valid_bleu: outcome.best.meta.best_bleu,
    })
}

fn encode_nonempty(text: &vagnmt::text::TextProcessor, line: &str, i: usize) -> Result<Vec<usize>> {
    let src = text.encode_source(line);
    if src.is_empty() {
        return Err(vagnmt::Error::Input(format!("input line {} is empty", i + 1)).into());
    }
    Ok(src)
}

fn translate_file(
    checkpoint: &Path,
    input: &Path,
    features: Option<&Path>,
    beam: usize,
    output: Option<&Path>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, text) = ck.restore()?;
    let settings = ck.settings();
    let lines = read_lines(input)?;
    let feats = match (settings.uses_image(), features) {
        (true, None) => {
            return Err(CliError::Usage(
                "this checkpoint uses images; pass --features".into(),
            ));
        }
        (true, Some(path)) => {
            let f = Features::load(path)?;
            if f.len() != lines.len() {
                return Err(vagnmt::Error::Alignment {
                    what: input.display().to_string(),
                    left: lines.len(),
                    other: path.display().to_string(),
                    right: f.len(),
                }
                .into());
            }
            Some(f)
        }
        (false, _) => None,
    };
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let src = encode_nonempty(&text, line, i)?;
        let image = feats.as_ref().map(|f| f.row(i));
        let hyp = translate(&ck.params, &model, &src, image, &settings, beam)?;
        out.push(text.decode_target(&hyp));
    }
    match output {
        Some(path) => write_lines(path, &out)?,
        None => out.iter().for_each(|l| println!("{l}")),
    }
    Ok(())
}

#[derive(Serialize)]
struct SeedResult {
    seed: u64,
    best_epoch: usize,
    valid_bleu: f64,
    test_bleu: Option<f64>,
}

#[derive(Serialize)]
struct Aggregate {
    mean: f64,
    std: f64,
}

#[derive(Serialize)]
struct ExperimentReport {
    runs: Vec<SeedResult>,
    valid_bleu: Aggregate,
    test_bleu: Option<Aggregate>,
}

/// Mean and sample standard deviation (zero for a single run).
fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Aggregate { mean, std }
}

fn experiment(base: &TrainConfig, seeds: u64, out: &Path) -> Result<()> {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let dir = base
        .corpus_dir
        .clone()
        .ok_or_else(|| CliError::Usage("corpus_dir is not set".into()))?;
    let test_paths = SplitPaths::new(&dir, "test");
    let test = if test_paths.source.exists() {
        Some(test_paths.load(!base.ablation.text_only)?)
    } else {
        None
    };
    let mut runs = Vec::new();
    for seed in base.seed..base.seed + seeds {
        let cfg = TrainConfig {
            seed,
            ..base.clone()
        };
        let run_dir = out.join(format!("seed-{seed}"));
        info!("seed {seed}: training into {}", run_dir.display());
        let summary = train_into(&cfg, &run_dir)?;
        let test_bleu = match &test {
            Some(test) => {
                let ck = Checkpoint::load(&run_dir.join("model.ckpt"))?;
                let (model, text) = ck.restore()?;
                let ex = make_examples(&text, test, !cfg.ablation.text_only)?;
                let hyps = translate_all(
                    &ck.params,
                    &model,
                    &text,
                    &ex,
                    &cfg.forward_settings(),
                    cfg.beam_size,
                )?;
                write_lines(&run_dir.join("test.hyp.txt"), &hyps)?;
                let h: Vec<Vec<String>> = hyps.iter().map(|l| tokenize(l)).collect();
                let r: Vec<Vec<String>> = test.target.iter().map(|l| tokenize(l)).collect();
                Some(corpus_bleu(&h, &r, cfg.smoothing)?.bleu)
            }
            None => None,
        };
        runs.push(SeedResult {
            seed,
            best_epoch: summary.best_epoch,
            valid_bleu: summary.valid_bleu,
            test_bleu,
        });
    }
    let valid: Vec<f64> = runs.iter().map(|r| r.valid_bleu).collect();
    let tests: Option<Vec<f64>> = runs.iter().map(|r| r.test_bleu).collect();
    let report = ExperimentReport {
        valid_bleu: aggregate(&valid),
        test_bleu: tests.as_deref().map(aggregate),
        runs,
    };
    let json = serde_json::to_string_pretty(&report).map_err(vagnmt::Error::from)?;
    std::fs::write(out.join("results.json"), json + "\n").map_err(vagnmt::Error::from)?;

    println!("seed\tbest_epoch\tvalid_bleu\ttest_bleu");
    for r in &report.runs {
        let t = r.test_bleu.map_or("-".to_string(), |b| format!("{b:.4}"));
        println!("{}\t{}\t{:.4}\t{t}", r.seed, r.best_epoch, r.valid_bleu);
    }
    let fmt = |a: &Aggregate| format!("{:.4} ± {:.4}", a.mean, a.std);
    let t = report.test_bleu.as_ref().map_or("-".to_string(), fmt);
    println!("mean ± std\t\t{}\t{t}", fmt(&report.valid_bleu));
    Ok(())
}
