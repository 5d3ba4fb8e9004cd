//! `textcomp`: train, compress, translate, evaluate and run ablations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use textcomp::config::{RunConfig, Setting};
use textcomp::data::io;
use textcomp::data::noise::{synthesize_corpus, NoiseConfig, ShuffleLevel};
use textcomp::data::tokenize::{detokenize, tokenize};
use textcomp::data::vocab::{TokenId, Vocab};
use textcomp::etc::{self, BaselineMode};
use textcomp::eval::{self, MetricReport, REPORT_HEADER};
use textcomp::experiments::{self, AblationOptions, RunOptions};
use textcomp::fusion::FusionMode;
use textcomp::tasks::{Manner, Prediction, TaskKind, TaskSample};
use textcomp::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const RESULTS_FILE: &str = "results.tsv";

#[derive(Parser)]
#[command(name = "textcomp", version, about = "Text-compression-aided Transformer encoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a task model (or a standalone compressor) and evaluate it.
    Train(TrainArgs),
    /// Compress one tokenized sentence per line with a trained compressor.
    Compress(CompressArgs),
    /// Translate one sentence per line with a trained translation model.
    Translate(TranslateArgs),
    /// Score predictions against references.
    Evaluate(EvaluateArgs),
    /// Train and evaluate over a grid of compression ratios.
    SweepGamma(SweepArgs),
    /// Compare compression-quality levels on one task.
    AblateQuality(AblateArgs),
    /// Build unsupervised (noisy, clean) compression pairs from a corpus.
    SynthesizeNoise(NoiseArgs),
}

/// Settings shared by every training command; each flag overrides the
/// config file.
#[derive(Args, Clone)]
struct RunFlags {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Random seed. Overrides the config file; the environment variable
    /// applies only when the file sets no seed.
    #[arg(long, env = "TEXTCOMP_SEED")]
    seed: Option<u64>,
    /// Task: translate, compress, span or choice.
    #[arg(long)]
    kind: Option<TaskKind>,
    /// Fusion mode: none, bef, bdf or bbf.
    #[arg(long)]
    fusion: Option<FusionMode>,
    /// Compression manner: none, etc-pipeline, etc-joint or itc-joint.
    #[arg(long)]
    manner: Option<Manner>,
    /// Compressor training data: supervised, unsupervised or semi.
    #[arg(long)]
    setting: Option<Setting>,
    /// Compression ratio in (0, 1].
    #[arg(long)]
    gamma: Option<f64>,
    /// Beam length-normalization exponent.
    #[arg(long)]
    alpha: Option<f64>,
    /// Beam coverage-penalty weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Beam width.
    #[arg(long)]
    beam: Option<usize>,
    /// Task epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Supervised compressor epochs.
    #[arg(long)]
    compressor_epochs: Option<usize>,
    /// Compressor epochs on noise-synthesized pairs.
    #[arg(long)]
    unsupervised_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Task training file (switches the data source to files).
    #[arg(long)]
    train_file: Option<PathBuf>,
    /// Task test file.
    #[arg(long)]
    test_file: Option<PathBuf>,
    /// Tab-separated `source<TAB>compression` pairs.
    #[arg(long)]
    compress_pairs: Option<PathBuf>,
    /// Unlabeled sentences for noise synthesis.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Run directory for the config snapshot, vocabulary, checkpoint and logs.
    #[arg(short, long, default_value = "run")]
    out: PathBuf,
    /// Continue from the run directory's last epoch checkpoint.
    #[arg(long)]
    resume: bool,
    /// Feed the pipeline a reference compression instead of the trained one.
    #[arg(long)]
    baseline: Option<BaselineMode>,
}

#[derive(Args)]
struct CompressArgs {
    /// Run directory of a trained compressor or compression-aided task model.
    #[arg(short, long)]
    run: PathBuf,
    #[arg(short, long)]
    input: PathBuf,
    /// Output file; standard output when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(short, long)]
    run: PathBuf,
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Beam width; greedy decoding when absent.
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricKind {
    /// ROUGE-1, ROUGE-2 and ROUGE-L.
    Rouge,
    Bleu,
    /// Positional token accuracy and exact match.
    TokenAcc,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(short, long)]
    pred: PathBuf,
    #[arg(short, long)]
    reference: PathBuf,
    #[arg(short, long, value_enum, default_value = "rouge")]
    metric: MetricKind,
    /// Keep case instead of lowercasing before scoring.
    #[arg(long)]
    keep_case: bool,
    /// Report file of `key=value` lines.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Comma-separated ratios in (0, 1].
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
    grid: Vec<f64>,
    /// Directory for the config snapshot and the result table.
    #[arg(short, long, default_value = "sweep")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Add an ITC-joint row.
    #[arg(long)]
    itc: bool,
    /// Directory for the config snapshot and the result table.
    #[arg(short, long, default_value = "ablation")]
    out: PathBuf,
}

#[derive(Args)]
struct NoiseArgs {
    /// One sentence per line.
    #[arg(short, long)]
    input: PathBuf,
    /// Tab-separated `noisy<TAB>clean` pairs.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, env = "TEXTCOMP_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    additive_fraction: f64,
    #[arg(long, value_enum, default_value = "token")]
    shuffle: Shuffle,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Shuffle {
    Token,
    Sentence,
}

fn load_config(flags: &RunFlags) -> anyhow::Result<RunConfig> {
    let (mut cfg, file_seed) = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let has_seed = toml::from_str::<toml::Table>(&text)
                .map_err(|e| Error::Config(e.to_string()))?
                .contains_key("seed");
            (RunConfig::from_toml(&text)?, has_seed)
        }
        None => (RunConfig::default(), false),
    };
    if let Some(seed) = flags.seed {
        // The environment only supplies a default; an explicit flag wins.
        let from_env = std::env::args().all(|a| a != "--seed" && !a.starts_with("--seed="));
        if !(from_env && file_seed) {
            cfg.seed = seed;
        }
    }
    macro_rules! set {
        ($flag:expr => $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(flags.kind => cfg.task.kind);
    set!(flags.fusion => cfg.task.fusion);
    set!(flags.manner => cfg.task.manner);
    set!(flags.setting => cfg.train.setting);
    if let Some(g) = flags.gamma {
        cfg = experiments::with_gamma(&cfg, g);
    }
    set!(flags.alpha => cfg.beam.alpha);
    set!(flags.beta => cfg.beam.beta);
    set!(flags.beam => cfg.beam.beam_size);
    set!(flags.epochs => cfg.train.epochs);
    set!(flags.compressor_epochs => cfg.train.compressor_epochs);
    set!(flags.unsupervised_epochs => cfg.train.unsupervised_epochs);
    set!(flags.batch_size => cfg.train.batch_size);
    set!(flags.lr => cfg.optim.lr);
    set!(flags.layers => cfg.model.layers);
    set!(flags.d_model => cfg.model.d_model);
    set!(flags.d_ff => cfg.model.d_ff);
    set!(flags.heads => cfg.model.heads);
    if flags.train_file.is_some() {
        cfg.data.source = textcomp::config::DataSource::Files;
        cfg.data.train = flags.train_file.clone();
    }
    if flags.test_file.is_some() {
        cfg.data.test = flags.test_file.clone();
    }
    if flags.compress_pairs.is_some() {
        cfg.data.compress_pairs = flags.compress_pairs.clone();
    }
    if flags.corpus.is_some() {
        cfg.data.corpus = flags.corpus.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_metrics(metrics: &[MetricReport]) {
    println!("{REPORT_HEADER}");
    for m in metrics {
        println!("{m}");
    }
}

fn write_or_print(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn read_sentences(path: &Path, vocab: &Vocab) -> anyhow::Result<Vec<Vec<TokenId>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let toks = tokenize(line);
        if toks.is_empty() {
            return Err(Error::Data(format!("{}:{}: empty line", path.display(), i + 1)).into());
        }
        out.push(vocab.encode(&toks));
    }
    Ok(out)
}

fn lines_of(vocab: &Vocab, seqs: &[Vec<TokenId>]) -> String {
    seqs.iter().map(|s| detokenize(&vocab.decode(s)) + "\n").collect()
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.run)?;
    let opts = RunOptions {
        out_dir: Some(args.out.clone()),
        resume: args.resume,
        stop_after: None,
        baseline: args.baseline,
        verbose: args.run.verbose,
    };
    let r = experiments::run_train(&cfg, &opts)?;
    print_metrics(&r.metrics);
    eprintln!("run written to {}", args.out.display());
    Ok(())
}

fn compress(args: CompressArgs) -> anyhow::Result<()> {
    let (cfg, vocab, models, store) = experiments::load_run(&args.run)?;
    let Some(etc) = models.etc() else {
        return Err(Error::Config(format!("{} has no explicit compressor", args.run.display())).into());
    };
    let mut beam = cfg.beam.clone();
    beam.gamma = args.gamma.unwrap_or(beam.gamma);
    beam.alpha = args.alpha.unwrap_or(beam.alpha);
    beam.beta = args.beta.unwrap_or(beam.beta);
    beam.beam_size = args.beam.unwrap_or(beam.beam_size);
    beam.validate()?;
    let xs = read_sentences(&args.input, &vocab)?;
    let out = etc::compress_batch(etc, &store, &xs, &beam)?;
    write_or_print(args.output.as_deref(), &lines_of(&vocab, &out))
}

fn translate(args: TranslateArgs) -> anyhow::Result<()> {
    let (cfg, vocab, models, store) = experiments::load_run(&args.run)?;
    let task = models
        .task
        .as_ref()
        .filter(|t| t.cfg.kind == TaskKind::Translate)
        .ok_or_else(|| Error::Config(format!("{} is not a translation run", args.run.display())))?;
    let xs = read_sentences(&args.input, &vocab)?;
    let comp = match task.cfg.manner {
        Manner::EtcPipeline => Some(etc::compress_batch(models.etc().expect("compressor"), &store, &xs, &cfg.beam)?),
        _ => None,
    };
    let samples: Vec<TaskSample> = xs
        .into_iter()
        .map(|source| TaskSample::Translate { source, target: Vec::new() })
        .collect();
    let out: Vec<Vec<TokenId>> = match args.beam {
        Some(k) => {
            let beam = etc::BeamConfig {
                beam_size: k,
                ..cfg.beam.clone()
            };
            samples
                .iter()
                .enumerate()
                .map(|(i, s)| task.translate_beam(&store, s, comp.as_ref().map(|c| c[i].as_slice()), &beam))
                .collect::<textcomp::Result<_>>()?
        }
        None => experiments::predict_all(task, &store, &samples, comp.as_deref())?
            .into_iter()
            .map(|p| match p {
                Prediction::Tokens(t) => t,
                _ => unreachable!(),
            })
            .collect(),
    };
    write_or_print(args.output.as_deref(), &lines_of(&vocab, &out))
}

fn read_token_lines(path: &Path, fold: bool) -> anyhow::Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| {
            let t = tokenize(l);
            if fold {
                eval::fold_case(&t)
            } else {
                t
            }
        })
        .collect())
}

fn evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let fold = !args.keep_case;
    let pred = read_token_lines(&args.pred, fold)?;
    let reference = read_token_lines(&args.reference, fold)?;
    if pred.len() != reference.len() {
        return Err(Error::Data(format!("{} predictions for {} references", pred.len(), reference.len())).into());
    }
    let n = pred.len();
    let metrics = match args.metric {
        MetricKind::Rouge => {
            let mut out = Vec::new();
            for k in 1..=2 {
                let mut acc = eval::Prf::default();
                for (c, r) in pred.iter().zip(&reference) {
                    let p = eval::rouge_n(c, r, k)?;
                    acc.precision += p.precision / n as f64;
                    acc.recall += p.recall / n as f64;
                    acc.f1 += p.f1 / n as f64;
                }
                out.push(MetricReport::prf(format!("rouge{k}"), acc, n));
            }
            let mut acc = eval::Prf::default();
            for (c, r) in pred.iter().zip(&reference) {
                let p = eval::rouge_l(c, r);
                acc.precision += p.precision / n as f64;
                acc.recall += p.recall / n as f64;
                acc.f1 += p.f1 / n as f64;
            }
            out.push(MetricReport::prf("rougeL", acc, n));
            out
        }
        MetricKind::Bleu => {
            let b = eval::bleu(&pred, &reference, 4, false)?;
            vec![
                MetricReport::scalar("bleu", b.score, n),
                MetricReport::scalar("bleu_bp", b.brevity_penalty, n),
            ]
        }
        MetricKind::TokenAcc => {
            let acc = pred
                .iter()
                .zip(&reference)
                .map(|(p, r)| {
                    let m = p.len().max(r.len());
                    if m == 0 {
                        1.0
                    } else {
                        p.iter().zip(r).filter(|(a, b)| a == b).count() as f64 / m as f64
                    }
                })
                .sum::<f64>()
                / n.max(1) as f64;
            vec![
                MetricReport::scalar("token_acc", acc, n),
                MetricReport::scalar("exact", eval::accuracy(&pred, &reference)?, n),
            ]
        }
    };
    let kv: String = metrics.iter().map(MetricReport::to_kv).collect();
    match &args.report {
        Some(p) => {
            fs::write(p, &kv)?;
            print_metrics(&metrics);
        }
        None => {
            print!("{kv}");
            print_metrics(&metrics);
        }
    }
    Ok(())
}

/// Creates the output directory of a sweep or ablation and snapshots its config.
fn start_table_run(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.save(dir.join(experiments::CONFIG_FILE))?;
    Ok(())
}

fn finish_table(dir: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(dir.join(RESULTS_FILE), text)?;
    print!("{text}");
    Ok(())
}

fn sweep(args: SweepArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.run)?;
    start_table_run(&args.out, &cfg)?;
    let rows = experiments::sweep_gamma(&cfg, &args.grid, args.run.verbose)?;
    let mut text = String::from("gamma\tmetric\tscore\n");
    for (g, m) in &rows {
        text += &format!("{g}\t{}\t{:.6}\n", m.metric, m.score);
    }
    finish_table(&args.out, &text)
}

fn ablate(args: AblateArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.run)?;
    start_table_run(&args.out, &cfg)?;
    let opts = AblationOptions {
        seeds: args.seeds,
        include_itc: args.itc,
        verbose: args.run.verbose,
    };
    let rows = experiments::ablate_quality(&cfg, &opts)?;
    let text = experiments::format_ablation(&rows);
    finish_table(&args.out, &text)
}

fn synthesize(args: NoiseArgs) -> anyhow::Result<()> {
    let cfg = NoiseConfig {
        additive_fraction: args.additive_fraction,
        shuffle_level: match args.shuffle {
            Shuffle::Token => ShuffleLevel::Token,
            Shuffle::Sentence => ShuffleLevel::Sentence,
        },
        dropout_p: args.dropout,
        seed: args.seed,
    };
    cfg.validate()?;
    let corpus = io::read_corpus(&args.input)?;
    if corpus.is_empty() {
        return Err(Error::Data(format!("{} is empty", args.input.display())).into());
    }
    let vocab = Vocab::build(corpus.iter().map(|l| l.iter().map(String::as_str)));
    let ids: Vec<Vec<TokenId>> = corpus.iter().map(|l| vocab.encode(l)).collect();
    let pairs = synthesize_corpus(&ids, &cfg, vocab.get("."))?;
    let as_tokens: Vec<_> = pairs
        .iter()
        .map(|(x, y)| (io::to_tokens(&vocab, x), io::to_tokens(&vocab, y)))
        .collect();
    io::write_pairs(&args.output, &as_tokens)?;
    eprintln!("{} pairs written to {}", as_tokens.len(), args.output.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::Data(_) | Error::Io(_) | Error::Checkpoint(_)) => EXIT_DATA,
        Some(_) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_DATA,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Compress(a) => compress(a),
        Command::Translate(a) => translate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::SweepGamma(a) => sweep(a),
        Command::AblateQuality(a) => ablate(a),
        Command::SynthesizeNoise(a) => synthesize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
