//! Training loops, evaluation and the ablation harness behind the CLI.
//!
//! A run is a fixed sequence of phases derived from the config:
//!
//! | manner         | phases                                                  |
//! |----------------|---------------------------------------------------------|
//! | compress task  | compressor (unsupervised, then supervised)              |
//! | none           | task                                                    |
//! | etc-pipeline   | compressor, then task with the compressor frozen        |
//! | etc-joint      | compressor, then task and compressor jointly            |
//! | itc-joint      | ITC stage 1 on compression pairs, then end to end       |
//!
//! Epochs are numbered globally across phases. Batch order of epoch `e` is a
//! pure function of `(seed, e)`, so a run resumed from an epoch checkpoint
//! continues bit-identically.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::config::{DataSource, RunConfig, Setting};
use crate::data::io;
use crate::data::noise::{pair_rng, synthesize_corpus};
use crate::data::synthetic::{Pair, Synthetic, SyntheticSpec};
use crate::data::vocab::{TokenId, Vocab, EOS};
use crate::error::{bail, Result};
use crate::etc::{self, baseline_compress, BaselineMode};
use crate::eval::{self, MetricReport, Prf};
use crate::exec;
use crate::itc::fertility_labels_ids;
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::params::{ParamId, ParamStore};
use crate::tasks::{token_accuracy, Compressed, Manner, Prediction, TaskKind, TaskModel, TaskSample};
use crate::tensor::Tensor;
use crate::transformer::{ModelConfig, Seq2Seq};
use crate::Var;

const DATA_STREAM: u64 = 0x5EED_DA7A;
const SHUFFLE_STREAM: u64 = 0x5EED_5407;
const INIT_STREAM: u64 = 0x5EED_1417;
const BASELINE_STREAM: u64 = 0x5EED_BA5E;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "train_log.tsv";
pub const METRICS_FILE: &str = "metrics.txt";

/// Everything a run trains and evaluates on, as token ids.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
    /// Labeled compression pairs.
    pub comp_train: Vec<Pair>,
    pub comp_test: Vec<Pair>,
    /// Unlabeled sequences for noise synthesis.
    pub corpus: Vec<Vec<TokenId>>,
    pub full_stop: Option<TokenId>,
}

fn backbone_pairs(syn: &Synthetic, xs: impl Iterator<Item = Vec<TokenId>>) -> Vec<Pair> {
    xs.filter_map(|x| {
        let y = syn.backbone(&x);
        (!y.is_empty()).then_some((x, y))
    })
    .collect()
}

fn synthetic_data(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let spec = SyntheticSpec {
        translation: cfg.task.kind == TaskKind::Translate,
        ..d.synthetic.clone()
    };
    let syn = Synthetic::new(spec)?;
    let seed = cfg.seed ^ DATA_STREAM;
    let (train, test, comp_train, comp_test) = match cfg.task.kind {
        TaskKind::Compress => {
            let (tr, te) = syn.split(d.n_train, d.n_test, seed);
            (Vec::new(), Vec::new(), tr, te)
        }
        TaskKind::Translate => {
            let (tr, te) = syn.translation_split(d.n_train, d.n_test, seed)?;
            let ctr = backbone_pairs(&syn, tr.iter().map(|p| p.0.clone()));
            let cte = backbone_pairs(&syn, te.iter().map(|p| p.0.clone()));
            let wrap = |v: Vec<Pair>| {
                v.into_iter()
                    .map(|(source, target)| TaskSample::Translate { source, target })
                    .collect::<Vec<_>>()
            };
            (wrap(tr), wrap(te), ctr, cte)
        }
        TaskKind::Span => {
            let mut rng = pair_rng(seed, 0);
            let tr: Vec<_> = (0..d.n_train).map(|_| syn.span_sample(d.unanswerable, &mut rng)).collect();
            let mut rng = pair_rng(seed, 1);
            let te: Vec<_> = (0..d.n_test).map(|_| syn.span_sample(d.unanswerable, &mut rng)).collect();
            let ctr = backbone_pairs(&syn, tr.iter().map(|s| s.passage.clone()));
            let cte = backbone_pairs(&syn, te.iter().map(|s| s.passage.clone()));
            let wrap = |v: Vec<crate::data::synthetic::SpanSample>| {
                v.into_iter()
                    .map(|s| TaskSample::Span {
                        passage: s.passage,
                        question: s.question,
                        answer: s.answer,
                    })
                    .collect::<Vec<_>>()
            };
            (wrap(tr), wrap(te), ctr, cte)
        }
        TaskKind::Choice => {
            let mut rng = pair_rng(seed, 0);
            let tr: Vec<_> = (0..d.n_train).map(|_| syn.choice_sample(d.options, &mut rng)).collect();
            let mut rng = pair_rng(seed, 1);
            let te: Vec<_> = (0..d.n_test).map(|_| syn.choice_sample(d.options, &mut rng)).collect();
            let ctr = backbone_pairs(&syn, tr.iter().map(|s| s.passage.clone()));
            let cte = backbone_pairs(&syn, te.iter().map(|s| s.passage.clone()));
            let wrap = |v: Vec<crate::data::synthetic::ChoiceSample>| {
                v.into_iter()
                    .map(|s| TaskSample::Choice {
                        passage: s.passage,
                        question: s.question,
                        options: s.options,
                        label: s.label,
                    })
                    .collect::<Vec<_>>()
            };
            (wrap(tr), wrap(te), ctr, cte)
        }
    };
    let corpus = if train.is_empty() {
        comp_train.iter().map(|p| p.0.clone()).collect()
    } else {
        train.iter().map(|s| s.compression_source().to_vec()).collect()
    };
    Ok(Dataset {
        vocab: syn.vocab,
        train,
        test,
        comp_train,
        comp_test,
        corpus,
        full_stop: None,
    })
}

fn file_data(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let kind = cfg.task.kind;
    let mut token_lines: Vec<Vec<String>> = Vec::new();
    let comp_pairs = match &d.compress_pairs {
        Some(p) => io::read_pairs(p)?,
        None => Vec::new(),
    };
    let corpus = match &d.corpus {
        Some(p) => io::read_corpus(p)?,
        None => Vec::new(),
    };
    for (a, b) in &comp_pairs {
        token_lines.push(a.clone());
        token_lines.push(b.clone());
    }
    token_lines.extend(corpus.iter().cloned());

    enum Raw {
        Pairs(Vec<(Vec<String>, Vec<String>)>),
        Span(Vec<io::SpanRecord>),
        Choice(Vec<io::ChoiceRecord>),
    }
    let read = |p: &PathBuf| -> Result<Raw> {
        Ok(match kind {
            TaskKind::Translate | TaskKind::Compress => Raw::Pairs(io::read_pairs(p)?),
            TaskKind::Span => Raw::Span(io::read_span(p)?),
            TaskKind::Choice => Raw::Choice(io::read_choice(p)?),
        })
    };
    let train_raw = d.train.as_ref().map(read).transpose()?;
    let test_raw = d.test.as_ref().map(read).transpose()?;
    if let Some(raw) = &train_raw {
        match raw {
            Raw::Pairs(v) => v.iter().for_each(|(a, b)| {
                token_lines.push(a.clone());
                token_lines.push(b.clone());
            }),
            Raw::Span(v) => v.iter().for_each(|r| {
                token_lines.push(r.passage.clone());
                token_lines.push(r.question.clone());
            }),
            Raw::Choice(v) => v.iter().for_each(|r| {
                token_lines.push(r.passage.clone());
                token_lines.push(r.question.clone());
                token_lines.extend(r.options.iter().cloned());
            }),
        }
    }
    let vocab = Vocab::build(token_lines.iter().map(|l| l.iter().map(String::as_str)));
    let enc = |t: &[String]| vocab.encode(t);
    let to_samples = |raw: Option<Raw>| -> Vec<TaskSample> {
        match raw {
            None => Vec::new(),
            Some(Raw::Pairs(v)) => v
                .iter()
                .map(|(a, b)| TaskSample::Translate {
                    source: enc(a),
                    target: enc(b),
                })
                .collect(),
            Some(Raw::Span(v)) => v
                .iter()
                .map(|r| TaskSample::Span {
                    passage: enc(&r.passage),
                    question: enc(&r.question),
                    answer: r.answer,
                })
                .collect(),
            Some(Raw::Choice(v)) => v
                .iter()
                .map(|r| TaskSample::Choice {
                    passage: enc(&r.passage),
                    question: enc(&r.question),
                    options: r.options.iter().map(|o| enc(o)).collect(),
                    label: r.label,
                })
                .collect(),
        }
    };
    let mut train = to_samples(train_raw);
    let mut test = to_samples(test_raw);
    let mut comp_train: Vec<Pair> = comp_pairs.iter().map(|(a, b)| (enc(a), enc(b))).collect();
    let mut comp_test = Vec::new();
    if kind == TaskKind::Compress {
        let as_pairs = |v: Vec<TaskSample>| -> Vec<Pair> {
            v.into_iter()
                .filter_map(|s| match s {
                    TaskSample::Translate { source, target } => Some((source, target)),
                    _ => None,
                })
                .collect()
        };
        comp_train.extend(as_pairs(std::mem::take(&mut train)));
        comp_test = as_pairs(std::mem::take(&mut test));
    }
    let mut corpus: Vec<Vec<TokenId>> = corpus.iter().map(|l| enc(l)).collect();
    if corpus.is_empty() {
        corpus = if train.is_empty() {
            comp_train.iter().map(|p| p.0.clone()).collect()
        } else {
            train.iter().map(|s| s.compression_source().to_vec()).collect()
        };
    }
    comp_train.retain(|p| !p.0.is_empty() && !p.1.is_empty());
    comp_test.retain(|p| !p.0.is_empty() && !p.1.is_empty());
    corpus.retain(|l| !l.is_empty());
    let full_stop = vocab.get(".");
    Ok(Dataset {
        vocab,
        train,
        test,
        comp_train,
        comp_test,
        corpus,
        full_stop,
    })
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let ds = match cfg.data.source {
        DataSource::Synthetic => synthetic_data(cfg)?,
        DataSource::Files => file_data(cfg)?,
    };
    if cfg.task.kind == TaskKind::Compress {
        if ds.comp_train.is_empty() && ds.corpus.is_empty() {
            bail!(Data, "no compression training data");
        }
    } else if ds.train.is_empty() {
        bail!(Data, "no task training data");
    }
    Ok(ds)
}

/// The models of a run; all parameters live in one store.
#[derive(Clone, Debug)]
pub struct Models {
    pub task: Option<TaskModel>,
    standalone: Option<Seq2Seq>,
}

impl Models {
    pub fn build(cfg: &RunConfig, vocab_size: usize, store: &mut ParamStore) -> Result<Self> {
        let model = ModelConfig {
            vocab_size,
            ..cfg.model.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM);
        if cfg.task.kind == TaskKind::Compress {
            let s2s = Seq2Seq::new(store, crate::tasks::ETC_PREFIX, &model, false, &mut rng)?;
            return Ok(Self {
                task: None,
                standalone: Some(s2s),
            });
        }
        let task = TaskModel::new(store, &cfg.task, &model, &mut rng)?;
        if cfg.train.zero_init_fusion {
            task.zero_fusion(store);
        }
        Ok(Self {
            task: Some(task),
            standalone: None,
        })
    }

    pub fn etc(&self) -> Option<&Seq2Seq> {
        self.standalone
            .as_ref()
            .or_else(|| self.task.as_ref().and_then(|t| t.etc.as_ref()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    CompressUnsupervised,
    CompressSupervised,
    Task,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Self::CompressUnsupervised => "compress-unsup",
            Self::CompressSupervised => "compress-sup",
            Self::Task => "task",
        }
    }
}

/// Ordered `(phase, epochs)` schedule of a run.
pub fn schedule(cfg: &RunConfig, baseline: Option<BaselineMode>) -> Vec<(Phase, usize)> {
    let t = &cfg.train;
    let mut out = Vec::new();
    let compresses = cfg.task.kind == TaskKind::Compress
        || (baseline.is_none() && cfg.task.manner != Manner::None);
    if compresses {
        if matches!(t.setting, Setting::Unsupervised | Setting::Semi) && t.unsupervised_epochs > 0 {
            out.push((Phase::CompressUnsupervised, t.unsupervised_epochs));
        }
        if matches!(t.setting, Setting::Supervised | Setting::Semi) && t.compressor_epochs > 0 {
            out.push((Phase::CompressSupervised, t.compressor_epochs));
        }
    }
    if cfg.task.kind != TaskKind::Compress && t.epochs > 0 {
        out.push((Phase::Task, t.epochs));
    }
    out
}

/// Shuffled index batches of global epoch `epoch`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut pair_rng(seed ^ SHUFFLE_STREAM, epoch as u64));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One optimizer step per batch; returns the batch losses.
pub fn train_epoch<F>(
    store: &mut ParamStore,
    adam: &mut AdamState,
    opt: &AdamConfig,
    ids: &[ParamId],
    batches: &[Vec<usize>],
    mut loss_fn: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut Graph, &[usize]) -> Result<Var>,
{
    let mut losses = Vec::with_capacity(batches.len());
    for b in batches {
        let (loss, mut grads) = {
            let mut g = Graph::new(store);
            let l = loss_fn(&mut g, b)?;
            (g.value(l).data()[0], g.backward(l)?)
        };
        clip_global_norm(&mut grads, opt.clip_norm);
        adam_step(store, &grads, adam, opt, Some(ids));
        losses.push(loss);
    }
    Ok(losses)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub phase: &'static str,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Where compressed tokens for the pipeline manner come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompressionSource {
    Trained,
    Baseline(BaselineMode),
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
    /// Stop after this many global epochs (for interrupted-run tests).
    pub stop_after: Option<usize>,
    pub baseline: Option<BaselineMode>,
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub log: Vec<LogRow>,
    pub metrics: Vec<MetricReport>,
    pub store: ParamStore,
    pub models: Models,
    pub data: Dataset,
    /// Compressed test sources (pipeline manner and compress task).
    pub test_compressions: Option<Vec<Vec<TokenId>>>,
    pub epochs_done: usize,
}

impl RunResult {
    /// The task's headline metric.
    pub fn primary(&self) -> f64 {
        primary_metric(&self.metrics)
    }
}

pub fn primary_metric(metrics: &[MetricReport]) -> f64 {
    metrics.first().map_or(f64::NAN, |m| m.score)
}

fn compression_params(store: &ParamStore, manner: Manner, kind: TaskKind) -> Vec<ParamId> {
    store
        .iter()
        .filter(|(_, name, _)| {
            if kind == TaskKind::Compress || manner != Manner::ItcJoint {
                name.starts_with("etc.")
            } else {
                name.starts_with("itc.") || name.starts_with("task.embed.") || name.starts_with("task.encoder.")
            }
        })
        .map(|(id, _, _)| id)
        .collect()
}

fn compress_sources(
    models: &Models,
    store: &ParamStore,
    sources: &[Vec<TokenId>],
    cfg: &RunConfig,
    source: CompressionSource,
    stream: u64,
) -> Result<Vec<Vec<TokenId>>> {
    match source {
        CompressionSource::Trained => {
            let etc = models.etc().expect("compressor");
            etc::compress_batch(etc, store, sources, &cfg.beam)
        }
        CompressionSource::Baseline(mode) => sources
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut rng = pair_rng(cfg.seed ^ BASELINE_STREAM ^ stream, i as u64);
                baseline_compress(x, mode, cfg.beam.gamma, &mut rng)
            })
            .collect(),
    }
}

const CKPT_EPOCHS: &str = "run.epochs_done";

fn save_checkpoint(dir: &Path, store: &ParamStore, adam: &AdamState, epochs_done: usize) -> Result<()> {
    let mut all = store.clone();
    let moments = adam.to_store(store)?;
    for (_, name, t) in moments.iter() {
        all.add(name.to_string(), t.clone())?;
    }
    all.add(CKPT_EPOCHS, Tensor::scalar(epochs_done as f64))?;
    let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    checkpoint::save(&all, &tmp)?;
    fs::rename(tmp, dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

/// Loads parameters (and optimizer state when present) from a run directory.
pub fn load_checkpoint(dir: &Path, store: &mut ParamStore) -> Result<(Option<AdamState>, usize)> {
    let saved = checkpoint::load(dir.join(CHECKPOINT_FILE))?;
    let copied = store.load_matching(&saved)?;
    if copied < store.len() {
        bail!(Checkpoint, "checkpoint covers {copied} of {} parameters", store.len());
    }
    let adam = AdamState::from_store(store, &saved).ok();
    let epochs = saved.id(CKPT_EPOCHS).map_or(0, |id| saved.get(id).data()[0] as usize);
    Ok((adam, epochs))
}

fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut s = String::from("phase\tepoch\tstep\tloss\n");
    for r in log {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", r.phase, r.epoch, r.step, r.loss);
    }
    fs::write(path, s)?;
    Ok(())
}

fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            bail!(Data, "malformed log line `{line}`");
        }
        let phase = match f[0] {
            "compress-unsup" => Phase::CompressUnsupervised.name(),
            "compress-sup" => Phase::CompressSupervised.name(),
            _ => Phase::Task.name(),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| crate::Error::Data(format!("bad log field `{s}`")));
        out.push(LogRow {
            phase,
            epoch: parse(f[1])?,
            step: parse(f[2])?,
            loss: f[3].parse().map_err(|_| crate::Error::Data(format!("bad loss `{}`", f[3])))?,
        });
    }
    Ok(out)
}

/// Trains according to the schedule, evaluates on the test split and, with
/// an output directory, writes the config snapshot, vocabulary, per-epoch
/// checkpoints, the loss log and the metrics.
pub fn run_train(cfg: &RunConfig, opts: &RunOptions) -> Result<RunResult> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let mut store = ParamStore::new();
    let models = Models::build(cfg, data.vocab.len(), &mut store)?;
    let mut adam = AdamState::new(&store);
    let mut log = Vec::new();
    let mut start_epoch = 0;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        if opts.resume && dir.join(CHECKPOINT_FILE).exists() {
            let (state, done) = load_checkpoint(dir, &mut store)?;
            adam = state.unwrap_or(adam);
            start_epoch = done;
            log = read_log(&dir.join(LOG_FILE))?;
            log.retain(|r| r.epoch < done);
        }
        cfg.save(dir.join(CONFIG_FILE))?;
        data.vocab.save(dir.join(VOCAB_FILE))?;
    }

    let source = opts.baseline.map_or(CompressionSource::Trained, CompressionSource::Baseline);
    let sched = schedule(cfg, opts.baseline);
    let mut epoch = 0;
    let mut noisy: Option<Vec<Pair>> = None;
    let mut train_comp: Option<Vec<Vec<TokenId>>> = None;
    let stop = opts.stop_after.unwrap_or(usize::MAX);
    'phases: for &(phase, epochs) in &sched {
        for _ in 0..epochs {
            if epoch >= stop {
                break 'phases;
            }
            if epoch < start_epoch {
                epoch += 1;
                continue;
            }
            let losses = match phase {
                Phase::CompressUnsupervised | Phase::CompressSupervised => {
                    let pairs: &[Pair] = if phase == Phase::CompressSupervised {
                        &data.comp_train
                    } else {
                        noisy.get_or_insert_with(|| {
                            synthesize_corpus(&data.corpus, &cfg.noise, data.full_stop).unwrap_or_default()
                        })
                    };
                    if pairs.is_empty() {
                        bail!(Data, "no pairs for the {} phase", phase.name());
                    }
                    compress_epoch(cfg, &models, &data.vocab, &mut store, &mut adam, pairs, epoch)?
                }
                Phase::Task => {
                    let task = models.task.as_ref().expect("task model");
                    if task.cfg.manner == Manner::EtcPipeline && train_comp.is_none() {
                        let sources: Vec<Vec<TokenId>> =
                            data.train.iter().map(|s| s.compression_source().to_vec()).collect();
                        train_comp = Some(compress_sources(&models, &store, &sources, cfg, source, 0)?);
                    }
                    let ids = task.task_params(&store);
                    let batches = epoch_batches(data.train.len(), cfg.train.batch_size, cfg.seed, epoch);
                    let tc = train_comp.as_deref();
                    train_epoch(&mut store, &mut adam, &cfg.optim, &ids, &batches, |g, b| {
                        let samples: Vec<TaskSample> = b.iter().map(|&i| data.train[i].clone()).collect();
                        let comp: Vec<Vec<TokenId>>;
                        let compressed = match tc {
                            Some(all) => {
                                comp = b.iter().map(|&i| all[i].clone()).collect();
                                Compressed::Tokens(&comp)
                            }
                            None => Compressed::None,
                        };
                        task.loss(g, &samples, compressed)
                    })?
                }
            };
            if opts.verbose {
                let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
                eprintln!("[{}] epoch {epoch}: mean loss {mean:.5}", phase.name());
            }
            for (step, loss) in losses.into_iter().enumerate() {
                log.push(LogRow {
                    phase: phase.name(),
                    epoch,
                    step,
                    loss,
                });
            }
            epoch += 1;
            if let Some(dir) = &opts.out_dir {
                save_checkpoint(dir, &store, &adam, epoch)?;
                write_log(&dir.join(LOG_FILE), &log)?;
            }
        }
    }
    let epochs_done = epoch;

    let test_compressions = match (&models.task, cfg.task.kind) {
        (None, _) => {
            let sources: Vec<Vec<TokenId>> = data.comp_test.iter().map(|p| p.0.clone()).collect();
            Some(compress_sources(&models, &store, &sources, cfg, source, 1)?)
        }
        (Some(t), _) if t.cfg.manner == Manner::EtcPipeline => {
            let sources: Vec<Vec<TokenId>> = data.test.iter().map(|s| s.compression_source().to_vec()).collect();
            Some(compress_sources(&models, &store, &sources, cfg, source, 1)?)
        }
        _ => None,
    };
    let metrics = match &models.task {
        None => {
            let refs: Vec<Vec<TokenId>> = data.comp_test.iter().map(|p| p.1.clone()).collect();
            compression_metrics(test_compressions.as_deref().unwrap_or(&[]), &refs)?
        }
        Some(task) => evaluate_task(task, &store, &data.test, test_compressions.as_deref())?,
    };
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(dir, &store, &adam, epochs_done)?;
        write_log(&dir.join(LOG_FILE), &log)?;
        let mut kv = String::new();
        for m in &metrics {
            kv.push_str(&m.to_kv());
        }
        fs::write(dir.join(METRICS_FILE), kv)?;
    }
    Ok(RunResult {
        log,
        metrics,
        store,
        models,
        data,
        test_compressions,
        epochs_done,
    })
}

fn compress_epoch(
    cfg: &RunConfig,
    models: &Models,
    vocab: &Vocab,
    store: &mut ParamStore,
    adam: &mut AdamState,
    pairs: &[Pair],
    epoch: usize,
) -> Result<Vec<f64>> {
    let kind = cfg.task.kind;
    let manner = models.task.as_ref().map_or(Manner::None, |t| t.cfg.manner);
    let ids = compression_params(store, manner, kind);
    let batches = epoch_batches(pairs.len(), cfg.train.batch_size, cfg.seed, epoch);
    if kind != TaskKind::Compress && manner == Manner::ItcJoint {
        let task = models.task.as_ref().expect("task model");
        let itc = task.itc.as_ref().expect("itc module");
        return train_epoch(store, adam, &cfg.optim, &ids, &batches, |g, b| {
            let xs: Vec<Vec<TokenId>> = b.iter().map(|&i| pairs[i].0.clone()).collect();
            let ys: Vec<Vec<TokenId>> = b.iter().map(|&i| pairs[i].1.clone()).collect();
            let labels: Vec<Vec<f64>> = xs.iter().zip(&ys).map(|(x, y)| fertility_labels_ids(vocab, x, y)).collect();
            let enc = task.encoder.encode(g, &task.embed, &xs, None)?;
            itc.pretrain_loss(g, &enc, &ys, &labels)
        });
    }
    let etc = models.etc().expect("compressor");
    train_epoch(store, adam, &cfg.optim, &ids, &batches, |g, b| {
        let xs: Vec<Vec<TokenId>> = b.iter().map(|&i| pairs[i].0.clone()).collect();
        let ys: Vec<Vec<TokenId>> = b.iter().map(|&i| pairs[i].1.clone()).collect();
        etc.loss(g, &xs, &ys, EOS)
    })
}

/// Token-F1 (ROUGE-1 F1), ROUGE-2 and ROUGE-L of compressions against
/// references, plus the mean compressed length ratio.
pub fn compression_metrics(cands: &[Vec<TokenId>], refs: &[Vec<TokenId>]) -> Result<Vec<MetricReport>> {
    let r = eval::corpus_rouge(cands, refs)?;
    let n = cands.len();
    let mut p1 = Prf::default();
    for (c, rf) in cands.iter().zip(refs) {
        let p = eval::rouge_n(c, rf, 1)?;
        p1.precision += p.precision / n as f64;
        p1.recall += p.recall / n as f64;
    }
    p1.f1 = r.rouge1;
    let len: usize = cands.iter().map(Vec::len).sum();
    Ok(vec![
        MetricReport::prf("token_f1", p1, n),
        MetricReport::scalar("rouge2", r.rouge2, n),
        MetricReport::scalar("rougeL", r.rouge_l, n),
        MetricReport::scalar("mean_len", len as f64 / n as f64, n),
    ])
}

const EVAL_CHUNK: usize = 32;

/// Task predictions over chunks of the test set (chunks run in parallel).
pub fn predict_all(task: &TaskModel, store: &ParamStore, samples: &[TaskSample], compressed: Option<&[Vec<TokenId>]>) -> Result<Vec<Prediction>> {
    let chunks: Vec<(usize, usize)> = (0..samples.len())
        .step_by(EVAL_CHUNK)
        .map(|s| (s, (s + EVAL_CHUNK).min(samples.len())))
        .collect();
    let parts = exec::map(&chunks, |&(a, b)| {
        let comp = match compressed {
            Some(c) => Compressed::Tokens(&c[a..b]),
            None => Compressed::None,
        };
        task.predict(store, &samples[a..b], comp)
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate_task(task: &TaskModel, store: &ParamStore, samples: &[TaskSample], compressed: Option<&[Vec<TokenId>]>) -> Result<Vec<MetricReport>> {
    if samples.is_empty() {
        bail!(Data, "empty test set");
    }
    let preds = predict_all(task, store, samples, compressed)?;
    let n = samples.len();
    Ok(match task.cfg.kind {
        TaskKind::Translate => {
            let mut cands = Vec::with_capacity(n);
            let mut refs = Vec::with_capacity(n);
            let mut acc = 0.0;
            let mut exact = 0.0;
            for (p, s) in preds.into_iter().zip(samples) {
                let (Prediction::Tokens(p), TaskSample::Translate { target, .. }) = (p, s) else {
                    unreachable!()
                };
                acc += token_accuracy(&p, target);
                exact += f64::from(u8::from(&p == target));
                cands.push(p);
                refs.push(target.clone());
            }
            let bleu = eval::bleu(&cands, &refs, 4, false)?;
            vec![
                MetricReport::scalar("token_acc", acc / n as f64, n),
                MetricReport::scalar("bleu", bleu.score, n),
                MetricReport::scalar("exact", exact / n as f64, n),
            ]
        }
        TaskKind::Span => {
            let mut em = 0.0;
            let mut f1 = 0.0;
            for (p, s) in preds.iter().zip(samples) {
                let (Prediction::Span(p), TaskSample::Span { passage, answer, .. }) = (p, s) else {
                    unreachable!()
                };
                let (e, f) = match (answer, p) {
                    (None, None) => (1.0, 1.0),
                    (None, Some(_)) | (Some(_), None) => (0.0, 0.0),
                    (Some((a, b)), Some((c, d))) => eval::span_em_f1(&passage[*c..=*d], &passage[*a..=*b])?,
                };
                em += e;
                f1 += f;
            }
            let mut out = vec![
                MetricReport::scalar("span_f1", f1 / n as f64, n),
                MetricReport::scalar("span_em", em / n as f64, n),
            ];
            if task.verifier.is_some() {
                let so = task.span_predict(store, samples, compressed.map_or(Compressed::None, Compressed::Tokens))?;
                let labels: Vec<bool> = samples
                    .iter()
                    .map(|s| matches!(s, TaskSample::Span { answer: Some(_), .. }))
                    .collect();
                if let (Some(scores), true) = (so.answerable, labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)) {
                    out.push(MetricReport::scalar("verifier_auc", eval::auc(&scores, &labels)?, n));
                }
            }
            out
        }
        TaskKind::Choice => {
            let p: Vec<usize> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Choice(c) => *c,
                    _ => unreachable!(),
                })
                .collect();
            let g: Vec<usize> = samples
                .iter()
                .map(|s| match s {
                    TaskSample::Choice { label, .. } => *label,
                    _ => unreachable!(),
                })
                .collect();
            vec![MetricReport::scalar("accuracy", eval::accuracy(&p, &g)?, n)]
        }
        TaskKind::Compress => bail!(Config, "compress is not a task head"),
    })
}

/// Sets every compression ratio of the config to `gamma`.
pub fn with_gamma(cfg: &RunConfig, gamma: f64) -> RunConfig {
    let mut c = cfg.clone();
    c.beam.gamma = gamma;
    c.task.gamma = gamma;
    c.task.itc.gamma = gamma;
    c
}

/// One `(γ, metric)` row per grid point, in grid order. The compress task
/// trains one compressor and decodes it at every γ; task runs retrain per
/// point (in parallel when enabled).
pub fn sweep_gamma(cfg: &RunConfig, grid: &[f64], verbose: bool) -> Result<Vec<(f64, MetricReport)>> {
    for &g in grid {
        etc::check_gamma(g)?;
    }
    if grid.is_empty() {
        bail!(Config, "empty gamma grid");
    }
    if cfg.task.kind == TaskKind::Compress {
        let base = run_train(cfg, &RunOptions { verbose, ..RunOptions::default() })?;
        let etc = base.models.etc().expect("compressor");
        let sources: Vec<Vec<TokenId>> = base.data.comp_test.iter().map(|p| p.0.clone()).collect();
        let refs: Vec<Vec<TokenId>> = base.data.comp_test.iter().map(|p| p.1.clone()).collect();
        return grid
            .iter()
            .map(|&g| {
                let beam = etc::BeamConfig { gamma: g, ..cfg.beam.clone() };
                let comp = etc::compress_batch(etc, &base.store, &sources, &beam)?;
                let m = compression_metrics(&comp, &refs)?;
                Ok((g, m[0].clone()))
            })
            .collect();
    }
    let rows = exec::map(grid, |&g| {
        let r = run_train(&with_gamma(cfg, g), &RunOptions { verbose, ..RunOptions::default() })?;
        Ok((g, r.metrics[0].clone()))
    });
    rows.into_iter().collect()
}

/// One row of the quality ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub metric: String,
    pub per_seed: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.per_seed.iter().sum::<f64>() / self.per_seed.len().max(1) as f64
    }
}

#[derive(Clone, Debug, Default)]
pub struct AblationOptions {
    pub seeds: Vec<u64>,
    /// Add an ITC-joint row (task runs only).
    pub include_itc: bool,
    pub verbose: bool,
}

/// Compares compression quality levels.
///
/// For the compress task every row scores compressions against the
/// reference backbones: AllText, F8W, RandSample and the trained compressor.
/// For downstream tasks every row is the task metric of a model trained with
/// that compression source: the uncompressed baseline, AllText, F8W and
/// RandSample pipelines, the trained-compressor pipeline and optionally ITC.
pub fn ablate_quality(cfg: &RunConfig, opts: &AblationOptions) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let seeds = if opts.seeds.is_empty() { vec![cfg.seed] } else { opts.seeds.clone() };
    if cfg.task.kind == TaskKind::Compress {
        let per_seed: Vec<Result<Vec<(String, String, f64)>>> = exec::map(&seeds, |&seed| {
            let c = RunConfig { seed, ..cfg.clone() };
            let run = run_train(&c, &RunOptions { verbose: opts.verbose, ..RunOptions::default() })?;
            let sources: Vec<Vec<TokenId>> = run.data.comp_test.iter().map(|p| p.0.clone()).collect();
            let refs: Vec<Vec<TokenId>> = run.data.comp_test.iter().map(|p| p.1.clone()).collect();
            let mut rows = Vec::new();
            for mode in BaselineMode::ALL {
                let comp = compress_sources(&run.models, &run.store, &sources, &c, CompressionSource::Baseline(mode), 1)?;
                let m = compression_metrics(&comp, &refs)?;
                rows.push((mode.to_string(), m[0].metric.clone(), m[0].score));
            }
            let m = &run.metrics[0];
            rows.push(("etc".to_string(), m.metric.clone(), m.score));
            Ok(rows)
        });
        return collect_rows(per_seed);
    }

    let fusion = if cfg.task.fusion == crate::fusion::FusionMode::None {
        if cfg.task.kind.is_encoder_decoder() {
            crate::fusion::FusionMode::Bbf
        } else {
            crate::fusion::FusionMode::Bef
        }
    } else {
        cfg.task.fusion
    };
    let mut variants: Vec<(String, RunConfig, Option<BaselineMode>)> = Vec::new();
    let mut base = cfg.clone();
    base.task.manner = Manner::None;
    base.task.fusion = crate::fusion::FusionMode::None;
    variants.push(("baseline".into(), base, None));
    let mut pipe = cfg.clone();
    pipe.task.manner = Manner::EtcPipeline;
    pipe.task.fusion = fusion;
    for mode in BaselineMode::ALL {
        variants.push((mode.to_string(), pipe.clone(), Some(mode)));
    }
    variants.push(("etc-pipeline".into(), pipe, None));
    if opts.include_itc {
        let mut itc = cfg.clone();
        itc.task.manner = Manner::ItcJoint;
        itc.task.fusion = fusion;
        variants.push(("itc-joint".into(), itc, None));
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let results = exec::map(&jobs, |&(v, seed)| {
        let (_, c, baseline) = &variants[v];
        let c = RunConfig { seed, ..c.clone() };
        let r = run_train(
            &c,
            &RunOptions {
                baseline: *baseline,
                verbose: opts.verbose,
                ..RunOptions::default()
            },
        )?;
        Ok::<_, crate::Error>((r.metrics[0].metric.clone(), r.metrics[0].score))
    });
    let mut rows: Vec<AblationRow> = variants
        .iter()
        .map(|(name, _, _)| AblationRow {
            name: name.clone(),
            metric: String::new(),
            per_seed: Vec::new(),
        })
        .collect();
    for (&(v, _), r) in jobs.iter().zip(results) {
        let (metric, score) = r?;
        rows[v].metric = metric;
        rows[v].per_seed.push(score);
    }
    Ok(rows)
}

fn collect_rows(per_seed: Vec<Result<Vec<(String, String, f64)>>>) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = Vec::new();
    for seed_rows in per_seed {
        for (i, (name, metric, score)) in seed_rows?.into_iter().enumerate() {
            if rows.len() <= i {
                rows.push(AblationRow {
                    name,
                    metric,
                    per_seed: Vec::new(),
                });
            }
            rows[i].per_seed.push(score);
        }
    }
    Ok(rows)
}

/// Tab-separated ablation table: `row, metric, mean, seed values...`.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::from("row\tmetric\tmean\tper_seed\n");
    for r in rows {
        let seeds: Vec<String> = r.per_seed.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "{}\t{}\t{:.6}\t{}", r.name, r.metric, r.mean(), seeds.join(","));
    }
    s
}

/// Rebuilds the models of a finished run directory.
pub fn load_run(dir: &Path) -> Result<(RunConfig, Vocab, Models, ParamStore)> {
    let cfg = RunConfig::load(dir.join(CONFIG_FILE))?;
    let vocab = Vocab::load(dir.join(VOCAB_FILE))?;
    let mut store = ParamStore::new();
    let models = Models::build(&cfg, vocab.len(), &mut store)?;
    load_checkpoint(dir, &mut store)?;
    Ok((cfg, vocab, models, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_indices_once() {
        let b = epoch_batches(10, 3, 1, 0);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, 3, 1, 0));
        assert_ne!(b, epoch_batches(10, 3, 1, 1));
    }

    #[test]
    fn schedules_follow_manner_and_setting() {
        let mut cfg = RunConfig::default();
        assert_eq!(schedule(&cfg, None), vec![(Phase::Task, 10)]);
        cfg.task.manner = Manner::EtcPipeline;
        cfg.train.setting = Setting::Semi;
        assert_eq!(
            schedule(&cfg, None),
            vec![(Phase::CompressUnsupervised, 5), (Phase::CompressSupervised, 10), (Phase::Task, 10)]
        );
        assert_eq!(schedule(&cfg, Some(BaselineMode::F8w)), vec![(Phase::Task, 10)]);
        cfg.task.kind = TaskKind::Compress;
        cfg.train.setting = Setting::Unsupervised;
        assert_eq!(schedule(&cfg, None), vec![(Phase::CompressUnsupervised, 5)]);
    }
}
