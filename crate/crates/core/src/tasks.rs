//! Downstream task models.
//!
//! [`TaskModel`] wires an encoder (and, for translation, a decoder) to an
//! optional compression source and fusion mode, and carries the task head:
//!
//! - translation: `Softmax(L_o · GeLU(L_w · o_i))` over the fused decoder;
//! - span extraction: start/end pointer heads plus an answerability verifier
//!   over `[CLS] P [SEP] Q [SEP]`;
//! - multiple choice: an MLP score on the `[CLS]` state of each
//!   `[CLS] P‖Q [SEP] O [SEP]` input, softmax over options.
//!
//! Compressed representations come from re-encoded compressor output
//! (pipeline), compressor decoder states (ETC joint) or the implicit module
//! (ITC joint).

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::vocab::{TokenId, BOS, CLS, EOS, SEP};
use crate::error::{bail, Error, Result};
use crate::etc::{self, emittable, BeamConfig, StepModel, StepOutput};
use crate::fusion::{EncoderFusion, FusionMode};
use crate::itc::{ItcConfig, ItcModule, ItcOutput};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::{shift_targets, Decoder, Embedding, Encoder, EncoderState, Linear, Memory, ModelConfig, OutputHead, RowLayout, Seq2Seq};
use crate::Var;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    Translate,
    Compress,
    Span,
    Choice,
}

impl TaskKind {
    pub fn is_encoder_decoder(self) -> bool {
        matches!(self, Self::Translate | Self::Compress)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Translate => "translate",
            Self::Compress => "compress",
            Self::Span => "span",
            Self::Choice => "choice",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "translate" => Self::Translate,
            "compress" => Self::Compress,
            "span" => Self::Span,
            "choice" => Self::Choice,
            other => bail!(Config, "unknown task `{other}`"),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Manner {
    #[default]
    None,
    EtcPipeline,
    EtcJoint,
    ItcJoint,
}

impl fmt::Display for Manner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::EtcPipeline => "etc-pipeline",
            Self::EtcJoint => "etc-joint",
            Self::ItcJoint => "itc-joint",
        })
    }
}

impl FromStr for Manner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "none" => Self::None,
            "etc-pipeline" => Self::EtcPipeline,
            "etc-joint" => Self::EtcJoint,
            "itc-joint" => Self::ItcJoint,
            other => bail!(Config, "unknown compression manner `{other}`"),
        })
    }
}

/// Encoder used to re-encode compressed tokens in the pipeline manner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineEncoder {
    #[default]
    Shared,
    Independent,
}

/// How a span prediction is declared unanswerable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoAnswerPolicy {
    /// The joint argmax lands on `(0, 0)`.
    #[default]
    Null,
    /// The verifier probability falls below one half.
    Verifier,
    /// Either of the above.
    Either,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub fusion: FusionMode,
    pub manner: Manner,
    pub pipeline_encoder: PipelineEncoder,
    /// Compression ratio of the ETC compressor.
    pub gamma: f64,
    pub itc: ItcConfig,
    pub verifier: bool,
    pub verifier_weight: f64,
    pub no_answer: NoAnswerPolicy,
    pub span_window: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Translate,
            fusion: FusionMode::None,
            manner: Manner::None,
            pipeline_encoder: PipelineEncoder::Shared,
            gamma: 0.6,
            itc: ItcConfig::default(),
            verifier: true,
            verifier_weight: 0.5,
            no_answer: NoAnswerPolicy::Null,
            span_window: 30,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == TaskKind::Compress {
            bail!(Config, "the compress task trains the compressor itself, not a task model");
        }
        self.fusion.check_task(self.kind.is_encoder_decoder())?;
        match (self.manner, self.fusion) {
            (Manner::None, FusionMode::None) => {}
            (Manner::None, f) => bail!(Config, "fusion {f} needs a compression manner"),
            (m, FusionMode::None) => bail!(Config, "manner {m} needs a fusion mode"),
            _ => {}
        }
        etc::check_gamma(self.gamma)?;
        if self.manner == Manner::ItcJoint {
            self.itc.validate()?;
        }
        if self.span_window == 0 {
            bail!(Config, "span_window must be positive");
        }
        Ok(())
    }
}

/// One task example. Span answers index passage tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TaskSample {
    Translate {
        source: Vec<TokenId>,
        target: Vec<TokenId>,
    },
    Span {
        passage: Vec<TokenId>,
        question: Vec<TokenId>,
        answer: Option<(usize, usize)>,
    },
    Choice {
        passage: Vec<TokenId>,
        question: Vec<TokenId>,
        options: Vec<Vec<TokenId>>,
        label: usize,
    },
}

impl TaskSample {
    pub fn kind(&self) -> TaskKind {
        match self {
            Self::Translate { .. } => TaskKind::Translate,
            Self::Span { .. } => TaskKind::Span,
            Self::Choice { .. } => TaskKind::Choice,
        }
    }

    /// The text a compressor works on: the source or the passage.
    pub fn compression_source(&self) -> &[TokenId] {
        match self {
            Self::Translate { source, .. } => source,
            Self::Span { passage, .. } | Self::Choice { passage, .. } => passage,
        }
    }
}

/// A built classifier input and where the passage landed in it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateInput {
    pub ids: Vec<TokenId>,
    pub passage: Range<usize>,
}

fn check_nonempty(parts: &[(&str, &[TokenId])]) -> Result<()> {
    for (name, p) in parts {
        if p.is_empty() {
            bail!(Contract, "empty {name}");
        }
    }
    Ok(())
}

/// `[CLS] P [SEP] Q [SEP]`; the passage is cut from the right to fit
/// `max_len`, the question never is.
pub fn build_span_input(p: &[TokenId], q: &[TokenId], max_len: usize) -> Result<TemplateInput> {
    check_nonempty(&[("passage", p), ("question", q)])?;
    let room = max_len.saturating_sub(q.len() + 3);
    if room == 0 {
        bail!(Length, "question of {} tokens leaves no room under max_len {max_len}", q.len());
    }
    let p = &p[..p.len().min(room)];
    let mut ids = Vec::with_capacity(p.len() + q.len() + 3);
    ids.push(CLS);
    ids.extend_from_slice(p);
    ids.push(SEP);
    ids.extend_from_slice(q);
    ids.push(SEP);
    Ok(TemplateInput {
        ids,
        passage: 1..1 + p.len(),
    })
}

/// Inverse of [`build_span_input`] for untruncated inputs.
pub fn parse_span_input(ids: &[TokenId]) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let seps: Vec<usize> = ids.iter().enumerate().filter(|(_, &t)| t == SEP).map(|(i, _)| i).collect();
    if ids.first() != Some(&CLS) || seps.len() != 2 || seps[1] != ids.len() - 1 {
        bail!(Data, "not a span template");
    }
    Ok((ids[1..seps[0]].to_vec(), ids[seps[0] + 1..seps[1]].to_vec()))
}

/// `[CLS] P‖Q [SEP] O [SEP]` with passage-first truncation.
pub fn build_choice_input(p: &[TokenId], q: &[TokenId], o: &[TokenId], max_len: usize) -> Result<TemplateInput> {
    check_nonempty(&[("passage", p), ("question", q), ("option", o)])?;
    let room = max_len.saturating_sub(q.len() + o.len() + 3);
    if room == 0 {
        bail!(Length, "question and option leave no room under max_len {max_len}");
    }
    let p = &p[..p.len().min(room)];
    let mut ids = Vec::with_capacity(p.len() + q.len() + o.len() + 3);
    ids.push(CLS);
    ids.extend_from_slice(p);
    ids.extend_from_slice(q);
    ids.push(SEP);
    ids.extend_from_slice(o);
    ids.push(SEP);
    Ok(TemplateInput {
        ids,
        passage: 1..1 + p.len(),
    })
}

/// Inverse of [`build_choice_input`]; `q_len` separates P from Q.
pub fn parse_choice_input(ids: &[TokenId], q_len: usize) -> Result<(Vec<TokenId>, Vec<TokenId>, Vec<TokenId>)> {
    let seps: Vec<usize> = ids.iter().enumerate().filter(|(_, &t)| t == SEP).map(|(i, _)| i).collect();
    if ids.first() != Some(&CLS) || seps.len() != 2 || seps[1] != ids.len() - 1 || seps[0] < 1 + q_len {
        bail!(Data, "not a choice template");
    }
    let pq = &ids[1..seps[0]];
    let split = pq.len() - q_len;
    Ok((pq[..split].to_vec(), pq[split..].to_vec(), ids[seps[0] + 1..seps[1]].to_vec()))
}

/// Stacks per-segment column scores into a zero-padded `B × max_len`
/// matrix and the matching validity mask.
fn segments_to_rows(g: &mut Graph, col: Var, segs: &[Range<usize>]) -> Result<(Var, usize)> {
    let width = segs.iter().map(Range::len).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(segs.len());
    for seg in segs {
        let s = g.slice_rows(col, seg.clone())?;
        let mut r = g.transpose(s)?;
        if seg.len() < width {
            let pad = g.constant(Tensor::zeros(&[1, width - seg.len()]))?;
            r = g.concat_cols(&[r, pad])?;
        }
        rows.push(r);
    }
    Ok((g.concat_rows(&rows)?, width))
}

/// Probabilities of a masked row softmax, as nested vectors.
fn masked_probs(logits: &Tensor, mask: &[bool]) -> Vec<Vec<f64>> {
    let c = logits.cols();
    (0..logits.rows())
        .map(|i| {
            let mut row = logits.row(i).to_vec();
            crate::autodiff::softmax_in_place(&mut row, Some(&mask[i * c..(i + 1) * c]));
            row
        })
        .collect()
}

/// Best `(s, e)` with `s ≤ e < s + window` under `log p_s + log p_e`;
/// ties go to the earliest pair.
pub fn best_span(start: &[f64], end: &[f64], window: usize) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for s in 0..start.len() {
        if start[s] <= 0.0 {
            continue;
        }
        for e in s..end.len().min(s + window) {
            if end[e] <= 0.0 {
                continue;
            }
            let score = start[s].ln() + end[e].ln();
            if score > best_score {
                best_score = score;
                best = (s, e);
            }
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct SpanHeads {
    pub start: Linear,
    pub end: Linear,
}

#[derive(Clone, Debug)]
pub struct ChoiceHead {
    pub hidden: Linear,
    pub out: Linear,
}

/// Pointer distributions per input (over template positions) and verifier
/// probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanOutput {
    pub start: Vec<Vec<f64>>,
    pub end: Vec<Vec<f64>>,
    pub answerable: Option<Vec<f64>>,
    pub inputs: Vec<TemplateInput>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prediction {
    Tokens(Vec<TokenId>),
    /// Passage positions; `None` means unanswerable.
    Span(Option<(usize, usize)>),
    Choice(usize),
}

/// Source-side states ready for a head.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub enc: EncoderState,
    /// `H_x`, or `H_x′` under encoder-side fusion.
    pub hidden: Var,
    /// Memory for the decoder's extra inter-attention.
    pub aux: Option<(Var, RowLayout)>,
    pub itc: Option<ItcOutput>,
}

/// Compressed tokens or compressor states for a batch, one entry per sample.
#[derive(Clone, Copy, Debug)]
pub enum Compressed<'a> {
    None,
    Tokens(&'a [Vec<TokenId>]),
}

#[derive(Clone, Debug)]
pub struct TaskModel {
    pub cfg: TaskConfig,
    pub model: ModelConfig,
    pub embed: Embedding,
    pub encoder: Encoder,
    pub comp_encoder: Option<Encoder>,
    pub enc_fusion: Option<EncoderFusion>,
    pub decoder: Option<Decoder>,
    pub head: Option<OutputHead>,
    pub span: Option<SpanHeads>,
    pub verifier: Option<Linear>,
    pub choice: Option<ChoiceHead>,
    pub itc: Option<ItcModule>,
    /// ETC compressor (parameters under `etc.`).
    pub etc: Option<Seq2Seq>,
}

/// Parameter-name prefix of the ETC compressor inside a task store.
pub const ETC_PREFIX: &str = "etc";
pub const ITC_PREFIX: &str = "itc";

impl TaskModel {
    /// Builds every parameter under `task.*` (plus `etc.*` / `itc.*` for the
    /// compression manner) into `store`.
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &TaskConfig, model: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        let d = model.d_model;
        let embed = Embedding::new(store, "task.embed", model, rng)?;
        let encoder = Encoder::new(store, "task.encoder", model, rng)?;
        let comp_encoder = if cfg.manner == Manner::EtcPipeline && cfg.pipeline_encoder == PipelineEncoder::Independent {
            Some(Encoder::new(store, "task.comp_encoder", model, rng)?)
        } else {
            None
        };
        let enc_fusion = if cfg.fusion.encoder_side() {
            Some(EncoderFusion::new(store, "task.bef", model, rng)?)
        } else {
            None
        };
        let (decoder, head) = if cfg.kind.is_encoder_decoder() {
            (
                Some(Decoder::new(store, "task.decoder", model, cfg.fusion.decoder_side(), rng)?),
                Some(OutputHead::new(store, "task.head", model, rng)?),
            )
        } else {
            (None, None)
        };
        let (span, verifier) = if cfg.kind == TaskKind::Span {
            let heads = SpanHeads {
                start: Linear::new(store, "task.span.start", d, 1, true, rng)?,
                end: Linear::new(store, "task.span.end", d, 1, true, rng)?,
            };
            let verifier = if cfg.verifier {
                Some(Linear::new(store, "task.verifier", d, 1, true, rng)?)
            } else {
                None
            };
            (Some(heads), verifier)
        } else {
            (None, None)
        };
        let choice = if cfg.kind == TaskKind::Choice {
            Some(ChoiceHead {
                hidden: Linear::new(store, "task.choice.hidden", d, d, true, rng)?,
                out: Linear::new(store, "task.choice.out", d, 1, true, rng)?,
            })
        } else {
            None
        };
        let itc = if cfg.manner == Manner::ItcJoint {
            Some(ItcModule::new(store, ITC_PREFIX, &cfg.itc, model, true, rng)?)
        } else {
            None
        };
        let etc = if matches!(cfg.manner, Manner::EtcPipeline | Manner::EtcJoint) {
            Some(Seq2Seq::new(store, ETC_PREFIX, model, false, rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            model: model.clone(),
            embed,
            encoder,
            comp_encoder,
            enc_fusion,
            decoder,
            head,
            span,
            verifier,
            choice,
            itc,
            etc,
        })
    }

    /// Parameters trained by the task objective. The pipeline compressor is
    /// frozen; joint manners train everything.
    pub fn task_params(&self, store: &ParamStore) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, name, _)| self.cfg.manner != Manner::EtcPipeline || !name.starts_with("etc."))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Makes every fusion sub-layer an exact identity: fusion FFN outputs
    /// zeroed, context gates fully open.
    pub fn zero_fusion(&self, store: &mut ParamStore) {
        if let Some(f) = &self.enc_fusion {
            f.zero_output(store);
        }
        if let Some(dec) = &self.decoder {
            for layer in &dec.layers {
                if let Some(f) = &layer.fusion {
                    f.zero_output(store);
                }
            }
        }
    }

    /// Encoder inputs, one per encoded segment, with the index of the sample
    /// each segment belongs to.
    fn inputs(&self, samples: &[TaskSample]) -> Result<(Vec<Vec<TokenId>>, Vec<usize>, Vec<TemplateInput>)> {
        let mut seqs = Vec::new();
        let mut owner = Vec::new();
        let mut templates = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            if s.kind() != self.cfg.kind {
                bail!(Contract, "{} sample given to a {} model", s.kind(), self.cfg.kind);
            }
            match s {
                TaskSample::Translate { source, .. } => {
                    seqs.push(source.clone());
                    owner.push(i);
                }
                TaskSample::Span { passage, question, .. } => {
                    let t = build_span_input(passage, question, self.model.max_len)?;
                    seqs.push(t.ids.clone());
                    templates.push(t);
                    owner.push(i);
                }
                TaskSample::Choice {
                    passage,
                    question,
                    options,
                    ..
                } => {
                    if options.len() < 2 {
                        bail!(Contract, "choice needs at least 2 options, got {}", options.len());
                    }
                    for o in options {
                        let t = build_choice_input(passage, question, o, self.model.max_len)?;
                        seqs.push(t.ids.clone());
                        templates.push(t);
                        owner.push(i);
                    }
                }
            }
        }
        Ok((seqs, owner, templates))
    }

    /// Compressed memory `H_c` with one segment per encoded segment.
    fn compressed_memory(
        &self,
        g: &mut Graph,
        enc: &EncoderState,
        samples: &[TaskSample],
        owner: &[usize],
        compressed: Compressed,
    ) -> Result<Option<(Var, RowLayout, Option<ItcOutput>)>> {
        match self.cfg.manner {
            Manner::None => Ok(None),
            Manner::EtcPipeline => {
                let Compressed::Tokens(tokens) = compressed else {
                    bail!(Contract, "pipeline manner needs compressed tokens");
                };
                if tokens.len() != samples.len() {
                    bail!(Dimension, "{} compressions for {} samples", tokens.len(), samples.len());
                }
                let seqs: Vec<Vec<TokenId>> = owner.iter().map(|&i| tokens[i].clone()).collect();
                let encoder = self.comp_encoder.as_ref().unwrap_or(&self.encoder);
                let st = encoder.encode(g, &self.embed, &seqs, None)?;
                Ok(Some((st.hidden, st.layout, None)))
            }
            Manner::EtcJoint => {
                let etc = self.etc.as_ref().expect("etc compressor");
                let sources: Vec<Vec<TokenId>> = owner.iter().map(|&i| samples[i].compression_source().to_vec()).collect();
                let jc = etc::joint_greedy_compress(etc, g, &sources, self.cfg.gamma)?;
                Ok(Some((jc.hidden, jc.layout, None)))
            }
            Manner::ItcJoint => {
                let itc = self.itc.as_ref().expect("itc module");
                let out = itc.forward(g, enc)?;
                Ok(Some((out.hidden, out.layout.clone(), Some(out))))
            }
        }
    }

    pub fn encode(&self, g: &mut Graph, samples: &[TaskSample], compressed: Compressed) -> Result<(Encoded, Vec<usize>, Vec<TemplateInput>)> {
        if samples.is_empty() {
            bail!(Contract, "empty batch");
        }
        let (seqs, owner, templates) = self.inputs(samples)?;
        let enc = self.encoder.encode(g, &self.embed, &seqs, None)?;
        let hc = self.compressed_memory(g, &enc, samples, &owner, compressed)?;
        let mut hidden = enc.hidden;
        let mut aux = None;
        let mut itc = None;
        if let Some((hc, hc_layout, itc_out)) = hc {
            itc = itc_out;
            if let Some(f) = &self.enc_fusion {
                hidden = f.fuse(
                    g,
                    enc.hidden,
                    &enc.layout,
                    Memory {
                        hidden: hc,
                        layout: &hc_layout,
                    },
                )?;
            }
            aux = match self.cfg.fusion {
                FusionMode::Bdf => Some((hc, hc_layout)),
                FusionMode::Bbf => Some((hidden, enc.layout.clone())),
                _ => None,
            };
        }
        Ok((Encoded { enc, hidden, aux, itc }, owner, templates))
    }

    /// Decoder memory `H_x` (raw under BBF, fused under BEF).
    fn decoder_memory(&self, e: &Encoded) -> Var {
        if self.cfg.fusion == FusionMode::Bbf {
            e.enc.hidden
        } else {
            e.hidden
        }
    }

    fn decoder_parts(&self) -> Result<(&Decoder, &OutputHead)> {
        match (&self.decoder, &self.head) {
            (Some(d), Some(h)) => Ok((d, h)),
            _ => bail!(Contract, "{} model has no decoder", self.cfg.kind),
        }
    }

    /// Decoder logits for stacked `prefixes` (one per sample).
    fn decode_logits(&self, g: &mut Graph, e: &Encoded, prefixes: &[Vec<TokenId>]) -> Result<(Var, RowLayout)> {
        let (decoder, head) = self.decoder_parts()?;
        let (y, layout) = self.embed.forward(g, prefixes, false)?;
        let memory = Memory {
            hidden: self.decoder_memory(e),
            layout: &e.enc.layout,
        };
        let aux = e.aux.as_ref().map(|(v, l)| Memory { hidden: *v, layout: l });
        let out = decoder.forward(g, y, &layout, memory, aux, false)?;
        Ok((head.logits(g, out.hidden)?, layout))
    }

    fn span_logits(&self, g: &mut Graph, e: &Encoded, templates: &[TemplateInput]) -> Result<(Var, Var, Vec<bool>, usize)> {
        let heads = self.span.as_ref().expect("span heads");
        let s = heads.start.forward(g, e.hidden)?;
        let en = heads.end.forward(g, e.hidden)?;
        let (s, width) = segments_to_rows(g, s, &e.enc.layout.segs)?;
        let (en, _) = segments_to_rows(g, en, &e.enc.layout.segs)?;
        let mut mask = vec![false; templates.len() * width];
        for (i, t) in templates.iter().enumerate() {
            mask[i * width] = true;
            for p in t.passage.clone() {
                mask[i * width + p] = true;
            }
        }
        Ok((s, en, mask, width))
    }

    fn cls_rows(&self, g: &mut Graph, e: &Encoded) -> Result<Var> {
        let rows: Vec<usize> = e.enc.layout.segs.iter().map(|s| s.start).collect();
        g.select_rows(e.hidden, &rows)
    }

    fn choice_logits(&self, g: &mut Graph, e: &Encoded, owner: &[usize], n: usize) -> Result<(Var, Vec<bool>, usize)> {
        let head = self.choice.as_ref().expect("choice head");
        let cls = self.cls_rows(g, e)?;
        let h = head.hidden.forward(g, cls)?;
        let h = g.gelu(h)?;
        let scores = head.out.forward(g, h)?;
        let mut groups: Vec<Range<usize>> = Vec::with_capacity(n);
        for (row, &o) in owner.iter().enumerate() {
            if o == groups.len() {
                groups.push(row..row + 1);
            } else {
                groups[o].end = row + 1;
            }
        }
        let (logits, width) = segments_to_rows(g, scores, &groups)?;
        let mut mask = vec![false; n * width];
        for (i, grp) in groups.iter().enumerate() {
            mask[i * width..i * width + grp.len()].iter_mut().for_each(|m| *m = true);
        }
        Ok((logits, mask, width))
    }

    /// Training loss of a batch.
    pub fn loss(&self, g: &mut Graph, samples: &[TaskSample], compressed: Compressed) -> Result<Var> {
        let (e, owner, templates) = self.encode(g, samples, compressed)?;
        match self.cfg.kind {
            TaskKind::Translate => {
                let targets: Vec<Vec<TokenId>> = samples
                    .iter()
                    .map(|s| match s {
                        TaskSample::Translate { target, .. } => target.clone(),
                        _ => unreachable!(),
                    })
                    .collect();
                let (inputs, labels) = shift_targets(&targets, EOS);
                let (logits, _) = self.decode_logits(g, &e, &inputs)?;
                g.cross_entropy(logits, &labels, None)
            }
            TaskKind::Span => {
                let (s, en, mask, width) = self.span_logits(g, &e, &templates)?;
                let mut starts = Vec::new();
                let mut ends = Vec::new();
                let mut answerable = Vec::new();
                for (sample, t) in samples.iter().zip(&templates) {
                    let TaskSample::Span { answer, .. } = sample else { unreachable!() };
                    let pos = answer
                        .filter(|&(_, e)| e < t.passage.len())
                        .map(|(s, e)| (s + t.passage.start, e + t.passage.start));
                    let (a, b) = pos.unwrap_or((0, 0));
                    starts.push(Some(a));
                    ends.push(Some(b));
                    answerable.push(if pos.is_some() { 1.0 } else { 0.0 });
                }
                debug_assert!(width > 0);
                let ls = g.cross_entropy(s, &starts, Some(&mask))?;
                let le = g.cross_entropy(en, &ends, Some(&mask))?;
                let sum = g.add(ls, le)?;
                let mut loss = g.scale(sum, 0.5)?;
                if let Some(v) = &self.verifier {
                    let cls = self.cls_rows(g, &e)?;
                    let z = v.forward(g, cls)?;
                    let bce = g.bce_with_logits(z, &answerable, self.cfg.verifier_weight)?;
                    loss = g.add(loss, bce)?;
                }
                Ok(loss)
            }
            TaskKind::Choice => {
                let (logits, mask, _) = self.choice_logits(g, &e, &owner, samples.len())?;
                let labels: Vec<Option<usize>> = samples
                    .iter()
                    .map(|s| match s {
                        TaskSample::Choice { label, .. } => Some(*label),
                        _ => unreachable!(),
                    })
                    .collect();
                g.cross_entropy(logits, &labels, Some(&mask))
            }
            TaskKind::Compress => bail!(Config, "compress is not a task head"),
        }
    }

    /// Raw head output of a batch: teacher-forced decoder logits
    /// (translation), start and end logits side by side (span), or option
    /// logits (choice).
    pub fn outputs(&self, params: &ParamStore, samples: &[TaskSample], compressed: Compressed) -> Result<Tensor> {
        let mut g = Graph::inference(params);
        let (e, owner, templates) = self.encode(&mut g, samples, compressed)?;
        let out = match self.cfg.kind {
            TaskKind::Translate => {
                let targets: Vec<Vec<TokenId>> = samples
                    .iter()
                    .map(|s| match s {
                        TaskSample::Translate { target, .. } => target.clone(),
                        _ => unreachable!(),
                    })
                    .collect();
                let (inputs, _) = shift_targets(&targets, EOS);
                self.decode_logits(&mut g, &e, &inputs)?.0
            }
            TaskKind::Span => {
                let (s, en, _, _) = self.span_logits(&mut g, &e, &templates)?;
                g.concat_cols(&[s, en])?
            }
            TaskKind::Choice => self.choice_logits(&mut g, &e, &owner, samples.len())?.0,
            TaskKind::Compress => bail!(Config, "compress is not a task head"),
        };
        Ok(g.value(out).clone())
    }

    /// Start/end distributions and verifier probabilities.
    pub fn span_predict(&self, params: &ParamStore, samples: &[TaskSample], compressed: Compressed) -> Result<SpanOutput> {
        let mut g = Graph::inference(params);
        let (e, _, templates) = self.encode(&mut g, samples, compressed)?;
        let (s, en, mask, _) = self.span_logits(&mut g, &e, &templates)?;
        let start = masked_probs(g.value(s), &mask);
        let end = masked_probs(g.value(en), &mask);
        let answerable = match &self.verifier {
            Some(v) => {
                let cls = self.cls_rows(&mut g, &e)?;
                let z = v.forward(&mut g, cls)?;
                let p = g.sigmoid(z)?;
                Some(g.value(p).data().to_vec())
            }
            None => None,
        };
        Ok(SpanOutput {
            start,
            end,
            answerable,
            inputs: templates,
        })
    }

    /// Option distributions, one per sample.
    pub fn choice_predict(&self, params: &ParamStore, samples: &[TaskSample], compressed: Compressed) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference(params);
        let (e, owner, _) = self.encode(&mut g, samples, compressed)?;
        let (logits, mask, _) = self.choice_logits(&mut g, &e, &owner, samples.len())?;
        let counts: Vec<usize> = samples
            .iter()
            .map(|s| match s {
                TaskSample::Choice { options, .. } => options.len(),
                _ => 0,
            })
            .collect();
        Ok(masked_probs(g.value(logits), &mask)
            .into_iter()
            .zip(counts)
            .map(|(mut row, n)| {
                row.truncate(n);
                row
            })
            .collect())
    }

    /// Greedy batch translation; at most `max_out(|x|)` tokens per output.
    pub fn translate_greedy(&self, params: &ParamStore, samples: &[TaskSample], compressed: Compressed) -> Result<Vec<Vec<TokenId>>> {
        let mut g = Graph::inference(params);
        let (e, _, _) = self.encode(&mut g, samples, compressed)?;
        let limits: Vec<usize> = samples.iter().map(|s| self.max_out(s.compression_source().len())).collect();
        let steps = limits.iter().copied().max().unwrap_or(0);
        let mut prefixes: Vec<Vec<TokenId>> = vec![vec![BOS]; samples.len()];
        let mut done = vec![false; samples.len()];
        for _ in 0..steps {
            if done.iter().all(|&d| d) {
                break;
            }
            let (logits, layout) = self.decode_logits(&mut g, &e, &prefixes)?;
            let lv = g.value(logits).clone();
            for (i, seg) in layout.segs.iter().enumerate() {
                if done[i] {
                    continue;
                }
                let row = lv.row(seg.end - 1);
                let next = row
                    .iter()
                    .enumerate()
                    .filter(|(t, _)| *t as TokenId == EOS || emittable(*t as TokenId))
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(t, _)| t as TokenId)
                    .expect("emittable tokens");
                if next == EOS {
                    done[i] = true;
                } else {
                    prefixes[i].push(next);
                    if prefixes[i].len() > limits[i] {
                        done[i] = true;
                    }
                }
            }
        }
        Ok(prefixes.into_iter().map(|p| p[1..].to_vec()).collect())
    }

    /// Beam translation of one sample with α length normalization and no
    /// coverage term.
    pub fn translate_beam(&self, params: &ParamStore, sample: &TaskSample, compressed: Option<&[TokenId]>, beam: &BeamConfig) -> Result<Vec<TokenId>> {
        let owned;
        let comp = match compressed {
            Some(c) => {
                owned = vec![c.to_vec()];
                Compressed::Tokens(&owned)
            }
            None => Compressed::None,
        };
        let mut g = Graph::inference(params);
        let (e, _, _) = self.encode(&mut g, std::slice::from_ref(sample), comp)?;
        let aux = e.aux.as_ref().map(|(v, _)| g.value(*v).clone());
        let step = TranslateStep {
            model: self,
            params,
            memory: g.value(self.decoder_memory(&e)).clone(),
            aux,
        };
        let cfg = BeamConfig {
            beta: 0.0,
            gamma: 1.0,
            ..beam.clone()
        };
        let cap = self.max_out(sample.compression_source().len());
        Ok(etc::beam_search_with_cap(&step, &cfg, cap)?.tokens)
    }

    fn max_out(&self, n: usize) -> usize {
        (2 * n + 2).min(self.model.max_len - 1)
    }

    /// Predictions for any task kind (greedy decoding for translation).
    pub fn predict(&self, params: &ParamStore, samples: &[TaskSample], compressed: Compressed) -> Result<Vec<Prediction>> {
        Ok(match self.cfg.kind {
            TaskKind::Translate => self
                .translate_greedy(params, samples, compressed)?
                .into_iter()
                .map(Prediction::Tokens)
                .collect(),
            TaskKind::Span => {
                let out = self.span_predict(params, samples, compressed)?;
                (0..samples.len())
                    .map(|i| {
                        let t = &out.inputs[i];
                        let (s, e) = best_span(&out.start[i], &out.end[i], self.cfg.span_window);
                        let null = s == 0;
                        let rejected = out.answerable.as_ref().is_some_and(|a| a[i] < 0.5);
                        let unanswerable = match self.cfg.no_answer {
                            NoAnswerPolicy::Null => null,
                            NoAnswerPolicy::Verifier if out.answerable.is_some() => rejected || null,
                            NoAnswerPolicy::Verifier => null,
                            NoAnswerPolicy::Either => null || rejected,
                        };
                        Prediction::Span(if unanswerable { None } else { Some((s - t.passage.start, e - t.passage.start)) })
                    })
                    .collect()
            }
            TaskKind::Choice => self
                .choice_predict(params, samples, compressed)?
                .into_iter()
                .map(|row| {
                    let best = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                        .map_or(0, |(i, _)| i);
                    Prediction::Choice(best)
                })
                .collect(),
            TaskKind::Compress => bail!(Config, "compress is not a task head"),
        })
    }
}

/// [`StepModel`] over a translation model bound to one encoded source.
struct TranslateStep<'a> {
    model: &'a TaskModel,
    params: &'a ParamStore,
    memory: Tensor,
    aux: Option<Tensor>,
}

impl StepModel for TranslateStep<'_> {
    fn source_len(&self) -> usize {
        self.memory.rows()
    }

    fn step(&self, prefixes: &[Vec<TokenId>]) -> Result<Vec<StepOutput>> {
        let (decoder, head) = self.model.decoder_parts()?;
        let mut g = Graph::inference(self.params);
        let mem = g.constant(self.memory.clone())?;
        let layout = RowLayout::from_lengths(&[self.memory.rows()]).repeated(0, prefixes.len());
        let aux = match &self.aux {
            Some(a) => Some((g.constant(a.clone())?, RowLayout::from_lengths(&[a.rows()]).repeated(0, prefixes.len()))),
            None => None,
        };
        let inputs: Vec<Vec<TokenId>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
            .collect();
        let (y, q_layout) = self.model.embed.forward(&mut g, &inputs, false)?;
        let out = decoder.forward(
            &mut g,
            y,
            &q_layout,
            Memory {
                hidden: mem,
                layout: &layout,
            },
            aux.as_ref().map(|(v, l)| Memory { hidden: *v, layout: l }),
            false,
        )?;
        let logits = head.logits(&mut g, out.hidden)?;
        let probs = g.attention_probs(out.cross_attn).expect("attention node");
        let lv = g.value(logits);
        Ok(q_layout
            .segs
            .iter()
            .enumerate()
            .map(|(s, seg)| StepOutput {
                logprobs: etc::log_softmax(lv.row(seg.end - 1)),
                attention: probs.mean_row(s, seg.len() - 1),
            })
            .collect())
    }
}

/// Positional token accuracy over `max(|pred|, |ref|)` positions.
pub fn token_accuracy(pred: &[TokenId], reference: &[TokenId]) -> f64 {
    let n = pred.len().max(reference.len());
    if n == 0 {
        return 1.0;
    }
    let hits = pred.iter().zip(reference).filter(|(a, b)| a == b).count();
    hits as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn span_template_shape() {
        let t = build_span_input(&[10, 11], &[12], 64).unwrap();
        assert_eq!(t.ids, vec![CLS, 10, 11, SEP, 12, SEP]);
        assert_eq!(t.passage, 1..3);
        assert_eq!(parse_span_input(&t.ids).unwrap(), (vec![10, 11], vec![12]));
        let t = build_span_input(&[10, 11, 12, 13], &[20], 6).unwrap();
        assert_eq!(t.ids, vec![CLS, 10, 11, SEP, 20, SEP]);
        assert!(build_span_input(&[10], &[20, 21, 22], 6).is_err());
        assert!(build_span_input(&[], &[20], 6).is_err());
    }

    #[test]
    fn choice_template_shape() {
        let t = build_choice_input(&[10, 11], &[12], &[13, 14], 64).unwrap();
        assert_eq!(t.ids, vec![CLS, 10, 11, 12, SEP, 13, 14, SEP]);
        assert_eq!(parse_choice_input(&t.ids, 1).unwrap(), (vec![10, 11], vec![12], vec![13, 14]));
        let t = build_choice_input(&[10, 11, 12], &[20], &[30], 6).unwrap();
        assert_eq!(t.ids, vec![CLS, 10, 20, SEP, 30, SEP]);
    }

    #[test]
    fn best_span_respects_order_and_window() {
        let start = [0.1, 0.1, 0.7, 0.1];
        let end = [0.1, 0.8, 0.05, 0.05];
        let (s, e) = best_span(&start, &end, 30);
        assert!(s <= e);
        assert_eq!(best_span(&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], 2), (1, 2));
        assert_eq!(best_span(&[0.0, 1.0, 0.0], &[0.0, 0.4, 0.6], 1), (1, 1));
    }

    #[test]
    fn config_compatibility() {
        let mut cfg = TaskConfig {
            kind: TaskKind::Span,
            fusion: FusionMode::Bdf,
            manner: Manner::ItcJoint,
            ..TaskConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.fusion = FusionMode::Bef;
        assert!(cfg.validate().is_ok());
        cfg.manner = Manner::None;
        assert!(cfg.validate().is_err());
        for m in [Manner::None, Manner::EtcPipeline, Manner::EtcJoint, Manner::ItcJoint] {
            assert_eq!(m.to_string().parse::<Manner>().unwrap(), m);
        }
    }

    #[test]
    fn choice_needs_two_options() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = TaskConfig {
            kind: TaskKind::Choice,
            ..TaskConfig::default()
        };
        let model = ModelConfig::with_dims(1, 8, 16, 2, 20);
        let mut store = ParamStore::new();
        let m = TaskModel::new(&mut store, &cfg, &model, &mut rng).unwrap();
        let one = TaskSample::Choice {
            passage: vec![10],
            question: vec![11],
            options: vec![vec![12]],
            label: 0,
        };
        assert!(m.choice_predict(&store, &[one], Compressed::None).is_err());
    }

    #[test]
    fn token_accuracy_is_positional() {
        assert_eq!(token_accuracy(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(token_accuracy(&[1, 2], &[1, 2, 3, 4]), 0.5);
        assert_eq!(token_accuracy(&[], &[]), 1.0);
    }
}
