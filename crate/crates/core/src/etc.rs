//! Explicit text compression.
//!
//! A [`Seq2Seq`] compressor is decoded either with a ratio-capped beam search
//! ([`beam_search_compress`], pipeline manner) or with batch greedy decoding
//! whose decoder hidden states feed the downstream model directly
//! ([`joint_greedy_compress`], joint manner).
//!
//! Beam hypotheses are scored with
//!
//! ```text
//! s(x_c, x) = log P(x_c | x) / LenNorm(x_c) + cp(x; x_c)
//! LenNorm(x_c) = (5 + |x_c|)^α / (5 + 1)^α
//! cp(x; x_c)  = β · Σ_i log min(Σ_j p_ij, 1)
//! ```
//!
//! where `p_ij` is the head-averaged last-layer cross-attention of output
//! step `j` on source token `i`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::vocab::{is_structural, TokenId, BOS, EOS, UNK};
use crate::error::{bail, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::transformer::{Memory, RowLayout, Seq2Seq};
use crate::Var;

/// Lower clamp on accumulated attention inside the coverage log.
pub const COVERAGE_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            alpha: 0.5,
            beta: 0.2,
            gamma: 0.6,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            bail!(Config, "beam_size must be at least 1");
        }
        check_gamma(self.gamma)?;
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            bail!(Config, "alpha and beta must be nonnegative");
        }
        Ok(())
    }
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        bail!(Config, "gamma {gamma} outside (0, 1]");
    }
    Ok(())
}

/// `max(1, ceil(γ·n))`. Products within 1e-9 of an integer count as that
/// integer, so `γ = 0.7, n = 10` gives 7 rather than 8.
pub fn compression_cap(n: usize, gamma: f64) -> usize {
    let raw = gamma * n as f64;
    let nearest = raw.round();
    let c = if (raw - nearest).abs() < 1e-9 { nearest } else { raw.ceil() };
    (c as usize).max(1)
}

pub fn len_norm(length: usize, alpha: f64) -> f64 {
    ((5.0 + length as f64) / 6.0).powf(alpha)
}

pub fn coverage_penalty(attn_mass: &[f64], beta: f64) -> f64 {
    if beta == 0.0 {
        return 0.0;
    }
    let s: f64 = attn_mass
        .iter()
        .map(|&m| m.clamp(COVERAGE_FLOOR, 1.0).ln())
        .sum();
    beta * s
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Compressed tokens, without EOS.
    pub tokens: Vec<TokenId>,
    pub logp: f64,
    /// Per-source-token attention summed over generated steps.
    pub attn_mass: Vec<f64>,
    pub finished: bool,
}

impl BeamHypothesis {
    pub fn empty(source_len: usize) -> Self {
        Self {
            tokens: Vec::new(),
            logp: 0.0,
            attn_mass: vec![0.0; source_len],
            finished: false,
        }
    }
}

pub fn hypothesis_score(h: &BeamHypothesis, cfg: &BeamConfig) -> f64 {
    h.logp / len_norm(h.tokens.len().max(1), cfg.alpha) + coverage_penalty(&h.attn_mass, cfg.beta)
}

/// Tokens a compressor may emit besides EOS.
pub fn emittable(id: TokenId) -> bool {
    !is_structural(id) && id != UNK && id != EOS
}

/// Next-token log-probabilities and the cross-attention row of one prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub logprobs: Vec<f64>,
    pub attention: Vec<f64>,
}

/// A decoder bound to one source sequence.
pub trait StepModel {
    fn source_len(&self) -> usize;

    /// One step for every prefix (compressed tokens without BOS).
    fn step(&self, prefixes: &[Vec<TokenId>]) -> Result<Vec<StepOutput>>;
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// [`StepModel`] over a trained [`Seq2Seq`]; the source is encoded once.
pub struct Seq2SeqStep<'a> {
    model: &'a Seq2Seq,
    params: &'a ParamStore,
    memory: Tensor,
}

impl<'a> Seq2SeqStep<'a> {
    pub fn new(model: &'a Seq2Seq, params: &'a ParamStore, source: &[TokenId]) -> Result<Self> {
        let mut g = Graph::inference(params);
        let enc = model.encode(&mut g, &[source.to_vec()], None)?;
        let memory = g.value(enc.hidden).clone();
        Ok(Self { model, params, memory })
    }
}

impl StepModel for Seq2SeqStep<'_> {
    fn source_len(&self) -> usize {
        self.memory.rows()
    }

    fn step(&self, prefixes: &[Vec<TokenId>]) -> Result<Vec<StepOutput>> {
        let mut g = Graph::inference(self.params);
        let mem = g.constant(self.memory.clone())?;
        let layout = RowLayout::from_lengths(&[self.memory.rows()]).repeated(0, prefixes.len());
        let inputs: Vec<Vec<TokenId>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
            .collect();
        let (out, q_layout) = self.model.decode(
            &mut g,
            &inputs,
            Memory {
                hidden: mem,
                layout: &layout,
            },
            None,
            false,
        )?;
        let logits = self.model.head.logits(&mut g, out.hidden)?;
        let probs = g.attention_probs(out.cross_attn).expect("attention node");
        let lv = g.value(logits);
        Ok(q_layout
            .segs
            .iter()
            .enumerate()
            .map(|(s, seg)| {
                let last = seg.len() - 1;
                StepOutput {
                    logprobs: log_softmax(lv.row(seg.end - 1)),
                    attention: probs.mean_row(s, last),
                }
            })
            .collect())
    }
}

fn by_score_desc(a: &(f64, BeamHypothesis), b: &(f64, BeamHypothesis)) -> Ordering {
    b.0.total_cmp(&a.0)
}

/// Ratio-capped beam search. Hypotheses complete on EOS (allowed from the
/// second step on) or when they reach `compression_cap(|x|, γ)` tokens; the
/// best completed hypothesis by [`hypothesis_score`] is returned.
pub fn beam_search<M: StepModel>(model: &M, cfg: &BeamConfig) -> Result<BeamHypothesis> {
    beam_search_with_cap(model, cfg, compression_cap(model.source_len(), cfg.gamma))
}

/// [`beam_search`] with an explicit length cap instead of the ratio cap.
pub fn beam_search_with_cap<M: StepModel>(model: &M, cfg: &BeamConfig, cap: usize) -> Result<BeamHypothesis> {
    cfg.validate()?;
    let n = model.source_len();
    if n == 0 || cap == 0 {
        bail!(Contract, "cannot decode an empty sequence");
    }
    let mut live = vec![BeamHypothesis::empty(n)];
    let mut done: Vec<(f64, BeamHypothesis)> = Vec::new();
    for _ in 0..cap {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<TokenId>> = live.iter().map(|h| h.tokens.clone()).collect();
        let outs = model.step(&prefixes)?;
        let mut cands: Vec<(f64, BeamHypothesis)> = Vec::new();
        for (h, out) in live.iter().zip(&outs) {
            if out.attention.len() != n {
                bail!(Dimension, "attention row of {} for source of {n}", out.attention.len());
            }
            for (tok, &lp) in out.logprobs.iter().enumerate() {
                let tok = tok as TokenId;
                let logp = h.logp + lp;
                let next = if tok == EOS {
                    if h.tokens.is_empty() {
                        continue;
                    }
                    BeamHypothesis {
                        tokens: h.tokens.clone(),
                        logp,
                        attn_mass: h.attn_mass.clone(),
                        finished: true,
                    }
                } else if emittable(tok) {
                    let mut tokens = h.tokens.clone();
                    tokens.push(tok);
                    let attn_mass = h.attn_mass.iter().zip(&out.attention).map(|(m, a)| m + a).collect();
                    let finished = tokens.len() >= cap;
                    BeamHypothesis {
                        tokens,
                        logp,
                        attn_mass,
                        finished,
                    }
                } else {
                    continue;
                };
                cands.push((hypothesis_score(&next, cfg), next));
            }
        }
        cands.sort_by(by_score_desc);
        cands.truncate(cfg.beam_size);
        live.clear();
        for (s, h) in cands {
            if h.finished {
                done.push((s, h));
            } else {
                live.push(h);
            }
        }
    }
    done.sort_by(by_score_desc);
    match done.into_iter().next() {
        Some((_, h)) => Ok(h),
        None => bail!(Contract, "beam search produced no hypothesis"),
    }
}

pub fn beam_search_compress(
    model: &Seq2Seq,
    params: &ParamStore,
    x: &[TokenId],
    cfg: &BeamConfig,
) -> Result<Vec<TokenId>> {
    if x.is_empty() {
        bail!(Contract, "cannot compress an empty sequence");
    }
    let step = Seq2SeqStep::new(model, params, x)?;
    Ok(beam_search(&step, cfg)?.tokens)
}

/// Compresses every sequence independently (in parallel when enabled).
pub fn compress_batch(
    model: &Seq2Seq,
    params: &ParamStore,
    xs: &[Vec<TokenId>],
    cfg: &BeamConfig,
) -> Result<Vec<Vec<TokenId>>> {
    crate::exec::map(xs, |x| beam_search_compress(model, params, x, cfg))
        .into_iter()
        .collect()
}

/// Output of [`joint_greedy_compress`].
#[derive(Clone, Debug)]
pub struct JointCompression {
    /// Decoder hidden states, `cap_max` rows per sequence; rows past a
    /// sequence's own cap are zero.
    pub hidden: Var,
    /// One segment per sequence; rows past the cap are marked invalid.
    pub layout: RowLayout,
    pub tokens: Vec<Vec<TokenId>>,
    pub caps: Vec<usize>,
}

/// Greedy batch decoding to `compression_cap(max |x|, γ)` steps. The
/// returned states come from a teacher-forced pass over the greedy tokens in
/// `g`, with token embeddings and cross-attention contexts detached, so
/// gradient reaches the decoder self-attention path only.
pub fn joint_greedy_compress(
    model: &Seq2Seq,
    g: &mut Graph,
    sources: &[Vec<TokenId>],
    gamma: f64,
) -> Result<JointCompression> {
    check_gamma(gamma)?;
    if sources.is_empty() || sources.iter().any(Vec::is_empty) {
        bail!(Contract, "joint compression needs nonempty sequences");
    }
    let caps: Vec<usize> = sources.iter().map(|x| compression_cap(x.len(), gamma)).collect();
    let max_len = sources.iter().map(Vec::len).max().unwrap_or(0);
    let cap_max = compression_cap(max_len, gamma);

    let params = g.params();
    let mut ig = Graph::inference(params);
    let enc = model.encode(&mut ig, sources, None)?;
    let memory = ig.value(enc.hidden).clone();
    let mut prefixes: Vec<Vec<TokenId>> = vec![vec![BOS]; sources.len()];
    let mut tokens: Vec<Vec<TokenId>> = vec![Vec::new(); sources.len()];
    for _ in 0..cap_max {
        let mut sg = Graph::inference(params);
        let mem = sg.constant(memory.clone())?;
        let (out, layout) = model.decode(
            &mut sg,
            &prefixes,
            Memory {
                hidden: mem,
                layout: &enc.layout,
            },
            None,
            false,
        )?;
        let logits = model.head.logits(&mut sg, out.hidden)?;
        let lv = sg.value(logits);
        for (i, seg) in layout.segs.iter().enumerate() {
            let row = lv.row(seg.end - 1);
            let best = row
                .iter()
                .enumerate()
                .filter(|(t, _)| emittable(*t as TokenId))
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(t, _)| t as TokenId)
                .expect("vocabulary has emittable tokens");
            prefixes[i].push(best);
            tokens[i].push(best);
        }
    }

    let mem = g.constant(memory)?;
    let inputs: Vec<Vec<TokenId>> = prefixes.iter().map(|p| p[..cap_max].to_vec()).collect();
    let (out, mut layout) = model.decode(
        g,
        &inputs,
        Memory {
            hidden: mem,
            layout: &enc.layout,
        },
        None,
        true,
    )?;
    let mut factors = Vec::with_capacity(layout.rows());
    for &c in &caps {
        for j in 0..cap_max {
            factors.push(if j < c { 1.0 } else { 0.0 });
        }
    }
    layout.valid = factors.iter().map(|&f| f == 1.0).collect();
    let hidden = g.scale_rows(out.hidden, &factors)?;
    for (t, &c) in tokens.iter_mut().zip(&caps) {
        t.truncate(c);
    }
    Ok(JointCompression {
        hidden,
        layout,
        tokens,
        caps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    AllText,
    F8w,
    RandSample,
}

impl BaselineMode {
    pub const ALL: [BaselineMode; 3] = [Self::AllText, Self::F8w, Self::RandSample];
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AllText => "alltext",
            Self::F8w => "f8w",
            Self::RandSample => "randsample",
        })
    }
}

impl FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "alltext" => Self::AllText,
            "f8w" => Self::F8w,
            "randsample" => Self::RandSample,
            other => bail!(Config, "unknown baseline `{other}`"),
        })
    }
}

/// Reference compressions: the whole input, its first eight words, or
/// `compression_cap(|x|, γ)` uniformly sampled words in input order.
pub fn baseline_compress<R: Rng>(x: &[TokenId], mode: BaselineMode, gamma: f64, rng: &mut R) -> Result<Vec<TokenId>> {
    if x.is_empty() {
        bail!(Contract, "cannot compress an empty sequence");
    }
    Ok(match mode {
        BaselineMode::AllText => x.to_vec(),
        BaselineMode::F8w => x[..x.len().min(8)].to_vec(),
        BaselineMode::RandSample => {
            check_gamma(gamma)?;
            let k = compression_cap(x.len(), gamma).min(x.len());
            let mut idx = index::sample(rng, x.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| x[i]).collect()
        }
    })
}
