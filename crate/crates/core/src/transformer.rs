//! Self-attention encoder, causal decoder and output head.
//!
//! Sequences in a batch are stacked row-wise into one matrix; a [`RowLayout`]
//! records where each sequence lives and which rows are real tokens. Row-wise
//! sub-layers (projections, FFN, normalization) run once over the whole
//! stack, attention runs per segment.

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnMask, AttnSpec, Graph, Var};
use crate::data::vocab::{TokenId, BOS};
use crate::error::{bail, Result};
use crate::fusion::DecoderFusion;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Divide attention scores by √d_model instead of the per-head √d_k.
    pub scale_by_model_width: bool,
    pub pre_norm: bool,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 128,
            d_ff: 512,
            heads: 4,
            vocab_size: 0,
            max_len: 256,
            scale_by_model_width: false,
            pre_norm: false,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            ..Self::default()
        }
    }

    pub fn with_dims(layers: usize, d_model: usize, d_ff: usize, heads: usize, vocab: usize) -> Self {
        Self {
            layers,
            d_model,
            d_ff,
            heads,
            vocab_size: vocab,
            ..Self::default()
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn attn_scale(&self) -> f64 {
        let width = if self.scale_by_model_width {
            self.d_model
        } else {
            self.d_k()
        };
        1.0 / (width as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            bail!(Config, "d_model {} not divisible by {} heads", self.d_model, self.heads);
        }
        if self.layers == 0 || self.d_ff == 0 || self.d_model < 2 {
            bail!(Config, "degenerate model dimensions");
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            bail!(Config, "vocab_size and max_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout {} outside [0, 1)", self.dropout);
        }
        Ok(())
    }
}

/// Row placement of a stacked batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowLayout {
    pub segs: Vec<Range<usize>>,
    /// `false` marks padding or masked rows.
    pub valid: Vec<bool>,
}

impl RowLayout {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut segs = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &l in lengths {
            segs.push(start..start + l);
            start += l;
        }
        Self {
            segs,
            valid: vec![true; start],
        }
    }

    pub fn from_masks(masks: &[Vec<bool>]) -> Self {
        let lengths: Vec<usize> = masks.iter().map(Vec::len).collect();
        let mut layout = Self::from_lengths(&lengths);
        layout.valid = masks.iter().flatten().copied().collect();
        layout
    }

    pub fn rows(&self) -> usize {
        self.valid.len()
    }

    pub fn len(&self) -> usize {
        self.segs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segs.is_empty()
    }

    /// Same memory segment repeated `n` times (beam hypotheses over one source).
    pub fn repeated(&self, seg: usize, n: usize) -> Self {
        Self {
            segs: vec![self.segs[seg].clone(); n],
            valid: self.valid.clone(),
        }
    }

    /// Layout selecting the listed segments of `self` (rows stay in place).
    pub fn pick(&self, segs: &[usize]) -> Self {
        Self {
            segs: segs.iter().map(|&s| self.segs[s].clone()).collect(),
            valid: self.valid.clone(),
        }
    }

    pub fn key_valid(&self) -> Option<Vec<bool>> {
        if self.valid.iter().all(|&v| v) {
            None
        } else {
            Some(self.valid.clone())
        }
    }
}

/// Fixed sinusoidal position table: even channels `sin`, odd channels `cos`.
pub fn sinusoid_row(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let i = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Adds the sinusoidal table rows `0..J` to a `J×d` embedding matrix.
pub fn positional_encode(embeddings: &Tensor, max_len: usize) -> Result<Tensor> {
    let (j, d) = (embeddings.rows(), embeddings.cols());
    if j > max_len {
        bail!(Length, "{j} positions exceed max_len {max_len}");
    }
    let mut out = embeddings.data().to_vec();
    for p in 0..j {
        for (o, s) in out[p * d..(p + 1) * d].iter_mut().zip(sinusoid_row(p, d)) {
            *o += s;
        }
    }
    Tensor::new(vec![j, d], out)
}

fn position_table(layout: &RowLayout, d: usize, max_len: usize) -> Result<Tensor> {
    let mut data = vec![0.0; layout.rows() * d];
    for seg in &layout.segs {
        if seg.len() > max_len {
            bail!(Length, "sequence of {} exceeds max_len {max_len}", seg.len());
        }
        for (p, row) in seg.clone().enumerate() {
            data[row * d..(row + 1) * d].copy_from_slice(&sinusoid_row(p, d));
        }
    }
    Tensor::new(vec![layout.rows(), d], data)
}

/// Affine map `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_glorot(format!("{name}.w"), d_in, d_out, rng)?;
        let b = if bias {
            Some(store.add_zeros(format!("{name}.b"), &[1, d_out])?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    /// Sets weights and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).data_mut().fill(0.0);
        if let Some(b) = self.b {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gain: store.add_filled(format!("{name}.gain"), &[1, d], 1.0)?,
            bias: store.add_zeros(format!("{name}.bias"), &[1, d])?,
            eps,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Scaled dot-product attention with a single head:
/// `Softmax(Q·Kᵀ·scale + mask)·V`.
pub fn self_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: AttnMask,
    scale: f64,
) -> Result<Var> {
    let (a, _) = g.shape(q);
    let (b, _) = g.shape(k);
    let spec = AttnSpec {
        mask,
        ..AttnSpec::single(a, b, 1, scale)
    };
    g.attention(q, k, v, spec)
}

/// Multi-head attention; per-head projections are the column blocks of the
/// `d_model × d_model` matrices `wq`, `wk`, `wv`, and `wo` maps the
/// concatenated heads back to `d_model`.
#[derive(Clone, Debug)]
pub struct MultiHead {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub scale: f64,
}

/// Output of [`MultiHead::forward`]; `attn` is the attention node, whose
/// probabilities can be read with [`Graph::attention_probs`].
pub struct AttnOutput {
    pub out: Var,
    pub attn: Var,
}

impl MultiHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            wq: store.add_glorot(format!("{name}.wq"), d, d, rng)?,
            wk: store.add_glorot(format!("{name}.wk"), d, d, rng)?,
            wv: store.add_glorot(format!("{name}.wv"), d, d, rng)?,
            wo: store.add_glorot(format!("{name}.wo"), d, d, rng)?,
            heads: cfg.heads,
            scale: cfg.attn_scale(),
        })
    }

    /// Queries come from rows of `x` grouped by `q_layout`; keys and values
    /// from `mem` grouped by `k_layout` (segment `i` attends segment `i`).
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        q_layout: &RowLayout,
        mem: Var,
        k_layout: &RowLayout,
        mask: AttnMask,
    ) -> Result<AttnOutput> {
        if q_layout.len() != k_layout.len() {
            bail!(Dimension, "{} query vs {} key segments", q_layout.len(), k_layout.len());
        }
        let wq = g.param(self.wq);
        let wk = g.param(self.wk);
        let wv = g.param(self.wv);
        let wo = g.param(self.wo);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(mem, wk)?;
        let v = g.matmul(mem, wv)?;
        let spec = AttnSpec {
            heads: self.heads,
            scale: self.scale,
            q_segs: q_layout.segs.clone(),
            k_segs: k_layout.segs.clone(),
            mask,
            key_valid: k_layout.key_valid(),
        };
        let attn = g.attention(q, k, v, spec)?;
        let out = g.matmul(attn, wo)?;
        Ok(AttnOutput { out, attn })
    }
}

/// Two affine maps with GeLU between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), d, d_ff, true, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), d_ff, d, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.l2.forward(g, h)
    }
}

/// Residual sub-layer wrapper: post-norm `LN(x + f(x))` or pre-norm
/// `x + f(LN(x))`.
fn residual<F>(g: &mut Graph, x: Var, ln: &LayerNorm, pre_norm: bool, f: F) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    if pre_norm {
        let n = ln.forward(g, x)?;
        let y = f(g, n)?;
        g.add(x, y)
    } else {
        let y = f(g, x)?;
        let s = g.add(x, y)?;
        ln.forward(g, s)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHead,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: MultiHead::new(store, &format!("{name}.attn"), cfg, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.d_model, cfg.ln_eps)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.d_ff, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.d_model, cfg.ln_eps)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, layout: &RowLayout, pre_norm: bool) -> Result<Var> {
        let a = residual(g, x, &self.ln1, pre_norm, |g, h| {
            Ok(self.attn.forward(g, h, layout, h, layout, AttnMask::None)?.out)
        })?;
        residual(g, a, &self.ln2, pre_norm, |g, h| self.ffn.forward(g, h))
    }
}

/// Token embedding table plus sinusoidal positions.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub d_model: usize,
    pub max_len: usize,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let bound = (3.0 / cfg.d_model as f64).sqrt();
        let table = store.add(
            format!("{name}.table"),
            Tensor::uniform(&[cfg.vocab_size, cfg.d_model], bound, rng),
        )?;
        Ok(Self {
            table,
            d_model: cfg.d_model,
            max_len: cfg.max_len,
        })
    }

    /// Embeds stacked sequences; rows are `√d · E[id] + PE[pos]`.
    pub fn forward(&self, g: &mut Graph, seqs: &[Vec<TokenId>], detach: bool) -> Result<(Var, RowLayout)> {
        let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let layout = RowLayout::from_lengths(&lengths);
        let ids: Vec<usize> = seqs.iter().flatten().map(|&t| t as usize).collect();
        let table = g.param(self.table);
        let mut e = g.gather_rows(table, &ids)?;
        if detach {
            e = g.detach(e)?;
        }
        let e = g.scale(e, (self.d_model as f64).sqrt())?;
        let pe = g.constant(position_table(&layout, self.d_model, self.max_len)?)?;
        Ok((g.add(e, pe)?, layout))
    }
}

/// Source-side output: `hidden` is H_x, `input` the embedded input v_x.
#[derive(Clone, Debug)]
pub struct EncoderState {
    pub hidden: Var,
    pub input: Var,
    pub layout: RowLayout,
    pub ids: Vec<Vec<TokenId>>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub final_ln: Option<LayerNorm>,
    pub pre_norm: bool,
    pub dropout: f64,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|l| EncoderLayer::new(store, &format!("{name}.layer{l}"), cfg, rng))
            .collect::<Result<_>>()?;
        let final_ln = if cfg.pre_norm {
            Some(LayerNorm::new(store, &format!("{name}.final_ln"), cfg.d_model, cfg.ln_eps)?)
        } else {
            None
        };
        Ok(Self {
            layers,
            final_ln,
            pre_norm: cfg.pre_norm,
            dropout: cfg.dropout,
        })
    }

    /// Runs the layer stack over an already-embedded input.
    pub fn forward(&self, g: &mut Graph, x: Var, layout: &RowLayout) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, h, layout, self.pre_norm)?;
        }
        match &self.final_ln {
            Some(ln) => ln.forward(g, h),
            None => Ok(h),
        }
    }

    /// Embeds and encodes a batch. `masks[i][j] == false` marks padding; such
    /// rows are excluded as attention keys, so they never affect real rows.
    pub fn encode(
        &self,
        g: &mut Graph,
        embed: &Embedding,
        seqs: &[Vec<TokenId>],
        masks: Option<&[Vec<bool>]>,
    ) -> Result<EncoderState> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            bail!(Contract, "encode needs nonempty sequences");
        }
        let (input, mut layout) = embed.forward(g, seqs, false)?;
        if let Some(masks) = masks {
            if masks.len() != seqs.len() || masks.iter().zip(seqs).any(|(m, s)| m.len() != s.len()) {
                bail!(Dimension, "padding mask does not match batch");
            }
            if masks.iter().any(|m| !m.iter().any(|&v| v)) {
                bail!(Contract, "sequence without real tokens");
            }
            layout.valid = masks.iter().flatten().copied().collect();
        }
        let hidden = self.forward(g, input, &layout)?;
        Ok(EncoderState {
            hidden,
            input,
            layout,
            ids: seqs.to_vec(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHead,
    pub ln1: LayerNorm,
    pub cross: MultiHead,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
    pub fusion: Option<DecoderFusion>,
}

/// Memory a decoder layer attends to: rows of `hidden` grouped by `layout`,
/// one segment per target segment.
#[derive(Clone, Copy, Debug)]
pub struct Memory<'a> {
    pub hidden: Var,
    pub layout: &'a RowLayout,
}

/// Per-layer intermediate results of the last decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// o_i rows of the final layer.
    pub hidden: Var,
    /// H_tgt of the final layer.
    pub target: Var,
    /// c_i (or the fused c_i′) of the final layer.
    pub context: Var,
    /// Cross-attention node of the final layer.
    pub cross_attn: Var,
}

impl DecoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        fused: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fusion = if fused {
            Some(DecoderFusion::new(store, &format!("{name}.fusion"), cfg, rng)?)
        } else {
            None
        };
        Ok(Self {
            self_attn: MultiHead::new(store, &format!("{name}.self_attn"), cfg, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.d_model, cfg.ln_eps)?,
            cross: MultiHead::new(store, &format!("{name}.cross"), cfg, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.d_ff, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.d_model, cfg.ln_eps)?,
            fusion,
        })
    }

    /// `H_tgt = LN(y + MultiHead_masked(y))`, `c = FFN(MultiHead(H_tgt, H_x, H_x))`,
    /// optionally gated with the auxiliary context, then `o = LN(H_tgt + c)`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        y: Var,
        layout: &RowLayout,
        memory: Memory,
        aux: Option<Memory>,
        pre_norm: bool,
        detach_cross: bool,
    ) -> Result<(DecoderOutput, Option<Var>)> {
        let h = residual(g, y, &self.ln1, pre_norm, |g, h| {
            Ok(self.self_attn.forward(g, h, layout, h, layout, AttnMask::Causal)?.out)
        })?;
        let q_in = if pre_norm { self.ln2.forward(g, h)? } else { h };
        let cross = self.cross.forward(g, q_in, layout, memory.hidden, memory.layout, AttnMask::None)?;
        let mut c = self.ffn.forward(g, cross.out)?;
        if detach_cross {
            c = g.detach(c)?;
        }
        let mut gate = None;
        if let (Some(fusion), Some(aux)) = (&self.fusion, aux) {
            let fused = fusion.forward(g, q_in, layout, aux, c)?;
            c = fused.context;
            gate = Some(fused.gate);
        }
        let s = g.add(h, c)?;
        let o = if pre_norm { s } else { self.ln2.forward(g, s)? };
        Ok((
            DecoderOutput {
                hidden: o,
                target: h,
                context: c,
                cross_attn: cross.attn,
            },
            gate,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub final_ln: Option<LayerNorm>,
    pub pre_norm: bool,
}

impl Decoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        fused: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|l| DecoderLayer::new(store, &format!("{name}.layer{l}"), cfg, fused, rng))
            .collect::<Result<_>>()?;
        let final_ln = if cfg.pre_norm {
            Some(LayerNorm::new(store, &format!("{name}.final_ln"), cfg.d_model, cfg.ln_eps)?)
        } else {
            None
        };
        Ok(Self {
            layers,
            final_ln,
            pre_norm: cfg.pre_norm,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        y: Var,
        layout: &RowLayout,
        memory: Memory,
        aux: Option<Memory>,
        detach_cross: bool,
    ) -> Result<DecoderOutput> {
        let mut x = y;
        let mut last = None;
        for layer in &self.layers {
            let (out, _) = layer.forward(g, x, layout, memory, aux, self.pre_norm, detach_cross)?;
            x = out.hidden;
            last = Some(out);
        }
        let mut out = last.expect("decoder has layers");
        if let Some(ln) = &self.final_ln {
            out.hidden = ln.forward(g, out.hidden)?;
        }
        Ok(out)
    }
}

/// `Softmax(L_o · GeLU(L_w · o))`; returns logits.
#[derive(Clone, Debug)]
pub struct OutputHead {
    pub lw: Linear,
    pub lo: Linear,
}

impl OutputHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            lw: Linear::new(store, &format!("{name}.lw"), cfg.d_model, cfg.d_model, true, rng)?,
            lo: Linear::new(store, &format!("{name}.lo"), cfg.d_model, cfg.vocab_size, true, rng)?,
        })
    }

    pub fn logits(&self, g: &mut Graph, o: Var) -> Result<Var> {
        let h = self.lw.forward(g, o)?;
        let h = g.gelu(h)?;
        self.lo.forward(g, h)
    }
}

/// Result of one decoding step over a single prefix.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub context: Vec<f64>,
    pub output: Vec<f64>,
    pub distribution: Vec<f64>,
    /// Cross-attention of the last position over source tokens (head mean).
    pub cross_attention: Vec<f64>,
}

/// Encoder-decoder Transformer used by the compressor and translation tasks.
#[derive(Debug)]
pub struct Seq2Seq {
    pub cfg: ModelConfig,
    pub embed: Embedding,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: OutputHead,
    passes: AtomicUsize,
}

impl Clone for Seq2Seq {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            embed: self.embed.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
            passes: AtomicUsize::new(self.passes.load(Ordering::Relaxed)),
        }
    }
}

/// Teacher-forcing inputs: `[BOS] y` in, `y [EOS]` out.
pub fn shift_targets(targets: &[Vec<TokenId>], eos: TokenId) -> (Vec<Vec<TokenId>>, Vec<Option<usize>>) {
    let inputs = targets
        .iter()
        .map(|t| std::iter::once(BOS).chain(t.iter().copied()).collect())
        .collect();
    let labels = targets
        .iter()
        .flat_map(|t| t.iter().copied().chain(std::iter::once(eos)).map(|x| Some(x as usize)))
        .collect();
    (inputs, labels)
}

impl Seq2Seq {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        fused_decoder: bool,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            embed: Embedding::new(store, &format!("{name}.embed"), cfg, rng)?,
            encoder: Encoder::new(store, &format!("{name}.encoder"), cfg, rng)?,
            decoder: Decoder::new(store, &format!("{name}.decoder"), cfg, fused_decoder, rng)?,
            head: OutputHead::new(store, &format!("{name}.head"), cfg, rng)?,
            passes: AtomicUsize::new(0),
        })
    }

    pub fn encode(&self, g: &mut Graph, seqs: &[Vec<TokenId>], masks: Option<&[Vec<bool>]>) -> Result<EncoderState> {
        self.encoder.encode(g, &self.embed, seqs, masks)
    }

    /// Decoder forward over stacked prefixes; counts one decoder pass.
    pub fn decode(
        &self,
        g: &mut Graph,
        prefixes: &[Vec<TokenId>],
        memory: Memory,
        aux: Option<Memory>,
        detach_inputs: bool,
    ) -> Result<(DecoderOutput, RowLayout)> {
        for p in prefixes {
            if p.is_empty() {
                bail!(Contract, "empty decoder prefix");
            }
            if p.len() > self.cfg.max_len {
                bail!(Length, "prefix of {} exceeds max_len {}", p.len(), self.cfg.max_len);
            }
        }
        self.passes.fetch_add(1, Ordering::Relaxed);
        let (y, layout) = self.embed.forward(g, prefixes, detach_inputs)?;
        let out = self.decoder.forward(g, y, &layout, memory, aux, detach_inputs)?;
        Ok((out, layout))
    }

    /// Number of decoder forwards run so far.
    pub fn decoder_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_decoder_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    /// Teacher-forced mean token NLL of `targets` given `sources`.
    pub fn loss(&self, g: &mut Graph, sources: &[Vec<TokenId>], targets: &[Vec<TokenId>], eos: TokenId) -> Result<Var> {
        let enc = self.encode(g, sources, None)?;
        let (inputs, labels) = shift_targets(targets, eos);
        let mem = Memory {
            hidden: enc.hidden,
            layout: &enc.layout,
        };
        let (out, _) = self.decode(g, &inputs, mem, None, false)?;
        let logits = self.head.logits(g, out.hidden)?;
        g.cross_entropy(logits, &labels, None)
    }

    /// One autoregressive step: context, fused output and next-token
    /// distribution at the last prefix position, plus its cross-attention row.
    pub fn decode_step(&self, params: &ParamStore, prefix: &[TokenId], source: &Tensor, source_len: usize) -> Result<StepResult> {
        if prefix.first() != Some(&BOS) {
            bail!(Contract, "prefix must begin with BOS");
        }
        let mut g = Graph::inference(params);
        let mem = g.constant(source.clone())?;
        let mem_layout = RowLayout::from_lengths(&[source_len]);
        let (out, _) = self.decode(
            &mut g,
            &[prefix.to_vec()],
            Memory {
                hidden: mem,
                layout: &mem_layout,
            },
            None,
            false,
        )?;
        let logits = self.head.logits(&mut g, out.hidden)?;
        let probs = g.softmax_rows(logits)?;
        let last = prefix.len() - 1;
        let attn = g.attention_probs(out.cross_attn).expect("attention node");
        Ok(StepResult {
            context: g.value(out.context).row(last).to_vec(),
            output: g.value(out.hidden).row(last).to_vec(),
            distribution: g.value(probs).row(last).to_vec(),
            cross_attention: attn.mean_row(0, last),
        })
    }
}
