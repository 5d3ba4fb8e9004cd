//! Implicit text compression.
//!
//! A fertility predictor scores every source token, the `K` highest-scoring
//! positions are copied (as their input embeddings, in source order) into a
//! non-autoregressive decoder, and one decoder pass produces the compressed
//! features `H_x^c`:
//!
//! ```text
//! p_f   = σ(H_x·w + b)
//! K     = max(1, ceil(γ|x|))
//! H_itc = LN(V + FFN(MultiHead(V, V, V)))          no causal mask
//! H_x^c = LN(H_itc + FFN(MultiHead(H_itc, H_x, H_x)))
//! ```
//!
//! An optional predictor maps `H_x^c` to tokens, which allows pretraining on
//! `(x, y^c)` pairs before the module is trained end to end with a task.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnMask, Graph, Var};
use crate::data::vocab::{TokenId, Vocab};
use crate::error::{bail, Result};
use crate::etc::{check_gamma, compression_cap};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::transformer::{EncoderState, FeedForward, LayerNorm, Linear, ModelConfig, MultiHead, RowLayout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ItcConfig {
    pub gamma: f64,
    pub layers: usize,
    /// NAT width; a bridge map is inserted when it differs from the
    /// downstream width.
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Weight of the fertility BCE in the pretraining loss.
    pub fertility_weight: f64,
}

impl Default for ItcConfig {
    fn default() -> Self {
        Self {
            gamma: 0.4,
            layers: 2,
            d_model: 128,
            d_ff: 512,
            heads: 4,
            fertility_weight: 1.0,
        }
    }
}

impl ItcConfig {
    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if self.layers == 0 {
            bail!(Config, "itc needs at least one NAT layer");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            bail!(Config, "itc d_model {} not divisible by {} heads", self.d_model, self.heads);
        }
        Ok(())
    }

    fn nat_model(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            layers: self.layers,
            ..base.clone()
        }
    }
}

/// `K = max(1, ceil(γ·n))`.
pub fn top_k_size(n: usize, gamma: f64) -> usize {
    compression_cap(n, gamma)
}

/// The `K` highest scores, ties to the smaller index, returned in source order.
pub fn select_top_k(p_f: &[f64], gamma: f64) -> Result<Vec<usize>> {
    if p_f.is_empty() {
        bail!(Contract, "top-K selection over an empty sequence");
    }
    check_gamma(gamma)?;
    let k = top_k_size(p_f.len(), gamma).min(p_f.len());
    let mut order: Vec<usize> = (0..p_f.len()).collect();
    order.sort_by(|&a, &b| p_f[b].total_cmp(&p_f[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Membership labels: `1` where the lowercased source token occurs in the
/// lowercased target.
pub fn fertility_labels<S: AsRef<str>, T: AsRef<str>>(x: &[S], y: &[T]) -> Vec<f64> {
    let ys: std::collections::HashSet<String> = y.iter().map(|t| t.as_ref().to_lowercase()).collect();
    x.iter()
        .map(|t| if ys.contains(&t.as_ref().to_lowercase()) { 1.0 } else { 0.0 })
        .collect()
}

pub fn fertility_labels_ids(vocab: &Vocab, x: &[TokenId], y: &[TokenId]) -> Vec<f64> {
    fertility_labels(&vocab.decode(x), &vocab.decode(y))
}

/// Width adapter, initialized to a truncated or zero-padded identity.
#[derive(Clone, Debug)]
pub struct Bridge {
    pub lin: Linear,
}

impl Bridge {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let mut w = Tensor::zeros(&[d_in, d_out]);
        for i in 0..d_in.min(d_out) {
            w.data_mut()[i * d_out + i] = 1.0;
        }
        Ok(Self {
            lin: Linear {
                w: store.add(format!("{name}.w"), w)?,
                b: Some(store.add_zeros(format!("{name}.b"), &[1, d_out])?),
            },
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.lin.forward(g, x)
    }
}

#[derive(Clone, Debug)]
pub struct NatLayer {
    pub self_attn: MultiHead,
    pub ffn1: FeedForward,
    pub ln1: LayerNorm,
    pub cross: MultiHead,
    pub ffn2: FeedForward,
    pub ln2: LayerNorm,
}

impl NatLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHead::new(store, &format!("{name}.self_attn"), cfg, rng)?,
            ffn1: FeedForward::new(store, &format!("{name}.ffn1"), cfg.d_model, cfg.d_ff, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.d_model, cfg.ln_eps)?,
            cross: MultiHead::new(store, &format!("{name}.cross"), cfg, rng)?,
            ffn2: FeedForward::new(store, &format!("{name}.ffn2"), cfg.d_model, cfg.d_ff, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.d_model, cfg.ln_eps)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, v: Var, layout: &RowLayout, hx: Var, hx_layout: &RowLayout) -> Result<Var> {
        let a = self.self_attn.forward(g, v, layout, v, layout, AttnMask::None)?;
        let f = self.ffn1.forward(g, a.out)?;
        let s = g.add(v, f)?;
        let h = self.ln1.forward(g, s)?;
        let c = self.cross.forward(g, h, layout, hx, hx_layout, AttnMask::None)?;
        let f = self.ffn2.forward(g, c.out)?;
        let s = g.add(h, f)?;
        self.ln2.forward(g, s)
    }
}

/// Fertility scores, selection and compressed features for a batch.
#[derive(Clone, Debug)]
pub struct ItcOutput {
    /// `ΣK × d` compressed features H_x^c.
    pub hidden: Var,
    pub layout: RowLayout,
    /// `J × 1` fertility logits over all source rows.
    pub fertility_logits: Var,
    /// Per-sequence selected positions, in source order.
    pub selected: Vec<Vec<usize>>,
}

impl ItcOutput {
    pub fn fertility(&self, g: &Graph) -> Vec<f64> {
        g.value(self.fertility_logits)
            .data()
            .iter()
            .map(|&z| crate::autodiff::sigmoid_scalar(z))
            .collect()
    }
}

#[derive(Debug)]
pub struct ItcModule {
    pub cfg: ItcConfig,
    pub fertility: Linear,
    pub bridge_in: Option<Bridge>,
    pub bridge_out: Option<Bridge>,
    pub layers: Vec<NatLayer>,
    pub predictor: Option<Linear>,
    passes: AtomicUsize,
}

impl Clone for ItcModule {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            fertility: self.fertility.clone(),
            bridge_in: self.bridge_in.clone(),
            bridge_out: self.bridge_out.clone(),
            layers: self.layers.clone(),
            predictor: self.predictor.clone(),
            passes: AtomicUsize::new(self.passes.load(Ordering::Relaxed)),
        }
    }
}

impl ItcModule {
    /// `base` is the downstream model config (its width is the input and
    /// output width of the module). `predictor` adds the token head used in
    /// pretraining.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ItcConfig,
        base: &ModelConfig,
        predictor: bool,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let nat = cfg.nat_model(base);
        let d = base.d_model;
        let (bridge_in, bridge_out) = if cfg.d_model == d {
            (None, None)
        } else {
            (
                Some(Bridge::new(store, &format!("{name}.bridge_in"), d, cfg.d_model)?),
                Some(Bridge::new(store, &format!("{name}.bridge_out"), cfg.d_model, d)?),
            )
        };
        let layers = (0..cfg.layers)
            .map(|l| NatLayer::new(store, &format!("{name}.nat{l}"), &nat, rng))
            .collect::<Result<_>>()?;
        let predictor = if predictor {
            Some(Linear::new(store, &format!("{name}.predictor"), d, base.vocab_size, true, rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            fertility: Linear::new(store, &format!("{name}.fertility"), d, 1, true, rng)?,
            bridge_in,
            bridge_out,
            layers,
            predictor,
            passes: AtomicUsize::new(0),
        })
    }

    /// `J × 1` fertility logits.
    pub fn fertility_logits(&self, g: &mut Graph, hx: Var) -> Result<Var> {
        self.fertility.forward(g, hx)
    }

    /// Selection from fertility logits (σ is monotone, so logits rank the same).
    pub fn select(&self, logits: &[f64], layout: &RowLayout) -> Result<Vec<Vec<usize>>> {
        layout
            .segs
            .iter()
            .map(|seg| {
                let scores: Vec<f64> = seg
                    .clone()
                    .map(|r| if layout.valid[r] { logits[r] } else { f64::NEG_INFINITY })
                    .collect();
                let real = layout.valid[seg.clone()].iter().filter(|&&v| v).count();
                let gamma = self.cfg.gamma;
                let mut picked = select_top_k(&scores, gamma)?;
                picked.truncate(top_k_size(real, gamma).min(real));
                Ok(picked)
            })
            .collect()
    }

    /// Non-autoregressive decoding of the selected input rows; one decoder
    /// pass regardless of `K`.
    pub fn nat_decode(&self, g: &mut Graph, v: Var, layout: &RowLayout, hx: Var, hx_layout: &RowLayout) -> Result<Var> {
        if layout.rows() == 0 {
            bail!(Contract, "nat_decode needs K >= 1");
        }
        self.passes.fetch_add(1, Ordering::Relaxed);
        let (mut h, mem) = match &self.bridge_in {
            Some(b) => (b.forward(g, v)?, b.forward(g, hx)?),
            None => (v, hx),
        };
        for layer in &self.layers {
            h = layer.forward(g, h, layout, mem, hx_layout)?;
        }
        match &self.bridge_out {
            Some(b) => b.forward(g, h),
            None => Ok(h),
        }
    }

    pub fn forward(&self, g: &mut Graph, enc: &EncoderState) -> Result<ItcOutput> {
        let fertility_logits = self.fertility_logits(g, enc.hidden)?;
        let logits = g.value(fertility_logits).data().to_vec();
        let selected = self.select(&logits, &enc.layout)?;
        let rows: Vec<usize> = selected
            .iter()
            .zip(&enc.layout.segs)
            .flat_map(|(sel, seg)| sel.iter().map(move |&i| seg.start + i))
            .collect();
        let lengths: Vec<usize> = selected.iter().map(Vec::len).collect();
        let layout = RowLayout::from_lengths(&lengths);
        let v = g.select_rows(enc.input, &rows)?;
        let hidden = self.nat_decode(g, v, &layout, enc.hidden, &enc.layout)?;
        Ok(ItcOutput {
            hidden,
            layout,
            fertility_logits,
            selected,
        })
    }

    pub fn decoder_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_decoder_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    /// Predictor logits over the vocabulary for every compressed row.
    pub fn predict(&self, g: &mut Graph, out: &ItcOutput) -> Result<Var> {
        let Some(p) = &self.predictor else {
            bail!(Config, "module was built without a predictor");
        };
        p.forward(g, out.hidden)
    }

    /// Stage-1 loss: `fertility_weight · BCE(p_f, labels) + NLL(y^c)`.
    /// Targets are aligned to the `K` selected rows: longer targets are cut,
    /// positions past a shorter target carry no loss.
    pub fn pretrain_loss(&self, g: &mut Graph, enc: &EncoderState, targets: &[Vec<TokenId>], labels: &[Vec<f64>]) -> Result<Var> {
        if targets.is_empty() {
            bail!(Contract, "empty pretraining batch");
        }
        if targets.len() != enc.layout.len() || labels.len() != targets.len() {
            bail!(Dimension, "batch of {} sources vs {} targets", enc.layout.len(), targets.len());
        }
        let out = self.forward(g, enc)?;
        let flat_labels: Vec<f64> = labels.iter().flatten().copied().collect();
        let bce = g.bce_with_logits(out.fertility_logits, &flat_labels, self.cfg.fertility_weight)?;
        let logits = self.predict(g, &out)?;
        let mut ce_targets = Vec::with_capacity(out.layout.rows());
        for (sel, y) in out.selected.iter().zip(targets) {
            for i in 0..sel.len() {
                ce_targets.push(y.get(i).map(|&t| t as usize));
            }
        }
        if ce_targets.iter().all(Option::is_none) {
            return Ok(bce);
        }
        let ce = g.cross_entropy(logits, &ce_targets, None)?;
        g.add(bce, ce)
    }
}

/// Single-term approximation of `log p(y^c | x)`: the fertility consistency
/// of the deterministic selection plus the predictor log-likelihood.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionLogProb {
    /// `Σ_i s_i log p_f,i + (1 − s_i) log(1 − p_f,i)` with `s` the selection.
    pub fertility: f64,
    /// `Σ_i log p_c(y^c_i | selected inputs)`.
    pub conditional: f64,
}

impl CompressionLogProb {
    pub fn total(&self) -> f64 {
        self.fertility + self.conditional
    }
}

/// Scores `y^c` for one source given fertility probabilities, the selection
/// and `K × V` predictor probabilities.
pub fn compression_logprob(y: &[TokenId], p_f: &[f64], selected: &[usize], probs: &Tensor) -> Result<CompressionLogProb> {
    if y.len() != selected.len() || probs.rows() != selected.len() {
        bail!(
            Contract,
            "target of {} tokens for K = {} selected rows",
            y.len(),
            selected.len()
        );
    }
    let mut chosen = vec![false; p_f.len()];
    for &i in selected {
        chosen[i] = true;
    }
    let fertility = p_f
        .iter()
        .zip(&chosen)
        .map(|(&p, &s)| if s { p.ln() } else { (1.0 - p).ln() })
        .sum();
    let mut conditional = 0.0;
    for (i, &t) in y.iter().enumerate() {
        let t = t as usize;
        if t >= probs.cols() {
            bail!(Index, "token {t} outside predictor vocabulary");
        }
        conditional += probs.get(i, t).ln();
    }
    Ok(CompressionLogProb { fertility, conditional })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn top_k_cases() {
        let p: Vec<f64> = (0..10).map(|i| (i * 7 % 10) as f64 / 10.0).collect();
        let sel = select_top_k(&p, 0.4).unwrap();
        assert_eq!(sel.len(), 4);
        assert!(sel.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(select_top_k(&p, 1.0).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(select_top_k(&[0.5; 10], 0.3).unwrap(), vec![0, 1, 2]);
        assert!(select_top_k(&[], 0.3).is_err());
    }

    #[test]
    fn labels_use_lowercased_membership() {
        assert_eq!(fertility_labels(&["The", "cat", "sat"], &["the", "SAT"]), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn bridge_starts_as_padded_identity() {
        let mut store = ParamStore::new();
        let b = Bridge::new(&mut store, "b", 2, 3).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap()).unwrap();
        let y = b.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, -2.0, 0.0]);
    }

    #[test]
    fn zero_fertility_map_scores_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = ModelConfig::with_dims(1, 8, 16, 2, 12);
        let mut store = ParamStore::new();
        let itc = ItcModule::new(&mut store, "itc", &ItcConfig { d_model: 8, d_ff: 16, heads: 2, ..ItcConfig::default() }, &base, false, &mut rng).unwrap();
        itc.fertility.zero(&mut store);
        let mut g = Graph::inference(&store);
        let hx = g.constant(Tensor::uniform(&[5, 8], 1.0, &mut rng)).unwrap();
        let z = itc.fertility_logits(&mut g, hx).unwrap();
        let p = g.sigmoid(z).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn logprob_analytic_cases() {
        let selected = vec![0, 2];
        let p_f = vec![1.0 - 1e-300, 0.0, 1.0 - 1e-300];
        let mut onehot = Tensor::zeros(&[2, 4]);
        onehot.data_mut()[1] = 1.0;
        onehot.data_mut()[4 + 3] = 1.0;
        let lp = compression_logprob(&[1, 3], &p_f, &selected, &onehot).unwrap();
        assert_eq!(lp.conditional, 0.0);
        assert!(lp.total().abs() < 1e-12);
        let uniform = Tensor::filled(&[2, 4], 0.25);
        let lp = compression_logprob(&[1, 3], &p_f, &selected, &uniform).unwrap();
        assert!((lp.conditional - 2.0 * 0.25f64.ln()).abs() < 1e-12);
        assert!(compression_logprob(&[1], &p_f, &selected, &uniform).is_err());
    }
}
