//! Backbone fusion of a compressed representation H_c into the task model.
//!
//! - encoder side: `H_x′ = H_x + FFN(MultiHead(H_x, H_c, H_c))`
//! - decoder side: a second inter-attention over H_c gives `b_i`, and the
//!   context gate `g_i = σ(W[c_i; b_i] + w₀)` mixes
//!   `c_i′ = g_i ⊗ c_i + (1 − g_i) ⊗ b_i`
//! - both sides: the decoder's extra inter-attention reads H_x′ instead of H_c
//!
//! The fusion code does not care where H_c came from (re-encoded compressed
//! tokens, compressor decoder states, or the implicit compressor).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnMask, Graph, Var};
use crate::error::{bail, Error, Result};
use crate::params::ParamStore;
use crate::transformer::{FeedForward, Linear, Memory, ModelConfig, MultiHead, RowLayout};

/// Gate bias that saturates σ to exactly 1.0 in f64.
pub const GATE_OPEN_BIAS: f64 = 40.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    None,
    Bef,
    Bdf,
    Bbf,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [Self::None, Self::Bef, Self::Bdf, Self::Bbf];

    pub fn encoder_side(self) -> bool {
        matches!(self, Self::Bef | Self::Bbf)
    }

    pub fn decoder_side(self) -> bool {
        matches!(self, Self::Bdf | Self::Bbf)
    }

    /// Decoder-side modes need an encoder-decoder task.
    pub fn check_task(self, encoder_decoder: bool) -> Result<()> {
        if self.decoder_side() && !encoder_decoder {
            bail!(Config, "fusion {self} requires an encoder-decoder task");
        }
        Ok(())
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Bef => "bef",
            Self::Bdf => "bdf",
            Self::Bbf => "bbf",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "none" => Self::None,
            "bef" => Self::Bef,
            "bdf" => Self::Bdf,
            "bbf" => Self::Bbf,
            other => bail!(Config, "unknown fusion mode `{other}`"),
        })
    }
}

/// Encoder-side attention-fusion layer.
#[derive(Clone, Debug)]
pub struct EncoderFusion {
    pub attn: MultiHead,
    pub ffn: FeedForward,
}

impl EncoderFusion {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: MultiHead::new(store, &format!("{name}.attn"), cfg, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.d_ff, rng)?,
        })
    }

    /// `H_x′ = H_x + FFN(MultiHead(H_x, H_c, H_c))`; shape of H_x preserved.
    pub fn fuse(&self, g: &mut Graph, hx: Var, hx_layout: &RowLayout, hc: Memory) -> Result<Var> {
        if g.shape(hx).1 != g.shape(hc.hidden).1 {
            bail!(
                Dimension,
                "fusion widths {} vs {}",
                g.shape(hx).1,
                g.shape(hc.hidden).1
            );
        }
        let a = self.attn.forward(g, hx, hx_layout, hc.hidden, hc.layout, AttnMask::None)?;
        let hxc = self.ffn.forward(g, a.out)?;
        g.add(hx, hxc)
    }

    /// Zeroes the output projection so the layer adds exactly zero.
    pub fn zero_output(&self, store: &mut ParamStore) {
        self.ffn.l2.zero(store);
    }
}

/// Vector context gate over `[c; b]`.
#[derive(Clone, Debug)]
pub struct ContextGate {
    pub proj: Linear,
}

pub struct GateOutput {
    pub context: Var,
    pub gate: Var,
}

impl ContextGate {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, name, 2 * d, d, true, rng)?,
        })
    }

    /// `c′ = g ⊗ c + (1 − g) ⊗ b`, `g = σ(W[c; b] + w₀)`.
    pub fn forward(&self, g: &mut Graph, c: Var, b: Var) -> Result<GateOutput> {
        if g.shape(c) != g.shape(b) {
            bail!(Dimension, "gate inputs {:?} vs {:?}", g.shape(c), g.shape(b));
        }
        let cb = g.concat_cols(&[c, b])?;
        let z = self.proj.forward(g, cb)?;
        let gate = g.sigmoid(z)?;
        let context = mix(g, gate, c, b)?;
        Ok(GateOutput { context, gate })
    }

    /// Forces the gate fully open (`g = 1`, pure original context).
    pub fn saturate_open(&self, store: &mut ParamStore) {
        self.saturate(store, GATE_OPEN_BIAS);
    }

    /// Sets weights to zero and every bias to `bias`.
    pub fn saturate(&self, store: &mut ParamStore, bias: f64) {
        store.get_mut(self.proj.w).data_mut().fill(0.0);
        if let Some(b) = self.proj.b {
            store.get_mut(b).data_mut().fill(bias);
        }
    }
}

/// `g ⊗ c + (1 − g) ⊗ b`.
pub fn mix(g: &mut Graph, gate: Var, c: Var, b: Var) -> Result<Var> {
    let gc = g.mul(gate, c)?;
    let inv = g.one_minus(gate)?;
    let ib = g.mul(inv, b)?;
    g.add(gc, ib)
}

/// Decoder-side fusion for one decoder layer: an additional inter-attention
/// over an auxiliary memory and the context gate.
#[derive(Clone, Debug)]
pub struct DecoderFusion {
    pub attn: MultiHead,
    pub ffn: FeedForward,
    pub gate: ContextGate,
}

impl DecoderFusion {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: MultiHead::new(store, &format!("{name}.attn"), cfg, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.d_ff, rng)?,
            gate: ContextGate::new(store, &format!("{name}.gate"), cfg.d_model, rng)?,
        })
    }

    /// `b = FFN(MultiHead(H_tgt, aux, aux))`; returns the gated context.
    pub fn forward(&self, g: &mut Graph, h_tgt: Var, layout: &RowLayout, aux: Memory, c: Var) -> Result<GateOutput> {
        let a = self.attn.forward(g, h_tgt, layout, aux.hidden, aux.layout, AttnMask::None)?;
        let b = self.ffn.forward(g, a.out)?;
        self.gate.forward(g, c, b)
    }

    /// Zeroes the auxiliary branch output and opens the gate, so the layer
    /// reproduces the unfused context exactly.
    pub fn zero_output(&self, store: &mut ParamStore) {
        self.ffn.l2.zero(store);
        self.gate.saturate_open(store);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[rows, cols], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn parse_and_display_round_trip() {
        for m in FusionMode::ALL {
            assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
        }
        assert!("xyz".parse::<FusionMode>().is_err());
        assert!(FusionMode::Bdf.check_task(false).is_err());
        assert!(FusionMode::Bef.check_task(false).is_ok());
    }

    #[test]
    fn gate_extremes_select_one_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let gate = ContextGate::new(&mut store, "gate", 8, &mut rng).unwrap();
        let (c, b) = (random(3, 8, 2), random(3, 8, 3));
        for (bias, want) in [(GATE_OPEN_BIAS, &c), (-GATE_OPEN_BIAS, &b)] {
            gate.saturate(&mut store, bias);
            let mut g = Graph::inference(&store);
            let cv = g.constant(c.clone()).unwrap();
            let bv = g.constant(b.clone()).unwrap();
            let out = gate.forward(&mut g, cv, bv).unwrap();
            assert!(g.value(out.context).max_abs_diff(want) < 1e-9);
        }
    }

    #[test]
    fn gate_of_equal_contexts_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let gate = ContextGate::new(&mut store, "gate", 6, &mut rng).unwrap();
        let c = random(4, 6, 5);
        let mut g = Graph::inference(&store);
        let cv = g.constant(c.clone()).unwrap();
        let bv = g.constant(c.clone()).unwrap();
        let out = gate.forward(&mut g, cv, bv).unwrap();
        assert!(g.value(out.context).max_abs_diff(&c) < 1e-12);
        // gate values strictly inside (0, 1) at random init
        assert!(g.value(out.gate).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
