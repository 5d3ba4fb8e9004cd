//! Noise functions that turn unlabeled text into (noisy input, clean target)
//! pairs for unsupervised compressor training.
//!
//! All functions work on token ids and draw randomness only from the
//! generator they are handed.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::TokenId;
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShuffleLevel {
    /// Permute individual tokens.
    #[default]
    Token,
    /// Permute full-stop delimited sentences plus the sampled block.
    Sentence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Extra tokens appended, as a fraction of the input length.
    pub additive_fraction: f64,
    pub shuffle_level: ShuffleLevel,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            additive_fraction: 0.5,
            shuffle_level: ShuffleLevel::Token,
            dropout_p: 0.1,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.additive_fraction >= 0.0 && self.additive_fraction.is_finite()) {
            bail!(Config, "additive_fraction must be >= 0");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            bail!(Config, "dropout_p must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Appends `ceil(fraction·|x|)` words sub-sampled without replacement from
/// randomly drawn corpus lines.
pub fn noise_additive<R: Rng>(
    x: &[TokenId],
    corpus: &[Vec<TokenId>],
    fraction: f64,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    let need = (fraction * x.len() as f64).ceil() as usize;
    let mut out = x.to_vec();
    if need == 0 {
        return Ok(out);
    }
    if corpus.iter().all(Vec::is_empty) {
        bail!(Data, "additive noise needs a nonempty corpus");
    }
    let mut added = 0;
    while added < need {
        let line = &corpus[rng.gen_range(0..corpus.len())];
        if line.is_empty() {
            continue;
        }
        let take = rng.gen_range(1..=line.len()).min(need - added);
        let mut picks = index::sample(rng, line.len(), take).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|i| line[i]));
        added += take;
    }
    Ok(out)
}

/// Shuffles a noisy sequence whose first `original_len` tokens are the
/// original input and the rest the additive sample.
pub fn noise_shuffle<R: Rng>(
    seq: &[TokenId],
    original_len: usize,
    level: ShuffleLevel,
    full_stop: Option<TokenId>,
    rng: &mut R,
) -> Vec<TokenId> {
    match level {
        ShuffleLevel::Token => {
            let mut out = seq.to_vec();
            out.shuffle(rng);
            out
        }
        ShuffleLevel::Sentence => {
            let original_len = original_len.min(seq.len());
            let mut blocks = sentence_blocks(&seq[..original_len], full_stop);
            if original_len < seq.len() {
                blocks.push(seq[original_len..].to_vec());
            }
            blocks.shuffle(rng);
            blocks.concat()
        }
    }
}

/// Splits after every full stop; a trailing unterminated run is its own block.
pub fn sentence_blocks(seq: &[TokenId], full_stop: Option<TokenId>) -> Vec<Vec<TokenId>> {
    let mut blocks = Vec::new();
    let mut cur = Vec::new();
    for &t in seq {
        cur.push(t);
        if Some(t) == full_stop {
            blocks.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        blocks.push(cur);
    }
    blocks
}

/// Drops each token independently with probability `p`, keeping at least one.
pub fn noise_word_dropout<R: Rng>(x: &[TokenId], p: f64, rng: &mut R) -> Vec<TokenId> {
    if x.is_empty() || p <= 0.0 {
        return x.to_vec();
    }
    let keep: Vec<bool> = x.iter().map(|_| rng.gen::<f64>() >= p).collect();
    if keep.iter().any(|&k| k) {
        x.iter()
            .zip(&keep)
            .filter_map(|(&t, &k)| k.then_some(t))
            .collect()
    } else {
        vec![x[rng.gen_range(0..x.len())]]
    }
}

/// Generator for pair `index` under `seed`; independent of evaluation order.
pub fn pair_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `(dropout(shuffle(additive(x))), x)`.
pub fn synthesize_pair(
    x: &[TokenId],
    corpus: &[Vec<TokenId>],
    cfg: &NoiseConfig,
    full_stop: Option<TokenId>,
    index: u64,
) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    if x.is_empty() {
        bail!(Data, "cannot synthesize from an empty sequence");
    }
    cfg.validate()?;
    let mut rng = pair_rng(cfg.seed, index);
    let extended = noise_additive(x, corpus, cfg.additive_fraction, &mut rng)?;
    let shuffled = noise_shuffle(&extended, x.len(), cfg.shuffle_level, full_stop, &mut rng);
    let noisy = noise_word_dropout(&shuffled, cfg.dropout_p, &mut rng);
    Ok((noisy, x.to_vec()))
}

/// Synthesizes one pair per corpus line (in parallel when enabled).
pub fn synthesize_corpus(
    corpus: &[Vec<TokenId>],
    cfg: &NoiseConfig,
    full_stop: Option<TokenId>,
) -> Result<Vec<(Vec<TokenId>, Vec<TokenId>)>> {
    let lines: Vec<(usize, &Vec<TokenId>)> = corpus.iter().enumerate().filter(|(_, l)| !l.is_empty()).collect();
    crate::exec::map(&lines, |&(i, x)| synthesize_pair(x, corpus, cfg, full_stop, i as u64))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn sorted(v: &[TokenId]) -> Vec<TokenId> {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    }

    fn corpus() -> Vec<Vec<TokenId>> {
        vec![vec![100, 101, 102], vec![200, 201], vec![300, 301, 302, 303]]
    }

    #[test]
    fn additive_zero_fraction_is_identity() {
        let mut rng = pair_rng(1, 0);
        assert_eq!(noise_additive(&[7, 8], &corpus(), 0.0, &mut rng).unwrap(), vec![7, 8]);
    }

    #[test]
    fn additive_length_and_membership() {
        let corpus = corpus();
        let pool: HashSet<TokenId> = corpus.iter().flatten().copied().collect();
        for seed in 0..50 {
            let x: Vec<TokenId> = (10..10 + (seed % 9 + 1) as u32).collect();
            let mut rng = pair_rng(seed, 0);
            let out = noise_additive(&x, &corpus, 0.5, &mut rng).unwrap();
            assert_eq!(out.len(), x.len() + (0.5 * x.len() as f64).ceil() as usize);
            assert_eq!(&out[..x.len()], &x[..]);
            assert!(out[x.len()..].iter().all(|t| pool.contains(t)));
        }
        assert!(noise_additive(&[1], &[vec![]], 0.5, &mut pair_rng(0, 0)).is_err());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = pair_rng(3, 0);
        assert_eq!(noise_shuffle(&[9], 1, ShuffleLevel::Token, None, &mut rng), vec![9]);
        let seq: Vec<TokenId> = (0..30).collect();
        let out = noise_shuffle(&seq, 20, ShuffleLevel::Token, None, &mut rng);
        assert_eq!(sorted(&out), seq);
    }

    #[test]
    fn sentence_shuffle_keeps_sentences_intact() {
        let stop = 99;
        let seq = vec![1, 2, stop, 3, 4, 5, stop, 6, stop, 50, 51];
        for s in 0..20 {
            let out = noise_shuffle(&seq, 9, ShuffleLevel::Sentence, Some(stop), &mut pair_rng(s, 0));
            assert_eq!(sorted(&out), sorted(&seq));
            let blocks = [vec![1, 2, stop], vec![3, 4, 5, stop], vec![6, stop], vec![50, 51]];
            for b in &blocks {
                assert!(out.windows(b.len()).any(|w| w == &b[..]), "block {b:?} split in {out:?}");
            }
        }
    }

    #[test]
    fn dropout_zero_is_identity_and_order_preserving() {
        let x: Vec<TokenId> = (0..20).collect();
        assert_eq!(noise_word_dropout(&x, 0.0, &mut pair_rng(0, 0)), x);
        let out = noise_word_dropout(&x, 0.5, &mut pair_rng(1, 0));
        assert!(!out.is_empty());
        assert!(out.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(noise_word_dropout(&[5], 0.99, &mut pair_rng(2, 0)).len(), 1);
    }

    #[test]
    fn dropout_retained_length_matches_binomial() {
        // 10k trials of |x| = 20 at p = 0.1: mean retained 18, per-trial
        // variance 20·0.1·0.9 = 1.8, so the mean's std is sqrt(1.8/1e4).
        let x: Vec<TokenId> = (0..20).collect();
        let mut rng = pair_rng(42, 0);
        let trials = 10_000;
        let total: usize = (0..trials).map(|_| noise_word_dropout(&x, 0.1, &mut rng).len()).sum();
        let mean = total as f64 / trials as f64;
        let sd = (1.8f64 / trials as f64).sqrt();
        assert!((mean - 18.0).abs() < 4.0 * sd, "mean retained {mean}");
    }

    #[test]
    fn synthesized_pairs_are_reproducible() {
        let corpus = corpus();
        let cfg = NoiseConfig {
            dropout_p: 0.0,
            seed: 11,
            ..NoiseConfig::default()
        };
        let x = vec![1, 2, 3, 4];
        let a = synthesize_pair(&x, &corpus, &cfg, None, 5).unwrap();
        let b = synthesize_pair(&x, &corpus, &cfg, None, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1, x);
        assert!(a.0.len() >= x.len());
        let all = synthesize_corpus(&corpus, &cfg, None).unwrap();
        assert_eq!(all, synthesize_corpus(&corpus, &cfg, None).unwrap());
        assert!(all.iter().zip(&corpus).all(|(p, c)| &p.1 == c));
    }
}
