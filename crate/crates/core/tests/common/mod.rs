//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use textcomp::autodiff::Graph;
use textcomp::data::vocab::TokenId;
use textcomp::data::vocab::EOS;
use textcomp::etc::emittable;
use textcomp::gradcheck::{check, CheckOptions};
use textcomp::transformer::{ModelConfig, Seq2Seq};
use textcomp::{ParamStore, Result, Tensor, Var};

/// First non-reserved token id.
pub const FIRST_WORD: TokenId = 6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_config(vocab: usize, d: usize, layers: usize) -> ModelConfig {
    ModelConfig::with_dims(layers, d, 2 * d, 2, vocab)
}

/// Random word sequence with ids in `FIRST_WORD..vocab`.
pub fn words<R: Rng>(rng: &mut R, len: usize, vocab: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(FIRST_WORD..vocab as TokenId)).collect()
}

/// Checks the gradient of `Σ f(inputs) ⊙ R` with respect to random inputs
/// of the given shapes; returns the largest relative error.
pub fn op_error<F>(shapes: &[(usize, usize)], seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| store.add(format!("in{i}"), Tensor::uniform(&[a, b], 1.0, &mut r)).unwrap())
        .collect();
    let probe = {
        let mut g = Graph::inference(&store);
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let out = f(&mut g, &vars).unwrap();
        let (a, b) = g.shape(out);
        Tensor::uniform(&[a, b], 1.0, &mut r)
    };
    let report = check(&store, None, &CheckOptions::default(), |g| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let out = f(g, &vars)?;
        let p = g.constant(probe.clone())?;
        let weighted = g.mul(out, p)?;
        g.sum(weighted)
    })
    .unwrap();
    report.max_rel_err
}

/// Exhaustive search over every compression of length `1..=cap` built from
/// emittable tokens. A sequence shorter than the cap pays for its EOS; one
/// that reaches the cap completes without it. Returns the best sequence and
/// its log-probability.
pub fn brute_force_compress(model: &Seq2Seq, params: &ParamStore, x: &[TokenId], cap: usize) -> (Vec<TokenId>, f64) {
    let mut g = Graph::inference(params);
    let enc = model.encode(&mut g, &[x.to_vec()], None).unwrap();
    let memory = g.value(enc.hidden).clone();
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((seq, logp)) = stack.pop() {
        let prefix: Vec<TokenId> = std::iter::once(textcomp::data::vocab::BOS).chain(seq.iter().copied()).collect();
        let step = model.decode_step(params, &prefix, &memory, x.len()).unwrap();
        let lp: Vec<f64> = step.distribution.iter().map(|p| p.ln()).collect();
        if !seq.is_empty() {
            let done = logp + lp[EOS as usize];
            if done > best.1 {
                best = (seq.clone(), done);
            }
        }
        for (t, &l) in lp.iter().enumerate() {
            let t = t as TokenId;
            if !emittable(t) {
                continue;
            }
            let mut next = seq.clone();
            next.push(t);
            if next.len() == cap {
                if logp + l > best.1 {
                    best = (next, logp + l);
                }
            } else {
                stack.push((next, logp + l));
            }
        }
    }
    best
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn brute_lcs<T: Eq>(a: &[T], b: &[T]) -> usize {
    let is_subseq = |idx: &[usize]| {
        let mut j = 0;
        for &i in idx {
            while j < b.len() && b[j] != a[i] {
                j += 1;
            }
            if j == b.len() {
                return false;
            }
            j += 1;
        }
        true
    };
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let idx: Vec<usize> = (0..a.len()).filter(|&i| mask >> i & 1 == 1).collect();
        if idx.len() > best && is_subseq(&idx) {
            best = idx.len();
        }
    }
    best
}

/// A run small enough for a unit-test budget.
pub fn tiny_run(kind: textcomp::tasks::TaskKind, manner: textcomp::tasks::Manner, fusion: textcomp::fusion::FusionMode) -> textcomp::config::RunConfig {
    let mut cfg = textcomp::config::RunConfig::default();
    cfg.seed = 17;
    cfg.task.kind = kind;
    cfg.task.manner = manner;
    cfg.task.fusion = fusion;
    cfg.task.itc.d_model = 16;
    cfg.task.itc.d_ff = 32;
    cfg.task.itc.heads = 2;
    cfg.task.itc.layers = 1;
    cfg.model.layers = 1;
    cfg.model.d_model = 16;
    cfg.model.d_ff = 32;
    cfg.model.heads = 2;
    cfg.data.n_train = 24;
    cfg.data.n_test = 6;
    cfg.data.synthetic.max_len = 12;
    cfg.train.epochs = 2;
    cfg.train.compressor_epochs = 1;
    cfg.train.unsupervised_epochs = 1;
    cfg.train.batch_size = 8;
    cfg.beam.beam_size = 2;
    cfg
}
