mod common;

use common::{brute_force_compress, rng, tiny_config, words};
use textcomp::etc::{beam_search_compress, compression_cap, BeamConfig, Seq2SeqStep, StepModel};
use textcomp::transformer::Seq2Seq;
use textcomp::ParamStore;

/// Four emittable words after the six reserved ids.
const VOCAB: usize = 10;

fn exhaustive_beam() -> BeamConfig {
    BeamConfig {
        beam_size: 4 + 16 + 64,
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.6,
    }
}

#[test]
fn wide_beam_equals_brute_force() {
    for seed in 0..25 {
        let mut store = ParamStore::new();
        let model = Seq2Seq::new(&mut store, "etc", &tiny_config(VOCAB, 16, 1), false, &mut rng(seed)).unwrap();
        let x = words(&mut rng(1000 + seed), 5, VOCAB);
        assert_eq!(compression_cap(x.len(), 0.6), 3);
        let beam = beam_search_compress(&model, &store, &x, &exhaustive_beam()).unwrap();
        let (best, _) = brute_force_compress(&model, &store, &x, 3);
        assert_eq!(beam, best, "seed {seed}");
    }
}

#[test]
fn batched_step_matches_single_prefix_step() {
    let mut store = ParamStore::new();
    let model = Seq2Seq::new(&mut store, "etc", &tiny_config(VOCAB, 16, 2), false, &mut rng(4)).unwrap();
    let x = words(&mut rng(5), 6, VOCAB);
    let step = Seq2SeqStep::new(&model, &store, &x).unwrap();
    let prefixes = vec![vec![], vec![7], vec![8, 9]];
    let outs = step.step(&prefixes).unwrap();
    let mut g = textcomp::Graph::inference(&store);
    let enc = model.encode(&mut g, &[x.clone()], None).unwrap();
    let memory = g.value(enc.hidden).clone();
    for (p, out) in prefixes.iter().zip(&outs) {
        let full: Vec<u32> = std::iter::once(textcomp::data::vocab::BOS).chain(p.iter().copied()).collect();
        let single = model.decode_step(&store, &full, &memory, x.len()).unwrap();
        for (a, b) in out.logprobs.iter().zip(&single.distribution) {
            assert!((a - b.ln()).abs() < 1e-10);
        }
        for (a, b) in out.attention.iter().zip(&single.cross_attention) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn outputs_respect_the_cap() {
    let mut store = ParamStore::new();
    let model = Seq2Seq::new(&mut store, "etc", &tiny_config(20, 16, 1), false, &mut rng(8)).unwrap();
    let mut r = rng(9);
    for len in 1..20 {
        let x = words(&mut r, len, 20);
        for gamma in [0.1, 0.35, 0.6, 1.0] {
            let cfg = BeamConfig {
                gamma,
                ..BeamConfig::default()
            };
            let c = beam_search_compress(&model, &store, &x, &cfg).unwrap();
            assert!(!c.is_empty() && c.len() <= compression_cap(len, gamma));
            assert!(c.iter().all(|&t| textcomp::etc::emittable(t)));
        }
    }
}
