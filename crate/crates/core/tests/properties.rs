mod common;

use common::{rng, tiny_config, words};
use proptest::prelude::*;
use textcomp::autodiff::Graph;
use textcomp::data::noise::{noise_shuffle, noise_word_dropout, pair_rng, ShuffleLevel};
use textcomp::data::vocab::PAD;
use textcomp::etc::{baseline_compress, compression_cap, BaselineMode};
use textcomp::itc::{select_top_k, top_k_size};
use textcomp::transformer::{Embedding, Encoder, Seq2Seq};
use textcomp::ParamStore;

const VOCAB: usize = 40;

proptest! {
    #[test]
    fn ratio_law(n in 1usize..64, k in 1u32..=20) {
        let gamma = f64::from(k) / 20.0;
        let cap = compression_cap(n, gamma);
        prop_assert_eq!(cap, (k as usize * n).div_ceil(20).max(1));
        prop_assert_eq!(top_k_size(n, gamma), cap);
    }

    #[test]
    fn top_k_is_sorted_and_sized(p in prop::collection::vec(0.0f64..1.0, 1..40), k in 1u32..=20) {
        let gamma = f64::from(k) / 20.0;
        let sel = select_top_k(&p, gamma).unwrap();
        prop_assert_eq!(sel.len(), compression_cap(p.len(), gamma));
        prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
        let floor = sel.iter().map(|&i| p[i]).fold(f64::INFINITY, f64::min);
        let unselected_max = (0..p.len()).filter(|i| !sel.contains(i)).map(|i| p[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(floor >= unselected_max);
    }

    #[test]
    fn baselines_keep_input_order(seed in 0u64..1000, n in 1usize..30) {
        let x = words(&mut rng(seed), n, VOCAB);
        let r = baseline_compress(&x, BaselineMode::RandSample, 0.4, &mut pair_rng(seed, 0)).unwrap();
        prop_assert_eq!(r.len(), compression_cap(n, 0.4).min(n));
        let mut j = 0;
        for t in &r {
            while x[j] != *t { j += 1; }
            j += 1;
        }
        let again = baseline_compress(&x, BaselineMode::RandSample, 0.4, &mut pair_rng(seed, 0)).unwrap();
        prop_assert_eq!(r, again);
    }

    #[test]
    fn noise_preserves_multisets(seed in 0u64..1000, n in 1usize..25) {
        let x = words(&mut rng(seed), n, VOCAB);
        let s = noise_shuffle(&x, n, ShuffleLevel::Token, None, &mut pair_rng(seed, 1));
        let mut a = x.clone();
        let mut b = s.clone();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
        let d = noise_word_dropout(&x, 0.5, &mut pair_rng(seed, 2));
        prop_assert!(!d.is_empty() && d.len() <= n);
    }
}

fn encoder() -> (ParamStore, Embedding, Encoder) {
    let model = tiny_config(VOCAB, 16, 2);
    let mut store = ParamStore::new();
    let mut r = rng(7);
    let embed = Embedding::new(&mut store, "e", &model, &mut r).unwrap();
    let enc = Encoder::new(&mut store, "enc", &model, &mut r).unwrap();
    (store, embed, enc)
}

#[test]
fn padding_does_not_change_real_rows() {
    let (store, embed, enc) = encoder();
    let x = words(&mut rng(1), 6, VOCAB);
    let mut g = Graph::inference(&store);
    let plain = enc.encode(&mut g, &embed, &[x.clone()], None).unwrap();
    let plain = g.value(plain.hidden).clone();
    let mut padded = x.clone();
    padded.extend([PAD; 4]);
    let mask: Vec<bool> = (0..10).map(|i| i < 6).collect();
    let st = enc.encode(&mut g, &embed, &[padded], Some(&[mask])).unwrap();
    let h = g.value(st.hidden);
    for i in 0..6 {
        for (a, b) in plain.row(i).iter().zip(h.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn batching_does_not_mix_sequences() {
    let (store, embed, enc) = encoder();
    let a = words(&mut rng(2), 5, VOCAB);
    let b = words(&mut rng(3), 8, VOCAB);
    let mut g = Graph::inference(&store);
    let alone = enc.encode(&mut g, &embed, &[a.clone()], None).unwrap();
    let alone = g.value(alone.hidden).clone();
    let both = enc.encode(&mut g, &embed, &[b, a], None).unwrap();
    let h = g.value(both.hidden);
    for i in 0..5 {
        for (x, y) in alone.row(i).iter().zip(h.row(8 + i)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn decoder_is_causal() {
    let mut store = ParamStore::new();
    let model = Seq2Seq::new(&mut store, "s", &tiny_config(VOCAB, 16, 2), false, &mut rng(5)).unwrap();
    let x = words(&mut rng(6), 7, VOCAB);
    let mut g = Graph::inference(&store);
    let enc = model.encode(&mut g, &[x.clone()], None).unwrap();
    let memory = g.value(enc.hidden).clone();
    let mut prefix = vec![textcomp::data::vocab::BOS];
    prefix.extend(words(&mut rng(8), 4, VOCAB));
    let full = model.decode_step(&store, &prefix, &memory, x.len()).unwrap();
    let mut changed = prefix.clone();
    changed.push(9);
    let mut g = Graph::inference(&store);
    let mem = g.constant(memory.clone()).unwrap();
    let layout = textcomp::transformer::RowLayout::from_lengths(&[x.len()]);
    let memo = textcomp::transformer::Memory {
        hidden: mem,
        layout: &layout,
    };
    let (out, _) = model.decode(&mut g, &[changed], memo, None, false).unwrap();
    let h = g.value(out.hidden);
    for (a, b) in full.output.iter().zip(h.row(prefix.len() - 1)) {
        assert!((a - b).abs() < 1e-12);
    }
}
