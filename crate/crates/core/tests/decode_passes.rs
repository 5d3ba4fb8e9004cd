mod common;

use common::{rng, tiny_config, words};
use textcomp::autodiff::Graph;
use textcomp::etc::{beam_search_compress, compression_cap, joint_greedy_compress, BeamConfig};
use textcomp::itc::{ItcConfig, ItcModule};
use textcomp::transformer::{Embedding, Encoder, Seq2Seq};
use textcomp::ParamStore;

const VOCAB: usize = 30;

#[test]
fn itc_decodes_in_one_pass_for_any_length() {
    let model = tiny_config(VOCAB, 16, 1);
    let mut store = ParamStore::new();
    let mut r = rng(1);
    let embed = Embedding::new(&mut store, "embed", &model, &mut r).unwrap();
    let encoder = Encoder::new(&mut store, "encoder", &model, &mut r).unwrap();
    let cfg = ItcConfig {
        d_model: 16,
        d_ff: 32,
        heads: 2,
        ..ItcConfig::default()
    };
    let itc = ItcModule::new(&mut store, "itc", &cfg, &model, false, &mut r).unwrap();
    for len in [3, 10, 40] {
        itc.reset_decoder_passes();
        let mut g = Graph::inference(&store);
        let x = vec![words(&mut r, len, VOCAB), words(&mut r, len / 2 + 1, VOCAB)];
        let enc = encoder.encode(&mut g, &embed, &x, None).unwrap();
        let out = itc.forward(&mut g, &enc).unwrap();
        assert_eq!(itc.decoder_passes(), 1);
        assert_eq!(out.selected[0].len(), compression_cap(len, cfg.gamma));
    }
}

#[test]
fn etc_decodes_once_per_output_step() {
    let mut store = ParamStore::new();
    let model = Seq2Seq::new(&mut store, "etc", &tiny_config(VOCAB, 16, 1), false, &mut rng(2)).unwrap();
    let mut r = rng(3);
    for len in [4, 9, 17] {
        let x = words(&mut r, len, VOCAB);
        model.reset_decoder_passes();
        let c = beam_search_compress(&model, &store, &x, &BeamConfig::default()).unwrap();
        // One pass per emitted token, plus the step that chose EOS unless
        // the cap ended decoding.
        let cap = compression_cap(len, BeamConfig::default().gamma);
        let passes = model.decoder_passes();
        assert!(passes >= c.len() && passes <= cap, "len {len}: {passes} passes for {} tokens", c.len());

        model.reset_decoder_passes();
        let mut g = Graph::new(&store);
        let jc = joint_greedy_compress(&model, &mut g, &[x.clone()], 0.6).unwrap();
        assert_eq!(jc.tokens[0].len(), compression_cap(len, 0.6));
        // Greedy steps plus the teacher-forced pass.
        assert_eq!(model.decoder_passes(), jc.tokens[0].len() + 1);
    }
}
