mod common;

use common::{op_error, rng, tiny_config, words};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textcomp::autodiff::{AttnMask, AttnSpec};
use textcomp::fusion::FusionMode;
use textcomp::gradcheck::{check, CheckOptions};
use textcomp::tasks::{Compressed, Manner, TaskConfig, TaskKind, TaskModel, TaskSample};
use textcomp::ParamStore;

const OP_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

fn assert_op(name: &str, err: f64) {
    assert!(err < OP_TOL, "{name}: relative error {err:e}");
}

#[test]
fn elementwise_and_matrix_ops() {
    assert_op("matmul", op_error(&[(3, 4), (4, 5)], 1, |g, v| g.matmul(v[0], v[1])));
    assert_op("matmul_t", op_error(&[(3, 4), (5, 4)], 2, |g, v| g.matmul_t(v[0], v[1])));
    assert_op("transpose", op_error(&[(3, 4)], 3, |g, v| g.transpose(v[0])));
    assert_op("add", op_error(&[(2, 3), (2, 3)], 4, |g, v| g.add(v[0], v[1])));
    assert_op("sub", op_error(&[(2, 3), (2, 3)], 5, |g, v| g.sub(v[0], v[1])));
    assert_op("mul", op_error(&[(2, 3), (2, 3)], 6, |g, v| g.mul(v[0], v[1])));
    assert_op("add_row", op_error(&[(3, 4), (1, 4)], 7, |g, v| g.add_row(v[0], v[1])));
    assert_op("scale", op_error(&[(2, 3)], 8, |g, v| g.scale(v[0], -1.7)));
    assert_op("one_minus", op_error(&[(2, 3)], 9, |g, v| g.one_minus(v[0])));
    assert_op("gelu", op_error(&[(3, 4)], 10, |g, v| g.gelu(v[0])));
    assert_op("sigmoid", op_error(&[(3, 4)], 11, |g, v| g.sigmoid(v[0])));
    assert_op("sum", op_error(&[(3, 4)], 12, |g, v| g.sum(v[0])));
    assert_op("mean", op_error(&[(3, 4)], 13, |g, v| g.mean(v[0])));
}

#[test]
fn normalization_ops() {
    assert_op("softmax", op_error(&[(3, 5)], 20, |g, v| g.softmax_rows(v[0])));
    let mask = vec![true, false, true, true, false, false, true, true, true, true, true, false, false, false, true];
    assert_op(
        "softmax_masked",
        op_error(&[(3, 5)], 21, move |g, v| g.softmax_rows_masked(v[0], Some(mask.clone()))),
    );
    assert_op(
        "layer_norm",
        op_error(&[(3, 6), (1, 6), (1, 6)], 22, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
    );
}

#[test]
fn row_and_column_ops() {
    assert_op("gather_rows", op_error(&[(6, 4)], 30, |g, v| g.gather_rows(v[0], &[0, 3, 3, 5])));
    assert_op("concat_cols", op_error(&[(3, 2), (3, 4)], 31, |g, v| g.concat_cols(&[v[0], v[1]])));
    assert_op("slice_cols", op_error(&[(3, 6)], 32, |g, v| g.slice_cols(v[0], 1..4)));
    assert_op("concat_rows", op_error(&[(2, 3), (4, 3)], 33, |g, v| g.concat_rows(&[v[0], v[1]])));
    assert_op("select_rows", op_error(&[(4, 3)], 34, |g, v| g.select_rows(v[0], &[2, 0, 2])));
    assert_op("slice_rows", op_error(&[(5, 3)], 35, |g, v| g.slice_rows(v[0], 1..4)));
    assert_op("scale_rows", op_error(&[(3, 3)], 36, |g, v| g.scale_rows(v[0], &[0.5, 0.0, 2.0])));
}

#[test]
fn detach_blocks_only_its_path() {
    let mut store = ParamStore::new();
    let w = store.add("w", textcomp::Tensor::new(vec![1, 3], vec![0.5, -2.0, 3.0]).unwrap()).unwrap();
    let mut g = textcomp::Graph::new(&store);
    let x = g.param(w);
    let d = g.detach(x).unwrap();
    let prod = g.mul(d, x).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w), &[0.5, -2.0, 3.0]);
}

#[test]
fn dropout() {
    assert_op(
        "dropout",
        op_error(&[(4, 5)], 41, |g, v| {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            g.dropout(v[0], 0.3, &mut r)
        }),
    );
}

#[test]
fn losses() {
    assert_op(
        "cross_entropy",
        op_error(&[(4, 5)], 50, |g, v| g.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)], None)),
    );
    let mask = vec![
        true, true, false, true, true, //
        true, true, true, true, true, //
        false, true, true, true, true, //
        true, false, true, true, false,
    ];
    assert_op(
        "cross_entropy_masked",
        op_error(&[(4, 5)], 51, move |g, v| {
            g.cross_entropy(v[0], &[Some(1), Some(2), Some(4), Some(0)], Some(&mask))
        }),
    );
    assert_op(
        "bce_with_logits",
        op_error(&[(2, 3)], 52, |g, v| g.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0], 0.7)),
    );
}

fn attention_spec(mask: AttnMask, key_valid: Option<Vec<bool>>) -> AttnSpec {
    AttnSpec {
        heads: 2,
        scale: 0.5,
        q_segs: vec![0..2, 2..5],
        k_segs: vec![0..3, 3..6],
        mask,
        key_valid,
    }
}

#[test]
fn attention_variants() {
    let shapes = [(5, 4), (6, 4), (6, 6)];
    assert_op(
        "attention",
        op_error(&shapes, 60, |g, v| g.attention(v[0], v[1], v[2], attention_spec(AttnMask::None, None))),
    );
    let valid = vec![true, false, true, true, true, false];
    assert_op(
        "attention_key_valid",
        op_error(&shapes, 61, move |g, v| {
            g.attention(v[0], v[1], v[2], attention_spec(AttnMask::None, Some(valid.clone())))
        }),
    );
    assert_op(
        "attention_causal",
        op_error(&[(4, 4), (4, 4), (4, 2)], 62, |g, v| {
            let mut spec = AttnSpec::single(4, 4, 2, 0.7);
            spec.mask = AttnMask::Causal;
            g.attention(v[0], v[1], v[2], spec)
        }),
    );
    let explicit = vec![true, false, true, false, true, true, true, true, false];
    assert_op(
        "attention_explicit",
        op_error(&[(3, 2), (3, 2), (3, 4)], 63, move |g, v| {
            let mut spec = AttnSpec::single(3, 3, 1, 1.0);
            spec.mask = AttnMask::Explicit(explicit.clone());
            g.attention(v[0], v[1], v[2], spec)
        }),
    );
}

fn translate_batch(seed: u64, vocab: usize) -> (Vec<TaskSample>, Vec<Vec<u32>>) {
    let mut r = rng(seed);
    let samples = (0..2)
        .map(|i| TaskSample::Translate {
            source: words(&mut r, 5 + i, vocab),
            target: words(&mut r, 3 + i, vocab),
        })
        .collect();
    let comp = (0..2).map(|i| words(&mut r, 2 + i, vocab)).collect();
    (samples, comp)
}

fn model_error(manner: Manner, fusion: FusionMode) -> f64 {
    let vocab = 14;
    let model = tiny_config(vocab, 32, 2);
    let cfg = TaskConfig {
        kind: TaskKind::Translate,
        fusion,
        manner,
        gamma: 0.6,
        ..TaskConfig::default()
    };
    let mut store = ParamStore::new();
    let task = TaskModel::new(&mut store, &cfg, &model, &mut rng(3)).unwrap();
    let (samples, comp) = translate_batch(4, vocab);
    // Joint ETC states carry detached cross contexts, which finite
    // differences see through, so only the task side is compared there.
    let ids: Vec<_> = task
        .task_params(&store)
        .into_iter()
        .filter(|&id| manner != Manner::EtcJoint || store.name(id).starts_with("task."))
        .collect();
    let opts = CheckOptions {
        per_param: Some(3),
        seed: 5,
        ..CheckOptions::default()
    };
    let report = check(&store, Some(&ids), &opts, |g| {
        let c = if manner == Manner::EtcPipeline {
            Compressed::Tokens(&comp)
        } else {
            Compressed::None
        };
        task.loss(g, &samples, c)
    })
    .unwrap();
    assert!(report.checked > 100);
    report.max_rel_err
}

#[test]
fn full_bbf_translation_model() {
    let err = model_error(Manner::EtcPipeline, FusionMode::Bbf);
    assert!(err < MODEL_TOL, "pipeline BBF: {err:e}");
}

#[test]
fn joint_manners() {
    for manner in [Manner::EtcJoint, Manner::ItcJoint] {
        let err = model_error(manner, FusionMode::Bbf);
        assert!(err < MODEL_TOL, "{manner}: {err:e}");
    }
    let err = model_error(Manner::EtcPipeline, FusionMode::Bdf);
    assert!(err < MODEL_TOL, "pipeline BDF: {err:e}");
}
