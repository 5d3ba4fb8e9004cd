mod common;

use common::tiny_run;
use textcomp::checkpoint;
use textcomp::config::Setting;
use textcomp::experiments::{ablate_quality, format_ablation, run_train, sweep_gamma, AblationOptions, RunOptions, RunResult};
use textcomp::fusion::FusionMode;
use textcomp::tasks::{Manner, TaskKind};
use textcomp::{Error, Graph};

fn run(cfg: &textcomp::config::RunConfig) -> RunResult {
    run_train(cfg, &RunOptions::default()).unwrap()
}

fn bits(r: &RunResult) -> Vec<u64> {
    r.log.iter().map(|l| l.loss.to_bits()).collect()
}

fn assert_same(a: &RunResult, b: &RunResult) {
    assert_eq!(bits(a), bits(b));
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.test_compressions, b.test_compressions);
    for ((_, n, x), (_, _, y)) in a.store.iter().zip(b.store.iter()) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()), "{n}");
    }
}

#[test]
fn every_manner_trains_deterministically() {
    let cases = [
        (TaskKind::Translate, Manner::None, FusionMode::None),
        (TaskKind::Translate, Manner::EtcPipeline, FusionMode::Bbf),
        (TaskKind::Translate, Manner::EtcJoint, FusionMode::Bdf),
        (TaskKind::Translate, Manner::ItcJoint, FusionMode::Bbf),
        (TaskKind::Span, Manner::ItcJoint, FusionMode::Bef),
        (TaskKind::Choice, Manner::EtcPipeline, FusionMode::Bef),
        (TaskKind::Compress, Manner::None, FusionMode::None),
    ];
    for (kind, manner, fusion) in cases {
        let cfg = tiny_run(kind, manner, fusion);
        let a = run(&cfg);
        let b = run(&cfg);
        assert!(a.log.iter().all(|l| l.loss.is_finite()), "{kind} {manner}");
        assert!(!a.metrics.is_empty());
        assert_same(&a, &b);
    }
}

#[test]
fn seeds_change_the_run() {
    let cfg = tiny_run(TaskKind::Translate, Manner::None, FusionMode::None);
    let other = textcomp::config::RunConfig { seed: 18, ..cfg.clone() };
    assert_ne!(bits(&run(&cfg)), bits(&run(&other)));
}

#[test]
fn loss_falls_on_the_toy_translation_task() {
    let mut cfg = tiny_run(TaskKind::Translate, Manner::None, FusionMode::None);
    cfg.data.n_train = 120;
    cfg.train.epochs = 8;
    cfg.optim.lr = 3e-3;
    let r = run(&cfg);
    let epoch_mean = |e: usize| {
        let v: Vec<f64> = r.log.iter().filter(|l| l.epoch == e).map(|l| l.loss).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(epoch_mean(7) < 0.7 * epoch_mean(0), "{} vs {}", epoch_mean(7), epoch_mean(0));
}

#[test]
fn semi_setting_runs_unsupervised_before_supervised() {
    let mut cfg = tiny_run(TaskKind::Translate, Manner::EtcPipeline, FusionMode::Bbf);
    cfg.train.setting = Setting::Semi;
    let r = run(&cfg);
    let mut phases: Vec<&str> = r.log.iter().map(|l| l.phase).collect();
    phases.dedup();
    assert_eq!(phases, ["compress-unsup", "compress-sup", "task"]);
    let epochs: Vec<usize> = r.log.iter().map(|l| l.epoch).collect();
    assert!(epochs.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn pipeline_freezes_the_compressor() {
    let mut cfg = tiny_run(TaskKind::Translate, Manner::EtcPipeline, FusionMode::Bbf);
    cfg.train.compressor_epochs = 0;
    let r = run(&cfg);
    let mut fresh = cfg.clone();
    fresh.train.epochs = 0;
    let untouched = run(&fresh);
    for ((_, name, a), (_, _, b)) in r.store.iter().zip(untouched.store.iter()) {
        if name.starts_with("etc.") {
            assert_eq!(a, b, "{name}");
        }
    }
}

#[test]
fn joint_etc_gradient_reaches_the_compressor_decoder_only() {
    let cfg = tiny_run(TaskKind::Translate, Manner::EtcJoint, FusionMode::Bbf);
    let r = run(&cfg);
    let task = r.models.task.as_ref().unwrap();
    let samples = &r.data.train[..4];
    let mut g = Graph::new(&r.store);
    let loss = task.loss(&mut g, samples, textcomp::tasks::Compressed::None).unwrap();
    let grads = g.backward(loss).unwrap();
    let norm = |prefix: &str| -> f64 {
        r.store
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| grads.get(id).iter().map(|v| v * v).sum::<f64>())
            .sum()
    };
    assert_eq!(norm("etc.encoder"), 0.0);
    assert_eq!(norm("etc.embed"), 0.0);
    assert!(norm("etc.decoder") > 0.0);
    assert!(norm("task.") > 0.0);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut cfg = tiny_run(TaskKind::Translate, Manner::EtcPipeline, FusionMode::Bbf);
    cfg.train.epochs = 3;
    let full_dir = tempfile::tempdir().unwrap();
    let full = run_train(
        &cfg,
        &RunOptions {
            out_dir: Some(full_dir.path().to_path_buf()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        stop_after: Some(2),
        ..RunOptions::default()
    };
    let part = run_train(&cfg, &opts).unwrap();
    assert_eq!(part.epochs_done, 2);
    let resumed = run_train(
        &cfg,
        &RunOptions {
            resume: true,
            stop_after: None,
            ..opts
        },
    )
    .unwrap();
    assert_eq!(resumed.epochs_done, 4);
    assert_same(&full, &resumed);
    let a = std::fs::read(full_dir.path().join("train_log.tsv")).unwrap();
    let b = std::fs::read(dir.path().join("train_log.tsv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let cfg = tiny_run(TaskKind::Span, Manner::None, FusionMode::None);
    let r = run(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    checkpoint::save(&r.store, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.len(), r.store.len());
    for ((_, n1, a), (_, n2, b)) in r.store.iter().zip(back.iter()) {
        assert_eq!(n1, n2);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    checkpoint::save(&back, dir.path().join("q.ckpt")).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("q.ckpt")).unwrap());
}

#[test]
fn invalid_configs_fail_before_training() {
    let cfg = tiny_run(TaskKind::Span, Manner::EtcPipeline, FusionMode::Bbf);
    assert!(matches!(run_train(&cfg, &RunOptions::default()), Err(Error::Config(_))));
    let cfg = tiny_run(TaskKind::Translate, Manner::EtcPipeline, FusionMode::None);
    assert!(matches!(run_train(&cfg, &RunOptions::default()), Err(Error::Config(_))));
}

#[test]
fn sweep_rows_follow_the_grid() {
    let cfg = tiny_run(TaskKind::Compress, Manner::None, FusionMode::None);
    let grid = [1.0, 0.2, 0.6];
    let rows = sweep_gamma(&cfg, &grid, false).unwrap();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), grid);
    let single = sweep_gamma(&cfg, &[0.6], false).unwrap();
    assert_eq!(single[0].1, rows[2].1);
    assert!(sweep_gamma(&cfg, &[0.0], false).is_err());
}

#[test]
fn ablation_reports_every_row() {
    let mut cfg = tiny_run(TaskKind::Translate, Manner::None, FusionMode::None);
    cfg.train.epochs = 1;
    let opts = AblationOptions {
        seeds: vec![1, 2],
        include_itc: true,
        verbose: false,
    };
    let rows = ablate_quality(&cfg, &opts).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["baseline", "alltext", "f8w", "randsample", "etc-pipeline", "itc-joint"]);
    assert!(rows.iter().all(|r| r.per_seed.len() == 2 && r.metric == "token_acc"));
    let again = ablate_quality(&cfg, &opts).unwrap();
    assert_eq!(rows, again);
    let table = format_ablation(&rows);
    assert_eq!(table.lines().count(), 7);
}
