use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[model]
layers = 1
d_model = 16
d_ff = 32
heads = 2

[train]
epochs = 1
compressor_epochs = 1
batch_size = 8

[data]
n_train = 24
n_test = 6

[beam]
beam_size = 2
"#;

fn textcomp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textcomp"))
        .current_dir(dir)
        .env_remove("TEXTCOMP_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn seed_of(snapshot: &Path) -> u64 {
    let text = fs::read_to_string(snapshot).unwrap();
    let line = text.lines().find(|l| l.starts_with("seed = ")).unwrap();
    line["seed = ".len()..].parse().unwrap()
}

#[test]
fn train_writes_a_run_directory_that_compress_and_translate_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.toml"), TINY).unwrap();
    let out = textcomp(d, &["train", "-c", "c.toml", "--kind", "translate", "--manner", "etc-pipeline", "--fusion", "bbf", "-o", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("token_acc"));
    for f in ["config.toml", "vocab.txt", "model.ckpt", "train_log.tsv", "metrics.txt"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let snapshot = fs::read_to_string(d.join("run/config.toml")).unwrap();
    assert!(snapshot.contains("manner = \"etc-pipeline\""));

    fs::write(d.join("in.txt"), "fl1 kw2 fl3 kw4\nkw5 fl6\n").unwrap();
    let c = textcomp(d, &["compress", "-r", "run", "-i", "in.txt", "--gamma", "0.5"]);
    assert!(c.status.success());
    let lines: Vec<String> = stdout(&c).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].split_whitespace().count() <= 2);
    assert!(lines[1].split_whitespace().count() == 1);

    let t = textcomp(d, &["translate", "-r", "run", "-i", "in.txt", "-o", "out.txt"]);
    assert!(t.status.success());
    assert_eq!(fs::read_to_string(d.join("out.txt")).unwrap().lines().count(), 2);
    let again = textcomp(d, &["translate", "-r", "run", "-i", "in.txt", "-o", "out2.txt"]);
    assert!(again.status.success());
    assert_eq!(fs::read(d.join("out.txt")).unwrap(), fs::read(d.join("out2.txt")).unwrap());
}

#[test]
fn seed_comes_from_flag_then_file_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let no_seed = TINY.replace("seed = 5", "");
    fs::write(d.join("with.toml"), TINY).unwrap();
    fs::write(d.join("without.toml"), &no_seed).unwrap();
    let run = |args: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_textcomp"));
        cmd.current_dir(d).env_remove("TEXTCOMP_SEED").args(args).args(["--epochs", "0", "--compressor-epochs", "0"]);
        if let Some(v) = env {
            cmd.env("TEXTCOMP_SEED", v);
        }
        assert!(cmd.output().unwrap().status.success());
    };
    run(&["train", "-c", "without.toml", "-o", "a"], Some("9"));
    run(&["train", "-c", "with.toml", "-o", "b"], Some("9"));
    run(&["train", "-c", "with.toml", "--seed", "3", "-o", "c"], Some("9"));
    run(&["train", "-c", "without.toml", "-o", "e"], None);
    assert_eq!(seed_of(&d.join("a/config.toml")), 9);
    assert_eq!(seed_of(&d.join("b/config.toml")), 5);
    assert_eq!(seed_of(&d.join("c/config.toml")), 3);
    assert_eq!(seed_of(&d.join("e/config.toml")), 0);
}

#[test]
fn evaluate_prints_key_values_and_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("p.txt"), "the cat was found under the bed\n").unwrap();
    fs::write(d.join("r.txt"), "the cat was under the bed\n").unwrap();
    let out = textcomp(d, &["evaluate", "-p", "p.txt", "-r", "r.txt"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("rouge1.precision=0.857143"));
    assert!(text.contains("rouge2.recall=0.800000"));
    assert!(text.lines().any(|l| l.starts_with("metric")));
    assert!(text.lines().any(|l| l.starts_with("rougeL ")));

    let self_bleu = textcomp(d, &["evaluate", "-p", "p.txt", "-r", "p.txt", "-m", "bleu", "--report", "k.txt"]);
    assert!(self_bleu.status.success());
    assert!(fs::read_to_string(d.join("k.txt")).unwrap().contains("bleu.score=100.000000"));
}

#[test]
fn exit_codes_separate_config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "seed = \"x\"\n").unwrap();
    assert_eq!(textcomp(d, &["train", "-c", "bad.toml"]).status.code(), Some(2));
    fs::write(d.join("c.toml"), TINY).unwrap();
    assert_eq!(textcomp(d, &["train", "-c", "c.toml", "--gamma", "1.5"]).status.code(), Some(2));
    assert_eq!(textcomp(d, &["train", "-c", "c.toml", "--kind", "span", "--manner", "etc-pipeline", "--fusion", "bbf"]).status.code(), Some(2));

    fs::write(d.join("one.txt"), "a b\n").unwrap();
    fs::write(d.join("two.txt"), "a b\nc d\n").unwrap();
    assert_eq!(textcomp(d, &["evaluate", "-p", "one.txt", "-r", "missing.txt"]).status.code(), Some(3));
    assert_eq!(textcomp(d, &["evaluate", "-p", "one.txt", "-r", "two.txt"]).status.code(), Some(3));
    assert_eq!(textcomp(d, &["compress", "-r", "no-such-run", "-i", "one.txt"]).status.code(), Some(3));
    fs::write(d.join("empty.txt"), "").unwrap();
    assert_eq!(textcomp(d, &["synthesize-noise", "-i", "empty.txt", "-o", "pairs.tsv"]).status.code(), Some(3));
}

#[test]
fn noise_synthesis_writes_tab_separated_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("corpus.txt"), "the cat sat on the mat .\na dog ran .\nbirds sing at dawn .\n").unwrap();
    let out = textcomp(d, &["synthesize-noise", "-i", "corpus.txt", "-o", "pairs.tsv", "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pairs = fs::read_to_string(d.join("pairs.tsv")).unwrap();
    assert_eq!(pairs.lines().count(), 3);
    assert!(pairs.lines().all(|l| l.split('\t').count() == 2));
    let again = textcomp(d, &["synthesize-noise", "-i", "corpus.txt", "-o", "pairs2.tsv", "--seed", "4"]);
    assert!(again.status.success());
    assert_eq!(pairs, fs::read_to_string(d.join("pairs2.tsv")).unwrap());
}

#[test]
fn sweep_snapshots_config_and_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.toml"), TINY).unwrap();
    let out = textcomp(d, &["sweep-gamma", "-c", "c.toml", "--kind", "compress", "--grid", "0.4,1.0", "-o", "sw"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("sw/config.toml").exists());
    let table = fs::read_to_string(d.join("sw/results.tsv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().starts_with("0.4\t"));
}
