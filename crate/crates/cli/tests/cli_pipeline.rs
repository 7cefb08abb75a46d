use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/mini_fixture.csv")
}

fn sesshet(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sesshet"))
        .env("SESSHET_DATA_DIR", data)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(data: &Path, args: &[&str]) -> String {
    let out = sesshet(data, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// prepare, pretrain and train on the fixture with small settings.
fn pipeline(data: &Path) {
    ok(data, &["prepare", "--input", fixture().to_str().unwrap()]);
    ok(data, &["pretrain", "--d", "8", "--seed", "3", "--deterministic"]);
    ok(data, &["train", "--epochs", "3", "--deterministic"]);
}

#[test]
fn prepare_writes_hand_counted_stats() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["prepare", "--input", fixture().to_str().unwrap(), "--preset", "diginetica"]);
    let expected = "items=4\ntrain_sessions=6\ntest_sessions=2\nusers=3\n";
    assert_eq!(stdout, expected);
    assert_eq!(fs::read_to_string(dir.path().join("dataset/stats.txt")).unwrap(), expected);
    let cfg = fs::read_to_string(dir.path().join("dataset/config.txt")).unwrap();
    assert!(cfg.contains("preset=diginetica\n") && cfg.contains("min_item_freq=5\n"));
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = sesshet(dir.path(), &["prepare", "--input", "/no/such/log.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/log.csv"));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["frobnicate"],
        vec!["config", "--set", "bogus=1"],
        vec!["config", "--d", "0"],
        vec!["experiment", "no-such-preset"],
    ] {
        assert_eq!(sesshet(dir.path(), &args).status.code(), Some(1), "{args:?}");
    }
    assert!(sesshet(dir.path(), &["--help"]).status.success());
}

#[test]
fn config_flags_override_presets() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(
        dir.path(),
        &["config", "--preset", "tmall", "--k-user", "7", "--no-hetgnn", "--topn", "5,10", "--restart-prob", "0.3"],
    );
    for line in ["preset=tmall", "k_item=1", "k_session=15", "k_user=7", "hetgnn=false", "topn=5,10", "restart_prob=0.3", "lr=0.0002"] {
        assert!(text.lines().any(|l| l == line), "missing {line} in\n{text}");
    }
}

#[test]
fn markov_recommends_the_dominant_successor() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["prepare", "--input", fixture().to_str().unwrap()]);
    // c is the most frequent training item and is only ever followed by d
    let out = ok(dir.path(), &["recommend", "--prefix", "c", "-n", "4", "--baseline", "markov"]);
    let items: Vec<&str> = out.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(items[0], "d");
    assert_eq!(items.len(), 4);
    let unknown = sesshet(dir.path(), &["recommend", "--prefix", "zzz", "--baseline", "markov"]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn full_catalogue_recall_is_one() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let out = ok(dir.path(), &["eval", "--topn", "4"]);
    assert_eq!(out, "model\tRecall@4\t1.000000\n");
    for b in ["popularity", "markov"] {
        let out = ok(dir.path(), &["eval", "--baseline", b, "--topn", "4"]);
        assert_eq!(out, format!("{b}\tRecall@4\t1.000000\n"));
    }
}

#[test]
fn recommend_with_model_lists_probabilities() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let out = ok(dir.path(), &["recommend", "--prefix", "a,b", "-n", "4"]);
    let probs: Vec<f64> = out.lines().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(probs.len(), 4);
    assert!(probs.windows(2).all(|w| w[0] >= w[1]));
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);
}

#[test]
fn eval_report_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    ok(dir.path(), &["eval", "--topn", "1,2,3,4"]);
    let got = fs::read_to_string(dir.path().join("eval/report.json")).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/fixture_eval_report.json");
    if std::env::var_os("SESSHET_BLESS").is_some() {
        fs::create_dir_all(golden.parent().unwrap()).unwrap();
        fs::write(&golden, &got).unwrap();
    }
    assert_eq!(got, fs::read_to_string(&golden).unwrap());
}

#[test]
fn deterministic_pipeline_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        pipeline(d);
        ok(d, &["eval", "--deterministic"]);
    }
    for f in ["eval/report.json", "eval/report.tsv", "model/model.ckpt", "pretrain/embeddings.bin"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    // same log with one session renamed to a new item changes the vocabulary
    let other = dir.path().join("other.csv");
    let text = fs::read_to_string(fixture()).unwrap();
    let extra: String = (0..5).map(|k| format!("u1,e,t{k},{}\nu1,a,t{k},{}\n", 1600000000 + k, 1600000001 + k)).collect();
    fs::write(&other, text + &extra).unwrap();
    ok(dir.path(), &["prepare", "--input", other.to_str().unwrap(), "--out", dir.path().join("other").to_str().unwrap()]);
    let out = sesshet(dir.path(), &["eval", "--dataset", dir.path().join("other").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["prepare", "--input", fixture().to_str().unwrap()]);
    ok(dir.path(), &["pretrain", "--d", "8"]);
    let out = sesshet(dir.path(), &["train", "--lr", "1e300", "--epochs", "5"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
