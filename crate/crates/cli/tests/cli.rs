use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
# tiny run
seed = 5
rounds = 4
clients_per_round = 3
variant = si_transformer
model.embed_dim = 8
model.ffn_dim = 16
corpus.clients = 15
corpus.words = 20
corpus.max_sequences = 10
eval.every = 2
";

fn sifed(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sifed"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("SIFED_THREADS", t),
        None => cmd.env_remove("SIFED_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let run = sifed(&["run", "--config", &cfg, "--out", path_str(&out)], None);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));

    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let last_eval = metrics.lines().rev().find(|l| l.contains("\"eval\"")).unwrap();

    let ckpt = out.join("final.ckpt");
    let eval = sifed(&["eval", "--checkpoint", path_str(&ckpt), "--config", &cfg], None);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert_eq!(String::from_utf8(eval.stdout).unwrap().trim(), last_eval);
}

#[test]
fn thread_count_does_not_change_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let mut files = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("t{threads}"));
        let run = sifed(&["run", "--config", &cfg, "--out", path_str(&out)], Some(threads));
        assert!(run.status.success());
        files.push(fs::read(out.join("metrics.jsonl")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn overrides_apply_after_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let run = sifed(
        &["run", "--config", &cfg, "--override", "rounds=2", "--override", "output.metrics_format=csv", "--out", path_str(&out)],
        None,
    );
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().last().unwrap().split(',').next(), Some("2"));
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "rounds = ten\n");
    let run = sifed(&["run", "--config", &cfg, "--out", path_str(&dir.path().join("o"))], None);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("rounds"));

    let cfg = write_config(dir.path(), "no_such_key = 1\n");
    let run = sifed(&["run", "--config", &cfg, "--out", path_str(&dir.path().join("o"))], None);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn missing_files_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.cfg");
    let run = sifed(&["run", "--config", path_str(&missing), "--out", path_str(&dir.path().join("o"))], None);
    assert_eq!(run.status.code(), Some(4));

    let cfg = write_config(dir.path(), CONFIG);
    let eval = sifed(&["eval", "--checkpoint", path_str(&dir.path().join("none.ckpt")), "--config", &cfg], None);
    assert_eq!(eval.status.code(), Some(4));
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{CONFIG}variant = cifg\n").replace("variant = si_transformer\n", ""));
    let out = dir.path().join("out");
    let run = sifed(
        &["run", "--config", &cfg, "--override", "server.learning_rate=1000", "--override", "client.learning_rate=50", "--out", path_str(&out)],
        None,
    );
    assert_eq!(run.status.code(), Some(3), "{}", String::from_utf8_lossy(&run.stderr));
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().last().unwrap().contains("\"diverged\":true"));
}
