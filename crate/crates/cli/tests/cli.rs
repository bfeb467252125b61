use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use hetgpt_core::hetgraph::read_graph;
use tempfile::TempDir;

const SMALL: &str = "\
synth.papers=360
synth.authors=500
synth.dim_paper=16
synth.dim_author=8
synth.dim_subject=4
val_size=40
test_size=80
pretrain.dim=16
pretrain.epochs=30
tune.max_epochs=40
tune.patience=20
";

fn hetgpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetgpt"))
        .args(args)
        .env_remove("HETGPT_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn config(&self) -> PathBuf {
        self.dir.path().join("small.cfg")
    }
    fn graph(&self) -> PathBuf {
        self.dir.path().join("graph.txt")
    }
    fn encoder(&self) -> PathBuf {
        self.dir.path().join("encoder.ckpt")
    }
}

/// Small graph and encoder shared by the tests that only read them.
fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let fix = Fixture { dir };
        std::fs::write(fix.config(), SMALL).unwrap();
        let out = s(fix.dir.path());
        ok(hetgpt(&["synth", "--config", s(&fix.config()), "--out-dir", out]));
        ok(hetgpt(&[
            "pretrain",
            "--graph",
            s(&fix.graph()),
            "--config",
            s(&fix.config()),
            "--out-dir",
            out,
        ]));
        fix
    })
}

fn results_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

#[test]
fn synth_output_round_trips_with_exact_counts() {
    let fix = fixture();
    let g = read_graph(&fix.graph()).unwrap();
    let counts: Vec<usize> = g.node_types().iter().map(|t| t.count).collect();
    assert_eq!(counts, vec![360, 500, 6]);
    assert_eq!(g.num_classes(), 3);
    assert_eq!(g.metapaths().len(), 2);
}

#[test]
fn synth_into_missing_directory_exits_2() {
    let out = hetgpt(&["synth", "--out-dir", "/nonexistent/hetgpt-out"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let c = TempDir::new().unwrap();
    let cfg = fixture().config();
    ok(hetgpt(&[
        "synth",
        "--config",
        s(&cfg),
        "--seed",
        "5",
        "--out-dir",
        s(a.path()),
    ]));
    let out = Command::new(env!("CARGO_BIN_EXE_hetgpt"))
        .args(["synth", "--config", s(&cfg), "--out-dir", s(b.path())])
        .env("HETGPT_SEED", "5")
        .output()
        .unwrap();
    ok(out);
    ok(hetgpt(&["synth", "--config", s(&cfg), "--out-dir", s(c.path())]));
    let read = |d: &TempDir| std::fs::read(d.path().join("graph.txt")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn malformed_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    for text in ["tune.lambda=abc", "tune.nonsense=1", "shots=7"] {
        std::fs::write(&cfg, text).unwrap();
        let out = hetgpt(&["synth", "--config", s(&cfg), "--out-dir", s(dir.path())]);
        assert_eq!(out.status.code(), Some(2), "{text}");
    }
    let out = hetgpt(&["synth", "--config", "/nonexistent.cfg", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pretrain_is_deterministic_and_reduces_loss() {
    let fix = fixture();
    let dir = TempDir::new().unwrap();
    let stdout = ok(hetgpt(&[
        "pretrain",
        "--graph",
        s(&fix.graph()),
        "--config",
        s(&fix.config()),
        "--out-dir",
        s(dir.path()),
    ]));
    let again = std::fs::read(dir.path().join("encoder.ckpt")).unwrap();
    assert_eq!(std::fs::read(fix.encoder()).unwrap(), again);
    let value = |key: &str| -> f64 {
        let line = stdout.lines().find(|l| l.starts_with(key)).unwrap();
        line.split('\t').nth(1).unwrap().parse().unwrap()
    };
    assert!(value("final_loss") < value("initial_loss"), "{stdout}");
    assert!(dir.path().join("pretrain_loss.tsv").is_file());
}

#[test]
fn pretrain_on_a_single_metapath_graph_exits_2() {
    let fix = fixture();
    let dir = TempDir::new().unwrap();
    let text = std::fs::read_to_string(fix.graph()).unwrap();
    let mut dropped = false;
    let kept: Vec<&str> = text
        .lines()
        .filter(|l| {
            if !dropped && l.starts_with("#metapath") {
                dropped = true;
                return false;
            }
            true
        })
        .collect();
    let graph = dir.path().join("one.txt");
    std::fs::write(&graph, kept.join("\n") + "\n").unwrap();
    let out = hetgpt(&[
        "pretrain",
        "--graph",
        s(&graph),
        "--config",
        s(&fix.config()),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

fn tune_once(fix: &Fixture, dir: &Path, seed: &str) {
    ok(hetgpt(&[
        "tune",
        "--graph",
        s(&fix.graph()),
        "--checkpoint",
        s(&fix.encoder()),
        "--config",
        s(&fix.config()),
        "--repeats",
        "1",
        "--seed",
        seed,
        "--out-dir",
        s(dir),
    ]));
}

#[test]
fn tune_appends_a_run_row_and_a_summary_row() {
    let fix = fixture();
    let dir = TempDir::new().unwrap();
    tune_once(fix, dir.path(), "3");
    let rows = results_rows(&dir.path().join("results.tsv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][0], "dataset");
    assert_eq!(rows[1][2], "3");
    assert_eq!(rows[2][2], "summary");
    let lambda = rows[0].iter().position(|c| c == "lambda").unwrap();
    assert_eq!(rows[1][lambda], "0.01");
    assert!(dir.path().join("prompt-seed3.ckpt").is_file());
    assert!(dir.path().join("timings.tsv").is_file());

    tune_once(fix, dir.path(), "3");
    let again = results_rows(&dir.path().join("results.tsv"));
    assert_eq!(again.len(), 5);
    assert_eq!(again[3], rows[1]);
    assert_eq!(again.iter().filter(|r| r[0] == "dataset").count(), 1);
}

#[test]
fn eval_reproduces_tune_metrics_and_dumps_embeddings() {
    let fix = fixture();
    let dir = TempDir::new().unwrap();
    tune_once(fix, dir.path(), "1");
    let rows = results_rows(&dir.path().join("results.tsv"));
    let prompt = dir.path().join("prompt-seed1.ckpt");
    let dump = dir.path().join("emb.tsv");
    let eval = |partition: &str| -> f64 {
        let stdout = ok(hetgpt(&[
            "eval",
            "--graph",
            s(&fix.graph()),
            "--checkpoint",
            s(&fix.encoder()),
            "--prompt",
            s(&prompt),
            "--partition",
            partition,
            "--dump-embeddings",
            s(&dump),
            "--out-dir",
            s(dir.path()),
        ]));
        let line = stdout.lines().find(|l| l.starts_with("macro_f1")).unwrap();
        line.split('\t').nth(1).unwrap().parse().unwrap()
    };
    let test = eval("test");
    assert_eq!(format!("{test:.6}"), rows[1][9]);
    let labeled = eval("labeled");
    let val = eval("val");
    assert!(labeled >= val - 0.2, "labeled {labeled} val {val}");

    let text = std::fs::read_to_string(&dump).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 361);
    assert_eq!(lines[0].split('\t').count(), 4 + 16);
    assert_eq!(lines.iter().skip(1).filter(|l| l.contains("\tlabeled\t")).count(), 15);
}

#[test]
fn eval_against_another_graph_exits_3() {
    let fix = fixture();
    let dir = TempDir::new().unwrap();
    tune_once(fix, dir.path(), "0");
    let other = TempDir::new().unwrap();
    ok(hetgpt(&[
        "synth",
        "--config",
        s(&fix.config()),
        "--seed",
        "9",
        "--out-dir",
        s(other.path()),
    ]));
    let out = hetgpt(&[
        "eval",
        "--graph",
        s(&other.path().join("graph.txt")),
        "--checkpoint",
        s(&fix.encoder()),
        "--prompt",
        s(&dir.path().join("prompt-seed0.ckpt")),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let out = hetgpt(&[
        "tune",
        "--graph",
        s(&fix.graph()),
        "--checkpoint",
        "/nonexistent.ckpt",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn compare_shares_splits_and_writes_both_curves() {
    let fix = fixture();
    let dir = TempDir::new().unwrap();
    let stdout = ok(hetgpt(&[
        "compare",
        "--graph",
        s(&fix.graph()),
        "--checkpoint",
        s(&fix.encoder()),
        "--config",
        s(&fix.config()),
        "--repeats",
        "2",
        "--out-dir",
        s(dir.path()),
    ]));
    assert!(stdout.contains("param_ratio"));
    let rows = results_rows(&dir.path().join("compare.tsv"));
    assert_eq!(rows.len(), 5);
    for seed in ["0", "1"] {
        let arms: Vec<&Vec<String>> = rows.iter().filter(|r| r[0] == seed).collect();
        assert_eq!(arms.len(), 2);
        assert_eq!(arms[0][1], arms[1][1]);
        assert_eq!((arms[0][2].as_str(), arms[1][2].as_str()), ("prompt", "finetune"));
    }
    let curves = results_rows(&dir.path().join("curves.tsv"));
    for arm in ["prompt", "finetune"] {
        assert!(curves.iter().filter(|r| r[0] == arm).count() >= 2);
    }
}
