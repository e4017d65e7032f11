use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use neurosudoku::cli::{BenchmarkRecord, PuzzleOutcome};
use neurosudoku::sudoku::load_dataset;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neurosudoku"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    csv::Reader::from_path(path)
        .unwrap()
        .deserialize()
        .map(Result::unwrap)
        .collect()
}

fn small_model(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("run");
    ok(&[
        "train",
        "--seed",
        "3",
        "--epochs",
        "1",
        "--batches-per-epoch",
        "3",
        "--batch-size",
        "2",
        "--depth",
        "2",
        "--hidden-channels",
        "4",
        "--deterministic",
        "--out",
        p(&out),
    ]);
    out
}

#[test]
fn gen_writes_reproducible_puzzles() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    ok(&[
        "gen",
        "--count",
        "5",
        "--empty",
        "10",
        "--seed",
        "4",
        "--out",
        p(&a),
    ]);
    ok(&[
        "gen",
        "--count",
        "5",
        "--empty",
        "10",
        "--seed",
        "4",
        "--out",
        p(&b),
    ]);
    let text = fs::read_to_string(&a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    for line in &lines {
        assert_eq!(line.len(), 81);
        assert_eq!(line.chars().filter(|&ch| ch == '0').count(), 10);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let grids = load_dataset(&a).unwrap();
    let solutions = load_dataset(dir.path().join("a.solutions.txt")).unwrap();
    assert_eq!(grids.len(), 5);
    for ((g, s), line) in grids.iter().zip(&solutions).zip(&lines) {
        assert_eq!(&g.to_line(), line);
        assert!(s.is_solved());
        for r in 0..9 {
            for c in 0..9 {
                assert!(g.get(r, c) == 0 || g.get(r, c) == s.get(r, c));
            }
        }
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.txt");
    ok(&["gen", "--count", "2", "--empty", "3", "--out", p(&data)]);
    let out = run(&[
        "eval",
        "--checkpoint",
        "x.json",
        "--dataset",
        p(&data),
        "--generate",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["eval", "--checkpoint", "x.json", "--puzzles", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        p(&dir.path().join("nope.json")),
        "--puzzles",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn train_eval_bench_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = small_model(dir.path());
    for f in ["model.json", "train_log.jsonl", "config.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(run_dir.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        1
    );
    let model = run_dir.join("model.json");

    let eval = dir.path().join("eval.csv");
    ok(&[
        "eval",
        "--checkpoint",
        p(&model),
        "--empty",
        "2,4",
        "--max-steps",
        "10,40",
        "--puzzles",
        "6",
        "--out",
        p(&eval),
    ]);
    let records: Vec<BenchmarkRecord> = read_csv(&eval);
    let outcomes: Vec<PuzzleOutcome> = read_csv(&dir.path().join("eval.outcomes.csv"));
    assert_eq!(records.len(), 4);
    for rec in &records {
        let cell: Vec<&PuzzleOutcome> = outcomes
            .iter()
            .filter(|o| o.n_empty == rec.n_empty && o.max_steps == rec.max_steps)
            .collect();
        assert_eq!(cell.len(), rec.n_puzzles);
        let rate = cell.iter().filter(|o| o.solved).count() as f64 / cell.len() as f64;
        assert_eq!(rec.success_rate, rate);
        assert_eq!(
            rec.reset_count_total,
            cell.iter().map(|o| o.nlm_resets).sum::<usize>()
        );
        assert!(cell.iter().all(|o| o.steps <= o.max_steps));
    }

    let bench = dir.path().join("bench.csv");
    ok(&[
        "bench",
        "--checkpoint",
        p(&model),
        "--empty",
        "4",
        "--puzzles",
        "5",
        "--out",
        p(&bench),
    ]);
    let mut reader = csv::Reader::from_path(&bench).unwrap();
    let headers = reader.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 5);
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    for row in &rows {
        assert_eq!(&row[col("n_empty")], "4");
        assert!(row[col("backtracking_seconds")].parse::<f64>().unwrap() >= 0.0);
        let solved: bool = row[col("solved")].parse().unwrap();
        let nlm: f64 = row[col("nlm_seconds")].parse().unwrap();
        assert!(nlm >= 0.0 && (solved || nlm > 0.0));
    }
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"count": 3, "empty": 7, "seed": 2}"#).unwrap();
    let out = dir.path().join("g.txt");
    ok(&["--config", p(&cfg), "gen", "--out", p(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text
        .lines()
        .all(|l| l.chars().filter(|&ch| ch == '0').count() == 7));
}
