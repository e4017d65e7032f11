//! Command-line front end: `train`, `eval`, `bench` and `gen`.
//!
//! Any flag may also come from a JSON config file (`--config`), keyed by the
//! flag's long name in snake_case; flags given on the command line win.
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::solve_backtracking;
use crate::nlm::{NlmConfig, NlmModel};
use crate::sudoku::{self, blank_cells, generate_solved, Grid, PuzzleSource};
use crate::train::{self, greedy_episode, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Runtime(_) => EXIT_FAILURE,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "neurosudoku",
    version,
    about = "Neural logic machine Sudoku solver and benchmark harness"
)]
pub struct Cli {
    /// JSON file supplying default values for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model with REINFORCE and a curriculum over empty cells.
    Train(TrainArgs),
    /// Success rate of the greedy policy on a grid of (empty cells, max steps) settings.
    Eval(EvalArgs),
    /// Per-puzzle wall time of the model and of backtracking.
    Bench(BenchArgs),
    /// Write puzzles and their source solutions in dataset format.
    Gen(GenArgs),
}

/// Options shared by every subcommand that consumes puzzles.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceArgs {
    /// Dataset of grids (one 81-character line each) to draw solutions from.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Draw solutions from the seeded generator (the default).
    #[arg(long)]
    pub generate: bool,
}

impl SourceArgs {
    pub fn resolve(&self) -> Result<PuzzleSource> {
        match (&self.dataset, self.generate) {
            (Some(_), true) => Err(CliError::Usage(
                "--dataset and --generate are mutually exclusive".into(),
            )),
            (Some(path), false) => {
                let grids = sudoku::load_dataset(path).map_err(runtime)?;
                PuzzleSource::from_grids(grids).map_err(runtime)
            }
            (None, _) => Ok(PuzzleSource::Generator),
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub curriculum_start: Option<usize>,
    #[arg(long)]
    pub curriculum_end: Option<usize>,
    #[arg(long)]
    pub promotion_threshold: Option<f64>,
    #[arg(long)]
    pub eval_window: Option<usize>,
    /// Step budget per training episode.
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub hidden_channels: Option<usize>,
    /// Output directory for the checkpoints and the training log.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub deterministic: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub source: SourceArgs,
}

impl TrainArgs {
    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            batches_per_epoch: self.batches_per_epoch.unwrap_or(d.batches_per_epoch),
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            gamma: self.gamma.unwrap_or(d.gamma),
            curriculum_start: self.curriculum_start.unwrap_or(d.curriculum_start),
            curriculum_end: self.curriculum_end.unwrap_or(d.curriculum_end),
            promotion_threshold: self.promotion_threshold.unwrap_or(d.promotion_threshold),
            eval_window: self.eval_window.unwrap_or(d.eval_window),
            max_steps_train: self.max_steps.unwrap_or(d.max_steps_train),
            seed: self.seed.unwrap_or(d.seed),
            model: NlmConfig::new(
                self.depth.unwrap_or(d.model.depth),
                self.hidden_channels.unwrap_or(d.model.hidden_channels),
            ),
            deterministic: self.deterministic,
            ..d
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Empty-cell counts to evaluate (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub empty: Vec<usize>,
    /// Step budgets to evaluate (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub max_steps: Vec<usize>,
    /// Puzzles per (empty, max-steps) cell.
    #[arg(long)]
    pub puzzles: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV file for the summary rows; per-puzzle outcomes go next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub deterministic: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub source: SourceArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub empty: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub puzzles: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accepted for symmetry; benchmarking always runs puzzles sequentially.
    #[arg(long)]
    pub deterministic: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub source: SourceArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct GenArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub empty: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Puzzle file; solutions are written to `<stem>.solutions.<ext>` beside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const DEFAULT_PUZZLES: usize = 100;
pub const DEFAULT_EMPTY: [usize; 3] = [3, 5, 8];
pub const DEFAULT_MAX_STEPS: [usize; 4] = [81, 150, 400, 729];

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => Some(read_config(path)?),
        None => None,
    };
    match cli.command {
        Command::Train(a) => cmd_train(&merge(a, file.as_ref())?),
        Command::Eval(a) => cmd_eval(&merge(a, file.as_ref())?),
        Command::Bench(a) => cmd_bench(&merge(a, file.as_ref())?),
        Command::Gen(a) => cmd_gen(&merge(a, file.as_ref())?),
    }
}

fn read_config(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(CliError::Usage(format!(
            "{}: config must be a JSON object",
            path.display()
        )));
    }
    Ok(value)
}

/// Overlays the flags that were actually given onto the config file values.
fn merge<A: Serialize + DeserializeOwned>(flags: A, file: Option<&serde_json::Value>) -> Result<A> {
    let Some(file) = file else { return Ok(flags) };
    let mut merged = file.clone();
    let given = serde_json::to_value(&flags).map_err(runtime)?;
    let target = merged.as_object_mut().expect("config is an object");
    for (k, v) in given.as_object().expect("flags serialize to an object") {
        let unset = match v {
            serde_json::Value::Null => true,
            serde_json::Value::Bool(b) => !b,
            serde_json::Value::Array(a) => a.is_empty(),
            _ => false,
        };
        if !unset {
            target.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("config: {e}")))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = args.train_config();
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let source = args.source.resolve()?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs/train"));
    fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let cfg_path = out.join("config.json");
    let cfg_json = serde_json::to_string_pretty(&config).map_err(runtime)?;
    fs::write(&cfg_path, cfg_json).map_err(|e| runtime(format!("{}: {e}", cfg_path.display())))?;
    let (_, log) = train::train(&config, &source, Some(&out)).map_err(runtime)?;
    if let Some(last) = log.records.last() {
        eprintln!(
            "trained {} epochs: level {}, rolling solve rate {:.3}, mean return {:.4}",
            last.epoch, last.curriculum_level, last.rolling_solve_rate, last.mean_return
        );
    }
    Ok(())
}

/// One `(n_empty, max_steps)` evaluation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub n_empty: usize,
    pub max_steps: usize,
    pub n_puzzles: usize,
    pub success_rate: f64,
    pub mean_nlm_seconds: f64,
    pub mean_backtracking_seconds: f64,
    pub reset_count_total: usize,
}

/// Result of one puzzle under the greedy policy and the backtracking solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuzzleOutcome {
    pub puzzle_id: usize,
    pub n_empty: usize,
    pub max_steps: usize,
    pub solved: bool,
    pub steps: usize,
    pub nlm_resets: usize,
    pub nlm_seconds: f64,
    pub backtracking_seconds: f64,
}

impl BenchmarkRecord {
    pub fn from_outcomes(n_empty: usize, max_steps: usize, outcomes: &[PuzzleOutcome]) -> Self {
        let n = outcomes.len();
        let mean = |f: &dyn Fn(&PuzzleOutcome) -> f64| {
            if n == 0 {
                0.0
            } else {
                outcomes.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let solved = outcomes.iter().filter(|o| o.solved).count();
        Self {
            n_empty,
            max_steps,
            n_puzzles: n,
            success_rate: if n == 0 {
                0.0
            } else {
                solved as f64 / n as f64
            },
            mean_nlm_seconds: mean(&|o| o.nlm_seconds),
            mean_backtracking_seconds: mean(&|o| o.backtracking_seconds),
            reset_count_total: outcomes.iter().map(|o| o.nlm_resets).sum(),
        }
    }
}

/// The `count` puzzles used for an `n_empty` setting; identical across step budgets.
pub fn evaluation_puzzles(
    source: &PuzzleSource,
    n_empty: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Grid>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n_empty as u64);
    (0..count)
        .map(|_| source.puzzle(n_empty, rng.next_u64()).map_err(runtime))
        .collect()
}

pub fn run_puzzle(
    model: &NlmModel,
    puzzle: Grid,
    puzzle_id: usize,
    max_steps: usize,
) -> Result<PuzzleOutcome> {
    let nlm = greedy_episode(model, puzzle, max_steps).map_err(runtime)?;
    let bt = solve_backtracking(&puzzle).map_err(runtime)?;
    Ok(PuzzleOutcome {
        puzzle_id,
        n_empty: puzzle.count_empty(),
        max_steps,
        solved: nlm.solved,
        steps: nlm.steps,
        nlm_resets: nlm.resets,
        nlm_seconds: nlm.elapsed.as_secs_f64(),
        backtracking_seconds: bt.elapsed.as_secs_f64(),
    })
}

/// Evaluates every `(n_empty, max_steps)` pair; returns summary rows and per-puzzle outcomes.
pub fn evaluate_grid(
    model: &NlmModel,
    source: &PuzzleSource,
    empties: &[usize],
    budgets: &[usize],
    n_puzzles: usize,
    seed: u64,
    deterministic: bool,
) -> Result<(Vec<BenchmarkRecord>, Vec<PuzzleOutcome>)> {
    let mut records = Vec::new();
    let mut all = Vec::new();
    for &n_empty in empties {
        let puzzles = evaluation_puzzles(source, n_empty, n_puzzles, seed)?;
        for &max_steps in budgets {
            let job = |(i, p): (usize, &Grid)| run_puzzle(model, *p, i, max_steps);
            let outcomes: Vec<PuzzleOutcome> = if deterministic {
                puzzles.iter().enumerate().map(job).collect::<Result<_>>()?
            } else {
                puzzles
                    .par_iter()
                    .enumerate()
                    .map(job)
                    .collect::<Result<_>>()?
            };
            records.push(BenchmarkRecord::from_outcomes(
                n_empty, max_steps, &outcomes,
            ));
            all.extend(outcomes);
        }
    }
    Ok((records, all))
}

fn load_model(checkpoint: &Option<PathBuf>) -> Result<NlmModel> {
    let path = checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
    NlmModel::load(path).map_err(runtime)
}

fn check_empty(n: usize) -> Result<()> {
    if (1..=sudoku::CELLS).contains(&n) {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "--empty must be in 1..=81, got {n}"
        )))
    }
}

/// `dir/name.ext` → `dir/name.<tag>.ext`.
pub fn sibling_path(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}.{tag}.{ext}"),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    let mut w =
        csv::Writer::from_path(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row).map_err(runtime)?;
    }
    w.flush()
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let n_puzzles = args.puzzles.unwrap_or(DEFAULT_PUZZLES);
    if n_puzzles == 0 {
        return Err(CliError::Usage("--puzzles must be at least 1".into()));
    }
    let empties = if args.empty.is_empty() {
        DEFAULT_EMPTY.to_vec()
    } else {
        args.empty.clone()
    };
    let budgets = if args.max_steps.is_empty() {
        DEFAULT_MAX_STEPS.to_vec()
    } else {
        args.max_steps.clone()
    };
    empties.iter().try_for_each(|&n| check_empty(n))?;
    if budgets.contains(&0) {
        return Err(CliError::Usage("--max-steps must be positive".into()));
    }
    let source = args.source.resolve()?;
    let model = load_model(&args.checkpoint)?;
    let seed = args.seed.unwrap_or(0);
    let (records, outcomes) = evaluate_grid(
        &model,
        &source,
        &empties,
        &budgets,
        n_puzzles,
        seed,
        args.deterministic,
    )?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("eval.csv"));
    write_csv(&out, &records)?;
    write_csv(&sibling_path(&out, "outcomes"), &outcomes)?;
    for r in &records {
        eprintln!(
            "empty {:>2}  max_steps {:>3}  success {:.2}",
            r.n_empty, r.max_steps, r.success_rate
        );
    }
    Ok(())
}

/// One row of the timing CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub puzzle_id: usize,
    pub n_empty: usize,
    pub nlm_seconds: f64,
    pub backtracking_seconds: f64,
    pub nlm_resets: usize,
    pub solved: bool,
}

pub fn benchmark(model: &NlmModel, puzzles: &[Grid], max_steps: usize) -> Result<Vec<TimingRow>> {
    puzzles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let o = run_puzzle(model, *p, i, max_steps)?;
            Ok(TimingRow {
                puzzle_id: o.puzzle_id,
                n_empty: o.n_empty,
                nlm_seconds: o.nlm_seconds,
                backtracking_seconds: o.backtracking_seconds,
                nlm_resets: o.nlm_resets,
                solved: o.solved,
            })
        })
        .collect()
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let n_puzzles = args.puzzles.unwrap_or(DEFAULT_PUZZLES);
    if n_puzzles == 0 {
        return Err(CliError::Usage("--puzzles must be at least 1".into()));
    }
    let n_empty = args.empty.unwrap_or(10);
    check_empty(n_empty)?;
    let max_steps = args.max_steps.unwrap_or(729);
    if max_steps == 0 {
        return Err(CliError::Usage("--max-steps must be positive".into()));
    }
    let source = args.source.resolve()?;
    let model = load_model(&args.checkpoint)?;
    let puzzles = evaluation_puzzles(&source, n_empty, n_puzzles, args.seed.unwrap_or(0))?;
    let rows = benchmark(&model, &puzzles, max_steps)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("bench.csv"));
    write_csv(&out, &rows)?;
    let mean = |f: fn(&TimingRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    eprintln!(
        "{} puzzles, {} empty: nlm {:.6} s/puzzle, backtracking {:.6} s/puzzle, solved {}",
        rows.len(),
        n_empty,
        mean(|r| r.nlm_seconds),
        mean(|r| r.backtracking_seconds),
        rows.iter().filter(|r| r.solved).count()
    );
    Ok(())
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let count = args.count.unwrap_or(DEFAULT_PUZZLES);
    let n_empty = args.empty.unwrap_or(10);
    check_empty(n_empty)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("puzzles.txt"));
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.unwrap_or(0));
    let mut puzzles = Vec::with_capacity(count);
    let mut solutions = Vec::with_capacity(count);
    for _ in 0..count {
        let solved = generate_solved(rng.next_u64());
        puzzles.push(blank_cells(&solved, n_empty, rng.next_u64()).map_err(runtime)?);
        solutions.push(solved);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    sudoku::write_dataset(&out, &puzzles).map_err(runtime)?;
    sudoku::write_dataset(sibling_path(&out, "solutions"), &solutions).map_err(runtime)?;
    Ok(())
}
