//! REINFORCE with discounted returns, a running-mean baseline, Adam, and a
//! curriculum over the number of empty cells.

use std::collections::VecDeque;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, EnvState, Status};
use crate::nlm::{self, ArityInputs, NlmConfig, NlmError, NlmModel};
use crate::sudoku::{compute_predicates, Grid, PuzzleSource, SudokuError};
use crate::tensor::Graph;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] NlmError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Puzzle(#[from] SudokuError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Batches per epoch; the puzzle stream is generative, so an epoch is a
    /// fixed number of updates.
    pub batches_per_epoch: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub adam: AdamConfig,
    pub curriculum_start: usize,
    pub curriculum_end: usize,
    pub promotion_threshold: f64,
    pub eval_window: usize,
    pub max_steps_train: usize,
    /// Weight of the previous baseline in the per-batch moving average.
    pub baseline_momentum: f64,
    pub seed: u64,
    pub model: NlmConfig,
    /// Sequential rollouts and zeroed wall-clock fields in the log.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            batches_per_epoch: 200,
            learning_rate: 0.005,
            gamma: 0.99,
            adam: AdamConfig::default(),
            curriculum_start: 3,
            curriculum_end: 10,
            promotion_threshold: 0.9,
            eval_window: 50,
            max_steps_train: 729,
            baseline_momentum: 0.9,
            seed: 0,
            model: NlmConfig::default(),
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("gamma must lie in (0, 1]");
        }
        if !(1 <= self.curriculum_start
            && self.curriculum_start <= self.curriculum_end
            && self.curriculum_end <= 81)
        {
            return fail("need 1 <= curriculum_start <= curriculum_end <= 81");
        }
        if self.batch_size == 0
            || self.batches_per_epoch == 0
            || self.eval_window == 0
            || self.max_steps_train == 0
        {
            return fail(
                "batch_size, batches_per_epoch, eval_window and max_steps_train must be positive",
            );
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return fail("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.baseline_momentum) {
            return fail("baseline_momentum must lie in [0, 1)");
        }
        self.model.validate()?;
        Ok(())
    }
}

/// One sampled trajectory. `scores[t]` is the gradient of `log_probs[t]`
/// with respect to the flattened model parameters, taken while sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub log_probs: Vec<f64>,
    pub scores: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub solved: bool,
    pub steps: usize,
    pub resets: usize,
}

/// Samples actions from the masked policy until the puzzle is solved or the
/// step budget runs out.
pub fn rollout(
    model: &NlmModel,
    puzzle: Grid,
    max_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode, TrainError> {
    let mut env = EnvState::reset(puzzle, max_steps)?;
    let mut ep = Episode {
        log_probs: Vec::new(),
        scores: Vec::new(),
        rewards: Vec::new(),
        solved: false,
        steps: 0,
        resets: 0,
    };
    while !env.is_terminal() {
        let preds = compute_predicates(env.current());
        let inputs = ArityInputs::from_predicates(&preds);
        let mut graph = Graph::new();
        let bound = model.bind(&mut graph, true);
        let logits = model.forward_on(&mut graph, &bound, &inputs)?;
        let probs = nlm::action_probabilities(graph.value(logits).data(), &preds.empty_mask);
        let action = nlm::sample_action(&probs, rng);
        let lp = nlm::log_prob(&mut graph, logits, &preds.empty_mask, action)?;
        graph.backward(lp).map_err(NlmError::from)?;
        ep.log_probs.push(graph.value(lp).item());
        ep.scores.push(model.bound_grads(&graph, &bound));
        let out = env.step(action)?;
        ep.rewards.push(out.reward);
    }
    ep.solved = env.status() == Status::Solved;
    ep.steps = env.steps_taken();
    ep.resets = env.resets();
    Ok(ep)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyOutcome {
    pub solved: bool,
    pub steps: usize,
    pub resets: usize,
    pub elapsed: Duration,
}

/// Runs the argmax policy; the elapsed time covers predicate encoding,
/// forward passes and environment steps.
pub fn greedy_episode(
    model: &NlmModel,
    puzzle: Grid,
    max_steps: usize,
) -> Result<GreedyOutcome, TrainError> {
    let start = Instant::now();
    let mut env = EnvState::reset(puzzle, max_steps)?;
    while !env.is_terminal() {
        let preds = compute_predicates(env.current());
        let logits = model.forward(&ArityInputs::from_predicates(&preds))?;
        let action = nlm::greedy_action(logits.data(), &preds.empty_mask)
            .expect("in-progress grid has an empty cell");
        env.step(action)?;
    }
    Ok(GreedyOutcome {
        solved: env.status() == Status::Solved,
        steps: env.steps_taken(),
        resets: env.resets(),
        elapsed: start.elapsed(),
    })
}

/// Discounted returns `G_t = r_t + gamma * G_{t+1}`.
pub fn returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (g, &r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *g = acc;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub learning_rate: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64, config: AdamConfig) -> Self {
        Self {
            config,
            learning_rate,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// Applies one update from the parameters' accumulated gradients.
    pub fn apply(&mut self, model: &mut NlmModel) {
        let grads = model.flat_grads();
        assert_eq!(grads.len(), self.m.len(), "optimizer/model size mismatch");
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut i = 0;
        for t in model.params_mut() {
            for w in t.data_mut() {
                let g = grads[i];
                self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + eps);
                i += 1;
            }
        }
    }
}

/// Exponential moving average of per-batch mean returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: f64,
    pub momentum: f64,
    pub initialized: bool,
}

impl Baseline {
    pub fn new(momentum: f64) -> Self {
        Self {
            value: 0.0,
            momentum,
            initialized: false,
        }
    }

    /// A baseline pinned at `value` that never moves.
    pub fn fixed(value: f64) -> Self {
        Self {
            value,
            momentum: 1.0,
            initialized: true,
        }
    }

    pub fn observe(&mut self, batch_mean: f64) {
        if self.initialized {
            self.value = self.momentum * self.value + (1.0 - self.momentum) * batch_mean;
        } else {
            self.value = batch_mean;
            self.initialized = true;
        }
    }
}

/// REINFORCE step. The surrogate loss is
/// `-(1/N) * sum_episodes sum_t (G_t - b) * log_prob_t`; its gradient is
/// assembled from the per-step scores, written into the parameter `grad`
/// buffers and applied with Adam. Returns the loss value.
pub fn policy_update(
    model: &mut NlmModel,
    episodes: &[Episode],
    gamma: f64,
    optimizer: &mut Adam,
    baseline: &mut Baseline,
) -> f64 {
    assert!(
        !episodes.is_empty(),
        "policy_update needs at least one episode"
    );
    let b = baseline.value;
    let n = episodes.len() as f64;
    let mut grad = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    let mut total_return = 0.0;
    let mut count = 0usize;
    for ep in episodes {
        for ((g_t, lp), score) in returns(&ep.rewards, gamma)
            .into_iter()
            .zip(&ep.log_probs)
            .zip(&ep.scores)
        {
            let adv = g_t - b;
            loss -= adv * lp / n;
            let w = -adv / n;
            if w != 0.0 {
                grad.iter_mut()
                    .zip(score)
                    .for_each(|(acc, s)| *acc += w * s);
            }
            total_return += g_t;
            count += 1;
        }
    }
    model.zero_grad();
    model.accumulate_flat_grad(&grad);
    optimizer.apply(model);
    if count > 0 {
        baseline.observe(total_return / count as f64);
    }
    loss
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub batches: usize,
    pub curriculum_level: usize,
    pub rolling_solve_rate: f64,
    /// Solve rate of this epoch's training rollouts.
    pub solve_rate: f64,
    /// Mean discounted return from the first step.
    pub mean_return: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
    /// `(total batches so far, new level)` for each promotion.
    pub promotions: Vec<(usize, usize)>,
}

impl TrainingLog {
    pub fn to_ndjson(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }
}

/// Promotes one empty cell at a time once the rolling solve rate over a full
/// window reaches the threshold. Levels never decrease.
#[derive(Debug, Clone)]
pub struct Curriculum {
    level: usize,
    end: usize,
    threshold: f64,
    window: usize,
    recent: VecDeque<bool>,
}

impl Curriculum {
    pub fn new(start: usize, end: usize, threshold: f64, window: usize) -> Self {
        Self {
            level: start,
            end,
            threshold,
            window,
            recent: VecDeque::with_capacity(window),
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn rolling_rate(&self) -> f64 {
        if self.recent.is_empty() {
            return 0.0;
        }
        self.recent.iter().filter(|&&s| s).count() as f64 / self.recent.len() as f64
    }

    pub fn record(&mut self, solved: bool) {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(solved);
    }

    /// Moves to the next level if due; returns the new level.
    pub fn maybe_promote(&mut self) -> Option<usize> {
        if self.level < self.end
            && self.recent.len() == self.window
            && self.rolling_rate() >= self.threshold
        {
            self.level += 1;
            self.recent.clear();
            Some(self.level)
        } else {
            None
        }
    }
}

/// Full curriculum training run. With `out_dir` set, writes `train_log.jsonl`
/// (one record per epoch), `checkpoint_level_<k>.json` at each promotion
/// and `model.json` at the end.
pub fn train(
    config: &TrainConfig,
    source: &PuzzleSource,
    out_dir: Option<&Path>,
) -> Result<(NlmModel, TrainingLog), TrainError> {
    config.validate()?;
    let mut model = NlmModel::init(config.model, config.seed)?;
    let mut optimizer = Adam::new(model.num_params(), config.learning_rate, config.adam);
    let mut baseline = Baseline::new(config.baseline_momentum);
    let mut curriculum = Curriculum::new(
        config.curriculum_start,
        config.curriculum_end,
        config.promotion_threshold,
        config.eval_window,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a1e);
    let mut log = TrainingLog::default();
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("train_log.jsonl");
            Some((fs::File::create(&path).map_err(io_err(&path))?, path))
        }
        None => None,
    };
    let started = Instant::now();
    let mut total_batches = 0;

    for epoch in 1..=config.epochs {
        let (mut solved, mut episodes_run, mut return_sum) = (0usize, 0usize, 0.0);
        for _ in 0..config.batches_per_epoch {
            let level = curriculum.level();
            let jobs: Vec<(Grid, u64)> = (0..config.batch_size)
                .map(|_| {
                    let puzzle = source.puzzle(level, rng.next_u64())?;
                    Ok((puzzle, rng.next_u64()))
                })
                .collect::<Result<_, TrainError>>()?;
            let run = |(puzzle, seed): &(Grid, u64)| {
                rollout(
                    &model,
                    *puzzle,
                    config.max_steps_train,
                    &mut ChaCha8Rng::seed_from_u64(*seed),
                )
            };
            let batch: Vec<Episode> = if config.deterministic {
                jobs.iter().map(run).collect::<Result<_, _>>()?
            } else {
                jobs.par_iter().map(run).collect::<Result<_, _>>()?
            };
            for ep in &batch {
                curriculum.record(ep.solved);
                solved += usize::from(ep.solved);
                episodes_run += 1;
                return_sum += returns(&ep.rewards, config.gamma)
                    .first()
                    .copied()
                    .unwrap_or(0.0);
            }
            policy_update(
                &mut model,
                &batch,
                config.gamma,
                &mut optimizer,
                &mut baseline,
            );
            total_batches += 1;
            if let Some(new_level) = curriculum.maybe_promote() {
                log.promotions.push((total_batches, new_level));
                if let Some(dir) = out_dir {
                    let path = dir.join(format!("checkpoint_level_{new_level}.json"));
                    model.save(&path).map_err(io_err(&path))?;
                }
            }
        }
        let record = LogRecord {
            epoch,
            batches: total_batches,
            curriculum_level: curriculum.level(),
            rolling_solve_rate: curriculum.rolling_rate(),
            solve_rate: solved as f64 / episodes_run as f64,
            mean_return: return_sum / episodes_run as f64,
            wall_ms: if config.deterministic {
                0
            } else {
                started.elapsed().as_millis() as u64
            },
        };
        if let Some((file, path)) = log_file.as_mut() {
            let line = serde_json::to_string(&record).expect("log record serializes");
            writeln!(file, "{line}").map_err(io_err(path))?;
        }
        log.records.push(record);
    }
    if let Some(dir) = out_dir {
        let path = dir.join("model.json");
        model.save(&path).map_err(io_err(&path))?;
    }
    Ok((model, log))
}
