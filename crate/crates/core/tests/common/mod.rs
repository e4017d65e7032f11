#![allow(dead_code)]

use neurosudoku::env::{Action, EnvState, Status, MOVE_REWARD, SOLVE_REWARD};
use neurosudoku::nlm::{self, ArityInputs, NlmModel};
use neurosudoku::sudoku::{blank_cells, compute_predicates, generate_solved, Grid, PredicateSet};
use neurosudoku::tensor::{Graph, NodeId, Tensor};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_REL: f64 = 1e-4;
pub const FD_ABS: f64 = 1e-7;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= FD_ABS || diff <= FD_REL * analytic.abs().max(numeric.abs())
}

/// Builds `loss = sum(op(inputs) * weights)` with fixed random weights, so
/// every output element contributes a distinct sensitivity.
pub struct OpCheck<F: Fn(&mut Graph, &[NodeId]) -> NodeId> {
    pub build: F,
    pub inputs: Vec<Tensor>,
    weights: Option<Tensor>,
}

impl<F: Fn(&mut Graph, &[NodeId]) -> NodeId> OpCheck<F> {
    pub fn new(build: F, inputs: Vec<Tensor>) -> Self {
        Self {
            build,
            inputs,
            weights: None,
        }
    }

    fn loss(&self, inputs: &[Tensor], grad: bool) -> (Graph, Vec<NodeId>, NodeId) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(grad);
                g.leaf(t)
            })
            .collect();
        let out = (self.build)(&mut g, &ids);
        let w = g.leaf(self.weights.clone().unwrap());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        (g, ids, loss)
    }

    /// Compares analytic and central-difference gradients for every input
    /// element. Returns the number of mismatches.
    pub fn run(&mut self, rng: &mut ChaCha8Rng) -> usize {
        let mut probe = Graph::new();
        let ids: Vec<NodeId> = self.inputs.iter().map(|t| probe.leaf(t.clone())).collect();
        let out = (self.build)(&mut probe, &ids);
        let shape = probe.shape(out).to_vec();
        self.weights = Some(random_tensor(rng, &shape, 1.0));

        let (mut g, ids, loss) = self.loss(&self.inputs, true);
        g.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = ids
            .iter()
            .map(|&i| g.value(i).grad().unwrap_or(&[]).to_vec())
            .collect();

        let mut bad = 0;
        for (k, input) in self.inputs.iter().enumerate() {
            for j in 0..input.numel() {
                let eval = |delta: f64| {
                    let mut perturbed = self.inputs.clone();
                    perturbed[k].data_mut()[j] += delta;
                    let (g, _, loss) = self.loss(&perturbed, false);
                    g.value(loss).item()
                };
                let numeric = (eval(FD_EPS) - eval(-FD_EPS)) / (2.0 * FD_EPS);
                let a = analytic[k].get(j).copied().unwrap_or(0.0);
                if !close(a, numeric) {
                    bad += 1;
                }
            }
        }
        bad
    }
}

/// Log-probability of `action` under `model` for the given predicates, no gradient.
pub fn model_log_prob(model: &NlmModel, preds: &PredicateSet, action: Action) -> f64 {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let logits = model
        .forward_on(&mut g, &bound, &ArityInputs::from_predicates(preds))
        .unwrap();
    let lp = nlm::log_prob(&mut g, logits, &preds.empty_mask, action).unwrap();
    g.value(lp).item()
}

/// Analytic gradient of the log-probability with respect to the flattened parameters.
pub fn model_log_prob_grad(model: &NlmModel, preds: &PredicateSet, action: Action) -> Vec<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let logits = model
        .forward_on(&mut g, &bound, &ArityInputs::from_predicates(preds))
        .unwrap();
    let lp = nlm::log_prob(&mut g, logits, &preds.empty_mask, action).unwrap();
    g.backward(lp).unwrap();
    model.bound_grads(&g, &bound)
}

/// Sets flat parameter `index` to `value`.
pub fn set_param(model: &mut NlmModel, mut index: usize, value: f64) {
    for t in model.params_mut() {
        if index < t.numel() {
            t.data_mut()[index] = value;
            return;
        }
        index -= t.numel();
    }
    panic!("parameter index out of range");
}

/// Finite-difference check of d log_prob / d theta on `samples` random
/// parameters. Returns `(checked, mismatches)`.
pub fn check_model_log_prob(
    model: &NlmModel,
    preds: &PredicateSet,
    action: Action,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> (usize, usize) {
    let analytic = model_log_prob_grad(model, preds, action);
    let flat = model.flat_params();
    let mut bad = 0;
    for _ in 0..samples {
        let i = rng.gen_range(0..flat.len());
        let mut m = model.clone();
        set_param(&mut m, i, flat[i] + FD_EPS);
        let up = model_log_prob(&m, preds, action);
        set_param(&mut m, i, flat[i] - FD_EPS);
        let down = model_log_prob(&m, preds, action);
        let numeric = (up - down) / (2.0 * FD_EPS);
        if !close(analytic[i], numeric) {
            bad += 1;
        }
    }
    (samples, bad)
}

/// Gradient checks for each differentiable tensor op over `instances` random
/// inputs. Returns `(op name, mismatching elements)` per op.
pub fn tensor_op_suite(rng: &mut ChaCha8Rng, instances: usize) -> Vec<(&'static str, usize)> {
    type Build = fn(&mut Graph, &[NodeId]) -> NodeId;
    let cases: Vec<(&'static str, Build, Vec<Vec<usize>>)> = vec![
        (
            "matmul_lastdim",
            |g, x| g.matmul_lastdim(x[0], x[1], x[2]).unwrap(),
            vec![vec![3, 4, 5], vec![5, 3], vec![3]],
        ),
        ("sigmoid", |g, x| g.sigmoid(x[0]), vec![vec![4, 6]]),
        (
            "softmax_flat",
            |g, x| g.softmax_flat(x[0]),
            vec![vec![3, 5]],
        ),
        (
            "concat_lastdim",
            |g, x| g.concat_lastdim(x[0], x[1]).unwrap(),
            vec![vec![9, 2], vec![9, 3]],
        ),
        (
            "expand_arity",
            |g, x| g.expand_arity(x[0]).unwrap(),
            vec![vec![9, 9, 2]],
        ),
        (
            "reduce_arity",
            |g, x| g.reduce_arity(x[0]).unwrap(),
            vec![vec![9, 9, 9, 2]],
        ),
        (
            "permute_objects",
            |g, x| g.permute_objects(x[0], &[2, 0, 1]).unwrap(),
            vec![vec![9, 9, 9, 1]],
        ),
        (
            "reshape",
            |g, x| g.reshape(x[0], vec![6, 2]).unwrap(),
            vec![vec![3, 4]],
        ),
        (
            "mul",
            |g, x| g.mul(x[0], x[1]).unwrap(),
            vec![vec![7], vec![7]],
        ),
        ("sum", |g, x| g.sum(x[0]), vec![vec![2, 3]]),
        (
            "masked_log_prob",
            |g, x| {
                let mask: Vec<bool> = (0..729).map(|i| (i / 9) % 3 != 1).collect();
                g.masked_log_prob(x[0], &mask, 5).unwrap()
            },
            vec![vec![9, 9, 9]],
        ),
        (
            "matmul_sigmoid_chain",
            |g, x| {
                let h = g.matmul_lastdim(x[0], x[1], x[2]).unwrap();
                let h = g.sigmoid(h);
                let r = g.reduce_arity(h).unwrap();
                g.softmax_flat(r)
            },
            vec![vec![9, 9, 3], vec![3, 4], vec![4]],
        ),
    ];
    cases
        .into_iter()
        .map(|(name, build, shapes)| {
            let mut bad = 0;
            for _ in 0..instances {
                let inputs = shapes.iter().map(|s| random_tensor(rng, s, 2.0)).collect();
                bad += OpCheck::new(build, inputs).run(rng);
            }
            (name, bad)
        })
        .collect()
}

/// Brute-force membership scan, written independently of `compute_predicates`.
pub fn predicates_match_oracle(grid: &Grid, p: &PredicateSet) -> bool {
    for i in 0..9 {
        for x in 0..9 {
            let v = x as u8 + 1;
            let in_row = (0..9).any(|j| grid.get(i, j) == v);
            let in_col = (0..9).any(|j| grid.get(j, i) == v);
            if p.is_row[i][x] != in_row || p.is_column[i][x] != in_col {
                return false;
            }
        }
    }
    for r in 0..9 {
        for c in 0..9 {
            if p.empty_mask[r][c] != (grid.get(r, c) == 0) {
                return false;
            }
            for x in 0..9 {
                let v = x as u8 + 1;
                let mut found = false;
                for rr in 0..9 {
                    for cc in 0..9 {
                        if rr / 3 == r / 3 && cc / 3 == c / 3 && grid.get(rr, cc) == v {
                            found = true;
                        }
                    }
                }
                if p.is_submat[r][c][x] != found
                    || p.ternary.get(&[r, c, x, 0]) != f64::from(u8::from(found))
                {
                    return false;
                }
            }
        }
    }
    true
}

/// Oracle check over `count` generated grids with random blank counts.
/// Returns the number of disagreeing grids.
pub fn predicate_oracle_suite(count: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .filter(|_| {
            let blank = rng.gen_range(1..=81);
            let grid =
                blank_cells(&generate_solved(rng.next_u64()), blank, rng.next_u64()).unwrap();
            !predicates_match_oracle(&grid, &compute_predicates(&grid))
        })
        .count()
}

/// Environment invariants under random play plus scripted episodes.
/// Returns the names of the violated checks.
pub fn env_invariant_suite(seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut fail = |name: &str| {
        if !failures.iter().any(|f| f == name) {
            failures.push(name.to_string());
        }
    };

    let (mut total_steps, mut episodes) = (0usize, 0usize);
    while total_steps < 10_000 || episodes < 100 {
        episodes += 1;
        let solved = generate_solved(rng.next_u64());
        let puzzle = blank_cells(&solved, rng.gen_range(1..=30), rng.next_u64()).unwrap();
        let budget = rng.gen_range(1..=150);
        let mut env = EnvState::reset(puzzle, budget).unwrap();
        while !env.is_terminal() {
            let before = *env.current();
            let empties = before.empty_cells();
            let (r, c) = if rng.gen_bool(0.8) {
                empties[rng.gen_range(0..empties.len())]
            } else {
                (rng.gen_range(0..9), rng.gen_range(0..9))
            };
            let x = if rng.gen_bool(0.5) {
                solved.get(r, c)
            } else {
                rng.gen_range(1..=9)
            };
            let out = env.step(Action::new(r, c, x)).unwrap();
            total_steps += 1;
            let legal = before.get(r, c) == 0 && before.admits(r, c, x);
            if out.applied != legal {
                fail("applied iff legal");
            }
            if !legal && !out.did_reset && *env.current() != before {
                fail("illegal move leaves grid unchanged");
            }
            if out.did_reset && env.current().empty_cells() != puzzle.empty_cells() {
                fail("reset restores initial empties");
            }
            if !env.current().is_valid() {
                fail("grid stays valid");
            }
            for (rr, cc) in (0..9).flat_map(|r| (0..9).map(move |c| (r, c))) {
                if puzzle.get(rr, cc) != 0 && env.current().get(rr, cc) != puzzle.get(rr, cc) {
                    fail("givens never change");
                }
            }
            let expected = if out.status == Status::Solved {
                MOVE_REWARD + SOLVE_REWARD
            } else {
                MOVE_REWARD
            };
            if (out.reward - expected).abs() > 1e-15 {
                fail("reward schedule");
            }
            if env.steps_taken() > budget {
                fail("step budget respected");
            }
            if out.status == Status::InProgress && env.dead_end() {
                fail("no in-progress dead end");
            }
        }
        if env.status() == Status::StepLimitExceeded && env.steps_taken() != budget {
            fail("step limit reached exactly at budget");
        }
        if env.step(Action::new(0, 0, 1)).is_ok() {
            fail("terminal episode rejects steps");
        }
    }

    for k in 1..=20 {
        let solved = generate_solved(rng.next_u64());
        let puzzle = blank_cells(&solved, k, rng.next_u64()).unwrap();
        let mut env = EnvState::reset(puzzle, 729).unwrap();
        let total: f64 = puzzle
            .empty_cells()
            .into_iter()
            .map(|(r, c)| {
                env.step(Action::new(r, c, solved.get(r, c)))
                    .unwrap()
                    .reward
            })
            .sum();
        let want = -0.01 * (k as f64 - 1.0) + 0.99;
        if env.status() != Status::Solved
            || env.success_score() != Ok(1)
            || (total - want).abs() > 1e-9
        {
            fail("flawless solve return");
        }
    }

    let mut g = Grid::empty();
    for (c, v) in (1..9).zip(1..=8u8) {
        g.set(0, c, v);
    }
    let mut env = EnvState::reset(g, 10).unwrap();
    let out = env.step(Action::new(4, 0, 9)).unwrap();
    if !out.applied
        || !out.did_reset
        || env.current() != &g
        || env.resets() != 1
        || env.steps_taken() != 1
    {
        fail("dead end triggers reset");
    }
    failures
}
