//! Sudoku as an episodic RL environment.
//!
//! Every step costs `MOVE_REWARD`; the move that completes the grid also
//! earns `SOLVE_REWARD`. Placements that would break validity, or target a
//! filled cell, are charged but not committed. When some empty cell has no
//! admissible value left, the board is reset to the posed puzzle. Steps are
//! counted against one budget per episode, resets included.

use thiserror::Error;

use crate::sudoku::{Grid, SIZE};

pub const MOVE_REWARD: f64 = -0.01;
pub const SOLVE_REWARD: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("puzzle is not a valid configuration")]
    InvalidPuzzle,
    #[error("puzzle has no empty cells")]
    AlreadySolved,
    #[error("max_steps must be at least 1")]
    ZeroStepBudget,
    #[error("episode already ended with status {0:?}")]
    Terminal(Status),
    #[error("episode is still in progress")]
    NotTerminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Action {
    pub r: usize,
    pub c: usize,
    pub x: u8,
}

impl Action {
    /// Panics on out-of-range coordinates or value.
    pub fn new(r: usize, c: usize, x: u8) -> Self {
        assert!(
            r < SIZE && c < SIZE && (1..=9).contains(&x),
            "action ({r}, {c}, {x}) out of range"
        );
        Self { r, c, x }
    }

    /// Flat position in the `[9, 9, 9]` action tensor.
    pub fn index(&self) -> usize {
        (self.r * SIZE + self.c) * SIZE + usize::from(self.x - 1)
    }

    pub fn from_index(i: usize) -> Self {
        Self::new(i / (SIZE * SIZE), (i / SIZE) % SIZE, (i % SIZE) as u8 + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    InProgress,
    Solved,
    StepLimitExceeded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub applied: bool,
    pub status: Status,
    pub did_reset: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    initial: Grid,
    current: Grid,
    steps_taken: usize,
    max_steps: usize,
    resets: usize,
    status: Status,
}

impl EnvState {
    /// Starts a fresh episode on `puzzle`.
    pub fn reset(puzzle: Grid, max_steps: usize) -> Result<Self, EnvError> {
        if !puzzle.is_valid() {
            return Err(EnvError::InvalidPuzzle);
        }
        if puzzle.count_empty() == 0 {
            return Err(EnvError::AlreadySolved);
        }
        if max_steps == 0 {
            return Err(EnvError::ZeroStepBudget);
        }
        Ok(Self {
            initial: puzzle,
            current: puzzle,
            steps_taken: 0,
            max_steps,
            resets: 0,
            status: Status::InProgress,
        })
    }

    /// Restores the posed puzzle within the current episode; the step count
    /// and budget carry over.
    pub fn restart(&mut self) {
        self.current = self.initial;
        self.resets += 1;
    }

    pub fn initial(&self) -> &Grid {
        &self.initial
    }

    pub fn current(&self) -> &Grid {
        &self.current
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn resets(&self) -> usize {
        self.resets
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn is_terminal(&self) -> bool {
        self.status != Status::InProgress
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome, EnvError> {
        if self.is_terminal() {
            return Err(EnvError::Terminal(self.status));
        }
        self.steps_taken += 1;
        let Action { r, c, x } = action;
        let legal = self.current.get(r, c) == 0 && self.current.admits(r, c, x);
        let mut reward = MOVE_REWARD;
        let mut did_reset = false;
        if legal {
            self.current.set(r, c, x);
            if self.current.count_empty() == 0 {
                self.status = Status::Solved;
                reward += SOLVE_REWARD;
            } else if self.dead_end() {
                self.restart();
                did_reset = true;
            }
        }
        if self.status == Status::InProgress && self.steps_taken >= self.max_steps {
            self.status = Status::StepLimitExceeded;
        }
        Ok(StepOutcome {
            reward,
            applied: legal,
            status: self.status,
            did_reset,
        })
    }

    /// Some empty cell admits none of the values 1..=9.
    pub fn dead_end(&self) -> bool {
        dead_end(&self.current)
    }

    /// 1 for a solved episode, 0 for one that ran out of steps.
    pub fn success_score(&self) -> Result<u8, EnvError> {
        match self.status {
            Status::InProgress => Err(EnvError::NotTerminal),
            Status::Solved => Ok(1),
            Status::StepLimitExceeded => Ok(0),
        }
    }
}

pub fn dead_end(grid: &Grid) -> bool {
    grid.empty_cells()
        .into_iter()
        .any(|(r, c)| grid.candidates(r, c) == 0)
}
