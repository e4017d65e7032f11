//! Plain backtracking: empty cells in row-major order, values tried in
//! ascending order, pruned on validity. No propagation or cell-ordering
//! heuristics.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::sudoku::{Grid, SIZE};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BaselineError {
    #[error("puzzle is not a valid configuration")]
    InvalidPuzzle,
    #[error("solution cap must be at least 1")]
    ZeroCap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolveResult {
    pub solution: Option<Grid>,
    /// Committed cell assignments, including ones later undone.
    pub placements: u64,
    pub backtracks: u64,
    /// Search time only.
    pub elapsed: Duration,
}

struct Search {
    grid: Grid,
    empties: Vec<(usize, usize)>,
    placements: u64,
    backtracks: u64,
}

impl Search {
    fn new(puzzle: &Grid) -> Self {
        Self {
            grid: *puzzle,
            empties: puzzle.empty_cells(),
            placements: 0,
            backtracks: 0,
        }
    }

    /// Depth-first search from empty cell `k`. `visit` is called on each
    /// complete grid and returns whether to stop.
    fn run(&mut self, k: usize, visit: &mut dyn FnMut(&Grid) -> bool) -> bool {
        if k == self.empties.len() {
            return visit(&self.grid);
        }
        let (r, c) = self.empties[k];
        let candidates = self.grid.candidates(r, c);
        for v in 1..=SIZE as u8 {
            if candidates & (1 << v) == 0 {
                continue;
            }
            self.grid.set(r, c, v);
            self.placements += 1;
            if self.run(k + 1, visit) {
                return true;
            }
            self.grid.set(r, c, 0);
            self.backtracks += 1;
        }
        false
    }
}

pub fn solve_backtracking(puzzle: &Grid) -> Result<SolveResult, BaselineError> {
    if !puzzle.is_valid() {
        return Err(BaselineError::InvalidPuzzle);
    }
    let start = Instant::now();
    let mut search = Search::new(puzzle);
    let mut found = None;
    search.run(0, &mut |g| {
        found = Some(*g);
        true
    });
    let elapsed = start.elapsed();
    Ok(SolveResult {
        solution: found,
        placements: search.placements,
        backtracks: search.backtracks,
        elapsed,
    })
}

/// Number of completions, stopping early once `cap` are found.
pub fn count_solutions(puzzle: &Grid, cap: usize) -> Result<usize, BaselineError> {
    if !puzzle.is_valid() {
        return Err(BaselineError::InvalidPuzzle);
    }
    if cap == 0 {
        return Err(BaselineError::ZeroCap);
    }
    let mut search = Search::new(puzzle);
    let mut count = 0;
    search.run(0, &mut |_| {
        count += 1;
        count >= cap
    });
    Ok(count)
}
