//! Neuro-symbolic Sudoku solving: row/column/box predicates feed a neural
//! logic machine whose ternary output scores `(row, column, value)` moves.
//! The policy is trained with REINFORCE against a step-penalized environment
//! and compared with a plain backtracking solver.

pub mod baseline;
pub mod cli;
pub mod env;
pub mod nlm;
pub mod sudoku;
pub mod tensor;
pub mod train;
