//! Grid representation, validity rules, the row/column/box predicates and
//! puzzle sources (seeded generator and dataset files).
//!
//! Values `1..=9` map to tensor index `value - 1` everywhere in the crate.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

pub const SIZE: usize = 9;
pub const CELLS: usize = SIZE * SIZE;

#[derive(Debug, Error)]
pub enum SudokuError {
    #[error("cell value {0} out of range 0..=9")]
    ValueOutOfRange(u8),
    #[error("n_empty must be in 1..=81, got {0}")]
    EmptyCount(usize),
    #[error("source grid is not a solved sudoku")]
    NotSolved,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// A 9x9 board, row-major, `0` marks an empty cell.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    cells: [[u8; SIZE]; SIZE],
}

impl Default for Grid {
    fn default() -> Self {
        Self::empty()
    }
}

impl Grid {
    pub fn empty() -> Self {
        Self {
            cells: [[0; SIZE]; SIZE],
        }
    }

    pub fn from_rows(cells: [[u8; SIZE]; SIZE]) -> Result<Self, SudokuError> {
        if let Some(&v) = cells.iter().flatten().find(|&&v| v > 9) {
            return Err(SudokuError::ValueOutOfRange(v));
        }
        Ok(Self { cells })
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.cells[r][c]
    }

    /// Panics if `value > 9`.
    pub fn set(&mut self, r: usize, c: usize, value: u8) {
        assert!(value <= 9, "cell value {value} out of range");
        self.cells[r][c] = value;
    }

    pub fn rows(&self) -> &[[u8; SIZE]; SIZE] {
        &self.cells
    }

    pub fn empty_cells(&self) -> Vec<(usize, usize)> {
        (0..SIZE)
            .flat_map(|r| (0..SIZE).map(move |c| (r, c)))
            .filter(|&(r, c)| self.cells[r][c] == 0)
            .collect()
    }

    pub fn count_empty(&self) -> usize {
        self.cells.iter().flatten().filter(|&&v| v == 0).count()
    }

    /// No nonzero value repeats within a row, column or aligned 3x3 box.
    #[allow(clippy::needless_range_loop)]
    pub fn is_valid(&self) -> bool {
        let mut rows = [0u16; SIZE];
        let mut cols = [0u16; SIZE];
        let mut boxes = [0u16; SIZE];
        for r in 0..SIZE {
            for c in 0..SIZE {
                let v = self.cells[r][c];
                if v == 0 {
                    continue;
                }
                let bit = 1u16 << v;
                let b = box_index(r, c);
                if rows[r] & bit != 0 || cols[c] & bit != 0 || boxes[b] & bit != 0 {
                    return false;
                }
                rows[r] |= bit;
                cols[c] |= bit;
                boxes[b] |= bit;
            }
        }
        true
    }

    pub fn is_solved(&self) -> bool {
        self.count_empty() == 0 && self.is_valid()
    }

    /// Whether `value` can go into the empty cell `(r, c)` without creating a duplicate.
    pub fn admits(&self, r: usize, c: usize, value: u8) -> bool {
        let (br, bc) = (3 * (r / 3), 3 * (c / 3));
        (0..SIZE).all(|i| self.cells[r][i] != value && self.cells[i][c] != value)
            && (br..br + 3).all(|i| (bc..bc + 3).all(|j| self.cells[i][j] != value))
    }

    /// Bitmask of values (bit `v` for value `v`) that fit the cell `(r, c)`.
    pub fn candidates(&self, r: usize, c: usize) -> u16 {
        let mut used = 0u16;
        let (br, bc) = (3 * (r / 3), 3 * (c / 3));
        for i in 0..SIZE {
            used |= 1 << self.cells[r][i];
            used |= 1 << self.cells[i][c];
            used |= 1 << self.cells[br + i / 3][bc + i % 3];
        }
        !used & 0b11_1111_1110
    }

    /// 81-character dataset line, `0` for empty cells.
    pub fn to_line(&self) -> String {
        self.cells
            .iter()
            .flatten()
            .map(|&v| char::from(b'0' + v))
            .collect()
    }

    pub fn from_line(line: &str) -> Result<Self, String> {
        let chars: Vec<char> = line.chars().collect();
        if chars.len() != CELLS {
            return Err(format!("expected 81 characters, found {}", chars.len()));
        }
        let mut cells = [[0u8; SIZE]; SIZE];
        for (i, ch) in chars.into_iter().enumerate() {
            cells[i / SIZE][i % SIZE] = match ch {
                '.' => 0,
                '0'..='9' => ch as u8 - b'0',
                other => return Err(format!("invalid character {other:?} at column {}", i + 1)),
            };
        }
        Ok(Self { cells })
    }
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Grid({})", self.to_line())
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (r, row) in self.cells.iter().enumerate() {
            if r > 0 && r % 3 == 0 {
                writeln!(f, "------+-------+------")?;
            }
            for (c, &v) in row.iter().enumerate() {
                if c > 0 && c % 3 == 0 {
                    write!(f, "| ")?;
                }
                let ch = if v == 0 { '.' } else { char::from(b'0' + v) };
                write!(f, "{ch}")?;
                if c + 1 < SIZE {
                    write!(f, " ")?;
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn box_index(r: usize, c: usize) -> usize {
    3 * (r / 3) + c / 3
}

/// Boolean predicates over a grid plus their real-valued network encodings.
#[derive(Debug, Clone)]
pub struct PredicateSet {
    /// `is_row[r][x]`: value `x + 1` appears in row `r`.
    pub is_row: [[bool; SIZE]; SIZE],
    /// `is_column[c][x]`: value `x + 1` appears in column `c`.
    pub is_column: [[bool; SIZE]; SIZE],
    /// `is_submat[r][c][x]`: value `x + 1` appears in the box holding `(r, c)`.
    pub is_submat: [[[bool; SIZE]; SIZE]; SIZE],
    /// `[9, 9, 2]`: channel 0 is `is_row`, channel 1 is `is_column`.
    pub stacked_binary: Tensor,
    /// `[9, 9, 9, 1]` cast of `is_submat`.
    pub ternary: Tensor,
    pub empty_mask: [[bool; SIZE]; SIZE],
}

pub fn compute_predicates(grid: &Grid) -> PredicateSet {
    let mut is_row = [[false; SIZE]; SIZE];
    let mut is_column = [[false; SIZE]; SIZE];
    let mut in_box = [[false; SIZE]; SIZE];
    let mut empty_mask = [[false; SIZE]; SIZE];
    for r in 0..SIZE {
        for c in 0..SIZE {
            match grid.get(r, c) {
                0 => empty_mask[r][c] = true,
                v => {
                    let x = usize::from(v - 1);
                    is_row[r][x] = true;
                    is_column[c][x] = true;
                    in_box[box_index(r, c)][x] = true;
                }
            }
        }
    }
    let mut is_submat = [[[false; SIZE]; SIZE]; SIZE];
    for (r, plane) in is_submat.iter_mut().enumerate() {
        for (c, cell) in plane.iter_mut().enumerate() {
            *cell = in_box[box_index(r, c)];
        }
    }

    let cast = |b: bool| if b { 1.0 } else { 0.0 };
    let mut binary = Vec::with_capacity(CELLS * 2);
    for i in 0..SIZE {
        for x in 0..SIZE {
            binary.push(cast(is_row[i][x]));
            binary.push(cast(is_column[i][x]));
        }
    }
    let ternary: Vec<f64> = is_submat
        .iter()
        .flatten()
        .flatten()
        .map(|&b| cast(b))
        .collect();

    PredicateSet {
        is_row,
        is_column,
        is_submat,
        stacked_binary: Tensor::new(vec![SIZE, SIZE, 2], binary).expect("binary predicate shape"),
        ternary: Tensor::new(vec![SIZE, SIZE, SIZE, 1], ternary).expect("ternary predicate shape"),
        empty_mask,
    }
}

/// Fully solved grid from randomized backtracking; each cell tries values in
/// an order shuffled by a ChaCha8 stream seeded with `seed`.
pub fn generate_solved(seed: u64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = Grid::empty();
    let filled = fill_random(&mut grid, 0, &mut rng);
    debug_assert!(filled);
    grid
}

fn fill_random(grid: &mut Grid, pos: usize, rng: &mut ChaCha8Rng) -> bool {
    if pos == CELLS {
        return true;
    }
    let (r, c) = (pos / SIZE, pos % SIZE);
    let mut values: [u8; SIZE] = [1, 2, 3, 4, 5, 6, 7, 8, 9];
    values.shuffle(rng);
    for v in values {
        if grid.admits(r, c, v) {
            grid.set(r, c, v);
            if fill_random(grid, pos + 1, rng) {
                return true;
            }
            grid.set(r, c, 0);
        }
    }
    false
}

/// Copy of `solved` with `n_empty` distinct cells, chosen uniformly, set to 0.
pub fn blank_cells(solved: &Grid, n_empty: usize, seed: u64) -> Result<Grid, SudokuError> {
    if !solved.is_solved() {
        return Err(SudokuError::NotSolved);
    }
    if !(1..=CELLS).contains(&n_empty) {
        return Err(SudokuError::EmptyCount(n_empty));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut puzzle = *solved;
    for i in index::sample(&mut rng, CELLS, n_empty) {
        puzzle.set(i / SIZE, i % SIZE, 0);
    }
    Ok(puzzle)
}

/// Reads a dataset: one 81-character grid per line (`0` or `.` empty),
/// blank lines skipped. Complete lines must be solved; partial lines valid.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Grid>, SudokuError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| SudokuError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<Vec<Grid>, SudokuError> {
    let mut grids = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: String| SudokuError::Parse {
            line: i + 1,
            reason,
        };
        let grid = Grid::from_line(line).map_err(parse_err)?;
        if grid.count_empty() == 0 {
            if !grid.is_solved() {
                return Err(parse_err("complete grid is not a valid solution".into()));
            }
        } else if !grid.is_valid() {
            return Err(parse_err(
                "grid repeats a value in a row, column or box".into(),
            ));
        }
        grids.push(grid);
    }
    Ok(grids)
}

pub fn write_dataset(path: impl AsRef<Path>, grids: &[Grid]) -> Result<(), SudokuError> {
    let path = path.as_ref();
    let mut text = String::with_capacity(grids.len() * (CELLS + 1));
    for g in grids {
        text.push_str(&g.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| SudokuError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Where puzzles come from: fresh generated solutions, or solution grids
/// read from a dataset. Either way a puzzle is a solution with cells blanked.
#[derive(Debug, Clone, PartialEq)]
pub enum PuzzleSource {
    Generator,
    Dataset(Vec<Grid>),
}

impl PuzzleSource {
    /// Dataset source. Partial grids are completed with the backtracking
    /// solver so every entry is a full solution.
    pub fn from_grids(grids: Vec<Grid>) -> Result<Self, SudokuError> {
        if grids.is_empty() {
            return Err(SudokuError::Parse {
                line: 0,
                reason: "dataset holds no grids".into(),
            });
        }
        let solutions = grids
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                if g.is_solved() {
                    return Ok(g);
                }
                crate::baseline::solve_backtracking(&g)
                    .ok()
                    .and_then(|res| res.solution)
                    .ok_or(SudokuError::Parse {
                        line: i + 1,
                        reason: "grid has no completion".into(),
                    })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self::Dataset(solutions))
    }

    /// Deterministic puzzle with `n_empty` blanks derived from `seed`.
    pub fn puzzle(&self, n_empty: usize, seed: u64) -> Result<Grid, SudokuError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let solution = match self {
            Self::Generator => generate_solved(rng.next_u64()),
            Self::Dataset(grids) => grids[rng.gen_range(0..grids.len())],
        };
        blank_cells(&solution, n_empty, rng.next_u64())
    }
}
