//! n×n Sudoku: validity checks, an exhaustive solver, and a seeded generator
//! of uniquely solvable instances.

use std::collections::BTreeMap;

use glauber_core::{stream, StreamRng, Token};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TaskError};

/// Cells hold `1..=n`; `0` marks an empty cell.
pub type Grid = Vec<u8>;

fn box_side(n: usize) -> Result<usize> {
    match n {
        4 => Ok(2),
        9 => Ok(3),
        _ => Err(TaskError::Invalid(format!("unsupported Sudoku side {n}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Row(usize),
    Col(usize),
    Box(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub unit: Unit,
    pub value: u8,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SudokuCheck {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

fn units(n: usize, b: usize) -> Vec<(Unit, Vec<usize>)> {
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        out.push((Unit::Row(i), (0..n).map(|j| i * n + j).collect()));
        out.push((Unit::Col(i), (0..n).map(|j| j * n + i).collect()));
        let (br, bc) = (i / b * b, i % b * b);
        out.push((Unit::Box(i), (0..n).map(|j| (br + j / b) * n + bc + j % b).collect()));
    }
    out
}

/// Every (unit, value) that appears more than once, for a full grid.
pub fn check_sudoku(n: usize, grid: &[u8]) -> Result<SudokuCheck> {
    let b = box_side(n)?;
    if grid.len() != n * n {
        return Err(TaskError::Invalid(format!("grid has {} cells, expected {}", grid.len(), n * n)));
    }
    if let Some(&v) = grid.iter().find(|&&v| v == 0 || v as usize > n) {
        return Err(TaskError::Invalid(format!("cell value {v} outside 1..={n}")));
    }
    let mut violations = Vec::new();
    for (unit, cells) in units(n, b) {
        let mut counts = vec![0usize; n + 1];
        for &c in &cells {
            counts[grid[c] as usize] += 1;
        }
        for (value, &count) in counts.iter().enumerate().skip(1) {
            if count > 1 {
                violations.push(Violation { unit, value: value as u8, count });
            }
        }
    }
    Ok(SudokuCheck { valid: violations.is_empty(), violations })
}

/// Backtracking search over candidate bitmasks, most-constrained cell first.
struct Solver {
    n: usize,
    peers: Vec<Vec<usize>>,
}

impl Solver {
    fn new(n: usize) -> Result<Self> {
        let b = box_side(n)?;
        let mut peers = vec![Vec::new(); n * n];
        for (_, cells) in units(n, b) {
            for &c in &cells {
                for &d in &cells {
                    if c != d && !peers[c].contains(&d) {
                        peers[c].push(d);
                    }
                }
            }
        }
        Ok(Self { n, peers })
    }

    fn candidates(&self, grid: &[u8], c: usize) -> u32 {
        let mut m: u32 = ((1u32 << self.n) - 1) << 1;
        for &p in &self.peers[c] {
            m &= !(1u32 << grid[p]);
        }
        m
    }

    /// Visits solutions until `visit` returns false; `order` permutes values.
    fn search(&self, grid: &mut Vec<u8>, order: &[u8], visit: &mut dyn FnMut(&[u8]) -> bool) -> bool {
        let mut best: Option<(usize, u32)> = None;
        for c in 0..grid.len() {
            if grid[c] != 0 {
                continue;
            }
            let m = self.candidates(grid, c);
            if m == 0 {
                return true;
            }
            if best.is_none_or(|(_, bm)| m.count_ones() < bm.count_ones()) {
                best = Some((c, m));
            }
        }
        let Some((c, m)) = best else {
            return visit(grid);
        };
        for &v in order {
            if m & (1 << v) != 0 {
                grid[c] = v;
                let go_on = self.search(grid, order, visit);
                grid[c] = 0;
                if !go_on {
                    return false;
                }
            }
        }
        true
    }
}

fn validate_partial(n: usize, grid: &[u8]) -> Result<()> {
    box_side(n)?;
    if grid.len() != n * n {
        return Err(TaskError::Invalid(format!("grid has {} cells, expected {}", grid.len(), n * n)));
    }
    if let Some(&v) = grid.iter().find(|&&v| v as usize > n) {
        return Err(TaskError::Invalid(format!("cell value {v} outside 0..={n}")));
    }
    Ok(())
}

fn clashes(n: usize, grid: &[u8]) -> Result<bool> {
    let s = Solver::new(n)?;
    Ok((0..grid.len()).any(|c| grid[c] != 0 && s.peers[c].iter().any(|&p| grid[p] == grid[c])))
}

/// Number of completions of a partial grid, stopping at `limit`.
pub fn count_solutions(n: usize, grid: &[u8], limit: usize) -> Result<usize> {
    validate_partial(n, grid)?;
    if clashes(n, grid)? {
        return Ok(0);
    }
    let s = Solver::new(n)?;
    let order: Vec<u8> = (1..=n as u8).collect();
    let mut count = 0;
    s.search(&mut grid.to_vec(), &order, &mut |_| {
        count += 1;
        count < limit
    });
    Ok(count)
}

/// First completion found, if any.
pub fn solve(n: usize, grid: &[u8]) -> Result<Option<Grid>> {
    validate_partial(n, grid)?;
    if clashes(n, grid)? {
        return Ok(None);
    }
    let s = Solver::new(n)?;
    let order: Vec<u8> = (1..=n as u8).collect();
    let mut found = None;
    s.search(&mut grid.to_vec(), &order, &mut |g| {
        found = Some(g.to_vec());
        false
    });
    Ok(found)
}

/// All complete grids (288 for n = 4).
pub fn all_grids(n: usize) -> Result<Vec<Grid>> {
    if n != 4 {
        return Err(TaskError::Invalid("exhaustive enumeration is limited to 4×4".into()));
    }
    let s = Solver::new(n)?;
    let order: Vec<u8> = (1..=4).collect();
    let mut out = Vec::new();
    s.search(&mut vec![0; 16], &order, &mut |g| {
        out.push(g.to_vec());
        true
    });
    Ok(out)
}

fn random_full_grid(n: usize, rng: &mut StreamRng) -> Result<Grid> {
    let s = Solver::new(n)?;
    let mut order: Vec<u8> = (1..=n as u8).collect();
    let mut grid = vec![0u8; n * n];
    // seed the first row, then complete with a shuffled value order
    let mut row = order.clone();
    row.shuffle(rng);
    grid[..n].copy_from_slice(&row);
    order.shuffle(rng);
    let mut found = None;
    s.search(&mut grid, &order, &mut |g| {
        found = Some(g.to_vec());
        false
    });
    found.ok_or_else(|| TaskError::Invalid("no completion".into()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SudokuInstance {
    pub n: usize,
    /// Cell index → value in `1..=n`.
    pub clues: BTreeMap<usize, u8>,
    pub solution: Grid,
}

impl SudokuInstance {
    pub fn puzzle(&self) -> Grid {
        let mut g = vec![0; self.n * self.n];
        for (&c, &v) in &self.clues {
            g[c] = v;
        }
        g
    }

    /// Clue count check plus uniqueness by exhaustive search.
    pub fn is_uniquely_solvable(&self) -> Result<bool> {
        Ok(count_solutions(self.n, &self.puzzle(), 2)? == 1)
    }

    /// Whether `grid` is a valid completion agreeing with every clue.
    pub fn accepts(&self, grid: &[u8]) -> bool {
        grid.len() == self.n * self.n
            && self.clues.iter().all(|(&c, &v)| grid[c] == v)
            && check_sudoku(self.n, grid).is_ok_and(|c| c.valid)
    }
}

/// Removes clues in random order while the solution stays unique, down to
/// `target` clues (or until no clue can be removed when `target` is 0).
fn carve(n: usize, solution: &[u8], target: usize, rng: &mut StreamRng) -> Result<BTreeMap<usize, u8>> {
    let mut grid = solution.to_vec();
    let mut cells: Vec<usize> = (0..n * n).collect();
    cells.shuffle(rng);
    let mut clues = n * n;
    for c in cells {
        if clues <= target {
            break;
        }
        let v = grid[c];
        grid[c] = 0;
        if count_solutions(n, &grid, 2)? == 1 {
            clues -= 1;
        } else {
            grid[c] = v;
        }
    }
    Ok(grid.iter().enumerate().filter(|(_, &v)| v != 0).map(|(c, &v)| (c, v)).collect())
}

/// Uniquely solvable instance with exactly `clue_count` clues.
pub fn gen_sudoku(n: usize, clue_count: usize, seed: u64) -> Result<SudokuInstance> {
    box_side(n)?;
    if clue_count == 0 || clue_count > n * n {
        return Err(TaskError::Infeasible(format!("clue count {clue_count} for a {n}×{n} grid")));
    }
    let mut rng = stream(seed, 0);
    for _ in 0..64 {
        let solution = random_full_grid(n, &mut rng)?;
        let clues = carve(n, &solution, clue_count, &mut rng)?;
        if clues.len() == clue_count {
            return Ok(SudokuInstance { n, clues, solution });
        }
    }
    Err(TaskError::Infeasible(format!("could not reach {clue_count} clues with a unique solution")))
}

/// Instance from which no clue can be removed without losing uniqueness.
pub fn gen_minimal_sudoku(n: usize, seed: u64) -> Result<SudokuInstance> {
    let mut rng = stream(seed, 1);
    let solution = random_full_grid(n, &mut rng)?;
    let clues = carve(n, &solution, 0, &mut rng)?;
    Ok(SudokuInstance { n, clues, solution })
}

/// Model view: one token (`value − 1`) per cell; clue cells frozen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTask {
    pub tokens: Vec<Token>,
    pub frozen: Vec<usize>,
}

/// Solved grid with the clue cells marked frozen (training form).
pub fn encode_solved(inst: &SudokuInstance) -> EncodedTask {
    EncodedTask { tokens: inst.solution.iter().map(|&v| v as Token - 1).collect(), frozen: inst.clues.keys().copied().collect() }
}

/// Clues only; blank cells hold token 0 as a placeholder (inference form).
pub fn encode_puzzle(inst: &SudokuInstance) -> EncodedTask {
    let mut tokens = vec![0 as Token; inst.n * inst.n];
    for (&c, &v) in &inst.clues {
        tokens[c] = v as Token - 1;
    }
    EncodedTask { tokens, frozen: inst.clues.keys().copied().collect() }
}

pub fn decode_grid(n: usize, tokens: &[Token]) -> Result<Grid> {
    if tokens.len() != n * n {
        return Err(TaskError::Invalid(format!("{} tokens for a {n}×{n} grid", tokens.len())));
    }
    tokens
        .iter()
        .map(|&t| if (t as usize) < n { Ok(t as u8 + 1) } else { Err(TaskError::Invalid(format!("token {t} is not a cell value"))) })
        .collect()
}

/// Rebuilds an instance from an encoded solved grid.
pub fn decode_task(n: usize, enc: &EncodedTask) -> Result<SudokuInstance> {
    let solution = decode_grid(n, &enc.tokens)?;
    let clues = enc.frozen.iter().map(|&c| (c, solution[c])).collect();
    Ok(SudokuInstance { n, clues, solution })
}

/// Number of constraint violations of a token fill (lower is better).
pub fn violation_count(n: usize, tokens: &[Token]) -> usize {
    match decode_grid(n, tokens).and_then(|g| check_sudoku(n, &g)) {
        Ok(c) => c.violations.iter().map(|v| v.count - 1).sum(),
        Err(_) => usize::MAX,
    }
}
