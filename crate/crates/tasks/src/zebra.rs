//! Zebra (Einstein) riddles over `m` positions and `c` attribute categories,
//! with a brute-force solver and a greedy uniquifying generator.

use glauber_core::{stream, Token};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TaskError};

/// Value `val` of category `cat`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attr {
    pub cat: usize,
    pub val: usize,
}

impl Attr {
    pub fn new(cat: usize, val: usize) -> Self {
        Self { cat, val }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clue {
    /// The holder of `a` is directly left of the holder of `b`.
    ImmediatelyLeft(Attr, Attr),
    /// The holder of `a` is somewhere left of the holder of `b`.
    SomewhereLeft(Attr, Attr),
    /// The holder of `a` is at position `p` (0-based).
    PositionIs(Attr, usize),
    /// The holders of `a` and `b` differ.
    IsNot(Attr, Attr),
    /// The same entity holds `a` and `b`.
    Same(Attr, Attr),
}

impl Clue {
    fn kind(&self) -> usize {
        match self {
            Clue::ImmediatelyLeft(..) => 0,
            Clue::SomewhereLeft(..) => 1,
            Clue::PositionIs(..) => 2,
            Clue::IsNot(..) => 3,
            Clue::Same(..) => 4,
        }
    }
}

/// `assign[cat][pos]` is the value of category `cat` at position `pos`.
pub type Assignment = Vec<Vec<usize>>;

fn position_of(a: &Assignment, attr: Attr) -> usize {
    a[attr.cat].iter().position(|&v| v == attr.val).expect("assignment rows are permutations")
}

pub fn satisfies(a: &Assignment, clue: &Clue) -> bool {
    match *clue {
        Clue::ImmediatelyLeft(x, y) => position_of(a, x) + 1 == position_of(a, y),
        Clue::SomewhereLeft(x, y) => position_of(a, x) < position_of(a, y),
        Clue::PositionIs(x, p) => position_of(a, x) == p,
        Clue::IsNot(x, y) => position_of(a, x) != position_of(a, y),
        Clue::Same(x, y) => position_of(a, x) == position_of(a, y),
    }
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..m).collect();
    fn rec(k: usize, p: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == p.len() {
            out.push(p.clone());
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            rec(k + 1, p, out);
            p.swap(k, i);
        }
    }
    rec(0, &mut p, &mut out);
    out.sort();
    out
}

/// Every assignment, `(m!)^c` of them.
pub fn all_assignments(m: usize, c: usize) -> Vec<Assignment> {
    let perms = permutations(m);
    let mut out: Vec<Assignment> = vec![Vec::new()];
    for _ in 0..c {
        out = out.into_iter().flat_map(|a| perms.iter().map(move |p| [a.clone(), vec![p.clone()]].concat())).collect();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZebraInstance {
    pub m: usize,
    pub categories: usize,
    pub clues: Vec<Clue>,
    pub solution: Assignment,
}

fn check_shape(m: usize, c: usize) -> Result<()> {
    if !(2..=5).contains(&m) || c == 0 || c > 3 {
        return Err(TaskError::Invalid(format!("unsupported riddle size m={m}, categories={c}")));
    }
    Ok(())
}

/// All assignments satisfying every clue, by brute force.
pub fn solve_zebra(inst: &ZebraInstance) -> Result<Vec<Assignment>> {
    check_shape(inst.m, inst.categories)?;
    Ok(all_assignments(inst.m, inst.categories).into_iter().filter(|a| inst.clues.iter().all(|c| satisfies(a, c))).collect())
}

fn true_clues(sol: &Assignment, m: usize, c: usize) -> Vec<Clue> {
    let attrs: Vec<Attr> = (0..c).flat_map(|cat| (0..m).map(move |val| Attr::new(cat, val))).collect();
    let mut out = Vec::new();
    for &x in &attrs {
        for p in 0..m {
            out.push(Clue::PositionIs(x, p));
        }
        for &y in &attrs {
            if x == y {
                continue;
            }
            out.push(Clue::ImmediatelyLeft(x, y));
            out.push(Clue::SomewhereLeft(x, y));
            if x.cat != y.cat {
                out.push(Clue::IsNot(x, y));
                out.push(Clue::Same(x, y));
            }
        }
    }
    out.retain(|cl| satisfies(sol, cl));
    out
}

/// Random ground truth, then clues in random order, keeping each one that
/// shrinks the candidate set, until exactly one assignment is left.
pub fn gen_zebra(m: usize, categories: usize, seed: u64) -> Result<ZebraInstance> {
    check_shape(m, categories)?;
    let mut rng = stream(seed, 0);
    let solution: Assignment = (0..categories)
        .map(|_| {
            let mut p: Vec<usize> = (0..m).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let mut pool = true_clues(&solution, m, categories);
    pool.shuffle(&mut rng);
    let mut alive = all_assignments(m, categories);
    let mut clues = Vec::new();
    for cl in pool {
        if alive.len() == 1 {
            break;
        }
        let next: Vec<Assignment> = alive.iter().filter(|a| satisfies(a, &cl)).cloned().collect();
        if next.len() < alive.len() {
            alive = next;
            clues.push(cl);
        }
    }
    Ok(ZebraInstance { m, categories, clues, solution })
}

/// The three-person riddle with names, house colors and drinks.
///
/// Names: Ali 0, Rose 1, Randy 2. Colors: gold 0, silver 1, indigo 2.
/// Drinks: orange juice 0, beer 1, coffee 2.
pub fn worked_example() -> ZebraInstance {
    let (name, color, drink) = (0, 1, 2);
    let clues = vec![
        Clue::ImmediatelyLeft(Attr::new(drink, 0), Attr::new(drink, 2)),
        Clue::SomewhereLeft(Attr::new(drink, 1), Attr::new(color, 2)),
        Clue::PositionIs(Attr::new(name, 1), 0),
        Clue::IsNot(Attr::new(name, 2), Attr::new(drink, 0)),
        Clue::Same(Attr::new(name, 2), Attr::new(color, 0)),
    ];
    let solution = vec![vec![1, 0, 2], vec![1, 2, 0], vec![1, 0, 2]];
    ZebraInstance { m: 3, categories: 3, clues, solution }
}

/// Token layout for one riddle family: a frozen preamble of `max_clues`
/// (kind, arg, arg) triples followed by one value token per (position,
/// category) slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZebraCodec {
    pub m: usize,
    pub categories: usize,
    pub max_clues: usize,
}

const KINDS: usize = 5;

impl ZebraCodec {
    pub fn vocab(&self) -> usize {
        let (m, c) = (self.m, self.categories);
        m + c * m + m + KINDS + 1
    }

    pub fn preamble_len(&self) -> usize {
        3 * self.max_clues
    }

    pub fn seq_len(&self) -> usize {
        self.preamble_len() + self.m * self.categories
    }

    fn attr_tok(&self, a: Attr) -> Token {
        (self.m + a.cat * self.m + a.val) as Token
    }

    fn pos_tok(&self, p: usize) -> Token {
        (self.m + self.categories * self.m + p) as Token
    }

    fn kind_tok(&self, k: usize) -> Token {
        (self.m + self.categories * self.m + self.m + k) as Token
    }

    fn pad(&self) -> Token {
        (self.vocab() - 1) as Token
    }

    fn attr_of(&self, t: Token) -> Result<Attr> {
        let t = t as usize;
        let lo = self.m;
        if t < lo || t >= lo + self.categories * self.m {
            return Err(TaskError::Invalid(format!("token {t} is not an attribute")));
        }
        Ok(Attr::new((t - lo) / self.m, (t - lo) % self.m))
    }

    fn pos_of(&self, t: Token) -> Result<usize> {
        let lo = self.m + self.categories * self.m;
        let t = t as usize;
        if t < lo || t >= lo + self.m {
            return Err(TaskError::Invalid(format!("token {t} is not a position")));
        }
        Ok(t - lo)
    }

    /// Index of the slot holding category `cat` at position `pos`.
    pub fn slot(&self, pos: usize, cat: usize) -> usize {
        self.preamble_len() + pos * self.categories + cat
    }

    fn check(&self, inst: &ZebraInstance) -> Result<()> {
        if inst.m != self.m || inst.categories != self.categories {
            return Err(TaskError::Invalid("riddle shape differs from the codec".into()));
        }
        if inst.clues.len() > self.max_clues {
            return Err(TaskError::Invalid(format!("{} clues exceed the preamble of {}", inst.clues.len(), self.max_clues)));
        }
        Ok(())
    }

    fn preamble(&self, inst: &ZebraInstance) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.seq_len());
        for cl in &inst.clues {
            let (a, b) = match *cl {
                Clue::ImmediatelyLeft(x, y) | Clue::SomewhereLeft(x, y) | Clue::IsNot(x, y) | Clue::Same(x, y) => {
                    (self.attr_tok(x), self.attr_tok(y))
                }
                Clue::PositionIs(x, p) => (self.attr_tok(x), self.pos_tok(p)),
            };
            out.extend([self.kind_tok(cl.kind()), a, b]);
        }
        out.resize(self.preamble_len(), self.pad());
        out
    }

    /// Preamble plus the solved grid (training form); the preamble is frozen.
    pub fn encode_solved(&self, inst: &ZebraInstance) -> Result<(Vec<Token>, Vec<usize>)> {
        self.check(inst)?;
        let mut t = self.preamble(inst);
        for pos in 0..self.m {
            for cat in 0..self.categories {
                t.push(inst.solution[cat][pos] as Token);
            }
        }
        Ok((t, (0..self.preamble_len()).collect()))
    }

    /// Preamble with placeholder slots (inference form).
    pub fn encode_puzzle(&self, inst: &ZebraInstance) -> Result<(Vec<Token>, Vec<usize>)> {
        self.check(inst)?;
        let mut t = self.preamble(inst);
        t.resize(self.seq_len(), 0);
        Ok((t, (0..self.preamble_len()).collect()))
    }

    pub fn decode_clues(&self, tokens: &[Token]) -> Result<Vec<Clue>> {
        let mut clues = Vec::new();
        for tri in tokens[..self.preamble_len()].chunks(3) {
            if tri.iter().all(|&t| t == self.pad()) {
                continue;
            }
            let kind = (tri[0] as usize).checked_sub(self.kind_tok(0) as usize).filter(|&k| k < KINDS);
            let cl = match kind {
                Some(0) => Clue::ImmediatelyLeft(self.attr_of(tri[1])?, self.attr_of(tri[2])?),
                Some(1) => Clue::SomewhereLeft(self.attr_of(tri[1])?, self.attr_of(tri[2])?),
                Some(2) => Clue::PositionIs(self.attr_of(tri[1])?, self.pos_of(tri[2])?),
                Some(3) => Clue::IsNot(self.attr_of(tri[1])?, self.attr_of(tri[2])?),
                Some(4) => Clue::Same(self.attr_of(tri[1])?, self.attr_of(tri[2])?),
                _ => return Err(TaskError::Invalid(format!("token {} is not a clue kind", tri[0]))),
            };
            clues.push(cl);
        }
        Ok(clues)
    }

    /// Grid fill; fails unless every category row is a permutation.
    pub fn decode_assignment(&self, tokens: &[Token]) -> Result<Assignment> {
        if tokens.len() != self.seq_len() {
            return Err(TaskError::Invalid(format!("{} tokens, expected {}", tokens.len(), self.seq_len())));
        }
        let mut a = vec![vec![0; self.m]; self.categories];
        for pos in 0..self.m {
            for cat in 0..self.categories {
                let v = tokens[self.slot(pos, cat)] as usize;
                if v >= self.m {
                    return Err(TaskError::Invalid(format!("slot token {v} is not a value")));
                }
                a[cat][pos] = v;
            }
        }
        for row in &a {
            let mut s = row.clone();
            s.sort_unstable();
            if s != (0..self.m).collect::<Vec<_>>() {
                return Err(TaskError::Invalid("category values repeat".into()));
            }
        }
        Ok(a)
    }

    pub fn decode(&self, tokens: &[Token]) -> Result<ZebraInstance> {
        Ok(ZebraInstance {
            m: self.m,
            categories: self.categories,
            clues: self.decode_clues(tokens)?,
            solution: self.decode_assignment(tokens)?,
        })
    }

    /// Number of clues a fill violates (`usize::MAX` when it does not decode).
    pub fn violations(&self, inst: &ZebraInstance, tokens: &[Token]) -> usize {
        match self.decode_assignment(tokens) {
            Ok(a) => inst.clues.iter().filter(|c| !satisfies(&a, c)).count(),
            Err(_) => usize::MAX,
        }
    }
}

/// Generator retrying seeds until the clue list fits the codec.
pub fn gen_zebra_fitting(codec: &ZebraCodec, seed: u64) -> Result<ZebraInstance> {
    for attempt in 0..1000u64 {
        let inst = gen_zebra(codec.m, codec.categories, glauber_core::rng::derive_seed(seed, attempt))?;
        if inst.clues.len() <= codec.max_clues {
            return Ok(inst);
        }
    }
    Err(TaskError::Infeasible(format!("no riddle fits {} clues", codec.max_clues)))
}
