//! Puzzle accuracy, distribution quality and iso-compute best-of-N.

use glauber_core::oracle::StateEnumeration;
use glauber_core::rng::derive_seed;
use glauber_core::{stream, StreamRng, TabularDistribution, Token, TokenSeq, UpdateSchedule};
use glauber_net::{causal_fill, generate, generate_batch, GenerationReport, GenerationSpec, Invocations, ReverseBackend};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TaskError};
use crate::hmm::HmmCorpus;
use crate::stats::{mean_se, proportion_se};
use crate::sudoku::{decode_grid, encode_puzzle, violation_count, SudokuInstance};
use crate::zebra::{ZebraCodec, ZebraInstance};

/// A puzzle posed to a model: its encoded prompt and a checker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Puzzle {
    Sudoku(SudokuInstance),
    Zebra { codec: ZebraCodec, instance: ZebraInstance },
}

impl Puzzle {
    pub fn encode(&self) -> Result<(Vec<Token>, Vec<usize>)> {
        match self {
            Puzzle::Sudoku(s) => {
                let e = encode_puzzle(s);
                Ok((e.tokens, e.frozen))
            }
            Puzzle::Zebra { codec, instance } => codec.encode_puzzle(instance),
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            Puzzle::Sudoku(s) => s.n * s.n,
            Puzzle::Zebra { codec, .. } => codec.seq_len(),
        }
    }

    pub fn solved(&self, tokens: &[Token]) -> bool {
        match self {
            Puzzle::Sudoku(s) => decode_grid(s.n, tokens).is_ok_and(|g| s.accepts(&g)),
            Puzzle::Zebra { codec, instance } => codec.decode_assignment(tokens).is_ok_and(|a| a == instance.solution),
        }
    }

    /// Constraint violations; 0 iff solved for uniquely solvable puzzles.
    pub fn violations(&self, tokens: &[Token]) -> usize {
        match self {
            Puzzle::Sudoku(s) => violation_count(s.n, tokens),
            Puzzle::Zebra { codec, instance } => codec.violations(instance, tokens),
        }
    }
}

/// How fills are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decoder {
    /// Left-to-right next-token fill only.
    Causal,
    /// Causal fill then `rounds` reverse Glauber rounds.
    Glauber { rounds: usize, schedule_seed: u64, window: usize },
}

impl Decoder {
    /// Short form for tables, e.g. `glauber-n3-w6`.
    pub fn label(&self) -> String {
        match self {
            Decoder::Causal => "causal".into(),
            Decoder::Glauber { rounds, window, .. } => format!("glauber-n{rounds}-w{window}"),
        }
    }

    fn run(&self, backend: &dyn ReverseBackend, init: &[Token], frozen: &[usize], rng: &mut StreamRng) -> Result<GenerationReport> {
        match *self {
            Decoder::Causal => Ok(causal_fill(backend, &[init.to_vec()], frozen, None, std::slice::from_mut(rng))?.remove(0)),
            Decoder::Glauber { rounds, schedule_seed, window } => {
                let spec = GenerationSpec {
                    schedule: UpdateSchedule::build(init.len(), rounds, schedule_seed)?,
                    frozen: frozen.to_vec(),
                    window,
                    top_p: None,
                };
                Ok(generate(backend, init, &spec, rng)?)
            }
        }
    }

    fn run_batch(&self, backend: &dyn ReverseBackend, len: usize, count: usize, rngs: &mut [StreamRng]) -> Result<Vec<GenerationReport>> {
        let inits = vec![vec![0 as Token; len]; count];
        match *self {
            Decoder::Causal => Ok(causal_fill(backend, &inits, &[], None, rngs)?),
            Decoder::Glauber { rounds, schedule_seed, window } => {
                let spec = GenerationSpec { schedule: UpdateSchedule::build(len, rounds, schedule_seed)?, frozen: Vec::new(), window, top_p: None };
                Ok(generate_batch(backend, &inits, &spec, rngs)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuzzleRecord {
    pub index: usize,
    pub solved: bool,
    pub violations: usize,
    pub tokens: Vec<Token>,
    pub invocations: Invocations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuzzleReport {
    pub decoder: Decoder,
    pub seed: u64,
    pub count: usize,
    pub accuracy: f64,
    pub se: f64,
    pub records: Vec<PuzzleRecord>,
}

/// Fills every puzzle once; instance `i` samples from stream `(seed, i)`.
pub fn eval_puzzles(backend: &dyn ReverseBackend, puzzles: &[Puzzle], decoder: Decoder, seed: u64) -> Result<PuzzleReport> {
    let mut records = Vec::with_capacity(puzzles.len());
    for (i, pz) in puzzles.iter().enumerate() {
        let (init, frozen) = pz.encode()?;
        let rep = decoder.run(backend, &init, &frozen, &mut stream(seed, i as u64))?;
        records.push(PuzzleRecord {
            index: i,
            solved: pz.solved(&rep.output),
            violations: pz.violations(&rep.output),
            tokens: rep.output,
            invocations: rep.invocations,
        });
    }
    let solved = records.iter().filter(|r| r.solved).count();
    let (accuracy, se) = proportion_se(solved, puzzles.len());
    Ok(PuzzleReport { decoder, seed, count: puzzles.len(), accuracy, se, records })
}

/// Ground truth with an exact likelihood.
pub enum Truth<'a> {
    Hmm(&'a HmmCorpus),
    Tabular(&'a TabularDistribution),
}

impl Truth<'_> {
    fn seq_len(&self) -> usize {
        match self {
            Truth::Hmm(h) => h.len,
            Truth::Tabular(t) => t.len(),
        }
    }

    fn vocab(&self) -> usize {
        match self {
            Truth::Hmm(h) => h.vocab,
            Truth::Tabular(t) => t.space().vocab().size(),
        }
    }

    pub fn nll(&self, x: &[Token]) -> Result<f64> {
        match self {
            Truth::Hmm(h) => Ok(-h.log_likelihood(x)?),
            Truth::Tabular(t) => Ok(-t.prob(x).ln()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistReport {
    pub count: usize,
    pub seed: u64,
    pub mean_nll: f64,
    pub nll_se: f64,
    /// Empirical TV to the truth (tabular truths only).
    pub tv: Option<f64>,
    /// `½ Σ √(p(1−p)/n)`: the Monte-Carlo scale of the TV estimate.
    pub tv_se: Option<f64>,
}

pub const MIN_DIST_SAMPLES: usize = 100;

/// Sample quality of `samples` against `truth`.
pub fn score_samples(truth: &Truth<'_>, samples: &[Vec<Token>], seed: u64) -> Result<DistReport> {
    if samples.len() < MIN_DIST_SAMPLES {
        return Err(TaskError::Invalid(format!("{} samples; at least {MIN_DIST_SAMPLES} required", samples.len())));
    }
    let nlls: Vec<f64> = samples.iter().map(|x| truth.nll(x)).collect::<Result<_>>()?;
    let (mean_nll, nll_se) = mean_se(&nlls);
    let (tv, tv_se) = match truth {
        Truth::Tabular(t) => {
            let space: StateEnumeration = t.space();
            let seqs: Vec<TokenSeq> = samples.iter().map(|x| TokenSeq::new(x.clone(), space.vocab())).collect::<glauber_core::Result<_>>()?;
            let emp = TabularDistribution::empirical(space, &seqs)?;
            let n = samples.len() as f64;
            let se = 0.5 * t.probs().iter().map(|p| (p * (1.0 - p) / n).sqrt()).sum::<f64>();
            (Some(glauber_core::oracle::tv_distance(emp.probs(), t.probs())?), Some(se))
        }
        Truth::Hmm(_) => (None, None),
    };
    Ok(DistReport { count: samples.len(), seed, mean_nll, nll_se, tv, tv_se })
}

/// Draws `count` unconditional samples in chunks and scores them.
pub fn eval_distribution(backend: &dyn ReverseBackend, truth: &Truth<'_>, decoder: Decoder, count: usize, seed: u64) -> Result<DistReport> {
    if count < MIN_DIST_SAMPLES {
        return Err(TaskError::Invalid(format!("{count} samples; at least {MIN_DIST_SAMPLES} required")));
    }
    if backend.vocab() != truth.vocab() {
        return Err(TaskError::Invalid("model and truth vocabularies differ".into()));
    }
    let samples = sample_unconditional(backend, truth.seq_len(), decoder, count, seed)?;
    score_samples(truth, &samples, seed)
}

/// Sample `i` uses stream `(seed, i)` regardless of chunking.
pub fn sample_unconditional(backend: &dyn ReverseBackend, len: usize, decoder: Decoder, count: usize, seed: u64) -> Result<Vec<Vec<Token>>> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(count);
    for start in (0..count).step_by(CHUNK) {
        let end = (start + CHUNK).min(count);
        let mut rngs: Vec<StreamRng> = (start..end).map(|i| stream(seed, i as u64)).collect();
        out.extend(decoder.run_batch(backend, len, end - start, &mut rngs)?.into_iter().map(|r| r.output));
    }
    Ok(out)
}

/// Both sides' total model calls; equal by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    pub ar_candidates: usize,
    pub glauber_candidates: usize,
    pub ar_invocations: usize,
    pub glauber_invocations: usize,
    /// `2·K·Σ L_free` over prompts.
    pub budget: usize,
}

impl Ledger {
    pub fn balanced(&self) -> bool {
        self.ar_invocations == self.budget && self.glauber_invocations == self.budget
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonReport {
    pub k: usize,
    pub seed: u64,
    pub count: usize,
    pub ar_accuracy: f64,
    pub ar_se: f64,
    pub glauber_accuracy: f64,
    pub glauber_se: f64,
    pub ledger: Ledger,
}

impl BonReport {
    /// Glauber ≥ AR − 2·√(se_ar² + se_glauber²).
    pub fn glauber_holds(&self) -> bool {
        let se = (self.ar_se.powi(2) + self.glauber_se.powi(2)).sqrt();
        self.glauber_accuracy >= self.ar_accuracy - 2.0 * se
    }
}

fn best_of(pz: &Puzzle, cands: &[GenerationReport]) -> bool {
    cands.iter().min_by_key(|r| pz.violations(&r.output)).is_some_and(|r| pz.solved(&r.output))
}

/// Per prompt: `2K` causal candidates from `ar` against `K` one-round Glauber
/// candidates from `glauber`, each side keeping its fewest-violation fill.
pub fn bon_eval(
    ar: &dyn ReverseBackend,
    glauber: &dyn ReverseBackend,
    puzzles: &[Puzzle],
    k: usize,
    schedule_seed: u64,
    window: usize,
    seed: u64,
) -> Result<BonReport> {
    if k < 1 {
        return Err(TaskError::Invalid("K must be at least 1".into()));
    }
    let gl = Decoder::Glauber { rounds: 1, schedule_seed, window };
    let mut ledger = Ledger { ar_candidates: 2 * k, glauber_candidates: k, ar_invocations: 0, glauber_invocations: 0, budget: 0 };
    let (mut ar_hits, mut gl_hits) = (0, 0);
    for (i, pz) in puzzles.iter().enumerate() {
        let (init, frozen) = pz.encode()?;
        let free = init.len() - frozen.len();
        ledger.budget += 2 * k * free;
        let base = derive_seed(seed, i as u64);
        let ar_c: Vec<GenerationReport> =
            (0..2 * k).map(|c| Decoder::Causal.run(ar, &init, &frozen, &mut stream(base, c as u64))).collect::<Result<_>>()?;
        let gl_c: Vec<GenerationReport> =
            (0..k).map(|c| gl.run(glauber, &init, &frozen, &mut stream(base, (2 * k + c) as u64))).collect::<Result<_>>()?;
        ledger.ar_invocations += ar_c.iter().map(|r| r.invocations.total()).sum::<usize>();
        ledger.glauber_invocations += gl_c.iter().map(|r| r.invocations.total()).sum::<usize>();
        ar_hits += usize::from(best_of(pz, &ar_c));
        gl_hits += usize::from(best_of(pz, &gl_c));
    }
    let (ar_accuracy, ar_se) = proportion_se(ar_hits, puzzles.len());
    let (glauber_accuracy, glauber_se) = proportion_se(gl_hits, puzzles.len());
    Ok(BonReport { k, seed, count: puzzles.len(), ar_accuracy, ar_se, glauber_accuracy, glauber_se, ledger })
}

/// Accuracy of uniformly random fills of the free cells, the floor any model
/// should match when untrained.
pub fn random_fill_accuracy(puzzles: &[Puzzle], vocab: usize, seed: u64) -> Result<(f64, f64)> {
    use rand::Rng;
    let mut hits = 0;
    for (i, pz) in puzzles.iter().enumerate() {
        let (mut x, frozen) = pz.encode()?;
        let mut r = stream(seed, i as u64);
        for (j, v) in x.iter_mut().enumerate() {
            if !frozen.contains(&j) {
                *v = r.gen_range(0..vocab) as Token;
            }
        }
        hits += usize::from(pz.solved(&x));
    }
    Ok(proportion_se(hits, puzzles.len()))
}

pub fn sudoku_puzzles(instances: Vec<SudokuInstance>) -> Vec<Puzzle> {
    instances.into_iter().map(Puzzle::Sudoku).collect()
}

pub fn zebra_puzzles(codec: ZebraCodec, instances: Vec<ZebraInstance>) -> Vec<Puzzle> {
    instances.into_iter().map(|instance| Puzzle::Zebra { codec, instance }).collect()
}
