//! Reverse sampling: causal fill at time `T`, then `N` rounds of single-site
//! infilling that revisit the forward schedule backwards.

use glauber_core::rng::sample_index;
use glauber_core::seq::entropy;
use glauber_core::{ConditionalModel, StreamRng, TabularDistribution, Token, TokenSeq, UpdateSchedule};
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::exact::ExactReverse;
use crate::model::{probabilities, Mode, Query};
use crate::params::ModelParams;
use crate::tensor::Real;

/// Source of the two reverse-time distributions.
pub trait ReverseBackend {
    fn vocab(&self) -> usize;

    /// Next-token laws at position `m`. `known[b]` lists the positions of
    /// `xs[b]` that may be conditioned on; a causal network only uses those
    /// before `m`.
    fn causal_batch(&self, xs: &[Vec<Token>], m: usize, known: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;

    /// Laws of `x_k` at global reverse step `t` with `k` and `hidden[b]` masked.
    fn infill_batch(&self, xs: &[Vec<Token>], k: usize, t: usize, hidden: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// A trained network: causal calls at model time `T`, infill calls at the
/// step's global time.
pub struct NetBackend<'a, F: Real> {
    pub params: &'a ModelParams<F>,
    pub t_max: usize,
}

impl<'a, F: Real> NetBackend<'a, F> {
    pub fn new(params: &'a ModelParams<F>) -> Result<Self> {
        let t = params.time.as_ref().ok_or_else(|| NetError::Time("sampling needs time-conditioned parameters".into()))?;
        Ok(Self { params, t_max: t.t_max })
    }

    /// A base model with no time weights, used as a plain causal sampler.
    pub fn untimed(params: &'a ModelParams<F>, t_max: usize) -> Self {
        Self { params, t_max }
    }
}

impl<F: Real> ReverseBackend for NetBackend<'_, F> {
    fn vocab(&self) -> usize {
        self.params.config.vocab
    }

    fn causal_batch(&self, xs: &[Vec<Token>], m: usize, _known: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let time = self.t_max as f64;
        let qs: Vec<Query> = xs.iter().map(|x| Query { tokens: x.clone(), mode: Mode::CausalGen, time, positions: vec![m] }).collect();
        probabilities(self.params, &qs)
    }

    fn infill_batch(&self, xs: &[Vec<Token>], k: usize, t: usize, hidden: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mask = self.params.config.mask_id() as Token;
        let qs: Vec<Query> = xs
            .iter()
            .zip(hidden)
            .map(|(x, h)| {
                let mut tokens = x.clone();
                tokens[k] = mask;
                h.iter().for_each(|&j| tokens[j] = mask);
                Query { tokens, mode: Mode::MaskInfill, time: t as f64, positions: vec![k] }
            })
            .collect();
        probabilities(self.params, &qs)
    }
}

/// Exact reverse conditionals of an enumerable chain.
pub struct OracleBackend {
    pub exact: ExactReverse,
}

impl ReverseBackend for OracleBackend {
    fn vocab(&self) -> usize {
        self.exact.marginal(0).expect("p0").space().vocab().size()
    }

    fn causal_batch(&self, xs: &[Vec<Token>], m: usize, known: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        xs.iter().zip(known).map(|(x, kn)| self.exact.causal_next(x, m, kn)).collect()
    }

    fn infill_batch(&self, xs: &[Vec<Token>], k: usize, t: usize, hidden: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        xs.iter().zip(hidden).map(|(x, h)| self.exact.reverse_conditional(x, k, t, h)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSpec {
    pub schedule: UpdateSchedule,
    /// Positions copied from the input and never rewritten.
    pub frozen: Vec<usize>,
    /// Masking window `w ≥ 1`.
    pub window: usize,
    pub top_p: Option<f64>,
}

impl GenerationSpec {
    pub fn new(schedule: UpdateSchedule) -> Self {
        Self { schedule, frozen: Vec::new(), window: 1, top_p: None }
    }

    pub fn len(&self) -> usize {
        self.schedule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schedule.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(NetError::Config("masking window must be at least 1".into()));
        }
        if let Some(&j) = self.frozen.iter().find(|&&j| j >= self.len()) {
            return Err(NetError::Input(format!("frozen index {j} outside length {}", self.len())));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(NetError::Config(format!("top-p {p} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// `(N+1)·(L − |frozen|)` for `w = 1`.
    pub fn expected_invocations(&self) -> usize {
        let free = self.len() - self.frozen_set().len();
        (self.schedule.rounds() + 1) * free
    }

    fn frozen_set(&self) -> Vec<usize> {
        let mut f = self.frozen.clone();
        f.sort_unstable();
        f.dedup();
        f
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invocations {
    pub causal: usize,
    pub infill: usize,
}

impl Invocations {
    pub fn total(&self) -> usize {
        self.causal + self.infill
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostic {
    pub t: usize,
    pub coordinate: usize,
    pub entropy: f64,
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub output: Vec<Token>,
    pub invocations: Invocations,
    /// Coordinates resampled during the reverse rounds, in order.
    pub visited: Vec<usize>,
    pub diagnostics: Vec<StepDiagnostic>,
}

/// Non-frozen coordinates of the steps just before `t` in its round, nearest
/// first, at most `w − 1` of them.
pub fn window_positions(schedule: &UpdateSchedule, t: usize, w: usize, frozen: &[usize]) -> Vec<usize> {
    let l = schedule.len();
    if w <= 1 || t == 0 || l == 0 {
        return Vec::new();
    }
    let round_start = (t - 1) / l * l + 1;
    (round_start..t)
        .rev()
        .map(|s| schedule.coordinate_at(s).expect("step inside schedule"))
        .filter(|j| !frozen.contains(j))
        .take(w - 1)
        .collect()
}

/// Keeps the smallest set of top entries whose mass reaches `p`.
pub fn top_p_filter(probs: &[f64], p: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for i in order {
        out[i] = probs[i];
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    out
}

fn draw(probs: &[f64], top_p: Option<f64>, rng: &mut StreamRng) -> Token {
    match top_p {
        Some(p) if p < 1.0 => sample_index(&top_p_filter(probs, p), rng) as Token,
        _ => sample_index(probs, rng) as Token,
    }
}

fn causal_phase(
    backend: &dyn ReverseBackend,
    xs: &mut [Vec<Token>],
    frozen: &[usize],
    top_p: Option<f64>,
    reports: &mut [GenerationReport],
    rngs: &mut [StreamRng],
) -> Result<()> {
    let l = xs.first().map_or(0, |x| x.len());
    for m in (0..l).filter(|m| !frozen.contains(m)) {
        let known: Vec<usize> = (0..m).chain(frozen.iter().copied()).collect();
        let known = vec![known; xs.len()];
        let dists = backend.causal_batch(xs, m, &known)?;
        for ((x, d), (rep, rng)) in xs.iter_mut().zip(dists).zip(reports.iter_mut().zip(rngs.iter_mut())) {
            x[m] = draw(&d, top_p, rng);
            rep.invocations.causal += 1;
        }
    }
    Ok(())
}

/// Left-to-right next-token fill of the non-frozen positions only; one
/// invocation per free position and no refinement.
pub fn causal_fill(
    backend: &dyn ReverseBackend,
    inits: &[Vec<Token>],
    frozen: &[usize],
    top_p: Option<f64>,
    rngs: &mut [StreamRng],
) -> Result<Vec<GenerationReport>> {
    let l = inits.first().map_or(0, |x| x.len());
    let spec = GenerationSpec { schedule: UpdateSchedule::build(l.max(1), 1, 0)?, frozen: frozen.to_vec(), window: 1, top_p };
    spec.validate()?;
    if inits.len() != rngs.len() || inits.iter().any(|x| x.len() != l) {
        return Err(NetError::Input("inputs and rng streams must match in count and length".into()));
    }
    let frozen = spec.frozen_set();
    let vocab = backend.vocab() as Token;
    if inits.iter().any(|x| frozen.iter().any(|&j| x[j] >= vocab)) {
        return Err(NetError::Input("a frozen position holds a token outside the vocabulary".into()));
    }
    let mut xs: Vec<Vec<Token>> = inits.iter().map(|x| x.iter().map(|&v| if v < vocab { v } else { 0 }).collect()).collect();
    let mut reports: Vec<GenerationReport> = inits
        .iter()
        .map(|_| GenerationReport { output: Vec::new(), invocations: Invocations::default(), visited: Vec::new(), diagnostics: Vec::new() })
        .collect();
    causal_phase(backend, &mut xs, &frozen, top_p, &mut reports, rngs)?;
    for (rep, x) in reports.iter_mut().zip(xs) {
        rep.output = x;
    }
    Ok(reports)
}

/// Lockstep generation; sequence `b` draws only from `rngs[b]`, so results do
/// not depend on batch composition. Frozen positions are taken from `inits`.
pub fn generate_batch(
    backend: &dyn ReverseBackend,
    inits: &[Vec<Token>],
    spec: &GenerationSpec,
    rngs: &mut [StreamRng],
) -> Result<Vec<GenerationReport>> {
    spec.validate()?;
    if inits.len() != rngs.len() {
        return Err(NetError::Input(format!("{} inputs but {} rng streams", inits.len(), rngs.len())));
    }
    let l = spec.len();
    if let Some(x) = inits.iter().find(|x| x.len() != l) {
        return Err(NetError::Input(format!("input length {} differs from schedule length {l}", x.len())));
    }
    let frozen = spec.frozen_set();
    let vocab = backend.vocab() as Token;
    for x in inits {
        if let Some(&j) = frozen.iter().find(|&&j| x[j] >= vocab) {
            return Err(NetError::Input(format!("frozen position {j} holds a token outside the vocabulary")));
        }
    }
    let mut xs: Vec<Vec<Token>> = inits.iter().map(|x| x.iter().map(|&v| if v < vocab { v } else { 0 }).collect()).collect();
    let mut reports: Vec<GenerationReport> = inits
        .iter()
        .map(|_| GenerationReport { output: Vec::new(), invocations: Invocations::default(), visited: Vec::new(), diagnostics: Vec::new() })
        .collect();
    if xs.is_empty() {
        return Ok(reports);
    }
    causal_phase(backend, &mut xs, &frozen, spec.top_p, &mut reports, rngs)?;

    let sched = &spec.schedule;
    for n in (1..=sched.rounds()).rev() {
        for i in (1..=l).rev() {
            let t = sched.global_step(n, i);
            let j = sched.coordinate_at(t)?;
            if frozen.contains(&j) {
                continue;
            }
            let hidden = window_positions(sched, t, spec.window, &frozen);
            let hidden = vec![hidden; xs.len()];
            let dists = backend.infill_batch(&xs, j, t, &hidden)?;
            for ((x, d), (rep, rng)) in xs.iter_mut().zip(dists).zip(reports.iter_mut().zip(rngs.iter_mut())) {
                let v = draw(&d, spec.top_p, rng);
                rep.diagnostics.push(StepDiagnostic { t, coordinate: j, entropy: entropy(&d), changed: v != x[j] });
                rep.visited.push(j);
                rep.invocations.infill += 1;
                x[j] = v;
            }
        }
    }
    for (rep, x) in reports.iter_mut().zip(xs) {
        rep.output = x;
    }
    Ok(reports)
}

pub fn generate(backend: &dyn ReverseBackend, init: &[Token], spec: &GenerationSpec, rng: &mut StreamRng) -> Result<GenerationReport> {
    Ok(generate_batch(backend, &[init.to_vec()], spec, std::slice::from_mut(rng))?.remove(0))
}

/// Freezes `prefix` at the start of the sequence and generates the rest.
pub fn generate_with_prefix(
    backend: &dyn ReverseBackend,
    prefix: &[Token],
    spec: &GenerationSpec,
    rng: &mut StreamRng,
) -> Result<GenerationReport> {
    let l = spec.len();
    if prefix.len() > l {
        return Err(NetError::Input(format!("prefix of {} tokens exceeds length {l}", prefix.len())));
    }
    let mut s = spec.clone();
    s.frozen.extend(0..prefix.len());
    let mut init = prefix.to_vec();
    init.resize(l, 0);
    generate(backend, &init, &s, rng)
}

/// [`generate`] with the window clamped to `L`.
pub fn refine_windowed(backend: &dyn ReverseBackend, x: &[Token], spec: &GenerationSpec, rng: &mut StreamRng) -> Result<GenerationReport> {
    let mut s = spec.clone();
    s.window = s.window.clamp(1, s.len().max(1));
    generate(backend, x, &s, rng)
}

/// Reference sampler driven by exact reverse conditionals.
pub fn exact_reverse_generate(
    p0: &TabularDistribution,
    schedule: &UpdateSchedule,
    kernel: &dyn ConditionalModel,
    rng: &mut StreamRng,
) -> Result<TokenSeq> {
    let backend = OracleBackend { exact: ExactReverse::new(p0, kernel, schedule, &[])? };
    let spec = GenerationSpec::new(schedule.clone());
    let rep = generate(&backend, &vec![0; schedule.len()], &spec, rng)?;
    Ok(TokenSeq::new(rep.output, p0.space().vocab())?)
}
