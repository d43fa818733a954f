//! Differentiable score-entropy objective over noised snapshots.

use glauber_core::loss::{neighbor_weights, path_ratio_targets};
use glauber_core::{Token, Trajectory};

use crate::error::{NetError, Result};
use crate::model::{backprop, forward, probabilities, Gradients, Mode, Query};
use crate::params::ModelParams;
use crate::tape::{ScoreSpec, Tape, Var};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub enum SnapshotTarget {
    /// Logged frozen conditional and its ratios to the realized value.
    PathRatio { frozen: Vec<f64>, ratios: Vec<f64> },
    /// Cross-entropy to the coordinate's value before the step.
    PrevValue(Token),
    /// Cross-entropy to an exact reverse conditional (reported as a KL).
    Posterior(Vec<f64>),
}

/// One noised state `x_t` whose scheduled coordinate is queried at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub tokens: Vec<Token>,
    pub coordinate: usize,
    pub time: usize,
    /// Extra positions masked in the model input (masking window).
    pub window: Vec<usize>,
    pub target: SnapshotTarget,
}

impl Snapshot {
    pub fn current(&self) -> Token {
        self.tokens[self.coordinate]
    }

    fn query(&self, mask: Token) -> Query {
        let mut tokens = self.tokens.clone();
        tokens[self.coordinate] = mask;
        for &w in &self.window {
            tokens[w] = mask;
        }
        Query { tokens, mode: Mode::MaskInfill, time: self.time as f64, positions: vec![self.coordinate] }
    }
}

fn score_rows(snaps: &[Snapshot], vocab: usize) -> Result<ScoreSpec> {
    let n = snaps.len();
    let mut spec = ScoreSpec {
        coef: vec![0.0; n * vocab],
        weights: vec![0.0; n * vocab],
        constants: vec![0.0; n],
        row_scale: vec![1.0 / n as f64; n],
    };
    for (i, s) in snaps.iter().enumerate() {
        let row = i * vocab..(i + 1) * vocab;
        match &s.target {
            SnapshotTarget::PathRatio { frozen, ratios } => {
                if frozen.len() != vocab {
                    return Err(NetError::Shape(format!("frozen conditional has {} entries", frozen.len())));
                }
                let nw = neighbor_weights(s.current(), frozen, ratios)?;
                for (j, c) in spec.coef[row.clone()].iter_mut().enumerate() {
                    *c = if j == s.current() as usize { 0.0 } else { 1.0 };
                }
                spec.weights[row].copy_from_slice(&nw.weights);
                spec.constants[i] = nw.constant;
            }
            SnapshotTarget::PrevValue(v) => {
                spec.weights[i * vocab + *v as usize] = 1.0;
            }
            SnapshotTarget::Posterior(p) => {
                if p.len() != vocab {
                    return Err(NetError::Shape(format!("posterior has {} entries", p.len())));
                }
                spec.weights[row].copy_from_slice(p);
                spec.constants[i] = p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum();
            }
        }
    }
    Ok(spec)
}

/// Cross-entropy rows for extra queries: one target token and row weight per
/// queried position, in query order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CeRows {
    pub queries: Vec<Query>,
    pub targets: Vec<Token>,
    pub scales: Vec<f64>,
}

impl CeRows {
    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Mean per-snapshot loss recorded on `tape`; only `params` receive gradients.
pub fn snapshot_batch_loss<F: Real>(tape: &mut Tape<F>, params: &ModelParams<F>, snaps: &[Snapshot]) -> Result<Var> {
    combined_loss(tape, params, snaps, &CeRows::default())
}

/// Snapshot mean plus weighted cross-entropy rows, in one forward pass.
pub fn combined_loss<F: Real>(tape: &mut Tape<F>, params: &ModelParams<F>, snaps: &[Snapshot], ce: &CeRows) -> Result<Var> {
    if snaps.is_empty() && ce.is_empty() {
        return Err(NetError::Input("empty snapshot batch".into()));
    }
    let vocab = params.config.vocab;
    let mask = params.config.mask_id() as Token;
    let mut queries: Vec<Query> = snaps.iter().map(|s| s.query(mask)).collect();
    let mut spec = if snaps.is_empty() {
        ScoreSpec { coef: Vec::new(), weights: Vec::new(), constants: Vec::new(), row_scale: Vec::new() }
    } else {
        score_rows(snaps, vocab)?
    };
    let rows: usize = ce.queries.iter().map(|q| q.positions.len()).sum();
    if rows != ce.targets.len() || rows != ce.scales.len() {
        return Err(NetError::Shape(format!("{rows} ce rows but {} targets, {} scales", ce.targets.len(), ce.scales.len())));
    }
    for (&t, &w) in ce.targets.iter().zip(&ce.scales) {
        if t as usize >= vocab {
            return Err(NetError::Input(format!("target {t} outside vocabulary")));
        }
        let mut onehot = vec![0.0; vocab];
        onehot[t as usize] = 1.0;
        spec.coef.extend(std::iter::repeat(0.0).take(vocab));
        spec.weights.extend(onehot);
        spec.constants.push(0.0);
        spec.row_scale.push(w);
    }
    queries.extend(ce.queries.iter().cloned());
    let logits = forward(tape, params, &queries, true)?;
    Ok(tape.score_entropy(logits, spec))
}

/// Loss value and gradients in one call.
pub fn loss_and_grads<F: Real>(params: &ModelParams<F>, snaps: &[Snapshot]) -> Result<(f64, Gradients<F>)> {
    let mut tape = Tape::new();
    let loss = snapshot_batch_loss(&mut tape, params, snaps)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(NetError::NonFinite { step: 0, value });
    }
    Ok((value, backprop(params, &tape, loss)?))
}

/// Snapshots of a logged trajectory at `times`, targeting path ratios.
pub fn path_ratio_snapshots(traj: &Trajectory, times: &[usize]) -> Result<Vec<Snapshot>> {
    times
        .iter()
        .map(|&t| {
            let rec = traj.step(t).ok_or_else(|| NetError::Input(format!("step {t} not logged")))?;
            Ok(Snapshot {
                tokens: traj.state_at(t)?.into_vec(),
                coordinate: rec.coordinate,
                time: t,
                window: Vec::new(),
                target: SnapshotTarget::PathRatio { frozen: rec.conditional.clone(), ratios: path_ratio_targets(traj, t)? },
            })
        })
        .collect()
}

/// `−log r_θ(x_{t−1,k_t} | masked x_t, t)`.
pub fn prev_value_ce<F: Real>(params: &ModelParams<F>, traj: &Trajectory, t: usize) -> Result<f64> {
    let rec = traj.step(t).ok_or_else(|| NetError::Input(format!("step {t} not logged")))?;
    let mut tokens = traj.state_at(t)?.into_vec();
    tokens[rec.coordinate] = params.config.mask_id() as Token;
    let q = Query { tokens, mode: Mode::MaskInfill, time: t as f64, positions: vec![rec.coordinate] };
    let p = probabilities(params, &[q])?.remove(0)[rec.prev_value as usize];
    if !(p > 0.0) {
        return Err(NetError::Core(glauber_core::CoreError::ZeroProbability { index: rec.coordinate, token: rec.prev_value }));
    }
    Ok(-p.ln())
}
