//! Dual-mode transformer forward pass: causal next-token prediction and masked infilling.

use glauber_core::{CausalModel, ConditionalModel, Model, Token, TokenSeq, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::params::ModelParams;
use crate::tape::{AttnSpec, Tape, Var};
use crate::tensor::{real, to_f64, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    CausalGen,
    MaskInfill,
}

impl Mode {
    fn id(self) -> usize {
        match self {
            Mode::CausalGen => 0,
            Mode::MaskInfill => 1,
        }
    }
}

/// One sequence in a batched forward pass.
///
/// In `CausalGen` mode, position `m` is predicted from `tokens[..m]`; in `MaskInfill`
/// mode, from the full (masked) sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub tokens: Vec<Token>,
    pub mode: Mode,
    pub time: f64,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub names: Vec<String>,
    pub grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, name: &str) -> Option<&[F]> {
        let i = self.names.iter().position(|n| n == name)?;
        self.grads[i].as_deref()
    }

    /// Dense copy with zeros for unused parameters.
    pub fn dense(&self, params: &ModelParams<F>) -> Vec<Vec<F>> {
        self.grads
            .iter()
            .zip(&params.values)
            .map(|(g, v)| g.clone().unwrap_or_else(|| vec![F::zero(); v.len()]))
            .collect()
    }
}

struct Binder<'p, F: Real> {
    params: &'p ModelParams<F>,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<F: Real> Binder<'_, F> {
    fn get(&mut self, tape: &mut Tape<F>, id: usize) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let (r, c) = self.params.shapes[id];
        let v = tape.param(id, &self.params.values[id], r, c, self.trainable);
        self.vars[id] = Some(v);
        v
    }
}

/// Records the forward pass and returns logits with one row per requested position.
pub fn forward<F: Real>(tape: &mut Tape<F>, params: &ModelParams<F>, queries: &[Query], trainable: bool) -> Result<Var> {
    let cfg = &params.config;
    let b = queries.len();
    if b == 0 {
        return Err(NetError::Input("empty batch".into()));
    }
    let len = queries[0].tokens.len();
    if len > cfg.max_len {
        return Err(NetError::Input(format!("sequence length {len} exceeds max_len {}", cfg.max_len)));
    }
    let s = cfg.seq_rows(len);
    let d = cfg.d_model;
    let mut ids = Vec::with_capacity(b * s);
    let mut modes = Vec::with_capacity(b * s);
    let mut out_rows = Vec::new();
    for q in queries {
        if q.tokens.len() != len {
            return Err(NetError::Input("batch sequences differ in length".into()));
        }
        ids.push(cfg.bos_id());
        for &tok in &q.tokens {
            if tok as usize > cfg.mask_id() {
                return Err(NetError::Input(format!("token {tok} outside input vocabulary")));
            }
            ids.push(tok as usize);
        }
        modes.extend(std::iter::repeat(q.mode.id()).take(s));
        for &p in &q.positions {
            if p >= len {
                return Err(NetError::Input(format!("query position {p} outside length {len}")));
            }
        }
    }
    for (bi, q) in queries.iter().enumerate() {
        for &p in &q.positions {
            let row = match q.mode {
                Mode::CausalGen => p,
                Mode::MaskInfill => p + 1,
            };
            out_rows.push(bi * s + row);
        }
    }
    let lay = params.layout().clone();
    let mut bind = Binder { params, vars: vec![None; params.len()], trainable };

    let tok = bind.get(tape, lay.tok);
    let mode = bind.get(tape, lay.mode);
    let e = tape.embed(tok, &ids);
    let m = tape.embed(mode, &modes);
    let mut x = tape.add(e, m);
    if let Some(pi) = lay.pos {
        let pos = bind.get(tape, pi);
        let rows: Vec<usize> = (0..b * s).map(|r| r % s).collect();
        let pe = tape.embed(pos, &rows);
        x = tape.add(x, pe);
    }

    let cond = match (&lay.time, &params.time) {
        (Some(ti), Some(tc)) => {
            let mut feats = Vec::with_capacity(b * 2 * tc.n_freq);
            for q in queries {
                feats.extend(tc.features(q.time).into_iter().map(real::<F>));
            }
            let f = tape.constant(feats, b, 2 * tc.n_freq);
            let (w1, b1, w2, b2) = (bind.get(tape, ti.t1_w), bind.get(tape, ti.t1_b), bind.get(tape, ti.t2_w), bind.get(tape, ti.t2_b));
            let h = tape.linear(f, w1, b1);
            let h = tape.silu(h);
            let h = tape.linear(h, w2, b2);
            Some(tape.silu(h))
        }
        _ => None,
    };

    let causal: Vec<bool> = queries.iter().map(|q| q.mode == Mode::CausalGen).collect();
    let attn = AttnSpec { batch: b, seq: s, heads: cfg.n_heads, causal, rope_base: cfg.rope_base, offset: 0 };

    for (l, blk) in lay.blocks.iter().enumerate() {
        let mods = match (cond, &lay.time) {
            (Some(c), Some(ti)) => {
                let (mw, mb) = ti.mods[l];
                let (mw, mb) = (bind.get(tape, mw), bind.get(tape, mb));
                let m = tape.linear(c, mw, mb);
                Some([0, 1, 2, 3, 4, 5].map(|i| tape.slice_cols(m, i * d, d)))
            }
            _ => None,
        };
        let (g1, b1) = (bind.get(tape, blk.ln1_g), bind.get(tape, blk.ln1_b));
        let mut h = tape.layer_norm(x, g1, b1);
        if let Some(m) = mods {
            h = tape.modulate(h, m[0], m[1], s);
        }
        let (wq, bq) = (bind.get(tape, blk.wq), bind.get(tape, blk.bq));
        let (wk, bk) = (bind.get(tape, blk.wk), bind.get(tape, blk.bk));
        let (wv, bv) = (bind.get(tape, blk.wv), bind.get(tape, blk.bv));
        let q = tape.linear(h, wq, bq);
        let k = tape.linear(h, wk, bk);
        let v = tape.linear(h, wv, bv);
        let a = tape.attention(q, k, v, attn.clone());
        let (wo, bo) = (bind.get(tape, blk.wo), bind.get(tape, blk.bo));
        let o = tape.linear(a, wo, bo);
        x = match mods {
            Some(m) => tape.gated_residual(x, o, m[2], s),
            None => tape.add(x, o),
        };
        let (g2, b2) = (bind.get(tape, blk.ln2_g), bind.get(tape, blk.ln2_b));
        let mut h = tape.layer_norm(x, g2, b2);
        if let Some(m) = mods {
            h = tape.modulate(h, m[3], m[4], s);
        }
        let (w1, bb1) = (bind.get(tape, blk.w1), bind.get(tape, blk.b1));
        let (w2, bb2) = (bind.get(tape, blk.w2), bind.get(tape, blk.b2));
        let f = tape.linear(h, w1, bb1);
        let f = tape.gelu(f);
        let f = tape.linear(f, w2, bb2);
        x = match mods {
            Some(m) => tape.gated_residual(x, f, m[5], s),
            None => tape.add(x, f),
        };
    }
    let (gf, bf) = (bind.get(tape, lay.lnf_g), bind.get(tape, lay.lnf_b));
    let mut x = tape.layer_norm(x, gf, bf);
    if let (Some(c), Some(ti)) = (cond, &lay.time) {
        let (mw, mb) = (bind.get(tape, ti.fmod_w), bind.get(tape, ti.fmod_b));
        let m = tape.linear(c, mw, mb);
        let shift = tape.slice_cols(m, 0, d);
        let scale = tape.slice_cols(m, d, d);
        x = tape.modulate(x, shift, scale, s);
    }
    let g = tape.gather_rows(x, &out_rows);
    let (hw, hb) = (bind.get(tape, lay.head_w), bind.get(tape, lay.head_b));
    Ok(tape.linear(g, hw, hb))
}

/// Reverse pass from a scalar loss to named parameter gradients.
pub fn backprop<F: Real>(params: &ModelParams<F>, tape: &Tape<F>, loss: Var) -> Result<Gradients<F>> {
    let g = tape.backward(loss, params.len())?;
    Ok(Gradients { names: params.names.clone(), grads: g.grads })
}

fn softmax_rows<F: Real>(logits: &[F], cols: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(cols)
        .map(|row| {
            let z: Vec<f64> = row.iter().map(|&v| to_f64(v)).collect();
            glauber_core::model::softmax(&z)
        })
        .collect()
}

/// Probability rows for every requested position of every query, in order.
pub fn probabilities<F: Real>(params: &ModelParams<F>, queries: &[Query]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let logits = forward(&mut tape, params, queries, false)?;
    Ok(softmax_rows(tape.value(logits), params.config.vocab))
}

/// Logit rows (unnormalized) for every requested position.
pub fn logits<F: Real>(params: &ModelParams<F>, queries: &[Query]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let l = forward(&mut tape, params, queries, false)?;
    Ok(tape.value(l).chunks(params.config.vocab).map(|r| r.iter().map(|&v| to_f64(v)).collect()).collect())
}

fn check_time<F: Real>(params: &ModelParams<F>, t: f64) -> Result<()> {
    if let Some(tc) = &params.time {
        if !(0.0..=tc.t_max as f64).contains(&t) {
            return Err(NetError::Input(format!("time {t} outside [0, {}]", tc.t_max)));
        }
    }
    Ok(())
}

/// Distribution over Σ at the single masked position `k`.
pub fn infill_logits<F: Real>(params: &ModelParams<F>, x: &[Token], k: usize, t: f64) -> Result<Vec<f64>> {
    let mask = params.config.mask_id() as Token;
    let masked: Vec<usize> = x.iter().enumerate().filter(|(_, &v)| v == mask).map(|(i, _)| i).collect();
    if masked.len() != 1 {
        return Err(NetError::Input(format!("expected exactly one mask, found {}", masked.len())));
    }
    if masked[0] != k {
        return Err(NetError::Input(format!("mask at {} but query at {k}", masked[0])));
    }
    check_time(params, t)?;
    let q = Query { tokens: x.to_vec(), mode: Mode::MaskInfill, time: t, positions: vec![k] };
    Ok(probabilities(params, &[q])?.remove(0))
}

/// Next-token distribution after `prefix`.
pub fn causal_next_logits<F: Real>(params: &ModelParams<F>, prefix: &[Token], t: f64) -> Result<Vec<f64>> {
    let m = prefix.len();
    if m >= params.config.max_len {
        return Err(NetError::Input(format!("prefix length {m} must be below max_len {}", params.config.max_len)));
    }
    check_time(params, t)?;
    // Only rows up to m are visible to row m, so a padded tail changes nothing.
    let mut tokens = prefix.to_vec();
    tokens.push(params.config.mask_id() as Token);
    let q = Query { tokens, mode: Mode::CausalGen, time: t, positions: vec![m] };
    Ok(probabilities(params, &[q])?.remove(0))
}

/// Core-trait view of a network evaluated either at the caller's time or a fixed time.
pub struct NetModel<'a, F: Real> {
    pub params: &'a ModelParams<F>,
    pub fixed_time: Option<f64>,
}

impl<'a, F: Real> NetModel<'a, F> {
    pub fn new(params: &'a ModelParams<F>) -> Self {
        Self { params, fixed_time: None }
    }

    pub fn at_time(params: &'a ModelParams<F>, t: f64) -> Self {
        Self { params, fixed_time: Some(t) }
    }

    fn time(&self, t: usize) -> f64 {
        self.fixed_time.unwrap_or(t as f64)
    }
}

impl<F: Real> Model for NetModel<'_, F> {
    fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.params.config.vocab).expect("validated vocabulary")
    }
}

impl<F: Real> ConditionalModel for NetModel<'_, F> {
    fn infill(&self, x: &TokenSeq, k: usize, t: usize) -> glauber_core::Result<Vec<f64>> {
        Ok(self.infill_batch(std::slice::from_ref(x), k, t)?.remove(0))
    }

    fn infill_batch(&self, xs: &[TokenSeq], k: usize, t: usize) -> glauber_core::Result<Vec<Vec<f64>>> {
        let mask = self.params.config.mask_id() as Token;
        let time = self.time(t);
        let queries: Vec<Query> = xs
            .iter()
            .map(|x| {
                let mut tokens = x.tokens().to_vec();
                tokens[k] = mask;
                Query { tokens, mode: Mode::MaskInfill, time, positions: vec![k] }
            })
            .collect();
        Ok(probabilities(self.params, &queries)?)
    }
}

impl<F: Real> CausalModel for NetModel<'_, F> {
    fn causal_next(&self, prefix: &[Token], t: usize) -> glauber_core::Result<Vec<f64>> {
        Ok(causal_next_logits(self.params, prefix, self.time(t))?)
    }
}
