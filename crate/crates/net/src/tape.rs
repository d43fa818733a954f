//! Reverse-mode autodiff over 2-D row-major tensors with fused transformer ops.

use crate::error::{NetError, Result};
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, real, softmax_in_place, to_f64, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Attention layout for a batch of equal-length sequences.
#[derive(Debug, Clone)]
pub struct AttnSpec {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// Per-sequence flag: lower-triangular mask when set, full attention otherwise.
    pub causal: Vec<bool>,
    pub rope_base: f64,
    /// Rotary position of row 0.
    pub offset: usize,
}

/// Per-row score-entropy objective on logits.
///
/// Row loss is `Σ_σ coef_σ p_σ − Σ_σ w_σ log p_σ + constant`, with `p = softmax(z)`.
/// Cross-entropy is the special case `coef = 0`, `w = onehot`.
#[derive(Debug, Clone)]
pub struct ScoreSpec {
    pub coef: Vec<f64>,
    pub weights: Vec<f64>,
    pub constants: Vec<f64>,
    /// Multiplier applied to every row (e.g. 1/rows for a mean).
    pub row_scale: Vec<f64>,
}

enum Op<F> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, F),
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<F>, rstd: Vec<F> },
    Modulate { x: Var, shift: Var, scale: Var, seq: usize },
    GatedResidual { x: Var, f: Var, gate: Var, seq: usize },
    Gelu(Var),
    Silu(Var),
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, qr: Vec<F>, kr: Vec<F>, probs: Vec<F>, cos: Vec<F>, sin: Vec<F> },
    Embed { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Score { logits: Var, spec: ScoreSpec, probs: Vec<F> },
    SumSq(Var),
    Sum(Var),
}

struct Node<F> {
    value: Vec<F>,
    rows: usize,
    cols: usize,
    op: Op<F>,
    grad: bool,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

/// Parameter gradients indexed by parameter id; `None` when a parameter was unused.
#[derive(Debug, Clone)]
pub struct ParamGrads<F> {
    pub grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn rope_tables<F: Real>(seq: usize, dh: usize, base: f64, offset: usize) -> (Vec<F>, Vec<F>) {
    let half = dh / 2;
    let mut cos = Vec::with_capacity(seq * half);
    let mut sin = Vec::with_capacity(seq * half);
    for p in 0..seq {
        for i in 0..half {
            let theta = base.powf(-2.0 * i as f64 / dh as f64);
            let a = (p + offset) as f64 * theta;
            cos.push(real(a.cos()));
            sin.push(real(a.sin()));
        }
    }
    (cos, sin)
}

/// Rotates consecutive pairs of `v` by `pos·θ_i`, `θ_i = base^{−2i/dim}`.
pub fn rope_rotate(v: &mut [f64], pos: f64, base: f64) {
    let dh = v.len();
    for i in 0..dh / 2 {
        let a = pos * base.powf(-2.0 * i as f64 / dh as f64);
        let (c, s) = (a.cos(), a.sin());
        let (x, y) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = x * c - y * s;
        v[2 * i + 1] = x * s + y * c;
    }
}

#[inline]
fn rotate<F: Real>(src: &[F], dst: &mut [F], cos: &[F], sin: &[F], inverse: bool) {
    for i in 0..cos.len() {
        let (x, y) = (src[2 * i], src[2 * i + 1]);
        let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
        dst[2 * i] = x * c - y * s;
        dst[2 * i + 1] = x * s + y * c;
    }
}

fn accumulator<'g, F: Real>(nodes: &[Node<F>], grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
    if !nodes[v.0].grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
}

const GELU_C: f64 = 0.7978845608028654;

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(128) }
    }

    fn push(&mut self, value: Vec<F>, rows: usize, cols: usize, op: Op<F>, grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value, rows, cols, op, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        to_f64(self.nodes[v.0].value[0])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn constant(&mut self, value: Vec<F>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "constant shape");
        self.push(value, rows, cols, Op::Leaf, false)
    }

    /// Trainable leaf tagged with a parameter id.
    pub fn param(&mut self, id: usize, value: &[F], rows: usize, cols: usize, trainable: bool) -> Var {
        assert_eq!(value.len(), rows * cols, "param shape");
        let op = if trainable { Op::Param(id) } else { Op::Leaf };
        self.push(value.to_vec(), rows, cols, op, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (r, k) = self.shape(a);
        let (k2, c) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![F::zero(); r * c];
        gemm_nn(self.value(a), self.value(b), &mut out, r, k, c);
        let grad = self.g(a) || self.g(b);
        self.push(out, r, c, Op::MatMul(a, b), grad)
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(bias), (1, c), "bias shape");
        let bv = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let grad = self.g(a) || self.g(bias);
        self.push(out, r, c, Op::AddRow(a, bias), grad)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let (r, c) = self.shape(a);
        let out: Vec<F> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let grad = self.g(a) || self.g(b);
        self.push(out, r, c, Op::Add(a, b), grad)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let s: F = real(s);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let grad = self.g(a);
        self.push(out, r, c, Op::Scale(a, s), grad)
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(g), (1, c));
        assert_eq!(self.shape(b), (1, c));
        let eps: F = real(1e-5);
        let n: F = real(c as f64);
        let xv = self.value(x);
        let (gv, bv) = (self.value(g), self.value(b));
        let mut xhat = vec![F::zero(); r * c];
        let mut rstd = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let grad = self.g(x) || self.g(g) || self.g(b);
        self.push(out, r, c, Op::LayerNorm { x, g, b, xhat, rstd }, grad)
    }

    /// `x·(1 + scale_b) + shift_b` where `b = row / seq`.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var, seq: usize) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(shift), (r / seq, c));
        assert_eq!(self.shape(scale), (r / seq, c));
        let (xv, sh, sc) = (self.value(x), self.value(shift), self.value(scale));
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let b = i / seq;
            for j in 0..c {
                out[i * c + j] = xv[i * c + j] * (F::one() + sc[b * c + j]) + sh[b * c + j];
            }
        }
        let grad = self.g(x) || self.g(shift) || self.g(scale);
        self.push(out, r, c, Op::Modulate { x, shift, scale, seq }, grad)
    }

    /// `x + (1 + gate_b)·f`.
    pub fn gated_residual(&mut self, x: Var, f: Var, gate: Var, seq: usize) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(f), (r, c));
        assert_eq!(self.shape(gate), (r / seq, c));
        let (xv, fv, gv) = (self.value(x), self.value(f), self.value(gate));
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let b = i / seq;
            for j in 0..c {
                out[i * c + j] = xv[i * c + j] + (F::one() + gv[b * c + j]) * fv[i * c + j];
            }
        }
        let grad = self.g(x) || self.g(f) || self.g(gate);
        self.push(out, r, c, Op::GatedResidual { x, f, gate, seq }, grad)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let k: F = real(GELU_C);
        let a: F = real(0.044715);
        let half: F = real(0.5);
        let out = self
            .value(x)
            .iter()
            .map(|&v| half * v * (F::one() + (k * (v + a * v * v * v)).tanh()))
            .collect();
        let grad = self.g(x);
        self.push(out, r, c, Op::Gelu(x), grad)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v / (F::one() + (-v).exp())).collect();
        let grad = self.g(x);
        self.push(out, r, c, Op::Silu(x), grad)
    }

    /// Multi-head attention with rotary positions applied to `q` and `k`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (r, d) = self.shape(q);
        assert_eq!(r, spec.batch * spec.seq, "attention rows");
        assert_eq!(self.shape(k), (r, d));
        assert_eq!(self.shape(v), (r, d));
        assert_eq!(spec.causal.len(), spec.batch);
        assert!(d % spec.heads == 0 && (d / spec.heads) % 2 == 0, "head dim must be even");
        let (s, h) = (spec.seq, spec.heads);
        let dh = d / h;
        let half = dh / 2;
        let (cos, sin) = rope_tables::<F>(s, dh, spec.rope_base, spec.offset);
        let mut qr = vec![F::zero(); r * d];
        let mut kr = vec![F::zero(); r * d];
        {
            let (qv, kv) = (self.value(q), self.value(k));
            for row in 0..r {
                let p = row % s;
                let (c, sn) = (&cos[p * half..(p + 1) * half], &sin[p * half..(p + 1) * half]);
                for hh in 0..h {
                    let o = row * d + hh * dh;
                    rotate(&qv[o..o + dh], &mut qr[o..o + dh], c, sn, false);
                    rotate(&kv[o..o + dh], &mut kr[o..o + dh], c, sn, false);
                }
            }
        }
        let scale: F = real(1.0 / (dh as f64).sqrt());
        let mut probs = vec![F::zero(); spec.batch * h * s * s];
        let mut out = vec![F::zero(); r * d];
        let vv = self.value(v);
        let mut qh = vec![F::zero(); dh];
        for b in 0..spec.batch {
            let causal = spec.causal[b];
            for hh in 0..h {
                let pbase = (b * h + hh) * s * s;
                for i in 0..s {
                    let qo = (b * s + i) * d + hh * dh;
                    qh.copy_from_slice(&qr[qo..qo + dh]);
                    let lim = if causal { i + 1 } else { s };
                    let prow = &mut probs[pbase + i * s..pbase + (i + 1) * s];
                    for j in 0..lim {
                        let ko = (b * s + j) * d + hh * dh;
                        prow[j] = dot(&qh, &kr[ko..ko + dh]) * scale;
                    }
                    softmax_in_place(&mut prow[..lim]);
                    let orow = &mut out[qo..qo + dh];
                    for j in 0..lim {
                        let pj = prow[j];
                        let vo = (b * s + j) * d + hh * dh;
                        for (o, &x) in orow.iter_mut().zip(&vv[vo..vo + dh]) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let grad = self.g(q) || self.g(k) || self.g(v);
        self.push(out, r, d, Op::Attention { q, k, v, spec, qr, kr, probs, cos, sin }, grad)
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let (n, c) = self.shape(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < n, "embedding id {id} out of range {n}");
            out.extend_from_slice(&tv[id * c..(id + 1) * c]);
        }
        let grad = self.g(table);
        self.push(out, ids.len(), c, Op::Embed { table, ids: ids.to_vec() }, grad)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "row {i} out of range {r}");
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let grad = self.g(x);
        self.push(out, idx.len(), c, Op::GatherRows { x, idx: idx.to_vec() }, grad)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(start + len <= c);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let grad = self.g(x);
        self.push(out, r, len, Op::SliceCols { x, start }, grad)
    }

    pub fn score_entropy(&mut self, logits: Var, spec: ScoreSpec) -> Var {
        let (r, c) = self.shape(logits);
        assert_eq!(spec.coef.len(), r * c);
        assert_eq!(spec.weights.len(), r * c);
        assert_eq!(spec.constants.len(), r);
        assert_eq!(spec.row_scale.len(), r);
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0f64;
        for i in 0..r {
            let row = &mut probs[i * c..(i + 1) * c];
            let z: Vec<f64> = row.iter().map(|&v| to_f64(v)).collect();
            let lse = to_f64(softmax_in_place(row));
            let mut l = spec.constants[i];
            for j in 0..c {
                let w = spec.weights[i * c + j];
                l += spec.coef[i * c + j] * to_f64(row[j]);
                if w != 0.0 {
                    l -= w * (z[j] - lse);
                }
            }
            total += spec.row_scale[i] * l;
        }
        let grad = self.g(logits);
        self.push(vec![real(total)], 1, 1, Op::Score { logits, spec, probs }, grad)
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|&v| v * v).sum::<F>();
        let grad = self.g(x);
        self.push(vec![s], 1, 1, Op::SumSq(x), grad)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<F>();
        let grad = self.g(x);
        self.push(vec![s], 1, 1, Op::Sum(x), grad)
    }

    /// Gradients of a scalar node with respect to every trainable parameter leaf.
    pub fn backward(&self, loss: Var, n_params: usize) -> Result<ParamGrads<F>> {
        let value = self.scalar(loss);
        if !value.is_finite() {
            return Err(NetError::NonFinite { step: 0, value });
        }
        if self.shape(loss) != (1, 1) {
            return Err(NetError::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Vec<F>>> = vec![None; n_params];
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backward_node(node, &gy, &mut grads, &mut out);
        }
        Ok(ParamGrads { grads: out })
    }

    fn backward_node(&self, node: &Node<F>, gy: &[F], grads: &mut [Option<Vec<F>>], out: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let slot = out[*id].get_or_insert_with(|| vec![F::zero(); gy.len()]);
                for (s, &g) in slot.iter_mut().zip(gy) {
                    *s += g;
                }
            }
            Op::MatMul(a, b) => {
                let (_, k) = self.shape(*a);
                let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                if let Some(ga) = accumulator(nodes, grads, *a) {
                    gemm_nt(gy, &bv, ga, rows, k, cols);
                }
                if let Some(gb) = accumulator(nodes, grads, *b) {
                    gemm_tn(&av, gy, gb, rows, k, cols);
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = accumulator(nodes, grads, *a) {
                    for (s, &g) in ga.iter_mut().zip(gy) {
                        *s += g;
                    }
                }
                if let Some(gb) = accumulator(nodes, grads, *bias) {
                    for row in gy.chunks(cols) {
                        for (s, &g) in gb.iter_mut().zip(row) {
                            *s += g;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = accumulator(nodes, grads, v) {
                        for (s, &g) in gv.iter_mut().zip(gy) {
                            *s += g;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = accumulator(nodes, grads, *a) {
                    for (o, &g) in ga.iter_mut().zip(gy) {
                        *o += g * *s;
                    }
                }
            }
            Op::LayerNorm { x, g, b, xhat, rstd } => {
                let gv = self.value(*g).to_vec();
                if let Some(gg) = accumulator(nodes, grads, *g) {
                    for i in 0..rows {
                        for j in 0..cols {
                            gg[j] += gy[i * cols + j] * xhat[i * cols + j];
                        }
                    }
                }
                if let Some(gb) = accumulator(nodes, grads, *b) {
                    for row in gy.chunks(cols) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
                if let Some(gx) = accumulator(nodes, grads, *x) {
                    let n: F = real(cols as f64);
                    for i in 0..rows {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..cols {
                            let dh = gy[i * cols + j] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[i * cols + j];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        for j in 0..cols {
                            let dh = gy[i * cols + j] * gv[j];
                            gx[i * cols + j] += rstd[i] * (dh - m1 - xhat[i * cols + j] * m2);
                        }
                    }
                }
            }
            Op::Modulate { x, shift, scale, seq } => {
                let xv = self.value(*x).to_vec();
                let sc = self.value(*scale).to_vec();
                if let Some(gx) = accumulator(nodes, grads, *x) {
                    for i in 0..rows {
                        let b = i / seq;
                        for j in 0..cols {
                            gx[i * cols + j] += gy[i * cols + j] * (F::one() + sc[b * cols + j]);
                        }
                    }
                }
                if let Some(gs) = accumulator(nodes, grads, *scale) {
                    for i in 0..rows {
                        let b = i / seq;
                        for j in 0..cols {
                            gs[b * cols + j] += gy[i * cols + j] * xv[i * cols + j];
                        }
                    }
                }
                if let Some(gs) = accumulator(nodes, grads, *shift) {
                    for i in 0..rows {
                        let b = i / seq;
                        for j in 0..cols {
                            gs[b * cols + j] += gy[i * cols + j];
                        }
                    }
                }
            }
            Op::GatedResidual { x, f, gate, seq } => {
                let fv = self.value(*f).to_vec();
                let gt = self.value(*gate).to_vec();
                if let Some(gx) = accumulator(nodes, grads, *x) {
                    for (s, &g) in gx.iter_mut().zip(gy) {
                        *s += g;
                    }
                }
                if let Some(gf) = accumulator(nodes, grads, *f) {
                    for i in 0..rows {
                        let b = i / seq;
                        for j in 0..cols {
                            gf[i * cols + j] += gy[i * cols + j] * (F::one() + gt[b * cols + j]);
                        }
                    }
                }
                if let Some(gg) = accumulator(nodes, grads, *gate) {
                    for i in 0..rows {
                        let b = i / seq;
                        for j in 0..cols {
                            gg[b * cols + j] += gy[i * cols + j] * fv[i * cols + j];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).to_vec();
                if let Some(gx) = accumulator(nodes, grads, *x) {
                    let k: F = real(GELU_C);
                    let a: F = real(0.044715);
                    let half: F = real(0.5);
                    let three: F = real(3.0);
                    for ((s, &g), &v) in gx.iter_mut().zip(gy).zip(&xv) {
                        let u = k * (v + a * v * v * v);
                        let th = u.tanh();
                        let du = k * (F::one() + three * a * v * v);
                        let d = half * (F::one() + th) + half * v * (F::one() - th * th) * du;
                        *s += g * d;
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).to_vec();
                if let Some(gx) = accumulator(nodes, grads, *x) {
                    for ((s, &g), &v) in gx.iter_mut().zip(gy).zip(&xv) {
                        let sg = F::one() / (F::one() + (-v).exp());
                        *s += g * sg * (F::one() + v * (F::one() - sg));
                    }
                }
            }
            Op::Attention { q, k, v, spec, qr, kr, probs, cos, sin } => {
                let d = cols;
                let (s, h) = (spec.seq, spec.heads);
                let dh = d / h;
                let half = dh / 2;
                let scale: F = real(1.0 / (dh as f64).sqrt());
                let vv = self.value(*v).to_vec();
                let mut dqr = vec![F::zero(); rows * d];
                let mut dkr = vec![F::zero(); rows * d];
                let mut dv = vec![F::zero(); rows * d];
                let mut dp = vec![F::zero(); s];
                for b in 0..spec.batch {
                    let causal = spec.causal[b];
                    for hh in 0..h {
                        let pbase = (b * h + hh) * s * s;
                        for i in 0..s {
                            let lim = if causal { i + 1 } else { s };
                            let prow = &probs[pbase + i * s..pbase + i * s + lim];
                            let go = (b * s + i) * d + hh * dh;
                            let grow = &gy[go..go + dh];
                            let mut inner = F::zero();
                            for j in 0..lim {
                                let vo = (b * s + j) * d + hh * dh;
                                dp[j] = dot(grow, &vv[vo..vo + dh]);
                                inner += prow[j] * dp[j];
                                let pj = prow[j];
                                for (o, &g) in dv[vo..vo + dh].iter_mut().zip(grow) {
                                    *o += pj * g;
                                }
                            }
                            for j in 0..lim {
                                let ds = prow[j] * (dp[j] - inner) * scale;
                                if ds == F::zero() {
                                    continue;
                                }
                                let ko = (b * s + j) * d + hh * dh;
                                for t in 0..dh {
                                    dqr[go + t] += ds * kr[ko + t];
                                    dkr[ko + t] += ds * qr[go + t];
                                }
                            }
                        }
                    }
                }
                let mut tmp = vec![F::zero(); dh];
                let mut unrotate = |src: &[F], dst: &mut [F]| {
                    for row in 0..rows {
                        let p = row % s;
                        let (c, sn) = (&cos[p * half..(p + 1) * half], &sin[p * half..(p + 1) * half]);
                        for hh in 0..h {
                            let o = row * d + hh * dh;
                            rotate(&src[o..o + dh], &mut tmp, c, sn, true);
                            for (x, &y) in dst[o..o + dh].iter_mut().zip(&tmp) {
                                *x += y;
                            }
                        }
                    }
                };
                if let Some(gq) = accumulator(nodes, grads, *q) {
                    unrotate(&dqr, gq);
                }
                if let Some(gk) = accumulator(nodes, grads, *k) {
                    unrotate(&dkr, gk);
                }
                if let Some(gv) = accumulator(nodes, grads, *v) {
                    for (x, &y) in gv.iter_mut().zip(&dv) {
                        *x += y;
                    }
                }
            }
            Op::Embed { table, ids } => {
                if let Some(gt) = accumulator(nodes, grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            gt[id * cols + j] += gy[i * cols + j];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if let Some(gx) = accumulator(nodes, grads, *x) {
                    for (i, &r) in idx.iter().enumerate() {
                        for j in 0..cols {
                            gx[r * cols + j] += gy[i * cols + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (_, c) = self.shape(*x);
                if let Some(gx) = accumulator(nodes, grads, *x) {
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[i * c + start + j] += gy[i * cols + j];
                        }
                    }
                }
            }
            Op::Score { logits, spec, probs } => {
                let (r, c) = self.shape(*logits);
                if let Some(gl) = accumulator(nodes, grads, *logits) {
                    let g0 = to_f64(gy[0]);
                    for i in 0..r {
                        let p = &probs[i * c..(i + 1) * c];
                        let (coef, w) = (&spec.coef[i * c..(i + 1) * c], &spec.weights[i * c..(i + 1) * c]);
                        let sum_cp: f64 = (0..c).map(|j| coef[j] * to_f64(p[j])).sum();
                        let sum_w: f64 = w.iter().sum();
                        let s = g0 * spec.row_scale[i];
                        for j in 0..c {
                            let pj = to_f64(p[j]);
                            let d = coef[j] * pj - pj * sum_cp - w[j] + pj * sum_w;
                            gl[i * c + j] += real::<F>(s * d);
                        }
                    }
                }
            }
            Op::SumSq(x) => {
                let xv = self.value(*x).to_vec();
                if let Some(gx) = accumulator(nodes, grads, *x) {
                    let two: F = real(2.0);
                    for (s, &v) in gx.iter_mut().zip(&xv) {
                        *s += two * v * gy[0];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = accumulator(nodes, grads, *x) {
                    for s in gx.iter_mut() {
                        *s += gy[0];
                    }
                }
            }
        }
    }
}
