//! Network configuration and named parameter storage.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::tensor::{real, to_f64, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// |Σ|; the input vocabulary adds the mask and BOS ids.
    pub vocab: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Learned absolute position table added to the input.
    #[serde(default)]
    pub abs_pos: bool,
}

fn default_rope_base() -> f64 {
    10000.0
}

impl NetConfig {
    pub fn new(vocab: usize, max_len: usize) -> Self {
        Self { vocab, max_len, d_model: 64, n_layers: 2, n_heads: 4, d_ff: 128, rope_base: 10000.0, abs_pos: false }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetError::Config(m.to_string()));
        if self.vocab < 2 {
            return bad("vocab must be at least 2");
        }
        if self.max_len == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 || (self.d_model / self.n_heads) % 2 != 0 {
            return bad("d_model / n_heads must be an even integer");
        }
        if !(self.rope_base > 1.0) {
            return bad("rope_base must exceed 1");
        }
        Ok(())
    }

    pub fn mask_id(&self) -> usize {
        self.vocab
    }

    pub fn bos_id(&self) -> usize {
        self.vocab + 1
    }

    /// Model input length: BOS plus the sequence.
    pub fn seq_rows(&self, len: usize) -> usize {
        len + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    /// Model time T; inputs are scaled by 1/T.
    pub t_max: usize,
    pub d_time: usize,
    pub n_freq: usize,
}

impl TimeConfig {
    pub fn new(t_max: usize) -> Self {
        Self { t_max, d_time: 8, n_freq: 6 }
    }

    /// Sinusoidal features of t/T.
    pub fn features(&self, t: f64) -> Vec<f64> {
        let u = t / self.t_max as f64;
        let mut out = Vec::with_capacity(2 * self.n_freq);
        for i in 0..self.n_freq {
            let w = 0.5 * std::f64::consts::PI * (1u64 << i) as f64;
            out.push((w * u).sin());
            out.push((w * u).cos());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeIdx {
    pub t1_w: usize,
    pub t1_b: usize,
    pub t2_w: usize,
    pub t2_b: usize,
    /// Per block: [d_time, 6·d] producing shift1, scale1, gate1, shift2, scale2, gate2.
    pub mods: Vec<(usize, usize)>,
    /// Final norm: [d_time, 2·d] producing shift, scale.
    pub fmod_w: usize,
    pub fmod_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub tok: usize,
    pub mode: usize,
    pub pos: Option<usize>,
    pub blocks: Vec<BlockIdx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub time: Option<TimeIdx>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    shape: (usize, usize),
    init: Init,
    time: bool,
}

fn base_specs(c: &NetConfig) -> Vec<Spec> {
    let d = c.d_model;
    let proj = Init::Normal(1.0 / (d as f64).sqrt());
    let mut v = Vec::new();
    let mut add = |name: String, shape, init| v.push(Spec { name, shape, init, time: false });
    add("tok_emb".into(), (c.vocab + 2, d), proj);
    add("mode_emb".into(), (2, d), proj);
    if c.abs_pos {
        add("pos_emb".into(), (c.max_len + 1, d), proj);
    }
    for l in 0..c.n_layers {
        let p = |s: &str| format!("block{l}.{s}");
        add(p("ln1.g"), (1, d), Init::Ones);
        add(p("ln1.b"), (1, d), Init::Zeros);
        for w in ["q", "k", "v", "o"] {
            add(p(&format!("w{w}")), (d, d), proj);
            add(p(&format!("b{w}")), (1, d), Init::Zeros);
        }
        add(p("ln2.g"), (1, d), Init::Ones);
        add(p("ln2.b"), (1, d), Init::Zeros);
        add(p("w1"), (d, c.d_ff), proj);
        add(p("b1"), (1, c.d_ff), Init::Zeros);
        add(p("w2"), (c.d_ff, d), Init::Normal(1.0 / (c.d_ff as f64).sqrt()));
        add(p("b2"), (1, d), Init::Zeros);
    }
    add("lnf.g".into(), (1, d), Init::Ones);
    add("lnf.b".into(), (1, d), Init::Zeros);
    add("head.w".into(), (d, c.vocab), proj);
    add("head.b".into(), (1, c.vocab), Init::Zeros);
    v
}

fn time_specs(c: &NetConfig, t: &TimeConfig) -> Vec<Spec> {
    let d = c.d_model;
    let mut v = Vec::new();
    let mut add = |name: String, shape, init| v.push(Spec { name, shape, init, time: true });
    add("time.w1".into(), (2 * t.n_freq, t.d_time), Init::Normal(1.0 / ((2 * t.n_freq) as f64).sqrt()));
    add("time.b1".into(), (1, t.d_time), Init::Zeros);
    add("time.w2".into(), (t.d_time, t.d_time), Init::Normal(1.0 / (t.d_time as f64).sqrt()));
    add("time.b2".into(), (1, t.d_time), Init::Zeros);
    for l in 0..c.n_layers {
        add(format!("block{l}.mod.w"), (t.d_time, 6 * d), Init::Zeros);
        add(format!("block{l}.mod.b"), (1, 6 * d), Init::Zeros);
    }
    add("final.mod.w".into(), (t.d_time, 2 * d), Init::Zeros);
    add("final.mod.b".into(), (1, 2 * d), Init::Zeros);
    v
}

fn layout(c: &NetConfig, time: bool) -> Layout {
    let mut i = 0usize;
    let mut next = || {
        i += 1;
        i - 1
    };
    let tok = next();
    let mode = next();
    let pos = c.abs_pos.then(&mut next);
    let blocks = (0..c.n_layers)
        .map(|_| BlockIdx {
            ln1_g: next(),
            ln1_b: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln2_g: next(),
            ln2_b: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        })
        .collect();
    let (lnf_g, lnf_b, head_w, head_b) = (next(), next(), next(), next());
    let time = time.then(|| {
        let (t1_w, t1_b, t2_w, t2_b) = (next(), next(), next(), next());
        let mods = (0..c.n_layers).map(|_| (next(), next())).collect();
        let (fmod_w, fmod_b) = (next(), next());
        TimeIdx { t1_w, t1_b, t2_w, t2_b, mods, fmod_w, fmod_b }
    });
    Layout { tok, mode, pos, blocks, lnf_g, lnf_b, head_w, head_b, time }
}

/// Base weights θ plus optional time-conditioning weights γ.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Real> {
    pub config: NetConfig,
    pub time: Option<TimeConfig>,
    pub names: Vec<String>,
    pub shapes: Vec<(usize, usize)>,
    pub values: Vec<Vec<F>>,
    /// True for the γ tensors.
    pub is_time: Vec<bool>,
    layout: Layout,
}

impl<F: Real> ModelParams<F> {
    pub fn init_base<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let specs = base_specs(&config);
        let mut p = Self {
            layout: layout(&config, false),
            config,
            time: None,
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            is_time: Vec::new(),
        };
        p.push_specs(specs, rng);
        Ok(p)
    }

    fn push_specs<R: Rng + ?Sized>(&mut self, specs: Vec<Spec>, rng: &mut R) {
        for s in specs {
            let n = s.shape.0 * s.shape.1;
            let values = match s.init {
                Init::Zeros => vec![F::zero(); n],
                Init::Ones => vec![F::one(); n],
                Init::Normal(std) => (0..n)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        real(z * std)
                    })
                    .collect(),
            };
            self.names.push(s.name);
            self.shapes.push(s.shape);
            self.values.push(values);
            self.is_time.push(s.time);
        }
    }

    /// Adds γ with zero modulation projections, leaving every output unchanged.
    pub fn augment_time<R: Rng + ?Sized>(&self, time: TimeConfig, rng: &mut R) -> Result<Self> {
        if self.time.is_some() {
            return Err(NetError::Time("parameters already carry time conditioning".into()));
        }
        if time.t_max == 0 || time.d_time == 0 || time.n_freq == 0 {
            return Err(NetError::Config("time dimensions must be positive".into()));
        }
        let mut p = self.clone();
        let specs = time_specs(&self.config, &time);
        p.push_specs(specs, rng);
        p.time = Some(time);
        p.layout = layout(&p.config, true);
        Ok(p)
    }

    /// Rebuilds a parameter set from stored tensors, checking names and shapes.
    pub fn from_tensors(config: NetConfig, time: Option<TimeConfig>, tensors: Vec<(String, (usize, usize), Vec<F>)>) -> Result<Self> {
        config.validate()?;
        let mut specs = base_specs(&config);
        if let Some(t) = &time {
            specs.extend(time_specs(&config, t));
        }
        if specs.len() != tensors.len() {
            return Err(NetError::Shape(format!("expected {} tensors, got {}", specs.len(), tensors.len())));
        }
        let mut p = Self {
            layout: layout(&config, time.is_some()),
            config,
            time,
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            is_time: Vec::new(),
        };
        for (s, (name, shape, values)) in specs.into_iter().zip(tensors) {
            if s.name != name || s.shape != shape || values.len() != shape.0 * shape.1 {
                return Err(NetError::Shape(format!("tensor {name} {shape:?} does not match {} {:?}", s.name, s.shape)));
            }
            p.names.push(name);
            p.shapes.push(shape);
            p.values.push(values);
            p.is_time.push(s.time);
        }
        Ok(p)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn base_count(&self) -> usize {
        self.count(false)
    }

    pub fn time_count(&self) -> usize {
        self.count(true)
    }

    fn count(&self, time: bool) -> usize {
        self.values.iter().zip(&self.is_time).filter(|(_, &t)| t == time).map(|(v, _)| v.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            time: self.time.clone(),
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self.values.iter().map(|v| v.iter().map(|&x| real::<G>(to_f64(x))).collect()).collect(),
            is_time: self.is_time.clone(),
            layout: self.layout.clone(),
        }
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.names == other.names && self.shapes == other.shapes
    }

    /// `self ← d·self + (1−d)·other`, elementwise.
    pub fn blend_from(&mut self, other: &Self, d: f64) -> Result<()> {
        if !self.same_structure(other) {
            return Err(NetError::Shape("parameter sets differ in structure".into()));
        }
        let (a, b): (F, F) = (real(d), real(1.0 - d));
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            for (p, &q) in x.iter_mut().zip(y) {
                *p = a * *p + b * q;
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| to_f64(x - y).abs()))
            .fold(0.0, f64::max)
    }
}
