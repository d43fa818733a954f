//! Base pretraining, then score-entropy fine-tuning against a frozen copy of
//! the model that serves as its own forward noising kernel.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use glauber_core::loss::snapshot_times;
use glauber_core::rng::{derive_seed, sample_index};
use glauber_core::{stream, ConditionalModel, StreamRng, TargetMode, Token, TokenSeq, UpdateSchedule, Vocabulary};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{params_entries, params_from_entries, read_file, write_file, TensorEntry};
use crate::error::{NetError, Result};
use crate::exact::ExactReverse;
use crate::model::{backprop, Mode, NetModel, Query};
use crate::objective::{combined_loss, CeRows, Snapshot, SnapshotTarget};
use crate::optim::{ema_decay, AdamConfig, AdamW, LrSchedule};
use crate::params::{ModelParams, NetConfig, TimeConfig};
use crate::sampler::window_positions;
use crate::tape::Tape;
use crate::tensor::{to_f64, Real};

/// One training sequence; `frozen` positions are conditioning (clues,
/// preambles) and are never noised or predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<Token>,
    pub frozen: Vec<usize>,
}

impl Example {
    pub fn plain(tokens: Vec<Token>) -> Self {
        Self { tokens, frozen: Vec::new() }
    }

    fn free(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|j| !self.frozen.contains(j)).collect()
    }
}

/// An on-the-fly data stream.
pub trait Corpus {
    fn vocab(&self) -> usize;
    fn seq_len(&self) -> usize;
    fn draw(&self, rng: &mut StreamRng) -> Example;
}

fn write_metric(out: &mut Option<&mut dyn Write>, step: usize, loss: f64, lr: f64, start: &Instant) -> Result<()> {
    if let Some(w) = out.as_mut() {
        let line = json!({ "step": step, "loss": loss, "lr": lr, "wallclock_ms": start.elapsed().as_millis() as u64 });
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn check_finite(step: usize, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(NetError::NonFinite { step, value })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub adam: AdamConfig,
    /// Infill examples mask between 1 and this many positions.
    pub max_masks: usize,
    /// Probability that an example is a next-token example.
    pub causal_fraction: f64,
    pub param_ema_decay: f64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn desk(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            batch_size: 32,
            warmup_steps: (steps / 10).max(1),
            peak_lr: 3e-3,
            floor_lr: 1e-5,
            adam: AdamConfig::default(),
            max_masks: 1,
            causal_fraction: 0.5,
            param_ema_decay: 0.99,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.max_masks == 0 {
            return Err(NetError::Config("steps, batch_size and max_masks must be positive".into()));
        }
        if self.warmup_steps >= self.steps {
            return Err(NetError::Config("warmup must be shorter than training".into()));
        }
        if !(0.0..=1.0).contains(&self.causal_fraction) || !(0.0..1.0).contains(&self.param_ema_decay) {
            return Err(NetError::Config("causal_fraction in [0,1] and param_ema_decay in [0,1) required".into()));
        }
        if !(self.peak_lr > 0.0 && self.floor_lr >= 0.0) {
            return Err(NetError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn lr(&self) -> LrSchedule {
        LrSchedule { warmup_steps: self.warmup_steps, total_steps: self.steps, peak_lr: self.peak_lr, floor_lr: self.floor_lr }
    }
}

/// Final live weights, their running average and the per-step losses.
#[derive(Debug, Clone)]
pub struct PretrainOutput<F: Real> {
    pub live: ModelParams<F>,
    pub ema: ModelParams<F>,
    pub losses: Vec<f64>,
}

/// Next-token rows over every free position.
fn causal_rows(ex: &Example, time: f64, weight: f64, ce: &mut CeRows) {
    let free = ex.free();
    if free.is_empty() {
        return;
    }
    let w = weight / free.len() as f64;
    ce.targets.extend(free.iter().map(|&j| ex.tokens[j]));
    ce.scales.extend(std::iter::repeat(w).take(free.len()));
    ce.queries.push(Query { tokens: ex.tokens.clone(), mode: Mode::CausalGen, time, positions: free });
}

/// Infill rows for `masked` positions, all hidden at once.
fn infill_rows(ex: &Example, masked: Vec<usize>, mask: Token, time: f64, weight: f64, ce: &mut CeRows) {
    if masked.is_empty() {
        return;
    }
    let w = weight / masked.len() as f64;
    let mut tokens = ex.tokens.clone();
    for &j in &masked {
        tokens[j] = mask;
    }
    ce.targets.extend(masked.iter().map(|&j| ex.tokens[j]));
    ce.scales.extend(std::iter::repeat(w).take(masked.len()));
    ce.queries.push(Query { tokens, mode: Mode::MaskInfill, time, positions: masked });
}

/// Trains θ on an even mix of next-token prediction and random-mask infilling.
pub fn pretrain_base<F: Real>(
    corpus: &dyn Corpus,
    init: ModelParams<F>,
    cfg: &PretrainConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<PretrainOutput<F>> {
    cfg.validate()?;
    if corpus.vocab() != init.config.vocab || corpus.seq_len() > init.config.max_len {
        return Err(NetError::Config("corpus does not fit the network configuration".into()));
    }
    let time = init.time.as_ref().map_or(0.0, |t| t.t_max as f64);
    let mask = init.config.mask_id() as Token;
    let sched = cfg.lr();
    let mut live = init;
    let mut ema = live.clone();
    let mut opt = AdamW::<F>::new(cfg.adam, &live);
    let mut losses = Vec::with_capacity(cfg.steps);
    let start = Instant::now();
    let per = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let mut ce = CeRows::default();
        for b in 0..cfg.batch_size {
            let mut rng = stream(derive_seed(cfg.seed, step as u64), b as u64);
            let ex = corpus.draw(&mut rng);
            if rng.gen::<f64>() < cfg.causal_fraction {
                causal_rows(&ex, time, per, &mut ce);
            } else {
                let free = ex.free();
                if free.is_empty() {
                    continue;
                }
                let m = rng.gen_range(1..=cfg.max_masks.min(free.len()));
                let mut picked: Vec<usize> = sample_indices(&mut rng, free.len(), m).into_iter().map(|i| free[i]).collect();
                picked.sort_unstable();
                infill_rows(&ex, picked, mask, time, per, &mut ce);
            }
        }
        let mut tape = Tape::new();
        let loss = combined_loss(&mut tape, &live, &[], &ce)?;
        let value = tape.scalar(loss);
        check_finite(step, value)?;
        let grads = backprop(&live, &tape, loss)?.dense(&live);
        let lr = sched.lr_at(step + 1);
        opt.step(&mut live, &grads, lr)?;
        ema.blend_from(&live, ema_decay(cfg.param_ema_decay, step))?;
        losses.push(value);
        write_metric(&mut metrics, step + 1, value, lr, &start)?;
    }
    Ok(PretrainOutput { live, ema, losses })
}

/// Causal and infill accuracy (argmax) on fresh draws; infill masks one free
/// position at a time, causal predicts each free position from its prefix.
pub fn mode_accuracy<F: Real>(params: &ModelParams<F>, corpus: &dyn Corpus, count: usize, seed: u64) -> Result<(f64, f64)> {
    let time = params.time.as_ref().map_or(0.0, |t| t.t_max as f64);
    let mask = params.config.mask_id() as Token;
    let (mut hit_c, mut hit_i, mut n) = (0usize, 0usize, 0usize);
    let argmax = |p: &[f64]| p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i as Token).unwrap_or(0);
    for e in 0..count {
        let ex = corpus.draw(&mut stream(seed, e as u64));
        let free = ex.free();
        let q = Query { tokens: ex.tokens.clone(), mode: Mode::CausalGen, time, positions: free.clone() };
        let causal = crate::model::probabilities(params, &[q])?;
        let infill_q: Vec<Query> = free
            .iter()
            .map(|&j| {
                let mut tokens = ex.tokens.clone();
                tokens[j] = mask;
                Query { tokens, mode: Mode::MaskInfill, time, positions: vec![j] }
            })
            .collect();
        let infill = if infill_q.is_empty() { Vec::new() } else { crate::model::probabilities(params, &infill_q)? };
        for (i, &j) in free.iter().enumerate() {
            hit_c += usize::from(argmax(&causal[i]) == ex.tokens[j]);
            hit_i += usize::from(argmax(&infill[i]) == ex.tokens[j]);
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    Ok((hit_c as f64 / n, hit_i as f64 / n))
}

/// A non-trainable copy of the model, queried only in infill mode at `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenKernel<F: Real> {
    params: ModelParams<F>,
    t_max: usize,
}

impl<F: Real> FrozenKernel<F> {
    pub fn params(&self) -> &ModelParams<F> {
        &self.params
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn model(&self) -> NetModel<'_, F> {
        NetModel::at_time(&self.params, self.t_max as f64)
    }
}

/// Deep copy of augmented parameters.
pub fn make_frozen<F: Real>(params: &ModelParams<F>) -> Result<FrozenKernel<F>> {
    let t = params.time.as_ref().ok_or_else(|| NetError::Time("frozen kernel needs time-conditioned parameters".into()))?;
    Ok(FrozenKernel { params: params.clone(), t_max: t.t_max })
}

/// `frozen ← d·frozen + (1−d)·live`.
pub fn ema_refresh<F: Real>(frozen: &mut FrozenKernel<F>, live: &ModelParams<F>, d: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&d) {
        return Err(NetError::Config(format!("refresh decay {d} outside [0, 1]")));
    }
    frozen.params.blend_from(live, d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub rounds: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    pub snapshots_per_sample: usize,
    pub adam: AdamConfig,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub frozen_ema_decay: f64,
    pub refresh_interval: usize,
    pub param_ema_decay: f64,
    pub grad_accum: usize,
    pub seed: u64,
    /// Seed of the fixed update permutations shared with sampling.
    pub schedule_seed: u64,
    pub target: TargetMode,
    /// Masking window used for the live model's input.
    pub window: usize,
    /// Draw `t` per example instead of once per micro-batch.
    pub per_example_time: bool,
    /// Weight of an extra next-token loss at time `T` on the clean batch.
    pub causal_weight: f64,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default)]
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn desk(seq_len: usize, rounds: usize, seed: u64) -> Self {
        Self {
            epochs: 2,
            steps_per_epoch: 200,
            rounds,
            seq_len,
            batch_size: 16,
            snapshots_per_sample: 8,
            adam: AdamConfig::default(),
            warmup_steps: 20,
            peak_lr: 1e-3,
            floor_lr: 1e-6,
            frozen_ema_decay: 0.999,
            refresh_interval: 100,
            param_ema_decay: 0.999,
            grad_accum: 1,
            seed,
            schedule_seed: seed,
            target: TargetMode::PathRatio,
            window: 1,
            per_example_time: false,
            causal_weight: 0.0,
            grad_clip: 0.0,
        }
    }

    /// Published large-scale settings; recorded, not exercised.
    pub fn paper_scale(seed: u64) -> Self {
        Self {
            epochs: 2,
            steps_per_epoch: 400_000,
            rounds: 1,
            seq_len: 1024,
            batch_size: 128,
            snapshots_per_sample: 32,
            adam: AdamConfig::default(),
            warmup_steps: 9000,
            peak_lr: 3e-4,
            floor_lr: 1e-6,
            frozen_ema_decay: 0.999,
            refresh_interval: 100,
            param_ema_decay: 0.9999,
            grad_accum: 4,
            seed,
            schedule_seed: seed,
            target: TargetMode::PathRatio,
            window: 1,
            per_example_time: false,
            causal_weight: 0.0,
            grad_clip: 0.0,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn t_max(&self) -> usize {
        self.rounds * self.seq_len
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.epochs,
            self.steps_per_epoch,
            self.rounds,
            self.seq_len,
            self.batch_size,
            self.snapshots_per_sample,
            self.refresh_interval,
            self.grad_accum,
            self.window,
        ];
        if counts.contains(&0) {
            return Err(NetError::Config("all counts must be positive".into()));
        }
        if self.warmup_steps >= self.total_steps() {
            return Err(NetError::Config("warmup must be shorter than training".into()));
        }
        if !(self.peak_lr > 0.0 && self.floor_lr >= 0.0 && self.causal_weight >= 0.0 && self.grad_clip >= 0.0) {
            return Err(NetError::Config("learning rates and weights must be non-negative".into()));
        }
        for d in [self.frozen_ema_decay, self.param_ema_decay, self.adam.beta1, self.adam.beta2] {
            if !(0.0..1.0).contains(&d) {
                return Err(NetError::Config(format!("decay {d} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn lr(&self) -> LrSchedule {
        LrSchedule { warmup_steps: self.warmup_steps, total_steps: self.total_steps(), peak_lr: self.peak_lr, floor_lr: self.floor_lr }
    }

    pub fn schedule(&self) -> Result<UpdateSchedule> {
        Ok(UpdateSchedule::build(self.seq_len, self.rounds, self.schedule_seed)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

/// Forward kernel used for noising.
pub enum KernelSource<'a> {
    /// The model's own frozen copy (the default algorithm).
    Frozen,
    /// A fixed external kernel, e.g. a tabular toy.
    Fixed(&'a dyn ConditionalModel),
}

pub struct TrainOptions<'a> {
    pub kernel: KernelSource<'a>,
    /// Needed for [`TargetMode::ExactPosterior`]; built with the same kernel.
    pub posterior: Option<&'a ExactReverse>,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics: Option<&'a mut dyn Write>,
    /// Stop after this many optimizer steps (for interrupted runs).
    pub stop_after: Option<usize>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self { kernel: KernelSource::Frozen, posterior: None, checkpoint_dir: None, metrics: None, stop_after: None }
    }
}

/// Everything needed to continue training.
#[derive(Debug, Clone)]
pub struct TrainState<F: Real> {
    pub config: TrainConfig,
    pub live: ModelParams<F>,
    pub ema: ModelParams<F>,
    pub frozen: FrozenKernel<F>,
    pub opt: AdamW<F>,
    /// Optimizer steps completed.
    pub step: usize,
    pub losses: Vec<f64>,
}

impl<F: Real> TrainState<F> {
    pub fn new(config: TrainConfig, params: ModelParams<F>) -> Result<Self> {
        config.validate()?;
        let t = params.time.as_ref().ok_or_else(|| NetError::Time("training needs augment_time first".into()))?;
        if t.t_max != config.t_max() {
            return Err(NetError::Config(format!("model T = {} but rounds × L = {}", t.t_max, config.t_max())));
        }
        if config.seq_len > params.config.max_len {
            return Err(NetError::Config("sequence length exceeds max_len".into()));
        }
        let frozen = make_frozen(&params)?;
        let opt = AdamW::new(config.adam, &params);
        Ok(Self { config, ema: params.clone(), live: params, frozen, opt, step: 0, losses: Vec::new() })
    }

    pub fn epoch(&self) -> usize {
        self.step / self.config.steps_per_epoch
    }

    /// Weights used for inference.
    pub fn inference_params(&self, use_ema: bool) -> &ModelParams<F> {
        if use_ema {
            &self.ema
        } else {
            &self.live
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "train": self.config,
            "net": self.live.config,
            "time": self.live.time,
            "step": self.step,
            "adam_steps": self.opt.steps,
            "losses": self.losses,
        });
        let mut entries = params_entries(&self.live, "live.");
        entries.extend(params_entries(&self.ema, "ema."));
        entries.extend(params_entries(&self.frozen.params, "frozen."));
        for (prefix, moments) in [("adam_m.", &self.opt.m), ("adam_v.", &self.opt.v)] {
            for ((name, &(r, c)), data) in self.live.names.iter().zip(&self.live.shapes).zip(moments) {
                entries.push(TensorEntry { name: format!("{prefix}{name}"), shape: vec![r, c], data: data.clone() });
            }
        }
        write_file(path, &meta, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, entries) = read_file::<F>(path)?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| NetError::Checkpoint(format!("missing {k}")));
        let config: TrainConfig = serde_json::from_value(field("train")?)?;
        let net: NetConfig = serde_json::from_value(field("net")?)?;
        let time: Option<TimeConfig> = serde_json::from_value(field("time")?)?;
        let step: usize = serde_json::from_value(field("step")?)?;
        let adam_steps: u64 = serde_json::from_value(field("adam_steps")?)?;
        let losses: Vec<f64> = serde_json::from_value(field("losses")?)?;
        let live = params_from_entries(net.clone(), time.clone(), &entries, "live.")?;
        let ema = params_from_entries(net.clone(), time.clone(), &entries, "ema.")?;
        let frozen = make_frozen(&params_from_entries(net.clone(), time.clone(), &entries, "frozen.")?)?;
        let m = params_from_entries(net.clone(), time.clone(), &entries, "adam_m.")?.values;
        let v = params_from_entries(net, time, &entries, "adam_v.")?.values;
        let opt = AdamW { config: config.adam, m, v, steps: adam_steps };
        Ok(Self { config, live, ema, frozen, opt, step, losses })
    }
}

/// Reads only the inference weights of a training checkpoint.
pub fn load_trained<F: Real>(path: &Path, use_ema: bool) -> Result<(ModelParams<F>, TrainConfig)> {
    let s = TrainState::<F>::load(path)?;
    let p = if use_ema { s.ema } else { s.live };
    Ok((p, s.config))
}

struct Noised {
    snaps: Vec<Snapshot>,
    clean: Vec<Example>,
}

/// Runs the forward chain on a micro-batch in lockstep and collects snapshots.
fn noise_micro_batch(
    corpus: &dyn Corpus,
    kernel: &dyn ConditionalModel,
    posterior: Option<&ExactReverse>,
    schedule: &UpdateSchedule,
    cfg: &TrainConfig,
    micro: u64,
) -> Result<Noised> {
    let total = schedule.total_steps();
    let vocab = Vocabulary::new(corpus.vocab())?;
    let seed = derive_seed(cfg.seed, micro);
    let mut shared = stream(seed, u64::MAX);
    let shared_t = shared.gen_range(1..=total);
    let mut rngs: Vec<StreamRng> = (0..cfg.batch_size).map(|b| stream(seed, b as u64)).collect();
    let clean: Vec<Example> = rngs.iter_mut().map(|r| corpus.draw(r)).collect();
    let ts: Vec<usize> = rngs.iter_mut().map(|r| if cfg.per_example_time { r.gen_range(1..=total) } else { shared_t }).collect();
    let mut states: Vec<TokenSeq> = clean.iter().map(|e| TokenSeq::new(e.tokens.clone(), vocab)).collect::<glauber_core::Result<_>>()?;
    let times: Vec<Vec<usize>> = ts.iter().map(|&t| snapshot_times(t, cfg.snapshots_per_sample)).collect();
    let t_end = ts.iter().copied().max().unwrap_or(0);
    let mut snaps = Vec::new();
    for s in 1..=t_end {
        let k = schedule.coordinate_at(s)?;
        let active: Vec<usize> = (0..states.len()).filter(|&b| s <= ts[b] && !clean[b].frozen.contains(&k)).collect();
        if active.is_empty() {
            continue;
        }
        let xs: Vec<TokenSeq> = active.iter().map(|&b| states[b].clone()).collect();
        let conds = kernel.infill_batch(&xs, k, total)?;
        for (&b, cond) in active.iter().zip(conds) {
            let prev = states[b].get(k);
            let value = sample_index(&cond, &mut rngs[b]) as Token;
            states[b].set(k, value);
            if !times[b].contains(&s) {
                continue;
            }
            let window = window_positions(schedule, s, cfg.window, &clean[b].frozen);
            let target = match cfg.target {
                TargetMode::PathRatio => {
                    let ratios = glauber_core::loss::ratios_from_conditional(&cond, value)?;
                    SnapshotTarget::PathRatio { frozen: cond, ratios }
                }
                TargetMode::PrevValueCe => SnapshotTarget::PrevValue(prev),
                TargetMode::ExactPosterior => {
                    let ex = posterior.ok_or_else(|| NetError::Config("exact posterior target needs an oracle".into()))?;
                    SnapshotTarget::Posterior(ex.reverse_conditional(states[b].tokens(), k, s, &window)?)
                }
            };
            snaps.push(Snapshot { tokens: states[b].tokens().to_vec(), coordinate: k, time: s, window, target });
        }
    }
    Ok(Noised { snaps, clean })
}

/// Rescales `grads` so their global L2 norm is at most `max` (0 = no clip).
pub fn clip_grad_norm<F: Real>(grads: &mut [Vec<F>], max: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| to_f64(*g).powi(2)).sum::<f64>().sqrt();
    if max > 0.0 && norm > max {
        let k = F::from_f64(max / norm).expect("finite");
        grads.iter_mut().flatten().for_each(|g| *g = *g * k);
    }
    norm
}

/// Runs (or continues) training until `total_steps` or `stop_after`.
pub fn train_state<F: Real>(corpus: &dyn Corpus, state: &mut TrainState<F>, mut opts: TrainOptions<'_>) -> Result<()> {
    let cfg = state.config.clone();
    if corpus.seq_len() != cfg.seq_len || corpus.vocab() != state.live.config.vocab {
        return Err(NetError::Config("corpus does not match the training configuration".into()));
    }
    if cfg.target == TargetMode::ExactPosterior && opts.posterior.is_none() {
        return Err(NetError::Config("exact posterior target needs an oracle".into()));
    }
    let schedule = cfg.schedule()?;
    let t_max = cfg.t_max();
    let sched = cfg.lr();
    let start = Instant::now();
    let end = opts.stop_after.map_or(cfg.total_steps(), |s| s.min(cfg.total_steps()));
    while state.step < end {
        let step = state.step;
        if step % cfg.steps_per_epoch == 0 && step > 0 {
            // epoch boundary: fresh deep copy
            state.frozen = make_frozen(&state.live)?;
        }
        let mut acc: Option<Vec<Vec<F>>> = None;
        let mut loss_sum = 0.0;
        for a in 0..cfg.grad_accum {
            let micro = (step * cfg.grad_accum + a) as u64;
            let noised = {
                let frozen_model = state.frozen.model();
                let kernel: &dyn ConditionalModel = match opts.kernel {
                    KernelSource::Frozen => &frozen_model,
                    KernelSource::Fixed(k) => k,
                };
                noise_micro_batch(corpus, kernel, opts.posterior, &schedule, &cfg, micro)?
            };
            let mut ce = CeRows::default();
            if cfg.causal_weight > 0.0 {
                let w = cfg.causal_weight / noised.clean.len() as f64;
                for ex in &noised.clean {
                    causal_rows(ex, t_max as f64, w, &mut ce);
                }
            }
            if noised.snaps.is_empty() && ce.is_empty() {
                continue;
            }
            let mut tape = Tape::new();
            let loss = combined_loss(&mut tape, &state.live, &noised.snaps, &ce)?;
            let value = tape.scalar(loss);
            check_finite(step, value)?;
            let g = backprop(&state.live, &tape, loss)?.dense(&state.live);
            loss_sum += value;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(acc) => {
                    for (x, y) in acc.iter_mut().zip(g) {
                        x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        let scale = F::from_f64(1.0 / cfg.grad_accum as f64).expect("finite");
        let mut grads = acc.unwrap_or_else(|| state.live.values.iter().map(|v| vec![F::zero(); v.len()]).collect());
        grads.iter_mut().flatten().for_each(|g| *g = *g * scale);
        clip_grad_norm(&mut grads, cfg.grad_clip);
        let loss = loss_sum / cfg.grad_accum as f64;
        let lr = sched.lr_at(step + 1);
        state.opt.step(&mut state.live, &grads, lr)?;
        state.ema.blend_from(&state.live, ema_decay(cfg.param_ema_decay, step))?;
        state.step += 1;
        state.losses.push(loss);
        if matches!(opts.kernel, KernelSource::Frozen) && state.step % cfg.refresh_interval == 0 {
            ema_refresh(&mut state.frozen, &state.live, cfg.frozen_ema_decay)?;
        }
        write_metric(&mut opts.metrics, state.step, loss, lr, &start)?;
        if state.step % cfg.steps_per_epoch == 0 {
            if let Some(dir) = &opts.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                state.save(&dir.join(format!("epoch-{}.gldf", state.step / cfg.steps_per_epoch)))?;
            }
        }
    }
    Ok(())
}

/// Fresh training run from augmented parameters.
pub fn train<F: Real>(corpus: &dyn Corpus, params: ModelParams<F>, cfg: &TrainConfig, opts: TrainOptions<'_>) -> Result<TrainState<F>> {
    let mut state = TrainState::new(cfg.clone(), params)?;
    train_state(corpus, &mut state, opts)?;
    Ok(state)
}

/// Summary of a parameter set's values, for cheap change detection.
pub fn param_checksum<F: Real>(p: &ModelParams<F>) -> f64 {
    p.values.iter().flatten().enumerate().map(|(i, &v)| to_f64(v) * (1.0 + (i % 7) as f64)).sum()
}

/// Training metadata stored next to pretrained weights.
pub fn pretrain_meta(cfg: &PretrainConfig) -> Value {
    json!({ "pretrain": cfg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::probabilities;
    use glauber_core::TabularDistribution;
    use rand::SeedableRng;

    /// Sequences `s, s+1, s+2, …` mod |Σ| with a random start.
    struct Cycle {
        vocab: usize,
        len: usize,
    }

    impl Corpus for Cycle {
        fn vocab(&self) -> usize {
            self.vocab
        }
        fn seq_len(&self) -> usize {
            self.len
        }
        fn draw(&self, rng: &mut StreamRng) -> Example {
            let s = rng.gen_range(0..self.vocab);
            Example::plain((0..self.len).map(|i| ((s + i) % self.vocab) as Token).collect())
        }
    }

    struct Tabular(TabularDistribution);

    impl Corpus for Tabular {
        fn vocab(&self) -> usize {
            self.0.space().vocab().size()
        }
        fn seq_len(&self) -> usize {
            self.0.len()
        }
        fn draw(&self, rng: &mut StreamRng) -> Example {
            Example::plain(self.0.sample(rng).into_vec())
        }
    }

    fn small(vocab: usize, len: usize) -> NetConfig {
        NetConfig { vocab, max_len: len, d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, rope_base: 10000.0, abs_pos: false }
    }

    fn augmented(vocab: usize, len: usize, t: usize, seed: u64) -> ModelParams<f64> {
        let mut r = rand::rngs::StdRng::seed_from_u64(seed);
        ModelParams::init_base(small(vocab, len), &mut r).unwrap().augment_time(TimeConfig::new(t), &mut r).unwrap()
    }

    fn toy_config(steps: usize) -> TrainConfig {
        let mut c = TrainConfig::desk(4, 1, 3);
        c.epochs = 2;
        c.steps_per_epoch = steps / 2;
        c.batch_size = 8;
        c.warmup_steps = 10;
        c.peak_lr = 1e-2;
        c.refresh_interval = 5;
        c.frozen_ema_decay = 0.5;
        c
    }

    #[test]
    fn pretraining_learns_a_cycle() {
        let corpus = Cycle { vocab: 2, len: 6 };
        let mut r = rand::rngs::StdRng::seed_from_u64(1);
        let init = ModelParams::<f64>::init_base(small(2, 6), &mut r).unwrap();
        let cfg = PretrainConfig { batch_size: 16, peak_lr: 1e-2, ..PretrainConfig::desk(150, 2) };
        let out = pretrain_base(&corpus, init, &cfg, None).unwrap();
        let (causal, infill) = mode_accuracy(&out.live, &corpus, 50, 9).unwrap();
        assert_eq!(causal_interior(&out.live, &corpus), 1.0);
        assert!(causal > 0.85, "causal accuracy {causal}");
        assert!(infill >= causal, "infill {infill} < causal {causal}");
        assert!(out.losses.last().unwrap() < &0.2);
    }

    /// Accuracy at positions after the first (the first token is a coin flip).
    fn causal_interior(p: &ModelParams<f64>, c: &Cycle) -> f64 {
        let mut hits = 0;
        let mut n = 0;
        for e in 0..40 {
            let ex = c.draw(&mut stream(77, e));
            let q = Query { tokens: ex.tokens.clone(), mode: Mode::CausalGen, time: 0.0, positions: (1..c.len).collect() };
            for (i, row) in probabilities(p, &[q]).unwrap().iter().enumerate() {
                let best = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
                hits += usize::from(best as Token == ex.tokens[i + 1]);
                n += 1;
            }
        }
        hits as f64 / n as f64
    }

    #[test]
    fn pretraining_is_deterministic_and_rejects_bad_configs() {
        let corpus = Cycle { vocab: 3, len: 4 };
        let mut r = rand::rngs::StdRng::seed_from_u64(1);
        let init = ModelParams::<f64>::init_base(small(3, 4), &mut r).unwrap();
        let cfg = PretrainConfig { max_masks: 2, ..PretrainConfig::desk(10, 5) };
        let a = pretrain_base(&corpus, init.clone(), &cfg, None).unwrap();
        let b = pretrain_base(&corpus, init.clone(), &cfg, None).unwrap();
        assert!((a.losses.last().unwrap() - b.losses.last().unwrap()).abs() < 1e-9);
        let bad = PretrainConfig { warmup_steps: 10, ..cfg.clone() };
        assert!(pretrain_base(&corpus, init.clone(), &bad, None).is_err());
        let blowup = PretrainConfig { peak_lr: f64::INFINITY, warmup_steps: 1, ..cfg };
        match pretrain_base(&corpus, init, &blowup, None) {
            Err(NetError::NonFinite { step, .. }) => assert!(step >= 1),
            other => panic!("expected a divergence error, got {:?}", other.map(|o| o.losses)),
        }
    }

    #[test]
    fn tabular_toy_loss_halves() {
        let v = Vocabulary::new(3).unwrap();
        let mut r = stream(11, 0);
        let p0 = TabularDistribution::random(4, v, &mut r).unwrap();
        let kernel = TabularDistribution::random(4, v, &mut r).unwrap();
        let corpus = Tabular(p0);
        let cfg = toy_config(200);
        let opts = TrainOptions { kernel: KernelSource::Fixed(&kernel), ..Default::default() };
        let st = train(&corpus, augmented(3, 4, 4, 12), &cfg, opts).unwrap();
        let head: f64 = st.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = st.losses[190..].iter().sum::<f64>() / 10.0;
        assert!(tail < 0.5 * head, "initial {head}, final {tail}");
    }

    #[test]
    fn frozen_copies_change_between_epochs() {
        let corpus = Cycle { vocab: 3, len: 4 };
        let cfg = toy_config(20);
        let p = augmented(3, 4, 4, 13);
        let first = make_frozen(&p).unwrap();
        let st = train(&corpus, p, &cfg, TrainOptions::default()).unwrap();
        assert!(st.frozen.params().max_abs_diff(first.params()) > 1e-6);
    }

    #[test]
    fn frozen_copy_is_independent() {
        let mut p = augmented(3, 4, 4, 14);
        let f = make_frozen(&p).unwrap();
        assert_eq!(f.params(), &p);
        let x = TokenSeq::new(vec![0, 1, 2, 0], Vocabulary::new(3).unwrap()).unwrap();
        let before = f.model().infill(&x, 2, 4).unwrap();
        let mut opt = AdamW::<f64>::new(AdamConfig::default(), &p);
        let g: Vec<Vec<f64>> = p.values.iter().map(|v| vec![1.0; v.len()]).collect();
        opt.step(&mut p, &g, 0.1).unwrap();
        assert!(p.max_abs_diff(f.params()) > 0.05);
        assert_eq!(f.model().infill(&x, 2, 4).unwrap(), before);
        let base = ModelParams::<f64>::init_base(small(3, 4), &mut rand::rngs::StdRng::seed_from_u64(1)).unwrap();
        assert!(make_frozen(&base).is_err());
    }

    #[test]
    fn ema_refresh_closed_form() {
        let p0 = augmented(2, 3, 3, 15);
        let mut f = make_frozen(&p0).unwrap();
        let d = 0.7;
        let lives: Vec<ModelParams<f64>> = (0..5).map(|i| augmented(2, 3, 3, 100 + i)).collect();
        for l in &lives {
            ema_refresh(&mut f, l, d).unwrap();
        }
        let n = lives.len();
        for (idx, tensor) in f.params().values.iter().enumerate() {
            for (j, &v) in tensor.iter().enumerate() {
                let mut expect = d.powi(n as i32) * p0.values[idx][j];
                for (i, l) in lives.iter().enumerate() {
                    expect += (1.0 - d) * d.powi((n - 1 - i) as i32) * l.values[idx][j];
                }
                assert!((v - expect).abs() < 1e-10);
            }
        }
        let keep = f.clone();
        ema_refresh(&mut f, &lives[0], 1.0).unwrap();
        assert_eq!(f, keep);
        ema_refresh(&mut f, &lives[0], 0.0).unwrap();
        assert_eq!(f.params(), &lives[0]);
        assert!(ema_refresh(&mut f, &lives[0], 1.5).is_err());
        let other = augmented(3, 3, 3, 1);
        assert!(ema_refresh(&mut f, &other, 0.5).is_err());
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let corpus = Cycle { vocab: 3, len: 4 };
        let mut cfg = toy_config(12);
        cfg.refresh_interval = 4;
        cfg.grad_accum = 2;
        let dir = tempfile::tempdir().unwrap();
        let p = augmented(3, 4, 4, 16);
        let full = train(&corpus, p.clone(), &cfg, TrainOptions::default()).unwrap();

        let opts = TrainOptions { checkpoint_dir: Some(dir.path().to_path_buf()), stop_after: Some(6), ..Default::default() };
        train(&corpus, p, &cfg, opts).unwrap();
        let mut resumed = TrainState::<f64>::load(&dir.path().join("epoch-1.gldf")).unwrap();
        assert_eq!(resumed.step, 6);
        train_state(&corpus, &mut resumed, TrainOptions::default()).unwrap();
        assert_eq!(resumed.losses.len(), full.losses.len());
        for (a, b) in resumed.losses.iter().zip(&full.losses) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(resumed.live.max_abs_diff(&full.live) < 1e-9);
    }

    #[test]
    fn metrics_are_json_lines() {
        let corpus = Cycle { vocab: 3, len: 4 };
        let cfg = TrainConfig { warmup_steps: 1, ..toy_config(4) };
        let mut buf = Vec::new();
        let opts = TrainOptions { metrics: Some(&mut buf), ..Default::default() };
        train(&corpus, augmented(3, 4, 4, 17), &cfg, opts).unwrap();
        let lines: Vec<Value> = String::from_utf8(buf).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 4);
        for (i, l) in lines.iter().enumerate() {
            assert_eq!(l["step"], i + 1);
            for key in ["loss", "lr", "wallclock_ms"] {
                assert!(l.get(key).is_some());
            }
        }
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let c = TrainConfig::desk(8, 3, 1);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), c);
        let mut v: Value = serde_json::from_str(&text).unwrap();
        v["bogus"] = json!(1);
        assert!(TrainConfig::from_json(&v.to_string()).is_err());
        let mut bad = c.clone();
        bad.warmup_steps = bad.total_steps();
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::paper_scale(0).grad_accum, 4);
        assert!(TrainConfig::paper_scale(0).validate().is_ok());
    }

    #[test]
    fn frozen_positions_are_never_noised_or_targeted() {
        struct Clued;
        impl Corpus for Clued {
            fn vocab(&self) -> usize {
                3
            }
            fn seq_len(&self) -> usize {
                5
            }
            fn draw(&self, rng: &mut StreamRng) -> Example {
                Example { tokens: (0..5).map(|_| rng.gen_range(0..3)).collect(), frozen: vec![1, 3] }
            }
        }
        let mut cfg = TrainConfig::desk(5, 2, 4);
        cfg.window = 3;
        cfg.snapshots_per_sample = 10;
        let kernel = TabularDistribution::uniform(5, Vocabulary::new(3).unwrap()).unwrap();
        let sched = cfg.schedule().unwrap();
        for micro in 0..5 {
            let n = noise_micro_batch(&Clued, &kernel, None, &sched, &cfg, micro).unwrap();
            for s in &n.snaps {
                assert!(s.coordinate != 1 && s.coordinate != 3);
                assert!(!s.window.contains(&1) && !s.window.contains(&3));
                assert!(s.window.len() <= 2);
            }
            assert!(!n.snaps.is_empty());
        }
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![vec![3.0f64, 0.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 0.0), 5.0);
        assert_eq!(g, vec![vec![3.0, 0.0], vec![4.0]]);
        clip_grad_norm(&mut g, 1.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        clip_grad_norm(&mut g, 2.0);
        assert!((g[1][0] - 0.8).abs() < 1e-15);
    }
}
