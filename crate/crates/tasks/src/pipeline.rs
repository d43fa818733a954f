//! Task corpora and the train-once, fine-tune-per-N recipe.

use std::io::Write;
use std::path::{Path, PathBuf};

use glauber_core::StreamRng;
use glauber_net::{
    load_trained, pretrain_base, train, Corpus, Example, KernelSource, ModelParams, NetBackend, NetConfig, PretrainConfig, TimeConfig, TrainConfig, TrainOptions, TrainState,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TaskError};
use crate::hmm::HmmCorpus;
use crate::sudoku::{encode_solved, gen_minimal_sudoku, gen_sudoku};
use crate::zebra::{gen_zebra_fitting, ZebraCodec};

/// Scalar type of every trained model in this crate.
pub type Params = ModelParams<f64>;

/// Seeded stream of uniquely solvable Sudoku instances with clue counts drawn
/// from `min_clues..=max_clues`; counts at or below `n` give a minimal puzzle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SudokuCorpus {
    pub n: usize,
    pub min_clues: usize,
    pub max_clues: usize,
}

impl SudokuCorpus {
    pub fn desk() -> Self {
        Self { n: 4, min_clues: 4, max_clues: 8 }
    }

    pub fn instance(&self, seed: u64) -> crate::sudoku::SudokuInstance {
        let mut r = glauber_core::stream(seed, 7);
        for attempt in 0..8u64 {
            let c = r.gen_range(self.min_clues..=self.max_clues);
            let s = seed.wrapping_mul(31).wrapping_add(attempt);
            let got = if c <= self.n { gen_minimal_sudoku(self.n, s) } else { gen_sudoku(self.n, c, s) };
            if let Ok(inst) = got {
                return inst;
            }
        }
        gen_minimal_sudoku(self.n, seed).expect("minimal generation cannot fail for a valid side")
    }
}

impl Corpus for SudokuCorpus {
    fn vocab(&self) -> usize {
        self.n
    }

    fn seq_len(&self) -> usize {
        self.n * self.n
    }

    fn draw(&self, rng: &mut StreamRng) -> Example {
        let enc = encode_solved(&self.instance(rng.gen()));
        Example { tokens: enc.tokens, frozen: enc.frozen }
    }
}

/// Seeded stream of uniquely solvable riddles in one codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZebraCorpus {
    pub codec: ZebraCodec,
}

impl ZebraCorpus {
    pub fn desk() -> Self {
        Self { codec: ZebraCodec { m: 3, categories: 2, max_clues: 6 } }
    }
}

impl Corpus for ZebraCorpus {
    fn vocab(&self) -> usize {
        self.codec.vocab()
    }

    fn seq_len(&self) -> usize {
        self.codec.seq_len()
    }

    fn draw(&self, rng: &mut StreamRng) -> Example {
        let seed: u64 = rng.gen();
        let inst = gen_zebra_fitting(&self.codec, seed).expect("riddle generation");
        let (tokens, frozen) = self.codec.encode_solved(&inst).expect("fits the codec");
        Example { tokens, frozen }
    }
}

/// Network shape and both training stages for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub net: NetConfig,
    pub pretrain: PretrainConfig,
    /// Fine-tuning template; `rounds` is overridden per model.
    pub finetune: TrainConfig,
    pub use_ema: bool,
}

impl Recipe {
    /// Small defaults sized for a single CPU.
    pub fn desk(vocab: usize, seq_len: usize, seed: u64) -> Self {
        let mut net = NetConfig::new(vocab, seq_len);
        net.d_model = 32;
        net.n_heads = 2;
        net.d_ff = 64;
        net.n_layers = 2;
        let mut finetune = TrainConfig::desk(seq_len, 1, seed ^ 0xF1);
        finetune.epochs = 1;
        finetune.steps_per_epoch = 300;
        finetune.warmup_steps = 20;
        finetune.snapshots_per_sample = 4;
        finetune.batch_size = 16;
        finetune.param_ema_decay = 0.99;
        finetune.grad_clip = 1.0;
        let mut pretrain = PretrainConfig::desk(1500, seed);
        pretrain.max_masks = (seq_len / 2).max(1);
        Self { net, pretrain, finetune, use_ema: true }
    }

    /// Sets the step count with a tenth of it as warmup.
    pub fn set_pretrain_steps(&mut self, steps: usize) {
        self.pretrain.steps = steps;
        self.pretrain.warmup_steps = (steps / 10).max(1).min(steps.saturating_sub(1));
    }

    pub fn finetune_config(&self, rounds: usize) -> TrainConfig {
        let mut c = self.finetune.clone();
        c.rounds = rounds;
        c
    }
}

/// A base network and its fine-tuned time-conditioned variants.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub base: Params,
    /// `(N, params)` pairs.
    pub tuned: Vec<(usize, Params)>,
}

impl ModelSet {
    pub fn get(&self, rounds: usize) -> Option<&Params> {
        self.tuned.iter().find(|(n, _)| *n == rounds).map(|(_, p)| p)
    }
}

pub fn pretrain(corpus: &dyn Corpus, recipe: &Recipe, metrics: Option<&mut dyn Write>) -> Result<Params> {
    let mut r = glauber_core::stream(recipe.pretrain.seed, 0x1417);
    let init = Params::init_base(recipe.net.clone(), &mut r)?;
    let out = pretrain_base(corpus, init, &recipe.pretrain, metrics)?;
    Ok(if recipe.use_ema { out.ema } else { out.live })
}

/// Adds time conditioning for `N = rounds` and trains on the chain.
pub fn finetune(corpus: &dyn Corpus, base: &Params, recipe: &Recipe, rounds: usize, metrics: Option<&mut dyn Write>) -> Result<Params> {
    let state = finetune_with(corpus, base, &recipe.finetune_config(rounds), None, metrics)?;
    Ok(state.inference_params(recipe.use_ema).clone())
}

/// [`finetune`] from an explicit config, returning the full training state.
pub fn finetune_with(
    corpus: &dyn Corpus,
    base: &Params,
    cfg: &TrainConfig,
    checkpoint_dir: Option<PathBuf>,
    metrics: Option<&mut dyn Write>,
) -> Result<TrainState<f64>> {
    let mut r = glauber_core::stream(cfg.seed, 0x7143 + cfg.rounds as u64);
    let params = base.augment_time(TimeConfig::new(cfg.t_max()), &mut r)?;
    let opts = TrainOptions { kernel: KernelSource::Frozen, metrics, checkpoint_dir, ..TrainOptions::default() };
    Ok(train(corpus, params, cfg, opts)?)
}

pub fn build_models(corpus: &dyn Corpus, recipe: &Recipe, rounds: &[usize]) -> Result<ModelSet> {
    if corpus.vocab() != recipe.net.vocab || corpus.seq_len() > recipe.net.max_len {
        return Err(TaskError::Invalid("recipe does not fit the corpus".into()));
    }
    let base = pretrain(corpus, recipe, None)?;
    let tuned = rounds.iter().map(|&n| finetune(corpus, &base, recipe, n, None).map(|p| (n, p))).collect::<Result<_>>()?;
    Ok(ModelSet { base, tuned })
}

/// Serializable task description shared by the CLI subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Hmm(HmmCorpus),
    Sudoku(SudokuCorpus),
    Zebra(ZebraCorpus),
}

impl TaskSpec {
    pub fn corpus(&self) -> &dyn Corpus {
        match self {
            TaskSpec::Hmm(c) => c,
            TaskSpec::Sudoku(c) => c,
            TaskSpec::Zebra(c) => c,
        }
    }

    /// Refinement window used for this task unless overridden.
    pub fn default_window(&self) -> usize {
        match self {
            TaskSpec::Sudoku(_) => 6,
            _ => 1,
        }
    }

    /// Desk recipe for the task.
    pub fn recipe(&self, seed: u64) -> Recipe {
        let c = self.corpus();
        let mut r = Recipe::desk(c.vocab(), c.seq_len(), seed);
        // puzzle cells have fixed roles, so absolute positions help
        r.net.abs_pos = !matches!(self, TaskSpec::Hmm(_));
        r.finetune.window = self.default_window();
        match self {
            TaskSpec::Hmm(_) => r.finetune.steps_per_epoch = 600,
            TaskSpec::Sudoku(_) => r.set_pretrain_steps(3000),
            TaskSpec::Zebra(_) => {
                r.net.d_model = 64;
                r.net.n_heads = 4;
                r.net.d_ff = 128;
                r.set_pretrain_steps(6000);
                r.finetune.causal_weight = 1.0;
            }
        }
        r
    }
}

/// Weights read from either a base or a fine-tuning checkpoint.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub params: Params,
    /// Present for fine-tuned checkpoints.
    pub train: Option<TrainConfig>,
}

impl LoadedModel {
    /// Base checkpoints carry no `train` key in their metadata.
    pub fn load(path: &Path, use_ema: bool) -> Result<Self> {
        let (meta, _) = glauber_net::checkpoint::read_file::<f64>(path)?;
        if meta.get("train").is_some() {
            let (params, cfg) = load_trained(path, use_ema)?;
            Ok(Self { params, train: Some(cfg) })
        } else {
            let (params, _) = glauber_net::checkpoint::load_params(path)?;
            Ok(Self { params, train: None })
        }
    }

    pub fn rounds(&self) -> Option<usize> {
        self.train.as_ref().map(|c| c.rounds)
    }

    pub fn schedule_seed(&self) -> Option<u64> {
        self.train.as_ref().map(|c| c.schedule_seed)
    }

    /// Time-conditioned backend when available, else a causal-only one.
    pub fn backend(&self, len: usize) -> Result<NetBackend<'_, f64>> {
        Ok(match &self.params.time {
            Some(_) => NetBackend::new(&self.params)?,
            None => NetBackend::untimed(&self.params, len),
        })
    }
}

pub fn save_base(path: &Path, params: &Params, recipe: &Recipe) -> Result<()> {
    glauber_net::checkpoint::save_params(path, params, serde_json::json!({ "pretrain": recipe.pretrain }))?;
    Ok(())
}
