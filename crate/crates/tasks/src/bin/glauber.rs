use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use glauber_core::{stream, Token, UpdateSchedule};
use glauber_net::{causal_fill, generate, GenerationSpec, TrainConfig};
use glauber_tasks::eval::{bon_eval, eval_distribution, eval_puzzles, sudoku_puzzles, zebra_puzzles, Decoder, Puzzle, Truth};
use glauber_tasks::hmm::HmmCorpus;
use glauber_tasks::pipeline::{finetune_with, pretrain, save_base, LoadedModel, SudokuCorpus, TaskSpec, ZebraCorpus};
use glauber_tasks::sudoku::gen_sudoku;
use glauber_tasks::zebra::{gen_zebra_fitting, ZebraCodec};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "glauber", about = "Train, sample and evaluate reverse Glauber diffusion models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a task description (HMM tables or a puzzle stream) as JSON.
    MakeTask(MakeTaskArgs),
    /// Train the untimed dual-mode base model.
    Pretrain(PretrainArgs),
    /// Fine-tune a base model on the Glauber chain.
    Train(TrainArgs),
    /// Generate sequences from a checkpoint.
    Sample(SampleArgs),
    /// Run the exact residual and round-trip checks.
    OracleVerify(OracleArgs),
    /// Write held-out puzzle instances.
    PuzzleGen(PuzzleGenArgs),
    /// Solve rate of a checkpoint on a puzzle file.
    PuzzleEval(PuzzleEvalArgs),
    /// Exact-likelihood quality of unconditional samples.
    EvalDist(EvalDistArgs),
    /// Best-of-N at matched model invocations.
    BonEval(BonEvalArgs),
}

#[derive(Args, Serialize)]
struct MakeTaskArgs {
    /// hmm, sudoku or zebra
    kind: String,
    #[arg(long, default_value_t = 3)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    vocab: usize,
    #[arg(long, default_value_t = 8)]
    length: usize,
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    min_clues: usize,
    #[arg(long, default_value_t = 8)]
    max_clues: usize,
    #[arg(long, default_value_t = 3)]
    m: usize,
    #[arg(long, default_value_t = 2)]
    categories: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct PretrainArgs {
    #[arg(long)]
    task: PathBuf,
    /// Overrides the desk recipe's step count.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    base: PathBuf,
    /// JSON file with exactly the training-config keys.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reverse rounds; must match the checkpoint's N. 0 gives causal fill only.
    #[arg(long)]
    n_rounds: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON array of prefix tokens, frozen at the start.
    #[arg(long)]
    prefix_file: Option<PathBuf>,
    /// JSON object {"tokens": [...], "frozen": [...]}.
    #[arg(long)]
    frozen_json: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    window: usize,
    #[arg(long)]
    top_p: Option<f64>,
    /// Use the live weights instead of the parameter average.
    #[arg(long)]
    live: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct PuzzleGenArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long, default_value_t = 500)]
    count: usize,
    #[arg(long, default_value_t = 1_000_000)]
    seed: u64,
    /// Fixed Sudoku clue count instead of the task's range.
    #[arg(long)]
    clues: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct PuzzleEvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    puzzles: PathBuf,
    /// Causal fill only, skipping refinement.
    #[arg(long)]
    causal_only: bool,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    live: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalDistArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// HMM task file providing the exact likelihood.
    #[arg(long)]
    task: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    causal_only: bool,
    #[arg(long)]
    live: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct BonEvalArgs {
    /// Base checkpoint sampled causally.
    #[arg(long)]
    ar: PathBuf,
    /// Fine-tuned N = 1 checkpoint.
    #[arg(long)]
    glauber: PathBuf,
    #[arg(long)]
    puzzles: PathBuf,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    live: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct PuzzleFile {
    task: TaskSpec,
    seed: u64,
    puzzles: Vec<Puzzle>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FrozenSpec {
    tokens: Vec<Token>,
    frozen: Vec<usize>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        writeln!(w, "{}", r.join(","))?;
    }
    Ok(w.flush()?)
}

fn report(command: &str, args: &impl Serialize, result: impl Serialize) -> Result<Value> {
    Ok(json!({ "command": command, "args": serde_json::to_value(args)?, "result": serde_json::to_value(result)? }))
}

fn open_metrics(path: &Option<PathBuf>) -> Result<Option<BufWriter<File>>> {
    path.as_ref().map(|p| File::create(p).map(BufWriter::new)).transpose().map_err(Into::into)
}

fn make_task(a: &MakeTaskArgs) -> Result<()> {
    let spec = match a.kind.as_str() {
        "hmm" => TaskSpec::Hmm(HmmCorpus::random(a.hidden, a.vocab, a.length, a.alpha, a.seed)?),
        "sudoku" => TaskSpec::Sudoku(SudokuCorpus { n: a.n, min_clues: a.min_clues, max_clues: a.max_clues }),
        "zebra" => TaskSpec::Zebra(ZebraCorpus { codec: ZebraCodec { m: a.m, categories: a.categories, max_clues: a.max_clues } }),
        k => bail!("unknown task kind {k}; expected hmm, sudoku or zebra"),
    };
    write_json(&a.out, &spec)
}

fn run_pretrain(a: &PretrainArgs) -> Result<()> {
    let task: TaskSpec = read_json(&a.task)?;
    let mut recipe = task.recipe(a.seed);
    if let Some(s) = a.steps {
        recipe.set_pretrain_steps(s);
    }
    let mut m = open_metrics(&a.metrics)?;
    let params = pretrain(task.corpus(), &recipe, m.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(w) = m.as_mut() {
        w.flush()?;
    }
    save_base(&a.out, &params, &recipe)?;
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let task: TaskSpec = read_json(&a.task)?;
    let cfg = TrainConfig::from_json(&fs::read_to_string(&a.config)?)?;
    let base = LoadedModel::load(&a.base, true)?;
    if base.params.time.is_some() {
        bail!("{} is already time-conditioned; pass a base checkpoint", a.base.display());
    }
    let mut m = open_metrics(&a.metrics)?;
    let state = finetune_with(task.corpus(), &base.params, &cfg, Some(a.out_dir.clone()), m.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(w) = m.as_mut() {
        w.flush()?;
    }
    state.save(&a.out_dir.join("final.gldf"))?;
    Ok(())
}

fn run_sample(a: &SampleArgs) -> Result<()> {
    let model = LoadedModel::load(&a.checkpoint, !a.live)?;
    let len = a.length.unwrap_or(model.params.config.max_len);
    if len == 0 || len > model.params.config.max_len {
        bail!("length {len} outside 1..={}", model.params.config.max_len);
    }
    let rounds = a.n_rounds.or(model.rounds()).unwrap_or(0);
    if rounds > 0 && model.rounds() != Some(rounds) {
        bail!("checkpoint was trained for N = {:?}, not {rounds}", model.rounds());
    }
    let (mut init, mut frozen) = (vec![0 as Token; len], Vec::new());
    if let Some(p) = &a.frozen_json {
        let f: FrozenSpec = read_json(p)?;
        if f.tokens.len() != len {
            bail!("frozen spec has {} tokens, expected {len}", f.tokens.len());
        }
        init = f.tokens;
        frozen = f.frozen;
    }
    if let Some(p) = &a.prefix_file {
        let prefix: Vec<Token> = read_json(p)?;
        if prefix.len() > len {
            bail!("prefix of {} tokens exceeds length {len}", prefix.len());
        }
        init[..prefix.len()].copy_from_slice(&prefix);
        frozen.extend(0..prefix.len());
    }
    let backend = model.backend(len)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for i in 0..a.count {
        let seed = glauber_core::rng::derive_seed(a.seed, i as u64);
        let mut rng = stream(seed, 0);
        let rep = if rounds == 0 {
            causal_fill(&backend, &[init.clone()], &frozen, a.top_p, std::slice::from_mut(&mut rng))?.remove(0)
        } else {
            let spec = GenerationSpec {
                schedule: UpdateSchedule::build(len, rounds, model.schedule_seed().unwrap_or(0))?,
                frozen: frozen.clone(),
                window: a.window,
                top_p: a.top_p,
            };
            generate(&backend, &init, &spec, &mut rng)?
        };
        writeln!(out, "{}", json!({ "tokens": rep.output, "invocations": rep.invocations, "seed": seed }))?;
    }
    Ok(out.flush()?)
}

fn run_oracle(a: &OracleArgs) -> Result<bool> {
    let rep = glauber_core::oracle::verify::run_suite(a.seed)?;
    let v = report("oracle-verify", a, &rep)?;
    match &a.out {
        Some(p) => write_json(p, &v)?,
        None => println!("{}", serde_json::to_string_pretty(&v)?),
    }
    Ok(rep.passed)
}

fn puzzle_gen(a: &PuzzleGenArgs) -> Result<()> {
    let task: TaskSpec = read_json(&a.task)?;
    let seeds = (0..a.count as u64).map(|i| a.seed.wrapping_add(i));
    let puzzles = match &task {
        TaskSpec::Sudoku(c) => {
            let inst = seeds.map(|s| Ok(match a.clues { Some(k) => gen_sudoku(c.n, k, s)?, None => c.instance(s) })).collect::<Result<Vec<_>>>()?;
            sudoku_puzzles(inst)
        }
        TaskSpec::Zebra(z) => zebra_puzzles(z.codec, seeds.map(|s| gen_zebra_fitting(&z.codec, s)).collect::<Result<_, _>>()?),
        TaskSpec::Hmm(_) => bail!("puzzle-gen needs a sudoku or zebra task"),
    };
    write_json(&a.out, &PuzzleFile { task, seed: a.seed, puzzles })
}

fn decoder_for(model: &LoadedModel, causal_only: bool, window: usize) -> Result<Decoder> {
    match (causal_only, model.rounds()) {
        (true, _) => Ok(Decoder::Causal),
        (false, Some(rounds)) => Ok(Decoder::Glauber { rounds, schedule_seed: model.schedule_seed().unwrap_or(0), window }),
        (false, None) => bail!("a base checkpoint only supports --causal-only"),
    }
}

fn puzzle_eval(a: &PuzzleEvalArgs) -> Result<()> {
    let file: PuzzleFile = read_json(&a.puzzles)?;
    let model = LoadedModel::load(&a.checkpoint, !a.live)?;
    let len = file.task.corpus().seq_len();
    let decoder = decoder_for(&model, a.causal_only, a.window.unwrap_or(file.task.default_window()))?;
    let rep = eval_puzzles(&model.backend(len)?, &file.puzzles, decoder, a.seed)?;
    if let Some(p) = &a.csv {
        let solved = rep.records.iter().filter(|r| r.solved).count();
        write_csv(p, &["decoder", "count", "solved", "accuracy", "se"], &[vec![
            rep.decoder.label(),
            rep.count.to_string(),
            solved.to_string(),
            format!("{:.6}", rep.accuracy),
            format!("{:.6}", rep.se),
        ]])?;
    }
    write_json(&a.out, &report("puzzle-eval", a, &rep)?)
}

fn eval_dist(a: &EvalDistArgs) -> Result<()> {
    let task: TaskSpec = read_json(&a.task)?;
    let TaskSpec::Hmm(hmm) = &task else { bail!("eval-dist needs an hmm task") };
    let model = LoadedModel::load(&a.checkpoint, !a.live)?;
    let decoder = decoder_for(&model, a.causal_only, 1)?;
    let rep = eval_distribution(&model.backend(hmm.len)?, &Truth::Hmm(hmm), decoder, a.count, a.seed)?;
    if let Some(p) = &a.csv {
        write_csv(p, &["count", "mean_nll", "nll_se"], &[vec![rep.count.to_string(), format!("{:.6}", rep.mean_nll), format!("{:.6}", rep.nll_se)]])?;
    }
    write_json(&a.out, &report("eval-dist", a, json!({ "decoder": decoder, "report": rep }))?)
}

fn run_bon(a: &BonEvalArgs) -> Result<()> {
    let file: PuzzleFile = read_json(&a.puzzles)?;
    let ar = LoadedModel::load(&a.ar, !a.live)?;
    let gl = LoadedModel::load(&a.glauber, !a.live)?;
    if gl.rounds() != Some(1) {
        bail!("the Glauber side must be an N = 1 checkpoint");
    }
    let len = file.task.corpus().seq_len();
    let window = a.window.unwrap_or(file.task.default_window());
    let rep = bon_eval(&ar.backend(len)?, &gl.backend(len)?, &file.puzzles, a.k, gl.schedule_seed().unwrap_or(0), window, a.seed)?;
    if let Some(p) = &a.csv {
        let rows = vec![
            vec!["ar".into(), (2 * a.k).to_string(), format!("{:.6}", rep.ar_accuracy), format!("{:.6}", rep.ar_se), rep.ledger.ar_invocations.to_string()],
            vec![
                "glauber".into(),
                a.k.to_string(),
                format!("{:.6}", rep.glauber_accuracy),
                format!("{:.6}", rep.glauber_se),
                rep.ledger.glauber_invocations.to_string(),
            ],
        ];
        write_csv(p, &["method", "candidates", "accuracy", "se", "invocations"], &rows)?;
    }
    write_json(&a.out, &report("bon-eval", a, &rep)?)
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::MakeTask(a) => make_task(&a),
        Cmd::Pretrain(a) => run_pretrain(&a),
        Cmd::Train(a) => run_train(&a),
        Cmd::Sample(a) => run_sample(&a),
        Cmd::OracleVerify(a) => {
            if !run_oracle(&a)? {
                eprintln!("oracle-verify: at least one check failed");
                std::process::exit(1);
            }
            Ok(())
        }
        Cmd::PuzzleGen(a) => puzzle_gen(&a),
        Cmd::PuzzleEval(a) => puzzle_eval(&a),
        Cmd::EvalDist(a) => eval_dist(&a),
        Cmd::BonEval(a) => run_bon(&a),
    }
}
