//! `sam`: train, evaluate, gradient-check and benchmark memory models.
//!
//! Exit codes: 0 success, 1 the task itself failed, 2 bad flags or config.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sam_core::alloc::CountingAlloc;
use sam_core::ann::{AnnConfig, Backend};
use sam_core::bench::{fit_exponent, run_bench, BenchConfig, CSV_HEADER};
use sam_core::la::DenseMatrix;
use sam_core::model::{Model, ModelConfig, ModelKind};
use sam_core::snapshot::Snapshot;
use sam_core::tasks::{generate, TaskConfig, TaskKind};
use sam_core::training::{evaluate_levels, gradient_check_with, load_model, Metrics, Stencil, TrainConfig, Trainer};
use sam_core::Error;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

const CHECKPOINT: &str = "checkpoint.samsnap";
const METRICS: &str = "metrics.ndjson";

#[derive(Parser)]
#[command(name = "sam", version, about = "Sparse access memory models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing checkpoints and a metrics stream.
    Train(TrainArgs),
    /// Bit error of a checkpoint over a sweep of levels, as CSV.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Time and space sweep over memory size, as CSV.
    Bench(BenchArgs),
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = ModelKind::ALL.iter().map(|m| m.name()).collect();
        format!("unknown model `{s}` (one of {})", names.join(", "))
    })
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    TaskKind::parse(s).ok_or_else(|| format!("unknown task `{s}` (copy, recall, sort)"))
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    match s {
        "exact" => Ok(Backend::Exact),
        "kd-forest" | "kd" => Ok(Backend::KdForest),
        "lsh" => Ok(Backend::Lsh),
        _ => Err(format!("unknown index `{s}` (exact, kd-forest, lsh)")),
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskKind>,
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelKind>,
    /// Key = value training config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the minibatch budget.
    #[arg(long)]
    minibatches: Option<u64>,
    /// Output directory for the checkpoint and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    /// Suppress per-minibatch progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the task the checkpoint was trained on.
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskKind>,
    /// Comma-separated levels.
    #[arg(long, value_delimiter = ',', required = true)]
    levels: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_parser = parse_model, default_value = "sam-exact")]
    model: ModelKind,
    /// Memory slots.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Episode length in steps.
    #[arg(long, default_value_t = 5)]
    t: usize,
    #[arg(long, default_value_t = 8)]
    word_size: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Use the O(ε⁴) five-point stencil instead of plain central differences.
    #[arg(long)]
    five_point: bool,
    #[arg(long, default_value_t = 1)]
    instances: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_model, default_value = "sam-ann,sam-exact,dam,ntm-dense")]
    models: Vec<ModelKind>,
    /// Comma-separated slot counts; overrides the power-of-two range.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    min_log2: u32,
    #[arg(long, default_value_t = 17)]
    max_log2: u32,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    minibatch: usize,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 1 << 14)]
    dense_ceiling: usize,
    /// Skip cells estimated to need more heap than this many MiB.
    #[arg(long, default_value_t = 2048)]
    memory_budget_mib: usize,
    #[arg(long, default_value_t = 100)]
    hidden: usize,
    #[arg(long, default_value_t = 32)]
    word_size: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Index used by sam-ann and sdnc.
    #[arg(long, value_parser = parse_backend, default_value = "kd-forest")]
    ann: Backend,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure of a command, mapped onto an exit code.
enum Failure {
    Usage(String),
    Task(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Task(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Task(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Task(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Keeps the first `keep` lines of the metrics file, dropping records
/// written after the checkpoint.
fn truncate_metrics(path: &Path, keep: u64) -> io::Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(File::open(path)?).lines().take(keep as usize) {
        kept.extend_from_slice(line?.as_bytes());
        kept.push(b'\n');
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &kept)?;
    std::fs::rename(tmp, path)
}

fn train(a: TrainArgs) -> CmdResult {
    std::fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join(CHECKPOINT);
    let metrics_path = a.out.join(METRICS);
    let mut trainer = if a.resume {
        if !ckpt.exists() {
            return Err(Failure::Usage(format!("no checkpoint at {}", ckpt.display())));
        }
        let t = Trainer::from_snapshot(&Snapshot::load(&ckpt)?)?;
        truncate_metrics(&metrics_path, t.minibatches_done())?;
        t
    } else {
        let mut cfg = match &a.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(t) = a.task {
            cfg.task = t;
        }
        if let Some(m) = a.model {
            cfg.model = m;
        }
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        std::fs::write(&metrics_path, b"")?;
        Trainer::new(cfg)?
    };
    if let Some(n) = a.minibatches {
        trainer.set_minibatches(n);
    }
    let mut metrics = OpenOptions::new().create(true).append(true).open(&metrics_path)?;
    let quiet = a.quiet;
    let mut sink = |m: &Metrics| -> sam_core::Result<()> {
        let mut line = serde_json::to_string(m).map_err(|e| Error::Format(e.to_string()))?;
        line.push('\n');
        // one write per record so readers never see half a line
        metrics.write_all(line.as_bytes())?;
        if !quiet && m.minibatch.is_multiple_of(100) {
            eprintln!(
                "minibatch {} level {} h {} loss {:.4} bits/step",
                m.minibatch, m.level, m.h, m.loss
            );
        }
        Ok(())
    };
    let mut save = |t: &Trainer| -> sam_core::Result<()> { t.to_snapshot()?.save(&ckpt) };
    let reason = trainer.run(&mut sink, &mut save)?;
    println!(
        "{} minibatches, stopped: {:?}, recent loss {} bits/step",
        trainer.minibatches_done(),
        reason,
        trainer.recent_loss().map_or("n/a".into(), |l| format!("{l:.4}"))
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let snap = Snapshot::load(&a.checkpoint)?;
    let (model, params, cfg) = load_model(&snap)?;
    let mut template = cfg.task_config(1, a.seed);
    if let Some(t) = a.task {
        template.task = t;
    }
    if a.episodes == 0 {
        return Err(Failure::Usage("--episodes must be at least 1".into()));
    }
    if let Some(&bad) = a.levels.iter().find(|&&l| l == 0) {
        return Err(Failure::Usage(format!(
            "level {bad} has no answer steps; levels start at 1"
        )));
    }
    let rows = evaluate_levels(&model, &params, &template, &a.levels, a.episodes, a.seed)?;
    let mut out = io::stdout().lock();
    writeln!(out, "level,mean_bit_error,error_per_bit,episodes")?;
    for r in rows {
        writeln!(out, "{},{:.6},{:.6},{}", r.level, r.mean_bit_error, r.error_per_bit, r.episodes)?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    if a.t < 3 || a.t.is_multiple_of(2) {
        return Err(Failure::Usage("--t must be odd and at least 3 (a copy episode)".into()));
    }
    let cfg = ModelConfig {
        kind: a.model,
        input_size: 9,
        output_size: 8,
        hidden: a.hidden,
        slots: a.n,
        word_size: a.word_size,
        heads: a.heads,
        k: a.k,
        k_l: a.k.min(a.n),
        ann: AnnConfig::kd_forest(4, 32),
        ..ModelConfig::default()
    };
    let model = Model::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut all_passed = true;
    println!("instance,checked,skipped,max_rel_error,passed");
    for i in 0..a.instances {
        let params: Vec<f64> = (0..model.num_params()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mem = model.config().kind.has_memory().then(|| {
            let rows = (0..a.n * a.word_size).map(|_| rng.random_range(-1.0..1.0)).collect();
            DenseMatrix::from_vec(a.n, a.word_size, rows)
        });
        let mem = mem.transpose()?;
        let ep = generate(&TaskConfig::new(TaskKind::Copy, (a.t - 1) / 2, rng.random()))?;
        let stencil = if a.five_point { Stencil::FivePoint } else { Stencil::Central };
        let r = gradient_check_with(&model, &params, mem.as_ref(), &ep, a.eps, a.tolerance, stencil)?;
        let checked = r.params.checked + r.memory.as_ref().map_or(0, |m| m.checked);
        let skipped = r.params.skipped + r.memory.as_ref().map_or(0, |m| m.skipped);
        println!("{i},{checked},{skipped},{:.3e},{}", r.max_rel_error(), r.passed());
        all_passed &= r.passed();
    }
    if all_passed {
        Ok(())
    } else {
        Err(Failure::Task(format!("gradient check failed at tolerance {}", a.tolerance)))
    }
}

fn bench(a: BenchArgs) -> CmdResult {
    let sizes = if a.sizes.is_empty() {
        if a.min_log2 > a.max_log2 || a.max_log2 > 40 {
            return Err(Failure::Usage("need min-log2 ≤ max-log2 ≤ 40".into()));
        }
        (a.min_log2..=a.max_log2).map(|p| 1usize << p).collect()
    } else {
        a.sizes
    };
    let ann = match a.ann {
        Backend::Exact => AnnConfig::exact(),
        Backend::KdForest => AnnConfig::kd_forest(4, 32),
        Backend::Lsh => AnnConfig::lsh(8, 16),
    };
    let cfg = BenchConfig {
        models: a.models,
        sizes,
        steps: a.steps,
        minibatch: a.minibatch,
        trials: a.trials,
        warmup: a.warmup,
        dense_ceiling: a.dense_ceiling,
        memory_budget: a.memory_budget_mib << 20,
        hidden: a.hidden,
        word_size: a.word_size,
        heads: a.heads,
        k: a.k,
        ann,
        seed: a.seed,
    };
    cfg.validate()?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    writeln!(out, "{CSV_HEADER}")?;
    let mut io_err = None;
    let rows = run_bench(&cfg, &mut |r| {
        if let Err(e) = writeln!(out, "{}", r.csv_row()).and_then(|_| out.flush()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    for &m in &cfg.models {
        if let Some((slope, points)) = fit_exponent(&rows, m) {
            eprintln!("{m}: log-log time exponent {slope:.3} over {points} sizes");
        }
    }
    Ok(())
}
