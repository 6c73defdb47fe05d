use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use serialflow::config::{Ablation, RunConfig};
use serialflow::diagnostics::{denoiser_gradcheck, gsa_scaling, primitive_gradchecks};
use serialflow::evaluation::{make_split, Split};
use serialflow::flow::{write_predictions, FlowModel};
use serialflow::numerics::Checkpoint;
use serialflow::pipeline::{eval_panel, infer_phase, pretrain_phase, score, train_phase, SplitSections};
use serialflow::priors::{PriorKind, PriorNet};
use serialflow::spatial_model::{read_matrix, SlideStack};
use serialflow::synth_data::generate_stack;
use serialflow::{Error, Result};

const PRIOR_FILE: &str = "prior.ckpt";
const MODEL_FILE: &str = "model.ckpt";
const CONFIG_FILE: &str = "config.txt";
const SPLIT_FILE: &str = "split.json";
const MANIFEST_FILE: &str = "manifest.jsonl";

/// Gate for the gradient audit.
const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Probed coordinates per parameter tensor in the backbone audit.
const GRADCHECK_ENTRIES: usize = 4;

#[derive(Parser, Debug)]
#[command(name = "serialflow", version, about = "Cross-section flow matching for serial spatial transcriptomics stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (`key = value` lines or a flat JSON object).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set control.grid=32`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Stack directory.
    #[arg(long, global = true)]
    stack: Option<PathBuf>,
    /// Checkpoint directory (or prior checkpoint file for `train`).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Directory with `pred_z<k>.bin` files (for `eval`).
    #[arg(long, global = true)]
    pred: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed; required by every command that draws random numbers.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Sections are processed sequentially; values above 1
    /// are accepted and recorded.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[arg(long, global = true, value_parser = ["learned-zinb", "fixed-zinb", "spatial-empirical"])]
    prior: Option<String>,
    #[arg(long, global = true, value_parser = ["even", "single"])]
    split: Option<String>,
    #[arg(long, global = true, value_parser = ["vanilla", "prior", "prior+control", "full"])]
    ablation: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate a synthetic stack.
    Gen,
    /// Fit and freeze the learned start distribution.
    PretrainPrior,
    /// Train the flow model.
    Train,
    /// Impute held-out sections.
    Infer,
    /// Score predictions against ground truth.
    Eval,
    /// Finite-difference audit of primitives and the backbone.
    Gradcheck,
    /// Time the global-context block against dense attention.
    BenchGsa,
    /// Assign sections to train, validation and test.
    Split,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::PretrainPrior => "pretrain-prior",
            Command::Train => "train",
            Command::Infer => "infer",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
            Command::BenchGsa => "bench-gsa",
            Command::Split => "split",
        }
    }

    fn needs_seed(self) -> bool {
        self != Command::Eval
    }
}

struct Ctx {
    cli: Cli,
    cfg: RunConfig,
    seed: u64,
    started: Instant,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, &cli.checkpoint) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(dir)) if dir.join(CONFIG_FILE).is_file() => RunConfig::load(&dir.join(CONFIG_FILE))?,
        _ => RunConfig::default(),
    };
    let mut pairs = Vec::new();
    for s in &cli.set {
        pairs.push(RunConfig::parse_assignment(s)?);
    }
    if let Some(p) = &cli.prior {
        pairs.push(("run.prior", Value::from(p.as_str())));
    }
    if let Some(s) = &cli.split {
        let kind = if s == "even" { "even-slice" } else { "single-label" };
        pairs.push(("run.split", Value::from(kind)));
    }
    if let Some(a) = &cli.ablation {
        pairs.push(("run.ablation", Value::from(a.parse::<Ablation>()?.name())));
    }
    cfg = cfg.with_overrides(pairs)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let seed = match (cli.seed, cli.command.needs_seed()) {
        (Some(s), _) => s,
        (None, false) => 0,
        (None, true) => return Err(Error::Validation(format!("`{}` requires --seed", cli.command.name()))),
    };
    if cli.threads == 0 {
        return Err(Error::Validation("--threads must be >= 1".into()));
    }
    if cli.threads > 1 {
        log::info!("--threads {} recorded; sections are processed sequentially", cli.threads);
    }
    let ctx = Ctx {
        cli,
        cfg,
        seed,
        started: Instant::now(),
    };
    let extra = match ctx.cli.command {
        Command::Gen => cmd_gen(&ctx)?,
        Command::Split => cmd_split(&ctx)?,
        Command::PretrainPrior => cmd_pretrain(&ctx)?,
        Command::Train => cmd_train(&ctx)?,
        Command::Infer => cmd_infer(&ctx)?,
        Command::Eval => cmd_eval(&ctx)?,
        Command::Gradcheck => cmd_gradcheck(&ctx)?,
        Command::BenchGsa => cmd_bench(&ctx)?,
    };
    if let Some(out) = &ctx.cli.out {
        write_manifest(&ctx, out, extra)?;
    }
    Ok(())
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str, cmd: Command) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Validation(format!("`{}` requires --{flag}", cmd.name())))
}

fn out_dir(ctx: &Ctx) -> Result<&Path> {
    let out = require(&ctx.cli.out, "out", ctx.cli.command)?;
    fs::create_dir_all(out)?;
    Ok(out)
}

fn load_stack(ctx: &Ctx) -> Result<SlideStack> {
    SlideStack::load(require(&ctx.cli.stack, "stack", ctx.cli.command)?)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Appends one record per run to `<out>/manifest.jsonl`.
fn write_manifest(ctx: &Ctx, out: &Path, extra: Value) -> Result<()> {
    fs::create_dir_all(out)?;
    let record = json!({
        "command": ctx.cli.command.name(),
        "config_hash": ctx.cfg.hash(),
        "seed": ctx.seed,
        "git_describe": git_describe(),
        "wall_secs": ctx.started.elapsed().as_secs_f64(),
        "threads": ctx.cli.threads,
        "config": ctx.cfg.to_flat(),
        "result": extra,
    });
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join(MANIFEST_FILE))?;
    serde_json::to_writer(&mut f, &record)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

fn cmd_gen(ctx: &Ctx) -> Result<Value> {
    let out = out_dir(ctx)?;
    let mut synth = ctx.cfg.synth.clone();
    synth.seed = ctx.seed;
    let g = generate_stack(&synth)?;
    g.stack.save(out)?;
    println!("wrote {} sections, {} spots, {} genes to {}", g.stack.z_count(), g.stack.total_spots(), g.stack.genes(), out.display());
    Ok(json!({ "sections": g.stack.z_count(), "spots": g.stack.total_spots() }))
}

/// Split from `<checkpoint>/split.json` when present, else from the
/// configured kind and the run seed.
fn resolve_split(ctx: &Ctx, z_count: usize) -> Result<SplitSections> {
    if let Some(dir) = &ctx.cli.checkpoint {
        let p = if dir.is_dir() { dir.join(SPLIT_FILE) } else { dir.with_file_name(SPLIT_FILE) };
        if p.is_file() {
            let split: Split = serde_json::from_slice(&fs::read(&p)?)?;
            if split.roles.len() != z_count {
                return Err(Error::Validation(format!("{} covers {} sections, stack has {z_count}", p.display(), split.roles.len())));
            }
            return Ok(SplitSections::new(split));
        }
    }
    Ok(SplitSections::new(make_split(z_count, ctx.cfg.run.split, ctx.seed)?))
}

fn cmd_split(ctx: &Ctx) -> Result<Value> {
    let stack = load_stack(ctx)?;
    let out = out_dir(ctx)?;
    let s = SplitSections::new(make_split(stack.z_count(), ctx.cfg.run.split, ctx.seed)?);
    write_json(&out.join(SPLIT_FILE), &s.split)?;
    println!("train = {:?}\nvalidation = {:?}\ntest = {:?}", s.train, s.val, s.test);
    Ok(json!({ "train": s.train, "validation": s.val, "test": s.test }))
}

fn cmd_pretrain(ctx: &Ctx) -> Result<Value> {
    let truth = load_stack(ctx)?;
    let out = out_dir(ctx)?;
    let sections = resolve_split(ctx, truth.z_count())?;
    let stack = truth.masked(&sections.test);
    let (net, report) = pretrain_phase(&ctx.cfg, &stack, &sections, ctx.seed)?;
    net.to_checkpoint().save(&out.join(PRIOR_FILE))?;
    write_json(&out.join(SPLIT_FILE), &sections.split)?;
    write_json(&out.join("pretrain.json"), &report)?;
    fs::write(out.join(CONFIG_FILE), ctx.cfg.to_document())?;
    println!("best epoch {} of {}; wrote {}", report.best_epoch, report.train_nll.len().saturating_sub(1), out.join(PRIOR_FILE).display());
    Ok(json!({ "best_epoch": report.best_epoch }))
}

/// Prior checkpoint path from `--checkpoint` (a file, or a directory
/// holding `prior.ckpt`).
fn prior_path(ctx: &Ctx) -> Option<PathBuf> {
    let c = ctx.cli.checkpoint.as_ref()?;
    let p = if c.is_dir() { c.join(PRIOR_FILE) } else { c.clone() };
    p.is_file().then_some(p)
}

fn load_prior(ctx: &Ctx) -> Result<Option<PriorNet>> {
    if ctx.cfg.prior_kind() != PriorKind::LearnedZinb {
        return Ok(None);
    }
    let p = prior_path(ctx).ok_or_else(|| {
        Error::Validation("the learned prior needs --checkpoint pointing at the output of `pretrain-prior`".into())
    })?;
    Ok(Some(PriorNet::from_checkpoint(&Checkpoint::load(&p)?)?))
}

fn cmd_train(ctx: &Ctx) -> Result<Value> {
    let truth = load_stack(ctx)?;
    let out = out_dir(ctx)?;
    let sections = resolve_split(ctx, truth.z_count())?;
    let stack = truth.masked(&sections.test);
    let net = load_prior(ctx)?;
    let (model, report) = train_phase(&ctx.cfg, &stack, &sections, net.as_ref(), ctx.seed)?;
    model.to_checkpoint().save(&out.join(MODEL_FILE))?;
    if let Some(n) = &net {
        n.to_checkpoint().save(&out.join(PRIOR_FILE))?;
    }
    report.write_log(&out.join("train_log.jsonl"))?;
    write_json(&out.join(SPLIT_FILE), &sections.split)?;
    fs::write(out.join(CONFIG_FILE), ctx.cfg.to_document())?;
    let last = report.log.last();
    println!(
        "trained {} epochs (kept {}{}); final train loss {:.5}",
        report.log.len(),
        report.kept_epoch,
        if report.stopped_early { ", early stop" } else { "" },
        last.map_or(f64::NAN, |r| r.train_loss)
    );
    Ok(json!({ "epochs": report.log.len(), "kept_epoch": report.kept_epoch, "stopped_early": report.stopped_early }))
}

fn cmd_infer(ctx: &Ctx) -> Result<Value> {
    let stack = load_stack(ctx)?;
    let out = out_dir(ctx)?;
    let dir = require(&ctx.cli.checkpoint, "checkpoint", ctx.cli.command)?;
    let model = FlowModel::from_checkpoint(&ctx.cfg.model_config(), &Checkpoint::load(&dir.join(MODEL_FILE))?)?;
    let net = load_prior(ctx)?;
    let mut targets: Vec<usize> = stack.sections().iter().filter(|s| !s.is_labeled()).map(|s| s.z).collect();
    let stack = if targets.is_empty() {
        targets = resolve_split(ctx, stack.z_count())?.test;
        stack.masked(&targets)
    } else {
        stack
    };
    let preds = infer_phase(&ctx.cfg, &model, &stack, &targets, net.as_ref(), ctx.seed)?;
    write_predictions(out, &preds)?;
    println!("wrote predictions for sections {targets:?} to {}", out.display());
    Ok(json!({ "targets": targets }))
}

fn cmd_eval(ctx: &Ctx) -> Result<Value> {
    let truth = load_stack(ctx)?;
    let dir = require(&ctx.cli.pred, "pred", ctx.cli.command)?;
    let mut preds = BTreeMap::new();
    for s in truth.sections() {
        let p = dir.join(format!("pred_z{}.bin", s.z));
        if p.is_file() {
            preds.insert(s.z, read_matrix(&p)?);
        }
    }
    if preds.is_empty() {
        return Err(Error::Validation(format!("no pred_z<k>.bin files in {}", dir.display())));
    }
    let panel = eval_panel(&ctx.cfg, &truth, &resolve_split(ctx, truth.z_count())?)?;
    let metrics = score(&truth, &preds, panel.as_deref())?;
    println!("sections = {:?}", preds.keys().collect::<Vec<_>>());
    println!("{metrics}");
    if let Some(out) = &ctx.cli.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("metrics.txt"), format!("config_hash = {}\n{metrics}\n", ctx.cfg.hash()))?;
    }
    Ok(serde_json::to_value(&metrics)?)
}

fn cmd_gradcheck(ctx: &Ctx) -> Result<Value> {
    let mut prim_max: f64 = 0.0;
    let mut prims = serde_json::Map::new();
    for (name, rep) in primitive_gradchecks(ctx.seed)? {
        println!("primitive {name:<16} max rel. error {:.3e} ({} coords)", rep.max_rel_error, rep.checked);
        prim_max = prim_max.max(rep.max_rel_error);
        prims.insert(name.into(), Value::from(rep.max_rel_error));
    }
    let rep = denoiser_gradcheck(&ctx.cfg, ctx.seed, Some(GRADCHECK_ENTRIES))?;
    println!(
        "denoiser ({}) {} tensors, {} coords: per-tensor max rel. error {:.3e}; worst coordinate {} {:.3e} (analytic {:.6e}, numeric {:.6e})",
        ctx.cfg.run.ablation,
        rep.per_tensor.len(),
        rep.checked,
        rep.max_tensor_rel_error,
        rep.worst,
        rep.max_rel_error,
        rep.worst_analytic,
        rep.worst_numeric
    );
    let max = prim_max.max(rep.max_tensor_rel_error);
    println!("max rel. error {max:.3e}");
    let result = json!({
        "primitives": prims,
        "denoiser_tensor_max": rep.max_tensor_rel_error,
        "denoiser_coordinate_max": rep.max_rel_error,
        "max_rel_error": max,
    });
    if let Some(out) = &ctx.cli.out {
        fs::create_dir_all(out)?;
        write_json(&out.join("gradcheck.json"), &result)?;
    }
    if max >= GRADCHECK_TOLERANCE {
        if let Some(out) = &ctx.cli.out {
            write_manifest(ctx, out, result.clone())?;
        }
        return Err(Error::Contract(format!("gradient audit failed: {max:.3e} >= {GRADCHECK_TOLERANCE:e}")));
    }
    Ok(result)
}

fn cmd_bench(ctx: &Ctx) -> Result<Value> {
    let s = gsa_scaling(&ctx.cfg, 2000, 4000, 3, ctx.seed)?;
    println!("flops({}) / flops({}) = {:.4}", s.n_large, s.n_small, s.flop_ratio);
    println!("forward {:.4}s -> {:.4}s, ratio {:.3}", s.secs_small, s.secs_large, s.time_ratio);
    println!("dense forward at {} spots {:.4}s, {:.2}x the global-context block", s.n_large, s.dense_secs_large, s.dense_over_gsa);
    let v = serde_json::to_value(&s)?;
    if let Some(out) = &ctx.cli.out {
        fs::create_dir_all(out)?;
        write_json(&out.join("bench_gsa.json"), &v)?;
    }
    Ok(v)
}
