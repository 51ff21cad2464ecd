//! `sidrec`: data generation, tokenization, training, inference, evaluation
//! and depth sweeps behind one binary and one JSON config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "sidrec", version, about = "Semantic-ID generative retrieval pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON run config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic clustered catalog and user sequences.
    GenData(GenDataArgs),
    /// Fit residual K-means, assign and de-collide semantic IDs.
    Tokenize(TokenizeArgs),
    /// Train the encoder and write a checkpoint, metrics and item embeddings.
    Train(TrainArgs),
    /// Recommend for every sequence of an input file.
    Infer(InferArgs),
    /// HR@10 / NDCG@10 on a held-out split, next to a popularity baseline.
    Eval(EvalArgs),
    /// Train one model per depth and fit a power law to the final losses.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n_items: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n_users: Option<u64>,
}

#[derive(Debug, Args)]
struct TokenizeArgs {
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    /// Add one collision row per modality.
    #[arg(long)]
    per_modality: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Codebook size per level; must match the tokenizer's.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    sequences: Option<PathBuf>,
    #[arg(long)]
    assignments: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    /// Total optimizer steps; also sets the schedule length.
    #[arg(long)]
    steps: Option<u64>,
    /// Stop after this many steps without shortening the schedule.
    #[arg(long)]
    stop_at: Option<u64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    balance_weight: Option<f64>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArtifacts {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    assignments: Option<PathBuf>,
    /// Stem of the `.bin`/`.ids` embedding files.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    artifacts: ModelArtifacts,
    /// Sequences to recommend for (default: the test split).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    k_prime: Option<usize>,
    #[arg(long)]
    topn: Option<usize>,
    #[arg(long)]
    constrain_to_index: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Cascade,
    DualTower,
    Sid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Sid2RuleArg {
    Joint,
    Conditional,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    artifacts: ModelArtifacts,
    #[arg(long, value_enum, default_value_t = ModeArg::Cascade)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, value_enum)]
    sid2_rule: Option<Sid2RuleArg>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    k_prime: Option<usize>,
    #[arg(long)]
    constrain_to_index: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Codebook size per level; must match the tokenizer's.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    sequences: Option<PathBuf>,
    #[arg(long)]
    assignments: Option<PathBuf>,
    /// Comma-separated depths, e.g. `1,2,4`.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": message, "kind": kind }));
    ExitCode::from(if kind == "usage" { 2 } else { 1 })
}

fn resolve(global: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if global.seed.is_some() {
        cfg.seed = global.seed;
    }
    if let Some(t) = global.threads {
        cfg.threads = Some(t as usize);
    }
    if let Some(d) = &global.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.apply_seed();
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: Option<PathBuf>) {
    if v.is_some() {
        *slot = v;
    }
}

fn apply_artifacts(cfg: &mut RunConfig, a: ModelArtifacts) {
    set_path(&mut cfg.paths.checkpoint, a.checkpoint);
    set_path(&mut cfg.paths.assignments, a.assignments);
    set_path(&mut cfg.paths.embeddings, a.embeddings);
}

fn dispatch(cfg: &mut RunConfig, command: Command) -> anyhow::Result<serde_json::Value> {
    match command {
        Command::GenData(a) => {
            set(&mut cfg.data.n_items, a.n_items.map(|n| n as usize));
            set(&mut cfg.data.n_users, a.n_users.map(|n| n as usize));
            commands::gen_data(cfg)
        }
        Command::Tokenize(a) => {
            set_path(&mut cfg.paths.catalog, a.catalog);
            if let Some(k) = a.k {
                cfg.set_codebook_size(k);
            }
            set(&mut cfg.tokenizer.top_n, a.top_n);
            set(&mut cfg.tokenizer.iters, a.iters);
            cfg.tokenizer.per_modality |= a.per_modality;
            cfg.check_codebook_size()?;
            commands::tokenize(cfg)
        }
        Command::Train(a) => {
            set_path(&mut cfg.paths.catalog, a.catalog);
            set_path(&mut cfg.paths.sequences, a.sequences);
            set_path(&mut cfg.paths.assignments, a.assignments);
            if let Some(k) = a.k {
                cfg.set_codebook_size(k);
            }
            set(&mut cfg.model.n_layers, a.layers);
            set(&mut cfg.model.lambda1, a.lambda1);
            set(&mut cfg.model.lambda2, a.lambda2);
            set(&mut cfg.model.balance_loss_weight, a.balance_weight);
            if a.steps.is_some() {
                cfg.train.max_steps = a.steps;
            }
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.optimizer.lr, a.lr);
            set(&mut cfg.train.batch_size, a.batch_size);
            cfg.check_codebook_size()?;
            commands::train(cfg, a.resume.as_deref(), a.stop_at)
        }
        Command::Infer(a) => {
            apply_artifacts(cfg, a.artifacts);
            set(&mut cfg.inference.beam_width, a.beam_width);
            set(&mut cfg.inference.k_prime, a.k_prime);
            set(&mut cfg.inference.top_n, a.topn);
            cfg.inference.constrain_to_index |= a.constrain_to_index;
            commands::infer(cfg, a.input, a.output)
        }
        Command::Eval(a) => {
            apply_artifacts(cfg, a.artifacts);
            set(&mut cfg.inference.beam_width, a.beam_width);
            set(&mut cfg.inference.k_prime, a.k_prime);
            cfg.inference.constrain_to_index |= a.constrain_to_index;
            if let Some(r) = a.sid2_rule {
                cfg.eval.sid2_rule = match r {
                    Sid2RuleArg::Joint => sidrec_core::eval::Sid2Rule::JointBeam,
                    Sid2RuleArg::Conditional => sidrec_core::eval::Sid2Rule::Conditional,
                };
            }
            commands::eval(cfg, a.mode, a.split)
        }
        Command::Sweep(a) => {
            set_path(&mut cfg.paths.catalog, a.catalog);
            set_path(&mut cfg.paths.sequences, a.sequences);
            set_path(&mut cfg.paths.assignments, a.assignments);
            if let Some(k) = a.k {
                cfg.set_codebook_size(k);
            }
            set(&mut cfg.sweep.layers, a.layers);
            if a.steps.is_some() {
                cfg.train.max_steps = a.steps;
            }
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.optimizer.lr, a.lr);
            set(&mut cfg.train.batch_size, a.batch_size);
            cfg.check_codebook_size()?;
            commands::sweep(cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim()),
    };
    let mut cfg = match resolve(&cli.global) {
        Ok(c) => c,
        Err(e) => return fail("usage", &format!("{e:#}")),
    };
    if let Some(n) = cfg.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail("runtime", &e.to_string());
        }
    }
    match dispatch(&mut cfg, cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail("runtime", &format!("{e:#}")),
    }
}
