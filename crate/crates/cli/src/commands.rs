use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sidrec_core::data::{
    generate_synthetic, load_catalog, load_sequences, split_users, write_catalog, write_sequences, ItemId, Splits,
    UserSequence,
};
use sidrec_core::eval::{
    evaluate_split, layer_sweep, popularity_baseline, popularity_ranking, power_law_fit, write_sweep_csv, EvalMode,
    SweepSetup,
};
use sidrec_core::inference::{ItemEmbeddingMatrix, Recommender};
use sidrec_core::model::checkpoint::load_checkpoint;
use sidrec_core::pipeline::prepare_training;
use sidrec_core::tokenizer::{
    fuse_embeddings, inverted_index, load_assignments, run_tokenizer, save_assignments, save_codebook,
    save_collision_rows, single_modality_embeddings, AssignmentTable, InvertedIndex,
};
use sidrec_core::training::{last_n_average, MetricsRow, MetricsWriter, Trainer};

use crate::config::RunConfig;
use crate::{ModeArg, SplitArg};

fn require_file(path: &Path) -> Result<()> {
    ensure!(path.is_file(), "input file {} does not exist", path.display());
    Ok(())
}

fn require_dir(path: &Path) -> Result<()> {
    ensure!(path.is_dir(), "input directory {} does not exist", path.display());
    Ok(())
}

fn require_embeddings(stem: &Path) -> Result<()> {
    require_file(&stem.with_extension("bin"))?;
    require_file(&stem.with_extension("ids"))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(&cfg.out_dir)
}

fn display(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

pub fn gen_data(cfg: &RunConfig) -> Result<Value> {
    if cfg.data.n_items == 0 {
        bail!("n_items must be positive");
    }
    out_dir(cfg)?;
    let (catalog, seqs) = generate_synthetic(&cfg.data)?;
    let (items, sequences) = (cfg.catalog_path(), cfg.sequences_path());
    write_catalog(&items, &catalog)?;
    write_sequences(&sequences, &seqs)?;
    Ok(json!({
        "command": "gen-data",
        "items": catalog.total_items(),
        "users": seqs.len(),
        "artifacts": display(&[items, sequences]),
    }))
}

pub fn tokenize(cfg: &RunConfig) -> Result<Value> {
    let catalog_path = cfg.catalog_path();
    require_file(&catalog_path)?;
    let out = out_dir(cfg)?;
    let t = &cfg.tokenizer;
    let seed = cfg.master_seed();
    let catalog = load_catalog(&catalog_path)?;
    let fused = run_tokenizer("fused", &fuse_embeddings(&catalog)?, t.k, t.iters, t.top_n, seed)?;
    let mut rows = vec![fused.row.clone()];
    if t.per_modality {
        for &m in catalog.modality_dims.keys() {
            let emb = single_modality_embeddings(&catalog, m)?;
            rows.push(run_tokenizer(&format!("modality_{m}"), &emb, t.k, t.iters, t.top_n, seed)?.row);
        }
    }
    for r in &rows {
        ensure!(
            r.reassigned_conflict_rate <= r.conflict_rate,
            "re-assignment raised the conflict rate for {}",
            r.modality
        );
    }
    let paths = [
        out.join("codebook.bin"),
        cfg.assignments_path(),
        out.join("assignments_standard.csv"),
        out.join("collision.csv"),
    ];
    save_codebook(&paths[0], &fused.codebook)?;
    save_assignments(&paths[1], &fused.reassigned)?;
    save_assignments(&paths[2], &fused.standard)?;
    save_collision_rows(&paths[3], &rows)?;
    Ok(json!({
        "command": "tokenize",
        "conflict_rate": fused.row.conflict_rate,
        "reassigned_conflict_rate": fused.row.reassigned_conflict_rate,
        "artifacts": display(&paths),
    }))
}

struct TrainingInputs {
    catalog: sidrec_core::data::ItemCatalog,
    splits: Splits,
    table: AssignmentTable,
}

fn load_training_inputs(cfg: &RunConfig) -> Result<TrainingInputs> {
    let (c, s, a) = (cfg.catalog_path(), cfg.sequences_path(), cfg.assignments_path());
    require_file(&c)?;
    require_file(&s)?;
    require_file(&a)?;
    let catalog = load_catalog(&c)?;
    let seqs = load_sequences(&s)?;
    let table = load_assignments(&a)?;
    if let Some(missing) = catalog.items.iter().find(|i| table.get(i.item_id).is_none()) {
        bail!("item {} has no semantic id in {}", missing.item_id, a.display());
    }
    Ok(TrainingInputs {
        splits: split_users(&seqs, cfg.master_seed()),
        catalog,
        table,
    })
}

#[derive(Serialize)]
struct TrainSummary {
    steps: u64,
    epoch: u64,
    params: usize,
    examples: usize,
    step10_l_total: Option<f64>,
    last100: sidrec_core::training::LossBreakdown,
    last_gini: Vec<f64>,
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>, stop_at: Option<u64>) -> Result<Value> {
    if let Some(r) = resume {
        require_dir(r)?;
        require_file(&r.join("manifest.json"))?;
    }
    let inputs = load_training_inputs(cfg)?;
    let out = out_dir(cfg)?;
    let seed = cfg.master_seed();
    let split_paths = [out.join("train.jsonl"), out.join("valid.jsonl"), out.join("test.jsonl")];
    write_sequences(&split_paths[0], &inputs.splits.train)?;
    write_sequences(&split_paths[1], &inputs.splits.valid)?;
    write_sequences(&split_paths[2], &inputs.splits.test)?;

    let prep = prepare_training(&inputs.catalog, &inputs.splits.train, &inputs.table, &cfg.model, &cfg.train, seed)?;
    let n_examples = prep.examples.len();
    let mut trainer = match resume {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            ensure!(
                ck.model.config.vocab_size == prep.model.config.vocab_size,
                "checkpoint vocabulary does not match the catalog"
            );
            Trainer::resume(ck, cfg.train.clone(), prep.examples)?
        }
        None => Trainer::new(prep.model, cfg.train.clone(), prep.examples)?,
    };
    let metrics_path = out.join("metrics.csv");
    let mut writer = MetricsWriter::create(&metrics_path, trainer.model.config.n_layers)?;
    let stop = stop_at.unwrap_or(u64::MAX);
    let mut rows: Vec<MetricsRow> = Vec::new();
    while !trainer.is_done() && trainer.step < stop {
        let row = trainer.train_step()?;
        log::info!("step {} L_total {:.4}", row.step, row.loss.l_total);
        writer.write(&row)?;
        rows.push(row);
    }
    writer.finish()?;

    let ck_dir = cfg.checkpoint_path();
    trainer.save(&ck_dir)?;
    let stem = cfg.embeddings_stem();
    if let Some(parent) = stem.parent() {
        fs::create_dir_all(parent)?;
    }
    ItemEmbeddingMatrix::from_model(&trainer.model, &prep.observed)?.save(&stem)?;

    let summary = TrainSummary {
        steps: trainer.step,
        epoch: trainer.epoch(),
        params: trainer.model.params.param_count(),
        examples: n_examples,
        step10_l_total: rows.iter().find(|r| r.step == 10).map(|r| r.loss.l_total),
        last100: last_n_average(&rows, 100),
        last_gini: rows.last().map(|r| r.gini.clone()).unwrap_or_default(),
    };
    let summary_path = out.join("train_summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;

    let mut artifacts = split_paths.to_vec();
    artifacts.extend([
        metrics_path,
        ck_dir,
        stem.with_extension("bin"),
        stem.with_extension("ids"),
        summary_path,
    ]);
    Ok(json!({
        "command": "train",
        "steps": trainer.step,
        "l_total_last100": summary.last100.l_total,
        "artifacts": display(&artifacts),
    }))
}

struct Served {
    model: sidrec_core::model::Model<f32>,
    epoch: u64,
    index: InvertedIndex,
    table: AssignmentTable,
    embeddings: ItemEmbeddingMatrix,
    cold: HashSet<ItemId>,
}

impl Served {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let (ck, a, stem) = (cfg.checkpoint_path(), cfg.assignments_path(), cfg.embeddings_stem());
        require_dir(&ck)?;
        require_file(&a)?;
        require_embeddings(&stem)?;
        let ck = load_checkpoint(&ck)?;
        let table = load_assignments(&a)?;
        let embeddings = ItemEmbeddingMatrix::load(&stem)?;
        let index = inverted_index(&table);
        let cold = index
            .values()
            .flatten()
            .copied()
            .filter(|i| !embeddings.contains(*i))
            .collect();
        Ok(Self {
            model: ck.model,
            epoch: ck.epoch,
            index,
            table,
            embeddings,
            cold,
        })
    }

    fn recommender(&self) -> Recommender<'_> {
        Recommender {
            model: &self.model,
            index: &self.index,
            embeddings: &self.embeddings,
            cold_start: &self.cold,
        }
    }
}

#[derive(Serialize)]
struct RecLine {
    user_id: u64,
    items: Vec<ItemId>,
    scores: Vec<f64>,
}

pub fn infer(cfg: &RunConfig, input: Option<PathBuf>, output: Option<PathBuf>) -> Result<Value> {
    let input = input.unwrap_or_else(|| cfg.out_dir.join("test.jsonl"));
    require_file(&input)?;
    cfg.inference.validate()?;
    let served = Served::load(cfg)?;
    let out = out_dir(cfg)?;
    let output = output.unwrap_or_else(|| out.join("recommendations.jsonl"));
    let seqs = load_sequences(&input)?;
    let rec = served.recommender();
    let lines: Vec<RecLine> = seqs
        .par_iter()
        .map(|s| {
            let recs = if s.history.is_empty() {
                Vec::new()
            } else {
                rec.recommend(&s.history, &cfg.inference)?
            };
            Ok(RecLine {
                user_id: s.user_id,
                items: recs.iter().map(|r| r.0).collect(),
                scores: recs.iter().map(|r| r.1).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let file = File::create(&output).with_context(|| format!("creating {}", output.display()))?;
    let mut w = BufWriter::new(file);
    for l in &lines {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(json!({
        "command": "infer",
        "users": lines.len(),
        "artifacts": display(&[output]),
    }))
}

#[derive(Serialize)]
struct EvalRow {
    mode: &'static str,
    split: &'static str,
    epoch: u64,
    n_users: usize,
    hr_at_10: Option<f64>,
    ndcg_at_10: Option<f64>,
    sid1_hr_at_10: Option<f64>,
    sid2_hr_at_10: Option<f64>,
    model_size_params: usize,
}

pub fn eval(cfg: &RunConfig, mode: ModeArg, split: SplitArg) -> Result<Value> {
    let split_name = match split {
        SplitArg::Valid => "valid",
        SplitArg::Test => "test",
    };
    let split_path = cfg.out_dir.join(format!("{split_name}.jsonl"));
    let train_path = cfg.out_dir.join("train.jsonl");
    require_file(&split_path)?;
    require_file(&train_path)?;
    cfg.inference.validate()?;
    let served = Served::load(cfg)?;
    let users: Vec<UserSequence> = load_sequences(&split_path)?;
    let train: Vec<UserSequence> = load_sequences(&train_path)?;
    let (mode_name, eval_mode) = match mode {
        ModeArg::Cascade => ("cascade", EvalMode::Cascade(cfg.inference.clone())),
        ModeArg::DualTower => (
            "dual_tower",
            EvalMode::DualTower {
                top_n: cfg.inference.top_n,
            },
        ),
        ModeArg::Sid => (
            "sid",
            EvalMode::SidOnly {
                beam_width: cfg.inference.beam_width,
                rule: cfg.eval.sid2_rule,
            },
        ),
    };
    let result = evaluate_split(&served.recommender(), &users, &eval_mode, Some(&served.table))?;
    let params = served.model.params.param_count();
    let is_sid = mode == ModeArg::Sid;
    let servable: BTreeSet<ItemId> = served.embeddings.item_ids.iter().copied().collect();
    let (pop_hr, pop_ndcg) = popularity_baseline(&users, &popularity_ranking(&train, &servable), 10)?;
    let rows = [
        EvalRow {
            mode: mode_name,
            split: split_name,
            epoch: served.epoch,
            n_users: result.n_users,
            hr_at_10: (!is_sid).then_some(result.hr),
            ndcg_at_10: (!is_sid).then_some(result.ndcg),
            sid1_hr_at_10: result.sid1_hr,
            sid2_hr_at_10: result.sid2_hr,
            model_size_params: params,
        },
        EvalRow {
            mode: "popularity",
            split: split_name,
            epoch: served.epoch,
            n_users: result.n_users,
            hr_at_10: Some(pop_hr),
            ndcg_at_10: Some(pop_ndcg),
            sid1_hr_at_10: None,
            sid2_hr_at_10: None,
            model_size_params: 0,
        },
    ];
    let out = out_dir(cfg)?;
    let path = out.join("eval.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(json!({
        "command": "eval",
        "mode": mode_name,
        "split": split_name,
        "hr_at_10": rows[0].hr_at_10,
        "ndcg_at_10": rows[0].ndcg_at_10,
        "sid1_hr_at_10": result.sid1_hr,
        "sid2_hr_at_10": result.sid2_hr,
        "popularity_hr_at_10": pop_hr,
        "artifacts": display(&[path]),
    }))
}

pub fn sweep(cfg: &RunConfig) -> Result<Value> {
    ensure!(!cfg.sweep.layers.is_empty(), "no depths requested");
    let inputs = load_training_inputs(cfg)?;
    let out = out_dir(cfg)?;
    let setup = SweepSetup {
        catalog: &inputs.catalog,
        train: &inputs.splits.train,
        table: &inputs.table,
        model: cfg.model.clone(),
        training: cfg.train.clone(),
        init_seed: cfg.master_seed(),
    };
    let rows = layer_sweep(&setup, &cfg.sweep.layers)?;
    let csv_path = out.join("sweep.csv");
    write_sweep_csv(&csv_path, &rows)?;
    let mut artifacts = vec![csv_path];
    let sizes: Vec<f64> = rows.iter().map(|r| r.params as f64).collect();
    let losses: Vec<f64> = rows.iter().map(|r| r.loss).collect();
    let fit = if rows.len() >= 3 {
        let fit = power_law_fit(&sizes, &losses)?;
        let path = out.join("power_law.json");
        let body = json!({ "x": "params", "y": "loss", "a": fit.a, "b": fit.b, "r2": fit.r2 });
        fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")?;
        artifacts.push(path);
        Some(fit)
    } else {
        log::warn!("fewer than 3 depths; skipping the power-law fit");
        None
    };
    Ok(json!({
        "command": "sweep",
        "rows": rows.len(),
        "fit": fit,
        "artifacts": display(&artifacts),
    }))
}
