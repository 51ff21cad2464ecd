mod common;

use std::collections::{BTreeMap, HashSet};
use std::fs;

use common::{read_csv, sidrec, snapshot, trained_fixture, SMALL_DATA, SMALL_TOKENIZE};
use sidrec_core::data::{load_catalog, load_sequences, write_catalog, ItemCatalog, ItemRecord};
use sidrec_core::model::checkpoint::load_checkpoint;
use sidrec_core::model::Params;
use sidrec_core::tokenizer::load_assignments;
use tempfile::tempdir;

#[test]
fn gen_data_defaults_are_loadable() {
    let d = tempdir().unwrap();
    let s = sidrec(d.path(), SMALL_DATA).ok().summary();
    assert_eq!(s["items"], 300);
    let catalog = load_catalog(&d.path().join("items.jsonl")).unwrap();
    assert_eq!(catalog.total_items(), 300);
    assert_eq!(load_sequences(&d.path().join("sequences.jsonl")).unwrap().len(), 240);
}

#[test]
fn gen_data_same_seed_same_bytes() {
    let (a, b, c) = (tempdir().unwrap(), tempdir().unwrap(), tempdir().unwrap());
    for d in [&a, &b] {
        sidrec(d.path(), &["--seed", "7", "gen-data", "--n-items", "200", "--n-users", "50"]).ok();
    }
    sidrec(c.path(), &["--seed", "8", "gen-data", "--n-items", "200", "--n-users", "50"]).ok();
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
    assert_ne!(snapshot(a.path()), snapshot(c.path()));
}

#[test]
fn zero_items_is_a_usage_error() {
    let d = tempdir().unwrap();
    let r = sidrec(d.path(), &["gen-data", "--n-items", "0"]);
    assert_eq!(r.status, 2);
    assert_eq!(r.error()["kind"], "usage");
    assert!(!d.path().join("items.jsonl").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let d = tempdir().unwrap();
    let cfg = d.path().join("run.json");
    fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let r = sidrec(d.path(), &["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert_eq!(r.status, 2);
    assert!(r.error()["error"].as_str().unwrap().contains("learning_rate"));
}

#[test]
fn config_values_apply_and_flags_win() {
    let d = tempdir().unwrap();
    let cfg = d.path().join("run.json");
    fs::write(&cfg, r#"{"data": {"n_items": 120, "n_users": 30}}"#).unwrap();
    let c = cfg.to_str().unwrap();
    let s = sidrec(d.path(), &["--config", c, "gen-data"]).ok().summary();
    assert_eq!((s["items"].as_u64(), s["users"].as_u64()), (Some(120), Some(30)));
    let s = sidrec(d.path(), &["--config", c, "gen-data", "--n-items", "90"]).ok().summary();
    assert_eq!(s["items"], 90);
}

#[test]
fn tokenize_reassignment_never_raises_conflicts() {
    let d = tempdir().unwrap();
    sidrec(d.path(), SMALL_DATA).ok();
    sidrec(d.path(), &["tokenize", "--k", "8", "--iters", "8", "--per-modality"]).ok();
    let rows = read_csv(&d.path().join("collision.csv"));
    assert!(rows.len() > 1);
    assert_eq!(rows[0]["modality"], "fused");
    for r in &rows {
        let before: f64 = r["conflict_rate"].parse().unwrap();
        let after: f64 = r["reassigned_conflict_rate"].parse().unwrap();
        assert!(after <= before, "{r:?}");
    }
    let table = load_assignments(&d.path().join("assignments.csv")).unwrap();
    assert_eq!(table.len(), 300);
}

#[test]
fn four_items_with_k4_have_no_conflicts() {
    let d = tempdir().unwrap();
    let items = (0..4u64)
        .map(|i| {
            let mut v = vec![0.0f32; 4];
            v[i as usize] = 1.0;
            ItemRecord {
                item_id: i,
                modality_embeddings: BTreeMap::from([(81, v)]),
                static_features: vec![],
                popularity_count: 0,
            }
        })
        .collect();
    write_catalog(&d.path().join("items.jsonl"), &ItemCatalog::new(items).unwrap()).unwrap();
    sidrec(d.path(), &["tokenize", "--k", "4"]).ok();
    let rows = read_csv(&d.path().join("collision.csv"));
    assert_eq!(rows[0]["conflicts"], "0");
    assert_eq!(rows[0]["reassigned_conflicts"], "0");
}

#[test]
fn missing_catalog_is_a_clear_error() {
    let d = tempdir().unwrap();
    let r = sidrec(d.path(), &["tokenize", "--catalog", "/definitely/not/here.jsonl"]);
    assert_eq!(r.status, 1);
    let e = r.error();
    assert_eq!(e["kind"], "runtime");
    assert!(e["error"].as_str().unwrap().contains("/definitely/not/here.jsonl"));
}

#[test]
fn mismatched_codebook_sizes_are_rejected() {
    let d = tempdir().unwrap();
    let cfg = d.path().join("run.json");
    fs::write(&cfg, r#"{"tokenizer": {"k": 16}}"#).unwrap();
    let r = sidrec(d.path(), &["--config", cfg.to_str().unwrap(), "tokenize"]);
    assert_ne!(r.status, 0);
    assert!(r.error()["error"].as_str().unwrap().contains("codebook_size"));
}

#[test]
fn train_writes_checkpoint_and_metrics() {
    let d = tempdir().unwrap();
    sidrec(d.path(), SMALL_DATA).ok();
    sidrec(d.path(), SMALL_TOKENIZE).ok();
    let s = sidrec(d.path(), &["train", "--k", "16", "--layers", "1", "--steps", "50", "--batch-size", "16"])
        .ok()
        .summary();
    assert_eq!(s["steps"], 50);
    let rows = read_csv(&d.path().join("metrics.csv"));
    assert_eq!(rows.len(), 50);
    assert_eq!(rows[49]["step"], "50");
    assert!(rows[0].contains_key("gini_layer_0"));
    let ck = load_checkpoint(&d.path().join("checkpoint")).unwrap();
    assert_eq!((ck.step, ck.model.config.n_layers), (50, 1));
    assert!(d.path().join("item_embeddings.bin").is_file());
}

#[test]
fn zero_lambdas_leave_sid_heads_at_init() {
    let d = tempdir().unwrap();
    sidrec(d.path(), SMALL_DATA).ok();
    sidrec(d.path(), SMALL_TOKENIZE).ok();
    sidrec(
        d.path(),
        &["--seed", "42", "train", "--k", "16", "--layers", "1", "--steps", "10", "--batch-size", "16", "--lambda1", "0", "--lambda2", "0"],
    )
    .ok();
    let ck = load_checkpoint(&d.path().join("checkpoint")).unwrap();
    let init = Params::<f32>::init(&ck.model.config, 42);
    let init_named: BTreeMap<String, _> = init.named().into_iter().collect();
    let mut heads = 0;
    let mut moved = false;
    for (name, t) in ck.model.params.named() {
        if name.starts_with("sid1.") || name.starts_with("sid2.") {
            assert_eq!(t, init_named[&name], "{name} changed");
            heads += 1;
        } else if t != init_named[&name] {
            moved = true;
        }
    }
    assert!(heads > 0 && moved);
    let ln_k = 16f64.ln();
    for r in read_csv(&d.path().join("metrics.csv")) {
        for col in ["L_c1", "L_c2"] {
            let v: f64 = r[col].parse().unwrap();
            assert!((v - ln_k).abs() < 0.15, "{col} = {v}, ln K = {ln_k}");
        }
        let total: f64 = r["L_total"].parse().unwrap();
        let con: f64 = r["L_con"].parse().unwrap();
        assert_eq!(total, con);
    }
}

#[test]
fn resume_reproduces_the_next_steps() {
    let full = tempdir().unwrap();
    let part = tempdir().unwrap();
    let rest = tempdir().unwrap();
    for d in [&full, &part, &rest] {
        sidrec(d.path(), SMALL_DATA).ok();
        sidrec(d.path(), SMALL_TOKENIZE).ok();
    }
    let train = ["train", "--k", "16", "--layers", "1", "--steps", "6", "--batch-size", "32"];
    sidrec(full.path(), &train).ok();
    let mut stopped = train.to_vec();
    stopped.extend(["--stop-at", "3"]);
    sidrec(part.path(), &stopped).ok();
    let ck = part.path().join("checkpoint");
    let mut resumed = train.to_vec();
    resumed.extend(["--resume", ck.to_str().unwrap()]);
    sidrec(rest.path(), &resumed).ok();

    let a = read_csv(&full.path().join("metrics.csv"));
    let b = read_csv(&part.path().join("metrics.csv"));
    let c = read_csv(&rest.path().join("metrics.csv"));
    assert_eq!((a.len(), b.len(), c.len()), (6, 3, 3));
    assert_eq!(a[..3], b[..]);
    assert_eq!(a[3..], c[..]);
    assert_eq!(
        fs::read(full.path().join("item_embeddings.bin")).unwrap(),
        fs::read(rest.path().join("item_embeddings.bin")).unwrap()
    );
}

#[test]
fn infer_lines_are_short_and_exclude_history() {
    let d = tempdir().unwrap();
    trained_fixture(d.path());
    let s = sidrec(d.path(), &["infer"]).ok().summary();
    let input = load_sequences(&d.path().join("test.jsonl")).unwrap();
    assert_eq!(s["users"].as_u64().unwrap() as usize, input.len());
    let text = fs::read_to_string(d.path().join("recommendations.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), input.len());
    for (line, seq) in lines.iter().zip(&input) {
        assert_eq!(line["user_id"], seq.user_id);
        let items: Vec<u64> = serde_json::from_value(line["items"].clone()).unwrap();
        let scores: Vec<f64> = serde_json::from_value(line["scores"].clone()).unwrap();
        assert!(items.len() <= 10);
        assert_eq!(items.len(), scores.len());
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        let hist: HashSet<u64> = seq.history.iter().copied().collect();
        assert!(items.iter().all(|i| !hist.contains(i)));
    }
}

#[test]
fn constrained_inference_never_comes_back_empty() {
    let d = tempdir().unwrap();
    trained_fixture(d.path());
    sidrec(d.path(), &["infer", "--constrain-to-index", "--beam-width", "4", "--k-prime", "16"]).ok();
    let text = fs::read_to_string(d.path().join("recommendations.jsonl")).unwrap();
    for l in text.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(!v["items"].as_array().unwrap().is_empty(), "{l}");
    }
}

#[test]
fn eval_writes_model_and_popularity_rows() {
    let d = tempdir().unwrap();
    trained_fixture(d.path());
    for (mode, filled) in [("cascade", "hr_at_10"), ("dual-tower", "hr_at_10"), ("sid", "sid1_hr_at_10")] {
        sidrec(d.path(), &["eval", "--mode", mode, "--split", "valid"]).ok();
        let rows = read_csv(&d.path().join("eval.csv"));
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0]["split"], "valid");
        assert_eq!(rows[1]["mode"], "popularity");
        let v: f64 = rows[0][filled].parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn eval_without_a_checkpoint_fails_cleanly() {
    let d = tempdir().unwrap();
    sidrec(d.path(), SMALL_DATA).ok();
    let r = sidrec(d.path(), &["eval"]);
    assert_eq!(r.status, 1);
    assert_eq!(r.error()["kind"], "runtime");
}

#[test]
fn sweep_rows_match_depths_and_fit_is_reproducible() {
    let d = tempdir().unwrap();
    sidrec(d.path(), SMALL_DATA).ok();
    sidrec(d.path(), SMALL_TOKENIZE).ok();
    sidrec(d.path(), &["sweep", "--k", "16", "--layers", "1,2,3", "--steps", "6", "--batch-size", "32"]).ok();
    let rows = sidrec_core::eval::read_sweep_csv(&d.path().join("sweep.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.layers).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(rows.windows(2).all(|w| w[0].params < w[1].params));
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("power_law.json")).unwrap()).unwrap();
    let sizes: Vec<f64> = rows.iter().map(|r| r.params as f64).collect();
    let losses: Vec<f64> = rows.iter().map(|r| r.loss).collect();
    let again = sidrec_core::eval::power_law_fit(&sizes, &losses).unwrap();
    for (key, want) in [("a", again.a), ("b", again.b), ("r2", again.r2)] {
        let got = fit[key].as_f64().unwrap();
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{key}: {got} vs {want}");
    }
}

#[test]
fn sweep_with_two_depths_skips_the_fit() {
    let d = tempdir().unwrap();
    sidrec(d.path(), SMALL_DATA).ok();
    sidrec(d.path(), SMALL_TOKENIZE).ok();
    sidrec(d.path(), &["sweep", "--k", "16", "--layers", "1,2", "--steps", "4", "--batch-size", "32"]).ok();
    assert_eq!(read_csv(&d.path().join("sweep.csv")).len(), 2);
    assert!(!d.path().join("power_law.json").exists());
}
